"""Micro multimodal decoder-only transformer.

Visual tokens enter through their own embedding table and sit as a
prefix; text follows; generation is autoregressive with a per-layer
key/value cache. Two forward paths exist and must agree:

* the incremental decode path (``forward`` / ``sample``), driven by the
  selected kernel backend one position at a time, which also captures
  per-step attention rows; and
* the batched teacher-forced path (``forward_full`` / ``score_response``),
  built from autograd ops so training can differentiate through it.

``score_response`` replays decode-time visual injections from their
script: a token whose emission triggered an injection was predicted
*before* the injected block existed, so its log-prob is gathered from
the position just before the block rather than from its physical
predecessor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tensor

PROMPT_TEXT = "prompt_text"
VISUAL = "visual"
GENERATED = "generated"
INJECTED_VISUAL = "injected_visual"

_VISUAL_ORIGINS = (VISUAL, INJECTED_VISUAL)

CHECKPOINT_MAGIC = b"MVCK"
CHECKPOINT_VERSION = 1


class CapacityError(RuntimeError):
    """Sequence grew past the model's position table."""


class ReplayError(ValueError):
    """Injection script does not match the response being scored."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    visual_vocab_size: int
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = 512
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def ff_dim(self) -> int:
        return 4 * self.dim


@dataclass(frozen=True)
class InjectionEvent:
    """One decode-time visual insertion, keyed by generated-step index."""

    step: int
    mode: str
    injected_ids: tuple

    def to_json(self) -> dict:
        return {"step": self.step, "mode": self.mode, "injected_ids": list(self.injected_ids)}

    @staticmethod
    def from_json(d: dict) -> "InjectionEvent":
        return InjectionEvent(step=d["step"], mode=d["mode"], injected_ids=tuple(d["injected_ids"]))


@dataclass
class AttnStep:
    gen_index: int
    pos_index: int
    weights: np.ndarray  # [layers, heads, pos_index + 1]


class AttnRecord:
    """Per-generated-step attention rows plus the visual span bookkeeping."""

    def __init__(self, visual_span: tuple[int, int]):
        self.steps: list[AttnStep] = []
        self.visual_span = visual_span
        self.injected_positions: list[int] = []

    def __len__(self) -> int:
        return len(self.steps)

    def visual_positions(self, ctx_len: int, include_injected: bool = True) -> np.ndarray:
        lo, hi = self.visual_span
        positions = list(range(lo, min(hi, ctx_len)))
        if include_injected:
            positions += [p for p in self.injected_positions if p < ctx_len]
        return np.asarray(sorted(positions), dtype=np.int64)


def attention_to_visual(record: AttnRecord, t: int) -> float:
    """Mean over layers/heads of the attention mass on visual positions at step t."""
    step = record.steps[t]
    ctx = step.weights.shape[-1]
    vis = record.visual_positions(ctx)
    if vis.size == 0:
        return 0.0
    return float(step.weights[:, :, vis].sum(axis=-1).mean())


class SequenceState:
    """Live decode buffer: labeled positions plus per-layer KV caches."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.origins: list[str] = []
        self.ids: list[int] = []
        self.processed = 0
        shape = (cfg.max_positions, cfg.n_heads, cfg.head_dim)
        self.kcache = [np.zeros(shape, dtype=np.float32) for _ in range(cfg.n_layers)]
        self.vcache = [np.zeros(shape, dtype=np.float32) for _ in range(cfg.n_layers)]
        # reused attention buffer for passes that do not keep records
        self.attn_scratch = np.empty(cfg.n_heads * cfg.max_positions, dtype=np.float32)

    def __len__(self) -> int:
        return len(self.origins)

    def append(self, origin: str, token_id: int) -> None:
        if origin not in (PROMPT_TEXT, VISUAL, GENERATED, INJECTED_VISUAL):
            raise ValueError(f"unknown origin {origin!r}")
        if len(self.origins) >= self.cfg.max_positions:
            raise CapacityError(f"sequence full at {self.cfg.max_positions} positions")
        self.origins.append(origin)
        self.ids.append(int(token_id))

    def pop_unprocessed(self) -> tuple[str, int]:
        """Remove and return the newest position; it must not be in the cache yet."""
        if len(self.origins) <= self.processed:
            raise RuntimeError("cannot pop a position that was already processed")
        return self.origins.pop(), self.ids.pop()

    def counts(self) -> tuple[int, int, int, int]:
        """(L_x, L_c, L_y, k) by origin label."""
        lx = self.origins.count(PROMPT_TEXT)
        lc = self.origins.count(VISUAL)
        ly = self.origins.count(GENERATED)
        k = self.origins.count(INJECTED_VISUAL)
        return lx, lc, ly, k

    def visual_span(self) -> tuple[int, int]:
        """Contiguous span of the original visual prefix (empty span if none)."""
        try:
            lo = self.origins.index(VISUAL)
        except ValueError:
            return (0, 0)
        hi = lo
        while hi < len(self.origins) and self.origins[hi] == VISUAL:
            hi += 1
        return (lo, hi)

    def remaining_capacity(self) -> int:
        return self.cfg.max_positions - len(self.origins)

    def snapshot(self) -> list[tuple[str, int]]:
        return list(zip(self.origins, self.ids))


@dataclass
class SampleResult:
    tokens: list  # generated token ids, in emission order
    logps: np.ndarray  # aligned 1:1 with tokens (raw-logit log-probs)
    record: Optional[AttnRecord]
    script: list  # list[InjectionEvent]
    stop_reason: str
    state: SequenceState


# Hook contract: called as hook(model, state, token_id, record, script) right
# after a sampled token is appended and before the next forward. It may pop
# the just-emitted (still uncached) token to displace it behind an injected
# block and may append positions; it must never disturb older positions.
SamplingHook = Callable[["Model", SequenceState, int, Optional[AttnRecord], list], None]

_LAYER_PARTS = (
    "ln1.g", "ln1.b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2.g", "ln2.b",
    "w1", "bm1", "w2", "bm2",
)


class Model:
    """Parameters plus the two forward paths."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)
        self._decode_args_cache: dict | None = None

    # --- parameters ---------------------------------------------------------

    def _init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        cfg = self.cfg

        def normal(*shape):
            return Tensor((rng.standard_normal(shape) * 0.02).astype(np.float32), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n, dtype=np.float32), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

        p = self.params
        p["text_emb"] = normal(cfg.vocab_size, cfg.dim)
        p["vis_emb"] = normal(cfg.visual_vocab_size, cfg.dim)
        p["pos_emb"] = normal(cfg.max_positions, cfg.dim)
        for i in range(cfg.n_layers):
            p[f"l{i}.ln1.g"] = ones(cfg.dim)
            p[f"l{i}.ln1.b"] = zeros(cfg.dim)
            p[f"l{i}.wq"] = normal(cfg.dim, cfg.dim)
            p[f"l{i}.bq"] = zeros(cfg.dim)
            p[f"l{i}.wk"] = normal(cfg.dim, cfg.dim)
            p[f"l{i}.bk"] = zeros(cfg.dim)
            p[f"l{i}.wv"] = normal(cfg.dim, cfg.dim)
            p[f"l{i}.bv"] = zeros(cfg.dim)
            p[f"l{i}.wo"] = normal(cfg.dim, cfg.dim)
            p[f"l{i}.bo"] = zeros(cfg.dim)
            p[f"l{i}.ln2.g"] = ones(cfg.dim)
            p[f"l{i}.ln2.b"] = zeros(cfg.dim)
            p[f"l{i}.w1"] = normal(cfg.dim, cfg.ff_dim)
            p[f"l{i}.bm1"] = zeros(cfg.ff_dim)
            p[f"l{i}.w2"] = normal(cfg.ff_dim, cfg.dim)
            p[f"l{i}.bm2"] = zeros(cfg.dim)
        p["ln_f.g"] = ones(cfg.dim)
        p["ln_f.b"] = zeros(cfg.dim)
        p["head.w"] = normal(cfg.dim, cfg.vocab_size)

    def parameters(self):
        return self.params.items()

    def set_visual_frozen(self, frozen: bool) -> None:
        """Freeze the visual embedding table (the 'vision tower' analog)."""
        self.params["vis_emb"].requires_grad = not frozen

    @property
    def visual_frozen(self) -> bool:
        return not self.params["vis_emb"].requires_grad

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def invalidate_param_cache(self) -> None:
        self._decode_args_cache = None

    def clone(self) -> "Model":
        other = Model.__new__(Model)
        other.cfg = self.cfg
        other.params = {
            name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        other._decode_args_cache = None
        return other

    def copy_params_from(self, other: "Model") -> None:
        for name, p in other.params.items():
            self.params[name].data = p.data.copy()
        self.invalidate_param_cache()

    # --- incremental decode path ---------------------------------------------

    def new_state(self) -> SequenceState:
        return SequenceState(self.cfg)

    def build_prompt(self, visual_ids, text_ids) -> SequenceState:
        """Fresh state holding the visual prefix then the question text."""
        state = self.new_state()
        for vid in visual_ids:
            state.append(VISUAL, vid)
        for tid in text_ids:
            state.append(PROMPT_TEXT, tid)
        return state

    def _decode_cache(self) -> dict:
        if self._decode_args_cache is None:
            self._decode_args_cache = {
                "layers": [
                    tuple(
                        np.ascontiguousarray(self.params[f"l{i}.{part}"].data)
                        for part in _LAYER_PARTS
                    )
                    for i in range(self.cfg.n_layers)
                ],
                "head64": self.params["head.w"].data.astype(np.float64),
                "lnf_g64": self.params["ln_f.g"].data.astype(np.float64),
                "lnf_b64": self.params["ln_f.b"].data.astype(np.float64),
            }
        return self._decode_args_cache

    def _embed_row(self, origin: str, token_id: int, position: int) -> np.ndarray:
        if origin in _VISUAL_ORIGINS:
            emb = self.params["vis_emb"].data[token_id]
        else:
            emb = self.params["text_emb"].data[token_id]
        return emb + self.params["pos_emb"].data[position]

    def _advance(self, state: SequenceState, logits_rows: Optional[set] = None, keep_attention: bool = True):
        """Process pending positions; return logits + per-row attention.

        Returns (last_logits, new_rows, row_logits): new_rows lists
        (pos, origin, attn[L, H, pos + 1]) for each processed position
        (attn is None when ``keep_attention`` is off), and row_logits maps
        requested positions to their float64 logits.
        """
        cfg = self.cfg
        n = len(state)
        if n == 0:
            raise ValueError("cannot advance an empty sequence")
        if n > cfg.max_positions:
            raise CapacityError(f"sequence length {n} exceeds {cfg.max_positions} positions")
        if state.processed >= n:
            raise ValueError("no pending positions to process")

        cache = self._decode_cache()
        layer_args = cache["layers"]
        new_rows = []
        row_logits: dict[int, np.ndarray] = {}
        n_heads = cfg.n_heads
        for pos in range(state.processed, n):
            x = self._embed_row(state.origins[pos], state.ids[pos], pos)
            width = n_heads * (pos + 1)
            if keep_attention:
                flat = np.empty(cfg.n_layers * width, dtype=np.float32)
            for layer in range(cfg.n_layers):
                buf = flat[layer * width: (layer + 1) * width] if keep_attention else state.attn_scratch[:width]
                x = kernels.layer_decode(
                    x,
                    *layer_args[layer],
                    state.kcache[layer],
                    state.vcache[layer],
                    pos,
                    cfg.ln_eps,
                    buf,
                )
                x = np.asarray(x)
            attn = flat.reshape(cfg.n_layers, n_heads, pos + 1) if keep_attention else None
            new_rows.append((pos, state.origins[pos], attn))
            if pos == n - 1 or (logits_rows and pos in logits_rows):
                h64 = _ln_row64(x, cache["lnf_g64"], cache["lnf_b64"], cfg.ln_eps)
                row_logits[pos] = h64 @ cache["head64"]
        state.processed = n
        return row_logits[n - 1], new_rows, row_logits

    def forward(self, state: SequenceState):
        """Next-token logits plus the newest position's attention rows."""
        logits, new_rows, _ = self._advance(state)
        return logits, new_rows[-1][2]

    def sample(
        self,
        state: SequenceState,
        temperature: float = 1.0,
        max_new: int = 96,
        seed: int = 0,
        stop_tokens: tuple = (),
        greedy: bool = False,
        hook: Optional[SamplingHook] = None,
        record_attention: bool = True,
    ) -> SampleResult:
        """Autoregressive categorical sampling with an optional mutation hook.

        Reported log-probs are log softmax of the raw (unscaled) logits;
        temperature only shapes the sampling draw.
        """
        if temperature <= 0:
            raise ValueError("temperature must be positive (use greedy=True for argmax)")
        rng = np.random.default_rng(seed)
        record = AttnRecord(state.visual_span()) if record_attention else None
        script: list[InjectionEvent] = []
        tokens: list[int] = []
        logps: list[float] = []
        pending_forced: list[tuple[int, int]] = []  # (token index, physical position)
        stop_reason = "max_new"
        stop_set = set(int(t) for t in stop_tokens)

        while True:
            want = {pos - 1 for _, pos in pending_forced} if pending_forced else None
            logits, new_rows, row_logits = self._advance(
                state, logits_rows=want, keep_attention=record is not None
            )
            if record is not None:
                for pos, origin, attn in new_rows:
                    if origin == GENERATED:
                        record.steps.append(AttnStep(len(record.steps), pos, attn))
            for tok_idx, pos in pending_forced:
                logps[tok_idx] = _logp_from64(row_logits[pos - 1], tokens[tok_idx])
            pending_forced = []

            if len(tokens) >= max_new:
                stop_reason = "max_new"
                break
            if state.remaining_capacity() < 1:
                stop_reason = "capacity"
                break

            m = logits.max()
            e = np.exp(logits - m)
            z = e.sum()
            if greedy:
                token = int(np.argmax(logits))
            else:
                if temperature == 1.0:
                    cum = np.cumsum(e)
                else:
                    cum = np.cumsum(np.exp((logits - m) / temperature))
                token = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
                token = min(token, logits.size - 1)
            logp = float(logits[token] - m - np.log(z))
            state.append(GENERATED, token)
            tokens.append(token)
            logps.append(logp)

            if token in stop_set:
                stop_reason = "stop_token"
                break

            if hook is not None:
                before = len(state)
                prefix = state.snapshot()[:-1]
                hook(self, state, token, record, script)
                if len(state) != before or state.ids[-1] != token or state.origins[-1] != GENERATED:
                    _audit_hook(prefix, state, token)
                    _register_hook_rows(state, before, token, record, tokens, logps, pending_forced)

        # Process any trailing pending rows so the record covers every step
        # and forced tokens receive their log-probs.
        if (record is not None or pending_forced) and state.processed < len(state) <= self.cfg.max_positions:
            want = {pos - 1 for _, pos in pending_forced} if pending_forced else None
            _, new_rows, row_logits = self._advance(
                state, logits_rows=want, keep_attention=record is not None
            )
            if record is not None:
                for pos, origin, attn in new_rows:
                    if origin == GENERATED:
                        record.steps.append(AttnStep(len(record.steps), pos, attn))
            for tok_idx, pos in pending_forced:
                logps[tok_idx] = _logp_from64(row_logits[pos - 1], tokens[tok_idx])

        return SampleResult(
            tokens=tokens,
            logps=np.asarray(logps, dtype=np.float64),
            record=record,
            script=script,
            stop_reason=stop_reason,
            state=state,
        )

    # --- batched teacher-forced path -----------------------------------------

    def forward_full(self, origins: list, ids: list) -> Tensor:
        """Batched causal forward over explicit rows; differentiable."""
        cfg = self.cfg
        t = len(ids)
        if t > cfg.max_positions:
            raise CapacityError(f"sequence length {t} exceeds {cfg.max_positions} positions")
        ids_arr = np.asarray(ids, dtype=np.int64)
        vis_mask = np.array([o in _VISUAL_ORIGINS for o in origins], dtype=bool)
        text_ids = np.where(vis_mask, 0, ids_arr)
        vis_ids = np.where(vis_mask, ids_arr, 0)
        tmask = Tensor(np.where(vis_mask, 0.0, 1.0).astype(np.float32)[:, None])
        vmask = Tensor(vis_mask.astype(np.float32)[:, None])

        e_text = ag.mul(ag.embedding(self.params["text_emb"], text_ids), tmask)
        e_vis = ag.mul(ag.embedding(self.params["vis_emb"], vis_ids), vmask)
        pos = ag.embedding(self.params["pos_emb"], np.arange(t))
        x = ag.add(ag.add(e_text, e_vis), pos)

        mask = np.triu(np.full((t, t), -1e9, dtype=np.float32), k=1)
        mask_t = Tensor(mask)
        inv = Tensor(np.float32(1.0 / np.sqrt(cfg.head_dim)))

        for i in range(cfg.n_layers):
            p = self.params
            h = ag.layer_norm(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"], cfg.ln_eps)
            q = ag.add(ag.matmul(h, p[f"l{i}.wq"]), p[f"l{i}.bq"])
            k = ag.add(ag.matmul(h, p[f"l{i}.wk"]), p[f"l{i}.bk"])
            v = ag.add(ag.matmul(h, p[f"l{i}.wv"]), p[f"l{i}.bv"])
            q3 = ag.transpose(ag.reshape(q, (t, cfg.n_heads, cfg.head_dim)), (1, 0, 2))
            k3t = ag.transpose(ag.reshape(k, (t, cfg.n_heads, cfg.head_dim)), (1, 2, 0))
            v3 = ag.transpose(ag.reshape(v, (t, cfg.n_heads, cfg.head_dim)), (1, 0, 2))
            scores = ag.add(ag.mul(ag.matmul(q3, k3t), inv), mask_t)
            attn = ag.softmax(scores, axis=-1)
            ctx = ag.matmul(attn, v3)
            ctx2 = ag.reshape(ag.transpose(ctx, (1, 0, 2)), (t, cfg.dim))
            x = ag.add(x, ag.add(ag.matmul(ctx2, p[f"l{i}.wo"]), p[f"l{i}.bo"]))
            h2 = ag.layer_norm(x, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"], cfg.ln_eps)
            u = ag.gelu(ag.add(ag.matmul(h2, p[f"l{i}.w1"]), p[f"l{i}.bm1"]))
            x = ag.add(x, ag.add(ag.matmul(u, p[f"l{i}.w2"]), p[f"l{i}.bm2"]))

        x = ag.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"], cfg.ln_eps)
        return ag.matmul(x, self.params["head.w"])

    def score_response(self, prompt_visual, prompt_text, response, script=()) -> Tensor:
        """Teacher-forced per-token log-probs for a (possibly injected) response.

        Injected positions carry no log-prob; the returned 1-D tensor aligns
        with the generated tokens.
        """
        if len(response) == 0:
            raise ReplayError("cannot score an empty response")
        origins, ids, pred_src = replay_rows(prompt_visual, prompt_text, response, script)
        logits = self.forward_full(origins, ids)
        logp = ag.log_softmax(logits, axis=-1)
        return ag.gather_rows(logp, pred_src, np.asarray(response, dtype=np.int64))

    # --- checkpoint io --------------------------------------------------------

    def save(self, path) -> None:
        names = sorted(self.params)
        header = {
            "config": {
                "vocab_size": self.cfg.vocab_size,
                "visual_vocab_size": self.cfg.visual_vocab_size,
                "dim": self.cfg.dim,
                "n_layers": self.cfg.n_layers,
                "n_heads": self.cfg.n_heads,
                "max_positions": self.cfg.max_positions,
                "ln_eps": self.cfg.ln_eps,
            },
            "frozen": sorted(n for n, p in self.params.items() if not p.requires_grad),
            "tensors": [
                {"name": n, "shape": list(self.params[n].data.shape), "dtype": "float32"}
                for n in names
            ],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            f.write(blob)
            for n in names:
                f.write(np.ascontiguousarray(self.params[n].data, dtype="<f4").tobytes())

    @staticmethod
    def load(path) -> "Model":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
            version, blob_len = struct.unpack("<II", f.read(8))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            header = json.loads(f.read(blob_len))
            cfg = ModelConfig(**header["config"])
            model = Model(cfg, seed=0)
            for spec in header["tensors"]:
                name, shape = spec["name"], tuple(spec["shape"])
                if name not in model.params:
                    raise ValueError(f"checkpoint has unknown tensor {name!r}")
                expect = model.params[name].data.shape
                if shape != expect:
                    raise ValueError(f"tensor {name!r} shape {shape} != expected {expect}")
                n_bytes = int(np.prod(shape)) * 4
                buf = f.read(n_bytes)
                if len(buf) != n_bytes:
                    raise ValueError(f"checkpoint truncated while reading {name!r}")
                model.params[name].data = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            for name in header.get("frozen", []):
                model.params[name].requires_grad = False
            model.invalidate_param_cache()
        return model


# --- helpers -----------------------------------------------------------------

def replay_rows(prompt_visual, prompt_text, response, script=()):
    """Physical rows of a sampled sequence plus the prediction-source map.

    For each response token j, pred_src[j] is the row whose output logits
    predicted it at decode time. A token whose emission triggered an
    injection sits after the injected block physically, but was predicted
    from the row just before the block.
    """
    events = {}
    for e in script:
        if e.step in events:
            raise ReplayError(f"duplicate injection event at step {e.step}")
        if not 0 <= e.step < len(response):
            raise ReplayError(f"injection step {e.step} outside response of {len(response)} tokens")
        events[e.step] = e
    origins: list[str] = [VISUAL] * len(prompt_visual) + [PROMPT_TEXT] * len(prompt_text)
    ids: list[int] = list(prompt_visual) + list(prompt_text)
    pred_src = np.empty(len(response), dtype=np.int64)
    for j, tok in enumerate(response):
        src = len(ids) - 1
        event = events.get(j)
        if event is not None:
            for vid in event.injected_ids:
                origins.append(INJECTED_VISUAL)
                ids.append(int(vid))
        pred_src[j] = src
        origins.append(GENERATED)
        ids.append(int(tok))
    return origins, ids, pred_src


def _ln_row64(x: np.ndarray, gain64: np.ndarray, bias64: np.ndarray, eps: float) -> np.ndarray:
    """Final layer norm of one row, float64 in and out (float32 rounding of
    the normalized row first, matching the batched path's op boundary)."""
    xd = x.astype(np.float64)
    mean = xd.mean()
    centered = xd - mean
    var = (centered**2).mean()
    norm = centered / np.sqrt(var + eps)
    return (norm * gain64 + bias64).astype(np.float32).astype(np.float64)


def _logp_from64(logits64: np.ndarray, token: int) -> float:
    m = logits64.max()
    lse = m + np.log(np.exp(logits64 - m).sum())
    return float(logits64[token] - lse)


def _audit_hook(prefix: list, state: SequenceState, token: int) -> None:
    """Hooks may displace only the freshly emitted token and append new rows."""
    current = state.snapshot()
    if len(current) < len(prefix):
        raise RuntimeError("hook removed existing positions")
    if current[: len(prefix)] != prefix:
        raise RuntimeError("hook reordered or rewrote existing positions")
    tail = current[len(prefix):]
    emitted = [(o, i) for o, i in tail if o == GENERATED and i == token]
    if not emitted:
        raise RuntimeError("hook dropped the freshly emitted token")


def _register_hook_rows(state, before, token, record, tokens, logps, pending_forced) -> None:
    """Account for rows the hook added: injected positions and forced tokens.

    The displaced copy of the freshly emitted token is recognized as the
    first generated row with its id; any further generated rows were
    force-appended by the hook and become response tokens whose log-probs
    are gathered on the next forward.
    """
    emitted_seen = False
    for pos in range(before - 1, len(state)):
        origin = state.origins[pos]
        if origin == INJECTED_VISUAL:
            if record is not None:
                record.injected_positions.append(pos)
        elif origin == GENERATED:
            if not emitted_seen and state.ids[pos] == token:
                emitted_seen = True
            else:
                tokens.append(state.ids[pos])
                logps.append(float("nan"))
                pending_forced.append((len(tokens) - 1, pos))
