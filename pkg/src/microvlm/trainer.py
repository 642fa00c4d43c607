"""Cold-start supervised fine-tuning and the group-relative RL loop.

The RL recipe: sample a group of responses per question at temperature,
score them with the rule rewards, standardize rewards within the group
into advantages, then ascend a clipped importance-ratio surrogate with a
per-token KL penalty against a frozen reference snapshot. The sampling
policy is refreshed every outer step (one update per group), so ratios
start at 1 and the surrogate's gradient matches vanilla policy gradient
at each step's start.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from . import grammar
from .autograd import Tape, Tensor
from .model import InjectionEvent, Model, replay_rows
from .reattention import ReattentionConfig, reflection_hook
from .rewards import RewardBreakdown, RewardConfig, composite_reward
from .scenes import QAItem
from .vocab import Vocabulary, default_vocab

RATIO_MODES = ("token_level", "sequence_level")


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    temperature: float = 1.0
    clip_eps: float = 0.2
    kl_beta: float = 0.1
    lr: float = 1e-3
    steps: int = 100
    seed: int = 0
    ratio_mode: str = "token_level"
    max_new: int = 96
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    eps_std: float = 1e-8  # degenerate-group cutoff for advantage scaling
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be nonnegative")
        if self.ratio_mode not in RATIO_MODES:
            raise ValueError(f"ratio_mode must be one of {RATIO_MODES}")


class TrainingDiverged(FloatingPointError):
    """A training step produced NaN/Inf; diagnostics were dumped."""


class Adam(object):
    """Adam over the model's trainable parameters."""

    def __init__(self, model: Model, lr: float, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in model.parameters()}
        self.v = {name: np.zeros_like(p.data) for name, p in model.parameters()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.model.parameters():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
        self.model.invalidate_param_cache()


# --- supervised fine-tuning ---------------------------------------------------

@dataclass
class SftExample:
    origins: list
    ids: list
    targets: np.ndarray
    mask: np.ndarray


def build_sft_example(
    qa: QAItem,
    trace_tokens,
    vocab: Vocabulary,
    reattention_mode: str = "off",
) -> SftExample:
    """Rows + loss mask for one gold trace.

    With ``reattention_mode="vtc"`` the full visual prefix is re-presented
    before every reflection open, exactly as the decode-time hook would
    insert it; injected rows never contribute loss, and the reflection-open
    target is wired to the row just before the injected block.
    """
    visual_ids = qa.scene.visual_token_ids()
    text_ids = vocab.encode(list(qa.question))
    response = vocab.encode(list(trace_tokens))
    script = []
    if reattention_mode == "vtc":
        refl_open = vocab.id_of("<REFLECTION>")
        script = [
            InjectionEvent(step=j, mode="vtc", injected_ids=tuple(visual_ids))
            for j, tok in enumerate(response)
            if tok == refl_open
        ]
    elif reattention_mode != "off":
        raise ValueError(f"SFT supports reattention modes 'off' and 'vtc', not {reattention_mode!r}")

    # Reuse the replay layout so SFT contexts match decode-time contexts.
    origins, ids, pred_src = replay_rows(visual_ids, text_ids, response, script)
    targets = np.zeros(len(ids), dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    for j, src in enumerate(pred_src):
        targets[src] = response[j]
        mask[src] = True
    return SftExample(origins=origins, ids=ids, targets=targets, mask=mask)


def prepare_sft_examples(
    records,
    vocab: Vocabulary,
    reattention_mode: str = "off",
) -> tuple[list, int]:
    """Validated examples from (QAItem, GoldTrace) pairs; malformed traces skipped."""
    examples = []
    skipped = 0
    for qa, trace in records:
        if trace is None:
            skipped += 1
            continue
        parsed = grammar.parse(list(trace.tokens), vocab)
        if parsed.violations:
            skipped += 1
            continue
        examples.append(build_sft_example(qa, trace.tokens, vocab, reattention_mode))
    return examples, skipped


def sft_step(model: Model, examples: list, opt: Adam) -> float:
    """One optimizer step of response-token cross entropy over the batch."""
    if not examples:
        raise ValueError("sft_step needs at least one example")
    model.zero_grads()
    with Tape() as tape:
        total = None
        for ex in examples:
            logits = model.forward_full(ex.origins, ex.ids)
            loss = ag.cross_entropy(logits, ex.targets, ex.mask)
            total = loss if total is None else ag.add(total, loss)
        mean_loss = ag.mul(total, Tensor(np.float32(1.0 / len(examples))))
    tape.backward(mean_loss)
    opt.step()
    value = float(mean_loss.item())
    if not math.isfinite(value):
        raise TrainingDiverged("SFT loss is not finite")
    return value


def save_optimizer(opt: Adam, path) -> None:
    """Persist Adam moments so a resumed run continues bit-identically."""
    arrays = {"__t": np.asarray(opt.t, dtype=np.int64)}
    for name, m in opt.m.items():
        arrays["m__" + name] = m
    for name, v in opt.v.items():
        arrays["v__" + name] = v
    np.savez(path, **arrays)


def load_optimizer(model: Model, path, lr: float, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8) -> Adam:
    opt = Adam(model, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    with np.load(path) as data:
        opt.t = int(data["__t"])
        for key in data.files:
            if key.startswith("m__"):
                opt.m[key[3:]] = data[key]
            elif key.startswith("v__"):
                opt.v[key[3:]] = data[key]
    return opt


def sft_train(
    model: Model,
    examples: list,
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    beta1: float = 0.9,
    beta2: float = 0.95,
    opt: Optional[Adam] = None,
    start_step: int = 0,
    telemetry_path=None,
    progress: bool = False,
) -> tuple[list, Adam]:
    """Deterministic SFT loop: cyclic mini-batches, no shuffling.

    Batch membership depends only on the step index, so a run resumed
    from (checkpoint, optimizer state) continues exactly like an
    unbroken run.
    """
    if not examples:
        raise ValueError("no usable SFT examples")
    opt = opt or Adam(model, lr=lr, beta1=beta1, beta2=beta2)
    n = len(examples)
    telemetry = []
    sink = open(telemetry_path, "a" if start_step else "w") if telemetry_path else None
    try:
        for step in range(start_step, steps):
            batch = [examples[(step * batch_size + j) % n] for j in range(min(batch_size, n))]
            loss = sft_step(model, batch, opt)
            entry = {"step": step, "loss": loss, "batch": len(batch)}
            telemetry.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            if progress and (step % 100 == 0 or step == steps - 1):
                print(f"sft step {step}: loss {loss:.4f}", flush=True)
    finally:
        if sink:
            sink.close()
    return telemetry, opt


# --- group-relative objective --------------------------------------------------

def group_advantages(rewards, eps_std: float = 1e-8) -> np.ndarray:
    """Reward standardization within the group (population std).

    A degenerate group (std below eps_std) carries no learning signal and
    maps to all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need a group of at least 2 rewards")
    std = r.std()
    if std < eps_std:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def kl_term(logp_theta, logp_ref) -> np.ndarray:
    """Per-token rho - log(rho) - 1 with rho = exp(logp_ref - logp_theta)."""
    lt = np.asarray(logp_theta, dtype=np.float64)
    lr = np.asarray(logp_ref, dtype=np.float64)
    if lt.shape != lr.shape:
        raise ValueError("log-prob arrays must align")
    delta = lr - lt
    return np.expm1(delta) - delta


@dataclass
class Rollout:
    question_index: int
    tokens: list
    script: list
    logp_old: np.ndarray
    reward: RewardBreakdown
    n_r: int
    l_r_total: int
    advantage: float = 0.0
    logp_ref: Optional[np.ndarray] = None
    logp_theta: Optional[Tensor] = None
    stop_reason: str = ""


@dataclass
class GroupBatch:
    question_index: int
    rollouts: list
    reward_mean: float = 0.0
    reward_std: float = 0.0


def brpo_loss(group: GroupBatch, cfg: TrainConfig) -> Tensor:
    """Clipped-surrogate objective minus the KL penalty, group-averaged.

    Sign convention: this is the objective to *maximize*; the trainer
    minimizes its negation. Token-level mode shares the rollout advantage
    across per-token ratios and averages over tokens; sequence-level mode
    exponentiates the summed log-ratio (exact but explosive on long
    responses, kept for fidelity checks).
    """
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    total = None
    for rollout in group.rollouts:
        lp_theta = rollout.logp_theta
        if lp_theta is None:
            raise ValueError("rollout is missing policy log-probs")
        dtype = lp_theta.data.dtype
        old = Tensor(rollout.logp_old, dtype=dtype)
        ref = Tensor(rollout.logp_ref, dtype=dtype)
        adv = Tensor(np.asarray(rollout.advantage, dtype=dtype))
        one = Tensor(np.asarray(1.0, dtype=dtype))
        beta = Tensor(np.asarray(cfg.kl_beta, dtype=dtype))
        if cfg.ratio_mode == "token_level":
            ratio = ag.exp(ag.sub(lp_theta, old))
            surrogate = ag.minimum(ag.mul(ratio, adv), ag.mul(ag.clip(ratio, lo, hi), adv))
            delta = ag.sub(ref, lp_theta)
            kl = ag.sub(ag.exp(delta), ag.add(delta, one))
            term = ag.sub(ag.tmean(surrogate), ag.mul(ag.tmean(kl), beta))
        else:
            ratio = ag.exp(ag.sub(ag.tsum(lp_theta), ag.tsum(old)))
            surrogate = ag.minimum(ag.mul(ratio, adv), ag.mul(ag.clip(ratio, lo, hi), adv))
            delta = ag.sub(ag.tsum(ref), ag.tsum(lp_theta))
            kl = ag.sub(ag.exp(delta), ag.add(delta, one))
            term = ag.sub(surrogate, ag.mul(kl, beta))
        total = term if total is None else ag.add(total, term)
    return ag.mul(total, Tensor(np.asarray(1.0 / len(group.rollouts), dtype=total.data.dtype)))


def rollout_seed(base_seed: int, step: int, question_index: int, rollout_index: int) -> int:
    """Stable per-rollout seed: hash of (step, question id, rollout index)."""
    key = f"{base_seed}:{step}:{question_index}:{rollout_index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


# --- the training loop ----------------------------------------------------------

def brpo_train(
    model: Model,
    dataset: list,
    cfg: TrainConfig,
    reward_cfg: RewardConfig = RewardConfig(),
    reattn_cfg: ReattentionConfig = ReattentionConfig(),
    vocab: Optional[Vocabulary] = None,
    telemetry_path=None,
    checkpoint_path=None,
    progress: bool = False,
) -> list:
    """Run the RL loop; returns per-step telemetry dicts.

    The reference policy is a snapshot of the incoming (cold-started)
    model; the sampling policy is refreshed every step, so the sampled
    log-probs double as the old-policy log-probs for that step's update.
    """
    vocab = vocab or default_vocab()
    if not dataset:
        raise ValueError("empty dataset")
    ref_model = model.clone()
    opt = Adam(model, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    refl_open = vocab.id_of("<REFLECTION>")
    refl_close = vocab.id_of("</REFLECTION>")
    stop_tokens = (vocab.id_of("</CONCLUSION>"),)
    hook = reflection_hook(reattn_cfg, refl_open, refl_close)
    need_record = reattn_cfg.mode == "vtr"

    telemetry: list[dict] = []
    sink = open(telemetry_path, "w") if telemetry_path else None
    try:
        for step in range(cfg.steps):
            q_index = step % len(dataset)
            qa = dataset[q_index][0] if isinstance(dataset[q_index], tuple) else dataset[q_index]
            visual_ids = qa.scene.visual_token_ids()
            text_ids = vocab.encode(list(qa.question))

            rollouts = []
            for i in range(cfg.group_size):
                seed = rollout_seed(cfg.seed, step, q_index, i)
                state = model.build_prompt(visual_ids, text_ids)
                result = model.sample(
                    state,
                    temperature=cfg.temperature,
                    max_new=cfg.max_new,
                    seed=seed,
                    stop_tokens=stop_tokens,
                    hook=hook,
                    record_attention=need_record,
                )
                parsed = grammar.parse(vocab.decode(result.tokens), vocab)
                breakdown = composite_reward(parsed, qa.gold_answer, reward_cfg)
                stats = grammar.reflection_stats(parsed)
                rollouts.append(
                    Rollout(
                        question_index=q_index,
                        tokens=result.tokens,
                        script=result.script,
                        logp_old=result.logps,
                        reward=breakdown,
                        n_r=stats.n_r,
                        l_r_total=stats.l_r_total,
                        stop_reason=result.stop_reason,
                    )
                )

            rewards = [r.reward.composite for r in rollouts]
            advantages = group_advantages(rewards, cfg.eps_std)
            for r, a in zip(rollouts, advantages):
                r.advantage = float(a)
                r.logp_ref = ref_model.score_response(visual_ids, text_ids, r.tokens, r.script).data

            group = GroupBatch(
                question_index=q_index,
                rollouts=rollouts,
                reward_mean=float(np.mean(rewards)),
                reward_std=float(np.std(rewards)),
            )

            model.zero_grads()
            with Tape() as tape:
                for r in rollouts:
                    r.logp_theta = model.score_response(visual_ids, text_ids, r.tokens, r.script)
                objective = brpo_loss(group, cfg)
                loss = ag.mul(objective, Tensor(np.float32(-1.0)))
            tape.backward(loss)
            opt.step()

            entry = _telemetry_entry(step, q_index, group, objective, cfg)
            _abort_on_nan(model, entry, telemetry_path)
            telemetry.append(entry)
            if sink:
                sink.write(json.dumps(entry) + "\n")
            if progress and (step % 50 == 0 or step == cfg.steps - 1):
                print(
                    f"step {step}: reward {entry['mean_reward']:.3f} "
                    f"acc {entry['acc_reward']:.3f} n_r {entry['n_r_mean']:.2f}",
                    flush=True,
                )
            if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                model.save(checkpoint_path)
        if checkpoint_path:
            model.save(checkpoint_path)
    finally:
        if sink:
            sink.close()
    return telemetry


def _telemetry_entry(step: int, q_index: int, group: GroupBatch, objective: Tensor, cfg: TrainConfig) -> dict:
    rollouts = group.rollouts
    n = len(rollouts)
    n_r_total = sum(r.n_r for r in rollouts)
    l_r_grand = sum(r.l_r_total for r in rollouts)
    kls = [float(kl_term(np.asarray(r.logp_theta.data, np.float64), r.logp_ref).mean()) for r in rollouts]
    return {
        "step": step,
        "question_index": q_index,
        "group_size": n,
        "mean_reward": float(group.reward_mean),
        "reward_std": float(group.reward_std),
        "acc_reward": float(np.mean([r.reward.accuracy for r in rollouts])),
        "format_reward": float(np.mean([r.reward.format for r in rollouts])),
        "balance_reward": float(np.mean([r.reward.balance for r in rollouts])),
        "n_r_mean": n_r_total / n,
        "l_r_total_mean": l_r_grand / n,
        "mean_reflection_length": (l_r_grand / n_r_total) if n_r_total else 0.0,
        "mean_response_tokens": float(np.mean([len(r.tokens) for r in rollouts])),
        "objective": float(objective.item()),
        "kl_mean": float(np.mean(kls)),
    }


def _abort_on_nan(model: Model, entry: dict, telemetry_path) -> None:
    bad = [k for k, v in entry.items() if isinstance(v, float) and not math.isfinite(v)]
    for name, p in model.parameters():
        if not np.isfinite(p.data).all():
            bad.append(f"param:{name}")
    if bad:
        dump = dict(entry)
        dump["non_finite"] = bad
        if telemetry_path:
            dump_path = str(telemetry_path) + ".diverged.json"
            with open(dump_path, "w") as f:
                json.dump(dump, f, indent=2)
        raise TrainingDiverged(f"non-finite values after step {entry['step']}: {bad}")
