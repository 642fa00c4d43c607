"""Decode-kernel benchmark: compiled extension vs numpy fallback.

Two views: the raw fused layer step at growing context lengths, and
end-to-end sampling through the full model. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--tokens 512]
"""

import argparse
import time

import numpy as np

from microvlm import kernels
from microvlm.kernels import available_backends
from microvlm.model import Model, ModelConfig
from microvlm.scenes import SceneConfig, generate_qa, generate_scene, visual_vocab_size
from microvlm.vocab import default_vocab


def bench_layer_step(impl, dim=64, heads=4, ctx=256, repeats=3):
    rng = np.random.default_rng(0)
    head_dim = dim // heads
    ff = 4 * dim

    def mk(*shape):
        return (rng.standard_normal(shape) * 0.02).astype(np.float32)

    args = (
        np.ones(dim, np.float32), np.zeros(dim, np.float32),
        mk(dim, dim), mk(dim), mk(dim, dim), mk(dim), mk(dim, dim), mk(dim),
        mk(dim, dim), mk(dim),
        np.ones(dim, np.float32), np.zeros(dim, np.float32),
        mk(dim, ff), mk(ff), mk(ff, dim), mk(dim),
    )
    best = float("inf")
    scratch = np.empty(heads * ctx, np.float32)
    for _ in range(repeats):
        kc = np.zeros((ctx, heads, head_dim), np.float32)
        vc = np.zeros_like(kc)
        rows = [mk(dim) for _ in range(ctx)]
        t0 = time.perf_counter()
        for t in range(ctx):
            impl.layer_decode(rows[t], *args, kc, vc, t, 1e-5, scratch[: heads * (t + 1)])
        best = min(best, (time.perf_counter() - t0) / ctx)
    return best


def bench_sampling(impl, n_tokens=512, dim=64, layers=4, heads=4):
    saved = kernels.layer_decode
    kernels.layer_decode = impl.layer_decode
    try:
        vocab = default_vocab()
        cfg = ModelConfig(
            vocab_size=len(vocab),
            visual_vocab_size=visual_vocab_size(4, 4),
            dim=dim, n_layers=layers, n_heads=heads,
            max_positions=n_tokens + 64,
        )
        model = Model(cfg, seed=0)
        scene = generate_scene(0, SceneConfig())
        qa = generate_qa(scene, "count_color", 1)
        prompt = (scene.visual_token_ids(), vocab.encode(list(qa.question)))
        # warmup
        model.sample(model.build_prompt(*prompt), max_new=32, seed=0, record_attention=False)
        t0 = time.perf_counter()
        done = 0
        seed = 1
        while done < n_tokens:
            res = model.sample(
                model.build_prompt(*prompt),
                max_new=min(256, n_tokens - done),
                seed=seed, record_attention=False,
            )
            done += len(res.tokens)
            seed += 1
        return (time.perf_counter() - t0) / done
    finally:
        kernels.layer_decode = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--tokens", type=int, default=512, help="tokens for the sampling benchmark")
    parser.add_argument("--ctx", type=int, default=256, help="context length for the layer benchmark")
    args = parser.parse_args()

    impls = available_backends()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(impls)}\n")

    layer = {name: bench_layer_step(impl, ctx=args.ctx) for name, impl in impls.items()}
    sampling = {name: bench_sampling(impl, n_tokens=args.tokens) for name, impl in impls.items()}

    print(f"{'benchmark':<28}", *(f"{n:>14}" for n in impls), f"{'speedup':>10}")
    for label, results in (("layer step (us/call)", layer), ("sampling (us/token)", sampling)):
        row = [results[n] * 1e6 for n in impls]
        speedup = row[0] / row[-1] if len(row) > 1 and row[-1] else float("nan")
        print(f"{label:<28}", *(f"{v:>14.1f}" for v in row), f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
