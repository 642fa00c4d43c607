"""Command-line surface: synth, sft, brpo, decode, eval.

Precedence: built-in defaults, then a --config JSON file, then explicit
flags. Every command copies its effective config into the output
directory and is deterministic under a fixed seed (decode wall-times go
to a separate timing file, outside the determinism contract).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import grammar, metrics, scenes
from .config import RunConfig, load_config, save_config, to_json_dict
from .model import InjectionEvent, Model, ModelConfig
from .reattention import ReattentionConfig, reflection_hook
from .trainer import (
    brpo_train,
    load_optimizer,
    prepare_sft_examples,
    save_optimizer,
    sft_train,
)
from .vocab import default_vocab


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = merge_config(args)
        out_dir = resolve_out_dir(cfg, args.command)
        cfg = _replace_top(cfg, out_dir=str(out_dir))
        handler = {
            "synth": cmd_synth,
            "sft": cmd_sft,
            "brpo": cmd_brpo,
            "decode": cmd_decode,
            "eval": cmd_eval,
        }[args.command]
        handler(cfg)
        return 0
    except BrokenPipeError:
        raise
    except Exception as exc:  # one-line reason, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


# --- argument plumbing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microvlm",
        description="Desk-scale multimodal reasoning lab: synthetic scenes, "
        "reflective RL training, and decode-time visual re-attention.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--out-dir", dest="out_dir", help="output directory")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--dataset", help="dataset file (JSONL)")

    p = sub.add_parser("synth", help="generate a scene/QA dataset with gold traces")
    common(p)
    p.add_argument("--n", type=int, help="number of items")
    p.add_argument("--templates", help="comma list of question templates")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--min-objects", type=int, dest="min_objects")
    p.add_argument("--max-objects", type=int, dest="max_objects")
    p.add_argument("--no-traces", action="store_true", help="omit gold traces")

    p = sub.add_parser("sft", help="cold-start supervised fine-tuning on gold traces")
    common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--max-positions", type=int, dest="max_positions")
    p.add_argument("--freeze-visual", dest="freeze_visual", action="store_true", default=None)
    p.add_argument("--no-freeze-visual", dest="freeze_visual", action="store_false", default=None)
    p.add_argument("--reattention", choices=["off", "vtc"], help="inject visual copies into SFT contexts")
    p.add_argument("--checkpoint", help="checkpoint to resume from (expects its .opt.npz beside it)")

    p = sub.add_parser("brpo", help="group-relative RL from a cold-start checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="cold-start checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--group-size", type=int, dest="group_size")
    p.add_argument("--temperature", type=float)
    p.add_argument("--clip-eps", type=float, dest="clip_eps")
    p.add_argument("--kl-beta", type=float, dest="kl_beta")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-new", type=int, dest="max_new")
    p.add_argument("--ratio-mode", choices=["token_level", "sequence_level"], dest="ratio_mode")
    p.add_argument("--mode", choices=["off", "text_only", "vision_only", "vtc", "vtr"],
                   help="re-attention mode during rollouts")
    p.add_argument("--m", type=float, help="routing percentage for vtr")
    p.add_argument("--ideal-reflection-len", type=float, dest="ideal_reflection_len")
    p.add_argument("--w-format", type=float, dest="w_format")
    p.add_argument("--w-accuracy", type=float, dest="w_accuracy")
    p.add_argument("--w-balance", type=float, dest="w_balance")

    p = sub.add_parser("decode", help="decode an eval set under re-attention modes")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", help="comma list of modes (off,text_only,vision_only,vtc,vtr)")
    p.add_argument("--m", help="comma list of routing percentages")
    p.add_argument("--n", type=int, help="limit to the first N items")
    p.add_argument("--max-new", type=int, dest="max_new")
    p.add_argument("--temperature", type=float)
    p.add_argument("--greedy", action="store_true", default=None)

    p = sub.add_parser("eval", help="score a decode dump: accuracy, hallucination, attention")
    common(p)
    p.add_argument("--responses", help="decode dump (JSONL)")
    p.add_argument("--checkpoint", help="checkpoint for the visual-dependence probe")
    p.add_argument("--telemetry", help="training telemetry for reflection-dynamics plots")
    p.add_argument("--bucket-width", type=int, dest="bucket_width")
    p.add_argument("--mi-window", type=int, dest="mi_window")
    p.add_argument("--mi-items", type=int, dest="mi_items")
    p.add_argument("--chair-blocks", dest="chair_blocks",
                   help="comma list of blocks scored for object mentions")
    return parser


_TOP_KEYS = ("seed", "dataset", "checkpoint", "responses", "telemetry", "out_dir")

# flag destination -> config section
_SECTION_OF = {
    "synth": {
        "n": "synth", "templates": "synth", "width": "synth", "height": "synth",
        "min_objects": "synth", "max_objects": "synth",
    },
    "sft": {
        "steps": "sft", "lr": "sft", "batch_size": "sft", "freeze_visual": "sft",
        "reattention": "sft",
        "dim": "model", "layers": "model", "heads": "model", "max_positions": "model",
    },
    "brpo": {
        "steps": "train", "group_size": "train", "temperature": "train",
        "clip_eps": "train", "kl_beta": "train", "lr": "train", "max_new": "train",
        "ratio_mode": "train",
        "mode": "reattention", "m": "reattention",
        "ideal_reflection_len": "reward", "w_format": "reward",
        "w_accuracy": "reward", "w_balance": "reward",
    },
    "decode": {
        "mode": "decode", "m": "decode", "n": "decode", "max_new": "decode",
        "temperature": "decode", "greedy": "decode",
    },
    "eval": {
        "bucket_width": "eval", "mi_window": "eval", "mi_items": "eval",
        "chair_blocks": "eval",
    },
}

_RENAME = {
    ("sft", "layers"): "n_layers",
    ("sft", "heads"): "n_heads",
    ("decode", "mode"): "modes",
    ("decode", "m"): "m_values",
    ("decode", "n"): "n_items",
}


def merge_config(args: argparse.Namespace) -> RunConfig:
    base = to_json_dict(load_config(args.config)) if args.config else to_json_dict(RunConfig())
    for key in _TOP_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    section_of = _SECTION_OF.get(args.command, {})
    for dest, section in section_of.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        name = _RENAME.get((args.command, dest), dest)
        if name in ("templates", "modes", "chair_blocks"):
            value = [v.strip() for v in str(value).split(",") if v.strip()]
        elif name == "m_values":
            value = [float(v) for v in str(value).split(",") if v.strip()]
        base[section][name] = value
    if args.command == "synth" and getattr(args, "no_traces", False):
        base["synth"]["with_traces"] = False
    return cfgmod.from_json_dict(base)


def _replace_top(cfg: RunConfig, **kw) -> RunConfig:
    import dataclasses

    return dataclasses.replace(cfg, **kw)


def resolve_out_dir(cfg: RunConfig, command: str) -> Path:
    if cfg.out_dir:
        out = Path(cfg.out_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path(cfgmod.output_root()) / f"{command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prompt_ids(qa, vocab):
    return qa.scene.visual_token_ids(), vocab.encode(list(qa.question))


def _model_config_for(dataset, spec: cfgmod.ModelSpec) -> ModelConfig:
    vocab = default_vocab()
    scene = dataset[0][0].scene
    return ModelConfig(
        vocab_size=len(vocab),
        visual_vocab_size=scenes.visual_vocab_size(scene.width, scene.height),
        dim=spec.dim,
        n_layers=spec.n_layers,
        n_heads=spec.n_heads,
        max_positions=spec.max_positions,
    )


def _require(value, what: str):
    if not value:
        raise ValueError(f"missing required input: {what}")
    return value


# --- commands --------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    spec = cfg.synth
    scene_cfg = scenes.SceneConfig(
        width=spec.width, height=spec.height,
        min_objects=spec.min_objects, max_objects=spec.max_objects,
    )
    records = scenes.synthesize(
        spec.n, seed=cfg.seed, config=scene_cfg,
        templates=tuple(spec.templates), with_traces=spec.with_traces,
    )
    dataset_path = Path(cfg.dataset) if cfg.dataset else out / "dataset.jsonl"
    dataset_path.parent.mkdir(parents=True, exist_ok=True)
    count = scenes.write_dataset(dataset_path, records)
    save_config(_replace_top(cfg, dataset=str(dataset_path)), out / "run_config.json")
    by_template = {}
    for _, qa, _ in records:
        by_template[qa.template_id] = by_template.get(qa.template_id, 0) + 1
    print(f"wrote {count} items to {dataset_path}")
    for name in sorted(by_template):
        print(f"  {name}: {by_template[name]}")


def cmd_sft(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    vocab = default_vocab()
    dataset = scenes.read_dataset(_require(cfg.dataset, "--dataset"))
    examples, skipped = prepare_sft_examples(dataset, vocab, cfg.sft.reattention)
    if skipped:
        print(f"warning: skipped {skipped} malformed or missing traces", file=sys.stderr)

    if cfg.checkpoint:
        model = Model.load(cfg.checkpoint)
        opt, start = None, 0
        opt_path = Path(cfg.checkpoint).with_suffix(".opt.npz")
        if opt_path.exists():
            opt = load_optimizer(model, opt_path, lr=cfg.sft.lr)
            start = opt.t
    else:
        model = Model(_model_config_for(dataset, cfg.model), seed=cfg.seed)
        opt, start = None, 0
    model.set_visual_frozen(cfg.sft.freeze_visual)

    telemetry, opt = sft_train(
        model, examples,
        steps=cfg.sft.steps, lr=cfg.sft.lr, batch_size=cfg.sft.batch_size,
        opt=opt, start_step=start,
        telemetry_path=out / "sft_telemetry.jsonl", progress=True,
    )
    model.save(out / "sft.ckpt")
    save_optimizer(opt, out / "sft.opt.npz")
    save_config(cfg, out / "run_config.json")
    final = telemetry[-1]["loss"] if telemetry else float("nan")
    print(f"sft done: {len(telemetry)} steps, final loss {final:.4f}, checkpoint {out / 'sft.ckpt'}")


def cmd_brpo(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    dataset = scenes.read_dataset(_require(cfg.dataset, "--dataset"))
    model = Model.load(_require(cfg.checkpoint, "--checkpoint"))
    train_cfg = _dc_replace(cfg.train, seed=cfg.seed)
    telemetry = brpo_train(
        model, dataset, train_cfg,
        reward_cfg=cfg.reward, reattn_cfg=cfg.reattention,
        telemetry_path=out / "brpo_telemetry.jsonl",
        checkpoint_path=out / "brpo.ckpt",
        progress=True,
    )
    save_config(cfg, out / "run_config.json")
    last = telemetry[-1]
    print(
        f"brpo done: {len(telemetry)} steps (G={train_cfg.group_size}), "
        f"final mean reward {last['mean_reward']:.3f}, acc {last['acc_reward']:.3f}, "
        f"checkpoint {out / 'brpo.ckpt'}"
    )


def _dc_replace(dc, **kw):
    import dataclasses

    return dataclasses.replace(dc, **kw)


def _decode_one(model, vocab, qa, index, spec, mode, m, seed):
    refl_open = vocab.id_of("<REFLECTION>")
    refl_close = vocab.id_of("</REFLECTION>")
    stop = (vocab.id_of("</CONCLUSION>"),)
    hook = reflection_hook(ReattentionConfig(mode=mode, m=m), refl_open, refl_close)
    vis, txt = _prompt_ids(qa, vocab)
    state = model.build_prompt(vis, txt)
    t0 = time.perf_counter()
    result = model.sample(
        state,
        temperature=spec.temperature, max_new=spec.max_new, seed=seed,
        stop_tokens=stop, greedy=spec.greedy, hook=hook, record_attention=True,
    )
    wall = time.perf_counter() - t0
    record = result.record
    mass = metrics.mass_series(record)
    lo, hi = record.visual_span
    span_attn = [step.weights[:, :, lo:hi].mean(axis=(0, 1)).round(6).tolist() for step in record.steps]
    row = {
        "index": index,
        "template_id": qa.template_id,
        "gold_answer": qa.gold_answer,
        "tokens": list(result.tokens),
        "text": " ".join(vocab.decode(result.tokens)),
        "stop_reason": result.stop_reason,
        "script": [e.to_json() for e in result.script],
        "visual_mass": [round(v, 8) for v in mass],
        "span_attn": span_attn,
    }
    timing = {"index": index, "wall_time_s": wall, "n_tokens": len(result.tokens)}
    return row, timing


def cmd_decode(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    vocab = default_vocab()
    dataset = scenes.read_dataset(_require(cfg.dataset, "--dataset"))
    model = Model.load(_require(cfg.checkpoint, "--checkpoint"))
    spec = cfg.decode
    items = dataset[: spec.n_items] if spec.n_items else dataset
    for mode in spec.modes:
        m_list = spec.m_values if mode == "vtr" else (50.0,)
        for m in m_list:
            tag = f"{mode}_m{m:g}" if mode == "vtr" else mode
            rows_path = out / f"decode_{tag}.jsonl"
            timing_path = out / f"timing_{tag}.jsonl"
            with open(rows_path, "w") as rf, open(timing_path, "w") as tf:
                for i, (qa, _) in enumerate(items):
                    seed = cfg.seed * 1_000_003 + i
                    row, timing = _decode_one(model, vocab, qa, i, spec, mode, m, seed)
                    rf.write(json.dumps(row) + "\n")
                    tf.write(json.dumps(timing) + "\n")
            print(f"decoded {len(items)} items -> {rows_path}")
    save_config(cfg, out / "run_config.json")


def _load_dump(path) -> list:
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def cmd_eval(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    vocab = default_vocab()
    rows = _load_dump(_require(cfg.responses, "--responses"))
    if not rows:
        raise ValueError(f"response dump {cfg.responses} is empty")
    dataset = scenes.read_dataset(_require(cfg.dataset, "--dataset"))
    spec = cfg.eval

    correct = 0
    reports = []
    n_r_total = 0
    l_r_total = 0
    slopes = []
    record_rows = []
    for row in rows:
        qa = dataset[row["index"]][0]
        resp = grammar.parse(vocab.decode(row["tokens"]), vocab)
        answer = grammar.extract_conclusion(resp)
        hit = int(answer is not None and answer == qa.gold_answer)
        correct += hit
        mention = metrics.build_report(resp, qa.gold_objects, tuple(spec.chair_blocks))
        reports.append(mention)
        stats = grammar.reflection_stats(resp)
        n_r_total += stats.n_r
        l_r_total += stats.l_r_total
        if len(row["visual_mass"]) >= 2:
            slopes.append(metrics.least_squares_slope(row["visual_mass"]))
        record_rows.append({
            "index": row["index"],
            "accurate": hit,
            "answer": answer,
            "gold_answer": qa.gold_answer,
            "generated_objects": sorted(mention.generated),
            "hallucinated_objects": sorted(mention.hallucinated),
            "recalled_objects": sorted(mention.recalled),
            "gold_objects": sorted(mention.gold),
            "n_r": stats.n_r,
            "l_r_total": stats.l_r_total,
            "n_tokens": len(row["tokens"]),
        })
    with open(out / "eval_records.jsonl", "w") as f:
        for rec in record_rows:
            f.write(json.dumps(rec) + "\n")

    summary = {
        "n_responses": len(rows),
        "accuracy": correct / len(rows),
        "n_r_mean": n_r_total / len(rows),
        "l_r_total_mean": l_r_total / len(rows),
        "mean_response_tokens": float(np.mean([len(r["tokens"]) for r in rows])),
    }
    timing_path = Path(cfg.responses).parent / Path(cfg.responses).name.replace("decode_", "timing_")
    if timing_path != Path(cfg.responses) and timing_path.exists():
        times = [t["wall_time_s"] for t in _load_dump(timing_path)]
        if times:
            summary["mean_wall_time_s"] = float(np.mean(times))
            summary["total_wall_time_s"] = float(np.sum(times))
    try:
        summary["chair_i"] = metrics.chair_i(reports)
        summary["chair_s"] = metrics.chair_s(reports)
    except metrics.UndefinedMetricError:
        summary["chair_i"] = None
        summary["chair_s"] = None
    try:
        summary["recall"] = metrics.recall(reports)
    except metrics.UndefinedMetricError:
        summary["recall"] = None
    if slopes:
        neg = sum(1 for s in slopes if s < 0)
        summary["attention_slope_mean"] = float(np.mean(slopes))
        summary["attention_slope_frac_negative"] = neg / len(slopes)
        summary["attention_slope_sign_p"] = metrics.sign_test_p(neg, len(slopes))

    profile = metrics.attention_profile([r["visual_mass"] for r in rows], spec.bucket_width)
    _write_series(
        out / "attention_vs_step.dat",
        [(b * spec.bucket_width, m) for b, m in enumerate(profile.means)],
    )

    if cfg.checkpoint:
        model = Model.load(cfg.checkpoint)
        items = []
        for row in rows[: spec.mi_items]:
            qa = dataset[row["index"]][0]
            if not row["tokens"]:
                continue
            vis, txt = _prompt_ids(qa, vocab)
            script = [InjectionEvent.from_json(e) for e in row["script"]]
            items.append((vis, txt, row["tokens"], script))
        if items:
            probes = metrics.mi_proxy(model, items, window=spec.mi_window)
            summary["mi_proxy_mean"] = float(np.mean([d.mean() for d, _ in probes]))
            pooled = {}
            for delta, _ in probes:
                for w in range(0, len(delta), spec.mi_window):
                    pooled.setdefault(w, []).append(delta[w: w + spec.mi_window].mean())
            _write_series(
                out / "visual_dependence_vs_step.dat",
                [(w, float(np.mean(vals))) for w, vals in sorted(pooled.items())],
            )

    if cfg.telemetry:
        telem = _load_dump(cfg.telemetry)
        _write_series(out / "reflection_count.dat", [(t["step"], t["n_r_mean"]) for t in telem])
        _write_series(out / "reflection_length.dat", [(t["step"], t["mean_reflection_length"]) for t in telem])
        _write_series(out / "accuracy_vs_step.dat", [(t["step"], t["acc_reward"]) for t in telem])

    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    save_config(cfg, out / "run_config.json")
    for key in sorted(summary):
        print(f"{key}: {summary[key]}")


def _write_series(path, pairs) -> None:
    """Two-column numeric series, one 'x y' pair per line."""
    with open(path, "w") as f:
        for x, y in pairs:
            f.write(f"{x:g} {y:.8g}\n")


if __name__ == "__main__":
    sys.exit(main())
