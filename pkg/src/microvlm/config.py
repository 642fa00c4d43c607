"""Run configuration: one serializable object per experiment.

A run re-executed from its saved config and seed reproduces its
telemetry byte for byte (decode wall-times live in a separate timing
file outside that contract). JSON round-trips exactly:
``load_config(save_config(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .reattention import ReattentionConfig
from .rewards import RewardConfig
from .scenes import TEMPLATES
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "MICROVLM_OUTPUT_ROOT"


@dataclass(frozen=True)
class ModelSpec:
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_positions: int = 512


@dataclass(frozen=True)
class SynthSpec:
    n: int = 1000
    templates: tuple = TEMPLATES
    width: int = 4
    height: int = 4
    min_objects: int = 1
    max_objects: int = 3
    with_traces: bool = True


@dataclass(frozen=True)
class SftSpec:
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 8
    freeze_visual: bool = True
    reattention: str = "off"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class DecodeSpec:
    modes: tuple = ("off",)
    m_values: tuple = (50.0,)
    n_items: int = 0  # 0: decode the whole dataset
    max_new: int = 96
    temperature: float = 1.0
    greedy: bool = False


@dataclass(frozen=True)
class EvalSpec:
    bucket_width: int = 8
    mi_window: int = 16
    mi_items: int = 8
    chair_blocks: tuple = ("CONCLUSION",)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = ""
    checkpoint: str = ""
    responses: str = ""
    telemetry: str = ""
    out_dir: str = ""
    model: ModelSpec = ModelSpec()
    synth: SynthSpec = SynthSpec()
    sft: SftSpec = SftSpec()
    train: TrainConfig = TrainConfig()
    reward: RewardConfig = RewardConfig()
    reattention: ReattentionConfig = ReattentionConfig()
    decode: DecodeSpec = DecodeSpec()
    eval: EvalSpec = EvalSpec()


_SECTIONS = {
    "model": ModelSpec,
    "synth": SynthSpec,
    "sft": SftSpec,
    "train": TrainConfig,
    "reward": RewardConfig,
    "reattention": ReattentionConfig,
    "decode": DecodeSpec,
    "eval": EvalSpec,
}


def to_json_dict(cfg: RunConfig) -> dict:
    def convert(value):
        if dataclasses.is_dataclass(value):
            return {f.name: convert(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    return convert(cfg)


def _section_from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**kwargs)


def from_json_dict(data: dict) -> RunConfig:
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _section_from_dict(_SECTIONS[key], value)
        elif key in ("seed", "dataset", "checkpoint", "responses", "telemetry", "out_dir"):
            kwargs[key] = value
        else:
            raise ValueError(f"unknown RunConfig key: {key!r}")
    return RunConfig(**kwargs)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(to_json_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path) -> RunConfig:
    with open(path) as f:
        return from_json_dict(json.load(f))


def output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")
