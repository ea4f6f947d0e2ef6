"""Run configuration: one flat record, loaded from YAML and overridden by flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from . import losses, pipeline, synth
from .models import DenoiserConfig, ModelBundle, SegmenterConfig
from .schedule import NoiseSchedule, linear_schedule


@dataclass
class RunConfig:
    dataset_root: str = ""
    category: str = "stripes"
    output_dir: str = "runs/default"
    seed: int = 0
    image_size: int = 64
    channels: int = 3
    precision: str = "float32"
    # built-in toy dataset, generated under output_dir when dataset_root is empty
    toy: bool = True
    toy_train: int = 200
    toy_test: int = 100
    toy_anomaly_fraction: float = 0.5
    # schedule
    T: int = 1000
    tau: int = 300
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    # networks
    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 128
    attention: bool = True
    heads: int = 4
    seg_base_channels: int = 32
    seg_depth: int = 2
    # losses
    gamma: float = 5.0
    smooth_l1_transition: float = 1.0
    focal_focusing: float = 2.0
    focal_alpha: float = 0.75
    # training / inference
    epochs: int = 1
    max_steps: int = 0  # 0 = no cap
    batch_size: int = 16
    normals_per_batch: int = 8
    learning_rate: float = 1e-4
    detach_reconstruction: bool = True
    w: float = 1.0
    t_s_infer: int = 100
    t_b_infer: int = 500
    K: int = 50
    val_fraction: float = 0.1
    # synthesis
    synth_mode: str = "texture"
    texture_corpus: str = ""
    n_synth: int = 32
    # evaluation / benchmark
    fpr_limit: float = 0.3
    iterative_start: int = 400
    bench_images: int = 2

    def validate(self) -> None:
        if self.image_size % (2 ** max(self.depth, self.seg_depth)):
            raise ValueError(f"image_size {self.image_size} is not divisible by 2^depth")
        if self.dataset_root and not Path(self.dataset_root).is_dir():
            raise FileNotFoundError(f"dataset_root {self.dataset_root} does not exist")
        if not self.dataset_root and not self.toy:
            raise ValueError("set dataset_root or enable the toy dataset")
        if self.texture_corpus and not Path(self.texture_corpus).is_dir():
            raise FileNotFoundError(f"texture_corpus {self.texture_corpus} does not exist")

    # builders -------------------------------------------------------------

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end, self.tau)

    def bundle(self) -> ModelBundle:
        return ModelBundle(
            DenoiserConfig(self.channels, self.base_channels, self.depth, self.time_embed_dim, self.attention, self.heads),
            SegmenterConfig(2 * self.channels, self.seg_base_channels, self.seg_depth),
            seed=self.seed,
            precision=self.precision,
        )

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.gamma, self.smooth_l1_transition, self.focal_focusing, self.focal_alpha)

    def train_config(self) -> pipeline.TrainConfig:
        return pipeline.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            normals_per_batch=self.normals_per_batch,
            learning_rate=self.learning_rate,
            seed=self.seed,
            detach_reconstruction=self.detach_reconstruction,
            w=self.w,
            t_s_infer=self.t_s_infer,
            t_b_infer=self.t_b_infer,
            K=self.K,
            iterative_start=self.iterative_start,
            max_steps=self.max_steps or None,
        )

    def synth_config(self) -> synth.SynthConfig:
        return synth.SynthConfig(mode=self.synth_mode)

    def corpus(self) -> synth.TextureCorpus | None:
        return synth.TextureCorpus(self.texture_corpus) if self.texture_corpus else None

    def data_root(self) -> Path:
        return Path(self.dataset_root) if self.dataset_root else Path(self.output_dir) / "toy_data"


_TYPES = get_type_hints(RunConfig)


def key_name(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def _coerce(name: str, value: Any) -> Any:
    kind = _TYPES[name]
    if kind is bool:
        if isinstance(value, bool):
            return value
        lowered = str(value).lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ValueError(f"{name}: expected an integer, got {value!r}")
    return kind(value)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """File values, then ``ADK_SEED``, then explicit overrides (kebab- or snake-case keys)."""
    values: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        values.update({key_name(k): v for k, v in loaded.items()})
    if "ADK_SEED" in os.environ:
        values["seed"] = os.environ["ADK_SEED"]
    values.update({key_name(k): v for k, v in (overrides or {}).items()})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(
        {f.name.replace("_", "-"): getattr(config, f.name) for f in fields(config)}, sort_keys=False
    )


def replace(config: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(config, **changes)
