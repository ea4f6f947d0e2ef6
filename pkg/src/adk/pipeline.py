"""Joint training, norm-guided inference and the denoising-paradigm benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

from . import losses, numerics, synth
from .models import ModelBundle
from .numerics import AdamState, Rng, randn
from .schedule import (
    DenoiserHandle,
    NoiseSchedule,
    ddpm_step,
    forward_diffuse,
    guided_estimate,
    norm_guided_reconstruct,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 16
    normals_per_batch: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    detach_reconstruction: bool = True
    w: float = 1.0
    t_s_infer: int = 100
    t_b_infer: int = 500
    K: int = 50
    iterative_start: int = 400
    max_steps: int | None = None

    def validate(self, sched: NoiseSchedule) -> None:
        if not 0 <= self.normals_per_batch <= self.batch_size:
            raise ValueError("normals_per_batch must lie in [0, batch_size]")
        if not 0 <= self.t_s_infer <= sched.tau < self.t_b_infer < sched.T:
            raise ValueError(
                f"need 0 <= t_s_infer <= tau < t_b_infer < T, got {self.t_s_infer}, {sched.tau}, {self.t_b_infer}, {sched.T}"
            )
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass
class LossComponents:
    noise: float
    mask: float
    total: float


@dataclass
class Batch:
    images: torch.Tensor  # [N, C, H, W]
    masks: torch.Tensor  # [N, 1, H, W]
    labels: torch.Tensor  # [N]


@dataclass
class InferenceResult:
    reconstruction: np.ndarray  # H x W x C
    heatmap: np.ndarray  # H x W
    image_score: float
    denoiser_forwards: int = 2
    segmenter_forwards: int = 1
    wall_time: float = 0.0

    @property
    def forwards_used(self) -> int:
        return self.denoiser_forwards + self.segmenter_forwards


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns NaN/inf; ``state`` carries the diagnostic dump."""

    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


class CountingDenoiser:
    """Wraps a denoiser handle and counts forward calls."""

    def __init__(self, denoiser: DenoiserHandle):
        self.denoiser = denoiser
        self.calls = 0

    def __call__(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return self.denoiser(x_t, t)


def to_tensor(images: np.ndarray | Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``H x W x C`` image(s) to an ``[N, C, H, W]`` tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_images(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().transpose(0, 2, 3, 1)


def make_batch(samples: Sequence[synth.SynthSample], dtype: torch.dtype = torch.float32) -> Batch:
    images = to_tensor([s.image for s in samples], dtype)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float64)).to(dtype)[:, None]
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)
    return Batch(images=images, masks=masks, labels=labels)


def image_score(heatmap: np.ndarray | torch.Tensor, K: int) -> float:
    """Mean of the ``K`` largest heatmap values (``K`` capped at the pixel count)."""
    values = np.sort(np.asarray(heatmap, dtype=np.float64).ravel())
    k = min(int(K), values.size)
    if k < 1:
        raise ValueError("K must be >= 1")
    return float(values[-k:].mean())


def draw_timesteps(rng: Rng, n: int, sched: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    t_s = torch.from_numpy(rng.integers(0, sched.tau + 1, size=n)).long()
    t_b = torch.from_numpy(rng.integers(sched.tau + 1, sched.T, size=n)).long()
    return t_s, t_b


def compute_losses(
    bundle: ModelBundle,
    batch: Batch,
    sched: NoiseSchedule,
    weights: losses.LossWeights,
    config: TrainConfig,
    rng: Rng,
) -> tuple[torch.Tensor, torch.Tensor, dict]:
    """Forward pass of the joint objective; returns ``(noise, mask, extras)``."""
    x0 = batch.images
    n = x0.shape[0]
    t_s, t_b = draw_timesteps(rng, n, sched)
    eps_s = randn(rng, x0.shape, x0.dtype)
    eps_b = randn(rng, x0.shape, x0.dtype)
    x_ts = forward_diffuse(x0, t_s, eps_s, sched)
    x_tb = forward_diffuse(x0, t_b, eps_b, sched)
    pred = bundle.denoiser(torch.cat([x_ts, x_tb]), torch.cat([t_s, t_b]))
    pred_s, pred_b = pred[:n], pred[n:]
    noise = losses.noise_loss(eps_s, pred_s, eps_b, pred_b, batch.labels)

    if config.detach_reconstruction:
        pred_s, pred_b = pred_s.detach(), pred_b.detach()
    x0_g = guided_estimate(x_ts, x_tb, pred_s, pred_b, t_s, t_b, config.w, sched)
    heat = bundle.segmenter(x0, x0_g)
    mask = losses.mask_loss(batch.masks, heat, weights)
    return noise, mask, {"t_s": t_s, "t_b": t_b, "reconstruction": x0_g, "heatmap": heat}


def train_step(
    bundle: ModelBundle,
    batch: Batch,
    sched: NoiseSchedule,
    weights: losses.LossWeights,
    config: TrainConfig,
    rng: Rng,
    optimizer: AdamState,
) -> tuple[LossComponents, ModelBundle]:
    """One joint update of both sub-networks."""
    noise, mask, extras = compute_losses(bundle, batch, sched, weights, config, rng)
    total = losses.total_loss(noise, mask)
    if not torch.isfinite(total):
        state = {
            "optimizer_step": optimizer.step,
            "noise_loss": noise.item(),
            "mask_loss": mask.item(),
            "t_s": extras["t_s"].tolist(),
            "t_b": extras["t_b"].tolist(),
            "labels": batch.labels.tolist(),
            "nonfinite_params": [
                name for name, p in bundle.named_tensors().items() if not torch.isfinite(p).all()
            ],
        }
        raise TrainingDiverged(f"non-finite loss at optimizer step {optimizer.step}", state)
    params = bundle.parameters()
    grads = numerics.gradient(total, params)
    numerics.adam_step(optimizer, params, grads)
    return LossComponents(noise.item(), mask.item(), total.item()), bundle


class BatchSampler:
    """Yields 8+8-style batches: untouched normals plus synthetic anomalies."""

    def __init__(
        self,
        normals: Sequence[np.ndarray],
        config: TrainConfig,
        rng: Rng,
        corpus: synth.TextureCorpus | None = None,
        synth_config: synth.SynthConfig = synth.SynthConfig(),
        dtype: torch.dtype = torch.float32,
    ):
        if not len(normals):
            raise ValueError("no training images")
        self.normals = list(normals)
        self.config = config
        self.rng = rng
        self.corpus = corpus
        self.synth_config = synth_config
        self.dtype = dtype
        self._count = 0

    def steps_per_epoch(self) -> int:
        per_batch = max(self.config.normals_per_batch, 1)
        return max(1, -(-len(self.normals) // per_batch))

    def __iter__(self) -> Iterator[Batch]:
        for _ in range(self.config.epochs):
            order = self.rng.permutation(len(self.normals))
            for step in range(self.steps_per_epoch()):
                yield self.next_batch(order, step)

    def next_batch(self, order: np.ndarray | None = None, step: int = 0) -> Batch:
        cfg = self.config
        if order is None:
            order = self.rng.permutation(len(self.normals))
        n_normal = cfg.normals_per_batch
        picks = [order[(step * n_normal + i) % len(order)] for i in range(n_normal)]
        samples = [synth.normal_sample(self.normals[i]) for i in picks]
        for _ in range(cfg.batch_size - n_normal):
            sample_rng = self.rng.child(f"synth-{self._count}")
            self._count += 1
            source = self.normals[sample_rng.integers(0, len(self.normals))]
            samples.append(synth.make_synthetic(source, sample_rng, self.corpus, self.synth_config))
        return make_batch(samples, self.dtype)


def train(
    bundle: ModelBundle,
    normals: Sequence[np.ndarray],
    sched: NoiseSchedule,
    weights: losses.LossWeights,
    config: TrainConfig,
    corpus: synth.TextureCorpus | None = None,
    synth_config: synth.SynthConfig = synth.SynthConfig(),
    callback: Callable[[int, LossComponents], None] | None = None,
) -> list[LossComponents]:
    """Run ``config.epochs`` epochs (or ``config.max_steps`` steps) of joint training."""
    config.validate(sched)
    root = Rng(config.seed, "train")
    sampler = BatchSampler(normals, config, root.child("batches"), corpus, synth_config, bundle.dtype)
    step_rng = root.child("steps")
    optimizer = AdamState.for_params(bundle.parameters(), lr=config.learning_rate)
    history = []
    bundle.denoiser.train()
    bundle.segmenter.train()
    for step, batch in enumerate(sampler):
        if config.max_steps is not None and step >= config.max_steps:
            break
        components, _ = train_step(bundle, batch, sched, weights, config, step_rng, optimizer)
        history.append(components)
        if callback is not None:
            callback(step, components)
        log.debug("step %d: %s", step, components)
    return history


@torch.no_grad()
def infer_batch(
    bundle: ModelBundle,
    x0: torch.Tensor,
    sched: NoiseSchedule,
    config: TrainConfig,
    rng: Rng,
) -> list[InferenceResult]:
    """Norm-guided one-step inference at the fixed ``(t_s_infer, t_b_infer)``."""
    start = time.perf_counter()
    x0 = x0.to(bundle.dtype)
    counter = CountingDenoiser(bundle.denoiser)
    recon, _ = norm_guided_reconstruct(x0, config.t_s_infer, config.t_b_infer, config.w, counter, rng, sched)
    heat = bundle.segmenter(x0, recon)
    elapsed = (time.perf_counter() - start) / x0.shape[0]
    recon_np, heat_np = to_images(recon), heat[:, 0].cpu().numpy()
    return [
        InferenceResult(
            reconstruction=recon_np[i],
            heatmap=heat_np[i],
            image_score=image_score(heat_np[i], config.K),
            denoiser_forwards=counter.calls,
            segmenter_forwards=1,
            wall_time=elapsed,
        )
        for i in range(x0.shape[0])
    ]


def infer(
    bundle: ModelBundle,
    x0: np.ndarray | torch.Tensor,
    sched: NoiseSchedule,
    config: TrainConfig,
    rng: Rng,
) -> InferenceResult:
    """Single-image inference; ``x0`` is ``H x W x C`` or a 1-image batch tensor."""
    if isinstance(x0, np.ndarray):
        x0 = to_tensor(x0, bundle.dtype)
    if x0.ndim == 3:
        x0 = x0[None]
    if x0.shape[0] != 1:
        raise ValueError("infer takes one image; use infer_batch for batches")
    return infer_batch(bundle, x0, sched, config, rng)[0]


def _handle(model) -> DenoiserHandle:
    return model.denoiser if isinstance(model, ModelBundle) else model


@torch.no_grad()
def iterative_reconstruct(
    model: ModelBundle | DenoiserHandle,
    x0: torch.Tensor,
    t_start: int,
    sched: NoiseSchedule,
    rng: Rng,
) -> tuple[torch.Tensor, int]:
    """Corrupt to ``t_start`` then run ``t_start`` ancestral steps; returns ``(x0_hat, forwards)``."""
    if not 1 <= t_start < sched.T:
        raise ValueError(f"t_start must lie in [1, {sched.T - 1}], got {t_start}")
    denoiser = CountingDenoiser(_handle(model))
    n = x0.shape[0]
    x = forward_diffuse(x0, t_start, randn(rng, x0.shape, x0.dtype), sched)
    for t in range(t_start, 0, -1):
        eps = denoiser(x, torch.full((n,), t, dtype=torch.long))
        z = randn(rng, x.shape, x.dtype) if t > 1 else torch.zeros_like(x)
        x = ddpm_step(x, t, eps, z, sched)
    return x, denoiser.calls


@dataclass
class ParadigmRow:
    paradigm: str
    forwards_per_image: float
    wall_fps: float
    seconds_per_image: float


@torch.no_grad()
def bench_paradigms(
    bundle: ModelBundle,
    images: torch.Tensor,
    sched: NoiseSchedule,
    config: TrainConfig,
    seed: int = 0,
) -> list[ParadigmRow]:
    """Time norm-guided one-step against iterative reconstruction, image by image.

    Both rows include the segmentation forward, so FPS is end-to-end. Forward
    counts are exact (counted denoiser calls); FPS depends on the machine.
    """
    images = images.to(bundle.dtype)
    rows = []
    for name in ("norm-guided", "iterative"):
        rng = Rng(seed, f"bench/{name}")
        counter = CountingDenoiser(bundle.denoiser)
        start = time.perf_counter()
        for i in range(images.shape[0]):
            x0 = images[i : i + 1]
            if name == "norm-guided":
                recon, _ = norm_guided_reconstruct(
                    x0, config.t_s_infer, config.t_b_infer, config.w, counter, rng, sched
                )
            else:
                recon, _ = iterative_reconstruct(counter, x0, config.iterative_start, sched, rng)
            bundle.segmenter(x0, recon)
        elapsed = time.perf_counter() - start
        n = images.shape[0]
        rows.append(ParadigmRow(name, counter.calls / n, n / elapsed, elapsed / n))
    return rows
