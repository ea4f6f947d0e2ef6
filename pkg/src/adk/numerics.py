"""Array plumbing shared by every other module.

Tensors are plain ``torch.Tensor`` objects; this module adds the pieces the
rest of the package needs on top: named random streams, a validated
convolution primitive, a gradient helper that never returns ``None``, a
hand-written Adam step with explicit state, and the checkpoint container.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

FORMAT_VERSION = 1
_MAGIC = b"ADKCKPT\x00"

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def resolve_dtype(precision: str | torch.dtype) -> torch.dtype:
    if isinstance(precision, torch.dtype):
        return precision
    try:
        return DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


class Rng:
    """A named, seeded random stream.

    Two ``Rng`` objects built from the same ``(seed, stream)`` pair produce the
    same draws for the same call sequence; different stream names give
    statistically independent sequences.
    """

    def __init__(self, seed: int, stream: str = "main"):
        self.seed = int(seed)
        self.stream = stream
        digest = hashlib.sha256(stream.encode("utf-8")).digest()
        key = int.from_bytes(digest[:8], "little")
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed & (2**64 - 1), key])))

    def child(self, name: str) -> "Rng":
        """Derive an independent stream, e.g. one per sample or per worker."""
        return Rng(self.seed, f"{self.stream}/{name}")

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.generator.uniform(low, high))

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        out = self.generator.integers(low, high, size=size)
        return int(out) if size is None else out

    def choice(self, options: Sequence):
        return options[int(self.generator.integers(0, len(options)))]

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream!r})"


def randn(rng: Rng, shape: Sequence[int], dtype: str | torch.dtype = torch.float32) -> torch.Tensor:
    """I.i.d. standard normal samples drawn from ``rng``."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("randn needs a non-empty shape")
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape entries must be positive, got {shape}")
    dtype = resolve_dtype(dtype)
    draws = rng.generator.standard_normal(shape, dtype=np.float64)
    return torch.from_numpy(draws).to(dtype)


def conv2d(
    input: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation of an ``[N, C, H, W]`` batch with a ``[K, C, kh, kw]`` kernel."""
    if input.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {tuple(input.shape)} and {tuple(kernel.shape)}")
    if input.shape[1] != kernel.shape[1]:
        raise ValueError(f"channel mismatch: input has {input.shape[1]}, kernel expects {kernel.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    kh, kw = kernel.shape[2:]
    if kh > input.shape[2] + 2 * padding or kw > input.shape[3] + 2 * padding:
        raise ValueError("kernel larger than padded input")
    return F.conv2d(input, kernel, bias, stride=stride, padding=padding)


def gradient(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """d(loss)/d(param) for every param; params the loss does not touch get zeros."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    params = list(params)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], lr: float = 1e-4, **kwargs) -> "AdamState":
        return cls(
            lr=lr,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            **kwargs,
        )


@torch.no_grad()
def adam_step(state: AdamState, params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor]) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


# Checkpoint container layout (all integers little-endian):
#   magic(8) | version u32 | precision-name len u16 + utf8 | metadata len u32 + utf8 json
#   | entry count u32 | entries: name len u16 + utf8 | ndim u8 | dims u32 * ndim | payload bytes


def save_tensors(
    path: str | Path,
    tensors: Mapping[str, torch.Tensor],
    precision: str = "float32",
    metadata: str = "{}",
) -> None:
    dtype = resolve_dtype(precision)
    np_dtype = np.dtype("<f4") if dtype == torch.float32 else np.dtype("<f8")
    parts = [_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    prec = precision.encode()
    parts += [struct.pack("<H", len(prec)), prec]
    meta = metadata.encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype(np_dtype, copy=False)
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", arr.ndim)]
        parts += [struct.pack("<I", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], str, str]:
    """Read a checkpoint container; returns ``(tensors, precision, metadata)``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)

    def take(fmt: str):
        nonlocal pos
        values = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return values[0] if len(values) == 1 else values

    version = take("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    n = take("<H")
    precision = blob[pos : pos + n].decode()
    pos += n
    n = take("<I")
    metadata = blob[pos : pos + n].decode("utf-8")
    pos += n
    np_dtype = np.dtype("<f4") if precision == "float32" else np.dtype("<f8")
    tensors = {}
    for _ in range(take("<I")):
        n = take("<H")
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        ndim = take("<B")
        shape = tuple(take("<I") for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=pos).reshape(shape)
        pos += count * np_dtype.itemsize
        tensors[name] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True))
    return tensors, precision, metadata
