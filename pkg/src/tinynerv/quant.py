"""Weights-only uniform min-max quantization, fake-quant with STE, and bit packing.

The scale follows ``s = (w_max - w_min) / 2**b``. With that denominator the
maximum weight rounds to code ``2**b``, which does not fit in ``b`` bits, so
codes are clamped to ``2**b - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, FormatError
from .model import is_weight

GRANULARITIES = ("per_channel", "per_tensor")


@dataclass(frozen=True)
class QuantPolicy:
    """``bits=None`` means full precision (quantization is a no-op)."""

    bits: int | None = 8
    granularity: str = "per_channel"

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ConfigurationError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.bits is not None and not 2 <= self.bits <= 8:
            raise ConfigurationError(f"bit width must be in [2, 8], got {self.bits}")

    @property
    def passthrough(self) -> bool:
        return self.bits is None

    def targets(self, name: str) -> bool:
        return is_weight(name) and not name.startswith("adapters.")

    @classmethod
    def parse(cls, bits, granularity: str = "per_channel") -> "QuantPolicy":
        if bits in (None, "fp32", 32, "32"):
            return cls(None, granularity)
        try:
            return cls(int(bits), granularity)
        except ValueError as exc:
            raise ConfigurationError(f"bad bit width {bits!r}") from exc


# -- bit packing -------------------------------------------------------------------


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def pack_bits(codes, bits: int) -> bytes:
    """Concatenate ``bits``-wide codes LSB-first into a little-endian bit stream.

    Code ``i`` occupies stream bits ``[i*bits, (i+1)*bits)``; bit ``j`` of the
    stream is bit ``j % 8`` of byte ``j // 8``.
    """
    codes = np.asarray(codes).reshape(-1)
    if not 1 <= bits <= 8:
        raise ConfigurationError(f"bit width must be in [1, 8], got {bits}")
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise OverflowError(f"code out of range for {bits}-bit packing")
    codes = codes.astype(np.uint8)
    if bits == 8:
        return codes.tobytes()
    shifts = np.arange(bits, dtype=np.uint8)
    stream = ((codes[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(stream, bitorder="little").tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    if len(data) != packed_size(count, bits):
        raise FormatError(f"packed payload has {len(data)} bytes, expected {packed_size(count, bits)} for {count} x {bits}-bit codes")
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        return raw.copy()
    stream = np.unpackbits(raw, bitorder="little", count=count * bits).reshape(count, bits)
    weights = (1 << np.arange(bits)).astype(np.uint8)
    return (stream * weights).sum(axis=1).astype(np.uint8)


# -- quantizer ---------------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedTensor:
    bits: int
    shape: tuple[int, ...]
    granularity: str
    w_min: np.ndarray  # float32, one entry per row (output channel) or one total
    scale: np.ndarray  # float32, same length as w_min
    payload: bytes

    @property
    def count(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    def codes(self) -> np.ndarray:
        return unpack_bits(self.payload, self.bits, self.count).reshape(self.shape)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def _rows(w: np.ndarray, granularity: str) -> np.ndarray:
    if granularity == "per_tensor" or w.ndim < 2:
        return w.reshape(1, -1)
    return w.reshape(w.shape[0], -1)


def quantize(w, policy: QuantPolicy, grid: QuantizedTensor | None = None) -> QuantizedTensor:
    """Codes ``clamp(round((w - w_min) / s), 0, 2**b - 1)`` per output channel.

    ``grid`` reuses the (w_min, s) calibration of an existing quantized tensor
    instead of observing min/max of ``w``.
    """
    if policy.bits is None:
        raise ConfigurationError("quantize() needs a bit width; full-precision policy given")
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    if not np.all(np.isfinite(data)):
        raise ConfigurationError("cannot quantize non-finite weights")
    b = policy.bits
    rows = _rows(data.astype(np.float32), policy.granularity)
    if grid is None:
        w_min = rows.min(axis=1).astype(np.float32)
        w_max = rows.max(axis=1).astype(np.float32)
        scale = ((w_max.astype(np.float64) - w_min) / (1 << b)).astype(np.float32)
    else:
        w_min, scale = grid.w_min, grid.scale
    top = (1 << b) - 1
    lo = w_min.astype(np.float64)[:, None]
    s = scale.astype(np.float64)[:, None]
    safe = np.where(s > 0, s, 1.0)
    codes = np.where(s > 0, np.rint((rows - lo) / safe), 0.0)
    codes = np.clip(codes, 0, top).astype(np.uint8)
    return QuantizedTensor(b, tuple(data.shape), policy.granularity, w_min, scale, pack_bits(codes, b))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """``s * code + w_min`` evaluated in float32."""
    if len(q.payload) != packed_size(q.count, q.bits):
        raise FormatError(f"corrupted payload: {len(q.payload)} bytes for {q.count} x {q.bits}-bit codes")
    codes = q.codes()
    rows = _rows(codes, q.granularity).astype(np.float32)
    out = rows * q.scale[:, None] + q.w_min[:, None]
    return out.reshape(q.shape)


def quant_image(w, policy: QuantPolicy) -> np.ndarray:
    """dequantize(quantize(w)) as a float32 array (identity for full precision)."""
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    if policy.passthrough:
        return data.astype(np.float32, copy=True)
    return dequantize(quantize(data, policy))


def ptq_apply(params: Mapping[str, Tensor], policy: QuantPolicy) -> dict[str, Tensor]:
    """Replace every targeted weight by its quantize-dequantize image; other tensors are copied."""
    out = {}
    for name, p in params.items():
        if not policy.passthrough and policy.targets(name):
            out[name] = Tensor(quant_image(p, policy).astype(p.dtype))
        else:
            out[name] = Tensor(p.data.copy())
    return out


def quantize_params(params: Mapping[str, Tensor], policy: QuantPolicy) -> dict[str, object]:
    """Name -> QuantizedTensor for targeted weights, float32 arrays for everything else."""
    if policy.passthrough:
        raise ConfigurationError("quantize_params needs a bit width")
    return {
        name: quantize(p, policy) if policy.targets(name) else np.asarray(p.data, dtype=np.float32).copy()
        for name, p in params.items()
    }


def fake_quant_forward(w: Tensor, policy: QuantPolicy) -> Tensor:
    """Forward value is the PTQ image of ``w``; the backward pass is the identity (STE)."""
    if policy.passthrough:
        return w
    return ag.straight_through(w, quant_image(w, policy).astype(w.dtype), op="fake_quant")


def fake_quant_params(params: Mapping[str, Tensor], policy: QuantPolicy) -> dict[str, Tensor]:
    return {name: fake_quant_forward(p, policy) if policy.targets(name) else p for name, p in params.items()}


def quant_error(w, policy: QuantPolicy) -> np.ndarray:
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    return np.abs(data.astype(np.float64) - quant_image(data, policy))


def qat_finetune(params, dataset, policy, kd_cfg=None, steps: int = 0, **kwargs):
    """Fake-quantized fine-tuning from a full-precision checkpoint (see :func:`train.qat_finetune`)."""
    from .train import qat_finetune as _run

    return _run(params, dataset, policy, kd_cfg=kd_cfg, steps=steps, **kwargs)
