"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TINYNERV"                 8-byte magic
    u32 version                 currently 1
    u32 header_len
    header                      UTF-8 JSON, keys sorted, no whitespace
    payload                     tensor blobs, back to back, in header order

Each header tensor entry carries ``name``, ``shape``, ``kind`` (``"f32"`` or
``"quant"``), ``offset`` and ``nbytes`` relative to the payload start. A
``"f32"`` blob is the tensor as little-endian float32 in row-major order. A
``"quant"`` blob is ``rows`` float32 minima, then ``rows`` float32 scales,
then the packed codes (see :func:`tinynerv.quant.pack_bits`); the entry also
records ``bits`` and ``granularity``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Tensor
from .errors import ConfigurationError, FormatError, StorageError
from .model import VariantConfig, check_params, param_shapes
from .quant import QuantizedTensor, QuantPolicy, dequantize, packed_size, quantize_params

MAGIC = b"TINYNERV"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    variant: VariantConfig
    tensors: dict[str, object]  # name -> float32 ndarray | QuantizedTensor
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, cfg: VariantConfig, params: Mapping[str, Tensor], metadata: dict | None = None) -> "Checkpoint":
        check_params(params, cfg)
        tensors = {k: np.asarray(v.data, dtype=np.float32).copy() for k, v in params.items()}
        return cls(cfg, tensors, dict(metadata or {}))

    @property
    def precision(self) -> str:
        bits = {t.bits for t in self.tensors.values() if isinstance(t, QuantizedTensor)}
        if not bits:
            return "fp32"
        if len(bits) > 1:
            return "mixed"
        return f"q{bits.pop()}"

    @property
    def is_quantized(self) -> bool:
        return self.precision != "fp32"

    def params(self, requires_grad: bool = False) -> dict[str, Tensor]:
        """Dequantized float32 parameter tensors."""
        out = {}
        for k, v in self.tensors.items():
            arr = dequantize(v) if isinstance(v, QuantizedTensor) else v
            out[k] = Tensor(np.array(arr, dtype=np.float32), requires_grad=requires_grad)
        return out

    def quantized(self, policy: QuantPolicy, metadata: dict | None = None) -> "Checkpoint":
        meta = {**self.metadata, **(metadata or {}), "quant": {"bits": policy.bits, "granularity": policy.granularity}}
        return Checkpoint(self.variant, quantize_params(self.params(), policy), meta)

    # -- serialisation ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        entries = []
        blobs = []
        offset = 0
        for name, t in self.tensors.items():
            if isinstance(t, QuantizedTensor):
                blob = (
                    np.asarray(t.w_min, dtype="<f4").tobytes()
                    + np.asarray(t.scale, dtype="<f4").tobytes()
                    + t.payload
                )
                entry = {
                    "name": name,
                    "shape": list(t.shape),
                    "kind": "quant",
                    "bits": t.bits,
                    "granularity": t.granularity,
                    "rows": int(len(t.w_min)),
                }
            else:
                arr = np.asarray(t, dtype="<f4")
                blob = arr.tobytes()
                entry = {"name": name, "shape": list(arr.shape), "kind": "f32"}
            entry["offset"] = offset
            entry["nbytes"] = len(blob)
            offset += len(blob)
            entries.append(entry)
            blobs.append(blob)
        header = {
            "variant": self.variant.to_dict(),
            "precision": self.precision,
            "metadata": self.metadata,
            "tensors": entries,
        }
        text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
        return _PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)

    def save(self, path: str | Path) -> int:
        data = self.to_bytes()
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_bytes(data)
        except OSError as exc:
            raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
        return len(data)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise FormatError("file too short for a checkpoint")
        magic, version, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise FormatError("not a tinynerv checkpoint (bad magic)")
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        start = _PREFIX.size + hlen
        try:
            header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt checkpoint header: {exc}") from exc
        try:
            cfg = VariantConfig.from_dict(header["variant"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint header lacks a valid variant: {exc}") from exc
        payload = data[start:]
        expected = param_shapes(cfg)
        tensors: dict[str, object] = {}
        for e in header.get("tensors", []):
            name, shape = e["name"], tuple(e["shape"])
            if expected.get(name) != shape:
                raise ConfigurationError(f"checkpoint tensor {name} has shape {shape}, variant expects {expected.get(name)}")
            blob = payload[e["offset"] : e["offset"] + e["nbytes"]]
            if len(blob) != e["nbytes"]:
                raise FormatError(f"payload truncated in tensor {name}")
            count = math.prod(shape)
            if e["kind"] == "f32":
                if e["nbytes"] != 4 * count:
                    raise FormatError(f"{name}: {e['nbytes']} bytes for {count} float32 values")
                tensors[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
            elif e["kind"] == "quant":
                rows, bits = e["rows"], e["bits"]
                if e["nbytes"] != 8 * rows + packed_size(count, bits):
                    raise FormatError(f"{name}: quantized blob has wrong length")
                w_min = np.frombuffer(blob[: 4 * rows], dtype="<f4").astype(np.float32)
                scale = np.frombuffer(blob[4 * rows : 8 * rows], dtype="<f4").astype(np.float32)
                tensors[name] = QuantizedTensor(bits, shape, e["granularity"], w_min, scale, bytes(blob[8 * rows :]))
            else:
                raise FormatError(f"{name}: unknown tensor kind {e['kind']!r}")
        if list(tensors) != list(expected):
            raise ConfigurationError("checkpoint tensor table does not match the variant's parameter layout")
        return cls(cfg, tensors, header.get("metadata", {}))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)


@dataclass(frozen=True)
class SizeReport:
    fp32_weight_bytes: int
    quant_weight_bytes: int
    quant_meta_bytes: int
    unquantized_bytes: int
    fp32_file_bytes: int
    quant_file_bytes: int
    bits: int

    @property
    def weight_ratio(self) -> float:
        """Packed-code bytes over the float32 bytes of the same weights."""
        return self.quant_weight_bytes / self.fp32_weight_bytes

    @property
    def file_ratio(self) -> float:
        return self.quant_file_bytes / self.fp32_file_bytes

    def table(self) -> str:
        return "\n".join(
            [
                f"precision            int{self.bits}",
                f"fp32 weights         {self.fp32_weight_bytes:>12d} B",
                f"packed weights       {self.quant_weight_bytes:>12d} B  (ratio {self.weight_ratio:.4f}, ideal {self.bits / 32:.4f})",
                f"per-channel min/scale{self.quant_meta_bytes:>12d} B",
                f"biases (fp32)        {self.unquantized_bytes:>12d} B",
                f"fp32 file            {self.fp32_file_bytes:>12d} B",
                f"quantized file       {self.quant_file_bytes:>12d} B  (ratio {self.file_ratio:.4f})",
            ]
        )


def size_report(fp: Checkpoint, q: Checkpoint) -> SizeReport:
    fp_w = q_w = meta = other = 0
    for name, t in q.tensors.items():
        if isinstance(t, QuantizedTensor):
            fp_w += 4 * t.count
            q_w += t.nbytes
            meta += 8 * len(t.w_min)
        else:
            other += 4 * np.asarray(t).size
    bits = next(t.bits for t in q.tensors.values() if isinstance(t, QuantizedTensor))
    return SizeReport(fp_w, q_w, meta, other, len(fp.to_bytes()), len(q.to_bytes()), bits)
