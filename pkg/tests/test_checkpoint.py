import json
import struct

import numpy as np
import pytest

from tinynerv.checkpoint import MAGIC, Checkpoint, size_report
from tinynerv.errors import ConfigurationError, FormatError, StorageError
from tinynerv.model import init_params, make_variant
from tinynerv.quant import QuantizedTensor, QuantPolicy, ptq_apply


@pytest.fixture(scope="module")
def fp_ckpt():
    cfg = make_variant("T-desk")
    return Checkpoint.from_params(cfg, init_params(cfg, seed=11), {"note": "unit"})


def test_fp32_round_trip_is_byte_stable(fp_ckpt, tmp_path):
    path = tmp_path / "m.tnrv"
    n = fp_ckpt.save(path)
    assert n == path.stat().st_size
    back = Checkpoint.load(path)
    assert back.variant == fp_ckpt.variant and back.metadata == {"note": "unit"}
    for k, v in fp_ckpt.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)
    assert back.to_bytes() == path.read_bytes()


def test_header_layout(fp_ckpt):
    data = fp_ckpt.to_bytes()
    magic, version, hlen = struct.unpack_from("<8sII", data)
    assert magic == MAGIC and version == 1
    header = json.loads(data[16 : 16 + hlen])
    assert header["precision"] == "fp32"
    first = header["tensors"][0]
    assert first["name"] == "stem.0.weight" and first["offset"] == 0 and first["nbytes"] == 4 * 256 * 160


@pytest.mark.parametrize("bits", [4, 6, 8])
def test_quantized_round_trip(fp_ckpt, bits):
    q = fp_ckpt.quantized(QuantPolicy(bits))
    assert q.precision == f"q{bits}" and q.is_quantized
    back = Checkpoint.from_bytes(q.to_bytes())
    assert back.to_bytes() == q.to_bytes()
    expect = ptq_apply(fp_ckpt.params(), QuantPolicy(bits))
    got = back.params()
    for k in expect:
        np.testing.assert_array_equal(got[k].data, expect[k].data)
    assert isinstance(back.tensors["blocks.1.weight"], QuantizedTensor)


@pytest.mark.parametrize("bits,ideal", [(8, 1 / 4), (4, 1 / 8)])
def test_size_ratio(fp_ckpt, bits, ideal):
    rep = size_report(fp_ckpt, fp_ckpt.quantized(QuantPolicy(bits)))
    assert abs(rep.weight_ratio - ideal) / ideal < 0.05
    assert rep.quant_file_bytes < rep.fp32_file_bytes
    assert f"int{bits}" in rep.table()


def test_bad_magic():
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"NOTNERV!" + bytes(8))


def test_truncated(fp_ckpt):
    data = fp_ckpt.to_bytes()
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(data[:-10])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(data[:5])


def test_unsupported_version(fp_ckpt):
    data = bytearray(fp_ckpt.to_bytes())
    struct.pack_into("<I", data, 8, 99)
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(bytes(data))


def test_variant_mismatch_detected(fp_ckpt):
    data = fp_ckpt.to_bytes()
    hlen = struct.unpack_from("<I", data, 12)[0]
    header = json.loads(data[16 : 16 + hlen])
    header["variant"]["stem_hidden"] = 128
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with pytest.raises(ConfigurationError):
        Checkpoint.from_bytes(data[:12] + struct.pack("<I", len(text)) + text + data[16 + hlen :])


def test_missing_file(tmp_path):
    with pytest.raises(StorageError):
        Checkpoint.load(tmp_path / "nope.tnrv")
