import json
import struct

import numpy as np
import pytest

from ssmtkrd import CheckpointFormatError, ModelConfig, init_weights
from ssmtkrd.checkpoint import (
    ALIGN,
    MAGIC,
    generate_checkpoint,
    load_checkpoint,
    parse_checkpoint,
    serialize_checkpoint,
    sha256_file,
)
from ssmtkrd.ssm_core import LAYER_TENSORS

FIXTURE = ModelConfig(num_layers=2, model_dim=8, inner_dim=16, state_dim=4, seed=11)


def header_of(data):
    (n,) = struct.unpack("<I", data[8:12])
    return json.loads(data[12:12 + n]), 12 + n


@pytest.fixture
def ckpt(tmp_path):
    return generate_checkpoint(FIXTURE, tmp_path / "m.bin")


def test_same_seed_same_sha(tmp_path):
    a = generate_checkpoint(FIXTURE, tmp_path / "a.bin")
    b = generate_checkpoint(FIXTURE, tmp_path / "b.bin")
    assert sha256_file(a) == sha256_file(b)


def test_different_seed_negative_A(tmp_path):
    _, w1 = load_checkpoint(generate_checkpoint(FIXTURE, tmp_path / "a.bin", seed=1))
    _, w2 = load_checkpoint(generate_checkpoint(FIXTURE, tmp_path / "b.bin", seed=2))
    assert not np.array_equal(w1[0].A_diag, w2[0].A_diag)
    for w in w1 + w2:
        assert np.all(w.A_diag < 0)


def test_manifest_layout(ckpt):
    data = ckpt.read_bytes()
    assert data[:8] == MAGIC
    header, header_end = header_of(data)
    names = [t["name"] for t in header["tensors"]]
    assert len(names) == 2 * 9
    assert names == [f"layers.{i}.{n}" for i in range(2) for n in LAYER_TENSORS]
    prev = header_end
    for t in header["tensors"]:
        assert t["dtype"] == "f32"
        assert t["offset"] % ALIGN == 0 and t["offset"] >= prev
        prev = t["offset"] + 4 * int(np.prod(t["shape"]))
    assert prev == len(data)
    assert header["config"]["num_layers"] == 2
    assert header["format_version"] == 1


def test_round_trip(ckpt):
    config, weights = load_checkpoint(ckpt)
    assert config == FIXTURE
    for got, want in zip(weights, init_weights(FIXTURE)):
        for name in LAYER_TENSORS:
            assert getattr(got, name).tobytes() == getattr(want, name).tobytes()
    assert serialize_checkpoint(config, weights) == ckpt.read_bytes()


def test_bad_magic(ckpt):
    data = bytearray(ckpt.read_bytes())
    data[0] ^= 0xFF
    ckpt.write_bytes(bytes(data))
    with pytest.raises(CheckpointFormatError, match="bad magic"):
        load_checkpoint(ckpt)


def test_truncation_names_tensor(ckpt):
    data = ckpt.read_bytes()
    header, _ = header_of(data)
    victim = header["tensors"][12]
    cut = victim["offset"] + 8
    with pytest.raises(CheckpointFormatError, match=victim["name"]):
        parse_checkpoint(data[:cut])


def test_truncated_header(ckpt):
    with pytest.raises(CheckpointFormatError, match="truncated"):
        parse_checkpoint(ckpt.read_bytes()[:40])


def _rewrite_header(data, mutate):
    header, end = header_of(data)
    mutate(header)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    raw = raw.ljust(end - 12)  # JSON tolerates trailing spaces; keep offsets valid
    return data[:8] + struct.pack("<I", len(raw)) + raw + data[12 + len(raw):]


def test_misaligned_offset(ckpt):
    def shift(h):
        h["tensors"][3]["offset"] += 4
    with pytest.raises(CheckpointFormatError, match="misaligned offset"):
        parse_checkpoint(_rewrite_header(ckpt.read_bytes(), shift))


def test_wrong_dtype(ckpt):
    def f16(h):
        h["tensors"][0]["dtype"] = "f16"
    with pytest.raises(CheckpointFormatError, match="dtype"):
        parse_checkpoint(_rewrite_header(ckpt.read_bytes(), f16))


def test_trailing_bytes(ckpt):
    with pytest.raises(CheckpointFormatError, match="file size"):
        parse_checkpoint(ckpt.read_bytes() + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(OSError, match="nope.bin"):
        load_checkpoint(tmp_path / "nope.bin")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError, match="missing"):
        generate_checkpoint(FIXTURE, tmp_path / "missing" / "m.bin")
