"""Binary checkpoint format (see docs/checkpoint-format.md).

Layout::

    b"SSMTKRD1" | u32 LE header_len | header JSON (UTF-8) | zero padding | tensors

Every tensor is little-endian float32, row-major, starting at a 64-byte
aligned absolute offset listed in the header manifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct

import numpy as np

from .exceptions import CheckpointFormatError
from .ssm_core import LAYER_TENSORS, LayerWeights, ModelConfig, init_weights

MAGIC = b"SSMTKRD1"
ALIGN = 64
FORMAT_VERSION = 1
_PREFIX = len(MAGIC) + 4


def _align(n):
    return -(-n // ALIGN) * ALIGN


def _manifest(config, first_offset):
    entries = []
    offset = first_offset
    shapes = config.layer_shapes()
    for layer in range(config.num_layers):
        for name in LAYER_TENSORS:
            shape = list(shapes[name])
            entries.append({"name": f"layers.{layer}.{name}", "shape": shape,
                            "dtype": "f32", "offset": offset})
            offset = _align(offset + 4 * int(np.prod(shape)))
    return entries


def _header_bytes(config, first_offset):
    header = {"format_version": FORMAT_VERSION, "config": config.to_dict(),
              "tensors": _manifest(config, first_offset)}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_checkpoint(config, weights):
    """Checkpoint bytes for ``config`` and its per-layer weights."""
    if len(weights) != config.num_layers:
        raise CheckpointFormatError(
            f"config has {config.num_layers} layers but {len(weights)} weight sets were given")
    # offsets are written into the header, so iterate to a fixed point
    first = _align(_PREFIX)
    while True:
        header = _header_bytes(config, first)
        needed = _align(_PREFIX + len(header))
        if needed == first:
            break
        first = needed
    buf = bytearray(MAGIC + struct.pack("<I", len(header)) + header)
    shapes = config.layer_shapes()
    for layer, w in enumerate(weights):
        for name in LAYER_TENSORS:
            arr = np.asarray(getattr(w, name), dtype="<f4")
            if arr.shape != shapes[name]:
                raise CheckpointFormatError(
                    f"layers.{layer}.{name} has shape {arr.shape}, expected {shapes[name]}")
            buf.extend(b"\0" * (_align(len(buf)) - len(buf)))
            buf.extend(arr.tobytes(order="C"))
    return bytes(buf)


def save_checkpoint(path, config, weights):
    data = serialize_checkpoint(config, weights)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {os.fspath(path)!r}: {exc}") from exc
    return path


def generate_checkpoint(config, path, seed=None):
    """Initialise weights from ``seed`` (default ``config.seed``) and write them to ``path``."""
    if seed is not None:
        config = dataclasses.replace(config, seed=int(seed))
    return save_checkpoint(path, config, init_weights(config))


def parse_checkpoint(data):
    """Inverse of :func:`serialize_checkpoint`; raises on the first violated constraint."""
    if len(data) < _PREFIX:
        raise CheckpointFormatError("truncated file: shorter than the fixed prefix")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic")
    (header_len,) = struct.unpack("<I", data[len(MAGIC):_PREFIX])
    header_end = _PREFIX + header_len
    if header_end > len(data):
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(data[_PREFIX:header_end].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"malformed header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format_version {header.get('format_version')}")

    expected = _manifest(config, 0)
    if [e.get("name") for e in entries] != [e["name"] for e in expected]:
        raise CheckpointFormatError("tensor manifest does not match the config's layer tensors")
    tensors = {}
    prev_end = header_end
    for entry, exp in zip(entries, expected):
        name, offset = entry["name"], entry.get("offset")
        if entry.get("dtype") != "f32":
            raise CheckpointFormatError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
        if list(entry.get("shape", [])) != exp["shape"]:
            raise CheckpointFormatError(f"tensor {name}: shape {entry.get('shape')} != {exp['shape']}")
        if not isinstance(offset, int) or offset % ALIGN:
            raise CheckpointFormatError(f"tensor {name}: misaligned offset {offset}")
        if offset < prev_end:
            raise CheckpointFormatError(f"tensor {name}: offset {offset} overlaps previous data")
        nbytes = 4 * int(np.prod(exp["shape"]))
        if offset + nbytes > len(data):
            raise CheckpointFormatError(f"truncated file: tensor {name} extends past end of file")
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = arr.reshape(exp["shape"]).astype(np.float32)
        prev_end = offset + nbytes
    if prev_end != len(data):
        raise CheckpointFormatError(
            f"file size {len(data)} does not equal end of last tensor {prev_end}")

    weights = [
        LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LAYER_TENSORS})
        for i in range(config.num_layers)
    ]
    return config, weights


def load_checkpoint(path):
    """Returns ``(ModelConfig, [LayerWeights, ...])``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {os.fspath(path)!r}: {exc}") from exc
    try:
        return parse_checkpoint(data)
    except CheckpointFormatError as exc:
        raise CheckpointFormatError(f"{os.fspath(path)}: {exc}") from None


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
