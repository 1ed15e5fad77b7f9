"""Binary checkpoint container.

Layout::

    b"SPCKPT\\0\\0"             8-byte magic
    uint32 LE                 format version
    uint64 LE                 header length in bytes
    header                    UTF-8 JSON, sorted keys
    payload                   float64 little-endian arrays, in index order

The header carries the model config, its hash, free-form metadata and the
tensor index ``[{name, shape, offset, count}]`` with offsets relative to the
start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import ModelConfig, canonical_json, config_hash, model_config_from_dict, to_dict
from .model import ModelParameters, parameter_shapes
from .tensor import Tensor

MAGIC = b"SPCKPT\0\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays: Mapping[str, np.ndarray], header_extra: dict) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = dict(header_extra)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = index
    blob = canonical_json(header).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)


def decode_arrays(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = raw[20 + hlen:]
    arrays = {}
    expected = 0
    for entry in header.get("tensors", []):
        try:
            name, shape, offset, count = entry["name"], entry["shape"], entry["offset"], entry["count"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"corrupt tensor index entry {entry!r}") from exc
        if offset != expected or int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"corrupt tensor index at {name!r}")
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointError(f"payload truncated inside {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        expected = end
    if expected != len(payload):
        raise CheckpointError("payload length does not match the tensor index")
    return header, arrays


def checkpoint_bytes(params: ModelParameters, metadata: dict | None = None) -> bytes:
    extra = {
        "config": to_dict(params.config),
        "config_hash": params.config_hash,
        "metadata": metadata or {},
    }
    return encode_arrays(params.state(), extra)


def save_checkpoint(params: ModelParameters, path: str | Path, metadata: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, metadata))


def read_header(path: str | Path) -> dict:
    header, _ = decode_arrays(Path(path).read_bytes())
    return header


def load_checkpoint(
    path: str | Path, expected_config: ModelConfig | None = None
) -> ModelParameters:
    """Load parameters; with ``expected_config`` the tensor sets must agree."""
    header, arrays = decode_arrays(Path(path).read_bytes())
    if "config" not in header:
        raise CheckpointError("checkpoint header has no model config")
    stored = model_config_from_dict(header["config"])
    if header.get("config_hash") != config_hash(stored):
        raise CheckpointError("config hash does not match the stored config")
    cfg = stored
    if expected_config is not None:
        want = parameter_shapes(expected_config)
        missing = sorted(set(want) - set(arrays))
        extra = sorted(set(arrays) - set(want))
        wrong = sorted(
            n for n in set(want) & set(arrays) if tuple(want[n]) != arrays[n].shape
        )
        if missing or extra or wrong:
            raise CheckpointError(
                "checkpoint does not fit the config: "
                f"missing={missing} unexpected={extra} shape_mismatch={wrong}"
            )
        cfg = expected_config
    else:
        want = parameter_shapes(cfg)
        if set(want) != set(arrays):
            raise CheckpointError(
                f"tensor names disagree with stored config: "
                f"missing={sorted(set(want) - set(arrays))} unexpected={sorted(set(arrays) - set(want))}"
            )
    tensors = {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()}
    return ModelParameters(cfg, tensors)


def load_metadata(path: str | Path) -> dict:
    return read_header(path).get("metadata", {})
