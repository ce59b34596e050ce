"""
Model checkpoints.

Layout: magic `ISV1`, header length (little-endian uint32), UTF-8 JSON header, then the raw
little-endian float32 values of every tensor at the offsets listed in the header manifest.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import CheckpointError, InvalidConfig
from .models import IntentClassifier, ModelConfig, ModelKind, build_model

MAGIC = b"ISV1"
_LENGTH = struct.Struct("<I")
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: IntentClassifier
    metadata: Dict[str, Any] = field(default_factory=dict)


def dumps(model: IntentClassifier, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    manifest = {}
    chunks = []
    offset = 0
    for name, array in model.state_dict().items():
        raw = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        manifest[name] = {"shape": list(array.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_kind": model.kind.value,
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)


def save_checkpoint(
    path: Union[str, Path],
    model: IntentClassifier,
    metadata: Optional[Dict[str, Any]] = None,
):
    """Write `model` with JSON-serializable `metadata` (vocabulary, feature settings, ...)."""
    Path(path).write_bytes(dumps(model, metadata))


def loads(data: bytes, expected_kind: Optional[ModelKind] = None) -> Checkpoint:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("Not an ISV1 checkpoint")
    start = len(MAGIC) + _LENGTH.size
    if len(data) < start:
        raise CheckpointError("Truncated checkpoint header")
    (length,) = _LENGTH.unpack_from(data, len(MAGIC))
    try:
        header = json.loads(data[start : start + length].decode("utf-8"))
        kind = ModelKind(header["model_kind"])
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"Malformed checkpoint header: {e}") from None
    except (ValueError, InvalidConfig) as e:
        raise CheckpointError(f"Invalid checkpoint header: {e}") from None

    if expected_kind is not None and kind is not ModelKind(expected_kind):
        raise CheckpointError(f"Checkpoint holds a '{kind}' model, expected '{expected_kind}'")

    body = memoryview(data)[start + length :]
    state = {}
    if not isinstance(manifest, dict):
        raise CheckpointError("Malformed checkpoint header: tensors must be an object")
    for name, entry in manifest.items():
        try:
            shape = tuple(int(dim) for dim in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Malformed manifest entry for '{name}': {e!r}") from None
        if any(dim < 0 for dim in shape):
            raise CheckpointError(f"Negative dimension in the shape of '{name}': {shape}")
        size = int(np.prod(shape)) * _DTYPE.itemsize
        if offset < 0 or offset + size > len(body):
            raise CheckpointError(f"Tensor '{name}' exceeds the checkpoint payload")
        values = np.frombuffer(body[offset : offset + size], dtype=_DTYPE)
        state[name] = values.reshape(shape).astype(np.float64)

    model = build_model(kind, config)
    model.load_state_dict(state)
    return Checkpoint(model=model, metadata=header.get("metadata", {}))


def load_checkpoint(
    path: Union[str, Path], expected_kind: Optional[ModelKind] = None
) -> Checkpoint:
    """
    Read a checkpoint and rebuild its model.

    Raises:
        CheckpointError: If the file is malformed, a tensor shape differs from the model built
            from the recorded config, or the model kind isn't `expected_kind`
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Can't read checkpoint {path!s}: {e}") from None
    return loads(data, expected_kind)
