"""Binary weight archive.

Layout::

    bytes 0..7     magic b"XPROTW1\\0"
    bytes 8..15    manifest length L, unsigned 64-bit little-endian
    bytes 16..16+L UTF-8 JSON manifest
                   {"config": {...}, "tensors": [{name, shape, dtype, offset, byte_len}, ...]}
    payload        little-endian row-major tensors; ``offset`` counts from the
                   first payload byte (16 + L)

``dtype`` is "f64" or "f32"; f32 tensors are widened to f64 on load.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ConfigError, ModelConfig, parameter_shapes

MAGIC = b"XPROTW1\0"
_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


class ArchiveError(ValueError):
    """Raised for unreadable archives; ``code`` is machine-checkable."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code.replace('_', ' ')}: {message}")
        self.code = code


def save_weights(config: ModelConfig, weights: dict[str, np.ndarray], dtype: str = "f64") -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    entries, blobs, offset = [], [], 0
    for name, shape in parameter_shapes(config).items():
        arr = np.ascontiguousarray(weights[name], dtype=np_dtype)
        if arr.shape != shape:
            raise ArchiveError("shape_mismatch", f"{name}: expected {shape}, got {arr.shape}")
        blob = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(shape), "dtype": dtype,
                        "offset": offset, "byte_len": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": config.to_dict(), "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)


def load_weights(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise ArchiveError("bad_magic", "not an xprot weight archive")
    (length,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + length:
        raise ArchiveError("truncated_payload", "manifest extends past end of file")
    try:
        manifest = json.loads(data[16:16 + length].decode("utf-8"))
        config = ModelConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise ArchiveError("invalid_manifest", str(exc)) from exc
        raise ArchiveError("invalid_manifest", f"unreadable manifest: {exc}") from exc

    payload = memoryview(data)[16 + length:]
    expected = parameter_shapes(config)
    weights = {}
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected or expected[name] != shape:
            raise ArchiveError("shape_mismatch",
                               f"{name}: manifest shape {shape} does not match config")
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ArchiveError("invalid_manifest", f"{name}: unknown dtype {entry['dtype']!r}")
        start, size = int(entry["offset"]), int(entry["byte_len"])
        if size != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ArchiveError("shape_mismatch", f"{name}: byte_len disagrees with shape")
        if start + size > len(payload):
            raise ArchiveError("truncated_payload", f"{name} extends past end of file")
        arr = np.frombuffer(payload[start:start + size], dtype=dt).reshape(shape)
        weights[name] = arr.astype(np.float64)
    missing = set(expected) - set(weights)
    if missing:
        raise ArchiveError("shape_mismatch", f"missing tensors: {sorted(missing)}")
    return config, weights
