"""Versioned binary model files.

Layout: ``b"LIDM"`` | u16 version | u32 header length | JSON header |
little-endian float32 payload (parameters, then batch-norm buffers, in
declaration order). The JSON header carries the architecture, the in-set
registry hash and any provenance the caller attaches via ``model.extra``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..errors import IoError, RegistryMismatch, VersionMismatch
from .tdnn import TdnnConfig, TdnnModel

MAGIC = b"LIDM"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def model_bytes(model: TdnnModel) -> bytes:
    header = {
        "config": model.config.to_dict(),
        "registry_hash": model.registry_hash,
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "buffers": [[k, list(v.shape)] for k, v in model.buffers.items()],
        "extra": model.extra,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for store in (model.params, model.buffers) for a in store.values()
    )
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def save_model(model: TdnnModel, path: str | os.PathLike) -> None:
    try:
        with open(path, "wb") as f:
            f.write(model_bytes(model))
    except OSError as exc:
        raise IoError(f"cannot write model {path}: {exc}") from exc


def load_model(path: str | os.PathLike, registry_hash: str | None = None) -> TdnnModel:
    """Read a model file; ``registry_hash`` (if given) must match the stored one."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
    if len(blob) < _PREFIX.size:
        raise VersionMismatch(f"{path}: truncated model file")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise VersionMismatch(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"{path}: model format v{version}, expected v{VERSION}")
    header = json.loads(blob[_PREFIX.size:_PREFIX.size + head_len])
    if registry_hash is not None and header["registry_hash"] != registry_hash:
        raise RegistryMismatch(f"{path}: model was trained with a different in-set registry")
    offset = _PREFIX.size + head_len
    stores = []
    for key in ("params", "buffers"):
        store = {}
        for name, shape in header[key]:
            n = int(np.prod(shape))
            store[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * n
        stores.append(store)
    if offset != len(blob):
        raise VersionMismatch(f"{path}: payload size does not match header")
    return TdnnModel(TdnnConfig.from_dict(header["config"]), stores[0], stores[1],
                     header["registry_hash"], header.get("extra", {}))
