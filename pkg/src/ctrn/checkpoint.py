"""Model checkpoints.

Layout, little-endian::

    b"CTRN1" | u64 header length | UTF-8 JSON header | float64 payload

The header holds the model config and an ordered ``tensors`` list of
``{"name", "shape"}``; the payload is those tensors' values back to back in
row-major order. The fixed G-classifier adjacency is stored as ``A_S`` and
batch-norm running statistics as ``buffer:<name>``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import BadMagicError, FormatError, TruncatedFileError
from .model import CTRN, CtrnConfig

MAGIC = b"CTRN1"
VERSION = 1


def save_checkpoint(path, model: CTRN, meta: dict | None = None) -> None:
    state = model.state()
    header = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in state.values()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[CtrnConfig, dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a CTRN1 checkpoint")
    off = len(MAGIC)
    if len(blob) < off + 8:
        raise TruncatedFileError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if len(blob) < off + hlen:
        raise TruncatedFileError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from exc
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    off += hlen
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if len(blob) < off + 8 * n:
            raise TruncatedFileError(f"{path}: payload truncated at tensor {entry['name']!r}")
        state[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return CtrnConfig.from_dict(header["config"]), state, header.get("meta", {})


def load_checkpoint(path) -> CTRN:
    config, state, _ = read_checkpoint(path)
    model = CTRN(config)
    model.load_state(state)
    return model
