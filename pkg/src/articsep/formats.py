"""On-disk formats shared across modules.

ARTF matrices: little-endian header ``b"ARTF", rows: u32, cols: u32`` then
row-major payload, either f32 (4 bytes per entry) or u8 (1 byte per entry).
The payload type is implied by the payload length.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError

ARTF_MAGIC = b"ARTF"
_ARTF_HEADER = struct.Struct("<4sII")


def write_matrix(path, matrix, dtype: str = "f32") -> None:
    """Write a real 2-D array as ARTF. Complex input is stored as interleaved (re, im) columns."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"ARTF needs a 2-D array, got shape {m.shape}")
    if np.iscomplexobj(m):
        inter = np.empty((m.shape[0], 2 * m.shape[1]))
        inter[:, 0::2] = m.real
        inter[:, 1::2] = m.imag
        m = inter
    if dtype == "f32":
        payload = m.astype("<f4").tobytes()
    elif dtype == "u8":
        if m.size and (m.min() < 0 or m.max() > 255):
            raise FormatError("values out of range for u8 payload")
        payload = m.astype(np.uint8).tobytes()
    else:
        raise FormatError(f"unknown ARTF payload type {dtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_ARTF_HEADER.pack(ARTF_MAGIC, m.shape[0], m.shape[1]))
        fh.write(payload)


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _ARTF_HEADER.size:
        raise FormatError(f"{path}: truncated ARTF header")
    magic, rows, cols = _ARTF_HEADER.unpack_from(raw)
    if magic != ARTF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_ARTF_HEADER.size:]
    count = rows * cols
    if len(body) == 4 * count:
        data = np.frombuffer(body, dtype="<f4").astype(np.float64)
    elif len(body) == count:
        data = np.frombuffer(body, dtype=np.uint8).copy()
    else:
        raise FormatError(f"{path}: payload of {len(body)} bytes does not fit {rows}x{cols}")
    return data.reshape(rows, cols)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def artifact_meta(config: dict, seed: int) -> dict:
    """Provenance stamp embedded in every artifact the CLI writes."""
    return {"tool": "articsep", "version": __version__, "config_hash": config_hash(config), "seed": int(seed)}


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_jsonl(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out
