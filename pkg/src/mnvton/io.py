"""Stable serialisation: JSON documents, checkpoints and PPM images."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"MNVTONCK"


def _encode(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            raise ValueError("NaN is not serialisable")
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return _encode(obj.item())
    return obj


def dumps(obj, indent: int | None = 2) -> str:
    """JSON with sorted keys and shortest round-trip floats; infinities as strings."""
    return json.dumps(_encode(obj), sort_keys=True, indent=indent, allow_nan=False)


def _decode(obj):
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    if obj == "inf":
        return math.inf
    if obj == "-inf":
        return -math.inf
    return obj


def loads(text: str):
    return _decode(json.loads(text))


def write_json(path: Path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path: Path):
    return loads(Path(path).read_text())


def content_hash(obj) -> str:
    return hashlib.sha256(dumps(obj, indent=None).encode("utf-8")).hexdigest()[:16]


# checkpoints ----------------------------------------------------------------------------

def save_checkpoint(path: Path, state: dict[str, np.ndarray], header: dict) -> None:
    """``MAGIC | u64 header length | JSON header | little-endian f64 payload``."""
    entries, offset = [], 0
    for name, arr in state.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    head = dumps({**header, "params": entries, "count": offset}, indent=None).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in state.values())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = loads(raw[16 : 16 + n].decode("utf-8"))
    data = np.frombuffer(raw[16 + n :], dtype="<f8")
    if data.size != header["count"]:
        raise ValueError(f"{path}: payload has {data.size} values, header says {header['count']}")
    state = {}
    for e in header.pop("params"):
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = data[e["offset"] : e["offset"] + size].astype(np.float64).reshape(e["shape"])
    return state, header


# images -------------------------------------------------------------------------------

def to_bytes(img: np.ndarray) -> np.ndarray:
    """[-1, 1] floats -> uint8, rounding to nearest."""
    return np.round(np.clip((img + 1.0) * 127.5, 0.0, 255.0)).astype(np.uint8)


def encode_ppm(img: np.ndarray, comment: str | None = None) -> bytes:
    """``[h, w, c]`` in [-1, 1] to binary PPM (P6); 1-channel images are replicated.

    ``comment`` becomes a ``#`` line in the header, which any PPM reader skips.
    """
    if img.ndim != 3:
        raise ValueError(f"expected [h, w, c], got {img.shape}")
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    if img.shape[-1] != 3:
        raise ValueError(f"PPM needs 1 or 3 channels, got {img.shape[-1]}")
    h, w, _ = img.shape
    note = "" if comment is None else f"# {comment}\n"
    return f"P6\n{note}{w} {h}\n255\n".encode("ascii") + to_bytes(img).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary PPM -> uint8 ``[h, w, 3]``."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError("not a P6 PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    body = data[pos + 1 : pos + 1 + w * h * 3]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path: Path, img: np.ndarray, scale: int = 1, comment: str | None = None) -> None:
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    Path(path).write_bytes(encode_ppm(img, comment))
