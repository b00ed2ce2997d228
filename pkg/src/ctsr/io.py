"""On-disk formats: SSRB image grids, PGM previews, JSON, flat parameter checkpoints.

SSRB image layout (little-endian)::

    bytes 0..3    magic b"SSRB"
    bytes 4..15   u32 H, u32 W, u32 version
    bytes 16..    H*W float32, row-major

Checkpoints are a pair ``<stem>.bin`` / ``<stem>.json``: the binary file is the
concatenation of float32 arrays, the JSON lists every array's group, name,
shape and byte offset plus free-form metadata.
"""

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SSRB"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_image(path, pixels) -> None:
    arr = np.ascontiguousarray(pixels, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError(f"expected a 2-D grid, got shape {arr.shape}")
    h, w = arr.shape
    payload = _HEADER.pack(MAGIC, h, w, IMAGE_VERSION) + arr.tobytes()
    atomic_write_bytes(path, payload)


def read_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, h, w, version = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * h * w
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w)
    return arr.astype(np.float32)


def write_pgm(path, pixels) -> None:
    """8-bit binary PGM of an image in [0, 1], for eyeballing."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    h, w = u8.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + u8.tobytes())


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def hash_json(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def hash_arrays(named_arrays) -> str:
    """SHA-256 over ``(name, shape, bytes)`` of each array, in name order."""
    h = hashlib.sha256()
    for name in sorted(named_arrays):
        arr = np.ascontiguousarray(_to_numpy(named_arrays[name]))
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def _to_numpy(value) -> np.ndarray:
    if hasattr(value, "detach"):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(stem, groups, meta=None) -> None:
    """Write ``groups`` ({group: {name: array}}) as a flat float32 binary plus JSON index."""
    stem = Path(stem)
    entries = []
    chunks = []
    offset = 0
    for group in sorted(groups):
        for name in sorted(groups[group]):
            arr = np.ascontiguousarray(_to_numpy(groups[group][name]), dtype="<f4")
            raw = arr.tobytes()
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    index = {
        "format": "ssrb-ckpt",
        "version": 1,
        "arrays": entries,
        "group_hashes": {g: hash_arrays(groups[g]) for g in sorted(groups)},
        "meta": meta or {},
    }
    atomic_write_bytes(stem.with_suffix(".bin"), b"".join(chunks))
    write_json(stem.with_suffix(".json"), index)


def load_checkpoint(stem):
    """Inverse of :func:`save_checkpoint`; returns ``(groups, meta)`` with numpy arrays."""
    stem = Path(stem)
    index_path = stem.with_suffix(".json")
    if not index_path.exists():
        raise FileNotFoundError(index_path)
    index = read_json(index_path)
    if index.get("format") != "ssrb-ckpt":
        raise FormatError(f"{index_path}: not a checkpoint index")
    blob = stem.with_suffix(".bin").read_bytes()
    groups = {}
    for entry in index["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(blob):
            raise FormatError(f"{stem}: array {entry['name']} runs past end of file")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        groups.setdefault(entry["group"], {})[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return groups, index.get("meta", {})
