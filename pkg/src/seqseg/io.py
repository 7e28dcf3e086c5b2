"""Binary file formats (all little-endian) and JSON helpers.

``AOSQ`` image sequence::

    b"AOSQ" u32 version u32 T u32 H u32 W f32 spacing_y f32 spacing_x  f32[T*H*W]

``AOLB`` label sequence::

    b"AOLB" u32 version u32 T u32 H u32 W u8 num_classes  u8[T] provenance (1 human, 0 propagated)  u8[T*H*W]

``AOCK`` checkpoint::

    b"AOCK" u32 version u32 header_len  header (UTF-8 JSON)  f32 payloads in header order

``AODF`` displacement field::

    b"AODF" u32 H u32 W  f32[H*W*2] (dy, dx interleaved per pixel)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SeqSegError, ShapeError
from .tensor import Tensor

VERSION = 1


class FormatError(SeqSegError, ValueError):
    """File does not follow the expected binary layout."""


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")


# ---------------------------------------------------------------- sequences

def write_sequence(path, images: np.ndarray, spacing=(1.0, 1.0)) -> None:
    images = np.asarray(images, dtype="<f4")
    if images.ndim != 3:
        raise ShapeError("image sequence must be (T, H, W)", images.shape)
    t, h, w = images.shape
    head = b"AOSQ" + struct.pack("<4I2f", VERSION, t, h, w, float(spacing[0]), float(spacing[1]))
    Path(path).write_bytes(head + images.tobytes())


def read_sequence(path) -> tuple[np.ndarray, tuple[float, float]]:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"AOSQ", path)
    version, t, h, w, sy, sx = struct.unpack_from("<4I2f", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported AOSQ version {version}")
    off = 4 + 24
    if len(buf) - off != 4 * t * h * w:
        raise FormatError(f"{path}: payload holds {len(buf) - off} bytes, expected {4 * t * h * w}")
    data = np.frombuffer(buf, dtype="<f4", offset=off).reshape(t, h, w)
    return data.astype(np.float32), (sy, sx)


# ---------------------------------------------------------------- labels

def write_labels(path, labels: np.ndarray, human: np.ndarray, num_classes: int = 3) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 3:
        raise ShapeError("label sequence must be (T, H, W)", labels.shape)
    t, h, w = labels.shape
    human = np.asarray(human, dtype=np.uint8)
    if human.shape != (t,):
        raise ShapeError("provenance flags need one entry per frame", human.shape, (t,))
    head = b"AOLB" + struct.pack("<4IB", VERSION, t, h, w, num_classes)
    Path(path).write_bytes(head + human.tobytes() + labels.tobytes())


def read_labels(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Returns ``(labels, human_flags, num_classes)``."""
    buf = Path(path).read_bytes()
    _check_magic(buf, b"AOLB", path)
    version, t, h, w, ncls = struct.unpack_from("<4IB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported AOLB version {version}")
    off = 4 + 17
    if len(buf) - off != t + t * h * w:
        raise FormatError(f"{path}: truncated label payload")
    human = np.frombuffer(buf, dtype=np.uint8, count=t, offset=off).astype(bool)
    labels = np.frombuffer(buf, dtype=np.uint8, offset=off + t).reshape(t, h, w).copy()
    return labels, human, ncls


# ---------------------------------------------------------------- fields

def write_field(path, field: np.ndarray) -> None:
    field = np.asarray(field, dtype="<f4")
    if field.ndim != 3 or field.shape[2] != 2:
        raise ShapeError("displacement field must be (H, W, 2)", field.shape)
    h, w, _ = field.shape
    Path(path).write_bytes(b"AODF" + struct.pack("<2I", h, w) + field.tobytes())


def read_field(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"AODF", path)
    h, w = struct.unpack_from("<2I", buf, 4)
    if len(buf) - 12 != 8 * h * w:
        raise FormatError(f"{path}: truncated field payload")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, tensors: dict[str, Tensor | np.ndarray], config: dict) -> None:
    arrays = {k: np.asarray(v.data if isinstance(v, Tensor) else v, dtype="<f4") for k, v in tensors.items()}
    header = {
        "format_version": VERSION,
        "config": config,
        "tensors": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
    }
    hb = canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(b"AOCK" + struct.pack("<2I", VERSION, len(hb)) + hb)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"AOCK", path)
    version, hlen = struct.unpack_from("<2I", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported AOCK version {version}")
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 4 * count > len(buf):
            raise FormatError(f"{path}: payload for {entry['name']} truncated")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return Checkpoint(header["config"], tensors)


# ---------------------------------------------------------------- json

def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config)).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "version", "master_seed", "train_fraction", "phantom", "subjects"],
    "properties": {
        "format": {"const": "seqseg-dataset"},
        "version": {"const": 1},
        "master_seed": {"type": "integer"},
        "train_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "phantom": {"type": "object"},
        "subjects": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["id", "seed", "split", "ed", "es", "images", "annotations", "truth"],
                "properties": {
                    "id": {"type": "string"},
                    "seed": {"type": "integer"},
                    "split": {"enum": ["train", "test"]},
                    "ed": {"type": "integer", "minimum": 0},
                    "es": {"type": "integer", "minimum": 0},
                    "images": {"type": "string"},
                    "annotations": {"type": "string"},
                    "truth": {"type": "string"},
                },
            },
        },
    },
}


def validate_manifest(manifest: dict) -> None:
    import jsonschema

    jsonschema.validate(manifest, MANIFEST_SCHEMA)
