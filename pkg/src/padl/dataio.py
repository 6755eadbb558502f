"""PGM rasters, dataset manifests, checkpoints.

Checkpoint layout::

    b"PADLCKPT" | uint32 LE header length | JSON header | array blob | uint32 LE CRC32

The CRC covers everything before it. Arrays are stored little-endian at the
offsets listed in the header index.
"""
from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CorruptionError, DatasetIOError, FormatError, VersionError
from .synthdata import AnnotatedSample, DatasetManifest

CHECKPOINT_MAGIC = b"PADLCKPT"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


# -- PGM ---------------------------------------------------------------------
def write_pgm(path: str | Path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise FormatError(f"PGM raster must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise FormatError("PGM values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def parse_pgm(data: bytes) -> np.ndarray:
    if data[:2] != b"P5":
        raise FormatError(f"bad magic {data[:2]!r} at byte offset 0: expected 'P5'")
    pos = 2
    fields = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(data, pos)
        if not m or not m.group(1).isdigit():
            raise FormatError(f"malformed PGM header at byte offset {pos}")
        fields.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM (maxval 255) supported, got {maxval} before byte offset {pos}")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError(f"missing whitespace after header at byte offset {pos}")
    pos += 1
    need = w * h
    if len(data) - pos < need:
        raise FormatError(
            f"payload truncated at byte offset {len(data)}: expected {need} bytes starting at {pos}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def read_pgm(path: str | Path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise FormatError("mask must be binary before writing")
    write_pgm(path, m.astype(np.uint8) * 255)


def read_mask(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    raster = parse_pgm(data)
    bad = np.flatnonzero((raster != 0) & (raster != 255))
    if bad.size:
        offset = len(data) - raster.size + int(bad[0])
        raise FormatError(f"non-binary mask value {raster.flat[bad[0]]} at byte offset {offset}")
    return (raster == 255).astype(np.uint8)


def quantize_probability(prob: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)


# -- manifest and dataset -------------------------------------------------------
def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise DatasetIOError(f"cannot read manifest {path}: {exc}") from exc
    if d.get("schema_version") != MANIFEST_VERSION:
        raise VersionError(f"manifest schema version {d.get('schema_version')} != {MANIFEST_VERSION}")
    d.pop("schema_version")
    return DatasetManifest(root=str(path.parent), **d)


def load_dataset(manifest_path: str | Path, split: str | None = None) -> list[AnnotatedSample]:
    """Load samples, normalizing images with the training-set statistics in the manifest."""
    manifest = read_manifest(manifest_path)
    root = Path(manifest.root)
    mean = manifest.normalization["mean"]
    std = manifest.normalization["std"]
    out = []
    for rec in manifest.samples:
        if split is not None and rec["split"] != split:
            continue
        try:
            planes = [read_pgm(root / p) for p in rec["image"]]
            masks = [read_mask(root / p)[None] for p in rec["masks"]]
            truth = read_mask(root / rec["truth"])[None]
        except OSError as exc:
            raise DatasetIOError(f"sample {rec['id']}: {exc}") from exc
        if len(masks) != manifest.annotator_count:
            raise DatasetIOError(f"sample {rec['id']} lists {len(masks)} masks, expected {manifest.annotator_count}")
        x = ((np.stack(planes).astype(np.float64) - mean) / std).astype(np.float32)
        out.append(AnnotatedSample(x, masks, truth, rec["id"], rec["split"]))
    return out


# -- checkpoints ------------------------------------------------------------------
@dataclass
class Checkpoint:
    header: dict[str, Any]
    arrays: dict[str, np.ndarray]


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], header: dict[str, Any] | None = None) -> None:
    header = dict(header or {})
    header["schema_version"] = CHECKPOINT_VERSION
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        index.append({"name": name, "offset": offset, "nbytes": len(raw), "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(raw)
        offset += len(raw)
    header["arrays"] = index
    head = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:8]!r} at byte offset 0")
    if len(data) < 16:
        raise FormatError("checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError(f"checkpoint {path} failed its CRC32 check")
    (hlen,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12:12 + hlen])
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint schema version {header.get('schema_version')} != {CHECKPOINT_VERSION}")
    blob = body[12 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(blob, dtype=dtype, count=entry["nbytes"] // dtype.itemsize, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return Checkpoint(header, arrays)
