"""Binary interchange formats and the dataset manifest.

Feature files ("ACTF" v1): magic 41 43 54 46, then little-endian u32
version=1, u32 id byte length, the UTF-8 id, u32 layer count K, and per
layer u32 W, u32 H, u32 D followed by W*H*D IEEE-754 float32 values in the
package-wide layout (flat index = k*H*W + j*W + i).

Descriptor stores ("ACTD" v1): magic, u32 version=1, u32 count, u32 dim,
then per record u32 id length, the UTF-8 id and dim float64 values.

The manifest is JSON Lines with exactly the fields id, class_label, path
and split; paths are relative and resolve under the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .tensor import FeatureMap

FEATURE_MAGIC = b"ACTF"
DESCRIPTOR_MAGIC = b"ACTD"
FORMAT_VERSION = 1

SPLITS = ("train", "query", "db")


@dataclass(frozen=True)
class FeatureFile:
    """All K layer feature maps of one image, in stream order."""

    image_id: str
    layers: tuple[FeatureMap, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) < 1:
            raise ShapeError("a feature file needs at least one layer")


class _Cursor:
    """Sequential reader over raw bytes that reports offsets on failure."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def utf8(self, n: int, what: str) -> str:
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8: {exc}", offset=self.pos - n) from exc

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(
                f"{len(self.data) - self.pos} trailing bytes after payload", offset=self.pos
            )


def _check_magic(cur: _Cursor, magic: bytes, kind: str):
    got = cur.take(len(magic), f"{kind} magic")
    if got != magic:
        raise FormatError(f"bad {kind} magic {got!r}, expected {magic!r}", offset=0)
    version = cur.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {kind} version {version}", offset=4)


def write_feature_file(f: FeatureFile, path):
    """Serialize to ACTF v1; values are stored as float32."""
    parts = [FEATURE_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    ident = f.image_id.encode("utf-8")
    parts.append(struct.pack("<I", len(ident)))
    parts.append(ident)
    parts.append(struct.pack("<I", len(f.layers)))
    for layer in f.layers:
        parts.append(struct.pack("<III", layer.width, layer.height, layer.depth))
        parts.append(layer.flat().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_feature_file(path) -> FeatureFile:
    """Parse and validate an ACTF v1 file; values are widened to float64."""
    cur = _Cursor(Path(path).read_bytes())
    _check_magic(cur, FEATURE_MAGIC, "feature file")
    ident = cur.utf8(cur.u32("id length"), "image id")
    n_layers = cur.u32("layer count")
    if n_layers < 1:
        raise FormatError("feature file declares zero layers", offset=cur.pos - 4)
    layers = []
    for k in range(n_layers):
        at = cur.pos
        width, height, depth = struct.unpack("<III", cur.take(12, f"layer {k} shape"))
        if min(width, height, depth) < 1:
            raise FormatError(
                f"layer {k} has non-positive shape {width}x{height}x{depth}", offset=at
            )
        count = width * height * depth
        at = cur.pos
        raw = np.frombuffer(cur.take(4 * count, f"layer {k} values"), dtype="<f4")
        values = raw.astype(np.float64)
        if not np.isfinite(values).all():
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise FormatError(
                f"layer {k} value at flat index {bad} is not finite", offset=at + 4 * bad
            )
        if (values < 0).any():
            bad = int(np.flatnonzero(values < 0)[0])
            raise FormatError(
                f"layer {k} value at flat index {bad} is negative", offset=at + 4 * bad
            )
        layers.append(FeatureMap.from_flat(width, height, depth, values))
    cur.done()
    return FeatureFile(image_id=ident, layers=tuple(layers))


def write_descriptors(path, ids, vectors):
    """Serialize an id-keyed descriptor set to ACTD v1 (float64 payload)."""
    ids = [str(i) for i in ids]
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if len(ids) != len(vectors):
        raise ShapeError(f"{len(ids)} ids for {len(vectors)} vectors")
    dims = {v.shape for v in vectors}
    if len(dims) > 1:
        raise ShapeError(f"descriptors have mixed dimensions: {sorted(dims)}")
    dim = vectors[0].shape[0] if vectors else 0
    parts = [DESCRIPTOR_MAGIC, struct.pack("<III", FORMAT_VERSION, len(ids), dim)]
    for ident, vec in zip(ids, vectors):
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(vec.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_descriptors(path) -> tuple[list[str], np.ndarray]:
    """Parse an ACTD v1 store into (ids, (n, dim) float64 matrix)."""
    cur = _Cursor(Path(path).read_bytes())
    _check_magic(cur, DESCRIPTOR_MAGIC, "descriptor store")
    count = cur.u32("record count")
    dim = cur.u32("dimension")
    # cheapest possible record is 4 id-length bytes plus the payload
    if count * (4 + 8 * dim) > len(cur.data) - cur.pos:
        raise FormatError(
            f"declared {count} records of dim {dim} exceed the file size", offset=8
        )
    ids = []
    rows = np.empty((count, dim))
    for r in range(count):
        ids.append(cur.utf8(cur.u32("id length"), f"record {r} id"))
        at = cur.pos
        rows[r] = np.frombuffer(cur.take(8 * dim, f"record {r} values"), dtype="<f8")
        if not np.isfinite(rows[r]).all():
            raise FormatError(f"record {r} contains non-finite values", offset=at)
    if len(set(ids)) != len(ids):
        raise FormatError("descriptor store contains duplicate ids")
    cur.done()
    return ids, rows


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    class_label: int
    path: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        p = Path(self.path)
        if p.is_absolute() or ".." in p.parts:
            raise DataError(f"manifest path must stay under the manifest directory: {self.path!r}")


def write_manifest(entries, path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {"id": e.id, "class_label": e.class_label, "path": e.path, "split": e.split}
                )
                + "\n"
            )


def read_manifest(path) -> list[ManifestEntry]:
    """Parse and validate a JSON Lines manifest."""
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"manifest line {lineno} is not valid JSON: {exc}") from exc
            if not isinstance(doc, dict) or set(doc) != {"id", "class_label", "path", "split"}:
                raise FormatError(
                    f"manifest line {lineno} must have exactly the fields id, class_label, path, split"
                )
            entry = ManifestEntry(
                id=str(doc["id"]),
                class_label=int(doc["class_label"]),
                path=str(doc["path"]),
                split=str(doc["split"]),
            )
            if entry.id in seen:
                raise FormatError(f"manifest line {lineno} repeats id {entry.id!r}")
            seen.add(entry.id)
            entries.append(entry)
    return entries


def load_feature_maps(entries, base_dir) -> dict[str, list[FeatureMap]]:
    """Read every entry's feature file, validating ids and layer order."""
    base = Path(base_dir)
    out = {}
    for e in entries:
        f = read_feature_file(base / e.path)
        if f.image_id != e.id:
            raise DataError(f"feature file {e.path!r} carries id {f.image_id!r}, manifest says {e.id!r}")
        out[e.id] = list(f.layers)
    return out
