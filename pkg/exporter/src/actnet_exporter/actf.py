"""Writers for the ACTF v1 feature-file format and its JSON Lines manifest.

Byte layout: magic 41 43 54 46, little-endian u32 version=1, u32 id byte
length, UTF-8 id, u32 layer count K, then per layer u32 W, u32 H, u32 D
followed by W*H*D float32 values with flat index k*H*W + j*W + i.  This
must stay byte-compatible with the retrieval pipeline's reader.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ACTF"
VERSION = 1


def write_feature_file(image_id: str, layers, path):
    """Write one image's layer stack; each layer is a (D, H, W) array."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    ident = image_id.encode("utf-8")
    parts.append(struct.pack("<I", len(ident)))
    parts.append(ident)
    parts.append(struct.pack("<I", len(layers)))
    for layer in layers:
        arr = np.ascontiguousarray(layer, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"layer must be (depth, height, width), got {arr.shape}")
        depth, height, width = arr.shape
        parts.append(struct.pack("<III", width, height, depth))
        parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def write_manifest(rows, path):
    """rows: iterables of (id, class_label, relative_path, split)."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, class_label, rel_path, split in rows:
            fh.write(
                json.dumps(
                    {
                        "id": image_id,
                        "class_label": int(class_label),
                        "path": rel_path,
                        "split": split,
                    }
                )
                + "\n"
            )
