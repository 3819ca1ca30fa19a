"""Tap intermediate convolutional feature maps from a pretrained backbone.

The exporter resizes each image so its long side does not exceed the
configured limit (aspect preserved), runs the backbone once in eval mode
and captures the outputs of the configured tap layers with forward hooks.
Tap points must be post-ReLU: any negative activation is a hard error,
because the downstream pipeline validates non-negativity on read.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torchvision import models
from torchvision.transforms import functional as TF

from .actf import write_feature_file, write_manifest

log = logging.getLogger(__name__)

# last two post-ReLU convolutional blocks per supported backbone
DEFAULT_LAYERS = {
    "resnet18": ("layer3", "layer4"),
    "resnet34": ("layer3", "layer4"),
    "resnet50": ("layer3", "layer4"),
    "mobilenet_v2": ("features.18",),  # the only post-ReLU block output
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".webp")

SPLITS = ("train", "query", "db")


@dataclass
class ExportConfig:
    model_name: str = "resnet18"
    layer_names: tuple[str, ...] = ()  # empty -> backbone default tap points
    image_long_side: int = 1024
    output_dir: Path = Path("features")
    weights: str = "pretrained"  # or "none" (random init, for smoke tests)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if not self.layer_names:
            if self.model_name not in DEFAULT_LAYERS:
                raise ValueError(
                    f"no default tap layers for {self.model_name!r}; pass layer_names"
                )
            self.layer_names = DEFAULT_LAYERS[self.model_name]
        self.layer_names = tuple(self.layer_names)
        if self.image_long_side < 32:
            raise ValueError("image_long_side must be at least 32 pixels")
        if self.weights not in ("pretrained", "none"):
            raise ValueError(f"weights must be 'pretrained' or 'none', got {self.weights!r}")


class FeatureTap:
    """A backbone with forward hooks on the configured layers."""

    def __init__(self, cfg: ExportConfig):
        factory = getattr(models, cfg.model_name, None)
        if factory is None:
            raise ValueError(f"unknown torchvision backbone {cfg.model_name!r}")
        weights = "IMAGENET1K_V1" if cfg.weights == "pretrained" else None
        self.model = factory(weights=weights)
        self.model.eval()
        self.layer_names = cfg.layer_names
        self._captured: dict[str, torch.Tensor] = {}
        modules = dict(self.model.named_modules())
        for name in cfg.layer_names:
            if name not in modules:
                raise ValueError(f"backbone {cfg.model_name!r} has no module {name!r}")
            modules[name].register_forward_hook(self._make_hook(name))

    def _make_hook(self, name):
        def hook(_module, _inputs, output):
            self._captured[name] = output.detach()

        return hook

    @torch.no_grad()
    def extract(self, image: Image.Image, long_side: int) -> list[np.ndarray]:
        """Feature maps for one image, in tap order, each (D, H, W) float32."""
        tensor = preprocess(image, long_side)
        self._captured.clear()
        self.model(tensor.unsqueeze(0))
        layers = []
        for name in self.layer_names:
            if name not in self._captured:
                raise ValueError(f"layer {name!r} did not fire during the forward pass")
            arr = self._captured[name].squeeze(0).numpy().astype(np.float32)
            if (arr < 0).any():
                raise ValueError(
                    f"layer {name!r} produced negative activations; tap a post-ReLU layer"
                )
            layers.append(arr)
        return layers


def preprocess(image: Image.Image, long_side: int) -> torch.Tensor:
    """RGB conversion, aspect-preserving long-side cap, ImageNet normalization."""
    image = image.convert("RGB")
    w, h = image.size
    scale = long_side / max(w, h)
    if scale < 1.0:
        image = image.resize((max(1, round(w * scale)), max(1, round(h * scale))), Image.BILINEAR)
    tensor = TF.to_tensor(image)
    return TF.normalize(tensor, IMAGENET_MEAN, IMAGENET_STD)


def read_labels(csv_path) -> list[dict]:
    """Parse the id,class,split labels file."""
    rows = []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"id", "class", "split"}:
            raise ValueError(
                f"labels file must have exactly the columns id,class,split, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            if row["split"] not in SPLITS:
                raise ValueError(f"line {lineno}: split must be one of {SPLITS}, got {row['split']!r}")
            rows.append({"id": row["id"], "class": int(row["class"]), "split": row["split"]})
    if len({r["id"] for r in rows}) != len(rows):
        raise ValueError("labels file contains duplicate ids")
    return rows


def find_image(image_dir: Path, image_id: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        candidate = image_dir / f"{image_id}{ext}"
        if candidate.exists():
            return candidate
    return None


def export(image_dir, labels_csv, cfg: ExportConfig) -> Path:
    """Export every labeled image; returns the manifest path.

    Missing or undecodable images are skipped with a warning and left out
    of the manifest, so manifest rows and feature files always match.
    """
    image_dir = Path(image_dir)
    labels = read_labels(labels_csv)
    tap = FeatureTap(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    manifest_rows = []
    for row in labels:
        path = find_image(image_dir, row["id"])
        if path is None:
            log.warning("no image file for id %r; skipped", row["id"])
            continue
        try:
            with Image.open(path) as image:
                layers = tap.extract(image, cfg.image_long_side)
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("cannot decode %s (%s); skipped", path, exc)
            continue
        name = f"{row['id']}.actf"
        write_feature_file(row["id"], layers, cfg.output_dir / name)
        manifest_rows.append((row["id"], row["class"], name, row["split"]))
        log.info("exported %s: %s", row["id"], [tuple(l.shape) for l in layers])
    if not manifest_rows:
        raise ValueError("no image could be exported")
    manifest = cfg.output_dir / "manifest.jsonl"
    write_manifest(manifest_rows, manifest)
    return manifest
