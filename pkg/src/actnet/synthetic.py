"""Deterministic synthetic feature-map datasets for desk-scale experiments.

Every tensor is exponential background noise; each class additionally owns
a fixed set of signature channels per layer into which a few strong
spatial spikes are injected.  Spike amplitudes (1 + exponential) sit near
the default weibull peak, so the activation layer's noise-squashing and
strong-response equalisation are both exercised.  Intra-class descriptors
therefore agree on *which* channels carry energy, which is what makes
training and retrieval trends measurable at this scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .features import FeatureFile, ManifestEntry, write_feature_file, write_manifest
from .tensor import FeatureMap, derive_rng

# namespaces for derived per-class / per-image rng streams
_CLASS_KEY = 0
_IMAGE_KEY = 1

# fraction of each class that becomes database entries (after 1 query)
DB_FRACTION = 0.7


@dataclass(frozen=True)
class SynthConfig:
    classes: int
    images_per_class: int
    width: int = 16
    height: int = 16
    depths: tuple[int, ...] = (64, 32)
    background_rate: float = 4.0
    signal_channels_per_class: int = 8
    signal_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.classes < 1 or self.images_per_class < 1:
            raise ParameterError("need at least one class and one image per class")
        if min(self.width, self.height) < 1 or min(self.depths) < 1:
            raise ParameterError("spatial sizes and depths must be positive")
        if self.signal_channels_per_class > min(self.depths):
            raise ParameterError(
                f"signal_channels_per_class {self.signal_channels_per_class} exceeds "
                f"smallest depth {min(self.depths)}"
            )
        if self.background_rate <= 0 or self.signal_rate <= 0:
            raise ParameterError("rates must be positive")


def _split_for(image_idx: int, images_per_class: int) -> str:
    # per class: image 0 is the query, the next floor(0.7*(n-1)) feed the
    # database, the remainder trains
    n_db = math.floor(DB_FRACTION * (images_per_class - 1))
    if image_idx == 0:
        return "query"
    if image_idx <= n_db:
        return "db"
    return "train"


def _class_signature(cfg: SynthConfig, class_idx: int) -> list[np.ndarray]:
    rng = derive_rng(cfg.seed, _CLASS_KEY, class_idx)
    return [
        np.sort(rng.choice(depth, size=cfg.signal_channels_per_class, replace=False))
        for depth in cfg.depths
    ]


def _image_layers(cfg: SynthConfig, signature, class_idx: int, image_idx: int):
    rng = derive_rng(cfg.seed, _IMAGE_KEY, class_idx, image_idx)
    layers = []
    for depth, channels in zip(cfg.depths, signature):
        values = rng.exponential(scale=1.0 / cfg.background_rate, size=(depth, cfg.height, cfg.width))
        for ch in channels:
            n_spikes = int(rng.integers(3, 9))
            spots = rng.choice(cfg.height * cfg.width, size=n_spikes, replace=False)
            amps = 1.0 + rng.exponential(scale=1.0 / cfg.signal_rate, size=n_spikes)
            flat = values[ch].ravel()
            flat[spots] += amps
        layers.append(FeatureMap(values))
    return layers


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write one feature file per image plus the manifest; returns its path.

    Fully deterministic: per-class and per-image rng streams are derived
    from the master seed, so identical configs give byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for class_idx in range(cfg.classes):
        signature = _class_signature(cfg, class_idx)
        for image_idx in range(cfg.images_per_class):
            image_id = f"img_{class_idx:03d}_{image_idx:03d}"
            layers = _image_layers(cfg, signature, class_idx, image_idx)
            name = f"{image_id}.actf"
            write_feature_file(FeatureFile(image_id, tuple(layers)), out / name)
            entries.append(
                ManifestEntry(
                    id=image_id,
                    class_label=class_idx,
                    path=name,
                    split=_split_for(image_idx, cfg.images_per_class),
                )
            )
    manifest = out / "manifest.jsonl"
    write_manifest(entries, manifest)
    return manifest
