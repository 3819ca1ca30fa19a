import numpy as np
import pytest

from actnet.baselines import BaselineHead
from actnet.errors import ParameterError
from actnet.evaluation import pairwise_label_distances
from actnet.features import load_feature_maps, read_manifest
from actnet.synthetic import SynthConfig, generate_synthetic_dataset


def test_determinism(tmp_path):
    cfg = SynthConfig(classes=2, images_per_class=3, width=4, height=4, depths=(6, 4), seed=7,
                      signal_channels_per_class=3)
    m1 = generate_synthetic_dataset(cfg, tmp_path / "a")
    m2 = generate_synthetic_dataset(cfg, tmp_path / "b")
    for p1 in sorted((tmp_path / "a").iterdir()):
        p2 = tmp_path / "b" / p1.name
        assert p1.read_bytes() == p2.read_bytes()


def test_counts_and_splits(tmp_path):
    cfg = SynthConfig(classes=2, images_per_class=2, width=4, height=4, depths=(6,), seed=1,
                      signal_channels_per_class=2)
    manifest = generate_synthetic_dataset(cfg, tmp_path)
    entries = read_manifest(manifest)
    assert len(entries) == 4
    assert sum(e.split == "query" for e in entries) == 2
    assert len(list(tmp_path.glob("*.actf"))) == 4


def test_background_mean_matches_rate(tmp_path):
    cfg = SynthConfig(classes=1, images_per_class=4, seed=3)
    manifest = generate_synthetic_dataset(cfg, tmp_path)
    entries = read_manifest(manifest)
    maps = load_feature_maps(entries, tmp_path)
    # channels outside the class signature are pure Exponential(rate) noise
    from actnet.synthetic import _class_signature

    signature = _class_signature(cfg, 0)
    values = []
    for layers in maps.values():
        for layer, sig in zip(layers, signature):
            mask = np.ones(layer.depth, dtype=bool)
            mask[sig] = False
            values.append(layer.values[mask].ravel())
    mean = np.concatenate(values).mean()
    assert mean == pytest.approx(1.0 / cfg.background_rate, rel=0.05)


def test_intra_class_distances_smaller_than_inter(tmp_path):
    cfg = SynthConfig(classes=6, images_per_class=8, seed=11)
    manifest = generate_synthetic_dataset(cfg, tmp_path)
    entries = read_manifest(manifest)
    maps = load_feature_maps(entries, tmp_path)
    labels = {e.id: e.class_label for e in entries}
    head = BaselineHead("da").fit(maps, out_dim=16)  # any fixed head
    ids, mat = head.extract(maps)
    matching, nonmatching = pairwise_label_distances(mat, np.array([labels[i] for i in ids]))
    assert matching.mean() < nonmatching.mean()


def test_config_validation():
    with pytest.raises(ParameterError):
        SynthConfig(classes=0, images_per_class=2)
    with pytest.raises(ParameterError):
        SynthConfig(classes=1, images_per_class=1, depths=(4,), signal_channels_per_class=8)
    with pytest.raises(ParameterError):
        SynthConfig(classes=1, images_per_class=1, background_rate=0.0)
