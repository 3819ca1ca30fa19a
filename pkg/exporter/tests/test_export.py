import csv
import math

import numpy as np
import pytest
from PIL import Image

# the retrieval pipeline's reader is the authority on the file format
from actnet.features import load_feature_maps, read_feature_file, read_manifest

from actnet_exporter.export import ExportConfig, export, find_image, preprocess, read_labels


@pytest.fixture(scope="module")
def smoke_set(tmp_path_factory):
    """10 deterministic noise images with labels across all splits."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(7)
    rows = []
    for i in range(10):
        image_id = f"img{i:02d}"
        w, h = (64, 48) if i % 2 == 0 else (48, 64)
        arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / f"{image_id}.png")
        rows.append({"id": image_id, "class": i % 3, "split": ("train", "db", "query")[i % 3]})
    labels = root / "labels.csv"
    with open(labels, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "class", "split"])
        writer.writeheader()
        writer.writerows(rows)
    return root, labels


@pytest.fixture(scope="module")
def exported(smoke_set, tmp_path_factory):
    images, labels = smoke_set
    out = tmp_path_factory.mktemp("export")
    cfg = ExportConfig(model_name="resnet18", image_long_side=64, output_dir=out, weights="none")
    manifest = export(images, labels, cfg)
    return manifest, out


def test_every_file_passes_primary_reader(exported):
    manifest, out = exported
    entries = read_manifest(manifest)
    assert len(entries) == 10
    maps = load_feature_maps(entries, out)  # validates finiteness, sign, ids
    assert set(maps) == {e.id for e in entries}


def test_shapes_match_backbone_documentation(exported):
    # resnet18 taps: layer3 = 256 channels at stride 16, layer4 = 512 at 32
    manifest, out = exported
    for e in read_manifest(manifest):
        f = read_feature_file(out / e.path)
        layer3, layer4 = f.layers
        assert layer3.depth == 256 and layer4.depth == 512
        long_side = max(layer3.width, layer3.height) * 16
        assert 48 <= long_side <= 64
        assert layer4.width == max(1, math.ceil(layer3.width / 2))
        assert layer4.height == max(1, math.ceil(layer3.height / 2))


def test_all_values_non_negative(exported):
    manifest, out = exported
    for e in read_manifest(manifest):
        for layer in read_feature_file(out / e.path).layers:
            assert (layer.values >= 0).all()


def test_export_is_deterministic(smoke_set, tmp_path):
    images, labels = smoke_set
    # single-image double export through one model instance
    cfg = ExportConfig(model_name="resnet18", image_long_side=64,
                       output_dir=tmp_path / "a", weights="none")
    manifest = export(images, labels, cfg)
    first = {p.name: p.read_bytes() for p in (tmp_path / "a").glob("*.actf")}
    cfg2 = ExportConfig(model_name="resnet18", image_long_side=64,
                        output_dir=tmp_path / "b", weights="none")
    # fresh random weights differ, so determinism is checked per instance:
    # exporting twice with the same FeatureTap must produce identical bytes
    from actnet_exporter.export import FeatureTap

    tap = FeatureTap(cfg2)
    with Image.open(find_image(images, "img00")) as im:
        run1 = tap.extract(im, 64)
    with Image.open(find_image(images, "img00")) as im:
        run2 = tap.extract(im, 64)
    for a, b in zip(run1, run2):
        assert np.array_equal(a, b)
    assert set(first) == {f"img{i:02d}.actf" for i in range(10)}


def test_solid_black_image_exports_clean(tmp_path):
    images = tmp_path / "img"
    images.mkdir()
    Image.new("RGB", (64, 40), 0).save(images / "black.png")
    labels = tmp_path / "labels.csv"
    labels.write_text("id,class,split\nblack,0,db\n")
    out = tmp_path / "out"
    cfg = ExportConfig(model_name="resnet18", image_long_side=64, output_dir=out, weights="none")
    manifest = export(images, labels, cfg)
    maps = load_feature_maps(read_manifest(manifest), out)
    assert all(np.isfinite(t.values).all() for t in maps["black"])


def test_undecodable_image_skipped(tmp_path, caplog):
    images = tmp_path / "img"
    images.mkdir()
    Image.new("RGB", (64, 40), 100).save(images / "ok.png")
    (images / "broken.png").write_bytes(b"not an image at all")
    labels = tmp_path / "labels.csv"
    labels.write_text("id,class,split\nok,0,db\nbroken,0,db\nmissing,0,db\n")
    out = tmp_path / "out"
    cfg = ExportConfig(model_name="resnet18", image_long_side=64, output_dir=out, weights="none")
    manifest = export(images, labels, cfg)
    entries = read_manifest(manifest)
    assert [e.id for e in entries] == ["ok"]
    # manifest and files form a closed set
    assert {p.name for p in out.glob("*.actf")} == {"ok.actf"}


def test_bad_layer_name_is_hard_error(smoke_set, tmp_path):
    images, labels = smoke_set
    cfg = ExportConfig(
        model_name="resnet18", layer_names=("no_such_module",),
        image_long_side=64, output_dir=tmp_path, weights="none",
    )
    with pytest.raises(ValueError):
        export(images, labels, cfg)


def test_non_relu_tap_is_hard_error(smoke_set, tmp_path):
    images, labels = smoke_set
    # conv1 output precedes any ReLU, so negatives must be rejected
    cfg = ExportConfig(
        model_name="resnet18", layer_names=("conv1",),
        image_long_side=64, output_dir=tmp_path, weights="none",
    )
    with pytest.raises(ValueError, match="post-ReLU"):
        export(images, labels, cfg)


def test_preprocess_caps_long_side(smoke_set):
    big = Image.new("RGB", (300, 200), 50)
    tensor = preprocess(big, 100)
    assert tensor.shape == (3, 67, 100)
    small = Image.new("RGB", (60, 40), 50)
    assert preprocess(small, 100).shape == (3, 40, 60)  # never upscaled


def test_labels_validation(tmp_path):
    bad = tmp_path / "labels.csv"
    bad.write_text("id,klass,split\na,0,db\n")
    with pytest.raises(ValueError):
        read_labels(bad)
    bad.write_text("id,class,split\na,0,validation\n")
    with pytest.raises(ValueError):
        read_labels(bad)
    bad.write_text("id,class,split\na,0,db\na,1,db\n")
    with pytest.raises(ValueError):
        read_labels(bad)
