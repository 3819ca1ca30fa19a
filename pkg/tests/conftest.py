import pytest

from actnet.baselines import BaselineHead
from actnet.features import load_feature_maps, read_manifest
from actnet.head import initial_model
from actnet.synthetic import SynthConfig, generate_synthetic_dataset
from actnet.training import TrainConfig, TrainingSet, train


class SynthDataset:
    """Default-configuration synthetic dataset plus its standard splits."""

    def __init__(self, root, seed, classes=20, per_class=30):
        self.root = root
        self.manifest = generate_synthetic_dataset(
            SynthConfig(classes=classes, images_per_class=per_class, seed=seed), root
        )
        entries = read_manifest(self.manifest)
        self.labels = {e.id: e.class_label for e in entries}
        self.maps = {
            split: load_feature_maps([e for e in entries if e.split == split], root)
            for split in ("train", "query", "db")
        }
        db_by_class = {}
        for e in entries:
            if e.split == "db":
                db_by_class.setdefault(e.class_label, set()).add(e.id)
        self.relevance = {
            e.id: db_by_class[e.class_label] for e in entries if e.split == "query"
        }
        self.training_set = TrainingSet.from_manifest(self.manifest, "train")
        self.depths = [t.depth for t in self.training_set.maps[self.training_set.ids[0]]]


# training config for the acceptance trend run: section-4.1 defaults except
# the triplet budget, scaled down for desk hardware
ACCEPTANCE_TRAIN = dict(triplets_per_epoch=2000, max_epochs=20, seed=42)


@pytest.fixture(scope="session")
def synth42(tmp_path_factory):
    return SynthDataset(tmp_path_factory.mktemp("synth42"), seed=42)


@pytest.fixture(scope="session")
def trained_weibull(synth42):
    cfg = TrainConfig(**ACCEPTANCE_TRAIN)
    model0 = initial_model("weibull", synth42.depths)
    model, trace = train(model0, synth42.training_set, cfg)
    return model, trace


@pytest.fixture(scope="session")
def da_baseline(synth42):
    return BaselineHead("da").fit(synth42.maps["train"])
