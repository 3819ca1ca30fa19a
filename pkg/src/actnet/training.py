"""Triplet-loss training of the aggregation head.

Each epoch mines loss-causing triplets with the pre-epoch model (query and
a random same-class match, the hardest different-class non-match), then
processes them one at a time, summing gradients and applying an
SGD-with-momentum step after every ``accumulation_size`` triplets plus one
step for any remainder.  The update rule is

    velocity <- momentum * velocity + grad + weight_decay * param
    param    <- param - learning_rate * velocity

and parameters are re-clamped to their constraint sets after every step.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from .activations import ClampCounter
from .errors import DataError, FormatError, NumericalError, ParameterError, ShapeError
from .evaluation import RetrievalIndex
from .head import (
    ModelState,
    backward_head,
    extract_descriptors,
    extract_vectors,
    fit_whitening,
    forward_head_cached,
    forward_pre_projection,
)
from .tensor import make_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# triplet loss


def triplet_loss(aq, am, an, margin: float) -> float:
    """Hinge loss 0.5 * max(0, margin + |aq-am|^2 - |aq-an|^2)."""
    aq, am, an = (np.asarray(v, dtype=np.float64) for v in (aq, am, an))
    if not (aq.shape == am.shape == an.shape) or aq.ndim != 1:
        raise ShapeError(f"triplet descriptors must share one dim, got {aq.shape}/{am.shape}/{an.shape}")
    hinge = margin + float(np.sum((aq - am) ** 2)) - float(np.sum((aq - an) ** 2))
    return 0.5 * max(0.0, hinge)


def triplet_loss_gradients(aq, am, an, margin: float):
    """Partials of triplet_loss w.r.t. the three descriptors.

    Zero everywhere when the hinge is inactive (including exactly at the
    boundary, where the subgradient is taken as zero).
    """
    aq, am, an = (np.asarray(v, dtype=np.float64) for v in (aq, am, an))
    if triplet_loss(aq, am, an, margin) <= 0.0:
        z = np.zeros_like(aq)
        return z, z.copy(), z.copy()
    return an - am, am - aq, aq - an


# ---------------------------------------------------------------------------
# config and state


@dataclass(frozen=True)
class Triplet:
    query_id: str
    match_id: str
    nonmatch_id: str


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    momentum: float = 0.9
    margin: float = 0.1
    triplets_per_epoch: int = 5000
    accumulation_size: int = 64
    max_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.margin <= 0:
            raise ParameterError("learning_rate must be non-negative and margin positive")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.triplets_per_epoch < 1 or self.accumulation_size < 1:
            raise ParameterError("triplets_per_epoch and accumulation_size must be positive")
        if self.max_epochs < 0:
            raise ParameterError("max_epochs must be non-negative")

    @classmethod
    def from_json_file(cls, path) -> "TrainConfig":
        """Load a config; every field optional, unknown fields are an error."""
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"train config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError("train config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise FormatError(f"unknown train config fields: {', '.join(unknown)}")
        return cls(**doc)


@dataclass
class OptimizerState:
    """Momentum buffer, one entry per learnable, lazily sized."""

    velocity: np.ndarray | None = None

    def ensure(self, n: int) -> np.ndarray:
        if self.velocity is None:
            self.velocity = np.zeros(n)
        elif self.velocity.shape != (n,):
            raise ShapeError(f"optimizer state has {self.velocity.shape[0]} entries, model has {n}")
        return self.velocity


@dataclass
class EpochSummary:
    epoch: int
    mined: int
    mean_loss: float
    updates: int
    clamp_events: int

    def to_json_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mined": self.mined,
            "mean_loss": self.mean_loss,
            "updates": self.updates,
            "clamp_events": self.clamp_events,
        }


@dataclass
class TrainingSet:
    """Feature maps and class labels of one manifest split, keyed by image id."""

    ids: list[str]
    labels: dict[str, int]
    maps: dict[str, list]

    def __post_init__(self):
        self.ids = sorted(self.ids)
        missing = [i for i in self.ids if i not in self.labels or i not in self.maps]
        if missing:
            raise DataError(f"ids without label or features: {missing[:5]}")

    @classmethod
    def from_manifest(cls, manifest_path, split: str = "train") -> "TrainingSet":
        from pathlib import Path

        from .features import load_feature_maps, read_manifest

        entries = [e for e in read_manifest(manifest_path) if e.split == split]
        if not entries:
            raise DataError(f"manifest has no entries in split {split!r}")
        return cls(
            ids=[e.id for e in entries],
            labels={e.id: e.class_label for e in entries},
            maps=load_feature_maps(entries, Path(manifest_path).parent),
        )


def same_class_relevance(ids, labels) -> dict[str, set[str]]:
    """id -> other ids of the same class (self excluded)."""
    by_class: dict[int, set[str]] = {}
    for i in ids:
        by_class.setdefault(labels[i], set()).add(i)
    return {i: by_class[labels[i]] - {i} for i in ids}


# ---------------------------------------------------------------------------
# mining


def mine_triplets(index: RetrievalIndex, n: int, margin: float, rng) -> list[Triplet]:
    """Sample loss-causing triplets from an index of current descriptors.

    Queries are uniform with replacement; the match is uniform within the
    query's class; the non-match is the different-class image at minimum
    descriptor distance (ties broken by ascending id).  Only triplets with
    positive loss are kept, so the result may be shorter than ``n``.
    """
    ids = index.ids
    everyone = set(ids)
    if any(not index.relevance.get(i) for i in ids):
        raise DataError("mining needs at least two images in every class")
    if all(index.relevance[i] | {i} == everyone for i in ids):
        raise DataError("mining needs at least two classes")
    row = {img: k for k, img in enumerate(ids)}
    ids_arr = np.array(ids)
    match_pool = {i: sorted(index.relevance[i]) for i in ids}
    nonmatch_mask = {
        i: np.array([j != i and j not in index.relevance[i] for j in ids]) for i in ids
    }

    triplets = []
    for _ in range(n):
        q = ids[int(rng.integers(len(ids)))]
        pool = match_pool[q]
        m = pool[int(rng.integers(len(pool)))]
        dq = np.linalg.norm(index.descriptors - index.descriptors[row[q]], axis=1)
        mask = nonmatch_mask[q]
        order = np.lexsort((ids_arr[mask], dq[mask]))
        hardest = ids_arr[mask][order[0]]
        loss = triplet_loss(
            index.descriptors[row[q]],
            index.descriptors[row[m]],
            index.descriptors[row[hardest]],
            margin,
        )
        if loss > 0:
            triplets.append(Triplet(q, m, str(hardest)))
    return triplets


# ---------------------------------------------------------------------------
# epochs


def train_epoch(
    model: ModelState,
    data: TrainingSet,
    cfg: TrainConfig,
    opt: OptimizerState,
    rng,
    threads: int = 1,
) -> tuple[ModelState, EpochSummary]:
    """One epoch: mine with the pre-epoch model, then accumulate-and-step."""
    ids, desc = extract_descriptors(data.maps, model, threads)
    index = RetrievalIndex(ids, desc, same_class_relevance(ids, data.labels))
    triplets = mine_triplets(index, cfg.triplets_per_epoch, cfg.margin, rng)

    row = {img: k for k, img in enumerate(ids)}
    mining_losses = [
        triplet_loss(
            desc[row[t.query_id]], desc[row[t.match_id]], desc[row[t.nonmatch_id]], cfg.margin
        )
        for t in triplets
    ]
    mean_loss = float(np.mean(mining_losses)) if mining_losses else 0.0

    clamps = ClampCounter()
    params = model.pack()
    velocity = opt.ensure(params.shape[0])
    accum = np.zeros_like(params)
    pending = 0
    updates = 0

    def apply_update():
        nonlocal model, params, pending, updates
        if not np.isfinite(accum).all():
            bad = int(np.flatnonzero(~np.isfinite(accum))[0])
            raise NumericalError(f"non-finite gradient for parameter {model.param_name(bad)}")
        velocity[:] = cfg.momentum * velocity + accum + cfg.weight_decay * params
        model = model.unpack_constrained(params - cfg.learning_rate * velocity)
        params = model.pack()
        accum[:] = 0.0
        pending = 0
        updates += 1

    for t in triplets:
        aq, cache_q = forward_head_cached(data.maps[t.query_id], model, clamps)
        am, cache_m = forward_head_cached(data.maps[t.match_id], model, clamps)
        an, cache_n = forward_head_cached(data.maps[t.nonmatch_id], model, clamps)
        gq, gm, gn = triplet_loss_gradients(aq, am, an, cfg.margin)
        if gq.any() or gm.any() or gn.any():
            accum += backward_head(cache_q, gq).pack()
            accum += backward_head(cache_m, gm).pack()
            accum += backward_head(cache_n, gn).pack()
        pending += 1
        if pending == cfg.accumulation_size:
            apply_update()
    if pending:
        apply_update()

    summary = EpochSummary(
        epoch=0,
        mined=len(triplets),
        mean_loss=mean_loss,
        updates=updates,
        clamp_events=clamps.count,
    )
    return model, summary


def train(
    model: ModelState,
    data: TrainingSet,
    cfg: TrainConfig,
    log_path=None,
    threads: int = 1,
    fit_whitening_first: bool = True,
) -> tuple[ModelState, list[EpochSummary]]:
    """Full optimization run; stops early once an epoch mines no triplets.

    When ``fit_whitening_first`` is set, the whitening layer is initialized
    by a PCA+whitening fit on the training split's pre-projection vectors
    before the first epoch, then optimized jointly with everything else.
    """
    rng = make_rng(cfg.seed)
    if fit_whitening_first:
        _, pre = extract_vectors_for_fit(data, model, threads)
        model = replace(model, whitening=fit_whitening(pre, out_dim=model.whitening.out_dim))
    opt = OptimizerState()
    trace: list[EpochSummary] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model, summary = train_epoch(model, data, cfg, opt, rng, threads)
            summary.epoch = epoch
            trace.append(summary)
            log.info(
                "epoch %d: mined=%d mean_loss=%.6f updates=%d",
                epoch, summary.mined, summary.mean_loss, summary.updates,
            )
            if log_fh:
                log_fh.write(json.dumps(summary.to_json_dict()) + "\n")
                log_fh.flush()
            if summary.mined == 0:
                break
    finally:
        if log_fh:
            log_fh.close()
    return model, trace


def extract_vectors_for_fit(data: TrainingSet, model: ModelState, threads: int = 1):
    """Pre-projection vectors of the whole training split, sorted-id order."""
    return extract_vectors(data.maps, lambda maps: forward_pre_projection(maps, model), threads)
