"""Ranking, (mean) average precision, distance-histogram separability and
alpha query expansion over an index of unit-norm descriptors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .head import compact_signature
from .tensor import l2_normalize

log = logging.getLogger(__name__)

# all descriptors are unit-norm, so Euclidean distances live in [0, 2]
DISTANCE_RANGE = (0.0, 2.0)
KLD_SMOOTHING = 1e-6

QE_DEFAULT_N = 10
QE_DEFAULT_ALPHA = 3.0


@dataclass
class RetrievalIndex:
    """Id-keyed unit-norm descriptors plus ground-truth relevance sets."""

    ids: list[str]
    descriptors: np.ndarray  # (n, dim)
    relevance: dict[str, set[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != len(self.ids):
            raise ShapeError(
                f"need one descriptor row per id, got {self.descriptors.shape} for {len(self.ids)} ids"
            )
        if len(set(self.ids)) != len(self.ids):
            raise DataError("index ids must be unique")
        norms = np.linalg.norm(self.descriptors, axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > 1e-6:
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise DataError(f"descriptor {self.ids[bad]!r} is not unit-norm (|v|={norms[bad]:.8f})")
        known = set(self.ids)
        self.relevance = {str(q): {str(r) for r in rel} for q, rel in self.relevance.items()}
        for q, rel in self.relevance.items():
            stray = rel - known
            if stray:
                raise DataError(f"relevance for {q!r} references unknown ids {sorted(stray)[:5]}")

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def row(self, image_id: str) -> np.ndarray:
        return self.descriptors[self.ids.index(image_id)]


def rank(query, index: RetrievalIndex, exclude: str | None = None) -> list[tuple[str, float]]:
    """All index entries by ascending distance, distance ties by ascending id."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ShapeError(f"query dim {query.shape} != index dim {index.dim}")
    dists = np.linalg.norm(index.descriptors - query, axis=1)
    ids_arr = np.array(index.ids)
    order = np.lexsort((ids_arr, dists))
    return [
        (index.ids[k], float(dists[k]))
        for k in order
        if exclude is None or index.ids[k] != exclude
    ]


def average_precision(ranking_ids, relevant) -> float:
    """AP of one ranked list against a non-empty relevant set."""
    relevant = set(relevant)
    if not relevant:
        raise DataError("average precision needs a non-empty relevant set")
    missing = relevant - set(ranking_ids)
    if missing:
        raise DataError(f"relevant ids missing from ranking: {sorted(missing)[:5]}")
    hits = 0
    acc = 0.0
    for k, image_id in enumerate(ranking_ids, start=1):
        if image_id in relevant:
            hits += 1
            acc += hits / k
    return acc / len(relevant)


@dataclass(frozen=True)
class QueryExpansion:
    """Alpha query expansion options (similarity-weighted top-n average)."""

    n: int = QE_DEFAULT_N
    alpha: float = QE_DEFAULT_ALPHA


def alpha_query_expansion(
    query, ranking, index: RetrievalIndex, n_qe: int = QE_DEFAULT_N, alpha_qe: float = QE_DEFAULT_ALPHA
) -> np.ndarray:
    """Expanded query: normalize(q + sum_i sim_i^alpha * d_i) over top results.

    sim_i is the dot product with the query, clamped at zero.  Uses all
    available results when the ranking is shorter than ``n_qe``.
    """
    if n_qe < 1:
        raise ParameterError(f"query expansion needs n_qe >= 1, got {n_qe}")
    query = np.asarray(query, dtype=np.float64)
    top_ids = [image_id for image_id, _ in ranking[:n_qe]]
    rows = {img: k for k, img in enumerate(index.ids)}
    acc = query.copy()
    for image_id in top_ids:
        d = index.descriptors[rows[image_id]]
        sim = max(0.0, float(d @ query))
        acc += sim**alpha_qe * d
    return l2_normalize(acc)


@dataclass
class MapReport:
    """Overall mAP, per-query AP and the options that produced them."""

    map: float
    per_query: dict[str, float]
    skipped: list[str]
    options: dict

    def to_json_dict(self) -> dict:
        return {
            "map": self.map,
            "per_query_ap": self.per_query,
            "skipped_queries": self.skipped,
            "options": self.options,
        }


def mean_average_precision(
    index: RetrievalIndex,
    queries,
    query_descriptors=None,
    exclude_self: bool = False,
    compact_k: int | None = None,
    qe: QueryExpansion | None = None,
) -> MapReport:
    """Mean AP over queries against the index's relevance sets.

    Query descriptors come from ``query_descriptors`` when given, else from
    the query's own index row.  ``exclude_self`` removes the query id from
    both its ranking and its relevant set (leave-one-out).  ``compact_k``
    truncates every descriptor to its first k whitened components (then
    re-normalizes) before any ranking; query expansion runs on the same
    compacted index.  Queries with an empty relevant set are skipped with a
    warning and excluded from the mean.
    """
    if compact_k is not None:
        index = RetrievalIndex(
            ids=index.ids,
            descriptors=np.stack([compact_signature(row, compact_k) for row in index.descriptors]),
            relevance=index.relevance,
        )

    per_query: dict[str, float] = {}
    skipped: list[str] = []
    for qid in queries:
        qid = str(qid)
        if query_descriptors is not None and qid in query_descriptors:
            qvec = np.asarray(query_descriptors[qid], dtype=np.float64)
            if compact_k is not None:
                qvec = compact_signature(qvec, compact_k)
        elif qid in index.ids:
            qvec = index.row(qid)
        else:
            raise DataError(f"query {qid!r} has no descriptor")
        relevant = set(index.relevance.get(qid, set()))
        if exclude_self:
            relevant.discard(qid)
        if not relevant:
            log.warning("query %r has no relevant ids; skipped", qid)
            skipped.append(qid)
            continue
        exclude = qid if exclude_self else None
        ranking = rank(qvec, index, exclude=exclude)
        if qe is not None:
            qvec = alpha_query_expansion(qvec, ranking, index, qe.n, qe.alpha)
            ranking = rank(qvec, index, exclude=exclude)
        per_query[qid] = average_precision([i for i, _ in ranking], relevant)

    if not per_query:
        raise DataError("no query produced a valid average precision")
    options = {
        "exclude_self": exclude_self,
        "compact_k": compact_k,
        "qe": None if qe is None else {"n": qe.n, "alpha": qe.alpha},
    }
    return MapReport(
        map=sum(per_query.values()) / len(per_query),
        per_query=per_query,
        skipped=skipped,
        options=options,
    )


# ---------------------------------------------------------------------------
# separability


@dataclass
class SeparabilityReport:
    """Distance histograms of matching vs non-matching pairs and their KLD."""

    matching_histogram: np.ndarray
    nonmatching_histogram: np.ndarray
    bin_edges: np.ndarray
    kld: float

    @property
    def bins(self) -> int:
        return len(self.matching_histogram)

    def to_json_dict(self) -> dict:
        return {
            "bins": self.bins,
            "bin_edges": self.bin_edges.tolist(),
            "matching_histogram": self.matching_histogram.tolist(),
            "nonmatching_histogram": self.nonmatching_histogram.tolist(),
            "matching_pairs": int(self.matching_histogram.sum()),
            "nonmatching_pairs": int(self.nonmatching_histogram.sum()),
            "kld": self.kld,
        }


def _histogram(distances, bins):
    clipped = np.clip(np.asarray(distances, dtype=np.float64), *DISTANCE_RANGE)
    return np.histogram(clipped, bins=bins, range=DISTANCE_RANGE)


def separability_from_distances(matching, nonmatching, bins: int = 100) -> SeparabilityReport:
    """KLD(P(dist|match) || P(dist|nonmatch)) from precomputed distances.

    Histograms use ``bins`` equal bins over [0, 2]; probabilities get
    additive smoothing 1e-6 and renormalization before the divergence.
    """
    matching = np.asarray(matching, dtype=np.float64)
    nonmatching = np.asarray(nonmatching, dtype=np.float64)
    if bins < 2:
        raise ParameterError(f"need at least 2 bins, got {bins}")
    if matching.size == 0 or nonmatching.size == 0:
        raise DataError("separability needs non-empty matching and non-matching pair sets")
    hm, edges = _histogram(matching, bins)
    hn, _ = _histogram(nonmatching, bins)
    pm = hm / hm.sum() + KLD_SMOOTHING
    pn = hn / hn.sum() + KLD_SMOOTHING
    pm /= pm.sum()
    pn /= pn.sum()
    kld = float(np.sum(pm * np.log(pm / pn)))
    return SeparabilityReport(
        matching_histogram=hm, nonmatching_histogram=hn, bin_edges=edges, kld=kld
    )


def separability(matching_pairs, nonmatching_pairs, bins: int = 100) -> SeparabilityReport:
    """Separability from explicit lists of (descriptor, descriptor) pairs."""

    def dists(pairs):
        return [float(np.linalg.norm(np.asarray(a) - np.asarray(b))) for a, b in pairs]

    return separability_from_distances(dists(matching_pairs), dists(nonmatching_pairs), bins)


def pairwise_label_distances(descriptors, labels) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs distances split into same-label and different-label sets."""
    x = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise ShapeError("need one label per descriptor")
    gram = x @ x.T
    sq = np.maximum(np.diag(gram)[:, None] + np.diag(gram)[None, :] - 2 * gram, 0.0)
    iu = np.triu_indices(x.shape[0], k=1)
    d = np.sqrt(sq[iu])
    same = labels[iu[0]] == labels[iu[1]]
    return d[same], d[~same]
