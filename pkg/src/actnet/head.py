"""Multi-stream aggregation head: activation, pooling, power normalization,
PCA+whitening and L2 output, with a hand-written backward pass.

One stream maps a feature map X to a vector:

    stream(X) = power_norm(average_pool(activation(X)))

The head concatenates K stream outputs, applies a whitening layer in
fully-connected form ``d = P @ (b + bias)`` (bias carries the negated
mean) and L2-normalizes.  Every learnable lives in a fixed flat layout so
the optimizer and the finite-difference checks can treat the whole model
as one vector: for each stream its activation parameters then
(power_p, power_lambda), then the projection row-major, then the bias.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .activations import (
    ActivationParams,
    ClampCounter,
    activate,
    activate_gradients,
    default_params,
)
from .errors import DataError, FormatError, ParameterError, ShapeError, StateError
from .tensor import FeatureMap, l2_normalize

# pooled values are floored here before fractional powers and logarithms
Z_FLOOR = 1e-12

POWER_P_MIN = 0.05
POWER_P_MAX = 1.0
MIN_LAMBDA = 1e-6

WHITENING_EPSILON = 1e-6

MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# pooling


def global_average_pool(t: FeatureMap) -> np.ndarray:
    """Per-channel spatial mean; output dim equals depth."""
    return t.values.mean(axis=(1, 2))


def global_max_pool(t: FeatureMap) -> np.ndarray:
    """Per-channel spatial maximum."""
    return t.values.max(axis=(1, 2))


def gem_pool(t: FeatureMap, p_gem: float) -> np.ndarray:
    """Generalized mean ((1/WH) sum x^p)^(1/p); p=1 is average pooling.

    Computed with the channel maximum factored out so large p does not
    overflow: m * (mean((x/m)^p))^(1/p).
    """
    if p_gem < 1:
        raise ParameterError(f"gem exponent must be >= 1, got {p_gem}")
    m = global_max_pool(t)
    out = np.zeros_like(m)
    live = m > 0
    if live.any():
        ratios = t.values[live] / m[live, None, None]
        out[live] = m[live] * (ratios**p_gem).mean(axis=(1, 2)) ** (1.0 / p_gem)
    return out


def power_normalize(z, p: float, lam: float) -> np.ndarray:
    """lambda * z^p element-wise, with z floored at Z_FLOOR."""
    z = np.asarray(z, dtype=np.float64)
    return lam * np.maximum(z, Z_FLOOR) ** p


# ---------------------------------------------------------------------------
# model state


@dataclass(frozen=True)
class StreamParams:
    """All learnables of one aggregation stream."""

    activation: ActivationParams
    power_p: float = 0.5
    power_lambda: float = 1.0

    def __post_init__(self):
        if not 0 < self.power_p <= POWER_P_MAX:
            raise ParameterError(f"power_p must lie in (0, 1], got {self.power_p}")
        if not self.power_lambda > 0:
            raise ParameterError(f"power_lambda must be positive, got {self.power_lambda}")

    def n_params(self) -> int:
        return len(self.activation.names()) + 2

    def vector(self) -> np.ndarray:
        return np.concatenate([self.activation.vector(), [self.power_p, self.power_lambda]])

    def with_vector(self, vec) -> "StreamParams":
        n_act = len(self.activation.names())
        return StreamParams(
            activation=self.activation.with_vector(vec[:n_act]),
            power_p=float(vec[n_act]),
            power_lambda=float(vec[n_act + 1]),
        )

    def constrain_vector(self, vec) -> np.ndarray:
        """Project a raw stream vector onto the constraint set."""
        n_act = len(self.activation.names())
        out = np.asarray(vec, dtype=np.float64).copy()
        out[:n_act] = self.activation.constrain_vector(out[:n_act])
        out[n_act] = min(max(out[n_act], POWER_P_MIN), POWER_P_MAX)
        out[n_act + 1] = max(out[n_act + 1], MIN_LAMBDA)
        return out


@dataclass(frozen=True)
class WhiteningLayer:
    """PCA+whitening in fully-connected form: d = projection @ (b + bias)."""

    projection: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (in_dim,), the negated training mean

    def __post_init__(self):
        proj = np.asarray(self.projection, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "bias", bias)
        if proj.ndim != 2 or bias.ndim != 1 or proj.shape[1] != bias.shape[0]:
            raise ShapeError(f"projection {proj.shape} incompatible with bias {bias.shape}")
        if proj.shape[0] < 1 or proj.shape[0] > proj.shape[1]:
            raise ShapeError(f"out_dim must lie in [1, in_dim], got projection {proj.shape}")
        if not (np.isfinite(proj).all() and np.isfinite(bias).all()):
            raise DataError("whitening layer contains non-finite entries")

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def in_dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def identity(cls, dim: int) -> "WhiteningLayer":
        return cls(np.eye(dim), np.zeros(dim))


@dataclass(frozen=True)
class ModelState:
    """K stream parameter sets plus the whitening layer: the trainable head."""

    streams: tuple[StreamParams, ...]
    whitening: WhiteningLayer
    stream_input_depths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        object.__setattr__(self, "stream_input_depths", tuple(int(d) for d in self.stream_input_depths))
        if len(self.streams) < 1 or len(self.streams) != len(self.stream_input_depths):
            raise ShapeError("need one stream per input depth, at least one")
        if any(d < 1 for d in self.stream_input_depths):
            raise ShapeError("stream input depths must be positive")
        if self.whitening.in_dim != sum(self.stream_input_depths):
            raise ShapeError(
                f"whitening in_dim {self.whitening.in_dim} != "
                f"sum of stream depths {sum(self.stream_input_depths)}"
            )

    # -- flat parameter vector ----------------------------------------

    def n_params(self) -> int:
        n = sum(s.n_params() for s in self.streams)
        return n + self.whitening.projection.size + self.whitening.bias.size

    def pack(self) -> np.ndarray:
        parts = [s.vector() for s in self.streams]
        parts.append(self.whitening.projection.ravel())
        parts.append(self.whitening.bias)
        return np.concatenate(parts)

    def unpack(self, vec) -> "ModelState":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params(),):
            raise ShapeError(f"expected parameter vector of length {self.n_params()}, got {vec.shape}")
        streams = []
        pos = 0
        for s in self.streams:
            streams.append(s.with_vector(vec[pos : pos + s.n_params()]))
            pos += s.n_params()
        out_dim, in_dim = self.whitening.projection.shape
        proj = vec[pos : pos + out_dim * in_dim].reshape(out_dim, in_dim).copy()
        pos += out_dim * in_dim
        bias = vec[pos:].copy()
        return ModelState(tuple(streams), WhiteningLayer(proj, bias), self.stream_input_depths)

    def param_name(self, index: int) -> str:
        """Human-readable name of one coordinate of the packed vector."""
        pos = 0
        for i, s in enumerate(self.streams):
            names = list(s.activation.names()) + ["power_p", "power_lambda"]
            if index < pos + len(names):
                return f"stream{i}.{names[index - pos]}"
            pos += len(names)
        out_dim, in_dim = self.whitening.projection.shape
        if index < pos + out_dim * in_dim:
            flat = index - pos
            return f"whitening.projection[{flat // in_dim},{flat % in_dim}]"
        return f"whitening.bias[{index - pos - out_dim * in_dim}]"

    def constrain_vector(self, vec) -> np.ndarray:
        """Project a raw packed vector onto every constraint set.

        Values already inside their constraints pass through bitwise
        unchanged; whitening entries are unconstrained.
        """
        out = np.asarray(vec, dtype=np.float64).copy()
        pos = 0
        for s in self.streams:
            out[pos : pos + s.n_params()] = s.constrain_vector(out[pos : pos + s.n_params()])
            pos += s.n_params()
        return out

    def unpack_constrained(self, vec) -> "ModelState":
        """Unpack after clamping, the post-optimizer-step entry point."""
        return self.unpack(self.constrain_vector(vec))

    # -- serialization --------------------------------------------------

    def to_json_dict(self) -> dict:
        streams = []
        for s, d in zip(self.streams, self.stream_input_depths):
            entry = {"family": s.activation.family}
            entry.update({n: v for n, v in zip(s.activation.names(), s.activation.vector().tolist())})
            entry["power_p"] = s.power_p
            entry["power_lambda"] = s.power_lambda
            streams.append(entry)
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "streams": streams,
            "stream_input_depths": list(self.stream_input_depths),
            "whitening": {
                "projection": self.whitening.projection.tolist(),
                "bias": self.whitening.bias.tolist(),
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ModelState":
        try:
            if doc["format_version"] != MODEL_FORMAT_VERSION:
                raise FormatError(f"unsupported model format_version {doc['format_version']!r}")
            streams = []
            for entry in doc["streams"]:
                family = entry["family"]
                tail = {}
                if family == "weibull":
                    tail = {"gamma": entry["gamma"], "zeta": entry["zeta"]}
                act = ActivationParams(family, alpha=entry["alpha"], beta=entry["beta"], **tail)
                streams.append(
                    StreamParams(act, power_p=entry["power_p"], power_lambda=entry["power_lambda"])
                )
            whitening = WhiteningLayer(
                np.array(doc["whitening"]["projection"], dtype=np.float64),
                np.array(doc["whitening"]["bias"], dtype=np.float64),
            )
            return cls(tuple(streams), whitening, tuple(doc["stream_input_depths"]))
        except KeyError as exc:
            raise FormatError(f"model document is missing field {exc}") from exc

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ModelState":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"model file is not valid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


def initial_model(
    family: str, stream_input_depths, out_dim: int | None = None
) -> ModelState:
    """Fresh head with default activation parameters and identity-like whitening."""
    depths = tuple(int(d) for d in stream_input_depths)
    in_dim = sum(depths)
    out_dim = in_dim if out_dim is None else int(out_dim)
    proj = np.eye(out_dim, in_dim)
    return ModelState(
        tuple(StreamParams(default_params(family)) for _ in depths),
        WhiteningLayer(proj, np.zeros(in_dim)),
        depths,
    )


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class _StreamCache:
    x: np.ndarray  # input feature map values (D, H, W)
    z: np.ndarray  # pooled activations
    zc: np.ndarray  # pooled activations floored at Z_FLOOR
    zcp: np.ndarray  # zc ** power_p
    psi: np.ndarray  # power-normalized output


@dataclass
class HeadCache:
    """Forward intermediates needed by backward_head."""

    model: ModelState
    streams: list[_StreamCache]
    u: np.ndarray  # concatenated streams plus bias
    d: np.ndarray  # projected descriptor before normalization
    norm: float
    output: np.ndarray


@dataclass
class StreamGradients:
    d_activation: np.ndarray  # aligned with ActivationParams.names()
    d_power_p: float
    d_power_lambda: float


@dataclass
class HeadGradients:
    """Loss partials for every learnable, aligned with ModelState.pack()."""

    streams: list[StreamGradients]
    d_projection: np.ndarray
    d_bias: np.ndarray
    d_inputs: list[np.ndarray] | None = None

    def pack(self) -> np.ndarray:
        parts = []
        for s in self.streams:
            parts.append(s.d_activation)
            parts.append([s.d_power_p, s.d_power_lambda])
        parts.append(self.d_projection.ravel())
        parts.append(self.d_bias)
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def _check_maps(maps, model: ModelState):
    if len(maps) != len(model.streams):
        raise ShapeError(f"expected {len(model.streams)} feature maps, got {len(maps)}")
    for i, (t, d) in enumerate(zip(maps, model.stream_input_depths)):
        if t.depth != d:
            raise ShapeError(f"stream {i} expects depth {d}, feature map has {t.depth}")


def forward_stream(
    t: FeatureMap, s: StreamParams, clamp_counter: ClampCounter | None = None
) -> np.ndarray:
    """activation -> global average pool -> power normalization."""
    y = activate(t.values, s.activation, clamp_counter)
    z = y.mean(axis=(1, 2))
    return power_normalize(z, s.power_p, s.power_lambda)


def forward_head(
    maps, model: ModelState, clamp_counter: ClampCounter | None = None
) -> np.ndarray:
    """Unit-norm global descriptor for one image's K feature maps."""
    return forward_head_cached(maps, model, clamp_counter)[0]


def forward_head_cached(
    maps, model: ModelState, clamp_counter: ClampCounter | None = None
) -> tuple[np.ndarray, HeadCache]:
    """Forward pass keeping the intermediates backward_head needs."""
    _check_maps(maps, model)
    caches = []
    psis = []
    for t, s in zip(maps, model.streams):
        y = activate(t.values, s.activation, clamp_counter)
        z = y.mean(axis=(1, 2))
        zc = np.maximum(z, Z_FLOOR)
        zcp = zc**s.power_p
        psi = s.power_lambda * zcp
        caches.append(_StreamCache(x=t.values, z=z, zc=zc, zcp=zcp, psi=psi))
        psis.append(psi)
    u = np.concatenate(psis) + model.whitening.bias
    d = model.whitening.projection @ u
    norm = float(np.linalg.norm(d))
    if norm < 1e-12:
        raise DataError(f"degenerate descriptor: norm {norm:g} below 1e-12")
    output = d / norm
    return output, HeadCache(model=model, streams=caches, u=u, d=d, norm=norm, output=output)


def backward_head(
    cache: HeadCache, upstream_gradient, with_input_grads: bool = False
) -> HeadGradients:
    """Partials of a scalar loss w.r.t. every learnable of the head.

    ``upstream_gradient`` is dLoss/d(output).  Requires the cache from
    forward_head_cached; gradients are exact for the clamped forward.
    """
    if cache is None:
        raise StateError("backward_head needs the cache from forward_head_cached")
    model = cache.model
    g_a = np.asarray(upstream_gradient, dtype=np.float64)
    if g_a.shape != cache.output.shape:
        raise ShapeError(f"upstream gradient shape {g_a.shape} != descriptor shape {cache.output.shape}")

    # through L2 normalization: d(out)/d(d) = (I - a a^T) / norm
    g_d = (g_a - float(g_a @ cache.output) * cache.output) / cache.norm
    d_projection = np.outer(g_d, cache.u)
    g_u = model.whitening.projection.T @ g_d
    d_bias = g_u.copy()

    stream_grads = []
    d_inputs = [] if with_input_grads else None
    pos = 0
    for sc, s, depth in zip(cache.streams, model.streams, model.stream_input_depths):
        g_psi = g_u[pos : pos + depth]
        pos += depth
        d_lambda = float(g_psi @ sc.zcp)
        log_zc = np.log(sc.zc)
        d_power = float(g_psi @ (sc.psi * log_zc))
        # d(psi)/d(z) = lambda * p * zc^(p-1); zero where the floor is active
        g_z = g_psi * (s.power_lambda * s.power_p * sc.zcp / sc.zc) * (sc.z > Z_FLOOR)
        wh = sc.x.shape[1] * sc.x.shape[2]
        g_y = g_z / wh  # per-channel weight of every spatial position
        act_grads = activate_gradients(sc.x, s.activation)
        d_act = np.array(
            [float(g_y @ arr.sum(axis=(1, 2))) for arr in act_grads.param_stack()]
        )
        stream_grads.append(
            StreamGradients(d_activation=d_act, d_power_p=d_power, d_power_lambda=d_lambda)
        )
        if with_input_grads:
            d_inputs.append(g_y[:, None, None] * act_grads.d_input)
    return HeadGradients(
        streams=stream_grads, d_projection=d_projection, d_bias=d_bias, d_inputs=d_inputs
    )


# ---------------------------------------------------------------------------
# whitening fit, truncation, batched extraction


def fit_whitening(vectors, out_dim: int | None = None, epsilon: float = WHITENING_EPSILON) -> WhiteningLayer:
    """PCA+whitening transform fitted on pre-projection vectors.

    Rows of the projection are covariance eigenvectors in descending
    eigenvalue order, each scaled by 1/sqrt(eigenvalue + epsilon); the bias
    is the negated sample mean.  The fitted training set then projects to
    (approximately) zero mean and identity covariance.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a (samples, dim) matrix, got shape {x.shape}")
    n, in_dim = x.shape
    out_dim = in_dim if out_dim is None else int(out_dim)
    if not 1 <= out_dim <= in_dim:
        raise ParameterError(f"out_dim must lie in [1, {in_dim}], got {out_dim}")
    if n < out_dim + 1:
        raise DataError(f"whitening needs at least out_dim+1 = {out_dim + 1} samples, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dim]
    rows = eigvecs[:, order].T / np.sqrt(np.maximum(eigvals[order], 0.0) + epsilon)[:, None]
    return WhiteningLayer(rows, -mean)


def compact_signature(d, k: int) -> np.ndarray:
    """First k components (eigenvalue order), re-L2-normalized."""
    d = np.asarray(d, dtype=np.float64)
    if not 1 <= k <= d.shape[0]:
        raise ParameterError(f"compact size must lie in [1, {d.shape[0]}], got {k}")
    return l2_normalize(d[:k])


def forward_pre_projection(maps, model: ModelState, clamp_counter=None) -> np.ndarray:
    """Concatenated stream outputs before whitening (training input for the fit)."""
    _check_maps(maps, model)
    return np.concatenate(
        [forward_stream(t, s, clamp_counter) for t, s in zip(maps, model.streams)]
    )


def extract_vectors(maps_by_id, fn, threads: int = 1) -> tuple[list[str], np.ndarray]:
    """Apply a per-image descriptor function over a mapping id -> feature maps.

    Results are merged in sorted-id order regardless of thread count, so the
    output is deterministic.
    """
    ids = sorted(maps_by_id)
    if not ids:
        raise DataError("no images to extract")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda i: fn(maps_by_id[i]), ids))
    else:
        rows = [fn(maps_by_id[i]) for i in ids]
    return ids, np.stack(rows)


def extract_descriptors(
    maps_by_id, model: ModelState, threads: int = 1, clamp_counter=None
) -> tuple[list[str], np.ndarray]:
    """Unit-norm descriptors for every image, merged in sorted-id order."""
    return extract_vectors(
        maps_by_id, lambda maps: forward_head(maps, model, clamp_counter), threads
    )
