"""Finite-difference verification of every hand-written gradient.

Central differences with h=1e-5 in 64-bit arithmetic are the arbiter: an
analytic partial passes when it matches the difference quotient within
relative 1e-4, or within absolute 1e-7 when the reference magnitude is
below 1e-3 (difference quotients of near-zero derivatives are dominated
by rounding noise).
"""

from __future__ import annotations

import numpy as np

from .activations import FAMILIES, ActivationParams, activate, activate_gradients, weibull_peak
from .head import ModelState, StreamParams, WhiteningLayer, backward_head, forward_head, forward_head_cached
from .tensor import FeatureMap, make_rng
from .training import triplet_loss, triplet_loss_gradients

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7
TINY_REFERENCE = 1e-3

HEAD_REL_TOL = 1e-3


def central_difference(f, x: float, h: float = FD_STEP) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)


def _agrees(analytic: float, reference: float, rel_tol=REL_TOL, abs_tol=ABS_TOL) -> bool:
    if abs(reference) < TINY_REFERENCE:
        return abs(analytic - reference) <= max(abs_tol, rel_tol * abs(reference))
    return abs(analytic - reference) <= rel_tol * abs(reference)


def _random_params(family: str, rng) -> ActivationParams:
    if family == "weibull":
        return ActivationParams(
            "weibull",
            alpha=float(rng.uniform(0.5, 2.0)),
            beta=float(rng.uniform(1.3, 3.5)),
            gamma=float(rng.uniform(0.5, 4.0)),
            zeta=float(rng.uniform(0.5, 2.5)),
        )
    return ActivationParams(family, alpha=float(rng.uniform(0.2, 2.0)), beta=float(rng.uniform(0.2, 2.0)))


def activation_gradient_check(seed: int, points_per_family: int = 100) -> dict:
    """Compare every analytic activation partial against central differences.

    Points with |activation| <= 1e-8 are redrawn; difference quotients there
    say nothing.
    """
    rng = make_rng(seed)
    report = {"families": {}, "points_per_family": points_per_family, "pass": True}
    for family in FAMILIES:
        worst = 0.0
        worst_at = None
        checked = 0
        while checked < points_per_family:
            p = _random_params(family, rng)
            x = float(rng.uniform(0.01, 4.0))
            if abs(activate(x, p)) <= 1e-8:
                continue
            checked += 1
            grads = activate_gradients(x, p)
            candidates = {"input": (grads.d_input, lambda v: activate(v, p))}
            vec = p.vector()
            for i, name in enumerate(p.names()):
                def f(v, i=i):
                    mod = vec.copy()
                    mod[i] = v
                    return activate(x, p.with_vector(mod))

                candidates[name] = (grads.by_name()[name], f)
            for name, (analytic, f) in candidates.items():
                point = x if name == "input" else vec[list(p.names()).index(name)]
                reference = central_difference(f, point)
                err = abs(analytic - reference) / max(abs(reference), TINY_REFERENCE)
                if err > worst:
                    worst, worst_at = err, {"partial": name, "x": x, "params": vec.tolist()}
                if not _agrees(analytic, reference):
                    report["pass"] = False
        report["families"][family] = {"max_relative_error": worst, "worst_case": worst_at}
    return report


def weibull_peak_check(seed: int, draws: int = 50, grid: int = 10_000) -> dict:
    """Dense-grid argmax must land within one grid step of the closed form."""
    rng = make_rng(seed)
    ok = True
    worst = 0.0
    for _ in range(draws):
        p = _random_params("weibull", rng)
        x0 = weibull_peak(p)
        xs = np.linspace(0.0, 5.0 * x0, grid)
        step = xs[1] - xs[0]
        arg = float(xs[int(np.argmax(activate(xs, p)))])
        err = abs(arg - x0)
        worst = max(worst, err / step)
        if err > step:
            ok = False
    return {"draws": draws, "grid": grid, "max_error_in_steps": worst, "pass": ok}


def _random_head(rng, depths=(4, 8), family: str | None = None, spatial: int = 3):
    families = list(FAMILIES)
    streams = []
    for _ in depths:
        fam = family or families[int(rng.integers(len(families)))]
        streams.append(
            StreamParams(
                activation=_random_params(fam, rng),
                power_p=float(rng.uniform(0.2, 1.0)),
                power_lambda=float(rng.uniform(0.5, 2.0)),
            )
        )
    in_dim = sum(depths)
    proj = rng.normal(size=(in_dim, in_dim)) / np.sqrt(in_dim)
    bias = rng.normal(scale=0.1, size=in_dim)
    model = ModelState(tuple(streams), WhiteningLayer(proj, bias), tuple(depths))
    maps = [
        [FeatureMap(rng.uniform(0.05, 2.0, size=(d, spatial, spatial))) for d in depths]
        for _ in range(3)
    ]
    return model, maps


def head_gradient_check(seed: int, configs: int = 20, margin: float = 0.5) -> dict:
    """backward_head vs finite differences of the triplet loss through the head.

    Twenty seeded two-stream configurations (depths 4 and 8) cycling through
    the activation families; the margin is large enough that every triplet
    stays active, so the hinge never kinks inside a difference step.
    """
    rng = make_rng(seed)
    worst = 0.0
    worst_name = None
    ok = True
    for c in range(configs):
        model, maps = _random_head(rng, family=FAMILIES[c % len(FAMILIES)])
        q_maps, m_maps, n_maps = maps

        def loss_at(vec) -> float:
            trial = model.unpack(vec)
            return triplet_loss(
                forward_head(q_maps, trial),
                forward_head(m_maps, trial),
                forward_head(n_maps, trial),
                margin,
            )

        aq, cq = forward_head_cached(q_maps, model)
        am, cm = forward_head_cached(m_maps, model)
        an, cn = forward_head_cached(n_maps, model)
        gq, gm, gn = triplet_loss_gradients(aq, am, an, margin)
        analytic = (
            backward_head(cq, gq).pack()
            + backward_head(cm, gm).pack()
            + backward_head(cn, gn).pack()
        )

        base = model.pack()
        for i in range(base.shape[0]):
            def f(v, i=i):
                mod = base.copy()
                mod[i] = v
                return loss_at(mod)

            reference = central_difference(f, base[i])
            err = abs(analytic[i] - reference) / max(abs(reference), 1e-6)
            if err > worst:
                worst, worst_name = err, f"config {c}: {model.param_name(i)}"
            if err > HEAD_REL_TOL:
                ok = False
    return {"configs": configs, "max_relative_error": worst, "worst_case": worst_name, "pass": ok}


def run_all(seed: int) -> dict:
    """Full gradient verification suite, as run by the CLI."""
    activation = activation_gradient_check(seed)
    peak = weibull_peak_check(seed)
    head = head_gradient_check(seed)
    return {
        "seed": seed,
        "activation_gradients": activation,
        "weibull_peak": peak,
        "head_gradients": head,
        "pass": activation["pass"] and peak["pass"] and head["pass"],
    }
