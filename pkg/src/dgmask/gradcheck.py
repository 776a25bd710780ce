"""Analytic-vs-finite-difference gradient checks for every loss.

Each check draws random small cases, evaluates the analytic gradient and a
central finite difference, and records the relative error
``|g - g_fd| / max(|g|, |g_fd|, floor)`` (2-norms over the whole gradient).
Cases that sit within the finite-difference step of a kink (argmax ties
in the projection loss, ReLU hinges in the head) are redrawn.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import maskhead
from .features import N_INPUT
from .imagegrid import neighbor_edges
from .losses import (
    box_region,
    color_similarity,
    depth_similarity,
    loss_dice,
    loss_instance_depth,
    loss_pairwise,
    loss_projection,
)

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6
TERMS = ("pairwise_depth", "pairwise_color", "instance_depth", "projection", "dice",
         "maskhead", "composed")


def central_difference(f, x, step=STEP):
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f(x)
        flat[j] = orig - step
        fm = f(x)
        flat[j] = orig
        grad[j] = (fp - fm) / (2 * step)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor=FLOOR):
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


@dataclass
class TermResult:
    cases: int = 0
    max_rel_error: float = 0.0
    failures: int = 0

    @property
    def passed(self):
        return self.cases > 0 and self.failures == 0


@dataclass
class GradCheckReport:
    terms: dict = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def passed(self):
        return all(r.passed for r in self.terms.values())

    def to_dict(self):
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "seconds": self.seconds,
            "terms": {k: {"cases": r.cases, "max_rel_error": r.max_rel_error,
                          "failures": r.failures, "passed": r.passed}
                      for k, r in self.terms.items()},
        }


def _random_box(rng, h, w):
    x0 = int(rng.integers(0, w - 1))
    y0 = int(rng.integers(0, h - 1))
    return (x0, y0, int(rng.integers(x0 + 1, w + 1)), int(rng.integers(y0 + 1, h + 1)))


def _projection_safe(m, step=STEP):
    # the top two values of every row and column must be separated by more than the step
    for arr in (m, m.T):
        top = np.sort(arr, axis=1)[:, -2:]
        if np.any(top[:, 1] - top[:, 0] < 10 * step):
            return False
    return True


def _case_pairwise(rng, kind):
    h, w = 4, 4
    edges = neighbor_edges(h, w, int(rng.integers(1, 3)))
    if kind == "depth":
        sim = depth_similarity(rng.uniform(0, 1, (h, w)), edges, k=float(rng.uniform(1, 10)))
    else:
        sim = color_similarity(rng.uniform(0, 1, (h, w, 3)), edges, theta=float(rng.uniform(0.5, 3)))
    tau = float(rng.uniform(0.0, 0.6))
    region = box_region((h, w), _random_box(rng, h, w), pad=int(rng.integers(0, 2)))
    m = rng.uniform(0.05, 0.95, (h, w))
    f = lambda x: loss_pairwise(x, sim, tau, region)[0]
    return loss_pairwise(m, sim, tau, region)[1], central_difference(f, m)


def _case_depth(rng):
    h, w = 4, 5
    pred, true = rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w))
    box = _random_box(rng, h, w)
    f = lambda x: loss_instance_depth(x, true, box)[0]
    return loss_instance_depth(pred, true, box)[1], central_difference(f, pred)


def _case_projection(rng):
    h, w = 4, 5
    while True:
        m = rng.uniform(0.02, 0.98, (h, w))
        if _projection_safe(m):
            break
    box = _random_box(rng, h, w)
    f = lambda x: loss_projection(x, box)[0]
    return loss_projection(m, box)[1], central_difference(f, m)


def _case_dice(rng):
    h, w = 4, 4
    m = rng.uniform(0.01, 0.99, (h, w))
    t = (rng.uniform(size=(h, w)) < 0.5).astype(float)
    f = lambda x: loss_dice(x, t)[0]
    return loss_dice(m, t)[1], central_difference(f, m)


def _random_head_case(rng, h=3, w=3, margin=1e-3):
    """Random params and inputs with every ReLU pre-activation away from zero."""
    shape = (h, w)
    while True:
        params = rng.normal(0.0, 0.6, maskhead.N_PARAMS)
        x = rng.uniform(-1, 1, (N_INPUT, h * w))
        c = maskhead.forward((x, shape), params).cache
        if np.abs(c["h1_pre"]).min() > margin and np.abs(c["h2_pre"]).min() > margin:
            return params, x, shape


def _case_maskhead(rng):
    params, x, shape = _random_head_case(rng)
    up_m, up_d = rng.normal(size=shape), rng.normal(size=shape)

    def f(p):
        out = maskhead.forward((x, shape), p, keep_cache=False)
        return float((out.mask_prob * up_m).sum() + (out.depth_pred * up_d).sum())

    out = maskhead.forward((x, shape), params)
    return maskhead.backward(out, up_m, up_d), central_difference(f, params)


def composed_loss(params, x, shape, ctx):
    """Every loss evaluated through the head; returns (value, d_mask, d_depth)."""
    out = maskhead.forward((x, shape), params)
    m, d = out.mask_prob, out.depth_pred
    total, g_m, g_d = 0.0, np.zeros(shape), np.zeros(shape)
    for value, grad in (
        loss_projection(m, ctx["box"]),
        loss_pairwise(m, ctx["csim"], ctx["tau_c"], ctx["region"]),
        loss_pairwise(m, ctx["dsim"], ctx["tau_d"], ctx["region"]),
        loss_dice(m, ctx["target"]),
    ):
        total += value
        g_m = g_m + grad
    value, grad = loss_instance_depth(d, ctx["true_depth"], ctx["box"])
    total += value
    g_d = g_d + grad
    return total, g_m, g_d, out


def _case_composed(rng):
    h, w = 4, 4
    while True:
        params, x, shape = _random_head_case(rng, h, w)
        m = maskhead.forward((x, shape), params, keep_cache=False).mask_prob
        if _projection_safe(m, step=1e-3):
            break
    edges = neighbor_edges(h, w, 1)
    ctx = {
        "box": _random_box(rng, h, w),
        "csim": color_similarity(rng.uniform(0, 1, (h, w, 3)), edges, 1.0),
        "dsim": depth_similarity(rng.uniform(0, 1, (h, w)), edges, 4.0),
        "tau_c": 0.3,
        "tau_d": 0.5,
        "target": (rng.uniform(size=(h, w)) < 0.5).astype(float),
        "true_depth": rng.uniform(0, 1, (h, w)),
    }
    ctx["region"] = box_region((h, w), ctx["box"], pad=1)
    _, g_m, g_d, out = composed_loss(params, x, shape, ctx)
    analytic = maskhead.backward(out, g_m, g_d)
    numeric = central_difference(lambda p: composed_loss(p, x, shape, ctx)[0], params)
    return analytic, numeric


_CASES = {
    "pairwise_depth": lambda rng: _case_pairwise(rng, "depth"),
    "pairwise_color": lambda rng: _case_pairwise(rng, "color"),
    "instance_depth": _case_depth,
    "projection": _case_projection,
    "dice": _case_dice,
    "maskhead": _case_maskhead,
    "composed": _case_composed,
}


def grad_check(n_cases=100, seed=0, terms=TERMS, tolerance=TOLERANCE, corrupt=None):
    """Run every requested term; ``corrupt`` names a term whose analytic
    gradient is deliberately perturbed (fault injection for tests)."""
    t0 = time.perf_counter()
    report = GradCheckReport(tolerance=tolerance)
    for k, term in enumerate(terms):
        rng = np.random.default_rng([seed, k])
        res = TermResult()
        for _ in range(n_cases):
            analytic, numeric = _CASES[term](rng)
            if term == corrupt:
                analytic = analytic * 1.01 + 1e-3
            err = relative_error(analytic, numeric)
            res.cases += 1
            res.max_rel_error = max(res.max_rel_error, err)
            res.failures += err > tolerance
        report.terms[term] = res
    report.seconds = time.perf_counter() - t0
    return report
