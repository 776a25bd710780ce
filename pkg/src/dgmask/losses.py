"""Scalar training losses with exact gradients.

Each loss returns ``(value, grad)`` where ``grad`` has the shape of the map
it differentiates (mask probabilities or predicted depth).
"""

from dataclasses import dataclass

import numpy as np

DICE_EPS = 1e-6
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class SimilarityField:
    edges: object  # EdgeGraph
    edge_sim: np.ndarray
    pixel_sim: np.ndarray  # (H, W)


def _pixel_mean(edges, values):
    n = edges.n_pixels
    total = np.bincount(edges.a, weights=values, minlength=n) + np.bincount(edges.b, weights=values, minlength=n)
    count = np.bincount(edges.a, minlength=n) + np.bincount(edges.b, minlength=n)
    # isolated pixels have no neighbours to disagree with
    mean = np.divide(total, count, out=np.ones(n), where=count > 0)
    return mean.reshape(edges.height, edges.width)


def depth_similarity(depth, edges, k=8.0):
    d = np.asarray(depth, dtype=np.float64).ravel()
    sim = np.exp(-k * np.abs(d[edges.a] - d[edges.b]))
    return SimilarityField(edges, sim, _pixel_mean(edges, sim))


def color_similarity(image, edges, theta=2.0):
    img = np.asarray(image, dtype=np.float64).reshape(-1, image.shape[-1])
    dist = np.sqrt(((img[edges.a] - img[edges.b]) ** 2).sum(axis=1))
    sim = np.exp(-dist / theta)
    return SimilarityField(edges, sim, _pixel_mean(edges, sim))


def qualifying_edges(sim, tau, region):
    """Edge endpoints with similarity strictly above ``tau`` inside ``region``."""
    r = np.asarray(region, dtype=bool).ravel()
    e = sim.edges
    keep = (sim.edge_sim > tau) & r[e.a] & r[e.b]
    return e.a[keep], e.b[keep]


def pairwise_from_edges(mask_prob, a, b):
    """Mean negative log-probability that each edge's endpoints agree."""
    m = np.asarray(mask_prob, dtype=np.float64)
    grad = np.zeros(m.size)
    if len(a) == 0:
        return 0.0, grad.reshape(m.shape)
    flat = m.ravel()
    ma, mb = flat[a], flat[b]
    agree = np.maximum(ma * mb + (1.0 - ma) * (1.0 - mb), _LOG_FLOOR)
    n = len(a)
    value = float(-np.log(agree).sum() / n)
    scale = -1.0 / (agree * n)
    grad += np.bincount(a, weights=scale * (2.0 * mb - 1.0), minlength=m.size)
    grad += np.bincount(b, weights=scale * (2.0 * ma - 1.0), minlength=m.size)
    return value, grad.reshape(m.shape)


def loss_pairwise(mask_prob, sim, tau, region):
    a, b = qualifying_edges(sim, tau, region)
    return pairwise_from_edges(mask_prob, a, b)


def box_region(shape, box, pad=0):
    h, w = shape
    x0, y0, x1, y1 = (int(v) for v in box)
    region = np.zeros((h, w), dtype=bool)
    region[max(y0 - pad, 0):min(y1 + pad, h), max(x0 - pad, 0):min(x1 + pad, w)] = True
    return region


def loss_instance_depth(depth_pred, pseudo_depth, box):
    x0, y0, x1, y1 = (int(v) for v in box)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate box {box}")
    pred = np.asarray(depth_pred, dtype=np.float64)
    inside = box_region(pred.shape, box)
    area = inside.sum()
    if area == 0:
        raise ValueError(f"box {box} does not cover any pixel")
    diff = np.where(inside, pred - pseudo_depth, 0.0)
    value = float((diff**2).sum() / area)
    return value, 2.0 * diff / area


def dice_value_grad(m, t):
    inter = (m * t).sum()
    denom = (m * m).sum() + (t * t).sum() + DICE_EPS
    value = 1.0 - 2.0 * inter / denom
    grad = -2.0 * t / denom + 4.0 * inter * m / denom**2
    return float(value), grad


def loss_dice(mask_prob, target):
    m = np.asarray(mask_prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError("mask and target must have the same shape")
    return dice_value_grad(m, t)


def loss_projection(mask_prob, box):
    """Dice between the mask's axis max-projections and the box's projections.

    The max is hard; its subgradient goes to the first maximal pixel of each
    row or column.
    """
    m = np.asarray(mask_prob, dtype=np.float64)
    h, w = m.shape
    x0, y0, x1, y1 = (int(v) for v in box)
    grad = np.zeros_like(m)

    col_t = np.zeros(w)
    col_t[max(x0, 0):min(x1, w)] = 1.0
    col_arg = np.argmax(m, axis=0)
    col_val, col_g = dice_value_grad(m[col_arg, np.arange(w)], col_t)
    np.add.at(grad, (col_arg, np.arange(w)), col_g)

    row_t = np.zeros(h)
    row_t[max(y0, 0):min(y1, h)] = 1.0
    row_arg = np.argmax(m, axis=1)
    row_val, row_g = dice_value_grad(m[np.arange(h), row_arg], row_t)
    np.add.at(grad, (np.arange(h), row_arg), row_g)
    return col_val + row_val, grad


@dataclass(frozen=True)
class LossTerms:
    projection: float = 0.0
    color_pairwise: float = 0.0
    depth_consistency: float = 0.0
    instance_depth: float = 0.0
    reliable_dice: float = 0.0
    box_prior: float = 0.0  # already weighted; nonzero only during warm start

    def total(self, phase="base", gamma=4.0):
        return total_loss(self, phase, gamma)

    def as_dict(self):
        return {
            "projection": self.projection,
            "color_pairwise": self.color_pairwise,
            "depth_consistency": self.depth_consistency,
            "instance_depth": self.instance_depth,
            "reliable_dice": self.reliable_dice,
            "box_prior": self.box_prior,
        }


def total_loss(terms, phase="base", gamma=4.0):
    if phase not in ("base", "distill"):
        raise ValueError(f"phase must be 'base' or 'distill', got {phase!r}")
    base = (terms.projection + terms.color_pairwise + terms.depth_consistency
            + terms.instance_depth + terms.box_prior)
    if phase == "base" or gamma == 0:
        return base
    return base + gamma * terms.reliable_dice
