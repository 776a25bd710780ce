"""Depth-aware scoring of teacher candidates and one-to-one assignment."""

from dataclasses import dataclass

import numpy as np

from .scene import tight_box


class MatchingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    mask_prob: np.ndarray
    depth_pred: np.ndarray
    box: tuple  # None when the binarised mask is empty
    pred_score: float
    anchor: tuple
    source: int = -1  # instance whose teacher head produced it


@dataclass(frozen=True)
class Assignment:
    pairs: tuple  # (gt_index, candidate_index, score)
    unmatched: tuple

    @property
    def total(self):
        return sum(s for _, _, s in self.pairs)


@dataclass(frozen=True)
class MatchConfig:
    alpha: float = 0.8
    beta: float = 0.2
    tau_d: float = 0.5
    tau_m: float = 0.8

    def __post_init__(self):
        check_weights(self.alpha, self.beta)


def check_weights(alpha, beta):
    if alpha < 0 or beta < 0 or alpha + beta > 1.0 + 1e-12:
        raise MatchingConfigError(f"need alpha, beta >= 0 and alpha + beta <= 1 (got {alpha}, {beta})")


def mask_box(mask_prob, thresh=0.5):
    return tight_box(np.asarray(mask_prob) > thresh)


def prediction_score(mask_prob, thresh=0.5):
    """Mean probability over the pixels that pass the threshold, 0 if none do."""
    m = np.asarray(mask_prob)
    fg = m > thresh
    return float(m[fg].mean()) if fg.any() else 0.0


def make_candidate(mask_prob, depth_pred, anchor, source=-1):
    return Candidate(mask_prob, depth_pred, mask_box(mask_prob), prediction_score(mask_prob),
                     tuple(anchor), source)


def box_iou(a, b):
    if a is None or b is None:
        return 0.0
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def depth_consistency_score(mask_prob, pixel_sim, tau_d):
    weighted = np.asarray(mask_prob, dtype=np.float64) * pixel_sim
    denom = weighted.sum()
    if denom < 1e-12:
        return 0.0
    return float(weighted[np.asarray(pixel_sim) > tau_d].sum() / denom)


def prediction_weight(alpha, beta):
    """Weight left for the prediction score; exactly 0 when alpha + beta == 1."""
    check_weights(alpha, beta)
    return max(0.0, 1.0 - (alpha + beta))


def matching_score(iou, s_dcons, s_pred, alpha=0.8, beta=0.2):
    return alpha * iou + beta * s_dcons + prediction_weight(alpha, beta) * s_pred


def hungarian(scores):
    """Maximum-total one-to-one assignment for a (gts x candidates) matrix.

    Shortest-augmenting-path Hungarian method with row/column potentials.
    Rows beyond the number of columns stay unmatched.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("score matrix must be 2-D")
    n_gt, n_cand = s.shape
    if n_gt == 0 or n_cand == 0:
        return Assignment((), tuple(range(n_gt)))
    if not np.all(np.isfinite(s)):
        raise ValueError("score matrix must be finite")
    transposed = n_gt > n_cand
    cost = (-s.T if transposed else -s).tolist()
    n, m = len(cost), len(cost[0])

    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row (1-based) matched to column j
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            delta, j1 = inf, 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = []
    for j in range(1, m + 1):
        if p[j]:
            r, c = p[j] - 1, j - 1
            gt, cand = (c, r) if transposed else (r, c)
            pairs.append((gt, cand, float(s[gt, cand])))
    pairs.sort()
    matched = {g for g, _, _ in pairs}
    return Assignment(tuple(pairs), tuple(g for g in range(n_gt) if g not in matched))


@dataclass(frozen=True)
class PseudoLabel:
    mask: np.ndarray  # binary
    score: float
    candidate: int


def score_matrix(gt_boxes, candidates, pixel_sim, cfg):
    out = np.zeros((len(gt_boxes), len(candidates)))
    for j, cand in enumerate(candidates):
        s_dc = depth_consistency_score(cand.mask_prob, pixel_sim, cfg.tau_d) if cfg.beta > 0 else 0.0
        for i, box in enumerate(gt_boxes):
            out[i, j] = matching_score(box_iou(tuple(box), cand.box), s_dc, cand.pred_score,
                                       cfg.alpha, cfg.beta)
    return out


def assign_pseudo_masks(gt_boxes, candidates, pixel_sim, cfg=MatchConfig()):
    """Per ground-truth box: a reliable binary pseudo mask or None."""
    result = [None] * len(gt_boxes)
    if not candidates:
        return result
    scores = score_matrix(gt_boxes, candidates, pixel_sim, cfg)
    for gt, cand, score in hungarian(scores).pairs:
        if score > cfg.tau_m:
            result[gt] = PseudoLabel(candidates[cand].mask_prob > 0.5, score, cand)
    return result
