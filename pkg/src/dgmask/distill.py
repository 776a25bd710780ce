"""EMA teacher and the self-distillation step."""

from dataclasses import dataclass

import numpy as np

from . import maskhead
from .features import box_anchor, build_base_features
from .imagegrid import resize_bilinear
from .matching import MatchConfig, assign_pseudo_masks, make_candidate


@dataclass(frozen=True)
class TeacherState:
    """EMA copies of the student heads keyed by ``(instance_index, anchor)``."""

    params: dict
    ema_rate: float = 0.999
    input_size: tuple = None  # (H, W) the teacher always runs at; None = native

    @classmethod
    def from_student(cls, keys, student_params, ema_rate=0.999, input_size=None):
        return cls({k: np.array(p, dtype=np.float64) for k, p in zip(keys, student_params)},
                   ema_rate, input_size)


def ema_update(teacher, student, rate=None):
    """``t <- rate * t + (1 - rate) * s`` for every head; returns a new state.

    Evaluated as ``s + rate * (t - s)`` so the gap to a fixed student shrinks
    by exactly ``rate`` per step up to rounding (``1 - rate`` is inexact).
    """
    rate = teacher.ema_rate if rate is None else rate
    if set(student) != set(teacher.params):
        raise KeyError("student and teacher heads have different keys")
    new = {}
    for key, t in teacher.params.items():
        s = np.asarray(student[key], dtype=np.float64)
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for head {key}: {s.shape} vs {t.shape}")
        new[key] = s + rate * (t - s)
    return TeacherState(new, teacher.ema_rate, teacher.input_size)


def lattice_anchors(box, stride=8):
    """Lattice points inside a half-open box plus its centre if off-lattice."""
    x0, y0, x1, y1 = (int(v) for v in box)
    xs = [x for x in range(x0, x1) if x % stride == 0]
    ys = [y for y in range(y0, y1) if y % stride == 0]
    anchors = [(x, y) for y in ys for x in xs]
    centre = box_anchor(box)
    if centre not in anchors:
        anchors.append(centre)
    return anchors


@dataclass
class TeacherView:
    """Teacher-resolution features for one scene, built once and reused."""

    base: np.ndarray  # (H, W, 8)
    scale: tuple  # (sy, sx) from native to teacher pixels
    native_shape: tuple

    def __post_init__(self):
        h, w = self.base.shape[:2]
        self.base_cf = np.ascontiguousarray(self.base.reshape(h * w, -1).T)
        ys, xs = np.mgrid[0:h, 0:w]
        self.xs = xs.ravel().astype(np.float64)
        self.ys = ys.ravel().astype(np.float64)
        self.half_diag = np.hypot(h, w) / 2.0

    def coords(self, anchor):
        ax, ay = anchor
        return np.stack([np.clip((self.xs - ax) / self.half_diag, -1.0, 1.0),
                         np.clip((self.ys - ay) / self.half_diag, -1.0, 1.0)])


def teacher_view(image, input_size=None):
    h, w = image.shape[:2]
    if input_size is None or tuple(input_size) == (h, w):
        return TeacherView(build_base_features(image), (1.0, 1.0), (h, w))
    th, tw = input_size
    big = resize_bilinear(image, th, tw)
    return TeacherView(build_base_features(big), (th / h, tw / w), (h, w))


def teacher_candidates(scene, teacher, stride=8, view=None):
    """One candidate per lattice anchor inside each box, from that box's teacher head."""
    view = view or teacher_view(scene.image, teacher.input_size)
    h, w = view.native_shape
    th, tw = view.base.shape[:2]
    sy, sx = view.scale
    out = []
    for key in sorted(teacher.params, key=lambda k: k[0]):
        idx = key[0]
        box = scene.boxes[idx]
        params = teacher.params[key]
        base_part = maskhead.unpack(params)["w1"][:, :-2] @ view.base_cf
        for ax, ay in lattice_anchors(box, stride):
            t_anchor = (min(int(ax * sx), tw - 1), min(int(ay * sy), th - 1))
            res = maskhead.forward_split(base_part, view.coords(t_anchor), params, (th, tw))
            mask, depth = res.mask_prob, res.depth_pred
            if (th, tw) != (h, w):
                mask = resize_bilinear(mask, h, w)
                depth = resize_bilinear(depth, h, w)
            out.append(make_candidate(mask, depth, (ax, ay), source=idx))
    return out


def pseudo_labels(scene, teacher, depth_pixel_sim, match_cfg=MatchConfig(), stride=8, view=None):
    cands = teacher_candidates(scene, teacher, stride, view)
    return assign_pseudo_masks(scene.boxes, cands, depth_pixel_sim, match_cfg), cands


def distill_step(ctx, student_params, teacher, cfg, shape=None, step=-1):
    """Base losses plus reliable dice against teacher pseudo masks.

    Returns ``(terms, grads, labels)``; ``labels`` holds the native-size
    pseudo labels (or None per instance) so callers can inspect them.
    """
    from .objective import resize_pseudo, scene_objective

    native = ctx.view()
    match_cfg = MatchConfig(cfg.alpha, cfg.beta, cfg.tau_d, cfg.tau_m)
    labels, _ = pseudo_labels(ctx.scene, teacher, native.depth_pixel_sim, match_cfg,
                              cfg.anchor_stride, view=ctx.teacher_view())
    view = ctx.view(shape)
    masks = resize_pseudo([None if lb is None else lb.mask for lb in labels], view.shape)
    terms, grads = scene_objective(view, student_params, cfg, masks, step, ctx.scene.name)
    return terms, grads, labels
