"""Per-scene loss assembly: everything a training step needs for one scene.

A :class:`SceneContext` caches the size-dependent pieces (features, edge
graphs, qualifying pixel pairs) so that a student running at a random
scale only pays for each resolution once.
"""

from dataclasses import dataclass

import numpy as np
from skimage.color import rgb2lab

from . import maskhead
from .distill import teacher_view
from .features import attach_rel_coords, box_anchor, build_base_features
from .imagegrid import neighbor_edges, resize_bilinear, resize_nearest
from .losses import (
    LossTerms,
    box_region,
    color_similarity,
    depth_similarity,
    loss_dice,
    loss_instance_depth,
    loss_projection,
    pairwise_from_edges,
    qualifying_edges,
)


class NumericalError(FloatingPointError):
    def __init__(self, step, scene, instance, term):
        self.step, self.scene, self.instance, self.term = step, scene, instance, term
        super().__init__(f"non-finite {term} at step {step}, scene {scene!r}, instance {instance}")


def scale_box(box, sy, sx, shape):
    h, w = shape
    x0, y0, x1, y1 = box
    nx0 = min(int(np.floor(x0 * sx)), w - 1)
    ny0 = min(int(np.floor(y0 * sy)), h - 1)
    nx1 = max(min(int(np.ceil(x1 * sx)), w), nx0 + 1)
    ny1 = max(min(int(np.ceil(y1 * sy)), h), ny0 + 1)
    return (nx0, ny0, nx1, ny1)


@dataclass
class SizedView:
    shape: tuple
    inputs: list  # per instance: (10, N) channels-first features
    boxes: list
    box_masks: list
    color_edges: list  # per instance: (a, b)
    depth_edges: list
    pseudo_depth: np.ndarray
    depth_pixel_sim: np.ndarray


class SceneContext:
    def __init__(self, scene, cfg):
        self.scene = scene
        self.cfg = cfg
        self.native_shape = scene.image.shape[:2]
        self._views = {}
        self._teacher = None

    @property
    def n_instances(self):
        return len(self.scene.boxes)

    def anchors(self):
        return [box_anchor(b) for b in self.scene.boxes]

    def teacher_view(self):
        if self._teacher is None:
            size = self.cfg.teacher_size
            self._teacher = teacher_view(self.scene.image, (size, size) if size else None)
        return self._teacher

    def view(self, shape=None):
        shape = tuple(shape) if shape is not None else self.native_shape
        if shape not in self._views:
            self._views[shape] = self._build(shape)
        return self._views[shape]

    def _build(self, shape):
        cfg, sc = self.cfg, self.scene
        h, w = shape
        H, W = self.native_shape
        image = resize_bilinear(sc.image, h, w)
        depth = resize_bilinear(sc.pseudo_depth, h, w)
        base = build_base_features(image)
        edges = neighbor_edges(h, w, cfg.pairwise_dilation)
        colors = rgb2lab(image) if cfg.color_space == "lab" else image
        csim = color_similarity(colors, edges, cfg.color_theta)
        dsim = depth_similarity(depth, edges, cfg.depth_k)
        inputs, boxes, box_masks, cedges, dedges = [], [], [], [], []
        for box in sc.boxes:
            b = scale_box(tuple(int(v) for v in box), h / H, w / W, shape)
            boxes.append(b)
            inputs.append(attach_rel_coords(base, box_anchor(b)).channels_first())
            box_masks.append(box_region(shape, b))
            region = box_region(shape, b, pad=cfg.region_pad)
            cedges.append(qualifying_edges(csim, cfg.tau_c, region))
            dedges.append(qualifying_edges(dsim, cfg.tau_d, region))
        return SizedView(shape, inputs, boxes, box_masks, cedges, dedges, depth, dsim.pixel_sim)


def instance_objective(view, i, params, cfg, pseudo_mask=None, gamma=None, pairwise_weight=1.0,
                       box_prior_weight=0.0):
    """Loss terms and parameter gradient for one instance head.

    Pairwise terms are reported already scaled by ``pairwise_weight``; the
    box-prior dice (mask against the filled box) by ``box_prior_weight``.
    """
    out = maskhead.forward((view.inputs[i], view.shape), params)
    mask, depth = out.mask_prob, out.depth_pred
    proj, g_mask = loss_projection(mask, view.boxes[i])
    color, cons = 0.0, 0.0
    if pairwise_weight > 0:
        color, g = pairwise_from_edges(mask, *view.color_edges[i])
        color *= pairwise_weight
        g_mask = g_mask + pairwise_weight * g
        if cfg.use_cons:
            cons, g = pairwise_from_edges(mask, *view.depth_edges[i])
            cons *= pairwise_weight
            g_mask = g_mask + pairwise_weight * g
    inst_depth = 0.0
    g_depth = np.zeros_like(depth)
    if cfg.use_depth:
        inst_depth, g_depth = loss_instance_depth(depth, view.pseudo_depth, view.boxes[i])
    prior = 0.0
    if box_prior_weight > 0:
        prior, g = loss_dice(mask, view.box_masks[i].astype(np.float64))
        prior *= box_prior_weight
        g_mask = g_mask + box_prior_weight * g
    dice = 0.0
    gamma = cfg.gamma if gamma is None else gamma
    if pseudo_mask is not None:
        dice, g = loss_dice(mask, pseudo_mask)
        if gamma != 0:
            g_mask = g_mask + gamma * g
    terms = LossTerms(proj, color, cons, inst_depth, dice, prior)
    return terms, maskhead.backward(out, g_mask, g_depth), out


def scene_objective(view, params, cfg, pseudo_masks=None, step=-1, name=""):
    """Mean loss terms over instances and the per-instance gradients."""
    n = len(params)
    pseudo_masks = pseudo_masks or [None] * n
    weight = cfg.pairwise_weight(step) if step >= 0 else 1.0
    prior = cfg.box_prior_weight if 0 <= step < cfg.box_prior_steps else 0.0
    per, grads = [], []
    for i in range(n):
        terms, grad, _ = instance_objective(view, i, params[i], cfg, pseudo_masks[i],
                                            pairwise_weight=weight, box_prior_weight=prior)
        for key, value in terms.as_dict().items():
            if not np.isfinite(value):
                raise NumericalError(step, name, i, key)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(step, name, i, "gradient")
        per.append(terms)
        grads.append(grad)
    return mean_terms(per), grads


def mean_terms(per):
    if not per:
        return LossTerms()
    keys = per[0].as_dict().keys()
    return LossTerms(**{k: float(sum(t.as_dict()[k] for t in per) / len(per)) for k in keys})


def resize_pseudo(pseudo_masks, shape):
    out = []
    for pm in pseudo_masks:
        if pm is None or pm.shape == tuple(shape):
            out.append(pm)
        else:
            out.append(resize_nearest(pm, *shape))
    return out
