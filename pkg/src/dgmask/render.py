"""Per-scene overlay images: final-mask contours, pseudo vs final, depth heatmap."""

import numpy as np
from matplotlib import colormaps
from scipy import ndimage

from .distill import TeacherState, pseudo_labels
from .imagegrid import write_png
from .matching import MatchConfig
from .objective import SceneContext
from .trainer import predict_masks

PALETTE = np.array([
    [0.90, 0.10, 0.10], [0.10, 0.75, 0.20], [0.15, 0.35, 0.95],
    [0.95, 0.75, 0.05], [0.80, 0.20, 0.85], [0.05, 0.80, 0.85],
])


def contour(mask):
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def contour_panel(image, masks):
    out = np.array(image, dtype=np.float64)
    for k, m in enumerate(masks):
        out[contour(m)] = PALETTE[k % len(PALETTE)]
    return out


def agreement_panel(image, pseudo, final):
    """Grey image; white where both agree, green final only, magenta pseudo only."""
    lum = np.asarray(image, dtype=np.float64).mean(axis=2, keepdims=True)
    out = np.repeat(0.35 * lum, 3, axis=2)
    for p, f in zip(pseudo, final):
        if p is None:
            p = np.zeros_like(f)
        out[p & f] = (1.0, 1.0, 1.0)
        out[f & ~p] = (0.1, 0.85, 0.2)
        out[p & ~f] = (0.9, 0.1, 0.8)
    return out


def depth_panel(depth):
    return colormaps["viridis"](np.clip(depth, 0.0, 1.0))[..., :3]


def render_scene(scene, state, cfg, path):
    final = [p > 0.5 for p in predict_masks(scene, state.params, cfg)]
    ctx = SceneContext(scene, cfg)
    keys = [(i, a) for i, a in enumerate(ctx.anchors())]
    teacher_params = state.teacher if state.teacher is not None else state.params
    pseudo = []
    if keys:
        teacher = TeacherState.from_student(keys, teacher_params, cfg.ema_rate)
        labels, _ = pseudo_labels(scene, teacher, ctx.view().depth_pixel_sim,
                                  MatchConfig(cfg.alpha, cfg.beta, cfg.tau_d, cfg.tau_m),
                                  cfg.anchor_stride, ctx.teacher_view())
        pseudo = [None if lb is None else lb.mask for lb in labels]
    h = scene.image.shape[0]
    gap = np.ones((h, 2, 3))
    panels = [contour_panel(scene.image, final), gap, agreement_panel(scene.image, pseudo, final),
              gap, depth_panel(scene.pseudo_depth)]
    write_png(path, np.concatenate(panels, axis=1))
