"""Paired ablation runs on synthetic suites.

Two checks, both directional:

* box-only vs depth-guided base objective: the same scenes and initial
  weights, trained with and without the depth consistency and instance
  depth terms; compared by mean final-mask IoU;
* matching-score vs IoU-only pseudo masks: one student trained up to the
  distillation start, its weights used as the teacher, candidates
  assigned to boxes with both scoring rules; compared by mean
  pseudo-mask-to-ground-truth IoU.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .distill import TeacherState, teacher_candidates
from .evalmetrics import mask_iou
from .matching import MatchConfig, hungarian, score_matrix
from .objective import SceneContext
from .scene import SUITES, generate_suite
from .trainer import predict_masks, train


def box_only(cfg):
    return cfg.replace(use_cons=False, use_depth=False, use_distill=False)


def depth_guided(cfg):
    return cfg.replace(use_cons=True, use_depth=True, use_distill=False)


def final_ious(scenes, ckpt):
    out = []
    for sc, state in zip(scenes, ckpt.scenes):
        probs = predict_masks(sc.for_training(), state.params, ckpt.config)
        out.extend(mask_iou(p > 0.5, inst.gt_mask) for p, inst in zip(probs, sc.instances))
    return out


def pseudo_mask_ious(scene, teacher_params, cfg, match_cfg):
    """IoU with ground truth of the candidate each box is assigned (no reliability cut)."""
    ts = scene.for_training()
    ctx = SceneContext(ts, cfg)
    keys = [(i, a) for i, a in enumerate(ctx.anchors())]
    teacher = TeacherState.from_student(keys, teacher_params, cfg.ema_rate)
    cands = teacher_candidates(ts, teacher, cfg.anchor_stride, ctx.teacher_view())
    if not cands:
        return []
    scores = score_matrix(ts.boxes, cands, ctx.view().depth_pixel_sim, match_cfg)
    return [mask_iou(cands[c].mask_prob > 0.5, scene.instances[g].gt_mask)
            for g, c, _ in hungarian(scores).pairs]


@dataclass
class SeedResult:
    seed: int
    box_only: list = field(default_factory=list)
    depth_guided: list = field(default_factory=list)
    match_score: list = field(default_factory=list)
    iou_only: list = field(default_factory=list)

    def means(self):
        return {k: float(np.mean(getattr(self, k))) if getattr(self, k) else float("nan")
                for k in ("box_only", "depth_guided", "match_score", "iou_only")}


def run_seed(seed, cfg=None, suite="hard", n_scenes=None, threads=1):
    cfg = (cfg or TrainConfig()).replace(seed=seed)
    config, default_n = SUITES[suite]
    scenes = generate_suite(config, n_scenes or default_n, seed)
    data = [sc.for_training() for sc in scenes]
    res = SeedResult(seed)

    ckpt, _ = train(data, box_only(cfg), threads=threads)
    res.box_only = final_ious(scenes, ckpt)

    arm = depth_guided(cfg)
    at_start, _ = train(data, arm, threads=threads, stop_step=cfg.distill_start)
    full = MatchConfig(cfg.alpha, cfg.beta, cfg.tau_d, cfg.tau_m)
    iou_only = MatchConfig(1.0, 0.0, cfg.tau_d, cfg.tau_m)
    for sc, state in zip(scenes, at_start.scenes):
        res.match_score.extend(pseudo_mask_ious(sc, state.params, arm, full))
        res.iou_only.extend(pseudo_mask_ious(sc, state.params, arm, iou_only))
    ckpt, _ = train(data, arm, threads=threads, resume=at_start)
    res.depth_guided = final_ious(scenes, ckpt)
    return res


def run_ablation(seeds=(0, 1, 2, 3, 4), cfg=None, suite="hard", n_scenes=None, threads=1):
    results = [run_seed(s, cfg, suite, n_scenes, threads) for s in seeds]
    per_seed = [r.means() for r in results]
    diff = [m["depth_guided"] - m["box_only"] for m in per_seed]
    return {
        "seeds": list(seeds),
        "per_seed": per_seed,
        "paired_mean_difference": float(np.mean(diff)),
        "box_only": float(np.mean([m["box_only"] for m in per_seed])),
        "depth_guided": float(np.mean([m["depth_guided"] for m in per_seed])),
        "match_score": float(np.mean([m["match_score"] for m in per_seed])),
        "iou_only": float(np.mean([m["iou_only"] for m in per_seed])),
    }
