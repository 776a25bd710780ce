"""scikit-learn style wrapper around the trainer.

Mask heads are fitted per box, so the estimator is transductive: ``predict``
only accepts the scenes it was fitted on (matched by name and boxes).
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import TrainConfig
from .evalmetrics import mask_iou
from .scene import TrainScene
from .trainer import predict_masks, train


def check_scenes(X):
    """Validate a sequence of TrainScene-like objects; returns a list."""
    if isinstance(X, TrainScene):
        X = [X]
    scenes = list(X)
    for k, sc in enumerate(scenes):
        image = np.asarray(getattr(sc, "image", None))
        depth = np.asarray(getattr(sc, "pseudo_depth", None))
        boxes = np.asarray(getattr(sc, "boxes", np.zeros((0, 4))))
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"scene {k}: image must be (H, W, 3), got {image.shape}")
        if depth.shape != image.shape[:2]:
            raise ValueError(f"scene {k}: pseudo_depth shape {depth.shape} != image {image.shape[:2]}")
        if not (np.all(np.isfinite(image)) and np.all(np.isfinite(depth))):
            raise ValueError(f"scene {k}: non-finite pixel values")
        if boxes.size and (boxes.ndim != 2 or boxes.shape[1] != 4):
            raise ValueError(f"scene {k}: boxes must be (n, 4)")
    return scenes


class DepthGuidedSegmenter(BaseEstimator):
    """Box-supervised mask heads with depth guidance and self-distillation.

    Hyperparameters not exposed here can be set through ``config``, a base
    :class:`TrainConfig` that the explicit arguments override.
    """

    def __init__(self, total_steps=400, lr=0.2, gamma=4.0, tau_d=0.5, tau_m=0.8, alpha=0.8,
                 beta=0.2, use_cons=True, use_depth=True, use_distill=True, seed=0, threads=1,
                 config=None):
        self.total_steps = total_steps
        self.lr = lr
        self.gamma = gamma
        self.tau_d = tau_d
        self.tau_m = tau_m
        self.alpha = alpha
        self.beta = beta
        self.use_cons = use_cons
        self.use_depth = use_depth
        self.use_distill = use_distill
        self.seed = seed
        self.threads = threads
        self.config = config

    def train_config(self):
        base = self.config or TrainConfig()
        changes = dict(total_steps=self.total_steps, lr=self.lr, gamma=self.gamma, tau_d=self.tau_d,
                       tau_m=self.tau_m, alpha=self.alpha, beta=self.beta, use_cons=self.use_cons,
                       use_depth=self.use_depth, use_distill=self.use_distill, seed=self.seed)
        if self.total_steps != base.total_steps:
            # keep the schedule proportional when only the length changes
            f = self.total_steps / base.total_steps
            changes["decay_steps"] = tuple(int(s * f) for s in base.decay_steps)
            for name in ("distill_start", "pairwise_start", "pairwise_warmup", "box_prior_steps",
                         "probe_steps"):
                changes[name] = int(getattr(base, name) * f)
        return base.replace(**changes)

    def fit(self, X, y=None):
        scenes = check_scenes(X)
        cfg = self.train_config()
        self.checkpoint_, self.report_ = train(scenes, cfg, threads=self.threads)
        self._keys = [self._key(sc) for sc in scenes]
        return self

    @staticmethod
    def _key(scene):
        return (scene.name, np.asarray(scene.boxes, dtype=np.int64).tobytes())

    def predict_proba(self, X):
        check_is_fitted(self, "checkpoint_")
        out = []
        for sc in check_scenes(X):
            try:
                k = self._keys.index(self._key(sc))
            except ValueError:
                raise ValueError(f"scene {sc.name!r} was not part of fit()") from None
            out.append(predict_masks(sc, self.checkpoint_.scenes[k].params, self.checkpoint_.config))
        return out

    def predict(self, X):
        """Binary masks per scene, one per box."""
        return [[p > 0.5 for p in probs] for probs in self.predict_proba(X)]

    def fit_predict(self, X, y=None):
        return self.fit(X, y).predict(X)

    def score(self, X, y):
        """Mean mask IoU against ``y``: per scene, one ground-truth mask per box."""
        pred = self.predict(X)
        ious = [mask_iou(p, g) for ps, gs in zip(pred, y) for p, g in zip(ps, gs)]
        return float(np.mean(ious)) if ious else float("nan")
