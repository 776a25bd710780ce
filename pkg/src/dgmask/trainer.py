"""Two-phase training driver and DBCK1 checkpoints.

Steps before ``distill_start`` optimise the box/depth objective alone; from
``distill_start`` on, an EMA teacher (initialised as a copy of the student)
supplies reliable pseudo masks for an extra dice term. Scenes are
independent, so they run in a thread pool; every scene owns its RNG stream
and nothing is reduced across scenes, which keeps results identical for
any worker count.
"""

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import maskhead
from .config import TrainConfig
from .distill import TeacherState, distill_step, ema_update
from .losses import total_loss
from .objective import SceneContext, instance_objective, scene_objective

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DBCK1"


class CheckpointError(ValueError):
    pass


@dataclass
class SceneState:
    name: str
    params: np.ndarray  # (n_instances, 178)
    velocity: np.ndarray
    rng_state: dict
    teacher: np.ndarray = None
    trace: list = field(default_factory=list)

    def copy(self):
        return SceneState(self.name, self.params.copy(), self.velocity.copy(),
                          json.loads(json.dumps(self.rng_state)),
                          None if self.teacher is None else self.teacher.copy(),
                          list(self.trace))


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    scenes: list  # SceneState per scene

    def student_params(self, index):
        return self.scenes[index].params


def _scene_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), 0]))


def init_state(scene, index, cfg, restart=0):
    n = len(scene.boxes)
    params = np.zeros((n, maskhead.N_PARAMS))
    for i in range(n):
        key = [int(cfg.seed), int(index), 1, i] + ([int(restart)] if restart else [])
        rng = np.random.default_rng(np.random.SeedSequence(key))
        params[i] = maskhead.init_params(rng, cfg.init_scale, cfg.init_mask_bias)
    return SceneState(scene.name, params, np.zeros_like(params),
                      _scene_rng(cfg.seed, index).bit_generator.state)


def student_shape(rng, shape, cfg):
    s = rng.uniform(cfg.student_scale_min, 1.0)
    h, w = shape
    return (max(8, int(round(h * s))), max(8, int(round(w * s))))


def _keys(ctx):
    return [(i, a) for i, a in enumerate(ctx.anchors())]


def run_scene(scene, state, cfg, start, stop, ctx=None):
    """Advance one scene from ``start`` to ``stop``; returns the new state."""
    state = state.copy()
    ctx = ctx or SceneContext(scene, cfg)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    keys = _keys(ctx)
    teacher = None
    if state.teacher is not None:
        teacher = TeacherState.from_student(keys, state.teacher, cfg.ema_rate)

    for step in range(start, stop):
        lr = cfg.lr_at(step)
        shape = student_shape(rng, ctx.native_shape, cfg)
        params = state.params
        n_reliable = 0
        if cfg.distilling(step) and len(keys):
            phase = "distill"
            if teacher is None:
                teacher = TeacherState.from_student(keys, params, cfg.ema_rate)
            terms, grads, labels = distill_step(ctx, params, teacher, cfg, shape, step)
            n_reliable = sum(lb is not None for lb in labels)
        else:
            phase = "base"
            terms, grads = scene_objective(ctx.view(shape), params, cfg, None, step, scene.name)
        for i, g in enumerate(grads):
            if cfg.weight_decay > 0:
                g = g + cfg.weight_decay * params[i]
            if cfg.grad_clip > 0:
                norm = np.sqrt(g @ g)
                if norm > cfg.grad_clip:
                    g = g * (cfg.grad_clip / norm)
            state.velocity[i] = cfg.momentum * state.velocity[i] + g
            params[i] = params[i] - lr * state.velocity[i]
        if teacher is not None and phase == "distill":
            teacher = ema_update(teacher, dict(zip(keys, params)))
        row = {"step": step, "phase": phase, "lr": lr, "size": list(shape),
               "n_reliable": n_reliable, "total": total_loss(terms, phase, cfg.gamma)}
        row.update(terms.as_dict())
        state.trace.append(row)

    state.rng_state = rng.bit_generator.state
    if teacher is not None:
        state.teacher = np.array([teacher.params[k] for k in keys]).reshape(state.params.shape)
    return state


def probe_scene(scene, index, cfg, ctx=None):
    """Train ``cfg.restarts`` independent initialisations for ``probe_steps``
    and keep, per instance, the head with the lowest loss at native size."""
    ctx = ctx or SceneContext(scene, cfg)
    runs = [run_scene(scene, init_state(scene, index, cfg, r), cfg, 0, cfg.probe_steps, ctx)
            for r in range(cfg.restarts)]
    view = ctx.view()
    weight = cfg.pairwise_weight(cfg.probe_steps)
    best = runs[0].copy()
    best.trace = []
    for r, run in enumerate(runs):
        best.trace.extend(dict(row, phase="probe", restart=r) for row in run.trace)
    for i in range(ctx.n_instances):
        losses = [instance_objective(view, i, run.params[i], cfg, pairwise_weight=weight)[0].total()
                  for run in runs]
        k = int(np.argmin(losses))
        best.params[i] = runs[k].params[i]
        best.velocity[i] = runs[k].velocity[i]
    return best


def train(dataset, cfg, threads=1, resume=None, stop_step=None):
    """Train every scene's instance heads; returns ``(checkpoint, report)``."""
    stop = cfg.total_steps if stop_step is None else min(int(stop_step), cfg.total_steps)
    if resume is not None:
        if resume.config.digest() != cfg.digest():
            raise CheckpointError("checkpoint was written with a different config")
        if len(resume.scenes) != len(dataset):
            raise CheckpointError("checkpoint and dataset disagree on the number of scenes")
        start, states = resume.step, resume.scenes
    else:
        start = 0
        states = [init_state(sc, i, cfg) for i, sc in enumerate(dataset)]

    probing = start == 0 and cfg.restarts > 1
    if probing and stop < cfg.probe_steps:
        raise ValueError(f"stop_step {stop} falls inside the {cfg.probe_steps}-step probe phase")

    def job(i):
        ctx = SceneContext(dataset[i], cfg)
        if probing:
            return run_scene(dataset[i], probe_scene(dataset[i], i, cfg, ctx), cfg,
                             cfg.probe_steps, stop, ctx)
        return run_scene(dataset[i], states[i], cfg, start, stop, ctx)

    # single-threaded BLAS keeps every matrix product's summation order fixed
    with threadpool_limits(limits=1, user_api="blas"):
        if threads > 1 and len(dataset) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                new_states = list(pool.map(job, range(len(dataset))))
        else:
            new_states = [job(i) for i in range(len(dataset))]
    ckpt = Checkpoint(cfg, max(start, stop), new_states)
    return ckpt, training_report(ckpt)


def training_report(ckpt):
    return {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.digest(),
        "seed": ckpt.config.seed,
        "step": ckpt.step,
        "scenes": [{"name": s.name, "trace": s.trace} for s in ckpt.scenes],
    }


# ---------------------------------------------------------------------------
# DBCK1 checkpoint files
#
#   b"DBCK1" | uint64 LE header length | JSON header | float64 LE arrays
#
# The header records config, config hash, step and per-scene metadata (RNG
# state, loss trace, array shapes); arrays follow in scene order as
# params, velocity and, when present, teacher.


def save_checkpoint(ckpt, path):
    header = {
        "format": "DBCK1",
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.digest(),
        "step": ckpt.step,
        "scenes": [
            {"name": s.name, "n_instances": int(s.params.shape[0]), "rng_state": s.rng_state,
             "has_teacher": s.teacher is not None, "trace": s.trace}
            for s in ckpt.scenes
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for s in ckpt.scenes:
            arrays = [s.params, s.velocity] + ([s.teacher] if s.teacher is not None else [])
            for arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if data[:5] != CKPT_MAGIC or len(data) < 13:
        raise CheckpointError(f"{path}: not a DBCK1 checkpoint")
    (hlen,) = struct.unpack("<Q", data[5:13])
    try:
        header = json.loads(data[13:13 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    cfg = TrainConfig(**header["config"])
    if cfg.digest() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    offset = 13 + hlen
    width = maskhead.N_PARAMS

    def take(n):
        nonlocal offset
        size = n * width * 8
        if offset + size > len(data):
            raise CheckpointError(f"{path}: truncated parameter block")
        arr = np.frombuffer(data, dtype="<f8", count=n * width, offset=offset).astype(np.float64)
        offset += size
        return arr.reshape(n, width)

    scenes = []
    for meta in header["scenes"]:
        n = meta["n_instances"]
        params, velocity = take(n), take(n)
        teacher = take(n) if meta["has_teacher"] else None
        scenes.append(SceneState(meta["name"], params, velocity, meta["rng_state"], teacher,
                                 meta["trace"]))
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    return Checkpoint(cfg, header["step"], scenes)


def predict_masks(scene, params, cfg=None):
    """Final student mask probabilities at native resolution, one per box."""
    ctx = SceneContext(scene, cfg or TrainConfig())
    view = ctx.view()
    return [maskhead.forward((view.inputs[i], view.shape), params[i], keep_cache=False).mask_prob
            for i in range(len(params))]
