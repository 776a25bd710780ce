import numpy as np
import pytest

from dgmask import maskhead
from dgmask.config import TrainConfig
from dgmask.distill import (
    TeacherState,
    distill_step,
    ema_update,
    lattice_anchors,
    teacher_candidates,
    teacher_view,
)
from dgmask.losses import total_loss
from dgmask.matching import MatchConfig, assign_pseudo_masks
from dgmask.objective import SceneContext, instance_objective, mean_terms, scene_objective


def _teacher(rng, keys, rate=0.999):
    return TeacherState.from_student(keys, [rng.normal(size=178) for _ in keys], rate)


def test_ema_fixed_point(rng):
    t = _teacher(rng, ["a", "b"])
    new = ema_update(t, dict(t.params))
    for k in t.params:
        np.testing.assert_allclose(new.params[k], t.params[k], rtol=1e-15, atol=1e-15)


def test_ema_one_step():
    t = TeacherState({"a": np.ones(3)}, 0.999)
    assert np.all(ema_update(t, {"a": np.zeros(3)}).params["a"] == 0.999)


@pytest.mark.parametrize("k", [1, 10, 1000])
def test_ema_closed_form(k):
    rng = np.random.default_rng(k)
    t0, s = rng.normal(size=178), rng.normal(size=178)
    t = TeacherState({"a": t0.copy()}, 0.999)
    for _ in range(k):
        t = ema_update(t, {"a": s})
    np.testing.assert_allclose(np.abs(t.params["a"] - s), 0.999**k * np.abs(t0 - s),
                               rtol=1e-12, atol=0)


def test_ema_preserves_keys_and_shapes(rng):
    t = _teacher(rng, [(0, (1, 1)), (1, (3, 4))])
    new = ema_update(t, {k: rng.normal(size=178) for k in t.params})
    assert new.params.keys() == t.params.keys()
    assert all(v.shape == (178,) for v in new.params.values())
    with pytest.raises(KeyError):
        ema_update(t, {(0, (1, 1)): np.zeros(178)})
    with pytest.raises(ValueError):
        ema_update(t, {k: np.zeros(5) for k in t.params})


def test_lattice_small_box_gets_centre():
    assert lattice_anchors((9, 9, 12, 12), 8) == [(10, 10)]


def test_lattice_counts():
    # x in {8, 16}, y in {0, 8}: four lattice points; the centre (13, 5) is off-lattice
    anchors = lattice_anchors((5, 0, 22, 11), 8)
    assert anchors[:4] == [(8, 0), (16, 0), (8, 8), (16, 8)]
    assert anchors[4:] == [(13, 5)]
    # centre on the lattice is not duplicated
    assert lattice_anchors((0, 0, 17, 17), 8) == [(x, y) for y in (0, 8, 16) for x in (0, 8, 16)]


def _ctx(scene, cfg=TrainConfig()):
    return SceneContext(scene, cfg)


def _student(rng, n):
    return np.array([maskhead.init_params(rng, 0.5) for _ in range(n)])


def test_candidates_equal_student_forward(small_train, rng):
    scene = small_train[0]
    ctx = _ctx(scene)
    params = _student(rng, len(scene.boxes))
    keys = list(enumerate(ctx.anchors()))
    teacher = TeacherState.from_student(keys, params)
    cands = teacher_candidates(scene, teacher, 8, teacher_view(scene.image))
    view = ctx.view()
    for i, box in enumerate(scene.boxes):
        own = [c for c in cands if c.source == i and c.anchor == ctx.anchors()[i]]
        assert len(own) == 1
        ref = maskhead.forward((view.inputs[i], view.shape), params[i]).mask_prob
        np.testing.assert_allclose(own[0].mask_prob, ref, rtol=1e-12, atol=1e-15)
    assert len(cands) == sum(len(lattice_anchors(b, 8)) for b in scene.boxes)


def test_filtered_candidates_reduce_to_base(small_train, rng):
    scene = small_train[0]
    cfg = TrainConfig(tau_m=1.0)  # no score can exceed 1
    ctx = _ctx(scene, cfg)
    params = _student(rng, len(scene.boxes))
    teacher = TeacherState.from_student(list(enumerate(ctx.anchors())), params)
    terms, grads, labels = distill_step(ctx, params, teacher, cfg)
    assert labels == [None] * len(scene.boxes)
    base, base_grads = scene_objective(ctx.view(), params, cfg)
    assert total_loss(terms, "distill", cfg.gamma) == total_loss(base, "base")
    for a, b in zip(grads, base_grads):
        assert np.array_equal(a, b)


def test_gamma_zero_is_bitwise_base_step(small_train, rng):
    scene = small_train[1]
    cfg = TrainConfig(gamma=0.0, tau_m=0.0)
    ctx = _ctx(scene, cfg)
    params = _student(rng, len(scene.boxes))
    teacher = TeacherState.from_student(list(enumerate(ctx.anchors())), params)
    terms, grads, labels = distill_step(ctx, params, teacher, cfg)
    assert any(lb is not None for lb in labels)
    base, base_grads = scene_objective(ctx.view(), params, cfg)
    assert total_loss(terms, "distill", 0.0) == total_loss(base, "base")
    for a, b in zip(grads, base_grads):
        assert a.tobytes() == b.tobytes()


def test_teacher_is_not_modified(small_train, rng):
    scene = small_train[0]
    cfg = TrainConfig(tau_m=0.0)
    ctx = _ctx(scene, cfg)
    params = _student(rng, len(scene.boxes))
    teacher = TeacherState.from_student(list(enumerate(ctx.anchors())), params + 0.01)
    before = {k: v.copy() for k, v in teacher.params.items()}
    distill_step(ctx, params, teacher, cfg)
    assert all(np.array_equal(before[k], teacher.params[k]) for k in before)


def test_distill_step_equals_manual_composition(small_train, rng):
    scene = small_train[0]
    cfg = TrainConfig(tau_m=0.0)
    ctx = _ctx(scene, cfg)
    params = _student(rng, len(scene.boxes))
    teacher = TeacherState.from_student(list(enumerate(ctx.anchors())),
                                        params + rng.normal(scale=0.05, size=params.shape))
    terms, grads, _ = distill_step(ctx, params, teacher, cfg)

    view = ctx.view()
    cands = teacher_candidates(scene, teacher, cfg.anchor_stride, teacher_view(scene.image))
    labels = assign_pseudo_masks(scene.boxes, cands, view.depth_pixel_sim,
                                 MatchConfig(cfg.alpha, cfg.beta, cfg.tau_d, cfg.tau_m))
    per, manual = [], []
    for i in range(len(scene.boxes)):
        pm = None if labels[i] is None else labels[i].mask
        t, g, _ = instance_objective(view, i, params[i], cfg, pm)
        per.append(t)
        manual.append(g)
    assert mean_terms(per) == terms
    for a, b in zip(grads, manual):
        assert np.array_equal(a, b)
