"""``dgmask`` command line: gen, train, eval, gradcheck, render, ablate.

Human-readable progress goes to stdout; every machine-readable result is a
file under ``--out``. On failure the last stderr line is a single JSON
object ``{"status": "error", "code": N, "kind": ..., "message": ...}``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

import argparse
import dataclasses
import datetime
import json
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, TrainConfig, build_config, parse_config_text, parse_value
from .scene import (
    SUITES,
    AnnotationError,
    DepthNoise,
    SceneConfig,
    SceneGenerationError,
    generate_suite,
    load_eval_masks,
    load_train_scenes,
    write_dataset,
)
from .trainer import CheckpointError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "DGMASK_THREADS"
MANIFEST = "manifest.json"


class CommandError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise CommandError(EXIT_INVALID, "OutputError", f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise CommandError(EXIT_INVALID, "OutputError",
                           f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, command, config_path, resolved, **extra):
    doc = {"command": command, "config_file": str(config_path) if config_path else None,
           "resolved_config": resolved, "out": str(out), "started": _now(), **extra}
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _finish_manifest(out, doc, **extra):
    doc.update(finished=_now(), **extra)
    (out / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _overrides(pairs):
    values = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = parse_value(raw)
    return values


def _default_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# gen

_NOISE_KEYS = {f.name for f in dataclasses.fields(DepthNoise)}
_SCENE_KEYS = {f.name for f in dataclasses.fields(SceneConfig)} - {"depth_noise"}


def scene_config(base, values):
    scene, noise = {}, {}
    for key, value in values.items():
        if key in _NOISE_KEYS:
            noise[key] = value
        elif key in _SCENE_KEYS:
            scene[key] = tuple(value) if isinstance(value, list) else value
        else:
            raise ConfigError(f"unknown scene config key {key!r}")
    if noise:
        scene["depth_noise"] = dataclasses.replace(base.depth_noise, **noise)
    return dataclasses.replace(base, **scene)


def cmd_gen(args):
    values = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    suite = values.pop("suite", args.suite)
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    base, default_count = SUITES[suite]
    count = args.num_scenes if args.num_scenes is not None else values.pop("num_scenes", default_count)
    values.pop("num_scenes", None)
    seed = args.seed if args.seed is not None else values.pop("seed", 7)
    values.pop("seed", None)
    cfg = scene_config(base, values)
    if int(count) < 0:
        raise ConfigError("--num-scenes must be >= 0")
    out = _prepare_out(args.out, args.force)
    resolved = {"suite": suite, "num_scenes": int(count), "seed": int(seed),
                **json.loads(json.dumps(dataclasses.asdict(cfg)))}
    manifest = _write_manifest(out, "gen", args.config, resolved)
    scenes = generate_suite(cfg, int(count), int(seed))
    write_dataset(scenes, out)
    n_inst = sum(len(s.instances) for s in scenes)
    _finish_manifest(out, manifest)
    print(f"wrote {len(scenes)} scenes with {n_inst} instances to {out}")


# ---------------------------------------------------------------------------
# train

def resolve_train_config(args):
    from .config import load_preset

    base = load_preset(args.preset) if args.preset else TrainConfig()
    file_values = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return build_config(file_values, overrides, base=base)


def cmd_train(args):
    from .trainer import load_checkpoint, save_checkpoint, train

    cfg = resolve_train_config(args)
    threads = args.threads or _default_threads()
    dataset = load_train_scenes(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    out = _prepare_out(args.out, args.force)
    manifest = _write_manifest(out, "train", args.config, cfg.to_dict(), data=str(args.data),
                               preset=args.preset, threads=threads)
    t0 = time.perf_counter()
    ckpt, report = train(dataset, cfg, threads=threads, resume=resume, stop_step=args.stop_step)
    save_checkpoint(ckpt, out / "checkpoint.dbck")
    (out / "report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    _finish_manifest(out, manifest, wall_clock_seconds=time.perf_counter() - t0)
    print(f"trained {len(dataset)} scenes to step {ckpt.step}; checkpoint in {out}")


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args):
    from .evalmetrics import emit_csv, emit_report, evaluate
    from .trainer import load_checkpoint, predict_masks

    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_train_scenes(args.data)
    gts = load_eval_masks(args.data)
    if len(dataset) != len(ckpt.scenes) or len(gts) != len(dataset):
        raise CheckpointError("checkpoint, dataset and eval masks disagree on the number of scenes")
    out = _prepare_out(args.out, args.force)
    manifest = _write_manifest(out, "eval", None, ckpt.config.to_dict(),
                               checkpoint=str(args.checkpoint), data=str(args.data))
    t0 = time.perf_counter()
    probs = []
    for sc, state in zip(dataset, ckpt.scenes):
        if state.params.shape[0] != len(sc.boxes):
            raise CheckpointError(f"scene {sc.name}: checkpoint has {state.params.shape[0]} heads "
                                  f"for {len(sc.boxes)} boxes")
        probs.append(predict_masks(sc, state.params, ckpt.config))
    report = evaluate([sc.name for sc in dataset], probs, gts,
                      [sc.categories for sc in dataset],
                      traces=[s.trace for s in ckpt.scenes], config=ckpt.config.to_dict(),
                      seeds=[ckpt.config.seed], wall_clock=time.perf_counter() - t0)
    emit_report(report, out / "metrics.json")
    emit_csv(report, out / "metrics.csv")
    _finish_manifest(out, manifest)
    print(f"AP {report.ap:.3f}  AP50 {report.ap50:.3f}  AP75 {report.ap75:.3f}  "
          f"mean IoU {report.mean_iou():.3f}")


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args):
    from .gradcheck import grad_check

    out = _prepare_out(args.out, args.force)
    manifest = _write_manifest(out, "gradcheck", None, {"cases": args.cases, "seed": args.seed})
    report = grad_check(n_cases=args.cases, seed=args.seed)
    (out / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _finish_manifest(out, manifest)
    for name, res in report.terms.items():
        print(f"{name:16s} {'ok' if res.passed else 'FAIL':4s} max rel err {res.max_rel_error:.2e}")
    if not report.passed:
        failed = [k for k, r in report.terms.items() if not r.passed]
        raise CommandError(EXIT_NUMERIC, "GradCheckFailure", f"terms failed: {','.join(failed)}")


# ---------------------------------------------------------------------------
# render

def cmd_render(args):
    from .render import render_scene
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_train_scenes(args.data)
    if len(dataset) != len(ckpt.scenes):
        raise CheckpointError("checkpoint and dataset disagree on the number of scenes")
    out = _prepare_out(args.out, args.force)
    manifest = _write_manifest(out, "render", None, ckpt.config.to_dict(),
                               checkpoint=str(args.checkpoint), data=str(args.data))
    for sc, state in zip(dataset, ckpt.scenes):
        render_scene(sc, state, ckpt.config, out / f"{sc.name}.png")
    _finish_manifest(out, manifest)
    print(f"rendered {len(dataset)} overlays to {out}")


# ---------------------------------------------------------------------------
# ablate

def cmd_ablate(args):
    from .ablation import run_ablation

    cfg = resolve_train_config(args)
    threads = args.threads or _default_threads()
    out = _prepare_out(args.out, args.force)
    manifest = _write_manifest(out, "ablate", args.config, cfg.to_dict(), suite=args.suite,
                               seeds=args.seeds)
    result = run_ablation(tuple(args.seeds), cfg, args.suite, args.num_scenes, threads)
    (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _finish_manifest(out, manifest)
    print(f"box-only {result['box_only']:.3f}  depth-guided {result['depth_guided']:.3f}  "
          f"pseudo IoU: match score {result['match_score']:.3f}  IoU only {result['iou_only']:.3f}")


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dgmask", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", help="key = value file with scene settings")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--suite", default="easy", choices=sorted(SUITES))
    g.add_argument("--num-scenes", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    def training_flags(q):
        q.add_argument("--config", help="key = value training config file")
        q.add_argument("--preset", help="start from a shipped preset")
        q.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config value (repeatable)")
        q.add_argument("--seed", type=int)
        q.add_argument("--threads", type=int,
                       help=f"worker threads (default ${THREADS_ENV} or 1)")
        q.add_argument("--out", required=True)
        q.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train mask heads on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--resume", help="continue from a checkpoint written with the same config")
    t.add_argument("--stop-step", type=int, help="stop early (checkpoint can be resumed)")
    training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint against held-out masks")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    gc.add_argument("--out", required=True)
    gc.add_argument("--cases", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--force", action="store_true")
    gc.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("render", help="write per-scene PNG overlays")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_render)

    a = sub.add_parser("ablate", help="paired box-only / depth-guided and matching runs")
    a.add_argument("--suite", default="hard", choices=sorted(SUITES))
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    a.add_argument("--num-scenes", type=int)
    training_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def _fail(code, kind, message):
    print(json.dumps({"status": "error", "code": code, "kind": kind, "message": str(message)}),
          file=sys.stderr)
    return code


def main(argv=None):
    from .objective import NumericalError

    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CommandError as exc:
        return _fail(exc.code, exc.kind, exc)
    except (NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, type(exc).__name__, exc)
    except (ConfigError, AnnotationError, CheckpointError, SceneGenerationError,
            FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as exc:
        return _fail(EXIT_INVALID, type(exc).__name__, exc)
    except ValueError as exc:
        return _fail(EXIT_INVALID, type(exc).__name__, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
