"""Command-line entry point: ``ovsplat <subcommand> [options] [--key value ...]``.

Unknown ``--key value`` pairs override config fields (scene or training,
whichever owns the key); ``--config FILE`` supplies a flat ``key = value``
file read first. Exit codes: 0 success, 1 usage or validation error,
2 numeric failure (divergence, corrupt checkpoint).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import apply_overrides, parse_value, read_config
from .diffcore import NonFiniteError
from .synthscene import SceneConfig, build_pack, load_pack, save_pack
from .trainer import (CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint,
                      save_checkpoint, train_stage1, train_stage2)

__all__ = ["main", "build_parser", "UsageError", "ENV_OUT"]

ENV_OUT = "OVSPLAT_OUT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _version() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              cwd=Path(__file__).parent, capture_output=True, text=True,
                              timeout=5, check=False).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def _default_out(name: str) -> Path:
    return Path(os.environ.get(ENV_OUT, "runs")) / name


def _parse_overrides(extra: list[str]) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            value = extra[i + 1]
            i += 2
        else:
            raise UsageError(f"option {tok} needs a value")
        out[key.replace("-", "_")] = parse_value(value)
    return out


def _split(values: dict, *owners) -> list:
    """Apply each key to whichever dataclass owns it; unknown keys are an error."""
    fields = [{f.name for f in dataclasses.fields(o)} for o in owners]
    unknown = [k for k in values if not any(k in fs for fs in fields)]
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return [apply_overrides(o, {k: v for k, v in values.items() if k in fs})
            for o, fs in zip(owners, fields)]


def _resolve(args, extra) -> tuple[SceneConfig, TrainConfig]:
    values = read_config(args.config) if args.config else {}
    values.update(_parse_overrides(extra))
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        values["iters1" if args.command == "train1" else "iters2"] = args.iters
    scene, train = _split(values, SceneConfig(), TrainConfig())
    return scene, train


def _prepare_out(path: Path, force: bool = False, must_be_empty: bool = False) -> Path:
    if not path.parent.exists():
        raise UsageError(f"parent directory {path.parent} does not exist")
    if must_be_empty and path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force)")
    path.mkdir(exist_ok=True)
    return path


def _write_manifest(out: Path, args, scene: SceneConfig, train: TrainConfig, files: dict) -> None:
    manifest = {
        "command": args.command,
        "version": _version(),
        "seed": train.seed,
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "scene_config": dataclasses.asdict(scene),
        "train_config": dataclasses.asdict(train),
        "inputs": {k: str(v) for k, v in vars(args).items() if k not in ("func",) and v is not None},
        "outputs": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _limit_threads(n: int | None):
    if n is None:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, extra) -> int:
    scene, train = _resolve(args, extra)
    out = _prepare_out(Path(args.out or _default_out("scene")), args.force, must_be_empty=True)
    _write_manifest(out, args, scene, train, {"scene": "scene.json"})
    pack = build_pack(scene)
    save_pack(pack, out)
    _log(args, f"wrote {len(pack.train_views)} training and {len(pack.test_views)} held-out views to {out}")
    return EXIT_OK


def _load_scene(args):
    if not args.scene:
        raise UsageError("--scene is required")
    return load_pack(args.scene)


def _progress(args, every: int = 100):
    def report(step, loss):
        if not args.quiet and step % every == 0:
            print(f"step {step:6d}  loss {loss:.6f}", file=sys.stderr)
    return report


def cmd_train1(args, extra) -> int:
    scene_cfg, train = _resolve(args, extra)
    pack = _load_scene(args)
    out = _prepare_out(Path(args.out or _default_out("train1")))
    _write_manifest(out, args, pack.config, train,
                    {"checkpoint": "stage1.gala", "losses": "losses_stage1.csv"})
    model, log = train_stage1(pack, train, progress=_progress(args))
    save_checkpoint(model, out / "stage1.gala")
    log.write(out / "losses_stage1.csv")
    _log(args, f"stage 1 done: {out / 'stage1.gala'}")
    return EXIT_OK


def _load_model(args, min_stage: int):
    if not args.ckpt:
        raise UsageError("--ckpt is required")
    path = Path(args.ckpt)
    if not path.exists():
        raise UsageError(f"checkpoint {path} not found")
    model = load_checkpoint(path)
    if model.stage < min_stage:
        raise UsageError(f"{path} is a stage-{model.stage} checkpoint; stage {min_stage} needed")
    return model


STAGE2_KEYS = {"iters2", "lambda_ent", "lr_codebook", "n_codes", "lift_hidden", "strict_linear",
               "use_attention", "use_residual", "use_lift", "d_lang"}


def _stage2_overrides(args, extra, train: TrainConfig) -> dict:
    """Stage-2 fields the user set explicitly; everything else stays as checkpointed."""
    given = set(_parse_overrides(extra))
    if getattr(args, "iters", None) is not None:
        given.add("iters2")
    if args.config:
        given |= set(read_config(args.config))
    return {k: getattr(train, k) for k in given & STAGE2_KEYS}


def cmd_train2(args, extra) -> int:
    _, train = _resolve(args, extra)
    pack = _load_scene(args)
    model = _load_model(args, 1)
    over = _stage2_overrides(args, extra, train)
    if over:
        model = model.fork(**over)
    out = _prepare_out(Path(args.out or _default_out("train2")))
    _write_manifest(out, args, pack.config, model.cfg,
                    {"checkpoint": "stage2.gala", "losses": "losses_stage2.csv"})
    model, log = train_stage2(model, pack, progress=_progress(args))
    save_checkpoint(model, out / "stage2.gala")
    log.write(out / "losses_stage2.csv")
    _log(args, f"stage 2 done: {out / 'stage2.gala'}")
    return EXIT_OK


def _views(pack, which: str):
    return {"test": pack.test_views, "train": pack.train_views, "all": pack.views}[which]


def cmd_eval(args, extra) -> int:
    from . import evalkit, formats

    _resolve(args, extra)
    pack = _load_scene(args)
    model = _load_model(args, 2)
    out = _prepare_out(Path(args.out or _default_out(args.command)))
    views = _views(pack, args.views)
    queries = evalkit.QuerySet.from_table(pack.table)
    files = {"metrics": "metrics.csv"}
    _write_manifest(out, args, pack.config, model.cfg, files)
    if args.command == "eval2d":
        miou, macc, rows = evalkit.evaluate_2d(model, pack, views)
        for k, v in enumerate(views):
            lang = evalkit._lang_rows(model, model.render(v.camera)[1].values.data)
            labels = evalkit.query_2d(lang, None, queries)
            formats.write_ppm(out / f"labels_{k:03d}.ppm", _palette(labels, len(queries)))
    elif args.command == "eval3d-select":
        miou, macc, rows = evalkit.evaluate_3d_select(model, pack, views, args.threshold)
    else:
        miou, macc = evalkit.evaluate_voxel(model, pack, args.edge)
        rows = []
        batch = model.spawn(pack.train_views[0].camera)
        lang3d = evalkit._lang_rows(model, batch.features.data)
        labels = np.argmax(evalkit.cosine_scores(lang3d, queries), axis=1)
        evalkit.export_pointcloud(out / "gaussians.ply", batch, _palette(labels, len(queries)))
    text = evalkit.metrics_csv(rows, queries.labels, miou, macc)
    (out / "metrics.csv").write_text(text)
    print(f"mIoU {miou:.4f}  mAcc {macc:.4f}")
    return EXIT_OK


def _palette(labels: np.ndarray, n: int) -> np.ndarray:
    import colorsys

    colors = np.array([colorsys.hsv_to_rgb(i / max(n, 1), 0.8, 0.95) for i in range(n)] + [(0, 0, 0)])
    return colors[np.where(labels < 0, n, labels)]


def cmd_ablate(args, extra) -> int:
    from .ablation import ablation_csv, run_ablation

    _, train = _resolve(args, extra)
    pack = _load_scene(args)
    model = _load_model(args, 1)
    over = _stage2_overrides(args, extra, train)
    out = _prepare_out(Path(args.out or _default_out("ablate")))
    _write_manifest(out, args, pack.config, model.cfg, {"table": f"ablation_{args.kind}.csv"})

    def report(row):
        _log(args, f"{row['config']:>20s}  mIoU {row['miou']:.4f}  mAcc {row['macc']:.4f}")
    rows = run_ablation(model, pack, args.kind, over, progress=report)
    (out / f"ablation_{args.kind}.csv").write_text(ablation_csv(rows))
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    from .gradcheck import TOLERANCE, run_checks

    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    results = run_checks(range(args.seeds))
    failed = []
    for name, err in results.items():
        ok = err < TOLERANCE
        print(f"{'ok  ' if ok else 'FAIL'} {name:20s} {err:.3e}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_render(args, extra) -> int:
    from . import evalkit, formats

    _resolve(args, extra)
    pack = _load_scene(args)
    model = _load_model(args, 1)
    out = _prepare_out(Path(args.out or _default_out("render")))
    views = _views(pack, args.views)
    _write_manifest(out, args, pack.config, model.cfg, {"renders": "color_*.ppm, instance_*.ppm"})
    for k, v in enumerate(views):
        color, inst, trans = model.render(v.camera)
        formats.write_ppm(out / f"color_{k:03d}.ppm", color.values.data)
        f = inst.values.data.reshape(-1, inst.values.shape[-1])
        formats.write_ppm(out / f"instance_{k:03d}.ppm",
                          evalkit.pca_rgb(f).reshape(v.camera.height, v.camera.width, 3))
        formats.write_pgm16(out / f"alpha_{k:03d}.pgm", 1.0 - trans, vmax=1.0)
    _log(args, f"rendered {len(views)} views to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ovsplat", description="Instance-field distillation and guided-attention language fields.")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit (1 = reference mode)")
    p.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def shared(sp):
        # accepted after the subcommand too; SUPPRESS keeps the top-level value otherwise
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        sp.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
        return sp

    def common(sp, scene=True, ckpt=False):
        shared(sp)
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command>)")
        sp.add_argument("--seed", type=int)
        if scene:
            sp.add_argument("--scene", help="scene directory written by synth")
        if ckpt:
            sp.add_argument("--ckpt", help="checkpoint file")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic scene"), scene=False)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    t1 = common(sub.add_parser("train1", help="stage 1: geometry and instance field"))
    t1.add_argument("--iters", type=int)
    t1.set_defaults(func=cmd_train1)

    t2 = common(sub.add_parser("train2", help="stage 2: codebooks and guided attention"), ckpt=True)
    t2.add_argument("--iters", type=int)
    t2.set_defaults(func=cmd_train2)

    for name, help_ in (("eval2d", "2D open-vocabulary queries"),
                        ("eval3d-select", "3D select-then-rasterize queries"),
                        ("eval3d-voxel", "voxel protocol against teacher labels")):
        e = common(sub.add_parser(name, help=help_), ckpt=True)
        e.add_argument("--views", choices=("test", "train", "all"), default="test")
        e.add_argument("--threshold", type=float, default=0.5)
        e.add_argument("--edge", type=float, default=None)
        e.set_defaults(func=cmd_eval)

    from .ablation import KINDS
    a = common(sub.add_parser("ablate", help="stage-2 ablation sweeps"), ckpt=True)
    a.add_argument("kind", choices=KINDS)
    a.set_defaults(func=cmd_ablate)

    g = shared(sub.add_parser("gradcheck", help="finite-difference check of every differentiable op"))
    g.add_argument("--seeds", type=int, default=10)
    g.set_defaults(func=cmd_gradcheck)

    r = common(sub.add_parser("render", help="export colour, instance and alpha images"), ckpt=True)
    r.add_argument("--views", choices=("test", "train", "all"), default="test")
    r.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        limiter = _limit_threads(args.threads)
        try:
            return args.func(args, extra)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, CheckpointError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
