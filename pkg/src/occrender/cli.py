"""``occrender`` command line: synth, train, render, eval, dts, replay.

Exit codes: 0 success, 2 user or configuration error, 3 non-finite loss.
Every run writes ``manifest.json`` into its output directory with the
command line, resolved config, seed, version, paths and per-phase timings.
Everything else a run writes is byte-reproducible for a fixed seed and
thread count; timings live only in the manifest.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .camera import load_rig, pixel_centers
from .dts import run_dts
from .grid import check_same_geometry, grid_to_label, load_grid, load_labels, save_grid
from .imageio import write_blob, write_pfm, write_pgm
from .metrics import iou
from .render import SamplerConfig, render_image
from .train import (NumericalError, SceneSpec, TrainConfig, build_scene, init_grid, load_config_dict, load_scene,
                    missing_scene_files, save_scene, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """A problem with the command line, config or inputs (exit code 2)."""


def _version() -> str:
    return f"v{__version__}"


class Run:
    """Collects phase timings and writes the manifest of one invocation."""

    def __init__(self, command: str, argv: Sequence[str], out: Path, seed: int, config: Optional[dict] = None):
        self.command = command
        self.argv = list(argv)
        self.out = out
        self.seed = seed
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self.extra: dict = {}

    def phase(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 6)

        return _Timer()

    def write(self) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "version": _version(),
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "timings": self.timings,
            **self.extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve_config(args) -> TrainConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = load_config_dict(path)
        except (ValueError, OSError) as e:
            raise UsageError(f"cannot parse config {path}: {e}") from e
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    try:
        return TrainConfig.from_dict(data)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid config: {e}") from e


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_scene(path: str) -> None:
    missing = missing_scene_files(path)
    if missing:
        raise UsageError("scene directory is incomplete; missing:\n  " + "\n  ".join(missing))


def _require_grid(path: str, what: str = "grid") -> None:
    p = Path(path)
    if not (p / "meta.json").is_file():
        raise UsageError(f"cannot read {what} at {p}: meta.json missing")


class _JsonLines:
    def __init__(self, path: Path):
        self.f = open(path, "w")

    def __call__(self, record: dict) -> None:
        record = {k: v for k, v in record.items() if k != "elapsed"}
        self.f.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self.f.close()


# --- subcommands -------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    spec_path = Path(args.spec)
    try:
        spec_dict = json.loads(spec_path.read_text())
    except OSError as e:
        raise UsageError(f"cannot read scene spec: {e}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"{spec_path}: JSON parse error at line {e.lineno} column {e.colno}: {e.msg}") from e
    try:
        spec = SceneSpec.from_json(spec_dict)
    except (KeyError, ValueError, TypeError) as e:
        raise UsageError(f"{spec_path}: invalid scene spec: {e}") from e
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else 0
    run = Run("synth", argv, out, seed)
    run.inputs["spec"] = str(spec_path)
    with run.phase("bake"):
        scene = build_scene(spec)
    with run.phase("write"):
        written = save_scene(scene, spec_dict, out)
    run.outputs = [str(p.relative_to(out)) for p in written]
    run.extra["pixels"] = len(scene.pixels)
    run.write()
    print(f"wrote scene with {spec.n_frames} frame(s), {len(scene.pixels)} pixel labels to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    cfg = _resolve_config(args)
    overrides = {k: v for k, v in (("mode", args.mode), ("iterations", args.iterations)) if v is not None}
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except ValueError as e:
            raise UsageError(str(e)) from e
    _require_scene(args.scene)
    scene = load_scene(args.scene)
    if cfg.mode != "render_only" and scene.key_labels is None:
        raise UsageError(f"mode {cfg.mode!r} needs 3D labels, but {args.scene} is unlabeled")
    out = _out_dir(args.out)
    run = Run("train", argv, out, cfg.seed, cfg.to_json())
    run.inputs["scene"] = str(args.scene)
    log = _JsonLines(out / "log.jsonl")
    try:
        with run.phase("train"):
            grid = train(scene, cfg, init_grid(scene.geometry, scene.schema, cfg), log=log)
    finally:
        log.close()
    with run.phase("write"):
        save_grid(grid, out / "grid")
    run.outputs = ["grid", "log.jsonl"]
    run.write()
    print(f"trained {cfg.iterations} step(s) in mode {cfg.mode}; checkpoint at {out / 'grid'}")
    return EXIT_OK


def _load_cameras(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "cameras.json"
    if not p.is_file():
        raise UsageError(f"camera file not found: {p}")
    try:
        return load_rig(p)
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"cannot read cameras from {p}: {e}") from e


def cmd_render(args, argv) -> int:
    cfg = _resolve_config(args)
    _require_grid(args.grid)
    try:
        grid = load_grid(args.grid)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read grid at {args.grid}: {e}") from e
    cams = _load_cameras(args.cameras)
    sampler = SamplerConfig(args.sampler or cfg.sampler, args.n_samples or cfg.n_samples, cfg.jitter)
    interp = args.interp or cfg.interp
    out = _out_dir(args.out)
    run = Run("render", argv, out, cfg.seed, cfg.to_json())
    run.inputs.update(grid=str(args.grid), cameras=str(args.cameras))
    run.extra["render"] = {"sampler": sampler.mode, "n_samples": sampler.n_samples, "interp": interp}
    rng = np.random.default_rng(cfg.seed)
    with run.phase("render"):
        for i, cam in enumerate(cams):
            u, v = pixel_centers(cam)
            img = render_image(grid, cam, u, v, sampler, interp, cfg.threads, rng)
            shape = (cam.height, cam.width)
            write_pfm(out / f"cam{i}_depth.pfm", img.D.reshape(shape))
            write_pfm(out / f"cam{i}_opacity.pfm", img.opacity.reshape(shape))
            sem = img.S.argmax(axis=1).reshape(shape)
            write_pgm(out / f"cam{i}_sem.pgm", sem, 255 if grid.num_classes <= 256 else 65535)
            run.outputs += [f"cam{i}_depth.pfm", f"cam{i}_opacity.pfm", f"cam{i}_sem.pgm"]
            if args.logits:
                write_blob(out / f"cam{i}_logits.f32", img.S.reshape(shape + (grid.num_classes,)))
                run.outputs += [f"cam{i}_logits.f32", f"cam{i}_logits.f32.json"]
    run.write()
    print(f"rendered {len(cams)} camera(s) to {out}")
    return EXIT_OK


def _load_prediction(path: str, threshold: Optional[float]):
    """A label grid directory as is, or a density grid converted at ``threshold``."""
    p = Path(path)
    _require_grid(path, "prediction")
    try:
        if (p / "labels.u16").is_file():
            return load_labels(p)
        return grid_to_label(load_grid(p), 0.5 if threshold is None else threshold)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read prediction at {p}: {e}") from e


def cmd_eval(args, argv) -> int:
    cfg = _resolve_config(args)
    pred = _load_prediction(args.pred, args.threshold if args.threshold is not None else cfg.occ_threshold)
    _require_scene(args.scene)
    scene = load_scene(args.scene)
    if scene.key_labels is None:
        raise UsageError(f"{args.scene} is unlabeled; nothing to evaluate against")
    try:
        check_same_geometry(pred.geometry, scene.geometry)
    except ValueError:
        raise UsageError("geometry mismatch:\n  prediction: " + json.dumps(pred.geometry.to_json())
                         + "\n  scene:      " + json.dumps(scene.geometry.to_json()))
    masked = not args.no_mask
    out = _out_dir(args.out)
    run = Run("eval", argv, out, cfg.seed)
    run.inputs.update(pred=str(args.pred), scene=str(args.scene))
    with run.phase("eval"):
        report = iou(pred, scene.key_labels, scene.visibility if masked else None)
    doc = {**report.to_json(), "masked": masked}
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    (out / "report.txt").write_text(report.to_table())
    run.outputs = ["report.json", "report.txt"]
    run.extra["miou"] = report.miou
    run.write()
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_dts(args, argv) -> int:
    cfg = _resolve_config(args)
    student_dir = Path(args.student)
    if not (student_dir / "meta.json").is_file():
        raise UsageError(f"student checkpoint not found at {student_dir}; run `occrender train` first")
    _require_scene(args.labeled)
    _require_scene(args.unlabeled)
    labeled = load_scene(args.labeled)
    unlabeled = load_scene(args.unlabeled)
    if labeled.key_labels is None:
        raise UsageError(f"{args.labeled} has no 3D labels; the first scene must be labeled")
    try:
        student = load_grid(student_dir)
    except ValueError as e:
        raise UsageError(f"cannot read student checkpoint at {student_dir}: {e}") from e
    try:
        check_same_geometry(labeled.geometry, unlabeled.geometry)
        check_same_geometry(labeled.geometry, student.geometry)
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = _out_dir(args.out)
    run = Run("dts", argv, out, cfg.seed, cfg.to_json())
    run.inputs.update(labeled=str(args.labeled), unlabeled=str(args.unlabeled), student=str(student_dir))
    log = _JsonLines(out / "log.jsonl")
    try:
        with run.phase("dts"):
            result = run_dts(labeled, unlabeled, student, cfg, log=log)
    finally:
        log.close()
    save_grid(result.student, out / "student")
    save_grid(result.teacher, out / "teacher")
    run.outputs = ["student", "teacher", "log.jsonl"]
    run.extra["student_miou"] = {"before": result.before, "after": result.after}
    run.write()
    print(f"student mIoU {result.before:.4f} -> {result.after:.4f}")
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    """Re-run a recorded invocation into a new output directory, using the recorded config snapshot."""
    path = Path(args.manifest)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
        old_argv = list(manifest["argv"])
        command = manifest["command"]
    except (OSError, ValueError, KeyError) as e:
        raise UsageError(f"cannot read manifest {path}: {e}") from e
    parser = build_parser()
    old = parser.parse_args(old_argv)
    new_argv = _replace_out(old_argv, old.out, args.out)
    with tempfile.TemporaryDirectory() as tmp:
        if manifest.get("config") is not None:
            snap = Path(tmp) / "config.json"
            snap.write_text(json.dumps(manifest["config"]))
            new_argv = _with_config(new_argv, old.config, str(snap))
        print(f"replaying {command}: {' '.join(new_argv)}")
        return main(new_argv)


def _replace_out(argv: list[str], old: str, new: str) -> list[str]:
    out = list(argv)
    for i in range(len(out) - 1, -1, -1):
        if out[i] == old:
            out[i] = new
            return out
    raise UsageError("manifest argv does not contain its output directory")


def _with_config(argv: list[str], old: Optional[str], new: str) -> list[str]:
    out = list(argv)
    for i, a in enumerate(out):
        if a == "--config" and i + 1 < len(out):
            out[i + 1] = new
            return out
        if a.startswith("--config="):
            out[i] = f"--config={new}"
            return out
    return ["--config", new] + out


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occrender", description="Semantic occupancy volume rendering toolkit.")
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for rendering (overrides the config)")
    p.add_argument("--config", default=None, help="training/render config, JSON or TOML")
    p.add_argument("--version", action="version", version=f"occrender {_version()}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="build a synthetic scene directory from a JSON spec")
    s.add_argument("spec")
    s.add_argument("out")

    s = sub.add_parser("train", help="optimize a voxel grid on a scene directory")
    s.add_argument("scene")
    s.add_argument("out")
    s.add_argument("--mode", choices=("render_only", "occ3d_only", "combined"))
    s.add_argument("--iterations", type=int)

    s = sub.add_parser("render", help="render depth, semantics and opacity images")
    s.add_argument("grid")
    s.add_argument("cameras", help="cameras.json or a directory containing it")
    s.add_argument("out")
    s.add_argument("--sampler", choices=("uniform", "disparity", "voxel"))
    s.add_argument("--n-samples", type=int)
    s.add_argument("--interp", choices=("nearest", "trilinear"))
    s.add_argument("--logits", action="store_true", help="also write raw composited logits")

    s = sub.add_parser("eval", help="per-class IoU of a grid against a scene's key-frame labels")
    s.add_argument("pred")
    s.add_argument("scene")
    s.add_argument("out")
    s.add_argument("--no-mask", action="store_true", help="count occluded voxels too")
    s.add_argument("--threshold", type=float, help="occupancy threshold for density grids")

    s = sub.add_parser("dts", help="teacher-student fine-tuning of a trained grid")
    s.add_argument("labeled")
    s.add_argument("unlabeled")
    s.add_argument("student", help="checkpoint directory written by `train`")
    s.add_argument("out")

    s = sub.add_parser("replay", help="re-run the invocation recorded in a manifest")
    s.add_argument("manifest")
    s.add_argument("out")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "dts": cmd_dts,
            "replay": cmd_replay}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with code 2
        return int(e.code or 0)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
