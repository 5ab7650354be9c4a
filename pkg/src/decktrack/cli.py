"""Command-line entry point: ``decktrack {calibrate,simulate,estimate,evaluate,report}``.

Every command writes ``effective-config.json`` into its output directory.
It holds every setting the run used, defaults included, with input paths
made absolute, so ``--config <out>/effective-config.json`` repeats the run
and reproduces its files byte for byte. Data goes to files only; progress
and errors go to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calib import DLTCalibrator, read_correspondences
from .evaluation import SpecThresholds, Summary, emit_deck_plot, emit_error_curves, emit_table, score_all, summarize, write_results_csv
from .exceptions import DeckTrackError
from .geom import CameraModel
from .jsonio import read_camera, read_json, read_jsonl, write_camera, write_json, write_jsonl
from .pipeline import KEYPOINT_PNP_SVD, PIPELINE_KINDS, make_pipeline
from .pose import load_skeleton
from .scene import DeckSpec, load_scene, simulate

log = logging.getLogger("decktrack")

EFFECTIVE_CONFIG = "effective-config.json"

CALIBRATE_DEFAULTS = {"correspondences": None, "width": None, "height": None, "normalize": True}

ESTIMATE_DEFAULTS = {
    "kind": KEYPOINT_PNP_SVD,
    "detections": None,
    "cameras": None,
    "skeleton": "builtin:fa18",
    "deck_z0": 0.0,
    "bins": {"n": 12, "half_width": 30.0},
    "with_scale": False,
    "weighted": False,
    "rho": 1.0,
    "max_iter": 100,
    "n_starts": 3,
    "accept_rms": 5.0,
    "timing": False,
    "seed": 0,
}

EVALUATE_DEFAULTS = {
    "estimates": None,
    "truth": None,
    "spec": {"max_distance": 1.0, "max_angle": 0.5},
    "name": None,
    "deck": {"z0": 0.0, "length": 330.0, "width": 78.0},
    "deck_frame": None,
}

REPORT_DEFAULTS = {"inputs": []}


class CliError(Exception):
    """Bad input detected by the command layer; reported without a traceback."""


def _existing(path, what="file") -> Path:
    p = Path(path)
    if what == "dir":
        if not p.is_dir():
            raise CliError(f"{path}: no such directory")
    elif not p.is_file():
        raise CliError(f"{path}: no such file")
    return p


def _absolute(path, base) -> str:
    """``path`` made absolute against ``base``; ``builtin:`` sources pass through."""
    path = str(path)
    if path.startswith("builtin:"):
        return path
    p = Path(path)
    return str(p if p.is_absolute() else (Path(base) / p).resolve())


def _load_config(path, defaults: dict) -> tuple[dict, Path]:
    """Defaults overlaid with the JSON file at ``path``; returns ``(config, base dir)``."""
    cfg = json.loads(json.dumps(defaults))
    if path is None:
        return cfg, Path.cwd()
    user = _read_json(path)
    if not isinstance(user, dict):
        raise CliError(f"{path}: expected a JSON object")
    unknown = set(user) - set(defaults)
    if unknown:
        raise CliError(f"{path}: unknown keys {sorted(unknown)}")
    for key, value in user.items():
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg, Path(path).resolve().parent


def _read_json(path):
    try:
        return read_json(_existing(path))
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _read_jsonl(path):
    try:
        return read_jsonl(_existing(path))
    except ValueError as exc:
        raise CliError(f"invalid JSON Lines: {exc}") from exc


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- calibrate


def cmd_calibrate(args) -> None:
    cfg, base = _load_config(args.config, CALIBRATE_DEFAULTS)
    if args.correspondences:
        cfg["correspondences"] = _absolute(args.correspondences, Path.cwd())
    elif cfg["correspondences"]:
        cfg["correspondences"] = _absolute(cfg["correspondences"], base)
    else:
        raise CliError("no correspondence file given")
    for key in ("width", "height"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
        if cfg[key] is None:
            raise CliError(f"image {key} is required (--{key})")
    if args.no_normalize:
        cfg["normalize"] = False

    points = read_correspondences(_existing(cfg["correspondences"]))
    world = np.array([c.world for c in points]).reshape(-1, 3)
    pixels = np.array([c.pixel for c in points]).reshape(-1, 2)
    cal = DLTCalibrator(width=cfg["width"], height=cfg["height"], normalize=cfg["normalize"]).fit(world, pixels)
    out = _out_dir(args.out)
    write_camera(out / "camera.json", cal.camera_)
    write_json(
        out / "calibration.json",
        {
            "n_points": len(points),
            "rmse_px": cal.rmse_,
            "projection_matrix": cal.projection_matrix_.tolist(),
        },
    )
    write_json(out / EFFECTIVE_CONFIG, cfg)
    log.info("calibrated from %d points, reprojection RMSE %.4g px", len(points), cal.rmse_)


# ----------------------------------------------------------------- simulate


def cmd_simulate(args) -> None:
    source = args.config or "builtin:default"
    if not str(source).startswith("builtin:"):
        _existing(source)
    try:
        scene = load_scene(source)
    except json.JSONDecodeError as exc:
        raise CliError(f"{source}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    except FileNotFoundError as exc:
        raise CliError(f"{source}: no such packaged scene") from exc
    if args.seed is not None:
        scene = type(scene).from_dict({**scene.to_dict(), "seed": args.seed}, base_dir=scene.base_dir)

    result = simulate(scene)
    out = _out_dir(args.out)
    write_jsonl(out / "detections.jsonl", result.detections)
    write_jsonl(out / "truth.jsonl", result.truth)
    cam_dir = out / "cameras"
    cam_dir.mkdir(exist_ok=True)
    for name, cam in result.cameras.items():
        write_camera(cam_dir / f"{name}.json", cam)
    skeleton = scene.resolve(scene.objects[0].skeleton) if scene.objects else "builtin:fa18"
    write_json(
        out / "pipeline.json",
        {
            "kind": KEYPOINT_PNP_SVD,
            "detections": "detections.jsonl",
            "cameras": {name: f"cameras/{name}.json" for name in result.cameras},
            "skeleton": skeleton,
            "deck_z0": scene.deck.z0,
            "bins": dict(scene.yaw_bins),
        },
    )
    write_json(out / EFFECTIVE_CONFIG, scene.to_dict())
    log.info("simulated %d frames: %d detection records, %d truth rows", len(scene.frames()), len(result.detections), len(result.truth))


# ----------------------------------------------------------------- estimate


def _load_cameras(spec, base) -> tuple[dict, dict]:
    """Camera models plus their effective-config form (absolute paths or inline dicts)."""
    if not isinstance(spec, dict) or not spec:
        raise CliError("config needs a non-empty 'cameras' mapping of name to camera file")
    cameras, effective = {}, {}
    for name, entry in spec.items():
        if isinstance(entry, dict):
            try:
                cameras[name] = CameraModel.from_dict(entry)
            except (KeyError, TypeError, ValueError) as exc:
                raise CliError(f"camera {name!r}: {exc}") from exc
            effective[name] = entry
            continue
        path = _absolute(entry, base)
        try:
            cameras[name] = read_camera(_existing(path))
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(f"{path}: not a camera file ({exc})") from exc
        effective[name] = path
    return cameras, effective


def cmd_estimate(args) -> None:
    cfg, base = _load_config(args.config, ESTIMATE_DEFAULTS)
    if args.pipeline:
        cfg["kind"] = args.pipeline
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.timing:
        cfg["timing"] = True
    if cfg["kind"] not in PIPELINE_KINDS:
        raise CliError(f"unknown pipeline kind {cfg['kind']!r}; expected one of {', '.join(PIPELINE_KINDS)}")
    if args.detections:
        cfg["detections"] = _absolute(args.detections, Path.cwd())
    elif cfg["detections"]:
        cfg["detections"] = _absolute(cfg["detections"], base)
    else:
        raise CliError("no detections file given")
    cfg["skeleton"] = _absolute(cfg["skeleton"], base)
    cameras, cfg["cameras"] = _load_cameras(cfg["cameras"], base)

    detections = _read_jsonl(cfg["detections"])
    if cfg["kind"] == KEYPOINT_PNP_SVD:
        if not cfg["skeleton"].startswith("builtin:"):
            _existing(cfg["skeleton"])
        params = dict(
            skeleton=load_skeleton(cfg["skeleton"]),
            with_scale=cfg["with_scale"],
            weighted=cfg["weighted"],
            rho=cfg["rho"],
            deck_z0=cfg["deck_z0"],
            max_iter=cfg["max_iter"],
            n_starts=cfg["n_starts"],
            accept_rms=cfg["accept_rms"],
        )
    else:
        params = dict(deck_z0=cfg["deck_z0"], n_bins=cfg["bins"]["n"], half_width=cfg["bins"]["half_width"])
    pipe = make_pipeline(cfg["kind"], cameras, record_timing=bool(cfg["timing"]), **params).fit()
    estimates = pipe.predict(detections)

    out = _out_dir(args.out)
    write_jsonl(out / "estimates.jsonl", estimates)
    write_json(out / EFFECTIVE_CONFIG, cfg)
    n_ok = sum(e["status"] == "ok" for e in estimates)
    log.info("%s: %d estimates, %d without an estimate", cfg["kind"], n_ok, len(estimates) - n_ok)


# ----------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> None:
    cfg, base = _load_config(args.config, EVALUATE_DEFAULTS)
    for key, value in (("estimates", args.estimates), ("truth", args.truth)):
        if value:
            cfg[key] = _absolute(value, Path.cwd())
        elif cfg[key]:
            cfg[key] = _absolute(cfg[key], base)
        else:
            raise CliError(f"no {key} file given")
    if args.spec_dist is not None:
        cfg["spec"]["max_distance"] = args.spec_dist
    if args.spec_angle is not None:
        cfg["spec"]["max_angle"] = args.spec_angle
    if args.name is not None:
        cfg["name"] = args.name
    if args.deck_frame is not None:
        cfg["deck_frame"] = args.deck_frame
    try:
        spec = SpecThresholds(float(cfg["spec"]["max_distance"]), float(cfg["spec"]["max_angle"]))
        deck = DeckSpec(**cfg["deck"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad evaluation settings: {exc}") from exc

    estimates = _read_jsonl(cfg["estimates"])
    truth = _read_jsonl(cfg["truth"])
    if not truth:
        raise CliError(f"{cfg['truth']}: no truth rows")
    frames = sorted({int(t["frame"]) for t in truth})
    if cfg["deck_frame"] is None:
        cfg["deck_frame"] = frames[(len(frames) - 1) // 2]
    records = score_all(truth, estimates, spec, cfg["name"])
    summaries = summarize(records, spec)
    table_text, table_csv = emit_table(summaries)

    out = _out_dir(args.out)
    write_results_csv(out / "results.csv", records)
    write_json(out / "summary.json", {name: s.to_dict() for name, s in summaries.items()})
    (out / "table.txt").write_text(table_text)
    (out / "table.csv").write_text(table_csv)
    (out / "error_curves.svg").write_text(emit_error_curves(records))
    (out / "deck_plot.svg").write_text(emit_deck_plot(int(cfg["deck_frame"]), truth, estimates, deck))
    write_json(out / EFFECTIVE_CONFIG, cfg)
    if not args.quiet:
        sys.stderr.write(table_text)


# ------------------------------------------------------------------- report


def cmd_report(args) -> None:
    cfg, base = _load_config(args.config, REPORT_DEFAULTS)
    if args.dirs:
        cfg["inputs"] = [_absolute(d, Path.cwd()) for d in args.dirs]
    else:
        cfg["inputs"] = [_absolute(d, base) for d in cfg["inputs"]]
    if not cfg["inputs"]:
        raise CliError("no result directories given")
    summaries = {}
    for d in cfg["inputs"]:
        path = _existing(d, "dir") / "summary.json"
        try:
            loaded = {name: Summary.from_dict(s) for name, s in _read_json(path).items()}
        except (AttributeError, TypeError) as exc:
            raise CliError(f"{path}: not a summary file") from exc
        for name, s in loaded.items():
            if name in summaries:
                raise CliError(f"pipeline name {name!r} appears twice; rename one run with evaluate --name")
            summaries[name] = s
    text, table_csv = emit_table(summaries)
    out = _out_dir(args.out)
    (out / "comparison.txt").write_text(text)
    (out / "comparison.csv").write_text(table_csv)
    write_json(out / EFFECTIVE_CONFIG, cfg)
    if not args.quiet:
        sys.stderr.write(text)


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decktrack", description="Flight-deck asset pose estimation and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", metavar="PATH", help="JSON config; an effective-config.json repeats a run")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory (created if missing)")
        p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
        if seed:
            p.add_argument("--seed", metavar="N", type=int, help="override the config seed")

    p = sub.add_parser("calibrate", help="DLT camera calibration from 3D/2D correspondences")
    p.add_argument("correspondences", nargs="?", help="CSV with columns name,X,Y,Z,u,v")
    p.add_argument("--width", type=int, help="image width in pixels")
    p.add_argument("--height", type=int, help="image height in pixels")
    p.add_argument("--no-normalize", action="store_true", help="skip point conditioning (diagnostic only)")
    common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="render oracle detections and ground truth for a scene")
    common(p, seed=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run a pipeline over detection records")
    p.add_argument("detections", nargs="?", help="detections JSON Lines (overrides the config)")
    p.add_argument("--pipeline", metavar="KIND", choices=PIPELINE_KINDS, help=f"one of {', '.join(PIPELINE_KINDS)}")
    p.add_argument("--timing", action="store_true", help="record per-asset wall time (output no longer reproducible)")
    common(p, seed=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="score estimates against truth and write reports")
    p.add_argument("estimates", nargs="?", help="estimates JSON Lines")
    p.add_argument("truth", nargs="?", help="truth JSON Lines")
    p.add_argument("--spec-dist", metavar="M", type=float, help="in-spec distance threshold in meters (default 1)")
    p.add_argument("--spec-angle", metavar="DEG", type=float, help="in-spec angle threshold in degrees (default 0.5)")
    p.add_argument("--name", help="pipeline name used in tables")
    p.add_argument("--deck-frame", type=int, help="frame drawn in deck_plot.svg (default: middle frame)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="combine evaluate outputs into one comparison table")
    p.add_argument("dirs", nargs="*", metavar="DIR", help="evaluate output directories")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("decktrack: %(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        args.func(args)
    except (CliError, DeckTrackError, OSError, ValueError, KeyError, TypeError) as exc:
        msg = str(exc) if isinstance(exc, (CliError, DeckTrackError)) else f"{type(exc).__name__}: {exc}"
        print(f"decktrack {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
