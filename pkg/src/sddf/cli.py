"""Command-line entry point: ``sddf {data,init,train,eval,render,viewopt}``.

Every subcommand accepts ``--config FILE`` (JSON) whose keys are checked
against the known settings; command-line flags override file values.
Exit codes: 0 ok, 1 usage, 2 runtime error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .initialization import load_ellipsoids, multi_ellipsoid_init, save_ellipsoids
from .renderer import D_VIEW_MAX, render_distance_image, save_image
from .residual import CheckpointError, SDDFModel, load_checkpoint, model_forward, save_checkpoint
from .scene import (DEFAULT_AUG_EPS, Dataset, Scene, SceneError, SensorModel, augment_negative,
                    build_point_cloud, lidar_poses, look_at, synthesize, toy_room)
from .trainer import DivergenceError, TrainConfig, evaluate, initialize_model, train, write_loss_log
from .viewopt import (ViewOptConfig, ViewOptError, load_poses, optimize_waypoints, save_poses,
                      write_report)

log = logging.getLogger("sddf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3
BUILTIN_SCENES = {"toy-room": toy_room}


class UsageError(Exception):
    pass


@dataclasses.dataclass
class DataConfig:
    scene: str = "toy-room"
    sensor: dict = dataclasses.field(default_factory=lambda: {"kind": "lidar", "shape": [180, 90]})
    poses: list = dataclasses.field(default_factory=list)
    pose_center: list = dataclasses.field(default_factory=lambda: [0.0, 0.0, 1.5])
    pose_spread: list = dataclasses.field(default_factory=lambda: [1.4, 1.4, 1.0])
    pose_count: int = 12
    clearance: float = 0.3
    augment: bool = True
    aug_eps: float = DEFAULT_AUG_EPS


@dataclasses.dataclass
class RenderConfig:
    sensor: dict = dataclasses.field(default_factory=lambda: {"kind": "pinhole", "shape": [128, 96],
                                                              "fov": [90.0, 70.0]})
    eye: list = dataclasses.field(default_factory=lambda: [-1.5, 1.5, 1.5])
    target: list = dataclasses.field(default_factory=lambda: [1.0, -1.0, 0.8])
    d_view_max: float = D_VIEW_MAX
    png: bool = True


SECTIONS = {"data": DataConfig, "train": TrainConfig, "render": RenderConfig,
            "viewopt": ViewOptConfig}


def load_config(path: str | None) -> dict:
    """Read and validate a JSON config; unknown sections or keys are usage errors."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    for section, body in raw.items():
        if section == "seed":
            continue
        if section not in SECTIONS:
            raise UsageError(f"{path}: unknown section {section!r}")
        known = {f.name for f in dataclasses.fields(SECTIONS[section])}
        unknown = sorted(set(body) - known)
        if unknown:
            raise UsageError(f"{path}: unknown keys in {section!r}: {', '.join(unknown)}")
    return raw


def build(section: str, config: dict, **overrides):
    values = dict(config.get(section, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SECTIONS[section](**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} settings: {exc}") from exc


def _seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get("seed", 0))


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _require_outdir(path) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _sensor(spec: dict) -> SensorModel:
    try:
        return SensorModel(spec["kind"], tuple(spec["shape"]), tuple(spec.get("fov", (90.0, 90.0))))
    except (KeyError, SceneError) as exc:
        raise UsageError(f"invalid sensor spec {spec}: {exc}") from exc


def _scene(name: str) -> Scene:
    if name in BUILTIN_SCENES:
        return BUILTIN_SCENES[name]()
    return Scene.load(_require_file(name, "scene file"))


# --- subcommands ------------------------------------------------------------

def cmd_data(args, config) -> int:
    seed = _seed(args, config)
    cfg = build("data", config, scene=args.scene, pose_count=args.poses,
                augment=False if args.no_augment else None)
    out = _require_outdir(args.out)
    scene = _scene(cfg.scene)
    sensor = _sensor(cfg.sensor)
    if cfg.poses:
        positions = [np.asarray(p, float) for p in cfg.poses]
    else:
        positions = lidar_poses(cfg.pose_center, cfg.pose_spread, cfg.pose_count, seed, scene,
                                cfg.clearance)
    ds = Dataset.concat([synthesize(scene, sensor.at(np.eye(3), t)) for t in positions])
    hits = len(ds)
    if hits == 0:
        raise SceneError("no hits: every simulated ray missed the scene")
    if cfg.augment:
        ds = augment_negative(ds, cfg.aug_eps)
    ds.save(out)
    print(f"poses,{len(positions)}")
    print(f"hits,{hits}")
    print(f"samples,{len(ds)}")
    return EXIT_OK


def cmd_init(args, config) -> int:
    seed = _seed(args, config)
    cfg = build("train", config, n_ellipsoids=args.ellipsoids, seed=seed)
    data = Dataset.load(_require_file(args.data, "dataset"))
    out = _require_outdir(args.out)
    cloud = build_point_cloud(data)
    if cfg.init_points and cloud.shape[0] > cfg.init_points:
        cloud = cloud[::-(-cloud.shape[0] // cfg.init_points)]
    ells = multi_ellipsoid_init(cloud, min(cfg.n_ellipsoids, cloud.shape[0]), seed=seed)
    save_ellipsoids(ells, out)
    print(f"ellipsoids,{len(ells)}")
    return EXIT_OK


def cmd_train(args, config) -> int:
    seed = _seed(args, config)
    overrides = dict(seed=seed, epochs=args.epochs, max_iters=args.max_iters)
    cfg = build("train", config, **overrides)
    if args.paper_scale:
        cfg = TrainConfig.paper_scale(**{k: v for k, v in overrides.items() if v is not None})
    data = Dataset.load(_require_file(args.data, "dataset"))
    val = Dataset.load(_require_file(args.val, "validation dataset")) if args.val else None
    ell_path = _require_file(args.ellipsoids, "ellipsoid file") if args.ellipsoids else None
    out = _require_outdir(args.out)
    if len(data) == 0:
        raise SceneError("dataset is empty")
    if ell_path is not None:
        model = SDDFModel.create(load_ellipsoids(ell_path), m=cfg.latent_dim, widths=cfg.widths,
                                 seed=cfg.seed, alpha=cfg.alpha, dtype=np.dtype(cfg.dtype))
    else:
        model = initialize_model(data, cfg)
    result = train(data, model, cfg, val)
    save_checkpoint(result.model, out)
    log_path = out.with_suffix(".csv")
    write_loss_log(result.log, log_path)
    if result.log:
        from .plotting import plot_loss_curve

        plot_loss_curve(result.log, out.with_suffix(".png"))
    print(f"iterations,{result.iterations}")
    if val is not None:
        print(f"mae_val,{evaluate(result.model, val, cfg.f_clamp).mae:.6f}")
    return EXIT_OK


def cmd_eval(args, config) -> int:
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    data = Dataset.load(_require_file(args.data, "dataset"))
    out = _require_outdir(args.out) if args.out else None
    test = data[data.f >= 0] if args.positive_only else data
    res = evaluate(model, test)
    row = res.as_row()
    if out is not None:
        with open(out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
        from .plotting import plot_error_histogram

        f_hat = model_forward(test.p, test.v, model).f_hat
        plot_error_histogram(np.abs(f_hat - test.f), out.with_suffix(".png"))
    print(",".join(row))
    print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row.values()))
    return EXIT_OK


def _pose_from_args(args, cfg: RenderConfig):
    if args.pose:
        poses = load_poses(_require_file(args.pose, "pose file"))
        if not poses:
            raise UsageError(f"{args.pose}: no poses")
        return poses[0]
    eye = args.eye if args.eye is not None else cfg.eye
    target = args.target if args.target is not None else cfg.target
    return look_at(eye, target), np.asarray(eye, float)


def cmd_render(args, config) -> int:
    cfg = build("render", config)
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    out = _require_outdir(args.out)
    sensor = _sensor(cfg.sensor)
    R, t = _pose_from_args(args, cfg)
    image = render_distance_image(model, R, t, sensor)
    paths = save_image(image, out, png=cfg.png, d_view_max=cfg.d_view_max)
    if cfg.png:
        from .plotting import plot_distance_image

        plot_distance_image(image.values, Path(str(out) + "_figure.png"), cfg.d_view_max)
    print(f"pixels,{image.values.size}")
    print(f"misses,{int(image.miss.sum())}")
    for p in paths:
        print(f"wrote,{p}")
    return EXIT_OK


def cmd_viewopt(args, config) -> int:
    cfg = build("viewopt", config, steps=args.steps)
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    waypoints = load_poses(_require_file(args.waypoints, "waypoint file"))
    out = _require_outdir(args.out)
    if len(waypoints) < 2:
        raise UsageError("need at least two waypoints")
    poses, reports = optimize_waypoints(model, waypoints, cfg)
    save_poses(poses, out)
    report_path = out.with_suffix(".csv")
    write_report(reports, report_path)
    from .plotting import plot_coverage

    plot_coverage(reports, out.with_suffix(".png"))
    print("index,coverage_before,coverage_after,risk_min")
    for r in reports:
        print(f"{r.index},{r.coverage_before:.6g},{r.coverage_after:.6g},{r.risk_min:.6g}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sddf", description="Ellipsoid-prior directional distance fields.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("data", help="simulate range scans and write a dataset")
    common(p)
    p.add_argument("--scene", help="scene JSON file or 'toy-room'")
    p.add_argument("--poses", type=int, help="number of random sensor positions")
    p.add_argument("--no-augment", action="store_true", help="skip negative samples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("init", help="fit initial ellipsoids to a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ellipsoids", "-M", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="train a model, write checkpoint, loss CSV and figure")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--ellipsoids", help="ellipsoid JSON from 'init'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="distance error of a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--positive-only", action="store_true", help="ignore negative samples")
    p.add_argument("--out", help="metrics CSV (histogram PNG alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a distance image (PFM + PNG)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", help="pose JSON (first pose used)")
    p.add_argument("--eye", type=float, nargs=3)
    p.add_argument("--target", type=float, nargs=3)
    p.add_argument("--out", required=True, help="output stem")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("viewopt", help="optimize waypoints for coverage")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--waypoints", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viewopt)
    return parser


def _thread_limit():
    n = os.environ.get("SDDF_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        with _thread_limit():
            return args.func(args, config)
    except UsageError as exc:
        print(f"sddf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"sddf: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SceneError, CheckpointError, ViewOptError, OSError, ValueError) as exc:
        print(f"sddf: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
