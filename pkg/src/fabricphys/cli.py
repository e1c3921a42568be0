"""``fabricphys`` command line: one subcommand per pipeline stage.

Every command prints a single ``key=value`` summary line on stdout. Exit
status is 0 on success, 2 for usage or configuration errors and 1 for any
other failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import CONFIG_ENV, RunConfig, resolve_config
from .errors import ConfigError, FabricPhysError, InvalidInputError

log = logging.getLogger("fabricphys")

ANGLE_LABELS = ("0deg", "45deg", "90deg")


def summary(**fields) -> str:
    parts = []
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={shlex.quote(str(v))}")
    return " ".join(parts)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def _record_config(cfg: RunConfig, out: Path) -> str:
    cfg.write(out / "run_config.json")
    return cfg.digest()


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cfg: RunConfig) -> str:
    from .materials import get_material
    from .scene import simulate_params
    from .sim import write_mesh_text

    out = _out(args)
    digest = _record_config(cfg, out)
    scene = cfg.scene if args.frames is None else cfg.scene.with_frames(args.frames)
    mat = get_material(args.material, cfg.material_table())
    snaps = simulate_params(mat, args.stiffness, args.wind, args.area_weight, scene)
    for k, snap in enumerate(snaps):
        write_mesh_text(snap, out / f"frame_{k:03d}.txt")
    first = snaps[0].positions
    disp = float(np.abs(snaps[-1].positions - first).max())
    return summary(command="simulate", material=mat.name, frames=len(snaps),
                   last_frame_max_step=disp, out=out, config_digest=digest)


def cmd_gen_dataset(args, cfg: RunConfig) -> str:
    from .dataset import generate_dataset

    out = _out(args)
    ds = cfg.dataset
    ds = replace(ds, **{k: v for k, v in (("n_combos", args.combos), ("frames", args.frames),
                                          ("cameras", args.cameras), ("workers", args.workers))
                        if v is not None})
    cfg = replace(cfg, dataset=ds)
    digest = _record_config(cfg, out)
    m = generate_dataset(args.material, out, ds.n_combos, ds.frames, ds.cameras, cfg.seed,
                         cfg.scene, ds.workers, table=cfg.material_table())
    return summary(command="gen-dataset", material=m.material, samples=len(m.samples),
                   combinations=len(m.combinations), failures=len(m.failures),
                   manifest=out / "manifest.json", config_digest=digest)


def cmd_make_target(args, cfg: RunConfig) -> str:
    from .dataset import make_target

    out = _out(args)
    digest = _record_config(cfg, out)
    scene = cfg.scene if args.frames is None else cfg.scene.with_frames(args.frames)
    seed = cfg.seed + 1000 if args.camera_seed is None else args.camera_seed
    m = make_target(args.material, (args.stiffness, args.wind, args.area_weight), out, seed,
                    scene, table=cfg.material_table())
    return summary(command="make-target", material=m.material, frames=len(m.samples),
                   manifest=out / "manifest.json", config_digest=digest)


def cmd_ingest(args, cfg: RunConfig) -> str:
    from .dataset import ingest_capture

    out = _out(args)
    digest = _record_config(cfg, out)
    m = ingest_capture(args.capture, args.material, out, cfg.scene, cfg.material_table())
    return summary(command="ingest", material=m.material, frames=len(m.samples),
                   manifest=out / "manifest.json", config_digest=digest)


def _check_input_size(net_cfg, manifest) -> None:
    res = manifest.scene_config().render.resolution
    if res != net_cfg.input_size:
        raise ConfigError(f"net.input_size={net_cfg.input_size} but the corpus is {res}x{res}")


def cmd_train(args, cfg: RunConfig) -> str:
    from .dataset import Manifest
    from .embed import save_net, train

    out = _out(args)
    net_cfg = cfg.net if args.epochs is None else replace(cfg.net, epochs=args.epochs)
    ts = cfg.train
    if args.triplets_per_epoch is not None:
        ts = replace(ts, triplets_per_epoch=args.triplets_per_epoch)
    if args.holdout_camera is not None:
        ts = replace(ts, holdout_camera=args.holdout_camera)
    cfg = replace(cfg, net=net_cfg, train=ts)
    digest = _record_config(cfg, out)
    manifest = Manifest.read(args.manifest)
    _check_input_size(net_cfg, manifest)
    result = train(net_cfg, manifest, ts.triplets_per_epoch, ts.holdout_camera)
    save_net(result.net, out / "net.bin")
    (out / "history.jsonl").write_text(
        "".join(json.dumps(h, sort_keys=True) + "\n" for h in result.history))
    changes, last = [], None
    for h in result.history:
        if h["lr"] != last:
            changes.append(f"{h['lr']:g}@{h['epoch']}")
            last = h["lr"]
    return summary(command="train", epochs=len(result.history), final_loss=result.losses[-1],
                   lr_schedule=",".join(changes), net=out / "net.bin", config_digest=digest)


def cmd_eval(args, cfg: RunConfig) -> str:
    from .dataset import ImageStore, Manifest
    from .embed import embed_images, load_net
    from .evaluate import clustering_accuracy

    out = _out(args)
    digest = _record_config(cfg, out)
    manifest = Manifest.read(args.manifest)
    net = load_net(args.net)
    _check_input_size(net.config, manifest)
    idx = [i for i, s in enumerate(manifest.samples)
           if args.camera is None or s.camera_index == args.camera]
    if not idx:
        raise InvalidInputError(f"no samples for camera {args.camera}")
    points = embed_images(net, ImageStore(manifest).stack(idx))
    report = clustering_accuracy(points, manifest.labels[idx], manifest.material)
    data = report.to_dict()
    data["config_digest"] = digest
    _write_json(out / "eval.json", data)
    (out / "eval.txt").write_text(report.to_table())
    return summary(command="eval", material=report.material, accuracy=report.accuracy,
                   samples=report.n_samples, report=out / "eval.json", config_digest=digest)


def cmd_estimate(args, cfg: RunConfig) -> str:
    from .bo import estimate
    from .dataset import ImageStore, Manifest
    from .embed import load_net
    from .materials import get_material

    out = _out(args)
    bo = cfg.bo if args.budget is None else replace(cfg.bo, budget=args.budget)
    cfg = replace(cfg, bo=bo)
    digest = _record_config(cfg, out)
    target = Manifest.read(args.target)
    net = load_net(args.net)
    _check_input_size(net.config, target)
    order = sorted(range(len(target.samples)), key=lambda i: target.samples[i].frame_index)
    frames = ImageStore(target).stack(order)
    mat = get_material(target.material, cfg.material_table())
    result = estimate(frames, target.cameras[0], mat, net, target.scene_config(), bo)
    result.trace.write(out / "trace.jsonl")
    data = result.to_dict()
    data.update(material=mat.name, config_digest=digest,
                target_params=dict(zip(("stiffness_scale", "wind_speed", "area_weight"),
                                       target.combinations[0].params())))
    _write_json(out / "estimate.json", data)
    p = result.params.as_dict()
    return summary(command="estimate", material=mat.name, iterations=data["iterations"],
                   stop_reason=data["stop_reason"], stiffness_scale=p["stiffness_scale"],
                   wind_speed=p["wind_speed"], area_weight=p["area_weight"],
                   estimate=out / "estimate.json", config_digest=digest)


def stiffness_svg(matrix: np.ndarray, title: str) -> str:
    """Heatmap of a 3x5 matrix: rows are bend-angle indices, columns measurement points."""
    cell, left, top = 60, 90, 50
    lo, hi = float(matrix.min()), float(matrix.max())
    span = hi - lo if hi > lo else 1.0
    w, h = left + cell * matrix.shape[1] + 20, top + cell * matrix.shape[0] + 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{left}" y="20" font-size="13">{title}</text>']
    for r, row in enumerate(matrix):
        y = top + r * cell
        parts.append(f'<text x="{left - 8}" y="{y + cell / 2 + 4}" text-anchor="end">'
                     f'{r} ({ANGLE_LABELS[r]})</text>')
        for c, v in enumerate(row):
            shade = int(round(235 - 190 * (float(v) - lo) / span))
            x = left + c * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="white"/>')
            parts.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" '
                         f'text-anchor="middle">{v:.3g}</text>')
    for c in range(matrix.shape[1]):
        parts.append(f'<text x="{left + c * cell + cell / 2}" y="{top + cell * matrix.shape[0] + 16}" '
                     f'text-anchor="middle">{c}</text>')
    parts.append(f'<text x="{left + cell * matrix.shape[1] / 2}" y="{h - 10}" '
                 f'text-anchor="middle">measurement point (column index)</text>')
    parts.append(f'<text x="14" y="{top - 12}">bend angle (row index)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def effective_stiffness(material, scale: float) -> np.ndarray:
    return float(scale) * material.bend_array()


def cmd_plot_stiffness(args, cfg: RunConfig) -> str:
    from .materials import get_material

    out = _out(args)
    digest = _record_config(cfg, out)
    try:
        est = json.loads(Path(args.estimate).read_text())
        scale = float(est["params"]["stiffness_scale"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"cannot read estimate {args.estimate}: {exc}") from exc
    name = args.material or est.get("material")
    if not name:
        raise InvalidInputError("estimate names no material; pass --material")
    mat = get_material(name, cfg.material_table())
    matrix = effective_stiffness(mat, scale)
    with open(out / "stiffness.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in matrix])
    (out / "stiffness.svg").write_text(
        stiffness_svg(matrix, f"{mat.name}: bending stiffness (N*m), scale {scale:.4g}"))
    return summary(command="plot-stiffness", material=mat.name, stiffness_scale=scale,
                   rows=matrix.shape[0], cols=matrix.shape[1], csv=out / "stiffness.csv",
                   config_digest=digest)


# ---------------------------------------------------------------- parser

def _physical_flags(p, required=True):
    p.add_argument("--material", required=True)
    p.add_argument("--stiffness", type=float, default=1.0, help="stiffness scale")
    p.add_argument("--wind", type=float, required=required, help="wind speed, m/s")
    p.add_argument("--area-weight", type=float, required=required, help="kg/m^2")
    p.add_argument("--frames", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help=f"run config JSON (default: ${CONFIG_ENV}, else built-in defaults)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fabricphys", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate one parameter set")
    _physical_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-dataset", parents=[common], help="generate a labelled corpus")
    p.add_argument("--material", required=True)
    p.add_argument("--combos", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("make-target", parents=[common], help="render a hidden-parameter target")
    _physical_flags(p)
    p.add_argument("--camera-seed", type=int, default=None)
    p.set_defaults(func=cmd_make_target)

    p = sub.add_parser("ingest", parents=[common], help="wrap captured frames as a target")
    p.add_argument("--capture", required=True)
    p.add_argument("--material", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train the embedding network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--triplets-per-epoch", type=int)
    p.add_argument("--holdout-camera", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="clustering accuracy on the map")
    p.add_argument("--manifest", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--camera", type=int, default=None, help="only samples from this camera")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("estimate", parents=[common], help="recover parameters for a target")
    p.add_argument("--target", required=True)
    p.add_argument("--net", required=True)
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("plot-stiffness", parents=[common], help="3x5 stiffness CSV and SVG")
    p.add_argument("--estimate", required=True, help="estimate.json from the estimate command")
    p.add_argument("--material", default=None)
    p.set_defaults(func=cmd_plot_stiffness)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        line = args.func(args, cfg)
    except ConfigError as exc:
        print(f"fabricphys {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (FabricPhysError, OSError) as exc:
        print(f"fabricphys {args.command}: {exc}", file=sys.stderr)
        return 1
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
