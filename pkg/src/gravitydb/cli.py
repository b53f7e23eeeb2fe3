"""Command-line entry point.

Commands: ``refine``, ``metrics``, ``contact``, ``gen`` and ``verify``.
Exit codes: 0 success, 2 validation error, 3 numerical abort (1 when a
verification check fails). Numeric parameters come from the run config;
``--set key=value`` overrides single keys and ``--seed`` overrides
``io.seed``. Set ``GRAVITYDB_THREADS`` to bound k-d tree worker threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .bridge import run_bridge
from .config import RunConfig, load_config
from .contact import load_external_mask, nearest_point_mask, ray_based_mask, write_mask
from .errors import NumericalError, ValidationError
from .geometry import OrientedPointCloud, vertex_normals
from .meshio import read_geometry, write_obj, write_ply
from .metrics import evaluate
from .scenes import DEFECTS, KINDS, load_scene, make_grasp_scene, save_scene

log = logging.getLogger("gravitydb")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"io.seed={int(args.seed)}")
    return load_config(args.config, overrides)


def _scene(cfg: RunConfig, scene_dir):
    return load_scene(scene_dir, tau=cfg.mask.tau, softness=cfg.mask.softness)


def _apply_mask_method(scene, cfg: RunConfig):
    method = cfg.mask.method
    if method == "nearest":
        scene.mask = nearest_point_mask(scene.hand, scene.object, cfg.mask.tau, cfg.mask.softness)
    elif method == "ray":
        scene.mask = ray_based_mask(scene.hand, scene.object, cfg.mask.max_range)
    elif method == "external":
        if cfg.mask.path is None:
            raise ValidationError("mask.method=external needs mask.path")
        scene.mask = load_external_mask(cfg.mask.path, scene.hand, scene.object)
    return scene


def cmd_refine(cfg: RunConfig, scene_dir, out_dir) -> int:
    scene = _apply_mask_method(_scene(cfg, scene_dir), cfg)
    seed = cfg.io.seed
    refined, trace = run_bridge(scene, cfg.bridge, seed=seed, field_template=cfg.field)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "refined_hand.ply", refined.points, refined.normals, scene.hand_faces, refined.labels)
    if scene.hand_faces is not None:
        write_obj(out / "refined_hand.obj", refined.points, refined.normals, scene.hand_faces)
    (out / "trace.csv").write_text(trace.to_csv(), encoding="utf-8")
    manifest = {
        "version": __version__,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": seed,
        "scene": scene.meta.get("name"),
        "mask_provenance": scene.mask.provenance,
        "stop_reason": trace.stop_reason,
        "iterations": trace.iterations,
        "stage_starts": trace.stage_starts,
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("refined %s: %s after %d iterations", scene_dir, trace.stop_reason, trace.iterations)
    return EXIT_OK


def load_refined(path, scene) -> tuple[OrientedPointCloud, object]:
    raw = read_geometry(path)
    if len(raw.points) != len(scene.hand):
        raise ValidationError(f"{path}: {len(raw.points)} points for a {len(scene.hand)}-point hand")
    normals = raw.normals
    if normals is None and raw.faces is not None:
        normals = vertex_normals(raw.points, raw.faces)
    labels = raw.labels if raw.labels is not None else scene.hand.labels
    return OrientedPointCloud(raw.points, normals, labels), raw.faces


def cmd_metrics(cfg: RunConfig, scene_dir, refined_path, out_path) -> int:
    scene = _scene(cfg, scene_dir)
    if refined_path is None:
        hand, faces = scene.hand, scene.hand_faces
    else:
        hand, faces = load_refined(refined_path, scene)
    rep = evaluate(hand, scene.object, scene.gt_hand, faces, cfg.metrics.iv_resolution)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = rep.to_json()
    data["pd_within_tolerance"] = rep.pd_mm <= cfg.metrics.pd_tolerance * 1000.0
    out.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    out.with_suffix(".csv").write_text(rep.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_contact(cfg: RunConfig, scene_dir, method, out_path) -> int:
    scene = _scene(cfg, scene_dir)
    if method == "nearest":
        mask = nearest_point_mask(scene.hand, scene.object, cfg.mask.tau, cfg.mask.softness)
    elif method == "ray":
        mask = ray_based_mask(scene.hand, scene.object, cfg.mask.max_range)
    else:
        if cfg.mask.path is None:
            raise ValidationError("method external needs --set mask.path=<file or dir>")
        mask = load_external_mask(cfg.mask.path, scene.hand, scene.object)
    write_mask(mask, out_path)
    return EXIT_OK


def cmd_gen(kind, defect, magnitude, seed, out_dir, point_count=8192, object_points=8192) -> int:
    scene = make_grasp_scene(kind, defect, magnitude, seed, point_count, object_points)
    save_scene(scene, out_dir)
    return EXIT_OK


def cmd_verify(quick: bool = False) -> int:
    from .verify import run_all

    results = run_all(quick=quick)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    common.add_argument("--seed", type=int, help="override io.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gravitydb", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("refine", parents=[common], help="refine a scene's hand")
    r.add_argument("scene", help="scene directory")
    r.add_argument("--out", required=True, help="output directory")

    m = sub.add_parser("metrics", parents=[common], help="evaluate interaction metrics")
    m.add_argument("scene", help="scene directory")
    m.add_argument("--refined", help="refined hand PLY/OBJ (default: the scene hand)")
    m.add_argument("--out", required=True, help="report JSON path (a CSV row is written alongside)")

    c = sub.add_parser("contact", parents=[common], help="compute or import a contact mask")
    c.add_argument("scene", help="scene directory")
    c.add_argument("--method", choices=("nearest", "ray", "external"), required=True)
    c.add_argument("--out", required=True, help="mask path (.json) or directory for CSV files")

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic grasp scene")
    g.add_argument("--kind", default="sphere", help=f"one of {', '.join(KINDS)}")
    g.add_argument("--defect", default="none", help=f"one of {', '.join(DEFECTS)}")
    g.add_argument("--magnitude", type=float, default=0.005, help="defect size in metres")
    g.add_argument("--points", type=int, default=8192, help="hand point count")
    g.add_argument("--object-points", type=int, default=8192, help="object sample count")
    g.add_argument("--out", required=True, help="output scene directory")

    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("--quick", action="store_true", help="smaller scenes, fewer repetitions")
    v.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "verify":
            return cmd_verify(args.quick)
        if args.command == "gen":
            cfg = _config(args)
            return cmd_gen(args.kind, args.defect, args.magnitude, cfg.io.seed, args.out, args.points, args.object_points)
        cfg = _config(args)
        if args.command == "refine":
            return cmd_refine(cfg, args.scene, args.out)
        if args.command == "metrics":
            return cmd_metrics(cfg, args.scene, args.refined, args.out)
        return cmd_contact(cfg, args.scene, args.method, args.out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
