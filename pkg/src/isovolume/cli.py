"""Command line interface: ``isovolume <subcommand> ...``.

Audit statistics and tables are printed to stdout as JSON.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .color import compare_images
from .convergence import DEFAULT_DS, DEFAULT_RF_TOLERANCES, convergence_study
from .fixtures import FIXTURES, fixture_scene
from .inversion import METHODS, IntegratorSpec
from .pipeline import DEFAULT_DS_FRACTION, build_mesh, render, render_voxel, voxelize
from .surfnet import write_tessellation

log = logging.getLogger("isovolume")


def _scene_with_overrides(args):
    cfg = io.load_scene_config(args.scene)
    scene = io.scene_from_config(cfg)
    method = getattr(args, "method", None)
    ds = getattr(args, "ds", None)
    if method or ds:
        m = method or scene.integrator.method
        if ds is None:
            ds = DEFAULT_DS_FRACTION[m] * scene.diagonal if method else scene.integrator.ds
        c = scene.integrator.c if not method else None
        scene = scene.with_integrator(IntegratorSpec(m, c=c, ds=ds, tol=scene.integrator.tol))
    return cfg, scene


def _echo(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def _check_flags(stats: dict, limit) -> int:
    if limit is not None and stats.get("flagged_pixels", 0) > limit:
        log.error("%d flagged pixels exceed the limit of %d", stats["flagged_pixels"], limit)
        return 3
    return 0


def cmd_render(args) -> int:
    cfg, scene = _scene_with_overrides(args)
    if args.echo:
        _echo({"scene": cfg})
    result = render(scene, audit=not args.no_audit)
    out = args.output or cfg["output"].get("image")
    if out:
        io.write_image(out, result.image)
    flags_out = args.flags or cfg["output"].get("flags")
    if flags_out:
        io.write_image(flags_out, result.flag_image())
    _echo({"stats": result.stats})
    return _check_flags(result.stats, args.max_flagged)


def cmd_voxelize(args) -> int:
    _, scene = _scene_with_overrides(args)
    grid = voxelize(scene.blocks, args.resolution)
    io.save_voxel_grid(grid, args.output)
    _echo({"resolution": list(grid.resolution), "inside": int(grid.inside.sum()), "lo": grid.lo.tolist(), "hi": grid.hi.tolist()})
    return 0


def cmd_render_voxel(args) -> int:
    cfg, scene = _scene_with_overrides(args)
    grid = io.load_voxel_grid(args.grid) if args.grid else voxelize(scene.blocks, args.resolution)
    result = render_voxel(scene, grid, ds=args.ds)
    out = args.output or cfg["output"].get("image")
    if out:
        io.write_image(out, result.image)
    _echo({"stats": result.stats})
    return 0


def cmd_compare(args) -> int:
    a, b = io.read_image(args.image_a), io.read_image(args.image_b)
    stats, _, heat = compare_images(a, b)
    if args.heatmap:
        io.write_image(args.heatmap, heat)
    _echo(stats)
    return 0


def cmd_converge(args) -> int:
    table = convergence_study(args.map, args.methods, args.ds, args.c, args.tol)
    if args.json:
        Path(args.json).write_text(table.to_json())
    print(table.format())
    return 0


def cmd_tessdump(args) -> int:
    _, scene = _scene_with_overrides(args)
    mesh = build_mesh(scene)
    write_tessellation(mesh, args.output)
    _echo({"triangles": len(mesh), "vertices": int(mesh.geometry.shape[0] * 3)})
    return 0


def cmd_fixtures(args) -> int:
    names = FIXTURES if args.name == "all" else [args.name]
    for name in names:
        scene = fixture_scene(name, args.width, args.height, args.method)
        path = io.export_scene(scene, args.directory, stem=name)
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="isovolume", description="Pixel-accurate volume rendering of B-spline volumes.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    def scene_args(p, method=True):
        p.add_argument("scene", help="scene JSON file")
        if method:
            p.add_argument("--method", choices=METHODS, help="override the integrator")
            p.add_argument("--ds", type=float, help="override the sample distance (world units)")

    p = sub.add_parser("render", help="render a scene with the direct method")
    scene_args(p)
    p.add_argument("-o", "--output", help="output image (.ppm or .png)")
    p.add_argument("--flags", help="diagnostic image marking flagged pixels")
    p.add_argument("--no-audit", action="store_true", help="skip the pixel-accuracy audit")
    p.add_argument("--max-flagged", type=int, default=None, help="exit with status 3 when more pixels are flagged")
    p.add_argument("--echo", action="store_true", help="print the scene with defaults filled in")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("voxelize", help="resample a scene onto a regular grid")
    scene_args(p, method=False)
    p.add_argument("-r", "--resolution", type=int, nargs="+", default=[64])
    p.add_argument("-o", "--output", required=True, help="output .npz file")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("render-voxel", help="render a scene from its voxelized version")
    scene_args(p)
    p.add_argument("--grid", help=".npz grid written by 'voxelize' (otherwise built on the fly)")
    p.add_argument("-r", "--resolution", type=int, nargs="+", default=[64])
    p.add_argument("-o", "--output", help="output image (.ppm or .png)")
    p.set_defaults(func=cmd_render_voxel)

    p = sub.add_parser("compare", help="CIEDE2000 difference of two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--heatmap", help="write the banded difference image here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("converge", help="convergence study on an analytic map")
    p.add_argument("--map", default="damped-wave")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--ds", type=float, nargs="+", default=list(DEFAULT_DS))
    p.add_argument("--c", type=float, default=None, help="attraction constant (default 1, 100 for irk1)")
    p.add_argument("--tol", type=float, nargs="+", default=list(DEFAULT_RF_TOLERANCES), help="root-finding tolerances")
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("tessdump", help="write the boundary tessellation of a scene")
    scene_args(p, method=False)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_tessdump)

    p = sub.add_parser("fixtures", help="write the built-in synthetic scenes as files")
    p.add_argument("name", choices=list(FIXTURES) + ["all"])
    p.add_argument("directory")
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--method", choices=METHODS, default="rk2")
    p.set_defaults(func=cmd_fixtures)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "resolution", None) is not None:
        r = args.resolution
        args.resolution = r[0] if len(r) == 1 else tuple(r)
    try:
        return args.func(args)
    except io.SceneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
