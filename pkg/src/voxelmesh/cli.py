"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 input error, 4 numeric failure.
Settings resolve as built-in defaults, then ``--config``, then flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .backbone import WeightStore
from .config import PipelineConfig, load_config
from .enhance import EnhanceParams, enhance_geometry, enhancement_report, load_normals
from .evaluation import eval_rig, evaluate, evaluate_manifest
from .meshing import extract_mesh
from .meshio import load_mesh, save_mesh

log = logging.getLogger("voxelmesh")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    """A named input could not be read or parsed."""

    def __init__(self, path, reason):
        super().__init__(f"cannot read {path}: {reason}")
        self.path = path


def workers() -> int:
    """Worker count for nearest-neighbor queries, from ``VOXELMESH_THREADS``."""
    raw = os.environ.get("VOXELMESH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError("VOXELMESH_THREADS", f"not an integer: {raw!r}") from None
    return -1 if n <= 0 else n


def _read(path, loader):
    path = Path(path)
    if not path.exists():
        raise InputError(path, "no such file or directory")
    try:
        return loader(path)
    except InputError:
        raise
    except Exception as exc:  # noqa: BLE001 - any parse failure is an input error
        raise InputError(path, str(exc) or type(exc).__name__) from exc


def _config(args) -> PipelineConfig:
    cfg = _read(args.config, load_config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _enhance_params(cfg: PipelineConfig, args) -> EnhanceParams:
    base = cfg.enhance
    return EnhanceParams(
        alpha=base.alpha if args.alpha is None else args.alpha,
        beta=base.beta if args.beta is None else args.beta,
        iterations=base.iterations if args.iterations is None else args.iterations,
        step_size=base.step_size if args.step_size is None else args.step_size,
        max_displacement=base.max_displacement if args.max_displacement is None else args.max_displacement,
    )


def _finite(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_json(obj, path) -> None:
    """Strict JSON (non-finite floats become null), to a file or stdout."""
    text = json.dumps(_finite(obj), indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# --------------------------------------------------------------------------
# Commands


def cmd_fixtures(args) -> int:
    from .fixtures import write_fixture

    cfg = _config(args)
    res = args.sdf_resolution or cfg.sdf_resolution
    try:
        paths = write_fixture(args.out, args.shape, args.views, args.size, res, workers=max(workers(), 1))
    except OSError as exc:
        raise InputError(args.out, exc.strerror or str(exc)) from exc
    log.info("fixture written to %s", paths.root)
    return EXIT_OK


def cmd_sdf(args) -> int:
    from .volume import GridSpec, mesh_to_sdf, save_volume

    cfg = _config(args)
    mesh = _read(args.mesh, load_mesh)
    spec = GridSpec.cube(args.resolution or cfg.sdf_resolution,
                         args.half_extent if args.half_extent is not None else cfg.half_extent)
    save_volume(mesh_to_sdf(mesh, spec, workers=max(workers(), 1)), args.out)
    return EXIT_OK


def cmd_extract(args) -> int:
    from .volume import load_volume

    _config(args)
    vol = _read(args.sdf, load_volume)
    if not hasattr(vol, "values") or vol.values.ndim != 3:
        raise InputError(args.sdf, "expected a scalar dense volume")
    mesh = extract_mesh(vol, iso=args.iso)
    if mesh.is_empty:
        log.warning("no zero crossing; writing an empty mesh")
    save_mesh(mesh, args.out)
    return EXIT_OK


def cmd_enhance(args) -> int:
    cfg = _config(args)
    mesh = _read(args.mesh, load_mesh)
    if args.normals:
        targets = _read(args.normals, load_normals)
    elif mesh.normals is not None:
        targets = mesh.normals
    else:
        raise InputError(args.mesh, "mesh has no normal texture and --normals was not given")
    params = _enhance_params(cfg, args)
    out = enhance_geometry(mesh, targets, params)
    save_mesh(out, args.out)
    if args.report:
        _write_json(enhancement_report(mesh, out, targets).to_dict(), args.report)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    rig = [] if args.no_images else eval_rig(args.views, args.size)
    kwargs = dict(rig=rig, n_points=args.points, threshold=args.threshold, seed=cfg.seed, workers=workers())
    if args.manifest:
        _read(args.manifest, lambda p: json.loads(p.read_text()))
        if args.out is None:
            raise InputError("--out", "batch mode needs an output CSV path")
        evaluate_manifest(args.manifest, args.out, load=lambda p: _read(p, load_mesh), **kwargs)
        return EXIT_OK
    if not args.pred or not args.gt:
        raise _Usage("eval needs PRED and GT meshes, or --manifest")
    pred = _read(args.pred, load_mesh)
    gt = _read(args.gt, load_mesh)
    report = evaluate(pred, gt, **kwargs)
    _write_json(report.to_dict(), args.out)
    return EXIT_OK


def cmd_render(args) -> int:
    from .camera import ring_rig, save_views
    from .fixtures import render_views

    _config(args)
    mesh = _read(args.mesh, load_mesh)
    save_views(render_views(mesh, ring_rig(args.views, size=args.size)), args.out)
    return EXIT_OK


def cmd_weights(args) -> int:
    cfg = _config(args)
    preset = args.preset or cfg.preset
    cfg = cfg.with_overrides(preset=preset)
    WeightStore.initialize(cfg.arch, cfg.seed).save(args.out)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .camera import load_views
    from .pipeline import reconstruct
    from .volume import load_volume

    cfg = _config(args)
    cfg = cfg.with_overrides(preset=args.preset, weights=args.weights,
                             skip_enhance=True if args.skip_enhance else None)
    views = _read(args.views_dir, lambda p: load_views(p, prefer_float=not args.png))
    weights = None
    if cfg.weights:
        weights = _read(cfg.weights, lambda p: WeightStore.load(p, cfg.arch))
    gt_path = args.gt_sdf
    if args.occupancy_from_gt_sdf and gt_path is None:
        gt_path = Path(args.views_dir) / "sdf.vxm"
    gt_sdf = _read(gt_path, load_volume) if gt_path else None
    result = reconstruct(views, cfg, weights, gt_sdf, occupancy_from_gt=args.occupancy_from_gt_sdf)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(result.mesh, out)
    if not cfg.skip_enhance:
        save_mesh(result.pre_enhance, checkpoint_path(out))
    _write_json(result.loss.to_dict(), out.with_name(out.stem + ".loss.json"))
    _write_json(result.provenance, out.with_name(out.stem + ".provenance.json"))
    log.info("reconstructed %d vertices, %d faces in %.2fs", result.mesh.n_vertices,
             result.mesh.n_faces, result.wall_time)
    return EXIT_OK


def checkpoint_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.stem + ".pre_enhance" + out.suffix)


# --------------------------------------------------------------------------
# Parser


class _Usage(Exception):
    pass


def _common(p):
    p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    p.add_argument("--config", default=None, help="pipeline config file (.toml or .json)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _enhance_flags(p):
    p.add_argument("--alpha", type=float, default=None, help="weight of the stay-close term")
    p.add_argument("--beta", type=float, default=None, help="weight of the normal-alignment term")
    p.add_argument("--iterations", type=int, default=None, help="gradient-descent iterations")
    p.add_argument("--step-size", type=float, default=None, help="initial step size")
    p.add_argument("--max-displacement", type=float, default=None, help="per-vertex displacement cap")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelmesh", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fixtures", help="write a synthetic textured fixture")
    _common(p)
    p.add_argument("--shape", default="sphere", choices=["sphere", "cube", "torus", "composite"])
    p.add_argument("--views", type=int, default=6, help="number of ring cameras")
    p.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    p.add_argument("--sdf-resolution", type=int, default=None, help="ground-truth SDF grid resolution")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("sdf", help="signed distance volume of a closed mesh")
    _common(p)
    p.add_argument("mesh", help="input .obj or .ply")
    p.add_argument("--resolution", type=int, default=None, help="grid resolution")
    p.add_argument("--half-extent", type=float, default=None, help="grid half size around the origin")
    p.add_argument("--out", required=True, help="output .vxm volume")
    p.set_defaults(func=cmd_sdf)

    p = sub.add_parser("extract", help="extract the zero level set of an SDF volume")
    _common(p)
    p.add_argument("sdf", help="input .vxm scalar volume")
    p.add_argument("--iso", type=float, default=0.0, help="iso level")
    p.add_argument("--out", required=True, help="output .obj or .ply")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("enhance", help="refine vertices toward a normal field")
    _common(p)
    p.add_argument("mesh", help="input mesh; its normal texture is the target unless --normals is given")
    p.add_argument("--normals", default=None, help="NRM1 file of per-vertex target normals")
    _enhance_flags(p)
    p.add_argument("--report", default=None, help="write a normal-consistency JSON report here")
    p.add_argument("--out", required=True, help="output .obj or .ply")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="align and score a mesh against ground truth")
    _common(p)
    p.add_argument("pred", nargs="?", help="predicted mesh")
    p.add_argument("gt", nargs="?", help="ground-truth mesh")
    p.add_argument("--manifest", default=None, help="JSON list of pred/gt pairs (batch mode, CSV output)")
    p.add_argument("--points", type=int, default=100_000, help="surface samples per mesh")
    p.add_argument("--threshold", type=float, default=0.05, help="F-score distance threshold")
    p.add_argument("--views", type=int, default=24, help="cameras for image metrics")
    p.add_argument("--size", type=int, default=320, help="image size for image metrics")
    p.add_argument("--no-images", action="store_true", help="skip PSNR (reported as NaN)")
    p.add_argument("--out", default=None, help="report path (JSON, or CSV in batch mode); stdout if omitted")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a mesh from a ring of cameras")
    _common(p)
    p.add_argument("mesh", help="input mesh")
    p.add_argument("--views", type=int, default=6, help="number of ring cameras")
    p.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("weights", help="write seeded backbone weights (MFW1)")
    _common(p)
    p.add_argument("--preset", default=None, choices=["toy", "paper"], help="architecture preset")
    p.add_argument("--out", required=True, help="output weight file")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("reconstruct", help="feed-forward reconstruction from posed views")
    _common(p)
    p.add_argument("views_dir", help="directory with rig.json and per-view images")
    p.add_argument("--preset", default=None, choices=["toy", "paper"], help="architecture preset")
    p.add_argument("--weights", default=None, help="MFW1 weight file (seeded init if omitted)")
    p.add_argument("--gt-sdf", default=None, help="ground-truth SDF for the volume loss terms")
    p.add_argument("--occupancy-from-gt-sdf", action="store_true",
                   help="take coarse occupancy from the ground-truth SDF (default VIEWS_DIR/sdf.vxm)")
    p.add_argument("--skip-enhance", action="store_true", help="skip geometry enhancement")
    p.add_argument("--png", action="store_true", help="read 8-bit PNG views even when PFMs exist")
    p.add_argument("--out", required=True, help="output .obj or .ply; sidecar JSON files go next to it")
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except _Usage as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
