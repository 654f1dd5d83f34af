"""Command-line front end: each subcommand reads an optional config
file, runs one experiment, and writes CSV/PPM/snapshot artifacts under
--out. Exit codes: 0 success, 2 config or input problems, 3 numeric
failure. Existing files are never overwritten without --force, and every
written path is printed.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, PlrlabError
from .experiments import (
    ablation,
    ablation_config_from,
    gen_toy_dataset,
    illcond_config_from,
    illcond_sweep,
    load_config,
    mim_config_from,
    mnist_mini,
    sweep_config_from,
    toy_sweep,
    _act_label,
)
from .gradcheck import TOLERANCE, run_gradcheck
from .network import load_snapshot
from .regions import decision_raster

__all__ = ["main", "run", "emit_raster", "write_region_sidecar"]

BOUNDS = (-10.0, 10.0, -10.0, 10.0)


# ---------------------------------------------------------------------------
# raster output


def _hash_color(material: bytes) -> int:
    digest = hashlib.blake2b(material, digest_size=3).digest()
    return (digest[0] << 16) | (digest[1] << 8) | digest[2]


def emit_raster(grid: np.ndarray, palette_mode: str, path, patterns=None) -> None:
    """Write an id grid as a binary PPM. Colors come from hashing the
    region's activation pattern (when given) or the bare id, with a
    deterministic probe on collisions so distinct ids never share a
    color. Same grid, same bytes."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ConfigError(f"raster grid must be 2-d, got shape {grid.shape}")
    ids = np.unique(grid)
    used = set()
    lut = np.zeros((int(ids.max()) + 1, 3), dtype=np.uint8)
    for i in ids.tolist():
        if patterns is not None and i < len(patterns):
            material = b"pattern:" + np.asarray(patterns[i]).tobytes()
        else:
            material = f"{palette_mode}:{i}".encode()
        value = _hash_color(material)
        while value in used:
            value = (value + 0x9E3779B1) % (1 << 24)
        used.add(value)
        lut[i] = ((value >> 16) & 0xFF, (value >> 8) & 0xFF, value & 0xFF)
    image = lut[grid]
    h, w = grid.shape
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + image.tobytes())


def write_region_sidecar(grid: np.ndarray, path) -> None:
    """CSV companion for a region raster: pattern id to pixel count."""
    counts = np.bincount(np.asarray(grid).ravel())
    lines = ["pattern_id,point_count"]
    lines += [f"{i},{int(c)}" for i, c in enumerate(counts)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# shared plumbing


def _load_doc(args):
    if args.config is None:
        return {}, "<defaults>"
    return load_config(args.config), str(args.config)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_new(paths, force: bool) -> None:
    if force:
        return
    for p in paths:
        if Path(p).exists():
            raise ConfigError(f"refusing to overwrite {p} (pass --force)")


def _announce(paths) -> None:
    for p in paths:
        print(str(p))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_toy_sweep(args) -> int:
    doc, origin = _load_doc(args)
    cfg = sweep_config_from(doc, origin, seed_override=args.seed)
    out = _out_dir(args)
    csv_path = out / "toy_sweep.csv"
    planned = [csv_path]
    families = [(kind, k) for kind, k in cfg.activations]
    for kind, k in families:
        label = _act_label(kind, k)
        planned += [
            out / f"raster_{label}_class.ppm",
            out / f"raster_{label}_regions.ppm",
            out / f"raster_{label}_regions.csv",
        ]
    _require_new(planned, args.force)

    report = toy_sweep(cfg)
    csv_path.write_text(report.csv_text())
    written = [csv_path]
    for kind, k in families:
        candidates = report.find(kind=kind, k=k, bn=True)
        if not candidates:
            continue
        best = min(candidates, key=lambda c: c.report.mean_test)
        maps = decision_raster(best.best_spec, BOUNDS, args.resolution)
        label = _act_label(kind, k)
        class_p = out / f"raster_{label}_class.ppm"
        regions_p = out / f"raster_{label}_regions.ppm"
        sidecar_p = out / f"raster_{label}_regions.csv"
        emit_raster(maps.class_grid, "class", class_p)
        emit_raster(maps.region_grid, "region", regions_p, patterns=maps.patterns)
        write_region_sidecar(maps.region_grid, sidecar_p)
        written += [class_p, regions_p, sidecar_p]
    _announce(written)
    return 0


def _cmd_illcond(args) -> int:
    doc, origin = _load_doc(args)
    cfg = illcond_config_from(doc, origin, seed_override=args.seed)
    out = _out_dir(args)
    csv_path = out / "illcond.csv"
    _require_new([csv_path], args.force)
    report = illcond_sweep(cfg)
    csv_path.write_text(report.csv_text())
    _announce([csv_path])
    return 0


def _cmd_ablation(args) -> int:
    doc, origin = _load_doc(args)
    partition, train_cfg, runs, layers, width, maxout_k = ablation_config_from(
        doc, origin, seed_override=args.seed
    )
    out = _out_dir(args)
    csv_path = out / "ablation.csv"
    _require_new([csv_path], args.force)
    dataset = gen_toy_dataset(partition, train_cfg.seed)
    report = ablation(
        dataset, runs=runs, train_cfg=train_cfg, layers=layers, width=width, maxout_k=maxout_k
    )
    csv_path.write_text(report.csv_text())
    _announce([csv_path])
    return 0


def _cmd_train_mim(args) -> int:
    doc, origin = _load_doc(args)
    cfg = mim_config_from(doc, origin, seed_override=args.seed)
    out = _out_dir(args)
    csv_path = out / "mim_report.csv"
    snap_path = out / "mim.plr"
    _require_new([csv_path, snap_path], args.force)
    report = mnist_mini(cfg, snapshot_path=snap_path)
    lines = ["epoch,train_err,test_err"]
    lines += [
        f"{i},{tr:.6f},{te:.6f}"
        for i, (tr, te) in enumerate(zip(report.train_errors, report.test_errors))
    ]
    csv_path.write_text("\n".join(lines) + "\n")
    _announce([csv_path, snap_path])
    return 0


def _cmd_regions(args) -> int:
    doc, origin = _load_doc(args)
    allowed = {"regions"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{origin}: unknown section(s): {', '.join(sorted(unknown))}")
    section = doc.get("regions", {})
    known_keys = {"snapshot", "xmin", "xmax", "ymin", "ymax", "resolution"}
    bad = set(section) - known_keys
    if bad:
        raise ConfigError(f"{origin}: unknown key(s) in [regions]: {', '.join(sorted(bad))}")
    snapshot = args.snapshot or section.get("snapshot")
    if not snapshot:
        raise ConfigError("regions needs a snapshot (--snapshot or [regions] snapshot=)")
    try:
        bounds = (
            float(section.get("xmin", BOUNDS[0])),
            float(section.get("xmax", BOUNDS[1])),
            float(section.get("ymin", BOUNDS[2])),
            float(section.get("ymax", BOUNDS[3])),
        )
        resolution = args.resolution or int(section.get("resolution", 200))
    except ValueError as exc:
        raise ConfigError(f"{origin}: [regions]: {exc}") from exc
    out = _out_dir(args)
    class_p = out / "classes.ppm"
    regions_p = out / "regions.ppm"
    sidecar_p = out / "regions.csv"
    _require_new([class_p, regions_p, sidecar_p], args.force)
    spec = load_snapshot(snapshot)
    maps = decision_raster(spec, bounds, resolution)
    emit_raster(maps.class_grid, "class", class_p)
    emit_raster(maps.region_grid, "region", regions_p, patterns=maps.patterns)
    write_region_sidecar(maps.region_grid, sidecar_p)
    _announce([class_p, regions_p, sidecar_p])
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed or 0, instances=args.instances)
    failed = []
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name}: {err:.3e} {status}")
        if err >= TOLERANCE:
            failed.append(name)
    if failed:
        raise NumericError(
            f"gradient check exceeded {TOLERANCE:g} for: {', '.join(failed)}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser and entry points


def _add_common(sub, out_required=True):
    sub.add_argument("--config", default=None, help="experiment config file")
    if out_required:
        sub.add_argument("--out", required=True, help="output directory")
        sub.add_argument("--force", action="store_true", help="overwrite existing outputs")
    sub.add_argument("--seed", type=int, default=None, help="override the training seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plrlab",
        description="Piecewise-linear network laboratory: desk-scale "
        "training sweeps and linear-region analysis.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("toy-sweep", help="train the 2-D grid of toy networks")
    _add_common(p)
    p.add_argument("--resolution", type=int, default=200, help="raster grid resolution")
    p.set_defaults(func=_cmd_toy_sweep)

    p = subs.add_parser("illcond", help="learning-rate sweep with and without batch norm")
    _add_common(p)
    p.set_defaults(func=_cmd_illcond)

    p = subs.add_parser("ablation", help="four-variant activation/normalisation ablation")
    _add_common(p)
    p.set_defaults(func=_cmd_ablation)

    p = subs.add_parser("train-mim", help="reduced three-block convolutional run")
    _add_common(p)
    p.set_defaults(func=_cmd_train_mim)

    p = subs.add_parser("regions", help="rasterize a snapshot's classes and regions")
    _add_common(p)
    p.add_argument("--snapshot", default=None, help="network snapshot to analyse")
    p.add_argument("--resolution", type=int, default=None, help="raster grid resolution")
    p.set_defaults(func=_cmd_regions)

    p = subs.add_parser("gradcheck", help="finite-difference check of every layer kernel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20, help="instances per layer type")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def run(argv) -> int:
    """Parse argv and run one subcommand, mapping failures to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PlrlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        # missing snapshot/IDX files, unwritable output dirs
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run(sys.argv[1:] if argv is None else argv)
