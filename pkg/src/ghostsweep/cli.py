"""Command line front end: ``ghostsweep clean | eval | synth``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import EvalReport, score
from .grid import dump_words_csv, make_grid_config
from .pointcloud_io import (DEFAULT_DYNAMIC_LABELS, LabeledCloud, _parse_header, read_cloud,
                            read_pose_file, read_scan, write_cloud)
from .removal import RemovalState, build_map, finalize, process_scan
from .synth import SceneError, SceneSpec, parse_scene_spec, synth_scene, write_scene

log = logging.getLogger("ghostsweep")

CLEAN_OUTPUTS = ("static.pcd", "dynamic.pcd", "run_log.jsonl", "report.json")


class CLIError(Exception):
    """A failure that should end the run with a one-line message."""


@dataclass
class RunConfig:
    map: Optional[str] = None
    scans: Optional[str] = None
    poses: Optional[str] = None
    pose_source: str = "viewpoint"
    already_global: bool = False
    out: Optional[str] = None
    overwrite: bool = False
    # grid options; None keeps the library default
    res_g: Optional[float] = None
    res_h: Optional[float] = None
    n_bit: Optional[int] = None
    ground_ratio: Optional[float] = None
    fine_factor: Optional[int] = None
    mad_radius: Optional[int] = None
    min_range: Optional[float] = None
    max_range: Optional[float] = None
    no_cache: bool = False
    no_ground_module: bool = False
    no_restoration: bool = False
    eval_labels: Optional[str] = None
    dynamic_labels: tuple[int, ...] = tuple(sorted(DEFAULT_DYNAMIC_LABELS))
    threads: int = 1
    dump_grids: bool = False
    format: str = "binary"

    def grid_overrides(self) -> dict:
        return dict(res_g=self.res_g, res_h=self.res_h, n_bit=self.n_bit,
                    ground_ratio=self.ground_ratio, fine_factor=self.fine_factor,
                    mad_window_radius=self.mad_radius, min_range=self.min_range,
                    max_range=self.max_range)


_BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True,
               "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, value: str, default):
    if isinstance(default, bool):
        try:
            return _BOOL_WORDS[value.lower()]
        except KeyError:
            raise CLIError(f"config: '{name}' expects a boolean, got '{value}'") from None
    if name == "dynamic_labels":
        return tuple(int(v) for v in value.replace(",", " ").split())
    if name in ("n_bit", "fine_factor", "mad_radius", "threads"):
        return int(value)
    if name in ("res_g", "res_h", "ground_ratio", "min_range", "max_range"):
        return float(value)
    return value


def read_config_file(path: str) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    known = {f.name: f.default for f in fields(RunConfig)}
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        key = key.replace("-", "_")
        if not sep or key not in known:
            raise CLIError(f"{path}:{lineno}: unknown or malformed entry '{raw.strip()}'")
        try:
            out[key] = _coerce(key, value, known[key])
        except ValueError:
            raise CLIError(f"{path}:{lineno}: bad value for {key}: '{value}'") from None
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge built-in defaults, the optional config file and explicit flags."""
    merged = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    names = {f.name for f in fields(RunConfig)}
    merged.update({k: v for k, v in vars(args).items() if k in names})
    if isinstance(merged.get("dynamic_labels"), str):
        merged["dynamic_labels"] = _coerce("dynamic_labels", merged["dynamic_labels"], ())
    return RunConfig(**merged)


def find_scans(spec: str) -> list[Path]:
    """A directory (all ``*.pcd`` inside) or a glob pattern, sorted by name."""
    p = Path(spec)
    if p.is_dir():
        paths = sorted(p.glob("*.pcd"))
    else:
        paths = sorted(Path(s) for s in glob.glob(spec))
    if not paths:
        raise CLIError(f"no scan files match {spec}")
    return paths


def _require_file(path: Optional[str], what: str) -> str:
    if not path:
        raise CLIError(f"{what} is required")
    if not Path(path).is_file():
        raise CLIError(f"{what} not found: {path}")
    return path


def _check_outputs(out: Path, names: Sequence[str], overwrite: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not overwrite:
        raise CLIError(f"{out / existing[0]} already exists (pass --overwrite to replace)")


def _load_scans(paths: list[Path], cfg: RunConfig, poses: Optional[np.ndarray]):
    """Yield scans in sequence order, reading ahead with a thread pool."""
    def load(item):
        seq, path = item
        return read_scan(path, pose_source=cfg.pose_source, poses=poses, row=seq,
                         already_global=cfg.already_global, sequence_id=seq)

    workers = max(1, int(cfg.threads))
    if workers == 1:
        for item in enumerate(paths):
            yield load(item)
        return
    items = list(enumerate(paths))
    chunk = 2 * workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(items), chunk):
            yield from pool.map(load, items[start:start + chunk])


def cmd_clean(cfg: RunConfig) -> int:
    map_path = _require_file(cfg.map, "--map")
    if not cfg.scans:
        raise CLIError("--scans is required")
    if not cfg.out:
        raise CLIError("--out is required")
    if cfg.format not in ("binary", "ascii"):
        raise CLIError(f"unknown output format '{cfg.format}'")
    scan_paths = find_scans(cfg.scans)
    poses = None
    if cfg.poses is not None or cfg.pose_source == "pose_file":
        poses = read_pose_file(_require_file(cfg.poses, "--poses"))
        if len(poses) < len(scan_paths):
            raise CLIError(f"{cfg.poses} has {len(poses)} poses for {len(scan_paths)} scans")
    out = Path(cfg.out)
    _check_outputs(out, CLEAN_OUTPUTS, cfg.overwrite)

    cloud = read_cloud(map_path, label_field=cfg.eval_labels, dynamic_labels=cfg.dynamic_labels)
    config = make_grid_config(cloud, **cfg.grid_overrides())
    model = build_map(cloud, config, adaptive_ground=not cfg.no_ground_module)
    state = RemovalState(dims=config.dims, use_cache=not cfg.no_cache,
                         use_ground=not cfg.no_ground_module,
                         use_restoration=not cfg.no_restoration)
    log.info("map %s: %d points, grid %dx%d, %d scans", map_path, len(cloud),
             *config.dims, len(scan_paths))

    out.mkdir(parents=True, exist_ok=True)
    grid_dir = out / "grids"
    if cfg.dump_grids:
        grid_dir.mkdir(exist_ok=True)
        dump_words_csv(grid_dir / "map_words.csv", model.matrix.words, config.n_bit,
                       model.matrix.point_count)
        model.ground.dump_csv(grid_dir / "ground.csv")

    with open(out / "run_log.jsonl", "w") as fh:
        for scan in _load_scans(scan_paths, cfg, poses):
            rec = process_scan(scan, model.matrix, state, config, keep_masks=cfg.dump_grids)
            fh.write(json.dumps(rec.as_json(), sort_keys=True) + "\n")
            if cfg.dump_grids:
                tag = f"{scan.sequence_id:06d}"
                dump_words_csv(grid_dir / f"scan_{tag}_raw.csv", rec.raw_mask.dense(), config.n_bit)
                dump_words_csv(grid_dir / f"scan_{tag}_kept.csv", rec.kept_mask.dense(),
                               config.n_bit)
    if cfg.dump_grids:
        dump_words_csv(grid_dir / "accumulated.csv", state.accumulated, config.n_bit)

    static, dynamic = finalize(state, model.matrix, cloud)
    if len(static) + len(dynamic) != len(cloud) or np.intersect1d(static.indices,
                                                                   dynamic.indices).size:
        raise CLIError("internal error: static and dynamic outputs do not partition the map")
    _write_part(static, out / "static.pcd", cfg.format)
    _write_part(dynamic, out / "dynamic.pcd", cfg.format)
    print(f"static: {len(static)} points, dynamic: {len(dynamic)} points -> {out}")

    if cfg.eval_labels is not None:
        runtimes = [r.elapsed_ms / 1e3 for r in state.records]
        report = score(static.indices, cloud, runtimes)
        (out / "report.json").write_text(report.to_json() + "\n")
        print(report.table())
    return 0


def _write_part(cloud: LabeledCloud, path: Path, fmt: str) -> None:
    # an empty partition is still a valid (header-only) PCD
    if len(cloud) == 0:
        path.write_text(_empty_pcd())
        return
    write_cloud(cloud, path, fmt)


def _empty_pcd() -> str:
    return ("# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z index\n"
            "SIZE 4 4 4 4\nTYPE F F F U\nCOUNT 1 1 1 1\nWIDTH 0\nHEIGHT 1\n"
            "VIEWPOINT 0 0 0 1 0 0 0\nPOINTS 0\nDATA ascii\n")


def _pcd_fields(path: str) -> list[str]:
    lines = []
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("ascii", errors="replace").strip()
            lines.append(line)
            if line.upper().startswith("DATA"):
                break
    return _parse_header(lines).fields


def match_by_coordinates(result: LabeledCloud, gt: LabeledCloud) -> np.ndarray:
    """GT indices for each result point by exact coordinate match.

    Duplicated coordinates are consumed one at a time. Raises if any result
    point has no counterpart.
    """
    table: dict[tuple, list[int]] = {}
    for xyz, idx in zip(gt.xyz.tolist(), gt.indices.tolist()):
        table.setdefault(tuple(xyz), []).append(idx)
    for lst in table.values():
        lst.reverse()
    matched, missing = [], 0
    for xyz in result.xyz.tolist():
        lst = table.get(tuple(xyz))
        if lst:
            matched.append(lst.pop())
        else:
            missing += 1
    if missing:
        raise CLIError(f"{missing} result points have no coordinate match in the ground truth")
    return np.asarray(matched, dtype=np.int64)


def cmd_eval(static_path: str, gt_path: str, label_field: str, match: str = "auto",
             report_path: Optional[str] = None, overwrite: bool = False) -> EvalReport:
    _require_file(static_path, "--static")
    _require_file(gt_path, "--gt")
    if not label_field:
        raise CLIError("--eval-labels is required")
    if label_field not in _pcd_fields(gt_path):
        raise CLIError(f"{gt_path}: label field '{label_field}' not present")
    if report_path and Path(report_path).exists() and not overwrite:
        raise CLIError(f"{report_path} already exists (pass --overwrite to replace)")
    gt = read_cloud(gt_path, label_field=label_field)
    result = read_cloud(static_path)
    if match == "auto":
        match = "index" if "index" in _pcd_fields(static_path) else "coords"
    if match == "index":
        kept = result.indices
        missing = np.setdiff1d(kept, gt.indices).size
        if missing:
            raise CLIError(f"{missing} result indices are not in the ground truth")
    elif match == "coords":
        kept = match_by_coordinates(result, gt)
    else:
        raise CLIError(f"unknown match mode '{match}'")
    report = score(kept, gt)
    print(report.table())
    if report_path:
        Path(report_path).write_text(report.to_json() + "\n")
    return report


def cmd_synth(out_dir: str, seed: int = 0, spec_path: Optional[str] = None,
              overwrite: bool = False) -> int:
    if spec_path:
        try:
            text = Path(spec_path).read_text()
        except OSError as exc:
            raise CLIError(f"cannot read scene spec {spec_path}: {exc.strerror}") from None
        spec = parse_scene_spec(text)
    else:
        spec = SceneSpec()
    scene = synth_scene(spec, seed=seed)
    write_scene(scene, out_dir, overwrite=overwrite)
    print(f"wrote {len(scene.map)} map points and {len(scene.scans)} scans to {out_dir}")
    return 0


def _grid_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("grid")
    g.add_argument("--res-g", dest="res_g", type=float, default=S, help="cell size [m]")
    g.add_argument("--res-h", dest="res_h", type=float, default=S, help="bin height [m]")
    g.add_argument("--nbit", dest="n_bit", type=int, default=S, help="bits per cell word (<= 64)")
    g.add_argument("--ground-ratio", dest="ground_ratio", type=float, default=S)
    g.add_argument("--fine-factor", dest="fine_factor", type=int, default=S)
    g.add_argument("--mad-radius", dest="mad_radius", type=int, default=S,
                   help="MAD window radius in cells")
    g.add_argument("--min-range", dest="min_range", type=float, default=S)
    g.add_argument("--max-range", dest="max_range", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="ghostsweep",
                                     description="Remove dynamic points from a LiDAR map.")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("clean", help="split a map into static and dynamic points")
    c.add_argument("--config", help="flat key = value file; flags override it")
    c.add_argument("--map", default=S, help="global map PCD")
    c.add_argument("--scans", default=S, help="scan directory or glob, processed in name order")
    c.add_argument("--poses", default=S, help="KITTI-style pose file (one row per scan)")
    c.add_argument("--pose-source", dest="pose_source", choices=("viewpoint", "pose_file"),
                   default=S)
    c.add_argument("--already-global", dest="already_global", action="store_true", default=S,
                   help="scan points are already in the map frame")
    _grid_flags(c)
    c.add_argument("--no-cache", dest="no_cache", action="store_true", default=S)
    c.add_argument("--no-ground-module", dest="no_ground_module", action="store_true", default=S)
    c.add_argument("--no-restoration", dest="no_restoration", action="store_true", default=S)
    c.add_argument("--eval-labels", dest="eval_labels", metavar="FIELD", default=S,
                   help="label field in the map; enables report.json")
    c.add_argument("--dynamic-labels", dest="dynamic_labels", default=S,
                   help="comma separated label values counted as dynamic")
    c.add_argument("--out", default=S, help="output directory")
    c.add_argument("--overwrite", action="store_true", default=S)
    c.add_argument("--threads", type=int, default=S, help="scan reader threads")
    c.add_argument("--dump-grids", dest="dump_grids", action="store_true", default=S)
    c.add_argument("--format", choices=("binary", "ascii"), default=S)

    e = sub.add_parser("eval", help="score a static map against labeled ground truth")
    e.add_argument("--static", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--eval-labels", dest="eval_labels", metavar="FIELD", required=True)
    e.add_argument("--match", choices=("auto", "index", "coords"), default="auto")
    e.add_argument("--report", help="write the report as JSON here")
    e.add_argument("--overwrite", action="store_true")

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spec", help="scene spec file (key = value lines)")
    s.add_argument("--overwrite", action="store_true")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("GHOSTSWEEP_LOG", "WARNING").upper()
    numeric = int(level) if level.isdigit() else getattr(logging, level, logging.WARNING)
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "clean":
            return cmd_clean(resolve_config(args))
        if args.command == "eval":
            cmd_eval(args.static, args.gt, args.eval_labels, args.match, args.report,
                     args.overwrite)
            return 0
        return cmd_synth(args.out, args.seed, args.spec, args.overwrite)
    except (CLIError, SceneError, FileExistsError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ghostsweep: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
