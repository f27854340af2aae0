"""Command-line entry point: ``python -m gcr <command> ...``.

Commands write into ``--out`` and leave a ``manifest.json`` there that
records the resolved configuration; ``replay`` re-runs a command from it.
Per-scene work may run in ``--jobs`` processes; every random draw is keyed
on (seed, scene index, purpose), so the job count never changes results.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .correspondence import CorrespondenceError, build_embeddings, form_correspondences
from .fileio import FormatError, read_depth, read_field, write_depth, write_field
from .fusion import FusionError, FusionParams, fusion_forward
from .geometry import GeometryError, Pose
from .metrics import AUC_THRESHOLDS, MetricError, descriptor_error_map, pose_error
from .pnp import PnpError
from .synth import (ConfigError, DifficultyConfig, Scene, SceneError, _rng, make_scene, perturb_pose,
                    render_depth, render_descriptors, scene_observations)
from .toytrain import (TOY_DIFFICULTY, TrainConfig, TrainingError, evaluate, history_csv, prepare_pair,
                       train)
from .wransac import RansacConfig, RansacError, run_weighted_ransac

log = logging.getLogger("gcr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
HIST_BINS = 20

# substream tags below the per-scene key
_PRIOR, _RANSAC = 505, 606


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(code, message)
        self.code = code
        self.message = message

    def __str__(self) -> str:
        return self.message


def scene_seed(seed: int, index: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, index, *tags]).generate_state(1, np.uint64)[0])


def _fmt(x) -> str:
    return repr(float(x))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, args: dict, config: dict, seed: int, jobs: int,
                    inputs: list[Path], started: float) -> None:
    outputs = sorted(p for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "args": args,
        "config": config,
        "seed": seed,
        "jobs": jobs,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "tool_version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _map(fn, items, jobs: int):
    """Ordered map, optionally over worker processes."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# scene directories -----------------------------------------------------------

def _scene_paths(scene_dir: Path) -> list[Path]:
    if not scene_dir.is_dir():
        raise CliError(EXIT_DATA, f"scene directory not found: {scene_dir}")
    paths = sorted(scene_dir.glob("scene_*.json"))
    if not paths:
        raise CliError(EXIT_DATA, f"no scene_*.json files in {scene_dir}")
    missing = [str(p.with_name(p.stem + suffix)) for p in paths
               for suffix in ("_cam1.dmap", "_cam1.dfield", "_cam2.dfield")
               if not p.with_name(p.stem + suffix).exists()]
    if missing:
        raise CliError(EXIT_DATA, "missing scene files: " + ", ".join(missing))
    return paths


def _load_scene(path: Path):
    try:
        scene = Scene.from_json(path.read_text())
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"{path}: malformed scene ({exc})") from exc
    stem = path.with_name(path.stem)
    depth1 = read_depth(f"{stem}_cam1.dmap")
    f1 = read_field(f"{stem}_cam1.dfield")
    f2 = read_field(f"{stem}_cam2.dfield")
    return scene, depth1, f1, f2


# synth -----------------------------------------------------------------------

def _synth_one(job):
    index, seed, cfg_dict, out = job
    scene = make_scene(scene_seed(seed, index), DifficultyConfig.from_dict(cfg_dict))
    stem = Path(out) / f"scene_{index:04d}"
    Path(f"{stem}.json").write_text(scene.to_json() + "\n")
    for cam in (1, 2):
        write_depth(f"{stem}_cam{cam}.dmap", render_depth(scene, cam))
        write_field(f"{stem}_cam{cam}.dfield", render_descriptors(scene, cam))
    return index


def cmd_synth(args, config: dict, out: Path) -> list[Path]:
    base = TOY_DIFFICULTY if args["preset"] == "toy" else DifficultyConfig()
    cfg = DifficultyConfig.from_dict({**base.to_dict(), **config})
    if args["count"] < 1:
        raise CliError(EXIT_USAGE, "count: must be >= 1")
    snapshot = json.loads(json.dumps(cfg.to_dict()))
    _map(_synth_one, [(i, args["seed"], snapshot, str(out)) for i in range(args["count"])], args["jobs"])
    return [], snapshot


# ransac ----------------------------------------------------------------------

def _ransac_one(job):
    index, path, seed, weights_mode, prior_mode, cfg_dict = job
    scene, depth1, f1, f2 = _load_scene(Path(path))
    rcfg = RansacConfig.from_dict({**cfg_dict["ransac"], "seed": scene_seed(seed, index, _RANSAC)})
    prior = scene.gt_pose
    if prior_mode != "gt":
        prior = perturb_pose(prior, float(prior_mode.split(":", 1)[1]), _rng(seed, index, _PRIOR))
    cs = form_correspondences(depth1, scene.k1, scene.k2, prior, cfg_dict["stride"])
    observed, inlier = scene_observations(scene, cs)
    rows = cs.valid_indices
    if weights_mode == "uniform":
        w = np.ones(len(rows))
    elif weights_mode == "oracle":
        w = inlier[rows].astype(float)
    else:
        params = FusionParams.load(weights_mode.split(":", 1)[1])
        emb = build_embeddings(f1, f2, cfg_dict["stride"], grid_index=cs.grid_index[rows])
        w = fusion_forward(params, emb)
    row = {"scene": Path(path).stem, "valid": int(len(rows))}
    try:
        res = run_weighted_ransac(cs, observed, w, prior, scene.k2, rcfg)
    except RansacError as exc:
        return {**row, "status": str(exc)}
    err = pose_error(res.pose, scene.gt_pose)
    return {**row, "status": "ok", "rotation_error_deg": err.rotation_deg,
            "translation_error_deg": err.translation_deg, "score": res.score, "inliers": res.inlier_count}


RANSAC_COLUMNS = ["scene", "status", "valid", "rotation_error_deg", "translation_error_deg", "score", "inliers"]


def cmd_ransac(args, config: dict, out: Path):
    paths = _scene_paths(Path(args["scenes"]))
    wm, pm = args["weights"], args["prior"]
    if not (wm in ("uniform", "oracle") or wm.startswith("fusion:")):
        raise CliError(EXIT_USAGE, "weights: expected uniform, oracle or fusion:<params dir>")
    if pm != "gt":
        try:
            deg = float(pm.split(":", 1)[1]) if pm.startswith("perturbed:") else None
        except ValueError:
            deg = None
        if deg is None or not deg >= 0:
            raise CliError(EXIT_USAGE, "prior: expected gt or perturbed:<degrees>")
    unknown = set(config) - {"ransac", "stride"}
    if unknown:
        raise CliError(EXIT_USAGE, f"{sorted(unknown)[0]}: unknown field")
    try:
        rcfg = RansacConfig.from_dict(config.get("ransac", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"ransac: {exc}") from exc
    snapshot = {"ransac": asdict(rcfg), "stride": int(config.get("stride", 8))}
    rows = _map(_ransac_one, [(i, str(p), args["seed"], wm, pm, snapshot) for i, p in enumerate(paths)],
                args["jobs"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RANSAC_COLUMNS)
    for r in rows:
        w.writerow([r["scene"], r["status"], r["valid"]]
                   + [_fmt(r[c]) if c in r else "" for c in RANSAC_COLUMNS[3:6]] + [r.get("inliers", "")])
    ok = [r for r in rows if r["status"] == "ok"]
    w.writerow(["median", f"{len(ok)}/{len(rows)} ok", ""]
               + [_fmt(np.median([r[c] for r in ok])) if ok else "" for c in RANSAC_COLUMNS[3:]])
    (out / "results.csv").write_text(buf.getvalue())
    inputs = list(paths)
    if wm.startswith("fusion:"):
        inputs += sorted(Path(wm.split(":", 1)[1]).glob("*"))
    return inputs, snapshot


# train -----------------------------------------------------------------------

def _pair_from(path: str, stride: int):
    scene, depth1, f1, f2 = _load_scene(Path(path))
    return prepare_pair(scene, stride, depth1, f1, f2)


def cmd_train(args, config: dict, out: Path):
    paths = _scene_paths(Path(args["scenes"]))
    held_paths = _scene_paths(Path(args["heldout"])) if args.get("heldout") else []
    try:
        cfg = TrainConfig.from_dict({**config, "seed": args["seed"], "mode": args["mode"]})
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    pairs = _map(_PairLoader(cfg.stride), [str(p) for p in paths], args["jobs"])
    held = _map(_PairLoader(cfg.stride), [str(p) for p in held_paths], args["jobs"])
    reg, history = train(None, cfg, pairs=pairs)
    (out / "history.csv").write_text(history_csv(history))
    (out / "params.json").write_text(json.dumps(reg.to_dict(), indent=2) + "\n")
    split = "heldout" if held else "train"
    ev = evaluate(reg, held or pairs)
    lines = ["threshold_deg,auc_percent,split"]
    lines += [f"{th:g},{_fmt(ev['auc'][float(th)])},{split}" for th in AUC_THRESHOLDS]
    (out / "auc.csv").write_text("\n".join(lines) + "\n")
    snapshot = json.loads(json.dumps(cfg.to_dict()))
    return list(paths) + list(held_paths), snapshot


class _PairLoader:
    def __init__(self, stride: int):
        self.stride = stride

    def __call__(self, path: str):
        return _pair_from(path, self.stride)


# analyze ---------------------------------------------------------------------

def _analyze_one(job):
    index, path, seed, source, poses = job
    scene, depth1, f1, f2 = _load_scene(Path(path))
    name = Path(path).stem
    if source == "gt":
        p = scene.gt_pose
    elif source.startswith("perturbed:"):
        p = perturb_pose(scene.gt_pose, float(source.split(":", 1)[1]), _rng(seed, index, _PRIOR))
    else:
        if name not in poses:
            raise CliError(EXIT_DATA, f"pose file has no entry for {name}")
        p = Pose.from_dict(poses[name])
    emap = descriptor_error_map(f1, f2, depth1, scene.k1, scene.k2, p)
    return name, emap


def cmd_analyze(args, config: dict, out: Path):
    paths = _scene_paths(Path(args["scenes"]))
    src = args["pose"]
    poses, inputs = {}, list(paths)
    if src.startswith("file:"):
        pf = Path(src.split(":", 1)[1])
        try:
            poses = json.loads(pf.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_DATA, f"pose file {pf}: {exc}") from exc
        inputs.append(pf)
    elif src != "gt":
        try:
            ok = src.startswith("perturbed:") and float(src.split(":", 1)[1]) >= 0
        except ValueError:
            ok = False
        if not ok:
            raise CliError(EXIT_USAGE, "pose: expected gt, file:<json> or perturbed:<degrees>")
    if config:
        raise CliError(EXIT_USAGE, f"{sorted(config)[0]}: unknown field")
    results = _map(_analyze_one, [(i, str(p), args["seed"], src, poses) for i, p in enumerate(paths)],
                   args["jobs"])
    counts = np.zeros(HIST_BINS, dtype=np.int64)
    edges = None
    for name, emap in results:
        emap.write_pgm(out / f"{name}_error.pgm")
        emap.write_sidecar(out / f"{name}_error.json")
        c, edges = emap.histogram(HIST_BINS)
        counts += c
    lines = ["bin_lo,bin_hi,count"]
    lines += [f"{_fmt(edges[i])},{_fmt(edges[i + 1])},{int(counts[i])}" for i in range(HIST_BINS)]
    (out / "histogram.csv").write_text("\n".join(lines) + "\n")
    return inputs, {}


# plumbing --------------------------------------------------------------------

COMMANDS = {"synth": cmd_synth, "ransac": cmd_ransac, "train": cmd_train, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gcr", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("synth", help="generate scenes with rendered depth and descriptor files")
    common(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--preset", choices=("default", "toy"), default="default")

    p = sub.add_parser("ransac", help="run weighted RANSAC on a scene directory")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--weights", default="uniform", help="uniform | oracle | fusion:<params dir>")
    p.add_argument("--prior", default="gt", help="gt | perturbed:<degrees>")

    p = sub.add_parser("train", help="train the toy regressor")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--heldout", help="scene directory for the AUC report (default: training scenes)")
    p.add_argument("--mode", choices=("pose_only", "pose+desc", "full"), default="full")

    p = sub.add_parser("analyze", help="descriptor error maps under a pose")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--pose", default="gt", help="gt | file:<json> | perturbed:<degrees>")

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the recorded one)")
    p.add_argument("--jobs", type=int, help="override the recorded job count")
    return ap


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"config: invalid JSON in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(EXIT_USAGE, "config: expected a JSON object")
    return cfg


def run(command: str, args: dict, config: dict) -> Path:
    if args["jobs"] < 1:
        raise CliError(EXIT_USAGE, "jobs: must be >= 1")
    out = Path(args["out"])
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    inputs, snapshot = COMMANDS[command](args, config, out)
    _write_manifest(out, command, args, snapshot, args["seed"], args["jobs"], inputs, started)
    return out


def _dispatch(ns: argparse.Namespace) -> None:
    if ns.command == "replay":
        try:
            m = json.loads(Path(ns.manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(EXIT_DATA, f"manifest: {exc}") from exc
        if m.get("command") not in COMMANDS:
            raise CliError(EXIT_DATA, "manifest: unknown command")
        args = dict(m["args"])
        if ns.out:
            args["out"] = ns.out
        if ns.jobs:
            args["jobs"] = ns.jobs
        # the snapshot is fully resolved, so presets no longer apply
        if m["command"] == "synth":
            args["preset"] = "default"
        run(m["command"], args, m["config"])
        return
    args = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    run(ns.command, args, _read_config(ns.config))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        _dispatch(ns)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (PnpError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, CorrespondenceError, MetricError, FusionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RansacError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
