"""Command-line surface: dataset synthesis, graph inspection, training,
evaluation, perturbation and robustness sweeps.

Configuration comes from a flat JSON file (documented keys only) overridden
by command-line flags; the fully resolved configuration is echoed to
``<out>/config.resolved.json`` so any run can be replayed from that file
alone.  Machine-readable results (JSON/CSV) land under ``--out``; stdout
carries a short human summary.  Exit codes: 0 ok, 1 usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluation, pointset, tasks
from .spgraph import build_adjacency, build_knn, degrees, laplacian
from .spectral import lanczos_eigs
from .tasks import PAPER_SIGMAS, TrainConfig


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # training / diffusion (defaults mirror the reference configuration)
    task: str = "descriptor"
    epochs: int = 50
    lr: float = 1e-4
    margin: float = 0.2
    descriptor_dim: int = 16
    triplets_per_step: int = 6890
    sigmas: tuple = PAPER_SIGMAS
    k: int = 100
    t: int = 7
    mode: str = "rw"
    propagation: str = "sym-normalized"
    lam: float = 1.0
    m: int = 64
    n_layers: int = 4
    hidden_width: int = 64
    dropout_p: float = 0.2
    point_dropout: float = 0.0
    n_classes: int = 15
    cmc_rank: int = 10
    val_pairs: int = 6
    seed: int = 0
    deterministic: bool = False
    threads: int = 0                      # 0 = auto (advisory)
    # paths
    manifest: str | None = None
    out: str | None = None
    ckpt: str | None = None
    cloud: str | None = None
    # synth
    shapes: int = 55
    points: int = 1024
    poses_per_subject: int = 5
    outlier_ratio: float = 0.0
    # eval / sweep / perturb
    split: str = "test"
    k_max: int = 50
    n_thresholds: int = 200
    max_pairs: int = 20
    disturbance: str = "noise"
    grid: tuple = ()
    magnitude: float = 0.0
    format: str = "bin-f32"
    command: str = ""

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        return TrainConfig(**kw)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_LIST_KEYS = {"sigmas", "grid"}
_FLOAT_KEYS = {"lr", "margin", "lam", "dropout_p", "point_dropout",
               "outlier_ratio", "magnitude"}
_BOOL_KEYS = {"deterministic"}
_STR_KEYS = {"task", "mode", "propagation", "manifest", "out", "ckpt", "cloud",
             "split", "disturbance", "format", "command"}


def _coerce(key: str, value):
    if key not in _FIELDS:
        raise UsageError(f"unknown config key {key!r}")
    if key in _LIST_KEYS:
        if not isinstance(value, (list, tuple)) or \
                not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise UsageError(f"config key {key!r} must be a list of numbers")
        return tuple(float(v) for v in value)
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be a boolean")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"config key {key!r} must be a number")
        return float(value)
    if key in _STR_KEYS:
        if value is not None and not isinstance(value, str):
            raise UsageError(f"config key {key!r} must be a string")
        return value
    # remaining keys are integers
    if isinstance(value, bool) or not isinstance(value, int):
        raise UsageError(f"config key {key!r} must be an integer")
    return value


def parse_config(config_path, overrides: dict) -> RunConfig:
    """Defaults <- config file <- explicit flags, with strict key checking."""
    cfg = RunConfig()
    if config_path:
        try:
            with open(config_path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a single JSON object")
        for key, value in doc.items():
            setattr(cfg, key, _coerce(key, value))
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, _coerce(key, value))
    if cfg.threads == 0:
        env = os.environ.get("MKDIFF_THREADS")
        cfg.threads = int(env) if env else (os.cpu_count() or 1)
    return cfg


def _resolve_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("missing required --out directory")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    doc = asdict(cfg)
    doc["sigmas"] = list(doc["sigmas"])
    doc["grid"] = list(doc["grid"])
    with open(out / "config.resolved.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _need_manifest(cfg: RunConfig):
    if not cfg.manifest:
        raise UsageError("missing required --manifest path")
    try:
        return pointset.load_manifest(cfg.manifest)
    except FileNotFoundError:
        raise UsageError(f"manifest not found: {cfg.manifest}")


def _need_ckpt(cfg: RunConfig) -> tasks.Checkpoint:
    if not cfg.ckpt:
        raise UsageError("missing required --ckpt path")
    if not Path(cfg.ckpt).exists():
        raise UsageError(f"checkpoint not found: {cfg.ckpt}")
    return tasks.load_checkpoint(cfg.ckpt)


def _load_cloud_arg(cfg: RunConfig) -> pointset.PointCloud:
    if not cfg.cloud:
        raise UsageError("missing required --cloud path")
    return pointset.load_cloud(cfg.cloud, cfg.format)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(cfg: RunConfig) -> int:
    out = _resolve_out(cfg)
    _echo_config(cfg, out)
    manifest = pointset.synthesize_dataset(
        out, cfg.shapes, cfg.points, cfg.seed,
        poses_per_subject=cfg.poses_per_subject, outlier_ratio=cfg.outlier_ratio)
    counts = {p: len(manifest.indices(p)) for p in ("train", "val", "test")}
    print(f"wrote {len(manifest.shapes)} shapes to {out} "
          f"(train/val/test = {counts['train']}/{counts['val']}/{counts['test']})")
    return 0


def _cmd_graph_stats(cfg: RunConfig) -> int:
    out = _resolve_out(cfg)
    _echo_config(cfg, out)
    if cfg.cloud:
        cloud = _load_cloud_arg(cfg)
    else:
        manifest = _need_manifest(cfg)
        cloud = manifest.load_shape(0)
    nb = build_knn(cloud.coords, cfg.k)
    stats = {"n": cloud.n, "k": cfg.k, "sigmas": {}}
    for s in cfg.sigmas:
        a = build_adjacency(nb, s)
        d = degrees(a)
        lap = laplacian(a, "sym")
        dec = lanczos_eigs(lap, min(5, cloud.n), seed=cfg.seed)
        stats["sigmas"][str(s)] = {
            "nnz": int(a.nnz),
            "degree_min": float(d.min()), "degree_mean": float(d.mean()),
            "degree_max": float(d.max()),
            "lambda_smallest": [float(v) for v in dec.eigvals],
        }
    with open(out / "graph_stats.json", "w") as fh:
        json.dump(stats, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"graph stats for n={cloud.n}, k={cfg.k} -> {out / 'graph_stats.json'}")
    return 0


def _cmd_train(cfg: RunConfig, task: str) -> int:
    out = _resolve_out(cfg)
    cfg.task = task
    _echo_config(cfg, out)
    manifest = _need_manifest(cfg)
    tc = cfg.train_config()
    train = tasks.train_descriptor if task == "descriptor" else tasks.train_segmentation
    ckpt = train(tc, manifest, log_path=out / "train_log.jsonl", progress=True)
    tasks.save_checkpoint(ckpt, out / "checkpoint.mkdc")
    best = max((h["val_metric"] for h in ckpt.history
                if not np.isnan(h["val_metric"])), default=float("nan"))
    print(f"trained {task} model ({ckpt.arch.param_count()} parameters), "
          f"best val metric {best:.4f} -> {out / 'checkpoint.mkdc'}")
    return 0


def _cmd_extract(cfg: RunConfig) -> int:
    out = _resolve_out(cfg)
    _echo_config(cfg, out)
    ckpt = _need_ckpt(cfg)
    cloud = _load_cloud_arg(cfg)
    timing: dict = {}
    desc = tasks.extract_descriptors(ckpt, cloud, timing=timing)
    stem = Path(cfg.cloud).stem
    np.save(out / f"{stem}.desc.npy", desc)
    with open(out / f"{stem}.timing.json", "w") as fh:
        json.dump(timing, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"extracted {desc.shape[0]}x{desc.shape[1]} descriptors "
          f"(bank {timing['bank_ms']:.0f} ms, forward {timing['forward_ms']:.0f} ms, "
          f"{timing['points_per_s']:.0f} points/s with precomputed operators)")
    return 0


def _cmd_eval_desc(cfg: RunConfig) -> int:
    out = _resolve_out(cfg)
    _echo_config(cfg, out)
    ckpt = _need_ckpt(cfg)
    manifest = _need_manifest(cfg)
    metrics = evaluation.evaluate_descriptors(
        ckpt, manifest, split=cfg.split, k_max=cfg.k_max,
        n_thresholds=cfg.n_thresholds, seed=cfg.seed, max_pairs=cfg.max_pairs)
    evaluation.curve_to_csv(metrics["cmc"], out / "cmc.csv")
    evaluation.curve_to_csv(metrics["roc"], out / "roc.csv")
    evaluation.curve_to_csv(metrics["correspondence_quality"],
                            out / "correspondence_quality.csv")
    evaluation.export_metrics_json(metrics, out / "metrics.json")
    rank = min(cfg.cmc_rank, len(metrics["cmc"].ys))
    print(f"CMC@{rank} {metrics['cmc'].ys[rank - 1]:.4f}, "
          f"ROC AUC {metrics['roc'].meta['auc']:.4f} -> {out}")
    return 0


def _cmd_eval_seg(cfg: RunConfig) -> int:
    out = _resolve_out(cfg)
    _echo_config(cfg, out)
    ckpt = _need_ckpt(cfg)
    manifest = _need_manifest(cfg)
    report = evaluation.evaluate_segmentation(ckpt, manifest, split=cfg.split)
    evaluation.export_metrics_json({"dice": report}, out / "dice.json")
    print(f"mean Dice {report.mean:.4f} +- {report.std:.4f} "
          f"over {len(report.per_shape)} shapes -> {out / 'dice.json'}")
    return 0


def _cmd_perturb(cfg: RunConfig) -> int:
    out = _resolve_out(cfg)
    _echo_config(cfg, out)
    if cfg.disturbance not in evaluation.PERTURBATIONS:
        raise UsageError(f"disturbance must be one of {sorted(evaluation.PERTURBATIONS)}")
    perturb = evaluation.PERTURBATIONS[cfg.disturbance]
    if cfg.cloud:
        cloud = _load_cloud_arg(cfg)
        result = perturb(cloud, cfg.magnitude, cfg.seed)
        dest = out / Path(cfg.cloud).name
        pointset.save_cloud(result, dest, cfg.format)
        print(f"perturbed cloud ({cfg.disturbance} {cfg.magnitude}) -> {dest}")
        return 0
    manifest = _need_manifest(cfg)
    ids = manifest.indices(cfg.split)
    for si, i in enumerate(ids):
        cloud = manifest.load_shape(i)
        result = perturb(cloud, cfg.magnitude, [cfg.seed, si])
        pointset.save_cloud(result, out / manifest.shapes[i].cloud_path, "bin-f32")
    keep = [manifest.shapes[i] for i in ids]
    pointset.save_manifest(
        pointset.DatasetManifest(keep, [cfg.split] * len(keep),
                                 manifest.n_classes, manifest.units_scale),
        out / "manifest.json")
    print(f"perturbed {len(ids)} {cfg.split} shapes ({cfg.disturbance} "
          f"{cfg.magnitude}) -> {out}")
    return 0


_DEFAULT_GRIDS = {
    "noise": (0.0, 0.01, 0.02, 0.03, 0.04, 0.05),
    "missing": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
    "outlier": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
}


def _cmd_sweep(cfg: RunConfig) -> int:
    out = _resolve_out(cfg)
    if not cfg.grid:
        cfg.grid = _DEFAULT_GRIDS[cfg.disturbance]
    _echo_config(cfg, out)
    ckpt = _need_ckpt(cfg)
    manifest = _need_manifest(cfg)
    table = evaluation.robustness_sweep(ckpt, manifest, cfg.disturbance,
                                        cfg.grid, seed=cfg.seed, split=cfg.split)
    evaluation.export_metrics_json({"sweep": table, "disturbance": cfg.disturbance},
                                   out / "sweep.json")
    with open(out / "sweep.csv", "w") as fh:
        fh.write(f"# meta {json.dumps({'disturbance': cfg.disturbance})}\n")
        fh.write("magnitude,dice_mean,dice_std\n")
        for v, rep in table.items():
            fh.write(f"{v:.10g},{rep.mean:.10g},{rep.std:.10g}\n")
    for v, rep in table.items():
        print(f"{cfg.disturbance} {v:g}: dice {rep.mean:.4f} +- {rep.std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="dataset manifest path")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_const", const=True)
    p.add_argument("--threads", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--sigmas", type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--mode", choices=("rw", "exact-spectral", "exact-cg"))
    p.add_argument("--propagation", choices=("sym-normalized", "rw-normalized"))
    p.add_argument("--lam", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--descriptor-dim", dest="descriptor_dim", type=int)
    p.add_argument("--triplets-per-step", dest="triplets_per_step", type=int)
    p.add_argument("--n-layers", dest="n_layers", type=int)
    p.add_argument("--hidden-width", dest="hidden_width", type=int)
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    p.add_argument("--point-dropout", dest="point_dropout", type=float)
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--cmc-rank", dest="cmc_rank", type=int)
    p.add_argument("--val-pairs", dest="val_pairs", type=int)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--ckpt")
    p.add_argument("--cloud")
    p.add_argument("--format", choices=pointset.FORMATS)


def build_parser() -> _Parser:
    parser = _Parser(prog="mkdiff",
                     description="multi-kernel diffusion networks for point clouds")
    sub = parser.add_subparsers(dest="command")
    specs = {
        "synth": "generate a synthetic articulated-body dataset",
        "graph-stats": "inspect the diffusion graph of a cloud",
        "train-desc": "train a point-descriptor model",
        "train-seg": "train a body-part segmentation model",
        "extract": "extract descriptors for one cloud",
        "eval-desc": "CMC/ROC/correspondence-quality evaluation",
        "eval-seg": "Dice evaluation",
        "perturb": "apply one data disturbance",
        "sweep": "robustness sweep over a disturbance grid",
    }
    for name, help_txt in specs.items():
        p = sub.add_parser(name, help=help_txt)
        _add_common(p)
        if name == "synth":
            p.add_argument("--shapes", type=int)
            p.add_argument("--points", type=int)
            p.add_argument("--poses-per-subject", dest="poses_per_subject", type=int)
            p.add_argument("--outlier-ratio", dest="outlier_ratio", type=float)
        if name in ("perturb", "sweep"):
            p.add_argument("--disturbance", choices=("noise", "missing", "outlier"))
        if name == "perturb":
            p.add_argument("--magnitude", type=float)
        if name == "sweep":
            p.add_argument("--grid", type=lambda s: [float(v) for v in s.split(",")])
        if name == "eval-desc":
            p.add_argument("--k-max", dest="k_max", type=int)
            p.add_argument("--n-thresholds", dest="n_thresholds", type=int)
            p.add_argument("--max-pairs", dest="max_pairs", type=int)
    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "graph-stats": _cmd_graph_stats,
    "train-desc": lambda cfg: _cmd_train(cfg, "descriptor"),
    "train-seg": lambda cfg: _cmd_train(cfg, "segmentation"),
    "extract": _cmd_extract,
    "eval-desc": _cmd_eval_desc,
    "eval-seg": _cmd_eval_seg,
    "perturb": _cmd_perturb,
    "sweep": _cmd_sweep,
}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.command:
            raise UsageError("missing subcommand")
        overrides = {k: v for k, v in vars(ns).items()
                     if k not in ("config", "command")}
        cfg = parse_config(ns.config, overrides)
        cfg.command = ns.command
        return _COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:                       # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
