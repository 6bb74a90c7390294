"""Evaluation protocols: CMC, ROC, geodesic correspondence quality, Dice and
the robustness sweep drivers.

Curves are plain (xs, ys) samples with a metadata dict and export to CSV
("# meta" header line, then x,y rows) or to a bundled JSON document.
Retrieval metrics rank by Euclidean descriptor distance with ties broken by
smaller target index, matching a brute-force all-pairs oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .pointset import PointCloud, add_gaussian_noise, add_outliers, remove_points
from .spgraph import NeighborLists, build_knn, graph_geodesics


@dataclass
class MetricCurve:
    xs: np.ndarray
    ys: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.shape != self.ys.shape:
            raise ValueError("xs/ys length mismatch")


@dataclass
class DiceReport:
    per_class: np.ndarray      # mean dice per class over shapes, nan if absent
    mean: float                # mean over shapes of per-shape label-avg dice
    std: float
    per_shape: list[float]


def _corr_mapping(corr, n_src: int, n_tgt: int) -> np.ndarray:
    """Resolve a correspondence argument to a src-row -> tgt-row index map."""
    if isinstance(corr, tuple):
        corr_src, corr_tgt = corr
        lut = {int(c): j for j, c in enumerate(corr_tgt)}
        try:
            mapping = np.array([lut[int(c)] for c in corr_src], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"correspondence {exc} missing on target") from None
    else:
        mapping = np.asarray(corr, dtype=np.int64)
    if mapping.shape != (n_src,) or mapping.min() < 0 or mapping.max() >= n_tgt:
        raise ValueError("invalid correspondence mapping")
    return mapping


def cmc_curve(desc_src: np.ndarray, desc_tgt: np.ndarray, corr,
              k_max: int, chunk: int = 512) -> MetricCurve:
    """Cumulative match characteristic of descriptor retrieval.

    For every source point, the true correspondent's rank among all target
    points sorted by descriptor distance; CMC(k) is the fraction with rank
    <= k.  ``corr`` is either a src->tgt row mapping or a tuple of the two
    shapes' correspondence-id vectors.
    """
    desc_src = np.asarray(desc_src, dtype=np.float64)
    desc_tgt = np.asarray(desc_tgt, dtype=np.float64)
    if desc_src.shape[1] != desc_tgt.shape[1]:
        raise ValueError("descriptor dimension mismatch")
    n_src, n_tgt = desc_src.shape[0], desc_tgt.shape[0]
    mapping = _corr_mapping(corr, n_src, n_tgt)
    k_max = min(k_max, n_tgt)
    ranks = np.empty(n_src, dtype=np.int64)
    tgt_idx = np.arange(n_tgt)
    for lo in range(0, n_src, chunk):
        hi = min(lo + chunk, n_src)
        d = cdist(desc_src[lo:hi], desc_tgt)
        d_true = d[np.arange(hi - lo), mapping[lo:hi]]
        less = (d < d_true[:, None]).sum(axis=1)
        ties = ((d == d_true[:, None]) & (tgt_idx < mapping[lo:hi, None])).sum(axis=1)
        ranks[lo:hi] = 1 + less + ties
    counts = np.bincount(ranks, minlength=k_max + 1)[1:k_max + 1]
    ys = np.cumsum(counts) / n_src
    return MetricCurve(np.arange(1, k_max + 1), ys,
                       {"protocol": "cmc", "n_src": n_src, "n_tgt": n_tgt})


def mean_curve(curves: list[MetricCurve]) -> MetricCurve:
    """Pointwise mean of curves sharing the same abscissa."""
    if not curves:
        raise ValueError("no curves to average")
    xs = curves[0].xs
    for c in curves[1:]:
        if not np.array_equal(c.xs, xs):
            raise ValueError("curves have different abscissae")
    ys = np.mean([c.ys for c in curves], axis=0)
    meta = dict(curves[0].meta)
    meta["n_curves"] = len(curves)
    return MetricCurve(xs, ys, meta)


def roc_curve(pos_dists: np.ndarray, neg_dists: np.ndarray,
              n_thresholds: int = 200) -> MetricCurve:
    """TPR vs FPR over a swept distance threshold; exact AUC in meta.

    Positives are distances between corresponding pairs, negatives between
    non-corresponding pairs; a pair is declared a match when its distance
    falls below the threshold.
    """
    pos = np.sort(np.asarray(pos_dists, dtype=np.float64))
    neg = np.sort(np.asarray(neg_dists, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative pair")
    lo = min(pos[0], neg[0])
    hi = max(pos[-1], neg[-1])
    ts = np.linspace(lo, hi, n_thresholds)
    tpr = np.searchsorted(pos, ts, side="right") / pos.size
    fpr = np.searchsorted(neg, ts, side="right") / neg.size
    # Mann-Whitney AUC: P(pos < neg) + 0.5 P(pos == neg)
    strictly = np.searchsorted(neg, pos, side="left")
    equal = np.searchsorted(neg, pos, side="right") - strictly
    auc = ((neg.size - strictly) - 0.5 * equal).sum() / (pos.size * neg.size)
    # keep xs strictly increasing: last (largest-TPR) point per distinct FPR
    keep = np.r_[fpr[1:] != fpr[:-1], True]
    return MetricCurve(fpr[keep], tpr[keep],
                       {"protocol": "roc", "auc": float(auc),
                        "n_pos": int(pos.size), "n_neg": int(neg.size),
                        "thresholds": [float(ts[0]), float(ts[-1])]})


def descriptor_pair_distances(desc_src, desc_tgt, corr, seed=0):
    """Positive and sampled negative pair distances for one shape pair.

    One uniformly sampled non-corresponding pair per positive pair.
    """
    desc_src = np.asarray(desc_src, dtype=np.float64)
    desc_tgt = np.asarray(desc_tgt, dtype=np.float64)
    n_src, n_tgt = desc_src.shape[0], desc_tgt.shape[0]
    mapping = _corr_mapping(corr, n_src, n_tgt)
    pos = np.linalg.norm(desc_src - desc_tgt[mapping], axis=1)
    rng = np.random.default_rng(seed)
    j = rng.integers(n_tgt, size=n_src)
    bad = j == mapping
    while bad.any():
        j[bad] = rng.integers(n_tgt, size=int(bad.sum()))
        bad = j == mapping
    neg = np.linalg.norm(desc_src - desc_tgt[j], axis=1)
    return pos, neg


def correspondence_quality(desc_src, desc_tgt, corr, nb_tgt: NeighborLists,
                           radii) -> MetricCurve:
    """Fraction of descriptor matches within geodesic radius r of ground truth.

    The match is the Euclidean-nearest target descriptor; the error is the
    graph-geodesic distance on the target between the matched point and the
    true correspondent (+inf when disconnected).
    """
    desc_src = np.asarray(desc_src, dtype=np.float64)
    desc_tgt = np.asarray(desc_tgt, dtype=np.float64)
    n_src, n_tgt = desc_src.shape[0], desc_tgt.shape[0]
    mapping = _corr_mapping(corr, n_src, n_tgt)
    matches = np.empty(n_src, dtype=np.int64)
    for lo in range(0, n_src, 512):
        hi = min(lo + 512, n_src)
        d = cdist(desc_src[lo:hi], desc_tgt)
        matches[lo:hi] = np.argmin(d, axis=1)
    sources, inv = np.unique(matches, return_inverse=True)
    geo = graph_geodesics(nb_tgt, sources)
    geo = np.atleast_2d(geo)
    err = geo[inv, mapping]
    radii = np.asarray(radii, dtype=np.float64)
    ys = np.array([(err <= r).mean() for r in radii])
    return MetricCurve(radii, ys, {"protocol": "correspondence-quality",
                                   "n_src": n_src})


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice_report(preds, gts, n_classes: int, class_subset=None) -> DiceReport:
    """Per-class Dice, aggregated over shapes.

    ``preds``/``gts`` are label vectors or lists thereof (one per shape).
    Classes absent from both prediction and ground truth of a shape are
    skipped in that shape's mean rather than scored 1.
    """
    if isinstance(preds, np.ndarray):
        preds, gts = [preds], [gts]
    if len(preds) != len(gts):
        raise ValueError("preds/gts shape-count mismatch")
    subset = np.arange(n_classes) if class_subset is None else \
        np.asarray(class_subset, dtype=np.int64)
    per_class_acc = [[] for _ in subset]
    per_shape = []
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ValueError("pred/gt length mismatch")
        if pred.min() < 0 or pred.max() >= n_classes or \
           gt.min() < 0 or gt.max() >= n_classes:
            raise ValueError("label out of range")
        shape_dice = []
        for si, c in enumerate(subset):
            np_c = int((pred == c).sum())
            ng_c = int((gt == c).sum())
            if np_c + ng_c == 0:
                continue
            inter = int(((pred == c) & (gt == c)).sum())
            d = 2.0 * inter / (np_c + ng_c)
            shape_dice.append(d)
            per_class_acc[si].append(d)
        per_shape.append(float(np.mean(shape_dice)) if shape_dice else float("nan"))
    per_class = np.array([np.mean(v) if v else np.nan for v in per_class_acc])
    arr = np.asarray(per_shape)
    return DiceReport(per_class, float(np.nanmean(arr)), float(np.nanstd(arr)),
                      per_shape)


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _test_pairs(ids: list[int], max_pairs: int | None, seed) -> list[tuple[int, int]]:
    pairs = [(a, b) for a in ids for b in ids if a != b]
    if max_pairs is not None and len(pairs) > max_pairs:
        rng = np.random.default_rng([seed, 11])
        idx = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[int(i)] for i in sorted(idx)]
    return pairs


def evaluate_descriptors(ckpt, manifest, split: str = "test", k_max: int = 50,
                         n_thresholds: int = 200, radii=None, seed: int = 0,
                         max_pairs: int | None = 20) -> dict:
    """CMC / ROC / correspondence quality over the ordered shape pairs of a split."""
    from . import tasks  # late import; tasks depends on this module

    ids = manifest.indices(split)
    if len(ids) < 2:
        raise ValueError(f"split {split!r} needs at least two shapes")
    if radii is None:
        radii = np.linspace(0.0, 0.5, 26)
    descs, clouds, nbs = {}, {}, {}
    for i in ids:
        clouds[i] = manifest.load_shape(i)
        descs[i] = tasks.extract_descriptors(ckpt, clouds[i])
        nbs[i] = build_knn(clouds[i].coords, ckpt.config.k)
    cmcs, cqs = [], []
    pos_all, neg_all = [], []
    for pi, (a, b) in enumerate(_test_pairs(ids, max_pairs, seed)):
        corr = (clouds[a].corr, clouds[b].corr)
        cmcs.append(cmc_curve(descs[a], descs[b], corr, k_max))
        p, ng = descriptor_pair_distances(descs[a], descs[b], corr, seed=[seed, 7, pi])
        pos_all.append(p)
        neg_all.append(ng)
        cqs.append(correspondence_quality(descs[a], descs[b], corr, nbs[b], radii))
    return {
        "cmc": mean_curve(cmcs),
        "roc": roc_curve(np.concatenate(pos_all), np.concatenate(neg_all),
                         n_thresholds),
        "correspondence_quality": mean_curve(cqs),
    }


def evaluate_segmentation(ckpt, manifest, split: str = "test",
                          include_background: bool = False) -> DiceReport:
    """Mean Dice of a segmentation checkpoint over one split (label space)."""
    from . import tasks

    ids = manifest.indices(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    preds, gts = [], []
    for i in ids:
        cloud = manifest.load_shape(i)
        preds.append(tasks.predict_labels(ckpt, cloud))
        gts.append(cloud.labels)
    with_bg = include_background or ckpt.includes_background
    subset = np.arange(0 if with_bg else 1, 16)
    return dice_report(preds, gts, 16, class_subset=subset)


PERTURBATIONS = {
    "noise": add_gaussian_noise,
    "missing": remove_points,
    "outlier": add_outliers,
}


def robustness_sweep(ckpt, manifest, disturbance: str, grid, seed: int = 0,
                     split: str = "test") -> dict:
    """DiceReport per grid value of one disturbance applied at test time.

    Clouds are perturbed, kernel banks rebuilt, and the fixed checkpoint
    re-scored.  Outlier sweeps score with the background class included.
    """
    from . import tasks

    if disturbance not in PERTURBATIONS:
        raise ValueError(f"disturbance must be one of {sorted(PERTURBATIONS)}")
    perturb = PERTURBATIONS[disturbance]
    ids = manifest.indices(split)
    with_bg = disturbance == "outlier" or ckpt.includes_background
    subset = np.arange(0 if with_bg else 1, 16)
    out = {}
    for gi, value in enumerate(grid):
        preds, gts = [], []
        for si, i in enumerate(ids):
            cloud = manifest.load_shape(i)
            pert = perturb(cloud, float(value), seed=[seed, 13, gi, si])
            preds.append(tasks.predict_labels(ckpt, pert))
            gts.append(pert.labels)
        out[float(value)] = dice_report(preds, gts, 16, class_subset=subset)
    return out


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def curve_to_csv(curve: MetricCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("# meta " + json.dumps(curve.meta, sort_keys=True) + "\n")
        fh.write("x,y\n")
        for x, y in zip(curve.xs, curve.ys):
            fh.write(f"{x:.10g},{y:.10g}\n")


def _jsonable(obj):
    if isinstance(obj, MetricCurve):
        return {"xs": obj.xs.tolist(), "ys": obj.ys.tolist(), "meta": obj.meta}
    if isinstance(obj, DiceReport):
        per_class = [None if np.isnan(v) else float(v) for v in obj.per_class]
        return {"per_class": per_class, "mean": obj.mean, "std": obj.std,
                "per_shape": obj.per_shape}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def export_metrics_json(metrics: dict, path) -> None:
    """Bundle every metric of a run into one JSON document."""
    with open(path, "w") as fh:
        json.dump(_jsonable(metrics), fh, indent=1, sort_keys=True)
        fh.write("\n")
