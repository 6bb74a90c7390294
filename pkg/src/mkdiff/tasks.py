"""Training loops for descriptor learning and segmentation, checkpoints and
inference entry points.

Both tasks share the pipeline: per-shape kernel banks are built once, the
network input is a constant all-ones column (no hand-crafted features), and
one Adam step is taken per shape visit.  Descriptor training anchors each
optimization step's triplets on one shape and draws positives/negatives from
two other random training shapes, so a step touches three forward passes.

Randomness is organized as one master seed with per-purpose streams derived
from (seed, tag, epoch, step); runs are bit-reproducible for a fixed config.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation
from .net import (Architecture, NetworkParams, OptimizerState, adam_step,
                  backward, forward, init_params, label_weights, softmax,
                  triplet_hinge_loss, weighted_ce_loss)
from .pointset import DatasetManifest, PointCloud, remove_points
from .spectral import DiffusionConfig, KernelBank, build_kernel_bank

MAGIC_CHECKPOINT = b"MKDC"
CHECKPOINT_VERSION = 1

#: the eight-kernel width grid used by the reference configuration
PAPER_SIGMAS = (0.0125, 0.025, 0.05, 0.1, 0.125, 0.25, 0.5, 1.0)

# rng purpose tags
_TAG_INIT, _TAG_SAMPLE, _TAG_DROPOUT, _TAG_ORDER, _TAG_VAL, _TAG_AUG = 3, 4, 5, 6, 7, 8


@dataclass
class TrainConfig:
    task: str = "descriptor"             # "descriptor" | "segmentation"
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
    point_dropout: float = 0.0       # max random-removal ratio (train aug)
    n_classes: int = 15
    cmc_rank: int = 10
    val_pairs: int = 6
    seed: int = 0
    deterministic: bool = False

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if not self.sigmas:
            raise ValueError("sigmas must be nonempty")
        if min(self.epochs, self.descriptor_dim, self.triplets_per_step,
               self.k, self.n_layers, self.hidden_width, self.n_classes) < 1:
            raise ValueError("config integers must be positive")
        if self.lr <= 0 or self.margin <= 0:
            raise ValueError("lr and margin must be positive")
        if self.task not in ("descriptor", "segmentation"):
            raise ValueError("task must be 'descriptor' or 'segmentation'")

    def diffusion(self) -> DiffusionConfig:
        return DiffusionConfig(mode=self.mode, t=self.t, lam=self.lam,
                               propagation=self.propagation, m=self.m)


@dataclass
class Checkpoint:
    arch: Architecture
    config: TrainConfig
    params: NetworkParams
    history: list = field(default_factory=list)
    includes_background: bool = False
    version: int = CHECKPOINT_VERSION


# ---------------------------------------------------------------------------
# persistence: MKDC | u32 version | u64 json length | json | f64 tensors
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    registry = []
    offset = 0
    for name, tensor in ckpt.params.tensors.items():
        registry.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.size * 8
    meta = {
        "arch": asdict(ckpt.arch),
        "config": asdict(ckpt.config),
        "history": ckpt.history,
        "includes_background": ckpt.includes_background,
        "registry": registry,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for tensor in ckpt.params.tensors.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC_CHECKPOINT:
        raise ValueError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    (jlen,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16:16 + jlen].decode())
    arch = Architecture(**meta["arch"])
    cfg = meta["config"]
    cfg["sigmas"] = tuple(cfg["sigmas"])
    config = TrainConfig(**cfg)
    base = 16 + jlen
    tensors = {}
    for entry in meta["registry"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        tensors[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=size, offset=start).reshape(shape).copy()
    return Checkpoint(arch, config, NetworkParams(arch, tensors),
                      meta["history"], meta["includes_background"], version)


# ---------------------------------------------------------------------------
# triplet sampling
# ---------------------------------------------------------------------------

def _corr_lookup(cloud: PointCloud) -> dict:
    if cloud.corr is None:
        raise ValueError("cloud lacks correspondence indices")
    return {int(c): i for i, c in enumerate(cloud.corr) if c >= 0}


def sample_triplets(manifest: DatasetManifest, n_triplets: int, seed,
                    clouds: dict | None = None) -> list[tuple]:
    """(shape_a, idx_a, shape_p, idx_p, shape_n, idx_n) tuples over the train split.

    Anchor uniform on a random train shape; positive is the same
    correspondence id on a different random shape; negative is a
    non-corresponding point on a (possibly third) random shape.
    """
    train = manifest.indices("train")
    if len(train) < 2:
        raise ValueError("need at least two training shapes")
    if clouds is None:
        clouds = {i: manifest.load_shape(i) for i in train}
    lookups = {i: _corr_lookup(clouds[i]) for i in train}
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_triplets):
        sa = train[rng.integers(len(train))]
        ia = int(rng.integers(clouds[sa].n))
        cv = int(clouds[sa].corr[ia])
        others = [s for s in train if s != sa]
        sp = others[rng.integers(len(others))]
        if cv not in lookups[sp]:
            raise ValueError(f"correspondence {cv} missing on shape {sp}")
        ip = lookups[sp][cv]
        sn = others[rng.integers(len(others))]
        while True:
            in_ = int(rng.integers(clouds[sn].n))
            if int(clouds[sn].corr[in_]) != cv:
                break
        out.append((sa, ia, sp, ip, sn, in_))
    return out


def _step_triplets(clouds, lookups, train, anchor_shape, n_triplets, rng):
    """Triplets for one optimization step: anchors all on ``anchor_shape``."""
    others = [s for s in train if s != anchor_shape]
    sp = others[rng.integers(len(others))]
    sn = others[rng.integers(len(others))]
    n = clouds[anchor_shape].n
    if n_triplets >= n:
        ia = np.arange(n)
    else:
        ia = rng.choice(n, size=n_triplets, replace=False)
    cv = clouds[anchor_shape].corr[ia]
    lut = lookups[sp]
    try:
        ip = np.array([lut[int(c)] for c in cv], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"correspondence {exc} missing on shape {sp}") from None
    corr_n = clouds[sn].corr
    in_ = rng.integers(corr_n.size, size=ia.size)
    bad = corr_n[in_] == cv
    while bad.any():
        in_[bad] = rng.integers(corr_n.size, size=int(bad.sum()))
        bad = corr_n[in_] == cv
    return ia, sp, ip, sn, in_


# ---------------------------------------------------------------------------
# shared training helpers
# ---------------------------------------------------------------------------

def _build_bank(cloud: PointCloud, config: TrainConfig) -> KernelBank:
    return build_kernel_bank(cloud.coords, config.sigmas, config.k,
                             config.diffusion(), seed=config.seed)


class _ShapeCache:
    """Clouds, banks and constant network inputs, built once per shape."""

    def __init__(self, manifest: DatasetManifest, config: TrainConfig):
        self.manifest = manifest
        self.config = config
        self.clouds: dict[int, PointCloud] = {}
        self.banks: dict[int, KernelBank] = {}

    def cloud(self, i: int) -> PointCloud:
        if i not in self.clouds:
            self.clouds[i] = self.manifest.load_shape(i)
        return self.clouds[i]

    def bank(self, i: int) -> KernelBank:
        if i not in self.banks:
            self.banks[i] = _build_bank(self.cloud(i), self.config)
        return self.banks[i]

    def ones(self, i: int) -> np.ndarray:
        return np.ones((self.cloud(i).n, 1))


def _log_record(log_fh, record: dict) -> None:
    if log_fh is not None:
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        log_fh.flush()


def _epoch_order(train: list[int], seed: int, epoch: int) -> list[int]:
    rng = np.random.default_rng([seed, _TAG_ORDER, epoch])
    order = list(train)
    rng.shuffle(order)
    return order


def _accumulate(total: dict, grads: dict) -> dict:
    for k, v in grads.items():
        if k in total:
            total[k] += v
        else:
            total[k] = v
    return total


# ---------------------------------------------------------------------------
# descriptor training
# ---------------------------------------------------------------------------

def _val_cmc(cache: _ShapeCache, arch, params, config: TrainConfig) -> float:
    val = cache.manifest.indices("val")
    if len(val) < 2:
        return float("nan")
    descs = {}
    for i in val:
        y, _ = forward(arch, params, cache.bank(i), cache.ones(i), mode="eval")
        descs[i] = y
    pairs = [(a, b) for a in val for b in val if a != b]
    rng = np.random.default_rng([config.seed, _TAG_VAL])
    if len(pairs) > config.val_pairs:
        idx = rng.choice(len(pairs), size=config.val_pairs, replace=False)
        pairs = [pairs[int(j)] for j in sorted(idx)]
    hits = []
    for a, b in pairs:
        curve = evaluation.cmc_curve(descs[a], descs[b],
                                     (cache.cloud(a).corr, cache.cloud(b).corr),
                                     config.cmc_rank)
        hits.append(curve.ys[-1])
    return float(np.mean(hits))


def train_descriptor(config: TrainConfig, manifest: DatasetManifest,
                     log_path=None, progress: bool = False) -> Checkpoint:
    """Triplet-loss descriptor training; returns the best-validation checkpoint."""
    train = manifest.indices("train")
    if len(train) < 2:
        raise ValueError("need at least two training shapes")
    cache = _ShapeCache(manifest, config)
    lookups = {i: _corr_lookup(cache.cloud(i)) for i in train}
    arch = Architecture(n_layers=config.n_layers, hidden_width=config.hidden_width,
                        n_kernels=len(config.sigmas), out_dim=config.descriptor_dim,
                        dropout_p=config.dropout_p, head="descriptor")
    params = init_params(arch, [config.seed, _TAG_INIT])
    state = OptimizerState(lr=config.lr)
    history = []
    best = (-np.inf, None)
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            losses = []
            for step, sa in enumerate(_epoch_order(train, config.seed, epoch)):
                rng = np.random.default_rng([config.seed, _TAG_SAMPLE, epoch, step])
                ia, sp, ip, sn, in_ = _step_triplets(
                    cache.clouds, lookups, train, sa, config.triplets_per_step, rng)
                legs = {}
                for li, si in enumerate((sa, sp, sn)):
                    if si not in legs:
                        drop = np.random.default_rng(
                            [config.seed, _TAG_DROPOUT, epoch, step, li])
                        legs[si] = forward(arch, params, cache.bank(si),
                                           cache.ones(si), mode="train", rng=drop)
                loss, (ga, gp, gn) = triplet_hinge_loss(
                    legs[sa][0][ia], legs[sp][0][ip], legs[sn][0][in_], config.margin)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
                dys = {si: np.zeros_like(legs[si][0]) for si in legs}
                np.add.at(dys[sa], ia, ga)
                np.add.at(dys[sp], ip, gp)
                np.add.at(dys[sn], in_, gn)
                grads: dict = {}
                for si, dy in dys.items():
                    _accumulate(grads, backward(legs[si][1], dy))
                adam_step(params, grads, state)
                losses.append(loss)
            val = _val_cmc(cache, arch, params, config)
            wall = 0 if config.deterministic else int((time.perf_counter() - t0) * 1000)
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "val_metric": val, "wall_ms": wall}
            history.append(rec)
            _log_record(log_fh, rec)
            if progress:
                print(f"[desc] epoch {epoch}: loss {rec['train_loss']:.4f} "
                      f"val cmc@{config.cmc_rank} {val:.3f}")
            if np.isnan(val) or val > best[0]:
                best = (val, params.copy())
    finally:
        if log_fh:
            log_fh.close()
    return Checkpoint(arch, config, best[1] if best[1] is not None else params,
                      history)


# ---------------------------------------------------------------------------
# segmentation training
# ---------------------------------------------------------------------------

def _class_mapping(includes_background: bool):
    """Map stored labels (0 = background, 1.. = parts) to class indices."""
    if includes_background:
        return lambda labels: labels
    return lambda labels: labels - 1


def _val_dice(cache: _ShapeCache, arch, params, includes_background: bool,
              n_out: int) -> float:
    val = cache.manifest.indices("val")
    if not val:
        return float("nan")
    to_class = _class_mapping(includes_background)
    per_shape = []
    for i in val:
        logits, _ = forward(arch, params, cache.bank(i), cache.ones(i), mode="eval")
        pred = np.argmax(logits, axis=1)
        gt = to_class(cache.cloud(i).labels)
        per_shape.append(evaluation.dice_report([pred], [gt], n_out).mean)
    return float(np.mean(per_shape))


def train_segmentation(config: TrainConfig, manifest: DatasetManifest,
                       log_path=None, progress: bool = False) -> Checkpoint:
    """Weighted-CE part segmentation; returns the best-validation checkpoint.

    The head grows a 16th background class automatically whenever background
    labels (0) occur in the training split.  ``config.point_dropout`` > 0
    enables random point removal as a training augmentation (ratio uniform in
    [0, point_dropout] per shape visit, graph rebuilt on the thinned cloud);
    sampling density then varies during training the way it does across real
    scanners, which is what makes the fixed network degrade gracefully when
    test clouds are thinned.
    """
    train = manifest.indices("train")
    if not train:
        raise ValueError("empty training split")
    cache = _ShapeCache(manifest, config)
    all_labels = np.concatenate([cache.cloud(i).labels for i in train])
    includes_background = bool((all_labels == 0).any())
    n_out = config.n_classes + (1 if includes_background else 0)
    to_class = _class_mapping(includes_background)
    weights = label_weights(to_class(all_labels), n_out)
    arch = Architecture(n_layers=config.n_layers, hidden_width=config.hidden_width,
                        n_kernels=len(config.sigmas), out_dim=n_out,
                        dropout_p=config.dropout_p, head="segmentation")
    params = init_params(arch, [config.seed, _TAG_INIT])
    state = OptimizerState(lr=config.lr)
    history = []
    best = (-np.inf, None)
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            losses = []
            for step, si in enumerate(_epoch_order(train, config.seed, epoch)):
                drop = np.random.default_rng([config.seed, _TAG_DROPOUT, epoch, step])
                cloud = cache.cloud(si)
                bank = cache.bank(si)
                if config.point_dropout > 0:
                    # half the visits stay clean; the rest see a thinned cloud
                    arng = np.random.default_rng([config.seed, _TAG_AUG, epoch, step])
                    ratio = arng.uniform(-config.point_dropout, config.point_dropout)
                    if ratio > 1.0 / cloud.n:
                        cloud = remove_points(cloud, ratio, arng.integers(2**31))
                        bank = _build_bank(cloud, config)
                logits, fcache = forward(arch, params, bank,
                                         np.ones((cloud.n, 1)), mode="train",
                                         rng=drop)
                loss, dlogits = weighted_ce_loss(logits, to_class(cloud.labels),
                                                 weights)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
                adam_step(params, backward(fcache, dlogits), state)
                losses.append(loss)
            val = _val_dice(cache, arch, params, includes_background, n_out)
            wall = 0 if config.deterministic else int((time.perf_counter() - t0) * 1000)
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "val_metric": val, "wall_ms": wall}
            history.append(rec)
            _log_record(log_fh, rec)
            if progress:
                print(f"[seg] epoch {epoch}: loss {rec['train_loss']:.4f} "
                      f"val dice {val:.3f}")
            if np.isnan(val) or val > best[0]:
                best = (val, params.copy())
    finally:
        if log_fh:
            log_fh.close()
    return Checkpoint(arch, config, best[1] if best[1] is not None else params,
                      history, includes_background)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def extract_descriptors(ckpt: Checkpoint, cloud: PointCloud,
                        timing: dict | None = None) -> np.ndarray:
    """Unit-norm descriptors for every point of one cloud.

    When ``timing`` is supplied it receives bank-build and forward wall times
    plus the steady-state throughput (points/s with precomputed operators).
    """
    if ckpt.arch.head != "descriptor":
        raise ValueError("checkpoint is not a descriptor model")
    t0 = time.perf_counter()
    bank = _build_bank(cloud, ckpt.config)
    t1 = time.perf_counter()
    y, _ = forward(ckpt.arch, ckpt.params, bank, np.ones((cloud.n, 1)), mode="eval")
    t2 = time.perf_counter()
    if timing is not None:
        timing["bank_ms"] = (t1 - t0) * 1000
        timing["forward_ms"] = (t2 - t1) * 1000
        timing["points_per_s"] = cloud.n / max(t2 - t1, 1e-9)
    return y


def predict_labels(ckpt: Checkpoint, cloud: PointCloud,
                   bank: KernelBank | None = None) -> np.ndarray:
    """Per-point labels in the stored-label convention (argmax of softmax)."""
    if ckpt.arch.head != "segmentation":
        raise ValueError("checkpoint is not a segmentation model")
    if bank is None:
        bank = _build_bank(cloud, ckpt.config)
    logits, _ = forward(ckpt.arch, ckpt.params, bank, np.ones((cloud.n, 1)),
                        mode="eval")
    pred = np.argmax(softmax(logits), axis=1)
    return pred if ckpt.includes_background else pred + 1
