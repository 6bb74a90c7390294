"""The multi-kernel diffusion network: forward pass, hand-derived gradients,
losses and Adam.

A layer diffuses the incoming feature map through every kernel of the bank,
concatenates the results channel-wise and applies two per-node 1x1
convolutions, each followed by instance normalization and a ReLU, with
dropout between the two convolutions.  The head is a final 1x1 convolution;
descriptor networks L2-normalize each output row, segmentation networks
return raw logits.

Diffusion operators are constant linear maps, so backpropagation through a
diffusion stage is multiplication by the transposed operator; everything else
is standard dense reverse mode, written out by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import KernelBank, apply_bank, apply_bank_adjoint

NORM_EPS = 1e-5


@dataclass
class Architecture:
    n_layers: int = 4
    hidden_width: int = 64
    n_kernels: int = 8
    out_dim: int = 16
    input_dim: int = 1
    activation: str = "relu"
    dropout_p: float = 0.2
    head: str = "descriptor"          # "descriptor" | "segmentation"

    def __post_init__(self):
        if min(self.n_layers, self.hidden_width, self.n_kernels,
               self.out_dim, self.input_dim) < 1:
            raise ValueError("all architecture dimensions must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.activation != "relu":
            raise ValueError("only relu is supported")
        if self.head not in ("descriptor", "segmentation"):
            raise ValueError("head must be 'descriptor' or 'segmentation'")

    def tensor_shapes(self) -> dict[str, tuple]:
        """Registry of all trainable tensors, in a fixed iteration order."""
        shapes = {}
        c_in = self.input_dim
        h = self.hidden_width
        for i in range(self.n_layers):
            shapes[f"layers.{i}.w1"] = (self.n_kernels * c_in, h)
            shapes[f"layers.{i}.b1"] = (h,)
            shapes[f"layers.{i}.n1.scale"] = (h,)
            shapes[f"layers.{i}.n1.shift"] = (h,)
            shapes[f"layers.{i}.w2"] = (h, h)
            shapes[f"layers.{i}.b2"] = (h,)
            shapes[f"layers.{i}.n2.scale"] = (h,)
            shapes[f"layers.{i}.n2.shift"] = (h,)
            c_in = h
        shapes["head.w"] = (h, self.out_dim)
        shapes["head.b"] = (self.out_dim,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.tensor_shapes().values())


@dataclass
class NetworkParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


def init_params(arch: Architecture, seed=0) -> NetworkParams:
    """Uniform +-sqrt(6/fan_in) weights, zero biases, identity norm affines."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in arch.tensor_shapes().items():
        if name.endswith((".w1", ".w2")) or name == "head.w":
            bound = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-bound, bound, shape)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return NetworkParams(arch, tensors)


# ---------------------------------------------------------------------------
# elementary stages
# ---------------------------------------------------------------------------

def instance_norm_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
                          eps: float = NORM_EPS):
    """Standardize each channel over the nodes of one graph, then affine."""
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * scale + shift, (xhat, inv, scale)


def instance_norm_backward(dy: np.ndarray, cache):
    xhat, inv, scale = cache
    dscale = (dy * xhat).sum(axis=0)
    dshift = dy.sum(axis=0)
    dxhat = dy * scale
    dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
    return dx, dscale, dshift


def dropout(x: np.ndarray, p: float, seed, mode: str):
    """Inverted dropout; identity in eval mode.  ``seed`` may be a Generator."""
    if not 0 <= p < 1:
        raise ValueError("p must be in [0, 1)")
    if mode == "eval":
        return x, None
    if mode != "train":
        raise ValueError("mode must be 'train' or 'eval'")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = rng.random(x.shape) >= p
    return x * (mask / (1.0 - p)), mask


# ---------------------------------------------------------------------------
# network forward / backward
# ---------------------------------------------------------------------------

def forward(arch: Architecture, params: NetworkParams, bank: KernelBank,
            x: np.ndarray, mode: str = "eval", rng=None):
    """Run the network on one graph; returns (output, cache-for-backward).

    ``rng`` seeds the dropout masks in train mode (ignored in eval).  The
    cache keeps every intermediate needed by :func:`backward`.
    """
    if bank.n_kernels != arch.n_kernels:
        raise ValueError(f"bank has {bank.n_kernels} kernels, arch wants {arch.n_kernels}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape != (bank.n, arch.input_dim):
        raise ValueError(f"x must be ({bank.n}, {arch.input_dim}), got {x.shape}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    t = params.tensors
    layer_caches = []
    h = x
    for i in range(arch.n_layers):
        d = apply_bank(bank, h)
        z1 = d @ t[f"layers.{i}.w1"] + t[f"layers.{i}.b1"]
        y1, nc1 = instance_norm_forward(z1, t[f"layers.{i}.n1.scale"],
                                        t[f"layers.{i}.n1.shift"])
        a1 = np.maximum(y1, 0.0)
        do, mask = dropout(a1, arch.dropout_p if mode == "train" else 0.0,
                           rng, mode)
        z2 = do @ t[f"layers.{i}.w2"] + t[f"layers.{i}.b2"]
        y2, nc2 = instance_norm_forward(z2, t[f"layers.{i}.n2.scale"],
                                        t[f"layers.{i}.n2.shift"])
        a2 = np.maximum(y2, 0.0)
        layer_caches.append({"c_in": h.shape[1], "d": d, "nc1": nc1,
                             "relu1": y1 > 0, "do": do, "mask": mask,
                             "nc2": nc2, "relu2": y2 > 0})
        h = a2
    y_lin = h @ t["head.w"] + t["head.b"]
    if not np.all(np.isfinite(y_lin)):
        raise FloatingPointError("non-finite activations; parameters exploded")
    if arch.head == "descriptor":
        # smooth normalization: exact unit rows for any healthy magnitude,
        # bounded gradients when a row degenerates to ~0 at initialization
        sq = (y_lin * y_lin).sum(axis=1, keepdims=True)
        safe = np.sqrt(sq + 1e-16)
        y = y_lin / safe
        head_cache = (y, safe)
    else:
        y = y_lin
        head_cache = None
    cache = {"arch": arch, "params": params, "bank": bank, "mode": mode,
             "layers": layer_caches, "h_last": h, "head": head_cache}
    return y, cache


def backward(cache, dy: np.ndarray, want_dx: bool = False):
    """Analytic gradients for every parameter tensor given d(loss)/d(output)."""
    arch: Architecture = cache["arch"]
    t = cache["params"].tensors
    bank: KernelBank = cache["bank"]
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != (bank.n, arch.out_dim):
        raise ValueError(f"dy must be ({bank.n}, {arch.out_dim}), got {dy.shape}")
    grads = {}
    if arch.head == "descriptor":
        y, safe = cache["head"]
        dy = (dy - y * (dy * y).sum(axis=1, keepdims=True)) / safe
    h_last = cache["h_last"]
    grads["head.w"] = h_last.T @ dy
    grads["head.b"] = dy.sum(axis=0)
    dh = dy @ t["head.w"].T
    for i in reversed(range(arch.n_layers)):
        lc = cache["layers"][i]
        dy2 = dh * lc["relu2"]
        dz2, grads[f"layers.{i}.n2.scale"], grads[f"layers.{i}.n2.shift"] = \
            instance_norm_backward(dy2, lc["nc2"])
        grads[f"layers.{i}.w2"] = lc["do"].T @ dz2
        grads[f"layers.{i}.b2"] = dz2.sum(axis=0)
        ddo = dz2 @ t[f"layers.{i}.w2"].T
        if lc["mask"] is not None:
            ddo = ddo * (lc["mask"] / (1.0 - arch.dropout_p))
        dy1 = ddo * lc["relu1"]
        dz1, grads[f"layers.{i}.n1.scale"], grads[f"layers.{i}.n1.shift"] = \
            instance_norm_backward(dy1, lc["nc1"])
        grads[f"layers.{i}.w1"] = lc["d"].T @ dz1
        grads[f"layers.{i}.b1"] = dz1.sum(axis=0)
        if i > 0 or want_dx:
            dd = dz1 @ t[f"layers.{i}.w1"].T
            dh = apply_bank_adjoint(bank, dd, lc["c_in"])
    return (grads, dh) if want_dx else grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def triplet_hinge_loss(anchor: np.ndarray, pos: np.ndarray, neg: np.ndarray,
                       margin: float = 0.2):
    """max(0, d(a,p) - d(a,n) + margin) with Euclidean d, averaged over rows.

    Accepts single vectors or (T, d) batches.  Returns (loss, (ga, gp, gn)).
    The subgradient at the hinge kink and at zero distance is taken as 0.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    a = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    p = np.atleast_2d(np.asarray(pos, dtype=np.float64))
    n = np.atleast_2d(np.asarray(neg, dtype=np.float64))
    ap = a - p
    an = a - n
    dap = np.linalg.norm(ap, axis=1)
    dan = np.linalg.norm(an, axis=1)
    per = dap - dan + margin
    active = per > 0
    loss = float(np.where(active, per, 0.0).mean())
    T = a.shape[0]
    uap = np.divide(ap, dap[:, None], out=np.zeros_like(ap), where=dap[:, None] > 0)
    uan = np.divide(an, dan[:, None], out=np.zeros_like(an), where=dan[:, None] > 0)
    w = active[:, None] / T
    ga = (uap - uan) * w
    gp = -uap * w
    gn = uan * w
    if np.asarray(anchor).ndim == 1:
        ga, gp, gn = ga[0], gp[0], gn[0]
    return loss, (ga, gp, gn)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce_loss(logits: np.ndarray, labels: np.ndarray,
                     class_weights: np.ndarray):
    """Per-node weighted cross entropy, averaged over nodes.

    Returns (loss, dlogits) where dlogits is the gradient wrt the raw logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels out of range")
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    probs = softmax(logits)
    picked = probs[np.arange(n), labels]
    loss = float(np.mean(w * -np.log(np.maximum(picked, 1e-300))))
    dlogits = probs * (w / n)[:, None]
    dlogits[np.arange(n), labels] -= w / n
    return loss, dlogits


def label_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """sqrt(1/frequency) per class, rescaled to mean 1."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    if counts.size > n_classes:
        raise ValueError("labels exceed n_classes")
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise ValueError(f"class {int(missing[0])} absent from the training labels")
    w = np.sqrt(counts.sum() / counts)
    return w / w.mean()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetworkParams, grads: dict, state: OptimizerState):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p = params.tensors[name]
        p -= update
        if not np.all(np.isfinite(p)):
            raise FloatingPointError(f"non-finite parameter {name} after update")
    return params, state
