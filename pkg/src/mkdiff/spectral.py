"""Partial eigendecomposition, CG solves and the multi-kernel diffusion bank.

Three interchangeable diffusion routes act on per-node feature matrices:

* ``rw``             repeated application of a degree-normalized propagation
                     operator (t steps),
* ``exact-cg``       implicit diffusion (lam*L + I)^-1 P solved by conjugate
                     gradients (no truncation error),
* ``exact-spectral`` the same implicit diffusion through a truncated
                     eigenbasis Q (lam*Diag + I)^-1 Q^T P.

The propagation operator for ``rw`` defaults to the symmetric normalization
D^-1/2 A D^-1/2: the literal row-stochastic D^-1 A preserves constant
features exactly, which starves a featureless network (all-ones input) of
any signal after the first normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from .spgraph import NeighborLists, build_adjacency, build_knn, laplacian, propagation

MODES = ("rw", "exact-spectral", "exact-cg")
PROPAGATIONS = ("sym-normalized", "rw-normalized")


@dataclass
class SpectralDecomposition:
    m: int
    eigvals: np.ndarray   # (m,) ascending
    eigvecs: np.ndarray   # (n, m) orthonormal columns


@dataclass
class DiffusionConfig:
    mode: str = "rw"
    t: int = 7
    lam: float = 1.0
    propagation: str = "sym-normalized"
    m: int = 64
    cg_tol: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.propagation not in PROPAGATIONS:
            raise ValueError(f"propagation must be one of {PROPAGATIONS}")
        if self.t < 0 or self.lam < 0 or self.m < 1:
            raise ValueError("need t >= 0, lam >= 0, m >= 1")


def _check_symmetric(L: sp.spmatrix, tol: float = 1e-10) -> None:
    d = L - L.T
    if d.nnz and np.abs(d.data).max() > tol:
        raise ValueError("matrix is not symmetric")


def lanczos_eigs(L: sp.spmatrix, m: int, seed=0, tol: float = 1e-8,
                 max_restarts: int = 50) -> SpectralDecomposition:
    """The m algebraically smallest eigenpairs of a symmetric sparse matrix.

    Plain Lanczos with full reorthogonalization; on breakdown (an invariant
    subspace was exhausted) the iteration restarts with a fresh random vector
    orthogonal to the current basis, which also recovers eigenvalue
    multiplicities.  Iterations extend until the residual bounds of the m
    smallest Ritz pairs fall below ``tol`` or the basis spans the full space.
    """
    n = L.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    _check_symmetric(L)
    rng = np.random.default_rng(seed)

    cap = min(n, max(2 * m + 20, 50))
    Q = np.zeros((n, cap))
    alphas = np.zeros(cap)
    betas = np.zeros(cap)          # betas[j] links step j to j+1
    restarts = 0

    def fresh_vector(j):
        v = rng.standard_normal(n)
        for _ in range(2):
            v -= Q[:, :j] @ (Q[:, :j].T @ v)
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            raise RuntimeError("Lanczos could not extend the basis")
        return v / nv

    q = fresh_vector(0)
    q_prev = np.zeros(n)
    beta = 0.0
    j = 0
    while True:
        if j == cap:
            cap = min(n, 2 * cap)
            Q = np.hstack([Q, np.zeros((n, cap - Q.shape[1]))])
            alphas = np.resize(alphas, cap)
            betas = np.resize(betas, cap)
        Q[:, j] = q
        u = L @ q
        alphas[j] = q @ u
        r = u - alphas[j] * q - beta * q_prev
        for _ in range(2):                       # full reorthogonalization
            r -= Q[:, :j + 1] @ (Q[:, :j + 1].T @ r)
        beta = np.linalg.norm(r)
        scale = max(1.0, abs(alphas[: j + 1]).max())
        if beta <= 1e-13 * scale:
            beta = 0.0
            if j + 1 < n:
                restarts += 1
                if restarts > max_restarts:
                    raise RuntimeError(f"Lanczos breakdown after {max_restarts} restarts")
                q_next = fresh_vector(j + 1)
            else:
                q_next = np.zeros(n)
        else:
            q_next = r / beta
        betas[j] = beta
        j += 1

        check = (j >= min(n, m)) and (j == n or j % max(10, m // 2) == 0 or beta == 0.0)
        if check:
            th, S = eigh_tridiagonal(alphas[:j], betas[:j - 1],
                                     select="i", select_range=(0, min(m, j) - 1))
            if j == n:
                break
            if j >= m:
                bounds = np.abs(beta * S[-1, :])
                if np.all(bounds <= tol * np.maximum(1.0, np.abs(th))):
                    break
        q_prev = Q[:, j - 1]
        q = q_next

    vecs = Q[:, :j] @ S
    return SpectralDecomposition(m, th[:m].copy(), vecs[:, :m])


def cg_solve(L: sp.spmatrix, lam: float, B: np.ndarray, tol: float = 1e-8,
             max_iter: int = 1000) -> np.ndarray:
    """Solve (lam*L + I) X = B column-wise by conjugate gradients.

    L must be symmetric PSD so the system is SPD.  Columns converge when the
    recurrence residual drops below tol * ||b||; converged columns freeze
    while the rest keep iterating.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != L.shape[0]:
        raise ValueError(f"dimension mismatch: {L.shape} vs {B.shape}")
    if lam == 0:
        return B.copy()
    squeeze = B.ndim == 1
    b = B[:, None] if squeeze else B

    X = np.zeros_like(b)
    R = b.copy()
    P = R.copy()
    rs = np.einsum("ij,ij->j", R, R)
    target = (tol * tol) * rs
    active = rs > target
    for _ in range(max_iter):
        if not active.any():
            return X[:, 0] if squeeze else X
        AP = lam * (L @ P) + P
        pap = np.einsum("ij,ij->j", P, AP)
        alpha = np.zeros_like(rs)
        alpha[active] = rs[active] / pap[active]
        X += alpha * P
        R -= alpha * AP
        rs_new = np.einsum("ij,ij->j", R, R)
        active = rs_new > target
        beta = np.zeros_like(rs)
        beta[active] = rs_new[active] / rs[active]
        P = R + beta * P
        rs = rs_new
    raise RuntimeError(f"CG did not reach tol={tol} within {max_iter} iterations")


# ---------------------------------------------------------------------------
# diffusion operators and the kernel bank
# ---------------------------------------------------------------------------

@dataclass
class BankEntry:
    sigma: float
    op: object                    # csr propagation/Laplacian or decomposition
    op_t: sp.csr_matrix | None = None   # transpose when op is not symmetric


@dataclass
class KernelBank:
    sigmas: np.ndarray
    entries: list[BankEntry]
    config: DiffusionConfig
    k: int
    n: int

    @property
    def n_kernels(self) -> int:
        return len(self.entries)


def diffuse(operator, config: DiffusionConfig, P: np.ndarray,
            adjoint: bool = False) -> np.ndarray:
    """One diffusion pass of features P through a bank operator.

    ``adjoint=True`` applies the transposed linear map (used by backprop);
    for the symmetric operators this is the map itself.
    """
    P = np.asarray(P, dtype=np.float64)
    if config.mode == "rw":
        w = operator.op if isinstance(operator, BankEntry) else operator
        if adjoint and isinstance(operator, BankEntry) and operator.op_t is not None:
            w = operator.op_t
        if P.shape[0] != w.shape[1]:
            raise ValueError(f"dimension mismatch: {w.shape} vs {P.shape}")
        X = P.copy()
        for _ in range(config.t):
            X = w @ X
    elif config.mode == "exact-spectral":
        dec = operator.op if isinstance(operator, BankEntry) else operator
        if P.shape[0] != dec.eigvecs.shape[0]:
            raise ValueError("dimension mismatch")
        C = dec.eigvecs.T @ P
        C /= (config.lam * dec.eigvals + 1.0)[:, None] if P.ndim == 2 else \
             (config.lam * dec.eigvals + 1.0)
        X = dec.eigvecs @ C
    elif config.mode == "exact-cg":
        lap = operator.op if isinstance(operator, BankEntry) else operator
        X = cg_solve(lap, config.lam, P, tol=config.cg_tol)
    else:
        raise ValueError(f"unknown mode {config.mode!r}")
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("diffusion produced non-finite values")
    return X


def build_kernel_bank(coords: np.ndarray, sigmas, k: int,
                      config: DiffusionConfig, nb: NeighborLists | None = None,
                      seed=0) -> KernelBank:
    """One shared kNN structure, one propagation operator per sigma.

    Sigmas are sorted ascending; the bank is built once per shape and reused
    by every network layer.
    """
    sigmas = np.sort(np.asarray(sigmas, dtype=np.float64))
    if sigmas.size < 1:
        raise ValueError("need at least one sigma")
    if nb is None:
        nb = build_knn(coords, k)
    entries = []
    for i, s in enumerate(sigmas):
        a = build_adjacency(nb, float(s))
        if config.mode == "rw":
            kind = "sym" if config.propagation == "sym-normalized" else "rw"
            w = propagation(a, kind)
            op_t = None if kind == "sym" else w.T.tocsr()
            entries.append(BankEntry(float(s), w, op_t))
        elif config.mode == "exact-cg":
            entries.append(BankEntry(float(s), laplacian(a, "sym")))
        else:
            lap = laplacian(a, "sym")
            dec = lanczos_eigs(lap, min(config.m, lap.shape[0]), seed=[seed, i])
            entries.append(BankEntry(float(s), dec))
    return KernelBank(sigmas, entries, config, k, nb.n)


def apply_bank(bank: KernelBank, P: np.ndarray) -> np.ndarray:
    """Concatenate the per-sigma diffusions column-wise (ascending sigma)."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != bank.n:
        raise ValueError(f"P must be ({bank.n}, f), got {P.shape}")
    return np.hstack([diffuse(e, bank.config, P) for e in bank.entries])


def apply_bank_adjoint(bank: KernelBank, dY: np.ndarray, f: int) -> np.ndarray:
    """Adjoint of apply_bank: fold an (n, S*f) gradient back to (n, f)."""
    dY = np.asarray(dY, dtype=np.float64)
    S = bank.n_kernels
    if dY.shape != (bank.n, S * f):
        raise ValueError(f"dY must be ({bank.n}, {S * f}), got {dY.shape}")
    out = np.zeros((bank.n, f))
    for s, e in enumerate(bank.entries):
        out += diffuse(e, bank.config, dY[:, s * f:(s + 1) * f], adjoint=True)
    return out
