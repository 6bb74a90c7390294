import numpy as np
import pytest
import scipy.sparse as sp

from mkdiff.spgraph import build_adjacency, build_knn, laplacian
from mkdiff.spectral import (DiffusionConfig, SpectralDecomposition,
                             apply_bank, apply_bank_adjoint,
                             build_kernel_bank, cg_solve, diffuse,
                             lanczos_eigs)


def random_laplacian(rng, n, k=6, sigma=0.4):
    coords = rng.random((n, 3))
    a = build_adjacency(build_knn(coords, k), sigma)
    return laplacian(a, "sym")


def path3_laplacian():
    a = sp.csr_matrix(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0.0]]))
    return laplacian(a, "sym")


# --- lanczos ----------------------------------------------------------------

def test_lanczos_path3_exact_spectrum():
    dec = lanczos_eigs(path3_laplacian(), 3, seed=0)
    assert np.allclose(dec.eigvals, [0, 1, 2], atol=1e-10)


def test_lanczos_smallest_eigenvalue_zero():
    rng = np.random.default_rng(0)
    lap = random_laplacian(rng, 50)
    dec = lanczos_eigs(lap, 1, seed=1)
    assert abs(dec.eigvals[0]) < 1e-10


def test_lanczos_full_matches_dense_oracle():
    rng = np.random.default_rng(1)
    lap = random_laplacian(rng, 80)
    dec = lanczos_eigs(lap, 80, seed=2)
    dense = np.linalg.eigvalsh(lap.toarray())
    assert np.abs(dec.eigvals - dense).max() < 1e-8


def test_lanczos_invariants():
    rng = np.random.default_rng(2)
    lap = random_laplacian(rng, 70)
    for m in (1, 5, 30, 70):
        dec = lanczos_eigs(lap, m, seed=3)
        gram = dec.eigvecs.T @ dec.eigvecs
        assert np.abs(gram - np.eye(m)).max() < 1e-8
        resid = lap @ dec.eigvecs - dec.eigvecs * dec.eigvals
        norms = np.linalg.norm(resid, axis=0)
        assert np.all(norms < 1e-6 * np.maximum(1, np.abs(dec.eigvals)))
        assert np.all(np.diff(dec.eigvals) >= -1e-12)
        assert dec.eigvals.min() > -1e-10 and dec.eigvals.max() < 2 + 1e-10


def test_lanczos_rejects_nonsymmetric():
    m = sp.csr_matrix(np.array([[0, 1.0], [0, 0]]))
    with pytest.raises(ValueError, match="symmetric"):
        lanczos_eigs(m, 1)


def test_diffusion_config_validation():
    with pytest.raises(ValueError, match="mode"):
        DiffusionConfig(mode="magic")
    with pytest.raises(ValueError, match="propagation"):
        DiffusionConfig(propagation="none")
    with pytest.raises(ValueError):
        DiffusionConfig(t=-1)
    with pytest.raises(ValueError):
        DiffusionConfig(lam=-0.5)


# --- cg ----------------------------------------------------------------------

def test_cg_lambda_zero_identity():
    rng = np.random.default_rng(3)
    lap = random_laplacian(rng, 30)
    b = rng.standard_normal((30, 4))
    assert np.array_equal(cg_solve(lap, 0.0, b), b)


def test_cg_two_node_hand_case():
    lap = sp.csr_matrix(np.array([[1, -1], [-1, 1.0]]))
    x = cg_solve(lap, 1.0, np.array([1.0, 0.0]), tol=1e-12)
    assert np.allclose(x, [2 / 3, 1 / 3], atol=1e-10)


def test_cg_matches_dense_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        lap = random_laplacian(rng, 50)
        b = rng.standard_normal((50, 3))
        lam = float(rng.uniform(0.1, 10))
        x = cg_solve(lap, lam, b, tol=1e-12)
        xd = np.linalg.solve(lam * lap.toarray() + np.eye(50), b)
        assert np.abs(x - xd).max() < 1e-8


def test_cg_iteration_cap():
    lap = random_laplacian(np.random.default_rng(5), 40)
    b = np.random.default_rng(6).standard_normal(40)
    with pytest.raises(RuntimeError, match="CG"):
        cg_solve(lap, 100.0, b, tol=1e-14, max_iter=2)


# --- diffusion ----------------------------------------------------------------

def test_diffuse_rw_stochastic_preserves_ones():
    rng = np.random.default_rng(7)
    coords = rng.random((60, 3))
    for t in (1, 7, 20):
        cfg = DiffusionConfig(mode="rw", t=t, propagation="rw-normalized")
        bank = build_kernel_bank(coords, [0.3], 8, cfg)
        out = apply_bank(bank, np.ones((60, 1)))
        assert np.abs(out - 1).max() < 1e-10


def test_diffuse_rw_hand_case():
    w = sp.csr_matrix(np.array([[0, 1], [1, 0.0]]))
    p = np.array([[1.0], [0.0]])
    assert np.allclose(diffuse(w, DiffusionConfig(mode="rw", t=1), p), [[0], [1]])
    assert np.allclose(diffuse(w, DiffusionConfig(mode="rw", t=2), p), [[1], [0]])


def test_exact_diffusion_lambda_zero_identity():
    rng = np.random.default_rng(8)
    lap = random_laplacian(rng, 40)
    p = rng.standard_normal((40, 3))
    cfg = DiffusionConfig(mode="exact-cg", lam=0.0)
    assert np.abs(diffuse(lap, cfg, p) - p).max() < 1e-12
    dec = lanczos_eigs(lap, 40, seed=0)
    cfg2 = DiffusionConfig(mode="exact-spectral", lam=0.0, m=40)
    assert np.abs(diffuse(dec, cfg2, p) - p).max() < 1e-10


def test_exact_spectral_full_rank_matches_cg():
    rng = np.random.default_rng(9)
    lap = random_laplacian(rng, 50)
    dec = lanczos_eigs(lap, 50, seed=1)
    p = rng.standard_normal((50, 4))
    xs = diffuse(dec, DiffusionConfig(mode="exact-spectral", lam=5.0, m=50), p)
    xc = diffuse(lap, DiffusionConfig(mode="exact-cg", lam=5.0, cg_tol=1e-12), p)
    assert np.abs(xs - xc).max() < 1e-7


def test_spectral_coefficient_shrinkage():
    # exact diffusion divides each eigen-coefficient by (lam*eigval + 1) >= 1
    rng = np.random.default_rng(10)
    lap = random_laplacian(rng, 40)
    dec = lanczos_eigs(lap, 40, seed=2)
    p = rng.standard_normal((40, 2))
    out = diffuse(lap, DiffusionConfig(mode="exact-cg", lam=3.0, cg_tol=1e-12), p)
    c_before = dec.eigvecs.T @ p
    c_after = dec.eigvecs.T @ out
    assert np.all(np.abs(c_after) <= np.abs(c_before) + 1e-9)


def test_diffusion_linearity():
    rng = np.random.default_rng(11)
    coords = rng.random((50, 3))
    bank = build_kernel_bank(coords, [0.2, 0.4], 6, DiffusionConfig(mode="rw", t=3))
    p1 = rng.standard_normal((50, 2))
    p2 = rng.standard_normal((50, 2))
    lhs = apply_bank(bank, p1 + p2)
    rhs = apply_bank(bank, p1) + apply_bank(bank, p2)
    assert np.abs(lhs - rhs).max() < 1e-10


# --- bank ----------------------------------------------------------------------

def test_bank_shapes_order_and_determinism():
    rng = np.random.default_rng(12)
    coords = rng.random((40, 3))
    cfg = DiffusionConfig(mode="rw", t=7)
    bank = build_kernel_bank(coords, [0.5, 0.1, 0.25], 5, cfg)
    assert bank.sigmas.tolist() == [0.1, 0.25, 0.5]
    p = rng.standard_normal((40, 3))
    out = apply_bank(bank, p)
    assert out.shape == (40, 9)
    # each block equals a standalone diffusion with that operator
    for s, entry in enumerate(bank.entries):
        assert np.array_equal(out[:, 3 * s:3 * (s + 1)], diffuse(entry, cfg, p))
    bank2 = build_kernel_bank(coords, [0.5, 0.1, 0.25], 5, cfg)
    assert np.array_equal(apply_bank(bank2, p), out)


def test_bank_duplicate_sigma_blocks_identical():
    coords = np.random.default_rng(13).random((30, 3))
    bank = build_kernel_bank(coords, [0.2, 0.2], 4, DiffusionConfig(mode="rw", t=2))
    p = np.random.default_rng(14).standard_normal((30, 2))
    out = apply_bank(bank, p)
    assert np.array_equal(out[:, :2], out[:, 2:])


def test_bank_single_sigma_reduction():
    coords = np.random.default_rng(15).random((30, 3))
    cfg = DiffusionConfig(mode="rw", t=3)
    bank = build_kernel_bank(coords, [0.3], 4, cfg)
    p = np.random.default_rng(16).standard_normal((30, 2))
    assert np.array_equal(apply_bank(bank, p), diffuse(bank.entries[0], cfg, p))


def test_bank_adjoint_is_transpose():
    rng = np.random.default_rng(17)
    coords = rng.random((35, 3))
    for prop in ("sym-normalized", "rw-normalized"):
        cfg = DiffusionConfig(mode="rw", t=3, propagation=prop)
        bank = build_kernel_bank(coords, [0.2, 0.5], 5, cfg)
        p = rng.standard_normal((35, 2))
        dy = rng.standard_normal((35, 4))
        lhs = (apply_bank(bank, p) * dy).sum()
        rhs = (p * apply_bank_adjoint(bank, dy, 2)).sum()
        assert abs(lhs - rhs) < 1e-10


def test_paper_grid_bank():
    # the smallest sigma of the reference grid needs body-surface point
    # spacing; random box points would underflow every edge weight
    from mkdiff.pointset import generate_synthetic_body
    from mkdiff.tasks import PAPER_SIGMAS
    coords = generate_synthetic_body(0, 512, np.zeros(10)).coords
    bank = build_kernel_bank(coords, PAPER_SIGMAS, 8,
                             DiffusionConfig(mode="rw", t=7))
    assert bank.n_kernels == 8
    assert all(e.op.shape == (512, 512) for e in bank.entries)
    assert [e.sigma for e in bank.entries] == sorted(PAPER_SIGMAS)
