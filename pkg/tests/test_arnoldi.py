import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifrx import arnoldi
from ifrx.arnoldi import BatchSchedule, RitzBasis, arnoldi_iterate, ihvp_apply, ritz_eigenpairs, truncation_diagnostic
from ifrx.oracles import ArrayData, LogisticModel


def _sym(rng, n, spectrum=None):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(0.5, 5.0, n) if spectrum is None else np.asarray(spectrum, dtype=float)
    return (Q * lam) @ Q.T


def _basis(H, m, k, seed=0, **kw):
    res = arnoldi_iterate(lambda v: H @ v, m, arnoldi.start_vector(len(H), seed))
    return ritz_eigenpairs(res, k, **kw), res


def test_identity_breaks_down_after_one_step():
    res = arnoldi_iterate(lambda v: v, 5, arnoldi.start_vector(5, 0))
    assert res.breakdown and res.m == 1
    np.testing.assert_allclose(res.T, [[1.0]])
    basis = ritz_eigenpairs(res, 1)
    v = np.arange(5.0)
    u = basis.vectors[0]
    np.testing.assert_allclose(ihvp_apply(basis, u * 3.0), u * 3.0)
    assert basis.eigenvalues.tolist() == pytest.approx([1.0])


def test_diagonal_ritz_values():
    H = np.diag([4.0, 3.0, 2.0, 1.0])
    basis, res = _basis(H, 4, 4)
    np.testing.assert_allclose(basis.eigenvalues, [4, 3, 2, 1], atol=1e-10)
    top2, _ = _basis(H, 4, 2)
    np.testing.assert_allclose(top2.eigenvalues, [4, 3], atol=1e-10)
    np.testing.assert_allclose(basis.vectors @ basis.vectors.T, np.eye(4), atol=1e-6)


def test_symmetric_operator_gives_tridiagonal_T(rng):
    H = _sym(rng, 12)
    res = arnoldi_iterate(lambda v: H @ v, 10, arnoldi.start_vector(12, 1))
    upper = np.triu(res.T, 2)
    assert np.abs(upper).max() < 1e-6
    np.testing.assert_allclose(res.Q @ res.Q.T, np.eye(10), atol=1e-6)


def test_reconstruction_on_span(rng):
    H = _sym(rng, 10)
    basis, res = _basis(H, 10, 10)
    v = res.Q.T @ rng.standard_normal(res.m)
    recon = (basis.project(v) * basis.eigenvalues) @ basis.vectors
    assert np.linalg.norm(H @ v - recon) / np.linalg.norm(H @ v) < 1e-6


def test_k_larger_than_m_raises(rng):
    res = arnoldi_iterate(lambda v: np.diag([3.0, 2.0, 1.0]) @ v, 2, arnoldi.start_vector(3, 0))
    with pytest.raises(ValueError):
        ritz_eigenpairs(res, 3)
    with pytest.raises(ValueError):
        arnoldi_iterate(lambda v: v, 0, np.ones(3))
    with pytest.raises(ValueError):
        arnoldi_iterate(lambda v: v, 2, np.zeros(3))


def test_ihvp_examples():
    basis = RitzBasis([4.0, 2.0], [[0.0, 1.0], [1.0, 0.0]], 2)
    np.testing.assert_allclose(ihvp_apply(basis, np.array([1.0, 1.0])), [0.5, 0.25])
    partial = RitzBasis([2.0], [[1.0, 0.0, 0.0]], 1)
    np.testing.assert_array_equal(ihvp_apply(partial, np.array([0.0, 5.0, -1.0])), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_ihvp_is_linear(n, a, b, seed):
    rng = np.random.default_rng(seed)
    H = _sym(rng, n)
    basis, _ = _basis(H, n, n, filter_pairs=True)
    v, w = rng.standard_normal((2, n))
    lhs = ihvp_apply(basis, a * v + b * w)
    rhs = a * ihvp_apply(basis, v) + b * ihvp_apply(basis, w)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-10 * (1 + np.abs(rhs).max()))


def test_full_rank_ihvp_equals_solve(rng):
    H = _sym(rng, 20)
    basis, _ = _basis(H, 20, 20)
    v = rng.standard_normal(20)
    exact = np.linalg.solve(H, v)
    assert np.linalg.norm(ihvp_apply(basis, v) - exact) / np.linalg.norm(exact) < 1e-6


def test_negative_eigenvalues_kept_and_near_zero_dropped(rng):
    H = _sym(rng, 6, [5.0, -2.0, 1.0, 0.5, 1e-9, 3.0])
    basis, _ = _basis(H, 6, 6)
    assert basis.k == 5
    assert np.any(basis.eigenvalues < 0)
    assert np.all(np.abs(basis.eigenvalues) >= 1e-6 * 5)
    assert np.all(np.diff(np.abs(basis.eigenvalues)) <= 0)


def test_floor_refusal():
    bad = RitzBasis([1.0, 0.0], np.eye(2), 2)
    with pytest.raises(ValueError):
        ihvp_apply(bad, np.ones(2))
    low = RitzBasis([1.0, 1e-9], np.eye(2), 2, eigen_floor=1e-6)
    with pytest.raises(ValueError):
        ihvp_apply(low, np.ones(2))


def test_residuals_shrink_with_krylov_dimension(rng):
    H = _sym(rng, 40, np.r_[np.linspace(10, 6, 5), np.linspace(1, 0.1, 35)])
    res_top = []
    for m in range(2, 16):
        b, _ = _basis(H, m, 1, filter_pairs=False)
        res_top.append(b.residuals[0])
    assert all(b <= a * (1 + 1e-6) + 1e-12 for a, b in zip(res_top, res_top[1:]))


def test_residual_matches_direct_computation(rng):
    H = _sym(rng, 15)
    b, _ = _basis(H, 6, 6, filter_pairs=False)
    direct = np.linalg.norm(b.vectors @ H - b.eigenvalues[:, None] * b.vectors, axis=1)
    np.testing.assert_allclose(b.residuals, direct, atol=1e-8)


def test_schedule_cycles_and_is_reproducible():
    s = BatchSchedule(10, batch_size=3, batches_per_step=1, seed=4)
    seen = np.concatenate([s.batch(j) for j in range(3)])
    assert len(set(seen.tolist())) == 9
    again = BatchSchedule(10, batch_size=3, seed=4)
    assert np.array_equal(again.batch(5), s.batch(5))
    assert s.passes(10) == 3.0
    fixed = BatchSchedule(10, batch_size=3, seed=4, mode="fixed")
    assert np.array_equal(fixed.batch(0), fixed.batch(7))
    sched = BatchSchedule.for_passes(1000, 20, 3.0, 22)
    assert sched.passes(20) >= 3.0


def test_minibatch_ritz_values_stable_across_seeds():
    rng = np.random.default_rng(0)
    n, P = 3000, 12
    X = rng.standard_normal((n, P)) * np.geomspace(4, 0.3, P)
    y = (rng.random(n) < 0.5).astype(float)
    model = LogisticModel(P, l2=1e-3)
    theta = model.fit(ArrayData(X, y))
    data = ArrayData(X, y)

    def top5(seed):
        sched = BatchSchedule.for_passes(n, P, 6.0, 22, seed)
        hvp = lambda v, idx: model.hvp("bce", theta, data.subset(idx), v)
        basis, _ = arnoldi.build_basis(hvp, P, P, 5, seed, sched, max_residual_rel=1.0)
        return basis.eigenvalues

    a, b = top5(1), top5(2)
    assert np.all(np.abs(a - b) / np.abs(a) < 0.10)


def test_basis_file_roundtrip(tmp_path, rng):
    H = _sym(rng, 8)
    basis, _ = _basis(H, 8, 5)
    basis.source_hash = "ab" * 32
    p = arnoldi.save_basis(tmp_path / "b.ifrxritz", basis, {"krylov_steps": 8})
    assert p.read_bytes()[:8] == b"IFRXRITZ"
    back = arnoldi.load_basis(p)
    assert back.source_hash == basis.source_hash and back.krylov_dim == 8
    np.testing.assert_array_equal(back.eigenvalues, basis.eigenvalues)
    np.testing.assert_allclose(back.vectors, basis.vectors, atol=1e-6)


# ------------------------------------------------------------------- truncation diagnostic


def test_dominated_spectrum_elbow_one(rng):
    lam = np.r_[10.0, np.full(5, 1e-6)]
    assert truncation_diagnostic(lam, rng.standard_normal((16, 6)))["elbow"] == 1


def test_flat_spectrum_has_no_elbow():
    d = truncation_diagnostic([1.0, 1.0, 1.0, 1.0], np.ones((1, 4)))
    assert d["elbow"] == 4
    assert all(r["rel_drop"] >= 0.04 for r in d["rows"])


def test_diagonal_probe_closed_form():
    lam = np.array([4.0, 3.0, 2.0, 1.0])
    c = np.full(4, 0.5)
    d = truncation_diagnostic(lam, c[None, :])
    inv = np.sqrt(np.cumsum(c**2 / lam**2))
    np.testing.assert_allclose([r["ihvp_norm"] for r in d["rows"]], inv, atol=1e-12)
    np.testing.assert_allclose([r["ihvp_abs_change"] for r in d["rows"]], np.diff(np.r_[0.0, inv]), atol=1e-12)
    err = np.sqrt(np.r_[np.cumsum((c * lam)[::-1] ** 2)[::-1], 0.0])
    np.testing.assert_allclose([r["err"] for r in d["rows"]], err[1:], atol=1e-12)
    np.testing.assert_allclose([r["abs_drop"] for r in d["rows"]], -np.diff(err), atol=1e-12)


def test_diagnostic_with_basis_projects_probes(rng):
    H = _sym(rng, 6)
    basis, _ = _basis(H, 6, 6)
    probes = rng.standard_normal((3, 6))
    a = truncation_diagnostic(basis.eigenvalues, probes, basis)
    b = truncation_diagnostic(basis.eigenvalues, basis.project(probes))
    assert a["rows"] == b["rows"]
