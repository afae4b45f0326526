from fractions import Fraction

import numpy as np
import pytest

from conftest import random_cp_tensor, rel
from jkcals.cp import CpModel, FitConfig, compute_error, cp_als_fit, init_random, reconstruct
from jkcals.flops import FlopCounter
from jkcals.jackknife import (
    JackknifeConfig,
    SubmodelSet,
    align_submodel,
    delete_d_groups,
    run_jackknife,
    jackknife_std,
    jk_als,
    jk_cals,
    jk_cals_multi,
    jk_parallel,
    pad_with_zero_rows,
    zero_rows_in_place,
)
from jkcals.tensor import DenseTensor, hadamard_gramians, mttkrp, remove_slice


@pytest.fixture
def problem(rng):
    X, _ = random_cp_tensor(rng, (8, 9, 10), 3, noise=0.1)
    T = DenseTensor(X)
    P = cp_als_fit(T, init_random(T.dims, 3, 0), FitConfig(tolerance=1e-9, max_iterations=300))
    return T, P


def test_delete_d_groups_examples():
    assert delete_d_groups(6, 1) == [[0], [1], [2], [3], [4], [5]]
    assert delete_d_groups(6, 2) == [[0, 1], [2, 3], [4, 5]]
    assert delete_d_groups(7, 2) == [[0, 1], [2, 3], [4, 5], [6]]
    assert delete_d_groups(7, 3) == [[0, 1, 2], [3, 4, 5], [6]]


@pytest.mark.parametrize("I, d", [(6, 0), (6, 4), (1, 1)])
def test_delete_d_groups_rejects_bad_d(I, d):
    with pytest.raises(ValueError):
        delete_d_groups(I, d)


def test_delete_d_groups_partition():
    for I in range(2, 30):
        for d in range(1, I // 2 + 1):
            groups = delete_d_groups(I, d)
            assert len(groups) == -(-I // d)
            assert sorted(i for g in groups for i in g) == list(range(I))


def test_pad_with_zero_rows():
    padded = pad_with_zero_rows(np.ones((2, 2)), [1])
    np.testing.assert_array_equal(padded, [[1, 1], [0, 0], [1, 1]])
    U = np.arange(12.0).reshape(4, 3)
    padded = pad_with_zero_rows(U, [0, 3])
    assert padded.shape == (6, 3)
    assert not padded[[0, 3]].any()
    np.testing.assert_array_equal(np.delete(padded, [0, 3], axis=0), U)
    with pytest.raises(ValueError):
        pad_with_zero_rows(U, [1, 1])
    with pytest.raises(IndexError):
        pad_with_zero_rows(U, [5])


def test_zero_rows_in_place_is_idempotent():
    G = np.ones((4, 6))
    zero_rows_in_place(G, (2, 4), [1, 3])
    once = G.copy()
    zero_rows_in_place(G, slice(2, 4), [1, 3])
    np.testing.assert_array_equal(G, once)
    assert not G[[1, 3], 2:4].any()
    assert G[:, :2].all() and G[:, 4:].all() and G[[0, 2], 2:4].all()


def test_align_recovers_swapped_columns(rng):
    P = CpModel([rng.standard_normal((d, 4)) for d in (5, 6, 7)])
    perm = [2, 0, 3, 1]
    P_hat = CpModel([U[:, perm] for U in P.factors])
    aligned, diag = align_submodel(P_hat, P, 0)
    assert [perm[p] for p in diag["permutation"]] == [0, 1, 2, 3]
    for U, V in zip(aligned.factors, P.factors):
        np.testing.assert_allclose(U, V, rtol=1e-12, atol=1e-14)


def test_align_restores_signs(rng):
    P = CpModel([rng.uniform(size=(d, 3)) for d in (5, 6, 7)])
    flipped = [U.copy() for U in P.factors]
    flipped[1][:, 2] *= -1
    flipped[2][:, 2] *= -1
    P_hat = CpModel(flipped)
    aligned, diag = align_submodel(P_hat, P, 0)
    np.testing.assert_allclose(reconstruct(aligned).array, reconstruct(P_hat).array, rtol=1e-12)
    for U, V in zip(aligned.factors, P.factors):
        np.testing.assert_allclose(U, V, rtol=1e-12)
    assert sorted(diag["sign_flips"][2]) == [1, 2]


def test_align_compensates_odd_sign_flip_in_sampled_mode(rng):
    P = CpModel([rng.uniform(size=(d, 2)) for d in (5, 6, 7)])
    f = [U.copy() for U in P.factors]
    f[0][:, 1] *= -1
    f[2][:, 1] *= -1
    aligned, diag = align_submodel(CpModel(f), P, 0)
    assert diag["sign_flips"][1] == [2, 0]
    for U, V in zip(aligned.factors, P.factors):
        np.testing.assert_allclose(U, V, rtol=1e-12)


def test_align_preserves_reconstruction(rng):
    for _ in range(10):
        P = CpModel([rng.standard_normal((d, 3)) for d in (4, 5, 6)])
        P_hat = CpModel([U + 0.3 * rng.standard_normal(U.shape) for U in P.factors])
        aligned, _ = align_submodel(P_hat, P, 1)
        assert rel(reconstruct(aligned).array, reconstruct(P_hat).array) <= 1e-12


def test_align_scale_matches_reference_norms(rng):
    P = CpModel([rng.standard_normal((d, 3)) for d in (4, 5, 6)])
    scales = np.array([2.0, 0.5, 3.0])
    P_hat = CpModel([P.factors[0] / scales**2, P.factors[1] * scales, P.factors[2] * scales])
    aligned, _ = align_submodel(P_hat, P, 0)
    for n in (1, 2):
        np.testing.assert_allclose(np.linalg.norm(aligned.factors[n], axis=0),
                                   np.linalg.norm(P.factors[n], axis=0), rtol=1e-12)
    np.testing.assert_allclose(aligned.factors[0], P.factors[0], rtol=1e-12)


def test_align_zero_column_is_deterministic(rng):
    P = CpModel([rng.standard_normal((d, 2)) for d in (4, 5, 6)])
    f = [U.copy() for U in P.factors]
    f[1][:, 0] = 0
    a1, d1 = align_submodel(CpModel(f), P, 0)
    a2, d2 = align_submodel(CpModel(f), P, 0)
    assert d1 == d2
    assert d1["congruence"][0] == 0.0 or d1["congruence"][1] == 0.0
    np.testing.assert_allclose(reconstruct(a1).array, reconstruct(CpModel(f)).array, atol=1e-12)


def test_align_rank_mismatch(rng):
    with pytest.raises(ValueError):
        align_submodel(init_random((3, 4), 2, 0), init_random((3, 4), 3, 0), 0)


def test_jackknife_std_examples(rng):
    P = CpModel([rng.standard_normal((d, 2)) for d in (3, 4, 5)])
    same = [P.copy() for _ in range(4)]
    unc = jackknife_std(same, P, 0)
    assert set(unc.stddev) == {1, 2}
    assert all(not S.any() for S in unc.stddev.values())

    a, b = P.copy(), P.copy()
    delta = 0.25
    a.factors[1][2, 1] += delta
    b.factors[1][2, 1] -= delta
    unc = jackknife_std([a, b], P, 0)
    expected = np.zeros((4, 2))
    expected[2, 1] = delta
    np.testing.assert_allclose(unc.stddev[1], expected, rtol=1e-12, atol=1e-15)
    assert not unc.stddev[2].any()
    assert unc.convention == "jackknife_se"


def test_jackknife_std_against_formula(rng):
    P = CpModel([rng.standard_normal((d, 2)) for d in (3, 4, 5)])
    subs = [CpModel([U + rng.standard_normal(U.shape) for U in P.factors]) for _ in range(6)]
    unc = jackknife_std(subs, P, 2)
    g = 6
    for n in (0, 1):
        vals = np.stack([m.factors[n] for m in subs])
        expected = np.sqrt((g - 1) / g * ((vals - vals.mean(0)) ** 2).sum(0))
        np.testing.assert_allclose(unc.stddev[n], expected, rtol=1e-12)


def test_jackknife_std_needs_two_submodels(rng):
    P = init_random((3, 4), 1, 0)
    with pytest.raises(ValueError):
        jackknife_std([P], P, 0)


def test_jk_als_contract(rng):
    X, _ = random_cp_tensor(rng, (5, 6, 7), 2, noise=0.05)
    P = cp_als_fit(X, init_random(X.shape, 2, 0), FitConfig(tolerance=1e-9))
    subs, unc = jk_als(X, P, JackknifeConfig(method="als", fit=FitConfig(force_iterations=3)))
    assert len(subs.submodels) == 5
    assert all(m.factors[0].shape == (4, 2) for m in subs.submodels)
    assert set(unc.stddev) == {1, 2}
    for n in (1, 2):
        assert unc.stddev[n].shape == P.factors[n].shape
        assert np.all(np.isfinite(unc.stddev[n])) and np.all(unc.stddev[n] >= 0)


def test_jk_als_noiseless_self_consistency(rng):
    X, _ = random_cp_tensor(rng, (10, 8, 9), 2)
    P = cp_als_fit(X, init_random(X.shape, 2, 4), FitConfig(tolerance=1e-14, max_iterations=2000))
    assert P.errors[-1] < 1e-12 * np.sum(X**2)
    subs, unc = jk_als(X, P, JackknifeConfig(method="als", fit=FitConfig(tolerance=1e-10)))
    assert all(m.converged for m in subs.submodels)
    for m in subs.submodels:
        for n in (1, 2):
            assert rel(m.factors[n], P.factors[n]) <= 1e-4
    for n in (1, 2):
        assert unc.stddev[n].max() <= 1e-4 * np.abs(P.factors[n]).max()


@pytest.mark.parametrize("mode, d", [(0, 1), (0, 2), (1, 3), (2, 2), (2, 4)])
def test_jk_cals_equals_jk_als(problem, mode, d):
    T, P = problem
    cfg = JackknifeConfig(sampled_mode=mode, d=d, fit=FitConfig(force_iterations=15),
                          alignment=False)
    ref, _ = jk_als(T, P, cfg)
    fast, _ = jk_cals(T, P, cfg)
    assert fast.groups == ref.groups
    for a, b in zip(ref.submodels, fast.submodels):
        np.testing.assert_allclose(b.errors, a.errors, rtol=1e-8)
        for U, V in zip(a.factors, b.factors):
            assert U.shape == V.shape
            assert rel(V, U) <= 1e-8


def test_jk_cals_convergence_matches_jk_als(problem):
    T, P = problem
    cfg = JackknifeConfig(fit=FitConfig(tolerance=1e-7, max_iterations=200))
    ref, uref = jk_als(T, P, cfg)
    fast, ufast = jk_cals(T, P, cfg)
    assert ref.iterations == fast.iterations
    for n in uref.stddev:
        assert rel(ufast.stddev[n], uref.stddev[n]) <= 1e-6


def test_jk_cals_zero_rows_persist(problem):
    T, P = problem
    cfg = JackknifeConfig(sampled_mode=1, d=2, fit=FitConfig(force_iterations=6))
    sweeps = []

    def check(state, layout):
        G = state.fused[1]
        for pos, k in enumerate(state.active):
            _, group = layout[k]
            block = G[list(group), state.offsets[pos]:state.offsets[pos + 1]]
            assert np.all(block == 0.0)
        sweeps.append(len(state.active))

    jk_cals(T, P, cfg, callback=check)
    assert len(sweeps) == 6


def test_jk_cals_error_equals_reduced_tensor_error(problem):
    T, P = problem
    cfg = JackknifeConfig(sampled_mode=2, d=3, fit=FitConfig(force_iterations=5), alignment=False)
    subs, _ = jk_cals(T, P, cfg)
    for group, m in zip(subs.groups, subs.submodels):
        reduced = remove_slice(T, 2, group)
        M = mttkrp(reduced, m.factors, 2)
        H = hadamard_gramians(m.factors, 2)
        direct = compute_error(reduced.norm_sq, H, M, m.factors[2])
        assert m.errors[-1] == pytest.approx(direct, rel=1e-8)


@pytest.mark.parametrize("I, d", [(10, 1), (10, 2), (10, 5), (9, 3)])
def test_flop_ratio_identity(rng, I, d):
    X, _ = random_cp_tensor(rng, (I, 4, 5), 2, noise=0.1)
    P = cp_als_fit(X, init_random(X.shape, 2, 0), FitConfig(tolerance=1e-6))
    cfg = JackknifeConfig(d=d, fit=FitConfig(force_iterations=3))
    ca, cc = FlopCounter(), FlopCounter()
    jk_als(X, P, cfg, ca)
    jk_cals(X, P, cfg, cc)
    ratio = Fraction(cc.mttkrp, ca.mttkrp)
    assert ratio == Fraction(I, I - d)
    assert ratio <= 2


def test_jk_parallel_matches_reference(problem):
    T, P = problem
    cfg = JackknifeConfig(fit=FitConfig(force_iterations=10))
    ref, uref = jk_als(T, P, cfg)
    one, uone = jk_parallel(T, P, cfg, threads=1)
    four, ufour = jk_parallel(T, P, cfg, threads=4)
    for a, b in zip(ref.submodels, one.submodels):
        assert a.errors == b.errors
        for U, V in zip(a.factors, b.factors):
            np.testing.assert_array_equal(U, V)
    for a, b in zip(ref.submodels, four.submodels):
        np.testing.assert_allclose(b.errors, a.errors, rtol=1e-12)
    for n in uref.stddev:
        np.testing.assert_allclose(ufour.stddev[n], uref.stddev[n], rtol=1e-9, atol=1e-14)


def test_jk_parallel_counts_flops(problem):
    T, P = problem
    cfg = JackknifeConfig(fit=FitConfig(force_iterations=2))
    c1, c4 = FlopCounter(), FlopCounter()
    jk_als(T, P, cfg, c1)
    jk_parallel(T, P, cfg, c4, threads=4)
    assert c1.mttkrp == c4.mttkrp


def test_jk_cals_multi_shared_pool(rng):
    X, _ = random_cp_tensor(rng, (6, 7, 8), 3, noise=0.1)
    models = [cp_als_fit(X, init_random(X.shape, R, R), FitConfig(tolerance=1e-8)) for R in (2, 3)]
    cfg = JackknifeConfig(fit=FitConfig(force_iterations=8))
    pooled = jk_cals_multi(X, models, cfg)
    for P, (subs, unc) in zip(models, pooled):
        solo_subs, solo_unc = jk_cals(X, P, cfg)
        for a, b in zip(subs.submodels, solo_subs.submodels):
            np.testing.assert_allclose(a.errors, b.errors, rtol=1e-10)
        assert set(unc.stddev) == {1, 2}
        assert unc.stddev[1].shape == P.factors[1].shape


def test_noise_study_std_grows(rng):
    X0, _ = random_cp_tensor(rng, (15, 12, 12), 2)
    E = rng.standard_normal(X0.shape)
    E *= np.linalg.norm(X0) / np.linalg.norm(E)
    means = []
    for level in (0.01, 0.05, 0.2):
        X = X0 + level * E
        P = cp_als_fit(X, init_random(X.shape, 2, 1), FitConfig(tolerance=1e-10, max_iterations=500))
        _, unc = jk_cals(X, P, JackknifeConfig(fit=FitConfig(tolerance=1e-8, max_iterations=500)))
        for S in unc.stddev.values():
            assert np.all(np.isfinite(S)) and np.all(S > 0)
        means.append(np.mean([S.mean() for S in unc.stddev.values()]))
    assert means[0] < means[1] < means[2]


def test_failed_submodel_is_reported_not_fatal(rng, monkeypatch):
    X, _ = random_cp_tensor(rng, (6, 5, 4), 2, noise=0.1)
    P = cp_als_fit(X, init_random(X.shape, 2, 0), FitConfig(tolerance=1e-8))
    import jkcals.jackknife as jkmod

    real = jkmod.cp_als_fit

    def flaky(T, model, cfg, counter=None, rcond=1e-12):
        if T.dims[0] == 5 and np.allclose(model.factors[0], np.delete(P.factors[0], [2], axis=0)):
            raise FloatingPointError("injected")
        return real(T, model, cfg, counter, rcond)

    monkeypatch.setattr(jkmod, "cp_als_fit", flaky)
    subs, unc = jk_als(X, P, JackknifeConfig(fit=FitConfig(force_iterations=2)))
    assert set(subs.failures) == {2}
    assert subs.submodels[2] is None
    assert unc.n_submodels == 5


def test_jk_cals_records_failed_submodel(problem):
    T, P = problem
    bad = P.copy()
    bad.factors[1][0, 0] = np.nan
    cfg = JackknifeConfig(fit=FitConfig(force_iterations=2), alignment=False)
    # every submodel shares the NaN, so too few survive for a standard error
    with pytest.raises(ValueError, match="at least 2 submodels"):
        jk_cals(T, bad, cfg)


def test_config_validation(problem):
    T, P = problem
    with pytest.raises(ValueError):
        JackknifeConfig(method="bootstrap")
    with pytest.raises(ValueError):
        jk_cals(T, P, JackknifeConfig(d=5))
    with pytest.raises(ValueError):
        jk_als(T, P, JackknifeConfig(sampled_mode=3))
    assert JackknifeConfig(method="oals").method == "parallel_als"


def test_dispatch(problem):
    T, P = problem
    for method in ("als", "oals", "cals"):
        subs, unc = run_jackknife(T, P, JackknifeConfig(method=method, fit=FitConfig(force_iterations=2)))
        assert isinstance(subs, SubmodelSet)
        assert len(subs.submodels) == T.dims[0]
