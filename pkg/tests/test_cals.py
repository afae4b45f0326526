import numpy as np
import pytest

from conftest import random_cp_tensor, rel
from jkcals.cals import CalsState, MultiFactor, cals_fit, fuse, fused_mttkrp
from jkcals.cp import CpModel, FitConfig, cp_als_fit, init_random
from jkcals.exceptions import NumericalBreakdownError
from jkcals.flops import FlopCounter, mttkrp_flops
from jkcals.tensor import DenseTensor, mttkrp


def test_fuse_examples(rng):
    m = init_random((3, 4, 5), 2, 0)
    mf = fuse([m], 1)
    np.testing.assert_array_equal(mf.data, m.factors[1])
    assert mf.n_blocks == 1

    a, b = init_random((3, 4), 1, 1), init_random((3, 4), 1, 2)
    mf = fuse([a, b], 0)
    assert mf.data.shape == (3, 2)
    np.testing.assert_array_equal(mf.data[:, 0], a.factors[0][:, 0])
    np.testing.assert_array_equal(mf.data[:, 1], b.factors[0][:, 0])

    models = [init_random((6, 7), int(rng.integers(1, 5)), s) for s in range(5)]
    for n in range(2):
        mf = fuse(models, n)
        for k, model in enumerate(models):
            np.testing.assert_array_equal(mf.block(k), model.factors[n])


def test_fuse_rejects_row_mismatch():
    with pytest.raises(ValueError):
        fuse([init_random((3, 4), 1, 0), init_random((5, 4), 1, 0)], 0)


def test_multifactor_offsets_validated():
    with pytest.raises(ValueError):
        MultiFactor(0, [0, 2, 2], np.zeros((3, 2)))
    with pytest.raises(ValueError):
        MultiFactor(0, [0, 3], np.zeros((3, 2)))


def test_fused_mttkrp_single_model(rng):
    T = DenseTensor(rng.standard_normal((5, 6, 7)))
    m = init_random(T.dims, 3, 0)
    for n in range(3):
        mfs = [fuse([m], i) for i in range(3)]
        assert rel(fused_mttkrp(T, mfs, n), mttkrp(T, m.factors, n)) <= 1e-12


@pytest.mark.parametrize("ranks", [(2, 2, 2), (1, 2, 4)])
def test_fused_mttkrp_blockwise(rng, ranks):
    T = DenseTensor(rng.standard_normal((8, 9, 10)))
    models = [CpModel([rng.standard_normal((d, R)) for d in T.dims]) for R in ranks]
    mfs = [fuse(models, i) for i in range(3)]
    for n in range(3):
        M = fused_mttkrp(T, mfs, n)
        assert M.shape == (T.dims[n], sum(ranks))
        for k, model in enumerate(models):
            block = M[:, mfs[n].block_offsets[k]:mfs[n].block_offsets[k + 1]]
            assert rel(block, mttkrp(T, model.factors, n)) <= 1e-12


def test_fused_mttkrp_four_modes(rng):
    T = DenseTensor(rng.standard_normal((3, 4, 5, 6)))
    models = [CpModel([rng.standard_normal((d, R)) for d in T.dims]) for R in (2, 3)]
    mfs = [fuse(models, i) for i in range(4)]
    for n in range(4):
        M = fused_mttkrp(T, mfs, n)
        assert rel(M[:, :2], mttkrp(T, models[0].factors, n)) <= 1e-12
        assert rel(M[:, 2:], mttkrp(T, models[1].factors, n)) <= 1e-12


def test_cals_single_model_matches_cp_als(rng):
    X = rng.standard_normal((6, 7, 8))
    init = init_random(X.shape, 3, 5)
    cfg = FitConfig(force_iterations=20)
    solo = cp_als_fit(X, init, cfg)
    (fused,) = cals_fit(X, [init], cfg)
    assert rel(fused.errors, solo.errors) <= 1e-12
    for U, V in zip(fused.factors, solo.factors):
        assert rel(U, V) <= 1e-12


def test_cals_trajectories_match_solo_runs(rng):
    X, _ = random_cp_tensor(rng, (8, 9, 10), 3, noise=0.1)
    inits = [init_random(X.shape, R, seed) for seed, R in enumerate((2, 3, 3, 4))]
    cfg = FitConfig(force_iterations=20)
    fused = cals_fit(X, inits, cfg)
    for init, model in zip(inits, fused):
        solo = cp_als_fit(X, init, cfg)
        assert model.iterations == 20
        np.testing.assert_allclose(model.errors, solo.errors, rtol=1e-8)
        for U, V in zip(model.factors, solo.factors):
            assert rel(U, V) <= 1e-8


def test_cals_staggered_convergence(rng):
    X, _ = random_cp_tensor(rng, (8, 9, 10), 3, noise=0.05)
    cfg = FitConfig(tolerance=1e-9, max_iterations=60)
    # the easy model starts at an already converged solution
    easy = cp_als_fit(X, init_random(X.shape, 1, 0), FitConfig(tolerance=1e-14, max_iterations=500))
    inits = [CpModel(easy.factors)] + [init_random(X.shape, 4, s) for s in (1, 2)]

    snapshots = []

    def trace(state):
        snapshots.append((list(state.active), state.final[0]))

    results = CalsState(X, inits, cfg).run(trace)
    assert results[0].converged
    assert results[0].iterations < results[1].iterations
    frozen_at = next(i for i, (active, _) in enumerate(snapshots) if 0 not in active)
    frozen = snapshots[frozen_at][1]
    for active, final in snapshots[frozen_at:]:
        assert final is frozen
    for U, V in zip(results[0].factors, frozen):
        np.testing.assert_array_equal(U, V)
    for init, model in zip(inits, results):
        solo = cp_als_fit(X, init, cfg)
        assert solo.iterations == model.iterations
        np.testing.assert_allclose(model.errors, solo.errors, rtol=1e-8)


def test_cals_batching_matches_unbatched(rng):
    X = rng.standard_normal((6, 7, 8))
    inits = [init_random(X.shape, 3, s) for s in range(5)]
    cfg = FitConfig(force_iterations=8)
    c_one, c_many = FlopCounter(), FlopCounter()
    whole = cals_fit(X, inits, cfg, counter=c_one)
    batched = cals_fit(X, inits, cfg, counter=c_many, max_columns=4)
    for a, b in zip(whole, batched):
        assert rel(a.errors, b.errors) <= 1e-12
    assert c_one.mttkrp == c_many.mttkrp
    assert c_many.mttkrp_calls > c_one.mttkrp_calls


def test_cals_reports_offending_model(rng):
    X = rng.standard_normal((4, 5, 6))
    bad = init_random(X.shape, 2, 1)
    bad.factors[1][0, 0] = np.nan
    with pytest.raises(NumericalBreakdownError) as info:
        cals_fit(X, [init_random(X.shape, 2, 0), bad], FitConfig(force_iterations=3))
    assert info.value.model_index == 1


def test_cals_record_mode_keeps_healthy_models(rng):
    X = rng.standard_normal((4, 5, 6))
    bad = init_random(X.shape, 2, 1)
    bad.factors[1][0, 0] = np.nan
    good = init_random(X.shape, 2, 0)
    state = CalsState(X, [good, bad], FitConfig(force_iterations=3), on_error="record")
    results = state.run()
    assert set(state.failures) == {1}
    solo = cp_als_fit(X, good, FitConfig(force_iterations=3))
    np.testing.assert_allclose(results[0].errors, solo.errors, rtol=1e-12)


def test_flop_counts_follow_formula(rng):
    T = DenseTensor(np.zeros((50, 200, 200)))
    counter = FlopCounter()
    mttkrp(T, [np.zeros((d, 5)) for d in T.dims], 0, counter)
    assert counter.mttkrp == 20_000_000 == 2 * 5 * 2_000_000

    fused = FlopCounter()
    mfs = [np.zeros((d, 250)) for d in T.dims]
    fused_mttkrp(T, mfs, 0, fused)
    assert fused.mttkrp == 1_000_000_000
    assert mttkrp_flops((50, 200, 200), 0) == 0


def test_flop_additivity(rng):
    T = DenseTensor(rng.standard_normal((5, 6, 7)))
    models = [init_random(T.dims, R, R) for R in (1, 3, 4)]
    solo = FlopCounter()
    for m in models:
        mttkrp(T, m.factors, 1, solo)
    fused = FlopCounter()
    fused_mttkrp(T, [fuse(models, i) for i in range(3)], 1, fused)
    assert fused.mttkrp == solo.mttkrp


def test_cals_flops_monotone_and_per_fit(rng):
    X = rng.standard_normal((4, 5, 6))
    counter = FlopCounter()
    history = []
    CalsState(X, [init_random(X.shape, 2, s) for s in range(3)], FitConfig(force_iterations=4),
              counter=counter).run(lambda st: history.append(counter.mttkrp))
    assert history == sorted(history)
    assert counter.mttkrp == 4 * 3 * mttkrp_flops(X.shape, 6)
