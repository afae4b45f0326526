"""scikit-learn style estimators on top of the functional API."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cals import cals_fit
from .cp import CpModel, FitConfig, cp_als_fit, init_random, reconstruct
from .flops import FlopCounter
from .jackknife import JackknifeConfig, run_jackknife
from .tensor import DEFAULT_RCOND, DenseTensor, gramian, hadamard_gramians, mttkrp, pinv_solve


def check_tensor(X, min_modes=2):
    """Validate ``X`` as a finite float64 tensor with at least ``min_modes`` modes."""
    if isinstance(X, DenseTensor):
        arr = X.array
    else:
        arr = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=min_modes >= 2)
    if arr.ndim < min_modes:
        raise ValueError(f"expected a tensor with at least {min_modes} modes, got {arr.ndim}")
    return X if isinstance(X, DenseTensor) else DenseTensor(arr)


def _fit_config(est):
    return FitConfig(tolerance=est.tol, max_iterations=est.max_iter, force_iterations=est.n_iter)


def _seed_stream(random_state, count):
    rng = np.random.default_rng(random_state)
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=count)]


class CPALS(TransformerMixin, BaseEstimator):
    """CP decomposition fitted by alternating least squares.

    ``transform`` projects new samples (slices along ``sample_mode``) onto the
    fitted non-sample factors and returns their sample-mode loadings.

    Parameters
    ----------
    rank : int
        Number of components.
    tol : float
        Relative change of the squared error at which fitting stops.
    max_iter : int
        Maximum number of sweeps.
    n_iter : int or None
        If set, run exactly this many sweeps.
    sample_mode : int
        Mode holding samples.
    init : "random" or CpModel
        Starting point; random factors are uniform on [0, 1).
    random_state : int, Generator or None
    """

    def __init__(self, rank=1, *, tol=1e-6, max_iter=1000, n_iter=None, sample_mode=0,
                 init="random", random_state=None, rcond=DEFAULT_RCOND):
        self.rank = rank
        self.tol = tol
        self.max_iter = max_iter
        self.n_iter = n_iter
        self.sample_mode = sample_mode
        self.init = init
        self.random_state = random_state
        self.rcond = rcond

    def fit(self, X, y=None):
        T = check_tensor(X)
        if not 0 <= self.sample_mode < T.ndim:
            raise ValueError(f"sample_mode {self.sample_mode} out of range")
        if isinstance(self.init, CpModel):
            start = self.init
        elif self.init == "random":
            start = init_random(T.dims, self.rank, self.random_state)
        else:
            raise ValueError(f"unknown init {self.init!r}")
        self.flops_ = FlopCounter()
        self.model_ = cp_als_fit(T, start, _fit_config(self), self.flops_, self.rcond)
        self.factors_ = self.model_.factors
        self.errors_ = np.asarray(self.model_.errors)
        self.n_iter_ = self.model_.iterations
        self.converged_ = self.model_.converged
        self.n_features_in_ = int(np.prod(T.dims)) // T.dims[self.sample_mode]
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).factors_[self.sample_mode]

    def _check_new(self, X):
        check_is_fitted(self, "model_")
        T = check_tensor(X)
        expected = list(self.model_.dims)
        got = list(T.dims)
        expected[self.sample_mode] = got[self.sample_mode] if len(got) == len(expected) else -1
        if got != expected:
            raise ValueError(f"tensor dims {T.dims} incompatible with fitted dims "
                             f"{self.model_.dims} outside the sample mode")
        return T

    def transform(self, X):
        T = self._check_new(X)
        n = self.sample_mode
        factors = list(self.factors_)
        factors[n] = np.zeros((T.dims[n], self.model_.rank))
        M = mttkrp(T, factors, n)
        H = hadamard_gramians(factors, n, [gramian(U) for U in factors])
        return pinv_solve(M, H, self.rcond)

    def inverse_transform(self, scores):
        check_is_fitted(self, "model_")
        scores = check_array(scores, dtype=np.float64)
        factors = list(self.factors_)
        factors[self.sample_mode] = scores
        return reconstruct(factors).array.copy()

    def score(self, X, y=None):
        """Fraction of ``||X||^2`` explained by the projected reconstruction."""
        T = self._check_new(X)
        residual = T.array - self.inverse_transform(self.transform(T))
        return 1.0 - float(np.sum(residual**2)) / T.norm_sq


class ConcurrentCPALS(BaseEstimator):
    """Fit several CP models to one tensor in lock-step (concurrent ALS).

    One model per entry of ``ranks``, each repeated ``n_init`` times with
    different random starts.
    """

    def __init__(self, ranks=(1,), *, n_init=1, tol=1e-6, max_iter=1000, n_iter=None,
                 random_state=None, rcond=DEFAULT_RCOND, max_columns=None):
        self.ranks = ranks
        self.n_init = n_init
        self.tol = tol
        self.max_iter = max_iter
        self.n_iter = n_iter
        self.random_state = random_state
        self.rcond = rcond
        self.max_columns = max_columns

    def fit(self, X, y=None):
        T = check_tensor(X)
        ranks = [int(R) for R in self.ranks for _ in range(self.n_init)]
        seeds = _seed_stream(self.random_state, len(ranks))
        inits = [init_random(T.dims, R, s) for R, s in zip(ranks, seeds)]
        self.flops_ = FlopCounter()
        self.models_ = cals_fit(T, inits, _fit_config(self), self.flops_, self.rcond,
                                self.max_columns)
        self.ranks_ = ranks
        self.final_errors_ = np.array([m.errors[-1] for m in self.models_])
        return self

    def best_model(self, rank):
        check_is_fitted(self, "models_")
        candidates = [m for m in self.models_ if m.rank == rank]
        if not candidates:
            raise ValueError(f"no fitted model of rank {rank}")
        return min(candidates, key=lambda m: m.errors[-1])


class JackknifeCP(BaseEstimator):
    """Jackknife standard errors of a CP model's factor matrices.

    ``fit(X, model=P)`` resamples an already fitted model; without ``model``
    an overall model of rank ``rank`` is first fitted with :class:`CPALS`.
    After fitting, ``std_[n]`` holds the standard-error matrix for every mode
    other than ``sampled_mode``.
    """

    def __init__(self, rank=1, *, sampled_mode=0, d=1, method="cals", tol=1e-6,
                 max_iter=1000, n_iter=None, alignment=True, threads=1,
                 random_state=None):
        self.rank = rank
        self.sampled_mode = sampled_mode
        self.d = d
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.n_iter = n_iter
        self.alignment = alignment
        self.threads = threads
        self.random_state = random_state

    def fit(self, X, y=None, model=None):
        T = check_tensor(X)
        if model is None:
            model = CPALS(self.rank, tol=self.tol, max_iter=self.max_iter,
                          sample_mode=self.sampled_mode,
                          random_state=self.random_state).fit(T).model_
        cfg = JackknifeConfig(sampled_mode=self.sampled_mode, d=self.d, fit=_fit_config(self),
                              method=self.method, alignment=self.alignment,
                              threads=self.threads)
        self.flops_ = FlopCounter()
        subs, unc = run_jackknife(T, model, cfg, self.flops_)
        self.model_ = model
        self.submodels_ = subs
        self.groups_ = subs.groups
        self.std_ = unc.stddev
        self.uncertainty_ = unc
        return self
