"""Single-model CP-ALS."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericalBreakdownError
from .flops import FlopCounter
from .tensor import (
    DEFAULT_RCOND,
    as_tensor,
    gramian,
    hadamard_gramians,
    khatri_rao,
    mttkrp,
    pinv_solve,
)

# negative errors within this fraction of ||T||^2 are rounding noise
NEGATIVE_ERROR_SLACK = 1e-9
# relative-change denominator never drops below this fraction of ||T||^2
CONVERGENCE_FLOOR = 1e-8


@dataclass
class FitConfig:
    """Stopping rule for ALS.

    ``force_iterations`` runs exactly that many sweeps and ignores both the
    tolerance and ``max_iterations``.
    """

    tolerance: float = 1e-6
    max_iterations: int = 1000
    force_iterations: int | None = None

    def __post_init__(self):
        if not self.tolerance >= 0:
            raise ValueError(f"tolerance must be nonnegative, got {self.tolerance}")
        if int(self.max_iterations) < 1:
            raise ValueError(f"max_iterations must be positive, got {self.max_iterations}")
        if self.force_iterations is not None and int(self.force_iterations) < 1:
            raise ValueError(f"force_iterations must be positive, got {self.force_iterations}")

    @property
    def sweep_limit(self):
        if self.force_iterations is not None:
            return int(self.force_iterations)
        return int(self.max_iterations)


@dataclass
class CpModel:
    factors: list
    errors: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def __post_init__(self):
        self.factors = [np.array(U, dtype=np.float64) for U in self.factors]
        if not self.factors:
            raise ValueError("a CP model needs at least one factor matrix")
        R = self.factors[0].shape[1]
        for i, U in enumerate(self.factors):
            if U.ndim != 2 or U.shape[1] != R:
                raise ValueError(f"factor {i} has shape {U.shape}, expected (*, {R})")

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @property
    def dims(self):
        return tuple(U.shape[0] for U in self.factors)

    @property
    def ndim(self):
        return len(self.factors)

    def copy(self):
        return CpModel(
            [U.copy() for U in self.factors],
            list(self.errors),
            self.iterations,
            self.converged,
        )


def init_random(dims, rank, seed=None):
    """Uniform(0, 1) factors from ``numpy.random.default_rng(seed)``."""
    if int(rank) < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    return CpModel([rng.uniform(0.0, 1.0, size=(int(d), int(rank))) for d in dims])


def reconstruct(model):
    factors = model.factors if isinstance(model, CpModel) else list(model)
    dims = tuple(U.shape[0] for U in factors)
    if len(factors) == 1:
        return as_tensor(factors[0].sum(axis=1))
    flat = factors[0] @ khatri_rao(*factors[:0:-1]).T
    return as_tensor(flat.reshape(dims, order="F"))


def compute_error(norm_T_sq, H_N, M_N, U_N):
    """Squared residual ``||T - model||^2`` from last-mode sweep quantities.

    ``||T||^2 + sum(H * U^T U) - 2 sum(U * M)``.  Small negative values from
    cancellation are clamped to zero.
    """
    inner = float(np.sum(U_N * M_N))
    model_sq = float(np.sum(H_N * (U_N.T @ U_N)))
    e = norm_T_sq + model_sq - 2.0 * inner
    if not math.isfinite(e):
        raise NumericalBreakdownError(f"non-finite error {e}")
    if e < 0:
        if e < -NEGATIVE_ERROR_SLACK * norm_T_sq:
            raise NumericalBreakdownError(
                f"error {e:.3e} is negative beyond rounding (||T||^2 = {norm_T_sq:.3e})"
            )
        e = 0.0
    return e


def cp_als_sweep(T, model, workspace=None, counter: FlopCounter | None = None,
                 rcond=DEFAULT_RCOND):
    """One ALS pass over all modes, updating ``model.factors`` in place.

    ``workspace`` may be a dict that keeps Gramians between sweeps.  Returns
    ``(H, M)`` of the last mode for :func:`compute_error`.
    """
    T = as_tensor(T)
    factors = model.factors
    if len(factors) != T.ndim:
        raise ValueError(f"model has {len(factors)} modes, tensor has {T.ndim}")
    R = model.rank
    if workspace is None:
        workspace = {}
    grams = workspace.get("grams")
    if grams is None:
        grams = [gramian(U) for U in factors]
        if counter is not None:
            for U in factors:
                counter.add_gramian(U.shape[0], R)
    H = M = None
    for n in range(T.ndim):
        M = mttkrp(T, factors, n, counter)
        H = hadamard_gramians(factors, n, grams)
        factors[n] = pinv_solve(M, H, rcond)
        grams[n] = gramian(factors[n])
        if counter is not None:
            counter.add_hadamard(T.ndim - 1, R)
            counter.add_solve(T.dims[n], R)
            counter.add_gramian(T.dims[n], R)
    workspace["grams"] = grams
    return H, M


def has_converged(prev, curr, tolerance, norm_sq):
    floor = max(CONVERGENCE_FLOOR * norm_sq, np.finfo(float).tiny)
    return abs(prev - curr) / max(prev, floor) < tolerance


def cp_als_fit(T, model, cfg: FitConfig | None = None,
               counter: FlopCounter | None = None, rcond=DEFAULT_RCOND):
    """Run ALS sweeps from ``model`` until the stopping rule in ``cfg`` fires.

    The input model is not modified; a fitted copy is returned with its
    per-sweep squared-error history.
    """
    T = as_tensor(T)
    cfg = cfg or FitConfig()
    if model.dims != T.dims:
        raise ValueError(f"model dims {model.dims} do not match tensor dims {T.dims}")
    fitted = model.copy()
    fitted.errors = []
    fitted.iterations = 0
    fitted.converged = False
    norm_sq = T.norm_sq
    workspace = {}
    prev = norm_sq
    for _ in range(cfg.sweep_limit):
        H, M = cp_als_sweep(T, fitted, workspace, counter, rcond)
        e = compute_error(norm_sq, H, M, fitted.factors[-1])
        if counter is not None:
            counter.add_error(T.dims[-1], fitted.rank)
        fitted.errors.append(e)
        fitted.iterations += 1
        if cfg.force_iterations is None and has_converged(prev, e, cfg.tolerance, norm_sq):
            fitted.converged = True
            break
        prev = e
    return fitted
