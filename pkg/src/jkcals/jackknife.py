"""Jackknife resampling of CP models.

Three drivers share one numerical contract:

* :func:`jk_als` refits every submodel on its physically reduced tensor.
* :func:`jk_parallel` does the same with submodels spread over threads.
* :func:`jk_cals` fits all submodels against the *full* tensor in one
  concurrent-ALS pool.  Each submodel keeps zero rows at its removed indices
  in the sampled mode; rows of the fused MTTKRP belonging to removed samples
  are discarded by re-zeroing after each update, and in the other modes the
  removed slices meet those zero rows inside the Khatri-Rao product.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from threadpoolctl import threadpool_limits

from .cals import CalsState
from .cp import CpModel, FitConfig, cp_als_fit
from .exceptions import NumericalBreakdownError
from .flops import FlopCounter
from .tensor import DEFAULT_RCOND, as_tensor, remove_slice

logger = logging.getLogger(__name__)

METHODS = {
    "reference_als": "reference_als",
    "als": "reference_als",
    "parallel_als": "parallel_als",
    "oals": "parallel_als",
    "cals": "cals",
}
STD_CONVENTION = "jackknife_se"


@dataclass
class JackknifeConfig:
    sampled_mode: int = 0
    d: int = 1
    fit: FitConfig = field(default_factory=FitConfig)
    method: str = "cals"
    alignment: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        self.method = METHODS[self.method]
        if int(self.d) < 1:
            raise ValueError(f"d must be positive, got {self.d}")
        if int(self.threads) < 1:
            raise ValueError(f"threads must be positive, got {self.threads}")

    def check(self, dims):
        if not 0 <= self.sampled_mode < len(dims):
            raise ValueError(f"sampled mode {self.sampled_mode} out of range for dims {dims}")
        In = dims[self.sampled_mode]
        if 2 * self.d > In:
            raise ValueError(f"d={self.d} exceeds half the sampled mode size {In}")


@dataclass
class SubmodelSet:
    """Fitted jackknife submodels, one per removed group.

    ``submodels[p]`` is ``None`` when the fit of group ``p`` failed; the
    reason is kept in ``failures``.
    """

    groups: list
    submodels: list
    failures: dict = field(default_factory=dict)

    @property
    def final_errors(self):
        return [m.errors[-1] if m is not None and m.errors else None for m in self.submodels]

    @property
    def iterations(self):
        return [m.iterations if m is not None else 0 for m in self.submodels]

    @property
    def fitted(self):
        return [m for m in self.submodels if m is not None]


@dataclass
class UncertaintyResult:
    stddev: dict
    sampled_mode: int
    n_submodels: int
    convention: str = STD_CONVENTION
    alignment: list = field(default_factory=list)


def delete_d_groups(I, d):
    """Contiguous groups of ``d`` indices; the last one may be smaller."""
    I, d = int(I), int(d)
    if d < 1 or 2 * d > I:
        raise ValueError(f"need 1 <= d <= I/2, got I={I}, d={d}")
    return [list(range(start, min(start + d, I))) for start in range(0, I, d)]


def pad_with_zero_rows(U, row_indices):
    """Insert zero rows so that they land at ``row_indices`` of the result."""
    U = np.asarray(U, dtype=np.float64)
    rows = sorted(int(i) for i in row_indices)
    if len(set(rows)) != len(rows):
        raise ValueError(f"duplicate row indices {list(row_indices)}")
    total = U.shape[0] + len(rows)
    if rows and not (0 <= rows[0] and rows[-1] < total):
        raise IndexError(f"row indices out of range 0..{total - 1}")
    out = np.zeros((total, U.shape[1]))
    keep = np.setdiff1d(np.arange(total), rows)
    out[keep] = U
    return out


def zero_rows_in_place(G, model_block, row_indices):
    """Zero ``row_indices`` within the column block ``model_block`` of ``G``.

    ``model_block`` is a ``slice`` or a ``(start, stop)`` column range.
    """
    if not isinstance(model_block, slice):
        model_block = slice(*model_block)
    rows = np.asarray(list(row_indices), dtype=np.intp)
    if rows.size and (rows.min() < 0 or rows.max() >= G.shape[0]):
        raise IndexError(f"row indices out of range 0..{G.shape[0] - 1}")
    G[rows, model_block] = 0.0
    return G


def _delete_rows(U, rows):
    return np.delete(U, list(rows), axis=0)


def _subsample_model(P, mode, group):
    factors = [U.copy() for U in P.factors]
    factors[mode] = _delete_rows(factors[mode], group)
    return CpModel(factors)


def _cosines(A, B):
    """Matrix of cosines between the columns of ``A`` and ``B``."""
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        C = (A.T @ B) / np.outer(na, nb)
    C[~np.isfinite(C)] = 0.0
    return C


def align_submodel(P_hat, P, sampled_mode):
    """Resolve permutation, sign and scale of ``P_hat`` against ``P``.

    Components are matched by the assignment maximizing the summed
    congruence ``prod_{n != sampled} |cos(P_hat_n[:, r], P_n[:, s])|``.  Each
    non-sampled column is then flipped to point along ``P``'s column and
    rescaled to ``P``'s column norm; all compensating signs and scales go
    into the sampled mode, so the represented tensor never changes.
    """
    R = P_hat.rank
    if P.rank != R:
        raise ValueError(f"rank mismatch: {R} vs {P.rank}")
    if P_hat.ndim != P.ndim:
        raise ValueError("models have different numbers of modes")
    modes = [n for n in range(P.ndim) if n != sampled_mode]
    score = np.ones((R, R))
    for n in modes:
        score *= np.abs(_cosines(P_hat.factors[n], P.factors[n]))
    # rows: reference components, cols: submodel components
    ref_idx, hat_idx = linear_sum_assignment(score.T, maximize=True)
    perm = hat_idx[np.argsort(ref_idx)]

    factors = [U[:, perm].copy() for U in P_hat.factors]
    flips = []
    for s in range(R):
        flipped = []
        for n in modes:
            c = float(factors[n][:, s] @ P.factors[n][:, s])
            if c < 0:
                factors[n][:, s] *= -1
                flipped.append(n)
        if len(flipped) % 2:
            factors[sampled_mode][:, s] *= -1
            flipped.append(sampled_mode)
        flips.append(flipped)
        for n in modes:
            current = np.linalg.norm(factors[n][:, s])
            target = np.linalg.norm(P.factors[n][:, s])
            if current == 0:
                continue
            if target == 0:
                target = 1.0
            factors[n][:, s] *= target / current
            factors[sampled_mode][:, s] *= current / target

    aligned = CpModel(factors, list(P_hat.errors), P_hat.iterations, P_hat.converged)
    diagnostics = {
        "permutation": [int(p) for p in perm],
        "congruence": [float(score[perm[s], s]) for s in range(R)],
        "sign_flips": flips,
    }
    return aligned, diagnostics


def jackknife_std(submodels, P, sampled_mode):
    """Jackknife standard error of every non-sampled factor matrix.

    ``S = sqrt((g - 1) / g * sum_p (U_p - mean)^2)`` over the ``g`` submodels.
    """
    if isinstance(submodels, SubmodelSet):
        submodels = submodels.fitted
    submodels = [m for m in submodels if m is not None]
    g = len(submodels)
    if g < 2:
        raise ValueError(f"need at least 2 submodels for a standard deviation, got {g}")
    stddev = {}
    for n in range(P.ndim):
        if n == sampled_mode:
            continue
        stack = np.stack([m.factors[n] for m in submodels])
        if stack.shape[1:] != P.factors[n].shape:
            raise ValueError(f"mode-{n} submodel factors do not match the model's shape")
        # shift by the first sample so identical submodels give exactly zero
        dev = stack - stack[0]
        dev -= dev.mean(axis=0)
        stddev[n] = np.sqrt((g - 1) / g * np.sum(dev * dev, axis=0))
    return UncertaintyResult(stddev, sampled_mode, g)


def _finish(P, groups, fitted, failures, cfg):
    diags = []
    if cfg.alignment:
        aligned = []
        for m in fitted:
            if m is None:
                aligned.append(None)
                diags.append(None)
                continue
            am, diag = align_submodel(m, P, cfg.sampled_mode)
            aligned.append(am)
            diags.append(diag)
        fitted = aligned
    subs = SubmodelSet(groups, fitted, failures)
    unc = jackknife_std(subs, P, cfg.sampled_mode)
    unc.alignment = diags
    return subs, unc


def _fit_group(T, P, cfg, group, counter, rcond):
    Tp = remove_slice(T, cfg.sampled_mode, group)
    return cp_als_fit(Tp, _subsample_model(P, cfg.sampled_mode, group), cfg.fit,
                      counter, rcond)


def _prepare(T, P, cfg):
    T = as_tensor(T)
    cfg = cfg or JackknifeConfig()
    if P.dims != T.dims:
        raise ValueError(f"model dims {P.dims} do not match tensor dims {T.dims}")
    cfg.check(T.dims)
    return T, cfg, delete_d_groups(T.dims[cfg.sampled_mode], cfg.d)


def jk_als(T, P, cfg: JackknifeConfig | None = None, counter: FlopCounter | None = None,
           rcond=DEFAULT_RCOND):
    """Reference jackknife: one independent CP-ALS fit per removed group."""
    T, cfg, groups = _prepare(T, P, cfg)
    fitted, failures = [], {}
    for p, group in enumerate(groups):
        try:
            fitted.append(_fit_group(T, P, cfg, group, counter, rcond))
        except (NumericalBreakdownError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.warning("submodel %d failed: %s", p, exc)
            failures[p] = str(exc)
            fitted.append(None)
    return _finish(P, groups, fitted, failures, cfg)


def jk_parallel(T, P, cfg: JackknifeConfig | None = None, counter: FlopCounter | None = None,
                rcond=DEFAULT_RCOND, threads=None):
    """Like :func:`jk_als`, with submodels fitted concurrently on threads.

    Each fit runs with single-threaded BLAS, so results do not depend on the
    number of workers.
    """
    T, cfg, groups = _prepare(T, P, cfg)
    threads = int(threads or cfg.threads)
    if threads == 1:
        return jk_als(T, P, cfg, counter, rcond)

    def work(group):
        local = FlopCounter()
        try:
            return _fit_group(T, P, cfg, group, local, rcond), local, None
        except (NumericalBreakdownError, FloatingPointError, np.linalg.LinAlgError) as exc:
            return None, local, str(exc)

    with threadpool_limits(limits=1, user_api="blas"):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, groups))
    fitted, failures = [], {}
    for p, (model, local, err) in enumerate(outcomes):
        if counter is not None:
            counter.merge(local)
        if err is not None:
            logger.warning("submodel %d failed: %s", p, err)
            failures[p] = err
        fitted.append(model)
    return _finish(P, groups, fitted, failures, cfg)


def jk_cals_multi(T, models, cfg: JackknifeConfig | None = None,
                  counter: FlopCounter | None = None, rcond=DEFAULT_RCOND,
                  max_columns=None, callback=None):
    """Jackknife several overall models with all submodels in one fused pool.

    Returns one ``(SubmodelSet, UncertaintyResult)`` pair per model.
    ``callback(state, layout)`` runs after every sweep; ``layout[k]`` is the
    ``(model index, group)`` of pool member ``k``.
    """
    T = as_tensor(T)
    cfg = cfg or JackknifeConfig()
    cfg.check(T.dims)
    mode = cfg.sampled_mode
    groups = delete_d_groups(T.dims[mode], cfg.d)
    slice_sq = T.slice_norms_sq(mode)
    inits, zero_rows, norms, layout = [], [], [], []
    for m, P in enumerate(models):
        if P.dims != T.dims:
            raise ValueError(f"model {m} dims {P.dims} do not match tensor dims {T.dims}")
        for group in groups:
            inits.append([U.copy() for U in P.factors])
            zero_rows.append(group)
            norms.append(T.norm_sq - float(slice_sq[group].sum()))
            layout.append((m, tuple(group)))

    state = CalsState(T, inits, cfg.fit, norms_sq=norms, zero_mode=mode,
                      zero_rows=zero_rows, counter=counter, rcond=rcond,
                      max_columns=max_columns, on_error="record")
    hook = None if callback is None else (lambda st: callback(st, layout))
    pooled = state.run(hook)

    out = []
    g = len(groups)
    for m, P in enumerate(models):
        fitted, failures = [], {}
        for p, group in enumerate(groups):
            k = m * g + p
            if k in state.failures:
                failures[p] = state.failures[k]
                fitted.append(None)
                continue
            sub = pooled[k]
            sub.factors[mode] = _delete_rows(sub.factors[mode], group)
            fitted.append(sub)
        out.append(_finish(P, groups, fitted, failures, cfg))
    return out


def jk_cals(T, P, cfg: JackknifeConfig | None = None, counter: FlopCounter | None = None,
            rcond=DEFAULT_RCOND, max_columns=None, callback=None):
    """Jackknife ``P`` by fitting all submodels concurrently on the full tensor."""
    return jk_cals_multi(T, [P], cfg, counter, rcond, max_columns, callback)[0]


def run_jackknife(T, P, cfg: JackknifeConfig | None = None, counter: FlopCounter | None = None,
                  **kwargs):
    """Dispatch to the driver named by ``cfg.method``."""
    cfg = cfg or JackknifeConfig()
    if cfg.method == "cals":
        return jk_cals(T, P, cfg, counter, **kwargs)
    if cfg.method == "parallel_als":
        return jk_parallel(T, P, cfg, counter, **kwargs)
    return jk_als(T, P, cfg, counter, **kwargs)
