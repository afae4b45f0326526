"""Concurrent ALS: lock-step fitting of many CP models to one tensor.

Every sweep, the per-model MTTKRPs of a mode are fused into a single product
of the unfolding with the column-stacked Khatri-Rao products of all active
models.  Since the Khatri-Rao product works column by column, the stacked
product is just the Khatri-Rao product of the fused factors.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .cp import CpModel, FitConfig, compute_error, has_converged
from .exceptions import NumericalBreakdownError
from .flops import FlopCounter
from .tensor import (
    DEFAULT_RCOND,
    as_tensor,
    gramian,
    hadamard_gramians,
    khatri_rao,
    pinv_solve,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_COLUMNS = 4096


def default_max_columns():
    return int(os.environ.get("JKCALS_MAX_COLUMNS", DEFAULT_MAX_COLUMNS))


@dataclass
class MultiFactor:
    """Mode-``mode`` factors of several models, concatenated column-wise."""

    mode: int
    block_offsets: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.block_offsets = np.asarray(self.block_offsets, dtype=np.intp)
        if np.any(np.diff(self.block_offsets) <= 0):
            raise ValueError("block offsets must be strictly increasing")
        if self.block_offsets[0] != 0 or self.block_offsets[-1] != self.data.shape[1]:
            raise ValueError("block offsets do not span the fused matrix")

    @property
    def n_blocks(self):
        return len(self.block_offsets) - 1

    def block(self, k):
        return self.data[:, self.block_offsets[k]:self.block_offsets[k + 1]]


def fuse(models, n):
    """Concatenate the mode-``n`` factors of ``models`` in model order."""
    mats = [m.factors[n] if isinstance(m, CpModel) else np.asarray(m) for m in models]
    if not mats:
        raise ValueError("nothing to fuse")
    rows = {U.shape[0] for U in mats}
    if len(rows) != 1:
        raise ValueError(f"mode-{n} factors have differing row counts {sorted(rows)}")
    offsets = np.concatenate([[0], np.cumsum([U.shape[1] for U in mats])])
    return MultiFactor(n, offsets, np.hstack(mats).astype(np.float64, copy=False))


def _fused_product(T, fused, n):
    """``unfold(T, n) @ khatri_rao(fused factors except n, descending)``."""
    krp = khatri_rao(*[fused[i] for i in reversed(range(T.ndim)) if i != n])
    if n == T.ndim - 1 and T.ndim > 1:
        left = T.size // T.dims[n]
        return T.array.reshape(left, T.dims[n], order="F").T @ krp
    return T.unfolding(n) @ krp


def fused_mttkrp(T, multifactors, n, counter: FlopCounter | None = None):
    """MTTKRP for all fused models at once; returns ``I_n x sum(R_i)``.

    ``multifactors`` holds one :class:`MultiFactor` (or plain matrix) per
    mode.  Column block ``i`` of the result is model ``i``'s MTTKRP.
    """
    T = as_tensor(T)
    mats = [mf.data if isinstance(mf, MultiFactor) else np.asarray(mf, dtype=np.float64)
            for mf in multifactors]
    if len(mats) != T.ndim:
        raise ValueError(f"expected {T.ndim} multifactors, got {len(mats)}")
    width = mats[0].shape[1]
    for i, G in enumerate(mats):
        if G.shape[1] != width:
            raise ValueError("multifactors have differing column counts")
        if i != n and G.shape[0] != T.dims[i]:
            raise ValueError(f"multifactor {i} has {G.shape[0]} rows, tensor has {T.dims[i]}")
    if counter is not None:
        counter.add_mttkrp(T.size, width)
    return _fused_product(T, mats, n)


class CalsState:
    """Lock-step ALS over several models sharing one tensor.

    Each model may carry its own squared norm (used by the error formula) and
    a set of rows of ``zero_mode`` that are forced to zero after every update
    of that mode.  Converged or failed models are frozen and compacted out of
    the fused matrices at the end of the sweep in which they stop.
    """

    def __init__(self, T, inits, cfg: FitConfig, *, norms_sq=None, zero_mode=None,
                 zero_rows=None, counter=None, rcond=DEFAULT_RCOND,
                 max_columns=None, on_error="raise"):
        self.T = as_tensor(T)
        self.cfg = cfg
        self.K = len(inits)
        if self.K == 0:
            raise ValueError("no models to fit")
        factor_lists = [m.factors if isinstance(m, CpModel) else list(m) for m in inits]
        N = self.T.ndim
        for k, fl in enumerate(factor_lists):
            dims = tuple(U.shape[0] for U in fl)
            if dims != self.T.dims:
                raise ValueError(f"model {k} dims {dims} do not match tensor {self.T.dims}")
        self.ranks = [fl[0].shape[1] for fl in factor_lists]
        self.norms_sq = list(norms_sq) if norms_sq is not None else [self.T.norm_sq] * self.K
        self.zero_mode = zero_mode
        self.zero_rows = [np.asarray(r, dtype=np.intp) for r in zero_rows] if zero_rows else None
        self.counter = counter
        self.rcond = rcond
        self.max_columns = max_columns or default_max_columns()
        if on_error not in ("raise", "record"):
            raise ValueError(f"on_error must be 'raise' or 'record', got {on_error!r}")
        self.on_error = on_error

        self.active = list(range(self.K))
        self.fused = [np.hstack([np.asarray(fl[n], dtype=np.float64) for fl in factor_lists])
                      for n in range(N)]
        self._reset_offsets()
        if self.zero_rows is not None:
            for pos, k in enumerate(self.active):
                self._zero(pos, k)
        self.grams = [[gramian(self._block(n, pos)) for n in range(N)]
                      for pos in range(self.K)]
        if counter is not None:
            for k in range(self.K):
                for n in range(N):
                    counter.add_gramian(self.T.dims[n], self.ranks[k])
        self.errors = [[] for _ in range(self.K)]
        self.prev = list(self.norms_sq)
        self.iterations = [0] * self.K
        self.converged = [False] * self.K
        self.failures = {}
        self.final = [None] * self.K

    def _reset_offsets(self):
        widths = [self.ranks[k] for k in self.active]
        self.offsets = np.concatenate([[0], np.cumsum(widths)]).astype(np.intp)

    def _block(self, n, pos):
        return self.fused[n][:, self.offsets[pos]:self.offsets[pos + 1]]

    def _zero(self, pos, k):
        rows = self.zero_rows[k]
        if rows.size:
            self.fused[self.zero_mode][rows, self.offsets[pos]:self.offsets[pos + 1]] = 0.0

    def multifactors(self):
        """Current fused factors of the active models."""
        return [MultiFactor(n, self.offsets, G) for n, G in enumerate(self.fused)]

    def _batches(self):
        start = 0
        for pos in range(1, len(self.active) + 1):
            too_wide = self.offsets[pos] - self.offsets[start] > self.max_columns
            if too_wide and pos - 1 > start:
                yield start, pos - 1
                start = pos - 1
        if start < len(self.active):
            yield start, len(self.active)

    @property
    def done(self):
        return not self.active

    def sweep(self):
        """Advance every active model by one ALS sweep."""
        T, N = self.T, self.T.ndim
        n_active = len(self.active)
        last_H = [None] * n_active
        last_M = [None] * n_active
        broken = {}
        for n in range(N):
            for b0, b1 in self._batches():
                c0, c1 = self.offsets[b0], self.offsets[b1]
                batch = [G[:, c0:c1] for G in self.fused]
                if self.counter is not None:
                    self.counter.add_mttkrp(T.size, c1 - c0)
                M = _fused_product(T, batch, n)
                for pos in range(b0, b1):
                    if pos in broken:
                        continue
                    k = self.active[pos]
                    lo, hi = self.offsets[pos] - c0, self.offsets[pos + 1] - c0
                    Mk = M[:, lo:hi]
                    H = hadamard_gramians(None, n, self.grams[pos])
                    try:
                        U = pinv_solve(Mk, H, self.rcond)
                    except (FloatingPointError, np.linalg.LinAlgError) as exc:
                        broken[pos] = str(exc)
                        continue
                    self.fused[n][:, self.offsets[pos]:self.offsets[pos + 1]] = U
                    if self.zero_rows is not None and n == self.zero_mode:
                        self._zero(pos, k)
                    self.grams[pos][n] = gramian(self._block(n, pos))
                    if self.counter is not None:
                        R = self.ranks[k]
                        self.counter.add_hadamard(N - 1, R)
                        self.counter.add_solve(T.dims[n], R)
                        self.counter.add_gramian(T.dims[n], R)
                    if n == N - 1:
                        last_H[pos] = H
                        last_M[pos] = Mk

        stopped = []
        for pos, k in enumerate(self.active):
            self.iterations[k] += 1
            if pos in broken:
                self._fail(k, broken[pos])
                stopped.append(pos)
                continue
            U_last = self._block(N - 1, pos)
            try:
                e = compute_error(self.norms_sq[k], last_H[pos], last_M[pos], U_last)
            except NumericalBreakdownError as exc:
                self._fail(k, str(exc))
                stopped.append(pos)
                continue
            if self.counter is not None:
                self.counter.add_error(T.dims[-1], self.ranks[k])
            self.errors[k].append(e)
            hit_limit = self.iterations[k] >= self.cfg.sweep_limit
            if self.cfg.force_iterations is None and has_converged(
                    self.prev[k], e, self.cfg.tolerance, self.norms_sq[k]):
                self.converged[k] = True
                stopped.append(pos)
            elif hit_limit:
                stopped.append(pos)
            self.prev[k] = e
        return stopped

    def _fail(self, k, message):
        if self.on_error == "raise":
            raise NumericalBreakdownError(message, model_index=k)
        logger.warning("model %d stopped: %s", k, message)
        self.failures[k] = message

    def compact(self, stopped):
        """Freeze the models at ``stopped`` positions and drop their columns."""
        if not stopped:
            return
        stopped = set(stopped)
        keep_cols = []
        for pos, k in enumerate(self.active):
            cols = np.arange(self.offsets[pos], self.offsets[pos + 1])
            if pos in stopped:
                self.final[k] = [self._block(n, pos).copy() for n in range(self.T.ndim)]
            else:
                keep_cols.append(cols)
        self.active = [k for pos, k in enumerate(self.active) if pos not in stopped]
        self.grams = [g for pos, g in enumerate(self.grams) if pos not in stopped]
        idx = np.concatenate(keep_cols) if keep_cols else np.zeros(0, dtype=np.intp)
        self.fused = [G[:, idx] for G in self.fused]
        self._reset_offsets()

    def run(self, callback=None):
        while self.active:
            stopped = self.sweep()
            if callback is not None:
                callback(self)
            self.compact(stopped)
        return self.results()

    def results(self):
        out = []
        for k in range(self.K):
            factors = self.final[k]
            if factors is None:
                pos = self.active.index(k)
                factors = [self._block(n, pos).copy() for n in range(self.T.ndim)]
            out.append(CpModel(factors, list(self.errors[k]), self.iterations[k],
                               self.converged[k]))
        return out


def cals_fit(T, models, cfg: FitConfig | None = None, counter: FlopCounter | None = None,
             rcond=DEFAULT_RCOND, max_columns=None, callback=None):
    """Fit every model in ``models`` to ``T`` in lock-step.

    Each returned model follows the same trajectory ``cp_als_fit`` would
    produce from the same start, up to floating-point reassociation.
    """
    state = CalsState(T, models, cfg or FitConfig(), counter=counter, rcond=rcond,
                      max_columns=max_columns)
    return state.run(callback)
