"""Dense tensors, unfoldings, Khatri-Rao products and MTTKRP.

All tensors are stored in generalized column-major order (first index
fastest), so the mode-0 unfolding is a zero-copy reshape.  Modes and indices
are 0-based throughout.

Multi-matrix Khatri-Rao products always run in *descending* mode order,
``U[N-1] ⊙ ... ⊙ U[n+1] ⊙ U[n-1] ⊙ ... ⊙ U[0]``, which is the order that
matches the column index of :func:`unfold`.
"""
from __future__ import annotations

import threading
from functools import reduce

import numpy as np

from .flops import FlopCounter

__all__ = [
    "DenseTensor",
    "as_tensor",
    "unfold_index",
    "unfold",
    "khatri_rao",
    "mttkrp",
    "mttkrp_reference",
    "gramian",
    "hadamard_gramians",
    "pinv_solve",
    "frobenius_norm_sq",
    "slice_norms_sq",
    "remove_slice",
]

DEFAULT_RCOND = 1e-12


class DenseTensor:
    """Immutable N-mode dense tensor in column-major layout.

    The squared Frobenius norm, per-mode slice norms and materialized
    unfoldings are computed once on first use and cached.
    """

    def __init__(self, array):
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim < 1:
            raise ValueError("a tensor needs at least one mode")
        if arr.size == 0:
            raise ValueError(f"all dimensions must be positive, got {arr.shape}")
        arr = np.asfortranarray(arr)
        if arr is array:
            arr = arr.copy(order="F")
        arr.setflags(write=False)
        self._array = arr
        self._lock = threading.Lock()
        self._norm_sq = None
        self._slice_norms = {}
        self._unfoldings = {}

    @classmethod
    def from_flat(cls, dims, data):
        """Build a tensor from a flat column-major buffer."""
        dims = tuple(int(d) for d in dims)
        data = np.asarray(data, dtype=np.float64).ravel()
        if data.size != int(np.prod(dims)):
            raise ValueError(
                f"expected {int(np.prod(dims))} values for dims {dims}, got {data.size}"
            )
        return cls(data.reshape(dims, order="F"))

    @property
    def array(self):
        return self._array

    @property
    def dims(self):
        return self._array.shape

    @property
    def ndim(self):
        return self._array.ndim

    @property
    def size(self):
        return self._array.size

    @property
    def flat(self):
        """Column-major flat view of the data."""
        return self._array.ravel(order="F")

    @property
    def norm_sq(self):
        if self._norm_sq is None:
            with self._lock:
                if self._norm_sq is None:
                    flat = self.flat
                    self._norm_sq = float(flat @ flat)
        return self._norm_sq

    def slice_norms_sq(self, mode):
        mode = _check_mode(mode, self.ndim)
        cached = self._slice_norms.get(mode)
        if cached is None:
            with self._lock:
                cached = self._slice_norms.get(mode)
                if cached is None:
                    sq = np.square(self._array)
                    axes = tuple(i for i in range(self.ndim) if i != mode)
                    cached = sq.sum(axis=axes)
                    cached.setflags(write=False)
                    self._slice_norms[mode] = cached
        return cached

    def unfolding(self, mode):
        """Mode-``mode`` unfolding, materialized once and cached."""
        mode = _check_mode(mode, self.ndim)
        if mode == 0:
            return self._array.reshape(self.dims[0], -1, order="F")
        cached = self._unfoldings.get(mode)
        if cached is None:
            with self._lock:
                cached = self._unfoldings.get(mode)
                if cached is None:
                    cached = _unfold_array(self._array, mode)
                    cached.setflags(write=False)
                    self._unfoldings[mode] = cached
        return cached

    def __repr__(self):
        return f"DenseTensor(dims={self.dims})"


def as_tensor(T):
    return T if isinstance(T, DenseTensor) else DenseTensor(T)


def _check_mode(mode, ndim):
    mode = int(mode)
    if not 0 <= mode < ndim:
        raise ValueError(f"mode {mode} out of range for a {ndim}-mode tensor")
    return mode


def unfold_index(dims, n, index):
    """Map a tensor multi-index to ``(row, col)`` of the mode-``n`` unfolding.

    ``col = sum_{k != n} index[k] * prod_{m < k, m != n} dims[m]``.
    """
    dims = tuple(int(d) for d in dims)
    n = _check_mode(n, len(dims))
    if len(index) != len(dims):
        raise ValueError(f"index {tuple(index)} does not match dims {dims}")
    col = 0
    stride = 1
    for k, (i, d) in enumerate(zip(index, dims)):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of range for dims {dims}")
        if k == n:
            continue
        col += i * stride
        stride *= d
    return int(index[n]), col


def _unfold_array(arr, n):
    return np.reshape(np.moveaxis(arr, n, 0), (arr.shape[n], -1), order="F")


def unfold(T, n):
    """Mode-``n`` unfolding: an ``I_n x prod_{i != n} I_i`` matrix."""
    T = as_tensor(T)
    n = _check_mode(n, T.ndim)
    return T.unfolding(n)


def khatri_rao(*matrices):
    """Column-wise Kronecker product; the first matrix varies slowest."""
    if len(matrices) == 1 and not isinstance(matrices[0], np.ndarray):
        matrices = tuple(matrices[0])
    if not matrices:
        raise ValueError("khatri_rao needs at least one matrix")
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    for m in mats:
        if m.ndim != 2:
            raise ValueError("khatri_rao operands must be 2-D")
    ncols = mats[0].shape[1]
    if any(m.shape[1] != ncols for m in mats):
        raise ValueError(
            f"column counts differ: {[m.shape[1] for m in mats]}"
        )

    def kr2(a, b):
        return (a[:, None, :] * b[None, :, :]).reshape(-1, ncols)

    return reduce(kr2, mats)


def _check_factors(dims, factors, n=None):
    if len(factors) != len(dims):
        raise ValueError(f"expected {len(dims)} factor matrices, got {len(factors)}")
    R = factors[0].shape[1]
    for i, (U, d) in enumerate(zip(factors, dims)):
        if U.ndim != 2 or U.shape[1] != R:
            raise ValueError(f"factor {i} has shape {U.shape}, expected (*, {R})")
        if i != n and U.shape[0] != d:
            raise ValueError(f"factor {i} has {U.shape[0]} rows, tensor mode has {d}")
    return R


def _krp_except(factors, n):
    return khatri_rao(*[factors[i] for i in reversed(range(len(factors))) if i != n])


def mttkrp_reference(T, factors, n):
    """Explicit ``unfold(T, n) @ khatri_rao(descending factors except n)``."""
    T = as_tensor(T)
    n = _check_mode(n, T.ndim)
    factors = [np.asarray(U, dtype=np.float64) for U in factors]
    _check_factors(T.dims, factors, n)
    return _unfold_array(T.array, n) @ _krp_except(factors, n)


def mttkrp(T, factors, n, counter: FlopCounter | None = None):
    """Matricized tensor times Khatri-Rao product for mode ``n``.

    Mode-specialized: the tensor is viewed as ``(left, I_n, right)`` without
    copying, one GEMM is done against the left Khatri-Rao half and the
    right half is contracted afterwards.
    """
    T = as_tensor(T)
    n = _check_mode(n, T.ndim)
    factors = [np.asarray(U, dtype=np.float64) for U in factors]
    R = _check_factors(T.dims, factors, n)
    dims = T.dims
    if counter is not None:
        counter.add_mttkrp(T.size, R)
    if T.ndim == 1:
        return T.array[:, None] * np.ones((1, R))
    left = int(np.prod(dims[:n]))
    right = int(np.prod(dims[n + 1:]))
    In = dims[n]
    arr = T.array
    if n == 0:
        return arr.reshape(In, right, order="F") @ _krp_except(factors, 0)
    if n == T.ndim - 1:
        kl = khatri_rao(*factors[n - 1::-1])
        return arr.reshape(left, In, order="F").T @ kl
    kl = khatri_rao(*factors[n - 1::-1])
    kr = khatri_rao(*factors[:n:-1])
    # (left, In*right)^T @ kl -> (In*right, R), then contract the right half
    partial = arr.reshape(left, In * right, order="F").T @ kl
    partial = partial.reshape(In, right, R, order="F")
    return np.einsum("ikr,kr->ir", partial, kr)


def gramian(U):
    U = np.asarray(U, dtype=np.float64)
    G = U.T @ U
    return (G + G.T) / 2


def hadamard_gramians(factors, n, grams=None):
    """Elementwise product of ``U_i^T U_i`` over ``i != n``.

    Precomputed Gramians can be passed in ``grams`` to avoid recomputation.
    """
    if grams is None:
        grams = [gramian(U) for U in factors]
    R = grams[0].shape[0]
    if any(G.shape != (R, R) for G in grams):
        raise ValueError("factor matrices have inconsistent column counts")
    H = np.ones((R, R))
    for i, G in enumerate(grams):
        if i != n:
            H *= G
    return H


def pinv_solve(M, H, rcond=DEFAULT_RCOND):
    """Return ``M @ pinv(H)`` for a small symmetric PSD ``H``.

    Eigenvalues below ``rcond * max_eigenvalue`` are treated as zero.
    """
    M = np.asarray(M, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1] or M.shape[-1] != H.shape[0]:
        raise ValueError(f"incompatible shapes {M.shape} and {H.shape}")
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(H))):
        raise FloatingPointError("pinv_solve received non-finite input")
    w, V = np.linalg.eigh(H)
    wmax = w[-1] if w.size else 0.0
    keep = w > rcond * wmax if wmax > 0 else np.zeros_like(w, dtype=bool)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return ((M @ V) * inv) @ V.T


def frobenius_norm_sq(T):
    return as_tensor(T).norm_sq


def slice_norms_sq(T, mode):
    return as_tensor(T).slice_norms_sq(mode)


def remove_slice(T, mode, indices):
    """Drop the slices ``indices`` along ``mode``; kept slices stay in order."""
    T = as_tensor(T)
    mode = _check_mode(mode, T.ndim)
    indices = [int(i) for i in indices]
    if len(set(indices)) != len(indices):
        raise ValueError(f"duplicate slice indices {indices}")
    In = T.dims[mode]
    if any(not 0 <= i < In for i in indices):
        raise IndexError(f"slice index out of range 0..{In - 1}: {indices}")
    if len(indices) >= In:
        raise ValueError("removing every slice leaves an empty tensor")
    if not indices:
        return T
    keep = np.setdiff1d(np.arange(In), indices)
    return DenseTensor(np.take(T.array, keep, axis=mode))
