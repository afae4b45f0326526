"""FLOP accounting.

MTTKRPs are counted as ``2 * R * prod(dims)``, ignoring the lower-order cost
of forming the Khatri-Rao product.  Everything else uses the usual dense
linear algebra counts.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field


@dataclass
class FlopCounter:
    mttkrp: int = 0
    other: int = 0
    mttkrp_calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def total(self):
        return self.mttkrp + self.other

    def add_mttkrp(self, tensor_size, rank):
        with self._lock:
            self.mttkrp += 2 * int(rank) * int(tensor_size)
            self.mttkrp_calls += 1

    def add_gramian(self, rows, rank):
        self._add(2 * int(rows) * int(rank) ** 2)

    def add_hadamard(self, n_terms, rank):
        self._add(max(int(n_terms) - 1, 0) * int(rank) ** 2)

    def add_solve(self, rows, rank):
        # symmetric eigendecomposition (~9 R^3) plus M V, scaling and (.) V^T
        r = int(rank)
        self._add(9 * r**3 + 4 * int(rows) * r**2 + int(rows) * r)

    def add_error(self, rows, rank):
        r = int(rank)
        self._add(2 * int(rows) * r**2 + 2 * r**2 + 2 * int(rows) * r + 3)

    def _add(self, flops):
        with self._lock:
            self.other += flops

    def merge(self, other):
        with self._lock:
            self.mttkrp += other.mttkrp
            self.other += other.other
            self.mttkrp_calls += other.mttkrp_calls
        return self


def mttkrp_flops(dims, rank):
    size = 1
    for d in dims:
        size *= int(d)
    return 2 * int(rank) * size
