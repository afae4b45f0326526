"""Synthetic data, MTTKRP timing sweeps and run reports."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cp import init_random, reconstruct
from .flops import mttkrp_flops
from .tensor import DenseTensor, mttkrp


@dataclass
class SyntheticSpec:
    dims: tuple
    true_rank: int
    noise_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.noise_level < 0:
            raise ValueError(f"noise_level must be nonnegative, got {self.noise_level}")


def generate(spec: SyntheticSpec):
    """Random rank-``true_rank`` tensor plus scaled Gaussian noise.

    The noise is rescaled so that ``||noise|| = noise_level * ||T0||``.
    """
    truth = init_random(spec.dims, spec.true_rank, spec.seed)
    clean = reconstruct(truth).array
    if spec.noise_level == 0:
        return DenseTensor(clean), truth
    rng = np.random.default_rng([spec.seed, 1])
    noise = rng.standard_normal(clean.shape)
    scale = spec.noise_level * np.linalg.norm(clean) / np.linalg.norm(noise)
    return DenseTensor(clean + scale * noise), truth


def parse_ranks(text):
    """``"1,2,5"`` or ``"log:1:400:12"`` (12 log-spaced integers in [1, 400])."""
    if text.startswith("log:"):
        _, lo, hi, count = text.split(":")
        values = np.geomspace(float(lo), float(hi), int(count))
        return sorted({int(round(v)) for v in values})
    return [int(v) for v in text.split(",") if v.strip()]


def time_call(fn, repetitions):
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def bench_mttkrp(dims, ranks, repetitions=3, mode=0, tpp_gflops=None, seed=0):
    """Median MTTKRP time per rank; one row per rank."""
    rng = np.random.default_rng(seed)
    T = DenseTensor(rng.standard_normal(tuple(dims)))
    rows = []
    for R in ranks:
        factors = [rng.standard_normal((d, R)) for d in T.dims]
        mttkrp(T, factors, mode)  # warm-up
        median = statistics.median(time_call(lambda: mttkrp(T, factors, mode), repetitions))
        flops = mttkrp_flops(T.dims, R)
        rows.append({
            "rank": R,
            "repetitions": repetitions,
            "median_time": median,
            "flops": flops,
            "gflops_per_s": flops / median / 1e9,
            "efficiency": flops / median / (tpp_gflops * 1e9) if tpp_gflops else None,
        })
    return rows


def rows_to_csv(rows, fieldnames=None):
    buf = io.StringIO()
    fieldnames = fieldnames or list(rows[0])
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row.get(k) is None else row[k] for k in fieldnames})
    return buf.getvalue()


RUN_FIELDS = ["method", "dims", "ranks", "d", "threads", "wall_time_seconds",
              "mttkrp_flops", "total_flops", "efficiency", "tpp_gflops"]


@dataclass
class RunRecord:
    method: str
    dims: str
    ranks: str
    d: int
    threads: int
    wall_time_seconds: float
    mttkrp_flops: int
    total_flops: int
    efficiency: float | None = None
    tpp_gflops: float | None = None


@dataclass
class BenchReport:
    """Append-only list of run records backed by a CSV file."""

    records: list = field(default_factory=list)

    def append(self, record: RunRecord):
        self.records.append(record)

    def write(self, path):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RUN_FIELDS, lineterminator="\n")
            if new:
                writer.writeheader()
            for rec in self.records:
                row = asdict(rec)
                writer.writerow({k: "" if row[k] is None else row[k] for k in RUN_FIELDS})

    @classmethod
    def read(cls, *paths):
        report = cls()
        for path in paths:
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    report.append(RunRecord(
                        method=row["method"],
                        dims=row["dims"],
                        ranks=row["ranks"],
                        d=int(row["d"]),
                        threads=int(row["threads"]),
                        wall_time_seconds=float(row["wall_time_seconds"]),
                        mttkrp_flops=int(row["mttkrp_flops"]),
                        total_flops=int(row["total_flops"]),
                        efficiency=float(row["efficiency"]) if row.get("efficiency") else None,
                        tpp_gflops=float(row["tpp_gflops"]) if row.get("tpp_gflops") else None,
                    ))
        return report


def make_record(method, dims, ranks, d, threads, wall, counter, tpp_gflops=None):
    eff = counter.total / wall / (tpp_gflops * 1e9) if tpp_gflops else None
    return RunRecord(method, "x".join(map(str, dims)), "+".join(map(str, ranks)), d, threads,
                     wall, counter.mttkrp, counter.total, eff, tpp_gflops)


def comparison_rows(report: BenchReport, reference="reference_als"):
    """Wall time per (tensor, ranks, d, threads, method) with speedup vs ``reference``.

    Repeated runs of one configuration are averaged.  Speedup is ``None``
    when the group has no reference run.
    """
    groups = {}
    for rec in report.records:
        key = (rec.dims, rec.ranks, rec.d, rec.threads)
        groups.setdefault(key, {}).setdefault(rec.method, []).append(rec.wall_time_seconds)
    rows = []
    for (dims, ranks, d, threads), methods in groups.items():
        ref = methods.get(reference)
        ref_time = statistics.fmean(ref) if ref else None
        for method, times in methods.items():
            t = statistics.fmean(times)
            rows.append({
                "dims": dims, "ranks": ranks, "d": d, "threads": threads,
                "method": method, "wall_time_seconds": t,
                "speedup": ref_time / t if ref_time else None,
            })
    return rows


def format_table(rows):
    cols = list(rows[0])

    def cell(v):
        if v is None:
            return "absent"
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    table = [[cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(t[i]) for t in table)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(t, widths)) for t in table]
    return "\n".join(lines)
