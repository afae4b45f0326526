"""File formats for tensors, matrices, CP models and jackknife results.

Tensor text format::

    N I_1 ... I_N
    <values, whitespace separated, column-major>

Tensor binary format: magic ``DTNSR001``, little-endian u64 ``N``, u64 dims,
then f64 payload in column-major order.  Matrices use the same layout with
magic ``DMATR001`` and u64 ``rows``, ``cols``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cp import CpModel
from .tensor import DenseTensor, as_tensor

TENSOR_MAGIC = b"DTNSR001"
MATRIX_MAGIC = b"DMATR001"
BINARY_SUFFIXES = {".bin", ".dtnsr"}


class FormatError(ValueError):
    pass


def write_tensor(path, T, binary=None):
    """Write ``T``; binary unless the suffix says otherwise (``.txt``)."""
    path = Path(path)
    T = as_tensor(T)
    if binary is None:
        binary = path.suffix in BINARY_SUFFIXES
    if binary:
        header = TENSOR_MAGIC + struct.pack(f"<Q{T.ndim}Q", T.ndim, *T.dims)
        path.write_bytes(header + T.flat.astype("<f8").tobytes())
        return
    with open(path, "w") as fh:
        fh.write(" ".join(str(v) for v in (T.ndim, *T.dims)) + "\n")
        for v in T.flat:
            fh.write(f"{v:.17g}\n")


def read_tensor(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(TENSOR_MAGIC))
    if head == TENSOR_MAGIC:
        return _read_tensor_binary(path)
    return _read_tensor_text(path)


def _read_tensor_binary(path):
    raw = path.read_bytes()
    off = len(TENSOR_MAGIC)
    try:
        (ndim,) = struct.unpack_from("<Q", raw, off)
        dims = struct.unpack_from(f"<{ndim}Q", raw, off + 8)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header") from exc
    off += 8 * (ndim + 1)
    data = np.frombuffer(raw, dtype="<f8", offset=off)
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return DenseTensor.from_flat(dims, data.astype(np.float64))


def _read_tensor_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        try:
            ndim = int(header[0])
            dims = tuple(int(x) for x in header[1:])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}: bad header {header!r}") from exc
        if len(dims) != ndim or any(d < 1 for d in dims):
            raise FormatError(f"{path}: header declares {ndim} modes but lists {dims}")
        try:
            data = np.array(fh.read().split(), dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: non-numeric value") from exc
    if data.size != int(np.prod(dims)):
        raise FormatError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return DenseTensor.from_flat(dims, data)


def write_matrix(path, M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("write_matrix expects a 2-D array")
    header = MATRIX_MAGIC + struct.pack("<QQ", *M.shape)
    Path(path).write_bytes(header + M.ravel(order="F").astype("<f8").tobytes())


def read_matrix(path):
    raw = Path(path).read_bytes()
    if raw[:len(MATRIX_MAGIC)] != MATRIX_MAGIC:
        raise FormatError(f"{path}: not a matrix file")
    rows, cols = struct.unpack_from("<QQ", raw, len(MATRIX_MAGIC))
    data = np.frombuffer(raw, dtype="<f8", offset=len(MATRIX_MAGIC) + 16)
    if data.size != rows * cols:
        raise FormatError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape((rows, cols), order="F").astype(np.float64)


def save_model(directory, model):
    """Write ``factor_<n>.bin`` per mode plus a ``model.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for n, U in enumerate(model.factors):
        write_matrix(directory / f"factor_{n}.bin", U)
    meta = {
        "dims": list(model.dims),
        "rank": model.rank,
        "errors": [float(e) for e in model.errors],
        "iterations": model.iterations,
        "converged": model.converged,
    }
    (directory / "model.json").write_text(json.dumps(meta, indent=2))


def load_model(directory):
    directory = Path(directory)
    try:
        meta = json.loads((directory / "model.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{directory}: no model.json") from exc
    factors = [read_matrix(directory / f"factor_{n}.bin") for n in range(len(meta["dims"]))]
    model = CpModel(factors, meta.get("errors", []), meta.get("iterations", 0),
                    meta.get("converged", False))
    if list(model.dims) != list(meta["dims"]) or model.rank != meta["rank"]:
        raise FormatError(f"{directory}: factors disagree with model.json")
    return model


def save_bundle(directory, subs, unc, cfg, extra=None):
    """Write a jackknife results bundle.

    Layout: ``manifest.json``, ``std_<n>.bin`` for every non-sampled mode and
    one model directory per submodel under ``submodels/``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for p, (group, model) in enumerate(zip(subs.groups, subs.submodels)):
        rec = {"group": [int(i) for i in group]}
        if model is None:
            rec.update(failed=True, error=subs.failures.get(p))
        else:
            rec.update(
                iterations=model.iterations,
                final_error=float(model.errors[-1]) if model.errors else None,
                converged=model.converged,
            )
            save_model(directory / "submodels" / f"{p:04d}", model)
        records.append(rec)
    manifest = {
        "sampled_mode": cfg.sampled_mode,
        "d": cfg.d,
        "method": cfg.method,
        "alignment": cfg.alignment,
        "fit": {
            "tolerance": cfg.fit.tolerance,
            "max_iterations": cfg.fit.max_iterations,
            "force_iterations": cfg.fit.force_iterations,
        },
        "std_convention": unc.convention,
        "std_modes": sorted(unc.stddev),
        "n_submodels": unc.n_submodels,
        "submodels": records,
        "alignment_diagnostics": unc.alignment,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for n, S in unc.stddev.items():
        write_matrix(directory / f"std_{n}.bin", S)


def load_bundle(directory):
    """Return ``(manifest, stddev, submodels)`` from a results bundle."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    stddev = {n: read_matrix(directory / f"std_{n}.bin") for n in manifest["std_modes"]}
    submodels = []
    for p, rec in enumerate(manifest["submodels"]):
        submodels.append(None if rec.get("failed") else
                         load_model(directory / "submodels" / f"{p:04d}"))
    return manifest, stddev, submodels
