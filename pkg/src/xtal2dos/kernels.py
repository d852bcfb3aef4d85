"""Segment (scatter/gather) kernels used by the graph layers.

Each kernel has a numba implementation and a pure-numpy twin with the same
signature. The numba path is used unless ``XTAL2DOS_NUMBA=0`` is set in the
environment or numba cannot be imported; ``set_backend`` switches at runtime
(the kernel benchmark uses it to time both).

All kernels take float64 2-D value arrays and int64 index arrays and
accumulate in input order; the two backends agree to floating-point rounding
(exp may differ in the last ulp).
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    return os.environ.get("XTAL2DOS_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


_backend = "numba" if (_HAVE_NUMBA and _env_wants_numba()) else "numpy"


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba is not importable; only the numpy backend is available")
    _backend = name


# ---------------------------------------------------------------- numpy path


def _scatter_add_rows_np(values, index, n):
    out = np.zeros((n, values.shape[1]), dtype=np.float64)
    np.add.at(out, index, values)
    return out


def _segment_max_np(values, index, n):
    out = np.full((n, values.shape[1]), -np.inf)
    np.maximum.at(out, index, values)
    return out


def _segment_softmax_np(logits, index, n):
    shift = _segment_max_np(logits, index, n)
    e = np.exp(logits - shift[index])
    denom = _scatter_add_rows_np(e, index, n)
    return e / denom[index]


def _segment_softmax_backward_np(y, g, index, n):
    dot = _scatter_add_rows_np(y * g, index, n)
    return y * (g - dot[index])


# ---------------------------------------------------------------- numba path

if _HAVE_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_nb(values, index, n):
        m, f = values.shape
        out = np.zeros((n, f))
        for e in range(m):
            row = index[e]
            for k in range(f):
                out[row, k] += values[e, k]
        return out

    @njit(cache=True)
    def _segment_max_nb(values, index, n):
        m, f = values.shape
        out = np.full((n, f), -np.inf)
        for e in range(m):
            row = index[e]
            for k in range(f):
                if values[e, k] > out[row, k]:
                    out[row, k] = values[e, k]
        return out

    @njit(cache=True)
    def _segment_softmax_nb(logits, index, n):
        m, f = logits.shape
        shift = _segment_max_nb(logits, index, n)
        e_vals = np.empty((m, f))
        for e in range(m):
            row = index[e]
            for k in range(f):
                e_vals[e, k] = np.exp(logits[e, k] - shift[row, k])
        denom = _scatter_add_rows_nb(e_vals, index, n)
        for e in range(m):
            row = index[e]
            for k in range(f):
                e_vals[e, k] = e_vals[e, k] / denom[row, k]
        return e_vals

    @njit(cache=True)
    def _segment_softmax_backward_nb(y, g, index, n):
        m, f = y.shape
        prod = np.empty((m, f))
        for e in range(m):
            for k in range(f):
                prod[e, k] = y[e, k] * g[e, k]
        dot = _scatter_add_rows_nb(prod, index, n)
        out = np.empty((m, f))
        for e in range(m):
            row = index[e]
            for k in range(f):
                out[e, k] = y[e, k] * (g[e, k] - dot[row, k])
        return out


# ---------------------------------------------------------------- dispatch


def _prep(values, index):
    return np.ascontiguousarray(values, dtype=np.float64), np.ascontiguousarray(index, dtype=np.int64)


def scatter_add_rows(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """out[index[e]] += values[e]; values is (m, f), result is (n, f)."""
    values, index = _prep(values, index)
    if _backend == "numba":
        return _scatter_add_rows_nb(values, index, n)
    return _scatter_add_rows_np(values, index, n)


def segment_max(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    values, index = _prep(values, index)
    if _backend == "numba":
        return _segment_max_nb(values, index, n)
    return _segment_max_np(values, index, n)


def segment_softmax(logits: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Softmax of each column taken over the rows that share a segment id."""
    logits, index = _prep(logits, index)
    if _backend == "numba":
        return _segment_softmax_nb(logits, index, n)
    return _segment_softmax_np(logits, index, n)


def segment_softmax_backward(y: np.ndarray, g: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    y, index = _prep(y, index)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if _backend == "numba":
        return _segment_softmax_backward_nb(y, g, index, n)
    return _segment_softmax_backward_np(y, g, index, n)
