"""Numerical maximizer for ``sum_{x,k} w[x,k] log C[x,k]`` over row-stochastic tables.

Projected gradient ascent with a per-row Armijo backtracking step that
restarts from ``step`` each iteration. Entries are kept above ``floor`` so
the log stays finite; the resulting bias is at most ``n_classes * floor``
per row. Knows nothing about the closed-form optima it is used to check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def project_simplex(y: np.ndarray, total: float | np.ndarray = 1.0) -> np.ndarray:
    """Euclidean projection of each row of ``y`` onto ``{x >= 0, sum x = total}`` (sort-based)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n = y.shape[1]
    total = np.broadcast_to(np.asarray(total, dtype=np.float64), (y.shape[0],))[:, None]
    u = -np.sort(-y, axis=1)
    css = np.cumsum(u, axis=1) - total
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(y.shape[0]), rho] / (rho + 1)
    return np.maximum(y - theta[:, None], 0.0)


def _project_floored(y: np.ndarray, floor: float) -> np.ndarray:
    n = y.shape[1]
    return floor + project_simplex(y - floor, 1.0 - n * floor)


def _row_values(w: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.sum(w * np.log(c), axis=1)


@dataclass
class AscentResult:
    table: np.ndarray
    values: np.ndarray
    iterations: int


def maximize_log_table(weights: np.ndarray, steps: int = 10_000, step: float = 0.1,
                       floor: float = 1e-10, tol: float = 1e-15) -> AscentResult:
    """Maximize ``sum w log C`` row by row, starting from the uniform table.

    Each row is rescaled by its total weight first; the rows are independent,
    so this leaves every row's maximizer unchanged. Stops early once no row
    moves by more than ``tol``.
    """
    w = np.asarray(weights, dtype=np.float64)
    s = w.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("every row needs positive total weight")
    w = w / s
    n_rows, n = w.shape
    c = np.full((n_rows, n), 1.0 / n)
    f = _row_values(w, c)
    it = 0
    for it in range(1, steps + 1):
        g = w / c
        eta = np.full(n_rows, step)
        todo = np.ones(n_rows, dtype=bool)
        new_c = c.copy()
        new_f = f.copy()
        for _ in range(60):
            idx = np.flatnonzero(todo)
            if idx.size == 0:
                break
            cand = _project_floored(c[idx] + eta[idx, None] * g[idx], floor)
            fc = _row_values(w[idx], cand)
            ok = fc >= f[idx] + 1e-4 * np.sum(g[idx] * (cand - c[idx]), axis=1)
            new_c[idx[ok]] = cand[ok]
            new_f[idx[ok]] = fc[ok]
            todo[idx[ok]] = False
            eta[idx[~ok]] *= 0.5
        moved = np.max(np.abs(new_c - c))
        c, f = new_c, new_f
        if moved <= tol:
            break
    return AscentResult(c, f, it)
