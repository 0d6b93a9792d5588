"""Iterated conditional modes on the region's 4-connected pixel grid."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _energy(unary, indptr, nbr, ext, labels, beta):
    e = 0.0
    n = labels.shape[0]
    for i in range(n):
        li = labels[i]
        e += unary[i, li] + beta * ext[i, 1 - li]
        for p in range(indptr[i], indptr[i + 1]):
            j = nbr[p]
            if j > i and labels[j] != li:
                e += beta
    return e


@numba.njit(cache=True)
def _icm(unary, indptr, nbr, ext, labels, beta, tol, max_iters, energies):
    n = labels.shape[0]
    energies[0] = _energy(unary, indptr, nbr, ext, labels, beta)
    sweeps = 0
    while sweeps < max_iters:
        changed = 0
        for i in range(n):
            disagree0 = ext[i, 1]
            disagree1 = ext[i, 0]
            for p in range(indptr[i], indptr[i + 1]):
                if labels[nbr[p]] == 1:
                    disagree0 += 1
                else:
                    disagree1 += 1
            e0 = unary[i, 0] + beta * disagree0
            e1 = unary[i, 1] + beta * disagree1
            cur = labels[i]
            # move only on strict improvement so the energy strictly drops
            if cur == 0 and e1 < e0:
                labels[i] = 1
                changed += 1
            elif cur == 1 and e0 < e1:
                labels[i] = 0
                changed += 1
        sweeps += 1
        energies[sweeps] = _energy(unary, indptr, nbr, ext, labels, beta)
        if changed == 0 or energies[sweeps - 1] - energies[sweeps] < tol:
            break
    return sweeps


def icm_labels(unary: np.ndarray, indptr: np.ndarray, nbr: np.ndarray, init: np.ndarray, beta: float,
               ext: np.ndarray | None = None, tol: float = 0.0, max_iters: int = 20):
    """Greedy coordinate descent on a two-label Potts energy.

    ``unary`` (N, 2) already includes the data weight.  ``ext`` counts
    fixed outside neighbors per class.  Sweeps run in index order.
    Returns (labels, energies per sweep, sweeps run).
    """
    n = len(init)
    if ext is None:
        ext = np.zeros((n, 2), dtype=np.int64)
    labels = np.array(init, dtype=np.int64, copy=True)
    energies = np.zeros(max_iters + 1)
    if n == 0:
        return labels, energies[:1], 0
    sweeps = _icm(np.ascontiguousarray(unary, dtype=np.float64), indptr, nbr, np.ascontiguousarray(ext, dtype=np.int64),
                  labels, float(beta), float(tol), int(max_iters), energies)
    return labels, energies[: sweeps + 1], sweeps


def energy(unary, indptr, nbr, labels, beta, ext=None) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if ext is None:
        ext = np.zeros((len(labels), 2), dtype=np.int64)
    return float(_energy(np.ascontiguousarray(unary, dtype=np.float64), indptr, nbr,
                         np.ascontiguousarray(ext, dtype=np.int64), labels, float(beta)))
