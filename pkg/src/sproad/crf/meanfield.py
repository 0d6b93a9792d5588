"""Dense two-label CRF with Gaussian edge potentials, solved by mean-field."""

from __future__ import annotations

import math

import numba
import numpy as np
from scipy import ndimage

PROB_FLOOR = 1e-12
EXACT_LIMIT = 40_000  # regions above this use a positional cutoff
CUTOFF_SIGMAS = 3.0


def unary_from_probs(p_road, p_non=None) -> np.ndarray:
    """(N, 2) energies -log p with p clamped to [1e-12, 1]."""
    p_road = np.asarray(p_road, dtype=np.float64)
    p_non = 1.0 - p_road if p_non is None else np.asarray(p_non, dtype=np.float64)
    p = np.clip(np.column_stack([p_non, p_road]), PROB_FLOOR, 1.0)
    return -np.log(p)


def normalize(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    q = np.exp(z)
    return q / q.sum(axis=1, keepdims=True)


def lookup_tables(extent: int, sigma_alpha: float, sigma_beta: float, sigma_gamma: float):
    """Per-axis factors of the two kernels.

    The Gaussians factor over coordinates, so k1 = hp[|dy|] hp[|dx|] hc[|dr|]
    hc[|dg|] hc[|db|] and k2 = hg[|dy|] hg[|dx|].
    """
    d = np.arange(max(int(extent), 1), dtype=np.float64)
    c = np.arange(256, dtype=np.float64)
    hp = np.exp(-(d**2) / (2.0 * sigma_alpha**2))
    hc = np.exp(-(c**2) / (2.0 * sigma_beta**2))
    hg = np.exp(-(d**2) / (2.0 * sigma_gamma**2))
    return hp, hc, hg


@numba.njit(cache=True, fastmath=True)
def _k1_row(i, j0, j1, y, x, r, g, b, q, hp, hc):
    """sum over j in [j0, j1) of k1(i, j) q_j."""
    yi, xi, ri, gi, bi = y[i], x[i], r[i], g[i], b[i]
    acc = 0.0
    for j in range(j0, j1):
        acc += hp[abs(y[j] - yi)] * hp[abs(x[j] - xi)] * hc[abs(r[j] - ri)] * hc[abs(g[j] - gi)] * hc[abs(b[j] - bi)] * q[j]
    return acc


@numba.njit(cache=True, fastmath=True)
def _k1_sums(y, x, r, g, b, q, hp, hc, w1, radius2, s):
    """s_i = w1 sum_{j != i} k1(i, j) q_j.

    Without a cutoff (radius2 < 0) every pair is summed.  Pixels must be
    sorted by row so that a row band is a contiguous index range.
    """
    n = y.shape[0]
    lo = 0
    hi = 0
    if radius2 < 0:
        for i in range(n):
            s[i] = w1 * (_k1_row(i, 0, i, y, x, r, g, b, q, hp, hc) + _k1_row(i, i + 1, n, y, x, r, g, b, q, hp, hc))
    else:
        reach = int(math.floor(math.sqrt(radius2)))
        for i in range(n):
            yi = y[i]
            xi = x[i]
            while y[lo] < yi - reach:
                lo += 1
            while hi < n and y[hi] <= yi + reach:
                hi += 1
            acc = 0.0
            for j in range(lo, hi):
                dy = abs(y[j] - yi)
                dx = abs(x[j] - xi)
                if j == i or dy * dy + dx * dx > radius2:
                    continue
                acc += hp[dy] * hp[dx] * hc[abs(r[j] - r[i])] * hc[abs(g[j] - g[i])] * hc[abs(b[j] - b[i])] * q[j]
            s[i] = w1 * acc


def _k2_sums(y, x, q, hg, shape_origin):
    """sum_{j != i} k2(i, j) q_j as a separable correlation over the bounding box.

    k2 factors over rows and columns, so two 1-D passes over a zero-filled
    grid give every pair; the self term hg[0]^2 q_i is removed afterwards.
    """
    (y0, x0), (h, w) = shape_origin
    flat = (y - y0).astype(np.int64) * w + (x - x0)
    grid = np.bincount(flat, weights=q, minlength=h * w).reshape(h, w)
    taps = np.concatenate([hg[:0:-1], hg])
    out = ndimage.correlate1d(grid, taps, axis=0, mode="constant", cval=0.0)
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant", cval=0.0)
    return out[y - y0, x - x0] - hg[0] * hg[0] * q


def cutoff_radius(n: int, sigma_alpha: float) -> float | None:
    """Positional cutoff of the bilateral kernel for large regions, None when exact."""
    if n <= EXACT_LIMIT:
        return None
    return CUTOFF_SIGMAS * sigma_alpha


def mean_field(unary: np.ndarray, rows, cols, rgb255, w1: float = 0.1, w2: float = 3.0,
               sigma_alpha: float = 60.0, sigma_beta: float = 10.0, sigma_gamma: float = 1.0,
               iters: int = 20, radius: float | None = None, history: list | None = None):
    """Run synchronous mean-field updates.

    ``rows``/``cols`` are pixel positions (sorted by row), ``rgb255``
    integer colors.  Returns (labels, Q) with Q of shape (N, 2).  When
    ``history`` is a list, Q after every iteration is appended to it.
    """
    unary = np.asarray(unary, dtype=np.float64)
    n = unary.shape[0]
    q = normalize(-unary)
    if history is not None:
        history.append(q.copy())
    if n == 0:
        return np.zeros(0, dtype=np.int64), q
    y = np.ascontiguousarray(rows, dtype=np.int32)
    x = np.ascontiguousarray(cols, dtype=np.int32)
    if np.any(np.diff(y) < 0):
        raise ValueError("pixels must be sorted by row")
    rgb = np.asarray(rgb255, dtype=np.int32)
    r, g, b = (np.ascontiguousarray(rgb[:, c]) for c in range(3))
    extent = int(max(y.max() - y.min(), x.max() - x.min())) + 1
    hp, hc, hg = lookup_tables(extent, sigma_alpha, sigma_beta, sigma_gamma)
    # k2 factors below the smallest double are exactly zero; trim the table
    hg = hg[: max(int(np.count_nonzero(hg)), 1)]
    radius2 = -1.0 if radius is None else float(radius) ** 2
    box = ((int(y.min()), int(x.min())), (int(y.max() - y.min()) + 1, int(x.max() - x.min()) + 1))

    def pair_sums(v):
        out = np.zeros(n)
        if w1 != 0.0:
            _k1_sums(y, x, r, g, b, v, hp, hc, float(w1), radius2, out)
        if w2 != 0.0:
            out += w2 * _k2_sums(y, x, v, hg, box)
        return out

    coupled = w1 != 0.0 or w2 != 0.0
    # total kernel mass per pixel, fixed across iterations
    t = pair_sums(np.ones(n)) if coupled else None
    for _ in range(iters):
        if coupled:
            s = pair_sums(np.ascontiguousarray(q[:, 1]))
            # Potts: label l pays for neighbor mass on the other label
            penalty = np.column_stack([s, t - s])
            q = normalize(-unary - penalty)
        if history is not None:
            history.append(q.copy())
    # argmax returns the first maximum: ties go to non-road
    return np.argmax(q, axis=1), q


def dense_kernel(rows, cols, rgb255, w1, w2, sigma_alpha, sigma_beta, sigma_gamma) -> np.ndarray:
    """Full (N, N) kernel matrix with zero diagonal; reference for small regions."""
    p = np.column_stack([rows, cols]).astype(np.float64)
    c = np.asarray(rgb255, dtype=np.float64)
    dp = ((p[:, None] - p[None]) ** 2).sum(-1)
    dc = ((c[:, None] - c[None]) ** 2).sum(-1)
    k = w1 * np.exp(-dp / (2 * sigma_alpha**2) - dc / (2 * sigma_beta**2)) + w2 * np.exp(-dp / (2 * sigma_gamma**2))
    np.fill_diagonal(k, 0.0)
    return k
