"""Min-sum loopy belief propagation on a masked 4-connected grid."""

from __future__ import annotations

import numpy as np

# message directions: the grid offset from sender to receiver
RIGHT, LEFT, UP, DOWN = 0, 1, 2, 3
_OFFSETS = {RIGHT: (0, 1), LEFT: (0, -1), UP: (-1, 0), DOWN: (1, 0)}
_OPPOSITE = {RIGHT: LEFT, LEFT: RIGHT, UP: DOWN, DOWN: UP}
SCHEDULE = (RIGHT, LEFT, UP, DOWN)


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = a[y - dy, x - dx], zero where that falls outside."""
    out = np.zeros_like(a)
    h, w = a.shape[:2]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = a[ys_src, xs_src]
    return out


def incoming(msgs: np.ndarray, d: int) -> np.ndarray:
    """Messages arriving at each pixel that were sent in direction ``d``."""
    dy, dx = _OFFSETS[d]
    return _shift(msgs[d], dy, dx)


def beliefs(data: np.ndarray, msgs: np.ndarray) -> np.ndarray:
    """data cost plus every incoming message."""
    return data + sum(incoming(msgs, d) for d in SCHEDULE)


def min_sum(data: np.ndarray, mask: np.ndarray, beta: float, tol: float = 0.0, max_iters: int = 20):
    """Two-label min-sum BP with Potts smoothness ``beta``.

    ``data`` is (H, W, 2), ``mask`` selects the pixels taking part; edges
    join 4-neighbors that are both in the mask.  Each iteration updates all
    rightward messages at once, then leftward, upward and downward ones,
    each pass reading the latest messages.  Messages are shifted so their
    minimum is 0.

    Returns (labels (H, W), beliefs (H, W, 2), iterations).
    """
    data = np.asarray(data, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    # valid[d][y, x]: pixel and its neighbor in direction d are both in the mask
    valid = np.zeros((4, h, w), dtype=bool)
    for d, (dy, dx) in _OFFSETS.items():
        valid[d] = mask & _shift(mask, -dy, -dx)
    msgs = np.zeros((4, h, w, 2))
    it = 0
    for it in range(1, max_iters + 1):
        change = 0.0
        for d in SCHEDULE:
            dy, dx = _OFFSETS[d]
            # everything pixel i has heard, minus what its receiver told it
            total = beliefs(data, msgs)
            back = _shift(msgs[_OPPOSITE[d]], -dy, -dx)
            hcost = total - back
            new = np.empty_like(hcost)
            new[..., 0] = np.minimum(hcost[..., 0], hcost[..., 1] + beta)
            new[..., 1] = np.minimum(hcost[..., 1], hcost[..., 0] + beta)
            new -= new.min(axis=-1, keepdims=True)
            new[~valid[d]] = 0.0
            change = max(change, float(np.abs(new - msgs[d]).max()) if new.size else 0.0)
            msgs[d] = new
        if change < tol or change == 0.0:
            break
    b = beliefs(data, msgs)
    # argmin takes the first minimum: ties go to non-road
    labels = np.argmin(b, axis=-1)
    return labels, b, it
