"""Per-superpixel descriptors arranged on the lattice.

Channel layout of the 69-vector:

    0-2   mean R, G, B / 255
    3-5   mean H, S, V
    6-8   mean L / 100, (a + 128) / 255, (b + 128) / 255
    9     centroid row / (H - 1)
    10-68 normalized uniform-LBP histogram over interior pixels
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import imaging
from .errors import DataError, FormatError
from .superpixel import Segmentation

N_COLOR = 9
N_LBP = 59
N_FEATURES = N_COLOR + 1 + N_LBP
POSITION = N_COLOR
LBP_SLICE = slice(N_COLOR + 1, N_FEATURES)

# neighbor offsets (dy, dx), clockwise from the top-left; bit k <- offset k
_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


def transitions(code: int) -> int:
    """Number of 0/1 changes around the circular 8-bit pattern."""
    rotated = ((code >> 1) | ((code & 1) << 7)) & 0xFF
    return bin(code ^ rotated).count("1")


def uniform_table() -> np.ndarray:
    """Raw 8-bit code -> bin; uniform codes in ascending order, others 58."""
    table = np.full(256, N_LBP - 1, dtype=np.int64)
    uniform = [c for c in range(256) if transitions(c) <= 2]
    table[uniform] = np.arange(len(uniform))
    return table


UNIFORM_BINS = uniform_table()


def lbp_raw_codes(gray: np.ndarray) -> np.ndarray:
    """8-bit LBP codes of the interior pixels, shape (H - 2, W - 2)."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise DataError(f"LBP needs a 2-D image of at least 3x3, got {gray.shape}")
    h, w = gray.shape
    center = gray[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(_NEIGHBORS):
        nb = gray[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        codes |= (nb >= center).astype(np.int64) << bit
    return codes


def lbp_code_map(gray: np.ndarray) -> np.ndarray:
    """Uniform-LBP bin per pixel; -1 on the one-pixel border."""
    codes = lbp_raw_codes(gray)
    out = np.full(np.shape(gray), -1, dtype=np.int64)
    out[1:-1, 1:-1] = UNIFORM_BINS[codes]
    return out


def descriptor_table(image: np.ndarray, seg: Segmentation, lab: np.ndarray | None = None) -> np.ndarray:
    """(K, 69) descriptors indexed by superpixel id."""
    image = imaging.check_image(image)
    h, w = image.shape[:2]
    if seg.sp_ids.shape != (h, w):
        raise DataError(f"segmentation {seg.sp_ids.shape} does not match image {(h, w)}")
    if lab is None:
        lab = imaging.rgb_to_lab(image)
    n = seg.n_ids
    ids = seg.sp_ids.ravel()
    counts = np.bincount(ids, minlength=n).astype(np.float64)
    nonempty = counts > 0

    color = np.concatenate(
        [
            image.reshape(-1, 3) / 255.0,
            imaging.rgb_to_hsv(image).reshape(-1, 3),
            lab.reshape(-1, 3) * (1 / 100.0, 1 / 255.0, 1 / 255.0) + (0.0, 128 / 255.0, 128 / 255.0),
        ],
        axis=1,
    )
    table = np.zeros((n, N_FEATURES))
    for ch in range(N_COLOR):
        table[:, ch] = np.bincount(ids, weights=color[:, ch], minlength=n)
    table[nonempty, :N_COLOR] /= counts[nonempty, None]
    table[:, :N_COLOR] = np.clip(table[:, :N_COLOR], 0.0, 1.0)

    rows = np.bincount(ids, weights=np.repeat(np.arange(h, dtype=np.float64), w), minlength=n)
    denom = max(h - 1, 1)
    table[nonempty, POSITION] = rows[nonempty] / counts[nonempty] / denom

    bins = lbp_code_map(imaging.rgb_to_gray(image)).ravel()
    interior = bins >= 0
    hist = np.zeros((n, N_LBP))
    np.add.at(hist, (ids[interior], bins[interior]), 1.0)
    totals = hist.sum(axis=1)
    has = totals > 0
    hist[has] /= totals[has, None]
    table[:, LBP_SLICE] = hist
    table[~nonempty] = 0.0
    return table


def build_descriptor(image: np.ndarray, seg: Segmentation, lab: np.ndarray | None = None) -> np.ndarray:
    """(rows, cols, 69) descriptor lattice."""
    return descriptor_table(image, seg, lab)[seg.node_of]


MAGIC = b"SPFEAT1"


def save_lattice(lattice: np.ndarray, path) -> None:
    lattice = np.asarray(lattice)
    if lattice.ndim != 3:
        raise DataError(f"expected an (R, C, F) lattice, got {lattice.shape}")
    r, c, f = lattice.shape
    payload = MAGIC + struct.pack("<3I", r, c, f) + lattice.astype("<f4").tobytes()
    imaging._atomic_write(Path(path), payload)


def load_lattice(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    head = len(MAGIC) + 12
    if len(data) < head:
        raise FormatError(f"{path}: truncated header")
    r, c, f = struct.unpack("<3I", data[len(MAGIC) : head])
    body = data[head:]
    if len(body) != r * c * f * 4:
        raise FormatError(f"{path}: expected {r * c * f * 4} value bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(r, c, f).astype(np.float64)
