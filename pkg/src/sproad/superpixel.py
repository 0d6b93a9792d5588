"""SLIC superpixels with a fixed cluster count and a regular-lattice view.

Connectivity is repaired by merging stray fragments into the nearest
adjacent superpixel instead of SLIC's usual enforce-connectivity pass, so
the number of ids always equals ``rows * cols`` and id ``r * cols + c`` is
the cluster that grew from lattice node ``(r, c)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

from . import imaging
from .errors import ConsistencyError, DataError, FormatError


@dataclass(frozen=True)
class SlicParams:
    rows: int = 11
    cols: int = 36
    compactness: float = 35.0
    kmeans_iters: int = 10

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DataError("lattice rows/cols must be >= 1")
        if not self.compactness > 0:
            raise DataError("compactness must be > 0")
        if self.kmeans_iters < 1:
            raise DataError("kmeans_iters must be >= 1")

    @property
    def n_superpixels(self) -> int:
        return self.rows * self.cols


@dataclass
class Segmentation:
    sp_ids: np.ndarray  # (H, W) int32
    rows: int
    cols: int
    seed_ids: np.ndarray  # (rows, cols) id grown from each lattice node
    centroids: np.ndarray  # (K, 2) (row, col); NaN for empty ids
    pixel_lists: list = field(repr=False)  # K arrays of flat pixel indices
    adjacency: list = field(repr=False)  # K sets of ids
    empty_flags: np.ndarray  # (K,) bool

    @property
    def n_ids(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.sp_ids.shape

    @property
    def node_of(self) -> np.ndarray:
        return self.seed_ids


# ---------------------------------------------------------------------------
# seeds


def _gradient_at(lab: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Squared Lab differences of the horizontal plus vertical neighbors, edges clamped."""
    h, w = lab.shape[:2]
    dx = lab[ys, np.minimum(xs + 1, w - 1)] - lab[ys, np.maximum(xs - 1, 0)]
    dy = lab[np.minimum(ys + 1, h - 1), xs] - lab[np.maximum(ys - 1, 0), xs]
    return (dx**2).sum(-1) + (dy**2).sum(-1)


def seed_spacing(shape, params: SlicParams) -> tuple[float, float]:
    h, w = shape[:2]
    return h / params.rows, w / params.cols


def init_seeds(lab: np.ndarray, params: SlicParams) -> np.ndarray:
    """Grid seeds moved to the lowest-gradient pixel of their 3x3 neighborhood.

    Returns an int array (rows*cols, 2) of (row, col); row ``r*cols + c`` is
    the seed of lattice node (r, c).
    """
    h, w = lab.shape[:2]
    if h < params.rows or w < params.cols:
        raise DataError(f"image {w}x{h} is smaller than the {params.cols}x{params.rows} lattice")
    sy, sx = seed_spacing(lab.shape, params)
    y0 = np.minimum(np.floor((np.arange(params.rows) + 0.5) * sy).astype(np.int64), h - 1)
    x0 = np.minimum(np.floor((np.arange(params.cols) + 0.5) * sx).astype(np.int64), w - 1)
    cy, cx = (a.ravel() for a in np.meshgrid(y0, x0, indexing="ij"))
    # 3x3 neighborhood in raster order; positions outside the image never win
    offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    ny = np.stack([cy + dy for dy, _ in offsets], axis=1)
    nx = np.stack([cx + dx for _, dx in offsets], axis=1)
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    vals = np.where(inside, _gradient_at(lab, np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)), np.inf)
    # the center stays unless something is strictly lower; ties go to the first in raster order
    best = np.argmin(vals, axis=1)
    keep = vals[:, 4] <= vals[np.arange(len(best)), best]
    best[keep] = 4
    pick = np.arange(len(best))
    seeds = np.stack([ny[pick, best], nx[pick, best]], axis=1).astype(np.int64)
    return seeds


# ---------------------------------------------------------------------------
# k-means


@numba.njit(cache=True)
def _slic_kernel(lab, centers, sy, sx, m, iters):
    h, w = lab.shape[0], lab.shape[1]
    k = centers.shape[0]
    s = math.sqrt(sx * sy)
    wxy = (m / s) ** 2
    labels = np.empty((h, w), dtype=np.int32)
    dist = np.empty((h, w), dtype=np.float64)
    sums = np.zeros((k, 5), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for _ in range(iters):
        labels[:, :] = -1
        dist[:, :] = np.inf
        for c in range(k):
            cl, ca, cb, cy, cx = centers[c, 0], centers[c, 1], centers[c, 2], centers[c, 3], centers[c, 4]
            y0 = max(int(math.ceil(cy - sy)), 0)
            y1 = min(int(math.floor(cy + sy)), h - 1)
            x0 = max(int(math.ceil(cx - sx)), 0)
            x1 = min(int(math.floor(cx + sx)), w - 1)
            for y in range(y0, y1 + 1):
                dy = y - cy
                for x in range(x0, x1 + 1):
                    dl = lab[y, x, 0] - cl
                    da = lab[y, x, 1] - ca
                    db = lab[y, x, 2] - cb
                    dx = x - cx
                    d = dl * dl + da * da + db * db + wxy * (dy * dy + dx * dx)
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = c
        # pixels outside every window: global nearest center
        for y in range(h):
            for x in range(w):
                if labels[y, x] >= 0:
                    continue
                for c in range(k):
                    dl = lab[y, x, 0] - centers[c, 0]
                    da = lab[y, x, 1] - centers[c, 1]
                    db = lab[y, x, 2] - centers[c, 2]
                    dy = y - centers[c, 3]
                    dx = x - centers[c, 4]
                    d = dl * dl + da * da + db * db + wxy * (dy * dy + dx * dx)
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = c
        sums[:, :] = 0.0
        counts[:] = 0
        for y in range(h):
            for x in range(w):
                c = labels[y, x]
                sums[c, 0] += lab[y, x, 0]
                sums[c, 1] += lab[y, x, 1]
                sums[c, 2] += lab[y, x, 2]
                sums[c, 3] += y
                sums[c, 4] += x
                counts[c] += 1
        for c in range(k):
            if counts[c] > 0:
                for j in range(5):
                    centers[c, j] = sums[c, j] / counts[c]
    return labels


def initial_centers(lab: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    ys, xs = seeds[:, 0], seeds[:, 1]
    return np.column_stack([lab[ys, xs], ys.astype(np.float64), xs.astype(np.float64)])


def slic_assign_update(lab: np.ndarray, seeds: np.ndarray, params: SlicParams) -> np.ndarray:
    """Run the localized k-means and return the raw (H, W) id map."""
    lab = np.ascontiguousarray(lab, dtype=np.float64)
    centers = initial_centers(lab, seeds)
    sy, sx = seed_spacing(lab.shape, params)
    return _slic_kernel(lab, centers, float(sy), float(sx), float(params.compactness), int(params.kmeans_iters))


# ---------------------------------------------------------------------------
# connectivity repair


@numba.njit(cache=True)
def _label_components(labels):
    """4-connected components of equal-id pixels, numbered in raster order."""
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    stack = np.empty(h * w, dtype=np.int64)
    n = 0
    for y in range(h):
        for x in range(w):
            if comp[y, x] >= 0:
                continue
            k = labels[y, x]
            comp[y, x] = n
            top = 0
            stack[top] = y * w + x
            top += 1
            while top > 0:
                top -= 1
                p = stack[top]
                py, px = p // w, p % w
                if py > 0 and comp[py - 1, px] < 0 and labels[py - 1, px] == k:
                    comp[py - 1, px] = n
                    stack[top] = p - w
                    top += 1
                if py < h - 1 and comp[py + 1, px] < 0 and labels[py + 1, px] == k:
                    comp[py + 1, px] = n
                    stack[top] = p + w
                    top += 1
                if px > 0 and comp[py, px - 1] < 0 and labels[py, px - 1] == k:
                    comp[py, px - 1] = n
                    stack[top] = p - 1
                    top += 1
                if px < w - 1 and comp[py, px + 1] < 0 and labels[py, px + 1] == k:
                    comp[py, px + 1] = n
                    stack[top] = p + 1
                    top += 1
            n += 1
    return comp, n


def merge_components(raw: np.ndarray, n_ids: int) -> np.ndarray:
    """Keep each id's largest 4-connected piece; merge the rest into neighbors.

    Ids are visited in ascending order and their stray pieces by
    descending size (ties: smallest pixel index first); a piece joins the
    adjacent id whose kept piece has the nearest centroid (ties: smaller
    id).  Relabeling is immediate, so later ids see earlier merges.

    The work is done on the graph of raw connected components: a piece is
    a union-find group of components with one owner, and moving it to
    another id only changes ownership.  Groups never split, they only grow
    when a received piece touches the receiver.
    """
    labels = np.ascontiguousarray(raw, dtype=np.int32)
    w = labels.shape[1]
    comp, n_comp = _label_components(labels)
    flat = comp.ravel()
    ys, xs = np.divmod(np.arange(flat.size), w)
    gsize = np.bincount(flat, minlength=n_comp).astype(np.float64).tolist()
    gsy = np.bincount(flat, weights=ys, minlength=n_comp).tolist()
    gsx = np.bincount(flat, weights=xs, minlength=n_comp).tolist()
    # raster numbering: a component's number is the rank of its first pixel
    gfirst = list(range(n_comp))
    owner_arr = np.empty(n_comp, dtype=np.int64)
    owner_arr[flat] = labels.ravel()
    owner = owner_arr.tolist()

    neighbors = [[] for _ in range(n_comp)]
    for a, b in _border_pairs(comp, n_comp).tolist():
        neighbors[a].append(b)

    parent = list(range(n_comp))
    members = [[c] for c in range(n_comp)]
    roots_of = [set() for _ in range(n_ids)]
    for c, k in enumerate(owner):
        roots_of[k].add(c)

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    def rank(g):
        return (-gsize[g], gfirst[g])

    def union(a, b):
        if len(members[a]) < len(members[b]):
            a, b = b, a
        parent[b] = a
        members[a].extend(members[b])
        members[b] = []
        gsize[a] += gsize[b]
        gsy[a] += gsy[b]
        gsx[a] += gsx[b]
        gfirst[a] = min(gfirst[a], gfirst[b])
        return a

    kept_cache: dict[int, int] = {}

    def kept(j):
        g = kept_cache.get(j)
        if g is None:
            g = min(roots_of[j], key=rank)
            kept_cache[j] = g
        return g

    for k in range(n_ids):
        if len(roots_of[k]) <= 1:
            continue
        groups = sorted(roots_of[k], key=rank)
        kept_cache[k] = groups[0]
        for g in groups[1:]:
            cy, cx = gsy[g] / gsize[g], gsx[g] / gsize[g]
            cand = sorted({owner[d] for c in members[g] for d in neighbors[c]} - {k})
            best, best_d = -1, np.inf
            for j in cand:
                kg = kept(j)
                d = (cy - gsy[kg] / gsize[kg]) ** 2 + (cx - gsx[kg] / gsize[kg]) ** 2
                if d < best_d:
                    best, best_d = j, d
            if best < 0:
                raise ConsistencyError(f"fragment of id {k} has no neighbor")
            roots_of[k].discard(g)
            touching = set()
            for c in members[g]:
                owner[c] = best
                for d in neighbors[c]:
                    if owner[d] == best:
                        touching.add(find(d))
            touching.discard(g)
            root = g
            for t in touching:
                roots_of[best].discard(t)
                root = union(root, t)
            roots_of[best].add(root)
            prev = kept_cache.get(best)
            if prev is not None:
                if find(prev) == root or rank(root) < rank(prev):
                    kept_cache[best] = root
    return np.asarray(owner, dtype=np.int32)[comp]


# ---------------------------------------------------------------------------
# segmentation record


def _border_pairs(ids: np.ndarray, n: int) -> np.ndarray:
    """Sorted distinct (a, b) pairs, both orders, of 4-adjacent differing ids."""
    keys = []
    for a, b in ((ids[:, :-1], ids[:, 1:]), (ids[:-1, :], ids[1:, :])):
        diff = a != b
        a, b = a[diff].astype(np.int64), b[diff].astype(np.int64)
        keys += [a * n + b, b * n + a]
    keys = np.unique(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)
    return np.stack(np.divmod(keys, n), axis=1)


def adjacency_of(sp_ids: np.ndarray, n_ids: int) -> list[set]:
    adj = [set() for _ in range(n_ids)]
    for a, b in _border_pairs(sp_ids, n_ids).tolist():
        adj[a].add(b)
    return adj


def build_segmentation(sp_ids: np.ndarray, rows: int, cols: int, seed_ids=None) -> Segmentation:
    n = rows * cols
    sp_ids = np.ascontiguousarray(sp_ids, dtype=np.int32)
    flat = sp_ids.ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= n):
        raise ConsistencyError(f"superpixel ids outside [0, {n})")
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n)
    pixel_lists = np.split(order, np.cumsum(counts)[:-1])
    w = sp_ids.shape[1]
    ys, xs = np.divmod(np.arange(flat.size), w)
    with np.errstate(invalid="ignore", divide="ignore"):
        cy = np.bincount(flat, weights=ys, minlength=n) / counts
        cx = np.bincount(flat, weights=xs, minlength=n) / counts
    if seed_ids is None:
        seed_ids = np.arange(n, dtype=np.int64).reshape(rows, cols)
    return Segmentation(
        sp_ids=sp_ids,
        rows=rows,
        cols=cols,
        seed_ids=np.asarray(seed_ids, dtype=np.int64),
        centroids=np.column_stack([cy, cx]),
        pixel_lists=pixel_lists,
        adjacency=adjacency_of(sp_ids, n),
        empty_flags=counts == 0,
    )


def lattice_projection(seg: Segmentation) -> np.ndarray:
    """Validate and return the (rows, cols) node -> superpixel id map."""
    n = seg.rows * seg.cols
    node_of = np.asarray(seg.seed_ids)
    if node_of.shape != (seg.rows, seg.cols):
        raise ConsistencyError(f"node map has shape {node_of.shape}, expected {(seg.rows, seg.cols)}")
    if not np.array_equal(node_of.ravel(), np.arange(n)):
        raise ConsistencyError("lattice node ids are not r*cols + c")
    if seg.sp_ids.size and (seg.sp_ids.min() < 0 or seg.sp_ids.max() >= n):
        raise ConsistencyError(f"superpixel ids outside [0, {n})")
    if len(seg.pixel_lists) != n or len(seg.empty_flags) != n:
        raise ConsistencyError("per-superpixel tables do not cover every id")
    return node_of


def segment(image: np.ndarray, params: SlicParams = SlicParams(), lab: np.ndarray | None = None) -> Segmentation:
    """Full superpixel stage: seeds, k-means, merge, lattice bijection."""
    image = imaging.check_image(image)
    if lab is None:
        lab = imaging.rgb_to_lab(image)
    seeds = init_seeds(lab, params)
    raw = slic_assign_update(lab, seeds, params)
    merged = merge_components(raw, params.n_superpixels)
    seg = build_segmentation(merged, params.rows, params.cols)
    lattice_projection(seg)
    return seg


def sp_ground_truth(seg: Segmentation, label_map: imaging.LabelMap) -> np.ndarray:
    """Plurality class per superpixel id; ties resolve to 0, then 1, then 2."""
    if label_map.labels.shape != seg.sp_ids.shape:
        raise DataError(f"label map {label_map.labels.shape} does not match segmentation {seg.sp_ids.shape}")
    n = seg.n_ids
    counts = np.zeros((n, 3), dtype=np.int64)
    np.add.at(counts, (seg.sp_ids.ravel(), label_map.labels.ravel().astype(np.int64)), 1)
    out = np.argmax(counts, axis=1)
    out[counts.sum(axis=1) == 0] = imaging.UNLABELED
    return out


def to_lattice(values: np.ndarray, seg: Segmentation) -> np.ndarray:
    """Arrange per-id values on the (rows, cols) lattice."""
    return np.asarray(values)[seg.node_of]


def from_lattice(lattice: np.ndarray, seg: Segmentation) -> np.ndarray:
    """Inverse of :func:`to_lattice`: per-id values from a lattice array."""
    lattice = np.asarray(lattice)
    out = np.empty((seg.n_ids,) + lattice.shape[2:], dtype=lattice.dtype)
    out[seg.node_of.ravel()] = lattice.reshape((seg.n_ids,) + lattice.shape[2:])
    return out


# ---------------------------------------------------------------------------
# export


def save_segmentation(seg: Segmentation, pgm_path, json_path) -> None:
    if seg.n_ids > 65536:
        raise DataError("too many superpixels for a 16-bit id map")
    imaging.write_raster(seg.sp_ids.astype(np.uint16), pgm_path)
    meta = {
        "rows": seg.rows,
        "cols": seg.cols,
        "height": int(seg.sp_ids.shape[0]),
        "width": int(seg.sp_ids.shape[1]),
        "node_of": seg.seed_ids.tolist(),
        "centroids": [None if f else [float(a), float(b)] for (a, b), f in zip(seg.centroids, seg.empty_flags)],
        "adjacency": [sorted(a) for a in seg.adjacency],
        "empty_flags": [bool(f) for f in seg.empty_flags],
    }
    imaging._atomic_write(Path(json_path), json.dumps(meta).encode())


def load_segmentation(pgm_path, json_path) -> Segmentation:
    ids = imaging.read_raster(pgm_path)[..., 0]
    try:
        meta = json.loads(Path(json_path).read_text())
        rows, cols = int(meta["rows"]), int(meta["cols"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{json_path}: bad segmentation sidecar ({exc})") from exc
    if ids.shape != (meta["height"], meta["width"]):
        raise FormatError(f"{pgm_path}: id map size does not match sidecar")
    return build_segmentation(ids.astype(np.int32), rows, cols, np.asarray(meta["node_of"]))
