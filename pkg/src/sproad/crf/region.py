"""The pixel set refined by the CRF engines and the stitching of results."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import imaging
from ..errors import DataError
from ..superpixel import Segmentation, from_lattice


@dataclass
class RefinementRegion:
    shape: tuple  # image (H, W)
    index: np.ndarray  # (N,) flat pixel indices, ascending (row-major)
    rows: np.ndarray
    cols: np.ndarray
    rgb: np.ndarray  # (N, 3) in [0, 1]
    rgb255: np.ndarray  # (N, 3) int
    sp: np.ndarray  # (N,) superpixel id
    init: np.ndarray  # (N,) initial binary class
    prob: np.ndarray  # (N,) CNN road probability
    prob_non: np.ndarray  # (N,) CNN probability of the strongest non-road class
    edges: np.ndarray  # (E, 2) region-internal 4-neighbor pairs, i < j
    ext: np.ndarray  # (N, 2) count of outside 4-neighbors per fixed class
    bbox: tuple  # (y0, y1, x0, x1), half-open

    @property
    def size(self) -> int:
        return int(self.index.size)

    def __len__(self) -> int:
        return self.size

    def neighbor_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """(indptr, indices) adjacency in CSR form."""
        n = self.size
        if self.edges.size == 0:
            return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        return np.cumsum(indptr), dst.astype(np.int64)


def per_id(values, seg: Segmentation) -> np.ndarray:
    """Accept per-id (K,) or lattice (rows, cols[, ...]) values; return per-id."""
    values = np.asarray(values)
    if values.shape[:2] == (seg.rows, seg.cols) and not (values.ndim == 1):
        return from_lattice(values, seg)
    if values.shape[0] != seg.n_ids:
        raise DataError(f"expected {seg.n_ids} superpixel values, got shape {values.shape}")
    return values


def binary_classes(sp_labels, seg: Segmentation) -> np.ndarray:
    """Per-id road (1) / non-road (0); unlabeled collapses to non-road."""
    return (per_id(sp_labels, seg) == imaging.ROAD).astype(np.int64)


def _class_probs(p: np.ndarray, seg: Segmentation) -> bool:
    """True for three-class softmax output, lattice (R, C, 3) or per-id (K, 3)."""
    return p.ndim == 3 or p.shape == (seg.n_ids, 3)


def road_probability(sp_probs, seg: Segmentation) -> np.ndarray:
    """Per-id road probability from softmax output or plain (R, C) / (K,) values."""
    p = np.asarray(sp_probs, dtype=np.float64)
    if _class_probs(p, seg):
        p = p[..., imaging.ROAD]
    return per_id(p, seg)


def non_road_probability(sp_probs, seg: Segmentation) -> np.ndarray:
    """Per-id probability of the best non-road class.

    Taking the max over non-road and unlabeled (rather than their sum)
    keeps the two-class argmax equal to the collapsed three-class argmax.
    """
    p = np.asarray(sp_probs, dtype=np.float64)
    if _class_probs(p, seg):
        return per_id(np.maximum(p[..., imaging.NON_ROAD], p[..., imaging.UNLABELED]), seg)
    return 1.0 - per_id(p, seg)


def boundary_superpixels(seg: Segmentation, binary: np.ndarray) -> np.ndarray:
    out = np.zeros(seg.n_ids, dtype=bool)
    for k, nbrs in enumerate(seg.adjacency):
        if nbrs and any(binary[j] != binary[k] for j in nbrs):
            out[k] = True
    return out


def extract_region(seg: Segmentation, sp_labels, image: np.ndarray, sp_probs=None) -> RefinementRegion:
    """All pixels of superpixels that touch a superpixel of the other class."""
    image = imaging.check_image(image)
    h, w = seg.sp_ids.shape
    if image.shape[:2] != (h, w):
        raise DataError("image and segmentation sizes differ")
    binary = binary_classes(sp_labels, seg)
    if sp_probs is not None:
        prob = road_probability(sp_probs, seg)
        prob_non = non_road_probability(sp_probs, seg)
    else:
        prob = binary.astype(np.float64)
        prob_non = 1.0 - prob
    boundary = boundary_superpixels(seg, binary)

    mask = boundary[seg.sp_ids]
    index = np.flatnonzero(mask.ravel())
    n = index.size
    rows, cols = np.divmod(index, w)
    sp = seg.sp_ids.ravel()[index].astype(np.int64)
    pixel_class = binary[seg.sp_ids]

    pos = np.full(h * w, -1, dtype=np.int64)
    pos[index] = np.arange(n)
    pos = pos.reshape(h, w)
    edges = []
    for a, b in ((pos[:, :-1], pos[:, 1:]), (pos[:-1, :], pos[1:, :])):
        both = (a >= 0) & (b >= 0)
        edges.append(np.stack([a[both], b[both]], axis=1))
    edges = np.concatenate(edges) if n else np.zeros((0, 2), dtype=np.int64)
    if edges.size:
        edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]

    ext = np.zeros((n, 2), dtype=np.int64)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = rows + dy, cols + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        sel = np.flatnonzero(inside)
        outside = ~mask[ny[sel], nx[sel]]
        sel = sel[outside]
        np.add.at(ext, (sel, pixel_class[ny[sel], nx[sel]]), 1)

    if n:
        bbox = (int(rows.min()), int(rows.max()) + 1, int(cols.min()), int(cols.max()) + 1)
    else:
        bbox = (0, 0, 0, 0)
    rgb255 = image.reshape(-1, 3)[index].astype(np.int64)
    return RefinementRegion(
        shape=(h, w),
        index=index,
        rows=rows,
        cols=cols,
        rgb=rgb255 / 255.0,
        rgb255=rgb255,
        sp=sp,
        init=binary[sp],
        prob=prob[sp],
        prob_non=prob_non[sp],
        edges=edges.astype(np.int64),
        ext=ext,
        bbox=bbox,
    )


def compose_result(seg: Segmentation, sp_labels, region: RefinementRegion | None = None, refined=None,
                   sp_probs=None, q_road=None) -> tuple[imaging.LabelMap, np.ndarray]:
    """Pixel mask and road-probability map.

    Outside the region pixels inherit their superpixel's binary class and
    road probability; inside they take the refined label and either the
    mean-field marginal ``q_road`` or the hard label.
    """
    binary = binary_classes(sp_labels, seg)
    labels = binary[seg.sp_ids].astype(np.uint8)
    if sp_probs is not None:
        prob = road_probability(sp_probs, seg)[seg.sp_ids].astype(np.float64)
    else:
        prob = labels.astype(np.float64)
    if region is not None and region.size:
        refined = np.asarray(refined)
        if refined.shape != (region.size,):
            raise DataError("refined labels do not match the region")
        labels.ravel()[region.index] = refined
        inner = q_road if q_road is not None else refined
        prob.ravel()[region.index] = np.asarray(inner, dtype=np.float64)
    prob = np.clip(prob, 0.0, 1.0)
    return imaging.LabelMap(labels, np.ones(labels.shape, dtype=bool)), prob
