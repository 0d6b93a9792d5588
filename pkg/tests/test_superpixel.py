import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from sproad import imaging, superpixel
from sproad.errors import ConsistencyError, DataError
from sproad.superpixel import SlicParams


def _is_connected(mask):
    _, n = ndimage.label(mask)
    return n <= 1


def assert_connected(sp_ids):
    for k in np.unique(sp_ids):
        assert _is_connected(sp_ids == k), f"id {k} is split"


def test_seeds_uniform_image():
    lab = np.zeros((20, 20, 3))
    seeds = superpixel.init_seeds(lab, SlicParams(rows=2, cols=2))
    assert seeds.tolist() == [[5, 5], [5, 15], [15, 5], [15, 15]]


def test_seed_count_kitti_size():
    lab = imaging.rgb_to_lab(np.random.default_rng(0).integers(0, 256, (375, 1242, 3), dtype=np.uint8))
    seeds = superpixel.init_seeds(lab, SlicParams(rows=11, cols=36))
    assert len(seeds) == 396
    assert (seeds[:, 0] >= 0).all() and (seeds[:, 0] < 375).all()
    assert (seeds[:, 1] >= 0).all() and (seeds[:, 1] < 1242).all()


def test_seed_moves_to_lowest_gradient_and_stays_in_bounds():
    # a 3x3 image with one lattice node: the seed may only move inside the image
    lab = np.zeros((3, 3, 3))
    lab[0, 0, 0] = 50.0
    seeds = superpixel.init_seeds(lab, SlicParams(rows=1, cols=1))
    y, x = seeds[0]
    assert 0 <= y < 3 and 0 <= x < 3
    grad = full_gradient(lab)
    assert grad[y, x] == grad.min()


def full_gradient(lab):
    h, w = lab.shape[:2]
    grad = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            dx = lab[y, min(x + 1, w - 1)] - lab[y, max(x - 1, 0)]
            dy = lab[min(y + 1, h - 1), x] - lab[max(y - 1, 0), x]
            grad[y, x] = (dx**2).sum() + (dy**2).sum()
    return grad


def seed_oracle(lab, params):
    h, w = lab.shape[:2]
    grad = full_gradient(lab)
    out = []
    for r in range(params.rows):
        for c in range(params.cols):
            y0 = min(math.floor((r + 0.5) * h / params.rows), h - 1)
            x0 = min(math.floor((c + 0.5) * w / params.cols), w - 1)
            best = (grad[y0, x0], y0, x0)
            for y in range(y0 - 1, y0 + 2):
                for x in range(x0 - 1, x0 + 2):
                    if 0 <= y < h and 0 <= x < w and grad[y, x] < best[0]:
                        best = (grad[y, x], y, x)
            out.append(best[1:])
    return out


@pytest.mark.parametrize("shape,rows,cols", [((9, 13), 3, 4), ((20, 20), 5, 5), ((7, 30), 7, 10)])
def test_seeds_match_loop_oracle(shape, rows, cols):
    rng = np.random.default_rng(sum(shape))
    lab = rng.integers(0, 3, shape + (3,)).astype(float)  # few levels, many gradient ties
    params = SlicParams(rows=rows, cols=cols)
    assert superpixel.init_seeds(lab, params).tolist() == [list(p) for p in seed_oracle(lab, params)]


def test_image_smaller_than_lattice():
    with pytest.raises(DataError):
        superpixel.init_seeds(np.zeros((3, 3, 3)), SlicParams(rows=4, cols=4))


def voronoi(h, w, rows, cols):
    """Nearest grid seed per pixel, ties to the smaller id."""
    seeds = [(math.floor((r + 0.5) * h / rows), math.floor((c + 0.5) * w / cols))
             for r in range(rows) for c in range(cols)]
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.stack([(yy - y) ** 2 + (xx - x) ** 2 for y, x in seeds])
    return np.argmin(d, axis=0)


@pytest.mark.parametrize("m", [1.0, 35.0, 200.0])
def test_constant_image_gives_voronoi_blocks(m):
    img = np.full((60, 60, 3), 90, dtype=np.uint8)
    seg = superpixel.segment(img, SlicParams(rows=3, cols=3, compactness=m))
    assert np.array_equal(seg.sp_ids, voronoi(60, 60, 3, 3))
    # seeds at 10, 30, 50: the equidistant columns 20 and 40 go to the smaller id
    assert np.bincount(seg.sp_ids[0]).tolist() == [21, 20, 19]
    assert np.bincount(seg.sp_ids[:, 0]).tolist() == [21, 0, 0, 20, 0, 0, 19]


def brute_force_assign(lab, seeds, params):
    """One assignment step by exhaustive search over every (pixel, cluster) pair."""
    h, w = lab.shape[:2]
    sy, sx = h / params.rows, w / params.cols
    s = math.sqrt(sx * sy)
    centers = [(lab[y, x], float(y), float(x)) for y, x in seeds]
    out = np.full((h, w), -1)
    for y in range(h):
        for x in range(w):
            best, best_d, fallback, fallback_d = -1, math.inf, -1, math.inf
            for k, (c, cy, cx) in enumerate(centers):
                d = float(((lab[y, x] - c) ** 2).sum()) + (params.compactness / s) ** 2 * ((y - cy) ** 2 + (x - cx) ** 2)
                if d < fallback_d:
                    fallback, fallback_d = k, d
                if abs(y - cy) <= sy and abs(x - cx) <= sx and d < best_d:
                    best, best_d = k, d
            out[y, x] = best if best >= 0 else fallback
    return out


def test_half_black_white_matches_brute_force():
    img = np.zeros((12, 12, 3), dtype=np.uint8)
    img[:, 6:] = 255
    lab = imaging.rgb_to_lab(img)
    params = SlicParams(rows=2, cols=2, compactness=35, kmeans_iters=1)
    seeds = superpixel.init_seeds(lab, params)
    raw = superpixel.slic_assign_update(lab, seeds, params)
    assert np.array_equal(raw, brute_force_assign(lab, seeds, params))


def test_random_image_one_round_matches_brute_force(rng):
    img = rng.integers(0, 256, (15, 17, 3), dtype=np.uint8)
    lab = imaging.rgb_to_lab(img)
    params = SlicParams(rows=3, cols=4, compactness=10, kmeans_iters=1)
    seeds = superpixel.init_seeds(lab, params)
    raw = superpixel.slic_assign_update(lab, seeds, params)
    assert np.array_equal(raw, brute_force_assign(lab, seeds, params))


def _components(mask):
    """4-connected components of a boolean mask as lists of flat indices (flood fill)."""
    h, w = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for start in np.flatnonzero(mask):
        if seen.flat[start]:
            continue
        stack, comp = [start], []
        seen.flat[start] = True
        while stack:
            p = stack.pop()
            comp.append(p)
            y, x = divmod(p, w)
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append(ny * w + nx)
        comps.append(sorted(comp))
    return comps


def _ranked(comps):
    return sorted(comps, key=lambda c: (-len(c), c[0]))


def _centroid(comp, w):
    ys, xs = np.divmod(np.asarray(comp), w)
    n = len(comp)
    return ys.sum() / n, xs.sum() / n


def merge_oracle(raw, n_ids):
    lab = np.array(raw, dtype=np.int64)
    h, w = lab.shape
    for k in range(n_ids):
        comps = _ranked(_components(lab == k))
        for comp in comps[1:]:
            cy, cx = _centroid(comp, w)
            nbrs = set()
            for p in comp:
                y, x = divmod(p, w)
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and lab[ny, nx] != k:
                        nbrs.add(int(lab[ny, nx]))
            best, best_d = None, math.inf
            for j in sorted(nbrs):
                ky, kx = _centroid(_ranked(_components(lab == j))[0], w)
                d = (cy - ky) ** 2 + (cx - kx) ** 2
                if d < best_d:
                    best, best_d = j, d
            lab.flat[comp] = best
    return lab


def test_merge_crafted_sizes():
    # id 5 in two pieces of 12 and 3 pixels, the small one bordering ids 4 and 9
    raw = np.full((10, 10), 0, dtype=np.int32)
    raw[0:3, 0:4] = 5
    raw[5:10, 5:10] = 9
    raw[5:10, 0:5] = 4
    raw[4, 4:7] = 5
    small = raw == 5
    comps = _ranked(_components(small))
    assert [len(c) for c in comps] == [12, 3]
    nbrs = {int(raw.flat[q]) for p in comps[1] for q in (p - 10, p + 10, p - 1, p + 1)
            if 0 <= q < 100 and raw.flat[q] != 5}
    assert {4, 9} <= nbrs
    merged = superpixel.merge_components(raw, 10)
    assert np.array_equal(merged, merge_oracle(raw, 10))
    cy, cx = _centroid(comps[1], 10)
    d = {j: (cy - _centroid(_ranked(_components(raw == j))[0], 10)[0]) ** 2
         + (cx - _centroid(_ranked(_components(raw == j))[0], 10)[1]) ** 2 for j in nbrs}
    assert int(merged[4, 5]) == min(sorted(d), key=d.get)


def test_merge_fixed_point():
    raw = (np.arange(8)[:, None] // 4) * 2 + np.arange(8)[None, :] // 4
    assert np.array_equal(superpixel.merge_components(raw, 4), raw)


@settings(max_examples=60, deadline=None)
@given(raw=arrays(np.int32, st.tuples(st.integers(2, 9), st.integers(2, 9)), elements=st.integers(0, 4)))
def test_merge_matches_oracle(raw):
    merged = superpixel.merge_components(raw, 5)
    assert np.array_equal(merged, merge_oracle(raw, 5))
    assert_connected(merged)


def test_partition_connectivity_determinism(rng):
    img = rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
    params = SlicParams(rows=4, cols=5, compactness=10)
    seg = superpixel.segment(img, params)
    assert_connected(seg.sp_ids)
    flat = np.concatenate(seg.pixel_lists)
    assert flat.size == 48 * 64 and np.unique(flat).size == flat.size
    assert seg.sp_ids.min() >= 0 and seg.sp_ids.max() < 20
    for k in range(20):
        assert seg.empty_flags[k] == (len(seg.pixel_lists[k]) == 0)
    for k, nbrs in enumerate(seg.adjacency):
        assert k not in nbrs
        assert all(k in seg.adjacency[j] for j in nbrs)
    again = superpixel.segment(img, params)
    assert np.array_equal(seg.sp_ids, again.sp_ids)


def test_lattice_projection():
    img = np.random.default_rng(0).integers(0, 256, (375, 1242, 3), dtype=np.uint8)
    seg = superpixel.segment(img, SlicParams(rows=11, cols=36, kmeans_iters=2))
    node_of = superpixel.lattice_projection(seg)
    assert node_of[0, 0] == 0 and node_of[10, 35] == 395
    values = np.arange(396) * 3
    assert np.array_equal(superpixel.from_lattice(superpixel.to_lattice(values, seg), seg), values)


def test_single_node_lattice():
    seg = superpixel.segment(np.zeros((5, 5, 3), dtype=np.uint8), SlicParams(rows=1, cols=1))
    assert superpixel.lattice_projection(seg).tolist() == [[0]]
    assert (seg.sp_ids == 0).all()


def test_permuted_node_map_is_inconsistent():
    seg = superpixel.build_segmentation(np.array([[0, 1], [2, 3]]), 2, 2, seed_ids=np.array([[1, 0], [2, 3]]))
    with pytest.raises(ConsistencyError):
        superpixel.lattice_projection(seg)


def test_ids_out_of_range():
    with pytest.raises(ConsistencyError):
        superpixel.build_segmentation(np.array([[0, 7]]), 1, 2)


def test_sp_ground_truth_rules():
    ids = np.zeros((4, 20), dtype=np.int32)
    ids[2:, :] = 1  # id 1: 40 pixels, id 2 empty
    seg = superpixel.build_segmentation(ids, 1, 3)
    labels = np.zeros((4, 20), dtype=np.uint8)
    labels[0, :10] = imaging.ROAD  # id 0: 10 road / 30 non-road -> non-road
    labels[2:, :] = imaging.ROAD
    labels[3, :10] = imaging.NON_ROAD  # id 1: 30 road / 10 non-road -> road
    gt = superpixel.sp_ground_truth(seg, imaging.LabelMap.from_labels(labels))
    assert gt.tolist() == [imaging.NON_ROAD, imaging.ROAD, imaging.UNLABELED]

    tie = np.zeros((4, 20), dtype=np.uint8)
    tie[2:, :10] = imaging.ROAD
    tie[2:, 10:] = imaging.NON_ROAD
    assert superpixel.sp_ground_truth(seg, imaging.LabelMap.from_labels(tie))[1] == imaging.NON_ROAD
    tie2 = np.full((4, 20), imaging.UNLABELED, dtype=np.uint8)
    tie2[2:, :10] = imaging.ROAD
    assert superpixel.sp_ground_truth(seg, imaging.LabelMap.from_labels(tie2))[1] == imaging.ROAD

    with pytest.raises(DataError):
        superpixel.sp_ground_truth(seg, imaging.LabelMap.from_labels(np.zeros((3, 3), dtype=np.uint8)))


def test_segmentation_export_round_trip(tmp_path, small_scene):
    img, _ = small_scene
    seg = superpixel.segment(img, SlicParams(rows=4, cols=12))
    superpixel.save_segmentation(seg, tmp_path / "s.pgm", tmp_path / "s.json")
    back = superpixel.load_segmentation(tmp_path / "s.pgm", tmp_path / "s.json")
    assert np.array_equal(back.sp_ids, seg.sp_ids)
    assert np.array_equal(back.node_of, seg.node_of)
    assert back.adjacency == seg.adjacency
