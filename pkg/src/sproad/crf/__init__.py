"""Pixel-level refinement of superpixel road labels near the road boundary.

Three engines share one region: ``icm`` and ``bp`` minimize a Potts energy
with GMM color unaries, ``meanfield`` runs a dense CRF on CNN probabilities.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import imaging
from ..errors import DataError, DegenerateDataError
from ..superpixel import Segmentation
from . import bp as _bp
from . import icm as _icm
from . import meanfield as _mf
from .gmm import GmmParams, Mixture, fit_gmm, gmm_unary, unary_table
from .region import RefinementRegion, compose_result, extract_region

ENGINES = ("icm", "bp", "meanfield")
DEFAULT_BETA = {"icm": 20.0, "bp": 1.0, "meanfield": 0.0}


@dataclass(frozen=True)
class CrfParams:
    alpha: float = 1.0
    beta: float | None = None  # None picks the engine default
    tol: float | None = None  # None means 1e-6 per region pixel
    max_iters: int = 20
    w1: float = 0.1
    w2: float = 3.0
    sigma_alpha: float = 60.0
    sigma_beta: float = 10.0
    sigma_gamma: float = 1.0
    meanfield_iters: int = 20

    def __post_init__(self):
        if self.max_iters < 1 or self.meanfield_iters < 1:
            raise ValueError("iteration counts must be at least 1")
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ValueError("kernel widths must be positive")
        for name in ("alpha", "w1", "w2"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def beta_for(self, engine: str) -> float:
        return DEFAULT_BETA[engine] if self.beta is None else float(self.beta)

    def tol_for(self, n: int) -> float:
        return 1e-6 * n if self.tol is None else float(self.tol)


@dataclass
class RunReport:
    engine: str
    pixels: int
    iterations: int = 0
    energy: float | None = None
    seconds: float = 0.0
    truncation_radius: float | None = None
    energies: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "engine": self.engine,
            "iterations": self.iterations,
            "final_energy": self.energy,
            "wall_time_s": self.seconds,
            "region_pixels": self.pixels,
            "truncation_radius": self.truncation_radius,
        }


def region_unaries(region: RefinementRegion, gmm: GmmParams, alpha: float) -> np.ndarray:
    return alpha * unary_table(region.rgb, gmm)


def icm_refine(region: RefinementRegion, gmm: GmmParams, params: CrfParams = CrfParams()):
    """Returns (labels, RunReport); an empty region is returned unchanged."""
    start = time.perf_counter()
    rep = RunReport("icm", region.size)
    if region.size == 0:
        return region.init.copy(), rep
    beta = params.beta_for("icm")
    indptr, nbr = region.neighbor_csr()
    labels, energies, sweeps = _icm.icm_labels(
        region_unaries(region, gmm, params.alpha), indptr, nbr, region.init, beta,
        ext=region.ext, tol=params.tol_for(region.size), max_iters=params.max_iters)
    rep.iterations = sweeps
    rep.energies = [float(e) for e in energies]
    rep.energy = rep.energies[-1]
    rep.seconds = time.perf_counter() - start
    return labels, rep


def bp_refine(region: RefinementRegion, gmm: GmmParams, params: CrfParams = CrfParams()):
    """Min-sum BP on the region's bounding-box grid; returns (labels, RunReport)."""
    start = time.perf_counter()
    rep = RunReport("bp", region.size)
    if region.size == 0:
        return region.init.copy(), rep
    beta = params.beta_for("bp")
    unary = region_unaries(region, gmm, params.alpha)
    # fixed outside neighbors act as extra data cost: label l disagrees with ext[:, 1 - l]
    cost = unary + beta * region.ext[:, ::-1]
    y0, y1, x0, x1 = region.bbox
    ly, lx = region.rows - y0, region.cols - x0
    data = np.zeros((y1 - y0, x1 - x0, 2))
    mask = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    data[ly, lx] = cost
    mask[ly, lx] = True
    grid, _, iters = _bp.min_sum(data, mask, beta, params.tol_for(region.size), params.max_iters)
    labels = grid[ly, lx].astype(np.int64)
    indptr, nbr = region.neighbor_csr()
    rep.iterations = iters
    rep.energy = _icm.energy(unary, indptr, nbr, labels, beta, region.ext)
    rep.seconds = time.perf_counter() - start
    return labels, rep


def meanfield_refine(region: RefinementRegion, params: CrfParams = CrfParams(), history: list | None = None):
    """Returns (labels, Q, RunReport) with Q of shape (N, 2)."""
    start = time.perf_counter()
    rep = RunReport("meanfield", region.size)
    unary = _mf.unary_from_probs(region.prob, region.prob_non)
    radius = _mf.cutoff_radius(region.size, params.sigma_alpha)
    labels, q = _mf.mean_field(
        unary, region.rows, region.cols, region.rgb255, w1=params.w1, w2=params.w2,
        sigma_alpha=params.sigma_alpha, sigma_beta=params.sigma_beta, sigma_gamma=params.sigma_gamma,
        iters=params.meanfield_iters, radius=radius, history=history)
    rep.iterations = params.meanfield_iters if region.size else 0
    rep.truncation_radius = radius
    rep.seconds = time.perf_counter() - start
    return labels, q, rep


@dataclass
class Refinement:
    mask: imaging.LabelMap
    probability: np.ndarray
    region: RefinementRegion
    report: dict


def refine(engine: str, image: np.ndarray, seg: Segmentation, sp_labels, sp_probs=None,
           params: CrfParams = CrfParams()) -> Refinement:
    """Refine a superpixel labeling at pixel level with the named engine.

    Raises DegenerateDataError when the color model cannot be fitted;
    callers are expected to fall back to the unrefined result.
    """
    if engine not in ENGINES:
        raise ValueError(f"unknown refinement engine {engine!r}; choose from {', '.join(ENGINES)}")
    region = extract_region(seg, sp_labels, image, sp_probs)
    q_road = None
    if region.size == 0:
        labels, rep = region.init.copy(), RunReport(engine, 0)
    elif engine == "meanfield":
        if sp_probs is None:
            raise DataError("mean-field refinement needs CNN probabilities")
        labels, q, rep = meanfield_refine(region, params)
        q_road = q[:, 1]
    else:
        gmm = fit_gmm(image, seg, sp_labels)
        fn = icm_refine if engine == "icm" else bp_refine
        labels, rep = fn(region, gmm, params)
    mask, prob = compose_result(seg, sp_labels, region, labels, sp_probs, q_road)
    return Refinement(mask, prob, region, rep.as_dict())


__all__ = [
    "CrfParams", "DegenerateDataError", "ENGINES", "GmmParams", "Mixture", "Refinement", "RefinementRegion",
    "RunReport", "bp_refine", "compose_result", "extract_region", "fit_gmm", "gmm_unary", "icm_refine",
    "meanfield_refine", "refine", "unary_table",
]
