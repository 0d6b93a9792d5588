"""In-process pipeline: superpixels, descriptors, CNN and optional CRF refinement."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import cnn, crf, features, imaging, superpixel
from .config import Config, CrfSection, SlicSection
from .errors import DegenerateDataError

log = logging.getLogger(__name__)


def slic_params(section: SlicSection) -> superpixel.SlicParams:
    return superpixel.SlicParams(rows=section.rows, cols=section.cols, compactness=section.m,
                                 kmeans_iters=section.iters)


def crf_params(section: CrfSection) -> crf.CrfParams:
    return crf.CrfParams(alpha=section.alpha, beta=section.beta, tol=section.T, max_iters=section.iters,
                         w1=section.w1, w2=section.w2, sigma_alpha=section.sigma_alpha,
                         sigma_beta=section.sigma_beta, sigma_gamma=section.sigma_gamma)


def train_params(cfg: Config) -> cnn.TrainParams:
    c = cfg.cnn
    return cnn.TrainParams(lr=c.lr, epochs=c.epochs, batch=c.batch, seed=c.seed, dropout=c.dropout)


def load_ground_truth(path) -> imaging.LabelMap:
    """Native gray masks and KITTI color ground truth are both accepted."""
    raster = imaging.read_raster(path)
    if raster.shape[2] == 1:
        return imaging.load_mask(path)
    return imaging.load_kitti_gt(path)


def training_example(image: np.ndarray, gt: imaging.LabelMap, params: superpixel.SlicParams):
    """(descriptor lattice, target lattice) with empty superpixels ignored."""
    seg = superpixel.segment(image, params)
    lattice = features.build_descriptor(image, seg)
    targets = superpixel.sp_ground_truth(seg, gt)
    targets[seg.empty_flags] = cnn.IGNORE
    return lattice, superpixel.to_lattice(targets, seg)


@dataclass
class InferenceResult:
    seg: superpixel.Segmentation
    classes: cnn.ClassLattice
    mask: imaging.LabelMap
    probability: np.ndarray
    refinement: dict | None = None
    timings: dict = field(default_factory=dict)

    @property
    def sp_labels(self) -> np.ndarray:
        return superpixel.from_lattice(self.classes.labels, self.seg)


def infer(image: np.ndarray, model: cnn.CnnModel, cfg: Config = Config(), method: str | None = None) -> InferenceResult:
    """Run the full pipeline on one image.

    ``method`` overrides ``cfg.crf.method``; "none" skips refinement.  When
    the color model cannot be fitted the unrefined result is returned and
    the refinement report says why.
    """
    method = method or cfg.crf.method
    timings = {}
    t0 = time.perf_counter()
    lab = imaging.rgb_to_lab(image)
    seg = superpixel.segment(image, slic_params(cfg.slic), lab=lab)
    t1 = time.perf_counter()
    timings["superpixel"] = t1 - t0
    lattice = features.build_descriptor(image, seg, lab=lab)
    t2 = time.perf_counter()
    timings["features"] = t2 - t1
    classes = cnn.forward(model, lattice)
    t3 = time.perf_counter()
    timings["cnn"] = t3 - t2
    sp_labels = superpixel.from_lattice(classes.labels, seg)
    sp_probs = superpixel.from_lattice(classes.probs, seg)
    report = None
    mask, prob = crf.compose_result(seg, sp_labels, sp_probs=sp_probs)
    if method != "none":
        try:
            out = crf.refine(method, image, seg, sp_labels, sp_probs, crf_params(cfg.crf))
            mask, prob, report = out.mask, out.probability, out.report
        except DegenerateDataError as exc:
            log.warning("refinement skipped: %s", exc)
            report = {"engine": method, "skipped": str(exc)}
        timings["refine"] = time.perf_counter() - t3
    timings["total"] = time.perf_counter() - t0
    return InferenceResult(seg, classes, mask, prob, report, timings)
