"""Per-class RGB Gaussian mixtures used as ICM / BP data terms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .. import imaging
from ..errors import DegenerateDataError
from ..superpixel import Segmentation
from .region import per_id

N_COMPONENTS = 3
COV_FLOOR = 1e-3
KMEANS_ITERS = 20
EM_MAX_ITERS = 50
EM_REL_TOL = 1e-4


@dataclass
class Mixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, 3)
    covs: np.ndarray  # (K, 3, 3)
    log_likelihood: list = field(default_factory=list)  # mean log-likelihood per EM step


@dataclass
class GmmParams:
    non_road: Mixture
    road: Mixture

    def __getitem__(self, cls: int) -> Mixture:
        return self.road if cls == imaging.ROAD else self.non_road


def kmeans(x: np.ndarray, k: int = N_COMPONENTS, iters: int = KMEANS_ITERS,
           weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from quantile-spread seeds.

    Seeds are the points at quantiles (i + 0.5) / k of the data ordered by
    channel sum (stable order for equal sums).  ``weights`` are integer-like
    multiplicities; a weighted point behaves as that many copies.  Ties in
    assignment go to the smaller cluster index and an empty cluster keeps
    its center.
    """
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    order = np.argsort(x.sum(axis=1), kind="stable")
    cum = np.cumsum(w[order])
    targets = np.floor((np.arange(k) + 0.5) * cum[-1] / k)
    seeds = order[np.searchsorted(cum, targets, side="right")]
    centers = x[seeds].astype(np.float64)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = np.argmin(d, axis=1)
        mass = np.bincount(assign, weights=w, minlength=k)
        for j in range(k):
            if mass[j] > 0:
                sel = assign == j
                centers[j] = w[sel] @ x[sel] / mass[j]
    return centers, assign


def _floor_eigenvalues(cov: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    out = (vecs * np.maximum(vals, floor)) @ vecs.T
    return (out + out.T) / 2


def _log_component_densities(x: np.ndarray, mix: Mixture) -> np.ndarray:
    """(N, K) log(pi_k N(x | mu_k, Sigma_k))."""
    n, d = x.shape
    out = np.empty((n, len(mix.weights)))
    for j in range(len(mix.weights)):
        chol = np.linalg.cholesky(mix.covs[j])
        diff = np.linalg.solve(chol, (x - mix.means[j]).T)
        maha = (diff**2).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        with np.errstate(divide="ignore"):
            logw = np.log(mix.weights[j])
        out[:, j] = logw - 0.5 * (d * np.log(2 * np.pi) + logdet + maha)
    return out


def fit_mixture(x: np.ndarray, k: int = N_COMPONENTS, floor: float = COV_FLOOR,
                weights: np.ndarray | None = None) -> Mixture:
    """k-means initialised EM with covariance eigenvalues floored at ``floor``.

    The floor is applied as a constraint inside the M-step (clipping the
    eigenvalues of the weighted scatter matrix is the constrained
    maximizer), so the log-likelihood never decreases.  With ``weights``
    each row counts as that many samples.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total < k:
        raise DegenerateDataError(f"need at least {k} pixels to fit a {k}-component mixture, got {int(total)}")
    centers, assign = kmeans(x, k, weights=w)
    resp = np.zeros((n, k))
    resp[np.arange(n), assign] = 1.0
    mix = _m_step(x, resp, w, None, floor)
    mix.means = np.where((resp.T @ w > 0)[:, None], mix.means, centers)
    history = []
    log_p = _log_component_densities(x, mix)
    ll = float(w @ logsumexp(log_p, axis=1) / total)
    history.append(ll)
    for _ in range(EM_MAX_ITERS):
        norm = logsumexp(log_p, axis=1, keepdims=True)
        resp = np.exp(log_p - norm)
        mix = _m_step(x, resp, w, mix, floor)
        log_p = _log_component_densities(x, mix)
        new = float(w @ logsumexp(log_p, axis=1) / total)
        history.append(new)
        gain = new - ll
        ll = new
        if gain < EM_REL_TOL * abs(history[-2]):
            break
    mix.log_likelihood = history
    return mix


def _m_step(x, resp, w, prev: Mixture | None, floor: float) -> Mixture:
    n, d = x.shape
    k = resp.shape[1]
    r = resp * w[:, None]
    nk = r.sum(axis=0)
    weights = nk / w.sum()
    means = np.zeros((k, d))
    covs = np.zeros((k, d, d))
    for j in range(k):
        if nk[j] <= 1e-12:
            # no mass: any parameters maximize this component's term
            means[j] = prev.means[j] if prev is not None else 0.0
            covs[j] = prev.covs[j] if prev is not None else floor * np.eye(d)
            continue
        means[j] = r[:, j] @ x / nk[j]
        diff = x - means[j]
        scatter = (r[:, j, None] * diff).T @ diff / nk[j]
        covs[j] = _floor_eigenvalues(scatter, floor)
    return Mixture(weights, means, covs)


def fit_gmm(image: np.ndarray, seg: Segmentation, sp_labels, floor: float = COV_FLOOR) -> GmmParams:
    """Fit road and non-road mixtures on every pixel of confidently labeled superpixels.

    Unlabeled superpixels are left out.  Raises DegenerateDataError when a
    class has fewer than three pixels.
    """
    image = imaging.check_image(image)
    labels = per_id(sp_labels, seg)
    pix_class = labels[seg.sp_ids].ravel()
    rgb = image.reshape(-1, 3)
    mixtures = {}
    for cls in (imaging.NON_ROAD, imaging.ROAD):
        x = rgb[pix_class == cls]
        if len(x) < N_COMPONENTS:
            name = "road" if cls == imaging.ROAD else "non-road"
            raise DegenerateDataError(
                f"only {len(x)} {name} pixels available for the color model; skip refinement for this image"
            )
        # 8-bit colors repeat a lot; EM on distinct colors with counts is the same fit
        colors, counts = np.unique(x, axis=0, return_counts=True)
        mixtures[cls] = fit_mixture(colors / 255.0, N_COMPONENTS, floor, weights=counts)
    return GmmParams(non_road=mixtures[imaging.NON_ROAD], road=mixtures[imaging.ROAD])


def component_energies(x: np.ndarray, mix: Mixture) -> np.ndarray:
    """(N, K) -log pi_k + 1/2 log|Sigma_k| + 1/2 Mahalanobis^2."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty((x.shape[0], len(mix.weights)))
    for j in range(len(mix.weights)):
        chol = np.linalg.cholesky(mix.covs[j])
        diff = np.linalg.solve(chol, (x - mix.means[j]).T)
        with np.errstate(divide="ignore"):
            nlw = -np.log(mix.weights[j])
        out[:, j] = nlw + np.log(np.diag(chol)).sum() + 0.5 * (diff**2).sum(axis=0)
    return out


def gmm_unary(x: np.ndarray, cls: int, gmm: GmmParams) -> np.ndarray:
    """Energy of the best-matching component of class ``cls`` for each RGB row."""
    return component_energies(x, gmm[cls]).min(axis=1)


def unary_table(rgb: np.ndarray, gmm: GmmParams) -> np.ndarray:
    """(N, 2) energies for labels non-road, road."""
    return np.column_stack([gmm_unary(rgb, imaging.NON_ROAD, gmm), gmm_unary(rgb, imaging.ROAD, gmm)])
