"""Density estimation and robust statistics.

* 1-D Gaussian kernel density estimation with Silverman's bandwidth rule,
  exact evaluation plus a binned tabulation for bulk voxel lookups.
* CSF threshold detection as the valley to the right of the leftmost
  significant FLAIR density peak.
* Probability-weighted voxel sampling.
* Minimum Covariance Determinant outlier filtering (FAST-MCD style search
  with concentration steps).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal
from scipy.stats import chi2

from .volume import ScalarVolume

__all__ = [
    "DensityModel",
    "GridDensity",
    "CsfThreshold",
    "RobustConfig",
    "McdResult",
    "NoValleyError",
    "McdError",
    "silverman_bandwidth",
    "kde_fit",
    "detect_csf_threshold",
    "sample_indices",
    "sample_by_probability",
    "mcd_filter",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_EVAL_CHUNK = 1 << 22  # grid*sample products per chunk during exact evaluation


class NoValleyError(ValueError):
    """Raised when the FLAIR density shows no valley right of the CSF peak."""


class McdError(RuntimeError):
    """Raised when every candidate h-subset has a singular covariance."""


def silverman_bandwidth(samples: np.ndarray) -> float:
    """0.9 * min(std, IQR / 1.34) * n^(-1/5), floored at 1e-6 of the sample range.

    When the IQR collapses to zero (heavily tied samples) the standard
    deviation is used alone.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    std = float(x.std(ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    bw = 0.9 * spread * n ** (-0.2)
    floor = 1e-6 * float(x.max() - x.min())
    return max(bw, floor)


@dataclass(frozen=True, eq=False)
class DensityModel:
    """Gaussian KDE over 1-D intensity samples."""

    sample_points: np.ndarray
    bandwidth: float

    def __post_init__(self) -> None:
        pts = np.asarray(self.sample_points, dtype=np.float64).ravel()
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if np.unique(pts).size < 2:
            raise ValueError("KDE needs at least 2 distinct sample points")
        object.__setattr__(self, "sample_points", pts)

    @property
    def n(self) -> int:
        return self.sample_points.size

    def __call__(self, x) -> np.ndarray:
        """Exact density at ``x`` (any shape)."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.ravel()
        out = np.empty(flat.size)
        pts = self.sample_points
        h = self.bandwidth
        step = max(1, _EVAL_CHUNK // pts.size)
        for start in range(0, flat.size, step):
            z = (flat[start : start + step, None] - pts[None, :]) / h
            out[start : start + step] = np.exp(-0.5 * z * z).sum(axis=1)
        out /= pts.size * h * _SQRT_2PI
        return out.reshape(x.shape)

    def tabulate(self, lo: float, hi: float, points_per_bandwidth: int = 8, max_points: int = 1 << 16) -> "GridDensity":
        """Binned approximation on a regular grid covering ``[lo, hi]`` and the samples.

        Samples are linearly binned onto a grid of spacing
        ``bandwidth / points_per_bandwidth`` and convolved with the sampled
        kernel truncated at 8 bandwidths.
        """
        h = self.bandwidth
        pts = self.sample_points
        a = min(lo, float(pts.min())) - 8 * h
        b = max(hi, float(pts.max())) + 8 * h
        delta = h / points_per_bandwidth
        m = int(math.ceil((b - a) / delta)) + 1
        if m > max_points:
            m = max_points
            delta = (b - a) / (m - 1)
        grid = a + delta * np.arange(m)
        pos = (pts - a) / delta
        left = np.clip(np.floor(pos).astype(np.int64), 0, m - 2)
        frac = pos - left
        counts = np.bincount(left, weights=1.0 - frac, minlength=m) + np.bincount(left + 1, weights=frac, minlength=m)
        half = int(math.ceil(8 * h / delta))
        kx = np.arange(-half, half + 1) * delta / h
        kernel = np.exp(-0.5 * kx * kx)
        dens = signal.fftconvolve(counts, kernel, mode="same") if m > 4096 else np.convolve(counts, kernel, mode="same")
        dens = np.clip(dens, 0.0, None) / (pts.size * h * _SQRT_2PI)
        return GridDensity(grid, dens)


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Piecewise-linear density lookup; zero outside the tabulated range."""

    grid: np.ndarray
    values: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)


def kde_fit(samples: Sequence[float], bandwidth: Optional[float] = None) -> DensityModel:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if np.unique(x).size < 2:
        raise ValueError("kde_fit needs at least 2 distinct samples")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x)
    return DensityModel(x, float(bandwidth))


@dataclass(frozen=True)
class CsfThreshold:
    th: float
    peak_location: float
    valley_location: float

    def __post_init__(self) -> None:
        if not self.peak_location < self.valley_location:
            raise ValueError("CSF peak must lie left of the valley")

    def to_dict(self) -> dict:
        return {"th": self.th, "peak_location": self.peak_location, "valley_location": self.valley_location}


def _curve_valley(grid: np.ndarray, dens: np.ndarray, peak_height_fraction: float) -> tuple[int, int]:
    level = peak_height_fraction * float(dens.max())
    peaks, _ = signal.find_peaks(dens, height=level, prominence=level)
    if peaks.size < 2:
        raise NoValleyError(
            "no CSF valley found: FLAIR density has fewer than two significant peaks; "
            "supply a manual CSF threshold"
        )
    p0, p1 = int(peaks[0]), int(peaks[1])
    valley = p0 + 1 + int(np.argmin(dens[p0 + 1 : p1]))
    return p0, valley


def detect_csf_threshold(
    flair: ScalarVolume,
    peak_height_fraction: float = 0.05,
    grid_points: int = 512,
    bandwidth: Optional[float] = None,
) -> CsfThreshold:
    """Threshold at the density valley right of the leftmost significant FLAIR peak.

    The brain-interior FLAIR intensities are smoothed with a KDE evaluated on
    ``grid_points`` points spanning their range. A peak counts when both its
    height and its prominence reach ``peak_height_fraction`` of the global
    maximum. The threshold is the lowest point of the curve between the
    first two such peaks.
    """
    values = flair.brain_values()
    if values.size == 0:
        raise ValueError("brain mask is empty")
    if np.unique(values).size < 2:
        raise NoValleyError("no CSF valley found: FLAIR is constant inside the brain")
    kde = kde_fit(values, bandwidth)
    grid = np.linspace(values.min(), values.max(), grid_points)
    dens = kde(grid)
    p0, valley = _curve_valley(grid, dens, peak_height_fraction)
    th = float(grid[valley])
    return CsfThreshold(th=th, peak_location=float(grid[p0]), valley_location=th)


def sample_indices(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` indices with replacement, probability proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if n <= 0:
        raise ValueError("sample count must be positive")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("sampling weights must be finite and non-negative")
    cdf = np.cumsum(w)
    total = cdf[-1] if cdf.size else 0.0
    if not total > 0:
        raise ValueError("sampling weights are all zero")
    u = rng.random(n) * total
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, w.size - 1)


def sample_by_probability(vol: ScalarVolume, prob, n: int, seed: int) -> np.ndarray:
    """Brain-voxel intensities drawn with replacement, weighted by ``prob``."""
    p = prob.data if isinstance(prob, ScalarVolume) else np.asarray(prob, dtype=np.float64)
    if p.shape != vol.dims:
        raise ValueError("probability field and volume grids differ")
    weights = np.where(vol.brain_mask, p, 0.0)[vol.brain_mask]
    idx = sample_indices(weights, n, np.random.default_rng(seed))
    return vol.brain_values()[idx]


@dataclass
class RobustConfig:
    support_fraction: float = 0.5
    max_iterations: int = 100
    seed: int = 0
    num_starts: int = 500
    cutoff_quantile: float = 0.975
    subsample_size: int = 1500  # start-phase subsample for large n
    keep_best: int = 10
    reweight: bool = True
    exhaustive_limit: int = 5000  # enumerate every h-subset when C(n, h) is at most this

    def __post_init__(self) -> None:
        if not 0.5 <= self.support_fraction <= 1.0:
            raise ValueError(f"support_fraction must be in [0.5, 1], got {self.support_fraction}")
        if self.max_iterations < 1 or self.num_starts < 1:
            raise ValueError("max_iterations and num_starts must be positive")


@dataclass(eq=False)
class McdResult:
    inliers: np.ndarray
    center: np.ndarray
    covariance: np.ndarray  # consistency-corrected scatter used for the cutoff
    support: np.ndarray = field(repr=False)  # the selected h-subset
    raw_covariance: np.ndarray = field(repr=False)
    determinant: float = 0.0  # det of the raw h-subset covariance

    @property
    def inlier_fraction(self) -> float:
        return float(self.inliers.mean())


def _fit(X: np.ndarray, idx: np.ndarray):
    sub = X[idx]
    mu = sub.mean(axis=1)
    c = sub - mu[:, None, :]
    cov = np.einsum("shi,shj->sij", c, c) / (idx.shape[1] - 1)
    sign, logdet = np.linalg.slogdet(cov)
    logdet = np.where(sign > 0, logdet, np.inf)
    return mu, cov, logdet


def _mahalanobis2(X: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(cov)
    diff = X[None, :, :] - mu[:, None, :]
    return np.einsum("snd,sde,sne->sn", diff, inv, diff)


def _closest(d2: np.ndarray, h: int) -> np.ndarray:
    return np.sort(np.argsort(d2, axis=1, kind="stable")[:, :h], axis=1)


def _concentrate(X: np.ndarray, idx: np.ndarray, h: int, steps: int):
    """Run up to ``steps`` C-steps on each subset; stop a subset once its determinant stalls."""
    mu, cov, logdet = _fit(X, idx)
    active = np.isfinite(logdet)
    for _ in range(steps):
        if not active.any():
            break
        a = np.flatnonzero(active)
        new_idx = _closest(_mahalanobis2(X, mu[a], cov[a]), h)
        nmu, ncov, nld = _fit(X, new_idx)
        better = nld < logdet[a] - 1e-12 * np.maximum(1.0, np.abs(logdet[a]))
        upd = a[better]
        idx[upd] = new_idx[better]
        mu[upd] = nmu[better]
        cov[upd] = ncov[better]
        logdet[upd] = nld[better]
        active[a[~better]] = False
    return idx, mu, cov, logdet


def _random_subsets(rng: np.random.Generator, n: int, h: int, count: int) -> np.ndarray:
    keys = rng.random((count, n))
    return np.sort(np.argsort(keys, axis=1, kind="stable")[:, :h], axis=1)


def _few_subsets(n: int, h: int, limit: int) -> bool:
    """True when C(n, h) <= limit, without building the full binomial for large n."""
    k, count = min(h, n - h), 1
    for i in range(k):
        count = count * (n - i) // (i + 1)
        if count > limit:
            return False
    return count <= limit


def mcd_filter(points, cfg: Optional[RobustConfig] = None) -> McdResult:
    """Minimum Covariance Determinant fit and chi-square outlier flags.

    Random h-subsets (h = ceil(support_fraction * n)) are refined with
    concentration steps until the determinant stops decreasing; the subset
    with the smallest determinant wins. When there are at most
    ``cfg.exhaustive_limit`` h-subsets every one of them is a start, which
    makes the search exact for small n. For large n the start phase runs on a
    random subsample and only the best few candidates are refined on the full
    data. The raw scatter is rescaled by median(d^2) / chi2_d(0.5); points
    with squared Mahalanobis distance above the chi-square ``cutoff_quantile``
    are outliers. With ``cfg.reweight`` the location and scatter are then
    re-estimated from those inliers (same rescaling) and the flags recomputed.
    """
    cfg = cfg or RobustConfig()
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < d + 1:
        raise ValueError(f"mcd_filter needs n >= d + 1 points (n={n}, d={d})")
    h = int(math.ceil(cfg.support_fraction * n))
    if h < d + 1:
        raise ValueError(f"support size h={h} is below d + 1 = {d + 1}")
    rng = np.random.default_rng(cfg.seed)

    if _few_subsets(n, h, cfg.exhaustive_limit):
        starts = np.array(list(itertools.combinations(range(n), h)), dtype=np.intp)
        idx, _, _, logdet = _concentrate(X, starts, h, cfg.max_iterations)
    elif n <= cfg.subsample_size:
        starts = _random_subsets(rng, n, h, cfg.num_starts)
        idx, _, _, logdet = _concentrate(X, starts, h, cfg.max_iterations)
    else:
        m = cfg.subsample_size
        sub = np.sort(rng.choice(n, size=m, replace=False))
        Xs = X[sub]
        hs = int(math.ceil(cfg.support_fraction * m))
        starts = _random_subsets(rng, m, hs, cfg.num_starts)
        _, mu_s, cov_s, ld_s = _concentrate(Xs, starts, hs, 2)
        keep = np.argsort(ld_s, kind="stable")[: cfg.keep_best]
        keep = keep[np.isfinite(ld_s[keep])]
        if keep.size == 0:
            raise McdError("singular covariance on every candidate subset")
        idx = _closest(_mahalanobis2(X, mu_s[keep], cov_s[keep]), h)
        idx, _, _, logdet = _concentrate(X, idx, h, cfg.max_iterations)

    if not np.isfinite(logdet).any():
        raise McdError("singular covariance on every candidate subset")
    best = int(np.argmin(logdet))
    support = np.zeros(n, dtype=bool)
    support[idx[best]] = True
    mu, raw_cov, _ = _fit(X, idx[best][None, :])
    mu, raw_cov = mu[0], raw_cov[0]
    cutoff = chi2.ppf(cfg.cutoff_quantile, d)
    d2 = _mahalanobis2(X, mu[None, :], raw_cov[None])[0]
    factor = float(np.median(d2)) / chi2.ppf(0.5, d)
    if not factor > 0:
        factor = 1.0
    center, cov = mu, raw_cov * factor
    inliers = d2 / factor <= cutoff
    if cfg.reweight and inliers.sum() > d:
        # one-step reweighting on the raw inliers
        rw_mu = X[inliers].mean(axis=0)
        rw_cov = np.atleast_2d(np.cov(X[inliers].T))
        if np.linalg.det(rw_cov) > 0:
            rd2 = _mahalanobis2(X, rw_mu[None, :], rw_cov[None])[0]
            rfactor = float(np.median(rd2)) / chi2.ppf(0.5, d)
            if rfactor > 0:
                center, cov = rw_mu, rw_cov * rfactor
                inliers = rd2 / rfactor <= cutoff
    return McdResult(
        inliers=inliers,
        center=center,
        covariance=cov,
        support=support,
        raw_covariance=raw_cov,
        determinant=float(np.linalg.det(raw_cov)),
    )
