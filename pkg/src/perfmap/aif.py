"""Automatic arterial input function selection and gamma-variate fitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import least_squares

from .bolus_ctc import CtcField, TimeSeries
from .errors import AllClustersRejected, FitDiverged, NoCandidates, NoPeak
from .nifti_io import Mask3D, Volume3D

DEFAULT_SCHEDULE = ((5, 95), (10, 90), (15, 85), (25, 75))
CONN26 = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class AifConfig:
    schedule: tuple = DEFAULT_SCHEDULE
    min_candidates: int = 50
    min_cluster: int = 5
    max_cluster: int = 2000
    noise_max: float = 0.5
    weights: tuple = (1.0, 1.0, 1.0)
    use_fitted_curve: bool = False

    def __post_init__(self):
        sched = tuple(tuple(float(v) for v in pair) for pair in self.schedule)
        object.__setattr__(self, "schedule", sched)
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not sched or any(len(p) != 2 for p in sched):
            raise ValueError("aif.schedule must be a non-empty list of (ttp_pct, auc_pct) pairs")
        if any(not (0 <= v <= 100) for p in sched for v in p):
            raise ValueError("aif.schedule percentiles must lie in [0, 100]")
        if self.min_cluster < 1 or self.max_cluster < self.min_cluster:
            raise ValueError("need 1 <= aif.min_cluster <= aif.max_cluster")
        if self.min_candidates < 1:
            raise ValueError("aif.min_candidates must be >= 1")
        if not self.noise_max > 0:
            raise ValueError("aif.noise_max must be positive")
        if len(self.weights) != 3 or min(self.weights) < 0:
            raise ValueError("aif.weights must be three non-negative numbers")


# ---------------------------------------------------------------- gamma variate


@dataclass(frozen=True)
class GammaFit:
    """Peak-normalised gamma variate; ``g(t0 + alpha*beta) == amplitude``."""

    amplitude: float
    t0: float
    alpha: float
    beta: float
    rmse: float = 0.0

    def __call__(self, t) -> np.ndarray:
        return gamma_variate(t, self.amplitude, self.t0, self.alpha, self.beta)

    @property
    def peak_time(self) -> float:
        return self.t0 + self.alpha * self.beta


def gamma_variate(t, amplitude, t0, alpha, beta) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    x = (t - t0) / (alpha * beta)
    out = np.zeros_like(t)
    pos = x > 0
    xp = x[pos]
    out[pos] = amplitude * np.exp(alpha * (np.log(xp) + 1.0 - xp))
    return out


def _model_and_jac(p, t):
    log_a, t0, log_alpha, log_beta = p
    a, alpha, beta = np.exp(log_a), np.exp(log_alpha), np.exp(log_beta)
    x = (t - t0) / (alpha * beta)
    g = np.zeros_like(t)
    jac = np.zeros((t.size, 4))
    pos = x > 0
    xp = x[pos]
    gp = a * np.exp(alpha * (np.log(xp) + 1.0 - xp))
    g[pos] = gp
    jac[pos, 0] = gp
    jac[pos, 1] = -gp * (1.0 / xp - 1.0) / beta
    jac[pos, 2] = gp * alpha * np.log(xp)
    jac[pos, 3] = -gp * alpha * (1.0 - xp)
    return g, jac


def initial_gamma_guess(curve: TimeSeries) -> tuple:
    """Heuristic start point: (amplitude, t0, alpha, beta)."""
    v = curve.values
    dt = curve.dt
    peak_idx = int(np.argmax(v))
    peak = float(v[peak_idx])
    first = int(np.argmax(v > 0.1 * peak))
    t0 = (first - 1) * dt
    half = np.flatnonzero(v >= 0.5 * peak)
    fwhm = max((half[-1] - half[0] + 1) * dt, dt)
    beta = fwhm / 2.35
    alpha = (peak_idx * dt - t0) / beta
    if not alpha > 0:
        alpha = 1.0
    return peak, t0, alpha, beta


def fit_gamma_variate(curve: TimeSeries, max_iter: int = 200) -> GammaFit:
    """Least-squares gamma-variate fit (Levenberg-Marquardt, log-scaled A, alpha, beta).

    ``rmse`` is computed over the frames after the fitted onset.
    """
    v = curve.values
    if not np.isfinite(v).all():
        raise FitDiverged("curve contains non-finite values")
    if v.max() <= 0:
        raise NoPeak("curve has no positive peak")
    t = curve.times
    a0, t00, alpha0, beta0 = initial_gamma_guess(curve)
    p0 = np.array([np.log(a0), t00, np.log(alpha0), np.log(beta0)])

    def resid(p):
        return _model_and_jac(p, t)[0] - v

    def jac(p):
        return _model_and_jac(p, t)[1]

    with np.errstate(over="ignore", invalid="ignore"):
        res = least_squares(resid, p0, jac=jac, method="lm", ftol=1e-8, xtol=1e-10,
                            gtol=1e-12, max_nfev=max_iter)
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.cost):
        raise FitDiverged("gamma-variate fit produced non-finite parameters")
    amplitude, t0 = float(np.exp(res.x[0])), float(res.x[1])
    alpha, beta = float(np.exp(res.x[2])), float(np.exp(res.x[3]))
    fitted = gamma_variate(t, amplitude, t0, alpha, beta)
    after = t > t0
    if not after.any():
        after = np.ones_like(t, dtype=bool)
    rmse = float(np.sqrt(np.mean((fitted[after] - v[after]) ** 2)))
    if not np.isfinite(rmse):
        raise FitDiverged("gamma-variate fit residual is not finite")
    return GammaFit(amplitude, t0, alpha, beta, rmse)


# ---------------------------------------------------------------- candidates


@dataclass
class AifCandidateCluster:
    voxels: np.ndarray  # linear (C-order) indices into the volume
    mean_curve: TimeSeries
    fit: GammaFit | None = None
    score: float | None = None

    @property
    def volume_voxels(self) -> int:
        return int(self.voxels.size)

    @property
    def peak(self) -> float:
        return float(self.mean_curve.values.max())


@dataclass(frozen=True)
class AifResult:
    curve: TimeSeries
    fitted_curve: TimeSeries
    segmentation: Mask3D
    fit: GammaFit
    peak_time: float
    score: float = 0.0
    n_clusters: int = 1
    candidates: Mask3D | None = field(default=None, repr=False)


def auc_map(ctc: CtcField) -> Volume3D:
    """Trapezoidal area under each in-mask CTC (concentration x s)."""
    m = ctc.mask.data
    out = np.zeros(m.shape)
    out[m] = np.trapezoid(ctc.curves[m], dx=ctc.dt, axis=1)
    return Volume3D(out, ctc.mask.spacing, ctc.mask.affine)


def candidate_search(ttp: Volume3D, auc: Volume3D, mask: Mask3D,
                     schedule=DEFAULT_SCHEDULE, min_candidates: int = 50) -> Mask3D:
    """Early-peaking, high-AUC voxels under progressively relaxed percentiles.

    Each schedule entry ``(p, q)`` keeps in-mask voxels with TTP at or below
    the p-th percentile and AUC at or above the q-th percentile. The first
    entry yielding ``min_candidates`` voxels wins.
    """
    m = mask.data
    if not m.any():
        raise NoCandidates("brain mask is empty")
    ttp_in, auc_in = ttp.data[m], auc.data[m]
    for p, q in schedule:
        sel = (ttp_in <= np.percentile(ttp_in, p)) & (auc_in >= np.percentile(auc_in, q))
        if sel.sum() >= min_candidates:
            out = np.zeros(m.shape, dtype=bool)
            out[m] = sel
            return Mask3D.like(mask, out)
    raise NoCandidates(f"no schedule step produced {min_candidates} candidate voxels")


def cluster_candidates(cands: Mask3D) -> list:
    """26-connected clusters as arrays of linear indices, largest first."""
    labels, n = ndimage.label(cands.data, structure=CONN26)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n + 2))
    clusters = [order[bounds[i] : bounds[i + 1]] for i in range(n)]
    clusters.sort(key=lambda c: (-c.size, int(c[0])))
    return clusters


def noise_metric(curve: np.ndarray) -> float:
    """RMS of second differences divided by the curve peak."""
    curve = np.asarray(curve, dtype=np.float64)
    peak = curve.max()
    if peak <= 0:
        return np.inf
    d2 = np.diff(curve, n=2)
    return float(np.sqrt(np.mean(d2 * d2)) / peak)


def filter_clusters(clusters, ctc: CtcField, min_size: int = 5, max_size: int = 2000,
                    noise_max: float = 0.5) -> list:
    """Drop clusters outside the size bounds or with a noisy mean curve."""
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    flat = ctc.curves.reshape(-1, ctc.n_frames)
    kept = []
    for vox in clusters:
        if not (min_size <= vox.size <= max_size):
            continue
        mean = flat[vox].mean(axis=0)
        if noise_metric(mean) > noise_max:
            continue
        kept.append(AifCandidateCluster(vox, TimeSeries(mean, ctc.dt)))
    if not kept:
        raise AllClustersRejected(f"all {len(clusters)} candidate clusters were rejected")
    return kept


def _minmax(values: np.ndarray, degenerate: float) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, degenerate)
    return (values - lo) / (hi - lo)


def score_clusters(clusters, weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    w_v, w_p, w_e = weights
    vol = np.array([c.volume_voxels for c in clusters], dtype=np.float64)
    peak = np.array([c.peak for c in clusters])
    err = np.array([c.fit.rmse for c in clusters])
    if len(clusters) == 1:
        v_n, p_n, e_n = np.ones(1), np.ones(1), np.zeros(1)
    else:
        v_n, p_n, e_n = _minmax(vol, 1.0), _minmax(peak, 1.0), _minmax(err, 0.0)
    return w_v * v_n + w_p * p_n - w_e * e_n


def score_and_select(clusters, like: Mask3D, weights=(1.0, 1.0, 1.0), onset: int = 0,
                     use_fitted_curve: bool = False) -> AifResult:
    """Pick the best fitted cluster and package it as the AIF.

    Ties on score fall back to larger peak, then smaller rmse, then the
    smaller first voxel index.
    """
    if not clusters:
        raise AllClustersRejected("no clusters to score")
    scores = score_clusters(clusters, weights)
    for c, s in zip(clusters, scores):
        c.score = float(s)
    best = min(
        range(len(clusters)),
        key=lambda i: (-scores[i], -clusters[i].peak, clusters[i].fit.rmse,
                       int(clusters[i].voxels.min())),
    )
    win = clusters[best]
    seg = np.zeros(like.data.size, dtype=bool)
    seg[win.voxels] = True
    seg = seg.reshape(like.data.shape)
    dt = win.mean_curve.dt
    fitted = TimeSeries(win.fit(win.mean_curve.times), dt)
    curve = fitted if use_fitted_curve else win.mean_curve
    peak_time = (int(np.argmax(win.mean_curve.values)) - onset) * dt
    return AifResult(
        curve=curve,
        fitted_curve=fitted,
        segmentation=Mask3D.like(like, seg),
        fit=win.fit,
        peak_time=float(peak_time),
        score=float(scores[best]),
        n_clusters=len(clusters),
    )


def select_aif(ctc: CtcField, ttp: Volume3D, cfg: AifConfig = AifConfig()) -> AifResult:
    """Full AIF stage: candidates, clustering, filtering, fitting and scoring."""
    auc = auc_map(ctc)
    cands = candidate_search(ttp, auc, ctc.mask, cfg.schedule, cfg.min_candidates)
    clusters = cluster_candidates(cands)
    kept = filter_clusters(clusters, ctc, cfg.min_cluster, cfg.max_cluster, cfg.noise_max)
    fitted = []
    for c in kept:
        try:
            c.fit = fit_gamma_variate(c.mean_curve)
        except (FitDiverged, NoPeak):
            continue
        fitted.append(c)
    if not fitted:
        raise AllClustersRejected("gamma-variate fit failed for every cluster")
    result = score_and_select(fitted, ctc.mask, cfg.weights, ctc.onset, cfg.use_fitted_curve)
    return AifResult(**{**result.__dict__, "candidates": cands})
