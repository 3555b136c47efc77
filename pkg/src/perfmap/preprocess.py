"""Downsampling, inter-frame motion correction and spatial smoothing."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.fft
from scipy import ndimage

from .errors import DegenerateImage, GeometryMismatch
from .nifti_io import Volume3D, Volume4D

log = logging.getLogger(__name__)

REGISTRATION_MODES = ("off", "translation")


@dataclass(frozen=True)
class PreprocessConfig:
    max_inplane: int = 256
    smooth_sigma_mm: float = 2.0
    registration: str = "translation"
    max_shift_voxels: int = 5

    def __post_init__(self):
        # config files parse a bare ``off`` as boolean false
        if self.registration is False:
            object.__setattr__(self, "registration", "off")
        if self.max_inplane < 16:
            raise ValueError("preprocess.max_inplane must be >= 16")
        if self.smooth_sigma_mm < 0:
            raise ValueError("preprocess.smooth_sigma_mm must be >= 0")
        if self.registration not in REGISTRATION_MODES:
            raise ValueError(f"preprocess.registration must be one of {REGISTRATION_MODES}")
        if self.max_shift_voxels < 1:
            raise ValueError("preprocess.max_shift_voxels must be >= 1")


def downsample_factor(nx: int, ny: int, max_inplane: int) -> int:
    if max(nx, ny) <= max_inplane:
        return 1
    f = 2
    while max(nx, ny) // f > max_inplane:
        f += 1
    return f


def block_average(data: np.ndarray, f: int) -> np.ndarray:
    """Average non-overlapping f x f in-plane blocks (trailing remainder dropped)."""
    nx, ny = data.shape[0] // f, data.shape[1] // f
    cropped = data[: nx * f, : ny * f]
    blocks = cropped.reshape((nx, f, ny, f) + data.shape[2:])
    return blocks.mean(axis=(1, 3))


def downsample(vol, cfg: PreprocessConfig = PreprocessConfig()):
    """Reduce the in-plane grid by the smallest integer factor that fits ``max_inplane``.

    Works on Volume4D and Volume3D alike. The affine is rescaled so that each
    output voxel centre sits at the centre of its source block.
    """
    nx, ny = vol.data.shape[:2]
    f = downsample_factor(nx, ny, cfg.max_inplane)
    if f == 1:
        return vol
    data = block_average(vol.data, f)
    affine = vol.affine.copy()
    affine[:3, 3] += 0.5 * (f - 1) * (affine[:3, 0] + affine[:3, 1])
    affine[:3, 0] *= f
    affine[:3, 1] *= f
    sx, sy, sz = vol.spacing
    log.info("downsampled in-plane by %d: %s -> %s", f, vol.data.shape[:2], data.shape[:2])
    return replace(vol, data=data, affine=affine, spacing=(sx * f, sy * f, sz))


# ---------------------------------------------------------------- registration


class _NccSearch:
    """Normalized cross-correlation of a fixed frame against shifted moving frames.

    Overlap-restricted NCC for every integer shift is obtained from FFT
    cross-correlations of the images, their squares and the domain
    indicator. The fixed-frame transforms are computed once and reused.
    """

    def __init__(self, fixed: np.ndarray, max_shift: int):
        self.shape = fixed.shape
        self.max_shift = int(max_shift)
        self.fft_shape = tuple(
            scipy.fft.next_fast_len(n + self.max_shift, real=True) for n in self.shape
        )
        f = fixed - fixed.mean()
        if not np.any(f):
            raise DegenerateImage("fixed image has zero variance")
        self._f_hat = self._rfft(f)
        self._ff_hat = self._rfft(f * f)
        self._one_hat = self._rfft(np.ones(self.shape))
        # overlap voxel count for each shift, separable per axis
        count = np.ones([1] * len(self.shape))
        for ax, n in enumerate(self.shape):
            s = np.arange(-self.max_shift, self.max_shift + 1)
            c = np.clip(n - np.abs(s), 0, None).astype(np.float64)
            count = count * c.reshape([-1 if a == ax else 1 for a in range(len(self.shape))])
        self._count = count
        # keep at least half of each axis overlapping
        self.limits = tuple(min(self.max_shift, (n - 1) // 2) for n in self.shape)
        self._sf = self._corr(self._f_hat, self._one_hat)
        self._sff = self._corr(self._ff_hat, self._one_hat)

    def _rfft(self, a):
        return scipy.fft.rfftn(a, s=self.fft_shape)

    def _corr(self, a_hat, b_hat):
        # c[s] = sum_x a[x] b[x + s], wrapped onto the padded grid
        full = scipy.fft.irfftn(np.conj(a_hat) * b_hat, s=self.fft_shape)
        idx = np.arange(-self.max_shift, self.max_shift + 1)
        return full[np.ix_(*[idx % n for n in self.fft_shape])]

    def ncc(self, moving: np.ndarray) -> np.ndarray:
        """NCC for shifts in [-max_shift, max_shift]^3, indexed by shift + max_shift."""
        if moving.shape != self.shape:
            raise GeometryMismatch("moving and fixed frames differ in shape")
        m = moving - moving.mean()
        if not np.any(m):
            raise DegenerateImage("moving image has zero variance")
        m_hat = self._rfft(m)
        mm_hat = self._rfft(m * m)
        n = self._count
        sf, sff = self._sf, self._sff
        sm = self._corr(self._one_hat, m_hat)
        smm = self._corr(self._one_hat, mm_hat)
        sfm = self._corr(self._f_hat, m_hat)
        with np.errstate(invalid="ignore", divide="ignore"):
            var_f = np.maximum(sff - sf * sf / n, 0.0)
            var_m = np.maximum(smm - sm * sm / n, 0.0)
            cov = sfm - sf * sm / n
            out = cov / np.sqrt(var_f * var_m)
        out[~np.isfinite(out)] = -np.inf
        return out


def _parabolic_offset(cm: float, c0: float, cp: float) -> float:
    denom = cm - 2.0 * c0 + cp
    # a flat or convex neighbourhood carries no sub-voxel information
    if not np.isfinite(denom) or denom >= -1e-9:
        return 0.0
    return float(np.clip(0.5 * (cm - cp) / denom, -0.5, 0.5))


NCC_TIE_TOL = 1e-9


def _best_index(scores: np.ndarray, limits) -> tuple:
    """Argmax of the NCC over the allowed window, preferring the smallest shift on ties.

    Structures that are invariant along an axis (few identical slices) give
    equal NCC for every shift along it; the tie rule keeps such frames in place.
    """
    ms = (scores.shape[0] - 1) // 2
    offsets = np.indices(scores.shape) - ms
    allowed = np.ones(scores.shape, dtype=bool)
    for ax, lim in enumerate(limits):
        allowed &= np.abs(offsets[ax]) <= lim
    work = np.where(allowed, scores, -np.inf)
    top = work.max()
    if not np.isfinite(top):
        raise DegenerateImage("no finite correlation in the search window")
    near = np.flatnonzero(work.ravel() >= top - NCC_TIE_TOL)
    dist = (offsets.reshape(scores.ndim, -1)[:, near] ** 2).sum(axis=0)
    return np.unravel_index(near[np.argmin(dist)], scores.shape)


def _estimate_shift(search: _NccSearch, moving: np.ndarray) -> np.ndarray:
    scores = search.ncc(moving)
    best = _best_index(scores, search.limits)
    shift = np.array(best, dtype=np.float64) - search.max_shift
    for ax in range(scores.ndim):
        i = best[ax]
        lim = search.limits[ax]
        if search.max_shift - lim < i < search.max_shift + lim:
            lo = list(best)
            hi = list(best)
            lo[ax] -= 1
            hi[ax] += 1
            delta = _parabolic_offset(scores[tuple(lo)], scores[best], scores[tuple(hi)])
            # sub-1e-3 voxel corrections are below resampling precision
            if abs(delta) >= 1e-3:
                shift[ax] += delta
    return shift


def _apply_shift(moving: np.ndarray, shift: np.ndarray) -> np.ndarray:
    if not np.any(shift):
        return moving
    return ndimage.shift(moving, -shift, order=1, mode="nearest")


def register_translation(moving: Volume3D, fixed: Volume3D, max_shift: int = 5):
    """Align ``moving`` to ``fixed`` by a translation.

    Returns ``(shift, registered)`` where ``shift`` (voxels) is the offset
    of the moving content relative to the fixed frame, i.e.
    ``moving[x] ~ fixed[x - shift]``.
    """
    if moving.dims != fixed.dims:
        raise GeometryMismatch(f"moving {moving.dims} vs fixed {fixed.dims}")
    search = _NccSearch(np.asarray(fixed.data, dtype=np.float64), max_shift)
    shift = _estimate_shift(search, np.asarray(moving.data, dtype=np.float64))
    registered = moving.with_data(_apply_shift(moving.data, shift))
    return tuple(float(s) for s in shift), registered


def motion_correct_with_shifts(vol: Volume4D, cfg: PreprocessConfig = PreprocessConfig()):
    """Register every frame to frame 0; returns ``(volume, per-frame shifts)``."""
    zero = (0.0, 0.0, 0.0)
    if cfg.registration == "off":
        return vol, [zero] * vol.n_frames
    if vol.n_frames < 2:
        raise ValueError("motion correction needs at least 2 frames")
    search = _NccSearch(np.asarray(vol.data[..., 0], dtype=np.float64), cfg.max_shift_voxels)
    out = np.empty_like(vol.data)
    out[..., 0] = vol.data[..., 0]
    shifts = [zero]
    for t in range(1, vol.n_frames):
        frame = np.asarray(vol.data[..., t], dtype=np.float64)
        shift = _estimate_shift(search, frame)
        out[..., t] = _apply_shift(frame, shift)
        shifts.append(tuple(float(s) for s in shift))
    return vol.with_data(out), shifts


def motion_correct(vol: Volume4D, cfg: PreprocessConfig = PreprocessConfig()) -> Volume4D:
    return motion_correct_with_shifts(vol, cfg)[0]


# ---------------------------------------------------------------- smoothing


def gaussian_smooth(vol: Volume4D, cfg: PreprocessConfig = PreprocessConfig()) -> Volume4D:
    """Spatial Gaussian smoothing of every frame (no temporal smoothing).

    Sigma is given in mm and converted per axis; kernels are truncated at
    ceil(3 sigma) voxels with reflective edges.
    """
    if cfg.smooth_sigma_mm == 0:
        return vol
    sigmas = [cfg.smooth_sigma_mm / s for s in vol.spacing]
    radii = [int(math.ceil(3 * s)) for s in sigmas]
    sigma = sigmas + [0.0] * (vol.data.ndim - 3)
    radius = radii + [0] * (vol.data.ndim - 3)
    data = ndimage.gaussian_filter(
        np.asarray(vol.data, dtype=np.float64), sigma=sigma, mode="reflect", radius=radius
    )
    return vol.with_data(data)
