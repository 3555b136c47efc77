"""Truncated-SVD deconvolution of tissue curves against the arterial input.

The recovered quantity is the flow-scaled residue function
``k(t) = CBF * R(t)``; its maximum is CBF and its integral CBV.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .bolus_ctc import CtcField, TimeSeries
from .errors import ZeroAif, ZeroSignal
from .nifti_io import Mask3D

METHODS = ("ssvd", "csvd_simpson", "csvd_manual", "osvd")
DEFAULT_LAMBDA = {"ssvd": 0.2, "csvd_simpson": 0.1, "csvd_manual": 0.1, "osvd": None}
DEFAULT_LAMBDA_GRID = tuple(round(0.05 * i, 2) for i in range(20))


@dataclass(frozen=True)
class DeconvConfig:
    method: str = "ssvd"
    lam: float | None = None  # None: per-method default
    oi_threshold: float = 0.035
    pad_factor: int = 2
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"deconv.method must be one of {METHODS}")
        if self.lam is not None and not (0 <= self.lam < 1):
            raise ValueError("deconv.lambda must lie in [0, 1)")
        if not self.oi_threshold > 0:
            raise ValueError("deconv.oi_threshold must be positive")
        if self.pad_factor < 1:
            raise ValueError("deconv.pad_factor must be >= 1")
        grid = tuple(float(v) for v in self.lambda_grid)
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 0 or grid[-1] >= 1:
            raise ValueError("deconv.lambda_grid must be ascending values in [0, 1)")
        object.__setattr__(self, "lambda_grid", grid)

    @property
    def effective_lambda(self) -> float | None:
        return self.lam if self.lam is not None else DEFAULT_LAMBDA[self.method]


@dataclass(frozen=True)
class ConvolutionSystem:
    matrix: np.ndarray
    dt: float
    method: str
    kernel: np.ndarray
    n_frames: int

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    n_frames: int

    @classmethod
    def of(cls, system: ConvolutionSystem) -> "SvdFactors":
        u, s, vt = np.linalg.svd(system.matrix)
        return cls(u, s, vt, system.n_frames)

    @property
    def size(self) -> int:
        return self.s.size

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


@dataclass(frozen=True)
class ResidueField:
    k: np.ndarray  # (nx, ny, nz, T), units 1/s
    dt: float
    mask: Mask3D
    quality: dict = field(default_factory=dict)


def _toeplitz(kernel: np.ndarray, dt: float) -> np.ndarray:
    n = kernel.size
    i, j = np.indices((n, n))
    return np.where(i >= j, dt * kernel[np.clip(i - j, 0, n - 1)], 0.0)


def build_toeplitz(aif: TimeSeries) -> ConvolutionSystem:
    """Lower-triangular rectangle-rule convolution matrix ``dt * aif[i - j]``."""
    a = aif.values
    if a.size < 3:
        raise ValueError("AIF needs at least 3 samples")
    return ConvolutionSystem(_toeplitz(a, aif.dt), aif.dt, "ssvd", a.copy(), a.size)


def simpson_kernel(a: np.ndarray) -> np.ndarray:
    padded = np.concatenate([[0.0], a, [0.0]])
    return (padded[:-2] + 4.0 * padded[1:-1] + padded[2:]) / 6.0


def build_simpson(aif: TimeSeries, pad_factor: int = 2) -> ConvolutionSystem:
    """Block-circulant system on the (1, 4, 1)/6 smoothed AIF kernel."""
    a = aif.values
    if a.size < 3:
        raise ValueError("AIF needs at least 3 samples")
    kern = simpson_kernel(a)
    toep = ConvolutionSystem(_toeplitz(kern, aif.dt), aif.dt, "csvd_simpson", kern, a.size)
    return build_circulant(toep, pad_factor)


def build_circulant(system: ConvolutionSystem, pad_factor: int = 2) -> ConvolutionSystem:
    """Zero-pad the Toeplitz kernel to ``pad_factor * T`` and wrap it circularly."""
    n = system.n_frames
    size = pad_factor * n
    col = np.zeros(size)
    col[:n] = system.dt * system.kernel
    i, j = np.indices((size, size))
    matrix = col[(i - j) % size]
    method = system.method if system.method != "ssvd" else "csvd_manual"
    return ConvolutionSystem(matrix, system.dt, method, system.kernel, n)


def build_system(aif: TimeSeries, method: str, pad_factor: int = 2) -> ConvolutionSystem:
    if method == "ssvd":
        return build_toeplitz(aif)
    if method == "csvd_simpson":
        return build_simpson(aif, pad_factor)
    return build_circulant(build_toeplitz(aif), pad_factor)


def retained_count(s: np.ndarray, lam: float) -> int:
    """Number of singular values kept at relative threshold ``lam``.

    ``lam = 0`` still drops values below the machine floor ``L * eps * s_max``.
    """
    if s[0] <= 0:
        raise ZeroAif("AIF system has no non-zero singular value")
    floor = s.size * np.finfo(np.float64).eps
    return int(np.count_nonzero(s >= max(lam, floor) * s[0]))


def _pad(c: np.ndarray, size: int) -> np.ndarray:
    if c.shape[-1] == size:
        return c
    out = np.zeros(c.shape[:-1] + (size,))
    out[..., : c.shape[-1]] = c
    return out


def _coefficients(factors: SvdFactors, c: np.ndarray) -> np.ndarray:
    """(..., L) curves -> (..., L) coefficients u_i.c / s_i (zero below the floor)."""
    r = retained_count(factors.s, 0.0)
    coef = np.zeros(c.shape[:-1] + (factors.size,))
    coef[..., :r] = (c @ factors.u[:, :r]) / factors.s[:r]
    return coef


def deconvolve_voxel(ctc_voxel, factors: SvdFactors, lam: float) -> np.ndarray:
    """Truncated-SVD solution ``V diag(1/s_i) U^T c`` over the kept components.

    Input shorter than the system is zero-padded; the result is cut back to
    the curve length.
    """
    c = np.asarray(ctc_voxel, dtype=np.float64)
    n = c.shape[-1]
    c = _pad(c, factors.size)
    r = retained_count(factors.s, lam)
    k = factors.vt[:r].T @ ((factors.u[:, :r].T @ c) / factors.s[:r])
    return k[:n]


def oscillation_index(k) -> float:
    """Mean absolute second difference of ``k`` relative to its peak magnitude."""
    k = np.asarray(k, dtype=np.float64)
    if k.size < 3:
        raise ValueError("oscillation index needs at least 3 samples")
    peak = np.abs(k).max()
    if peak == 0:
        raise ZeroSignal("oscillation index of an all-zero curve is undefined")
    return float(np.abs(k[2:] - 2.0 * k[1:-1] + k[:-2]).sum() / (k.size * peak))


class OsvdVoxel(NamedTuple):
    k: np.ndarray
    lam: float
    converged: bool


def _grid_ranks(s: np.ndarray, grid) -> np.ndarray:
    return np.array([retained_count(s, lam) for lam in grid], dtype=np.int64)


def deconvolve_osvd(ctc_voxel, factors: SvdFactors, oi_threshold: float = 0.035,
                    lambda_grid=DEFAULT_LAMBDA_GRID) -> OsvdVoxel:
    """Smallest grid lambda whose solution has an oscillation index within threshold.

    When no lambda qualifies, the largest-lambda solution is returned with
    ``converged=False``.
    """
    c = np.asarray(ctc_voxel, dtype=np.float64)
    n = c.shape[-1]
    coef = _coefficients(factors, _pad(c, factors.size))[np.newaxis]
    ranks = _grid_ranks(factors.s, lambda_grid)
    basis = factors.vt.T[:n]
    k, choice, conv = kernels.osvd_select(coef, basis, ranks, oi_threshold)
    return OsvdVoxel(k[0], float(lambda_grid[choice[0]]), bool(conv[0]))


def deconvolve_curves(curves: np.ndarray, factors: SvdFactors, cfg: DeconvConfig):
    """Deconvolve an (N, T) block of curves. Returns (k, quality)."""
    n = curves.shape[1]
    c = _pad(curves, factors.size)
    if cfg.method == "osvd":
        coef = _coefficients(factors, c)
        ranks = _grid_ranks(factors.s, cfg.lambda_grid)
        k, choice, conv = kernels.osvd_select(coef, factors.vt.T[:n], ranks, cfg.oi_threshold)
        quality = {
            "osvd_unconverged_voxels": int((~conv).sum()),
            "osvd_lambda_histogram": np.bincount(choice, minlength=ranks.size).tolist(),
        }
        return k, quality
    lam = cfg.effective_lambda
    r = retained_count(factors.s, lam)
    # pseudo-inverse restricted to the output rows, applied to all voxels at once
    pinv = (factors.vt[:r].T[:n] / factors.s[:r]) @ factors.u[:, :r].T
    return c @ pinv.T, {"retained_singular_values": r}


def deconvolve_volume(ctc: CtcField, aif: TimeSeries, cfg: DeconvConfig = DeconvConfig(),
                      chunk: int = 65536) -> ResidueField:
    """Apply one factorisation of the AIF system to every in-mask voxel."""
    if len(aif) != ctc.n_frames:
        raise ValueError(f"AIF has {len(aif)} samples, CTC has {ctc.n_frames}")
    system = build_system(aif, cfg.method, cfg.pad_factor)
    factors = SvdFactors.of(system)
    if factors.s[0] <= 0:
        raise ZeroAif("AIF is identically zero")
    m = ctc.mask.data
    k = np.zeros(ctc.curves.shape)
    curves = ctc.curves[m]
    quality: dict = {}
    out = np.empty_like(curves)
    for start in range(0, curves.shape[0], chunk):
        block, q = deconvolve_curves(curves[start : start + chunk], factors, cfg)
        out[start : start + chunk] = block
        for key, val in q.items():
            if isinstance(val, list):
                prev = quality.get(key, [0] * len(val))
                quality[key] = [a + b for a, b in zip(prev, val)]
            elif key.startswith("osvd"):
                quality[key] = quality.get(key, 0) + val
            else:
                quality[key] = val
    k[m] = out
    quality["method"] = cfg.method
    return ResidueField(k, ctc.dt, ctc.mask, quality)
