"""Masked structural-similarity comparison of perfusion maps.

Local statistics use a uniform ``window x window`` box per axial slice (or
a cube with ``ssim_3d``). Only windows lying entirely inside the mask
contribute. Intensities are measured from the reference map's minimum over
the whole volume (its background level for perfusion maps), which makes the
index invariant to a constant added to both inputs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateRange, EmptyMask, GeometryMismatch, MissingMap
from .maps import MAP_NAMES
from .nifti_io import Mask3D, Volume3D, read_volume3d


@dataclass(frozen=True)
class SsimParams:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    pooled_range: bool = False
    ssim_3d: bool = False

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("validation.window must be a positive odd integer")
        if not (self.k1 > 0 and self.k2 > 0):
            raise ValueError("validation.k1 and validation.k2 must be positive")


@dataclass(frozen=True)
class SsimResult:
    value: float
    per_slice: dict  # slice index -> mean SSIM over that slice's valid windows
    n_windows: int


@dataclass
class SsimReport:
    values: dict = field(default_factory=dict)
    per_slice: dict = field(default_factory=dict)
    names: tuple = MAP_NAMES
    params: SsimParams = SsimParams()

    def to_text(self) -> str:
        p = self.params
        lines = [f"# ssim window={p.window} k1={p.k1!r} k2={p.k2!r} "
                 f"pooled_range={str(p.pooled_range).lower()} ssim_3d={str(p.ssim_3d).lower()}"]
        for name in self.names:
            lines.append(f"{name} {self.values[name]:.6f} {len(self.per_slice[name])}")
        return "\n".join(lines) + "\n"


def _mask_array(mask, shape) -> np.ndarray:
    m = mask.data if isinstance(mask, Volume3D) else np.asarray(mask)
    if m.shape != shape:
        raise GeometryMismatch(f"mask {m.shape} vs maps {shape}")
    return m.astype(bool)


def _local_ssim(a, b, valid_mask, window, c1, c2, axes):
    """Local SSIM at every fully in-mask window; returns (values, centre indices)."""
    shape = tuple(window if i in axes else 1 for i in range(a.ndim))
    ax = tuple(range(a.ndim, 2 * a.ndim))
    if any(w > n for w, n in zip(shape, a.shape)):
        return np.empty(0), np.empty((0, a.ndim), dtype=np.int64)
    wa = sliding_window_view(a, shape)
    wb = sliding_window_view(b, shape)
    wm = sliding_window_view(valid_mask, shape)
    inside = wm.all(axis=ax)
    if not inside.any():
        return np.empty(0), np.empty((0, a.ndim), dtype=np.int64)
    xa, xb = wa[inside], wb[inside]
    flat = (xa.shape[0], -1)
    xa, xb = xa.reshape(flat), xb.reshape(flat)
    mu_a, mu_b = xa.mean(axis=1), xb.mean(axis=1)
    var_a = (xa * xa).mean(axis=1) - mu_a * mu_a
    var_b = (xb * xb).mean(axis=1) - mu_b * mu_b
    cov = (xa * xb).mean(axis=1) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den, np.argwhere(inside)


def ssim_detail(a: Volume3D, b: Volume3D, mask, params: SsimParams = SsimParams()) -> SsimResult:
    """SSIM of ``a`` against the reference ``b`` inside ``mask``."""
    ad, bd = np.asarray(a.data, dtype=np.float64), np.asarray(b.data, dtype=np.float64)
    if ad.shape != bd.shape or ad.ndim != 3:
        raise GeometryMismatch(f"map shapes differ: {ad.shape} vs {bd.shape}")
    m = _mask_array(mask, ad.shape)
    if not m.any():
        raise EmptyMask("SSIM mask is empty")
    pool = np.concatenate([ad[m], bd[m]]) if params.pooled_range else bd[m]
    dr = np.ptp(pool)
    lo = min(ad.min(), bd.min()) if params.pooled_range else bd.min()
    if not dr > 0:
        raise DegenerateRange("reference map is constant inside the mask")
    ad, bd = ad - lo, bd - lo
    c1, c2 = (params.k1 * dr) ** 2, (params.k2 * dr) ** 2
    axes = (0, 1, 2) if params.ssim_3d else (0, 1)
    vals, idx = _local_ssim(ad, bd, m, params.window, c1, c2, axes)
    if vals.size == 0:
        raise EmptyMask(f"no {params.window}-voxel window lies fully inside the mask")
    half = params.window // 2
    z = idx[:, 2] + (half if params.ssim_3d else 0)
    per_slice = {int(s): float(vals[z == s].mean()) for s in np.unique(z)}
    return SsimResult(float(vals.mean()), per_slice, int(vals.size))


def ssim(a: Volume3D, b: Volume3D, mask, window: int = 7, k1: float = 0.01, k2: float = 0.03,
         pooled_range: bool = False, ssim_3d: bool = False) -> float:
    return ssim_detail(a, b, mask, SsimParams(window, k1, k2, pooled_range, ssim_3d)).value


def load_maps(directory) -> dict:
    out = {}
    for name in MAP_NAMES:
        path = os.path.join(directory, f"{name}.nii.gz")
        if not os.path.isfile(path):
            raise MissingMap(f"missing map file {path}")
        out[name] = read_volume3d(path)
    return out


def compare_maps(maps: dict, refs: dict, mask, params: SsimParams = SsimParams()) -> SsimReport:
    report = SsimReport(params=params)
    for name in MAP_NAMES:
        res = ssim_detail(maps[name], refs[name], mask, params)
        report.values[name] = res.value
        report.per_slice[name] = res.per_slice
    return report


def compare_runs(out_dir, ref_dir, mask, params: SsimParams = SsimParams()) -> SsimReport:
    """Per-map SSIM of the maps in ``out_dir`` against those in ``ref_dir``."""
    maps, refs = load_maps(out_dir), load_maps(ref_dir)
    if not isinstance(mask, Volume3D):
        vol = read_volume3d(mask)
        mask = Mask3D(vol.data != 0, vol.spacing, vol.affine)
    return compare_maps(maps, refs, mask, params)
