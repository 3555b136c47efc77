"""Brain mask generation for CT and MR perfusion, or loading a user mask."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import EmptyMask, GeometryMismatch, NoSkullFound
from .nifti_io import Mask3D, Volume4D, read_volume3d

CONN26 = np.ones((3, 3, 3), dtype=bool)
CONN6 = ndimage.generate_binary_structure(3, 1)
MIN_SKULL_VOXELS = 1000
SEED_SEARCH_RADIUS = 10


@dataclass(frozen=True)
class MaskConfig:
    mode: str = "auto"
    path: str | None = None
    hu_lo: float = 0.0
    hu_hi: float = 100.0
    bone_hu: float = 300.0

    def __post_init__(self):
        if self.mode not in ("auto", "file"):
            raise ValueError("mask.mode must be 'auto' or 'file'")
        if self.mode == "file" and not self.path:
            raise ValueError("mask.mode = file requires mask.path")
        if self.hu_lo > self.hu_hi:
            raise ValueError("mask.hu_lo must not exceed mask.hu_hi")
        if self.bone_hu <= self.hu_hi:
            raise ValueError("mask.bone_hu must exceed mask.hu_hi")


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1]
    return (g**2).sum(axis=0) <= r * r


def largest_component(mask: np.ndarray, structure=CONN26) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _pad_apply(op, mask: np.ndarray, radius: int) -> np.ndarray:
    # pad so that closing/opening does not see the array edge as background
    padded = np.pad(mask, radius + 1, mode="constant")
    out = op(padded, structure=ball(radius))
    sl = tuple(slice(radius + 1, -(radius + 1)) for _ in range(mask.ndim))
    return out[sl]


def close(mask: np.ndarray, radius: int) -> np.ndarray:
    return _pad_apply(ndimage.binary_closing, mask, radius)


def open_(mask: np.ndarray, radius: int) -> np.ndarray:
    return _pad_apply(ndimage.binary_opening, mask, radius)


def fill_holes_per_slice(mask: np.ndarray) -> np.ndarray:
    out = np.empty_like(mask, dtype=bool)
    for z in range(mask.shape[2]):
        out[..., z] = ndimage.binary_fill_holes(mask[..., z])
    return out


def _find_seed(band: np.ndarray, seed: tuple):
    if band[seed]:
        return seed
    r = SEED_SEARCH_RADIUS
    lo = [max(0, s - r) for s in seed]
    hi = [min(n, s + r + 1) for s, n in zip(seed, band.shape)]
    sub = band[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    idx = np.argwhere(sub)
    if idx.size == 0:
        return None
    idx = idx + np.array(lo)
    d2 = ((idx - np.array(seed)) ** 2).sum(axis=1)
    keep = d2 <= r * r
    if not keep.any():
        return None
    idx, d2 = idx[keep], d2[keep]
    # argwhere is in C order, so the stable sort breaks distance ties by index
    return tuple(int(v) for v in idx[np.argsort(d2, kind="stable")[0]])


def brain_mask_ct(vol: Volume4D, hu_lo=0.0, hu_hi=100.0, bone_hu=300.0) -> Mask3D:
    """Skull-bounded soft-tissue mask from a CT perfusion series.

    The largest bone component is taken as the skull; soft-tissue voxels
    inside it are flood-filled (6-connected) from a seed near the skull's
    bounding-box centre, then closed and reduced to one component.
    """
    mean = vol.data.mean(axis=3)
    bone = mean >= bone_hu
    skull = largest_component(bone)
    if skull.sum() < MIN_SKULL_VOXELS:
        raise NoSkullFound(
            f"largest bone component has {int(skull.sum())} voxels (< {MIN_SKULL_VOXELS})"
        )
    interior = ndimage.binary_fill_holes(skull) | fill_holes_per_slice(skull)
    interior &= ~skull
    band = (mean >= hu_lo) & (mean <= hu_hi) & interior
    idx = np.argwhere(skull)
    centre = tuple(int(v) for v in np.round((idx.min(axis=0) + idx.max(axis=0)) / 2.0))
    seed = _find_seed(band, centre)
    if seed is None:
        raise EmptyMask("no soft-tissue voxel near the skull centre")
    labels, _ = ndimage.label(band, structure=CONN6)
    grown = labels == labels[seed]
    grown = close(grown, 2) & ~bone
    mask = largest_component(grown)
    if not mask.any():
        raise EmptyMask("CT brain mask is empty")
    return Mask3D.like(vol, mask)


def brain_mask_mr(vol: Volume4D) -> Mask3D:
    """Otsu foreground of the temporal mean, cleaned up morphologically."""
    mean = vol.data.mean(axis=3)
    if np.ptp(mean) == 0:
        raise EmptyMask("constant image: Otsu threshold is undefined")
    fg = mean > threshold_otsu(mean)
    mask = largest_component(fg)
    mask = close(mask, 2)
    mask = open_(mask, 1)
    mask = fill_holes_per_slice(mask)
    mask = largest_component(mask)
    if not mask.any():
        raise EmptyMask("MR brain mask is empty")
    return Mask3D.like(vol, mask)


def load_mask(path, geometry: Volume4D) -> Mask3D:
    vol = read_volume3d(path)
    if vol.dims != tuple(geometry.dims):
        raise GeometryMismatch(f"mask {path} has dims {vol.dims}, volume has {tuple(geometry.dims)}")
    return Mask3D(vol.data != 0, vol.spacing, vol.affine)


def make_mask(vol: Volume4D, cfg: MaskConfig) -> Mask3D:
    if cfg.mode == "file":
        return load_mask(cfg.path, vol)
    if vol.modality.value == "CTP":
        return brain_mask_ct(vol, cfg.hu_lo, cfg.hu_hi, cfg.bone_hu)
    return brain_mask_mr(vol)
