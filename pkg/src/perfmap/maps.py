"""Perfusion maps from the flow-scaled residue field."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .deconvolution import ResidueField
from .errors import GeometryMismatch
from .nifti_io import Mask3D, Volume3D, write_nifti

MAP_NAMES = ("cbf", "cbv", "mtt", "ttp", "tmax")
UNITS = {"cbf": "1/s (relative)", "cbv": "relative", "mtt": "s", "ttp": "s", "tmax": "s"}


@dataclass(frozen=True)
class MapsConfig:
    clamp_negative_k: bool = True
    cbf_floor: float | None = None  # None: 1e-6 of the CBF 99th percentile
    scale_cbf: float = 1.0
    scale_cbv: float = 1.0
    scale_mtt: float = 1.0

    def __post_init__(self):
        if self.cbf_floor is not None and self.cbf_floor < 0:
            raise ValueError("maps.cbf_floor must be >= 0")
        for name in ("scale_cbf", "scale_cbv", "scale_mtt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"maps.{name} must be positive")


@dataclass(frozen=True)
class PerfusionMaps:
    cbf: Volume3D
    cbv: Volume3D
    mtt: Volume3D
    ttp: Volume3D
    tmax: Volume3D
    validity: Mask3D

    def items(self):
        return [(name, getattr(self, name)) for name in MAP_NAMES]

    def write(self, out_dir) -> list:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, vol in self.items() + [("validity", self.validity)]:
            path = os.path.join(out_dir, f"{name}.nii.gz")
            write_nifti(vol, path)
            paths.append(path)
        return paths


def _like(res: ResidueField, data) -> Volume3D:
    return Volume3D(data, res.mask.spacing, res.mask.affine)


def cbf_map(res: ResidueField) -> Volume3D:
    m = res.mask.data
    out = np.zeros(m.shape)
    out[m] = res.k[m].max(axis=1)
    return _like(res, out)


def tmax_map(res: ResidueField) -> Volume3D:
    """Time of the residue peak; np.argmax takes the earliest index on ties."""
    m = res.mask.data
    out = np.zeros(m.shape)
    out[m] = np.argmax(res.k[m], axis=1) * res.dt
    return _like(res, out)


def cbv_map(res: ResidueField, clamp_negative: bool = True) -> Volume3D:
    m = res.mask.data
    k = res.k[m]
    if clamp_negative:
        k = np.maximum(k, 0.0)
    out = np.zeros(m.shape)
    out[m] = np.maximum(np.trapezoid(k, dx=res.dt, axis=1), 0.0)
    return _like(res, out)


def default_cbf_floor(cbf: np.ndarray) -> float:
    pos = cbf[np.isfinite(cbf) & (cbf > 0)]
    if pos.size == 0:
        return 0.0
    return 1e-6 * float(np.percentile(pos, 99))


def mtt_map(cbv: Volume3D, cbf: Volume3D, cbf_floor: float | None = None) -> Volume3D:
    """CBV / CBF where CBF exceeds the floor, 0 elsewhere."""
    if cbv.dims != cbf.dims:
        raise GeometryMismatch(f"cbv {cbv.dims} vs cbf {cbf.dims}")
    floor = default_cbf_floor(cbf.data) if cbf_floor is None else cbf_floor
    ok = cbf.data > floor
    out = np.zeros(cbf.dims)
    out[ok] = cbv.data[ok] / cbf.data[ok]
    return cbf.with_data(out)


def assemble_maps(res: ResidueField, ttp: Volume3D, cfg: MapsConfig = MapsConfig()) -> PerfusionMaps:
    if ttp.dims != res.mask.dims:
        raise GeometryMismatch(f"ttp {ttp.dims} vs residue {res.mask.dims}")
    cbf = cbf_map(res)
    cbv = cbv_map(res, cfg.clamp_negative_k)
    floor = default_cbf_floor(cbf.data) if cfg.cbf_floor is None else cfg.cbf_floor
    mtt = mtt_map(cbv, cbf, floor)
    tmax = tmax_map(res)
    valid = res.mask.data & (cbf.data > floor)
    for vol in (cbf, cbv, mtt, tmax, ttp):
        valid &= np.isfinite(vol.data)
    for vol in (cbf, cbv, mtt, tmax):
        vol.data[~valid] = 0.0
    ttp_data = np.where(res.mask.data, ttp.data, 0.0)
    return PerfusionMaps(
        cbf=cbf.with_data(cbf.data * cfg.scale_cbf),
        cbv=cbv.with_data(cbv.data * cfg.scale_cbv),
        mtt=mtt.with_data(mtt.data * cfg.scale_mtt),
        ttp=ttp.with_data(ttp_data),
        tmax=tmax,
        validity=Mask3D.like(res.mask, valid),
    )
