"""Synthetic perfusion phantoms with analytically known hemodynamics.

Tissue concentration follows the discrete indicator-dilution model

    c(t_n) = cbf * dt * sum_m AIF(t_n - delay - t_m) * R(t_m)

with an exponential (or box) residue function. Arterial voxels carry the
AIF itself, which corresponds to an impulse residue ``k = [1/dt, 0, ...]``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .aif import GammaFit
from .bolus_ctc import TimeSeries
from .errors import SpecInvalid
from .maps import PerfusionMaps
from .nifti_io import Mask3D, Modality, Volume3D, Volume4D, write_nifti

RESIDUES = ("exp", "box")


@dataclass
class Region:
    mask: np.ndarray
    cbf: float
    mtt: float
    delay: float = 0.0
    name: str = ""


@dataclass
class PhantomSpec:
    dims: tuple
    brain: np.ndarray
    arterial: np.ndarray
    regions: list
    dt: float = 1.0
    n_frames: int = 50
    n_baseline: int = 10
    spacing: tuple = (2.0, 2.0, 5.0)
    aif_params: GammaFit = GammaFit(300.0, -1.0, 1.5, 0.75)
    noise_sigma: float = 0.0
    seed: int = 0
    modality: Modality = Modality.CTP
    s0: float = 40.0
    echo_time: float | None = None
    residue: str = "exp"
    background: float = -1000.0
    skull: np.ndarray | None = field(default=None, repr=False)
    skull_value: float = 1000.0

    def validate(self) -> None:
        dims = tuple(self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise SpecInvalid(f"bad dims {dims}")
        for name in ("brain", "arterial"):
            if getattr(self, name).shape != dims:
                raise SpecInvalid(f"{name} mask shape does not match dims")
        if not self.dt > 0:
            raise SpecInvalid("dt must be positive")
        if not (1 <= self.n_baseline < self.n_frames):
            raise SpecInvalid("need 1 <= n_baseline < n_frames")
        if self.residue not in RESIDUES:
            raise SpecInvalid(f"residue must be one of {RESIDUES}")
        if self.noise_sigma < 0:
            raise SpecInvalid("noise_sigma must be >= 0")
        a = self.aif_params
        if not (a.amplitude > 0 and a.alpha > 0 and a.beta > 0 and a.t0 >= -self.dt):
            raise SpecInvalid("AIF needs A, alpha, beta > 0 and t0 >= -dt")
        modality = Modality.parse(self.modality)
        if modality is Modality.MRP and not (self.echo_time and self.echo_time > 0):
            raise SpecInvalid("MR phantom needs a positive echo_time")
        if modality is Modality.MRP and not self.s0 > 0:
            raise SpecInvalid("MR phantom needs a positive baseline s0")
        used = self.arterial.copy()
        if not self.arterial.any():
            raise SpecInvalid("arterial region is empty")
        for r in self.regions:
            if r.mask.shape != dims:
                raise SpecInvalid(f"region {r.name!r} shape does not match dims")
            if not (r.cbf > 0 and r.mtt > 0 and r.delay >= 0):
                raise SpecInvalid(f"region {r.name!r} needs cbf > 0, mtt > 0, delay >= 0")
            if (used & r.mask).any():
                raise SpecInvalid(f"region {r.name!r} overlaps another region")
            used |= r.mask
        if (used & ~self.brain).any():
            raise SpecInvalid("regions must lie inside the brain mask")
        if self.skull is not None and (self.skull & self.brain).any():
            raise SpecInvalid("skull overlaps the brain")

    @property
    def times(self) -> np.ndarray:
        """Frame times relative to the first post-baseline frame."""
        return (np.arange(self.n_frames) - self.n_baseline) * self.dt


class Phantom(NamedTuple):
    volume: Volume4D
    mask: Mask3D
    truth: PerfusionMaps
    aif: TimeSeries


def residue_curve(t, mtt: float, kind: str = "exp") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if kind == "exp":
        r = np.exp(-t / mtt)
    else:
        r = (t < mtt).astype(np.float64)
    return np.where(t >= 0, r, 0.0)


def tissue_curve(spec: PhantomSpec, cbf: float, mtt: float, delay: float) -> np.ndarray:
    """Concentration in one tissue region over all frames (zero before arrival)."""
    t = spec.times
    post = t >= 0
    tp = t[post]
    # lag matrix: AIF(t_n - delay - t_m) * R(t_m), summed over m <= n
    lag = tp[:, None] - delay - tp[None, :]
    aif = spec.aif_params(lag.ravel()).reshape(lag.shape)
    r = residue_curve(tp, mtt, spec.residue)
    c = np.zeros(t.size)
    c[post] = cbf * spec.dt * (aif * r[None, :]).sum(axis=1)
    return c


def truncated_cbv(spec: PhantomSpec, cbf: float, mtt: float, delay: float) -> float:
    window = (spec.n_frames - spec.n_baseline) * spec.dt - delay
    if spec.residue == "exp":
        return cbf * mtt * (1.0 - np.exp(-window / mtt))
    return cbf * min(mtt, window)


def generate(spec: PhantomSpec) -> Phantom:
    """Render the 4D signal, brain mask, ground-truth maps and the true AIF."""
    spec.validate()
    modality = Modality.parse(spec.modality)
    dims = tuple(spec.dims)
    t = spec.times
    aif = np.where(t >= 0, spec.aif_params(t), 0.0)
    conc = np.zeros(dims + (spec.n_frames,))
    conc[spec.arterial] = aif
    truth = {name: np.zeros(dims) for name in ("cbf", "cbv", "mtt", "ttp", "tmax")}
    # arterial voxels: impulse residue k = [1/dt, 0, ...]
    truth["cbf"][spec.arterial] = 1.0 / spec.dt
    truth["cbv"][spec.arterial] = 0.5
    truth["mtt"][spec.arterial] = 0.5 * spec.dt
    truth["ttp"][spec.arterial] = (np.argmax(aif) - spec.n_baseline) * spec.dt
    tissue_peak = 0.0
    for r in spec.regions:
        c = tissue_curve(spec, r.cbf, r.mtt, r.delay)
        conc[r.mask] = c
        tissue_peak = max(tissue_peak, float(c.max()))
        cbv = truncated_cbv(spec, r.cbf, r.mtt, r.delay)
        truth["cbf"][r.mask] = r.cbf
        truth["cbv"][r.mask] = cbv
        truth["mtt"][r.mask] = cbv / r.cbf
        truth["tmax"][r.mask] = r.delay
        truth["ttp"][r.mask] = (np.argmax(c) - spec.n_baseline) * spec.dt

    base = np.full(dims, float(spec.background))
    base[spec.brain] = spec.s0
    if spec.skull is not None:
        base[spec.skull] = spec.skull_value
    rng = np.random.default_rng(spec.seed)
    if modality is Modality.CTP:
        signal = base[..., None] + conc
        sigma = spec.noise_sigma * tissue_peak
    else:
        signal = base[..., None] * np.exp(-spec.echo_time * conc)
        sigma = spec.noise_sigma * spec.s0 * (1.0 - np.exp(-spec.echo_time * tissue_peak))
    if sigma > 0:
        signal = signal + rng.normal(0.0, sigma, signal.shape)

    affine = np.diag(list(spec.spacing) + [1.0])
    vol = Volume4D(signal, spec.spacing, affine, spec.dt, modality,
                   spec.echo_time if modality is Modality.MRP else None)
    mask = Mask3D(spec.brain, spec.spacing, affine)
    maps = {k: Volume3D(v, spec.spacing, affine) for k, v in truth.items()}
    gt = PerfusionMaps(validity=mask, **maps)
    return Phantom(vol, mask, gt, TimeSeries(aif, spec.dt, spec.n_baseline))


# ---------------------------------------------------------------- layouts


def _background(modality: Modality, skull: bool) -> float:
    # without a skull, CT air would sit directly against the brain
    if modality is Modality.CTP:
        return -1000.0 if skull else 0.0
    return 10.0


def default_spec(dims=(32, 32, 4), n_frames=50, n_baseline=10, dt=1.0, modality="CTP",
                 noise_sigma=0.0, seed=0, cbf=(0.04, 0.01), mtt=(4.0, 8.0),
                 delay=(0.0, 3.0), arterial_side=7, skull_thickness=0,
                 spacing=(2.0, 2.0, 5.0), residue="exp", echo_time=0.025,
                 aif=None, s0=None, brain_shape="cylinder", arterial_gap=0) -> PhantomSpec:
    """Brain split into left/right tissue halves with a central arterial column.

    The arterial column is a square of ``arterial_side`` voxels through all
    slices, optionally wrapped in an ``arterial_gap``-voxel sheath without
    tracer. ``brain_shape='ellipsoid'`` narrows the brain toward the end
    slices. With ``skull_thickness > 0`` a bone shell surrounds the brain.
    """
    if brain_shape not in ("cylinder", "ellipsoid"):
        raise SpecInvalid("brain_shape must be 'cylinder' or 'ellipsoid'")
    modality = Modality.parse(modality)
    nx, ny, nz = dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    margin = 1 + skull_thickness
    ax_, ay_ = nx / 2.0 - margin, ny / 2.0 - margin
    # the z semi-axis reaches just past the end slices so every slice has brain
    az_ = nz / 2.0 + 1.0
    core = arterial_side / 2.0 + arterial_gap + 1
    if min(ax_, ay_) <= core:
        raise SpecInvalid(f"dims {dims} too small for the requested layout")

    def shape(grow: float) -> np.ndarray:
        rho = ((x - cx) / (ax_ + grow)) ** 2 + ((y - cy) / (ay_ + grow)) ** 2
        if brain_shape == "ellipsoid":
            rho = rho + ((z - cz) / (az_ + grow)) ** 2
        return rho <= 1.0

    brain = shape(0.0)
    skull = shape(float(skull_thickness)) & ~brain if skull_thickness > 0 else None
    lo_x = int(round(cx - (arterial_side - 1) / 2.0))
    lo_y = int(round(cy - (arterial_side - 1) / 2.0))
    arterial = np.zeros(dims, dtype=bool)
    arterial[lo_x : lo_x + arterial_side, lo_y : lo_y + arterial_side, :] = True
    arterial &= brain
    sheath = np.zeros(dims, dtype=bool)
    g = arterial_gap
    sheath[max(0, lo_x - g) : lo_x + arterial_side + g, max(0, lo_y - g) : lo_y + arterial_side + g, :] = True
    tissue = brain & ~sheath
    left = tissue & (x < cx)
    right = tissue & ~left
    regions = [
        Region(left, cbf[0], mtt[0], delay[0], "normal"),
        Region(right, cbf[1], mtt[1], delay[1], "hypoperfused"),
    ]
    if aif is None:
        amp = 300.0 if modality is Modality.CTP else 200.0
        aif = GammaFit(amp, -dt, 1.5, 0.75 * dt)
    if s0 is None:
        s0 = 40.0 if modality is Modality.CTP else 500.0
    return PhantomSpec(
        dims=tuple(dims), brain=brain, arterial=arterial, regions=regions, dt=dt,
        n_frames=n_frames, n_baseline=n_baseline, spacing=tuple(spacing), aif_params=aif,
        noise_sigma=noise_sigma, seed=seed, modality=modality, s0=s0,
        echo_time=echo_time if modality is Modality.MRP else None, residue=residue,
        background=_background(modality, skull is not None), skull=skull,
        skull_value=1000.0 if modality is Modality.CTP else 50.0,
    )


def spec_from_config(values: dict) -> PhantomSpec:
    """Build a layout from ``phantom.*`` keys of a parsed config file."""
    kw = {}
    keymap = {
        "dims": ("dims", lambda v: tuple(int(x) for x in v)),
        "frames": ("n_frames", int),
        "baseline_frames": ("n_baseline", int),
        "dt": ("dt", float),
        "modality": ("modality", str),
        "noise": ("noise_sigma", float),
        "seed": ("seed", int),
        "cbf": ("cbf", lambda v: tuple(float(x) for x in v)),
        "mtt": ("mtt", lambda v: tuple(float(x) for x in v)),
        "delay": ("delay", lambda v: tuple(float(x) for x in v)),
        "arterial_side": ("arterial_side", int),
        "skull_thickness": ("skull_thickness", int),
        "spacing": ("spacing", lambda v: tuple(float(x) for x in v)),
        "residue": ("residue", str),
        "echo_time": ("echo_time", float),
        "s0": ("s0", float),
        "aif": ("aif", lambda v: GammaFit(*(float(x) for x in v))),
        "brain_shape": ("brain_shape", str),
        "arterial_gap": ("arterial_gap", int),
    }
    for key, value in values.items():
        short = key.split(".", 1)[1] if key.startswith("phantom.") else key
        if short not in keymap:
            raise SpecInvalid(f"unknown phantom key {key!r}")
        name, conv = keymap[short]
        if isinstance(value, (list, tuple)) or conv in (int, float, str):
            kw[name] = conv(value)
        else:
            kw[name] = conv([value])
    try:
        return default_spec(**kw)
    except (TypeError, ValueError) as exc:
        raise SpecInvalid(str(exc)) from exc


def write_phantom(spec: PhantomSpec, ph: Phantom, out_dir) -> None:
    """Write volume, masks, ground-truth maps, AIF curve and a summary file."""
    os.makedirs(out_dir, exist_ok=True)
    write_nifti(ph.volume, os.path.join(out_dir, "volume.nii.gz"))
    write_nifti(ph.mask, os.path.join(out_dir, "mask.nii.gz"))
    write_nifti(Mask3D.like(ph.mask, spec.arterial), os.path.join(out_dir, "arterial.nii.gz"))
    labels = np.zeros(tuple(spec.dims))
    labels[spec.arterial] = 1
    for i, r in enumerate(spec.regions, start=2):
        labels[r.mask] = i
    write_nifti(Volume3D(labels, ph.mask.spacing, ph.mask.affine), os.path.join(out_dir, "regions.nii.gz"))
    ph.truth.write(os.path.join(out_dir, "ground_truth"))
    with open(os.path.join(out_dir, "aif.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "time_s", "aif"])
        for i, v in enumerate(ph.aif.values):
            w.writerow([i, repr(i * spec.dt), repr(float(v))])
    with open(os.path.join(out_dir, "phantom.txt"), "w") as fh:
        fh.write(f"modality = {Modality.parse(spec.modality).value.lower()}\n")
        fh.write(f"dt = {spec.dt!r}\n")
        fh.write(f"baseline_frames = {spec.n_baseline}\n")
        if spec.echo_time:
            fh.write(f"echo_time = {spec.echo_time!r}\n")
        fh.write("labels = 1 arterial, " + ", ".join(
            f"{i} {r.name or 'region'}" for i, r in enumerate(spec.regions, start=2)) + "\n")
