"""Bolus arrival, baseline image, contrast time curves and TTP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingEchoTime, NoBolusDetected, NoPreBolusFrames, ZeroBaseline
from .nifti_io import Mask3D, Modality, Volume3D, Volume4D

MR_SIGNS = ("negated", "raw")


@dataclass(frozen=True)
class BolusConfig:
    threshold: float = 0.05
    window: int = 3
    direction: str | None = None  # None: increase for CT, any for MR

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("bolus.threshold must be positive")
        if self.window < 1:
            raise ValueError("bolus.window must be >= 1")
        if self.direction not in (None, "increase", "decrease", "any"):
            raise ValueError("bolus.direction must be increase, decrease or any")


@dataclass(frozen=True)
class TimeSeries:
    values: np.ndarray
    dt: float
    t0_index: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 2:
            raise ValueError("TimeSeries needs at least 2 points")
        if not np.isfinite(values).all():
            raise ValueError("TimeSeries values must be finite")

    def __len__(self):
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.values.size) * self.dt


@dataclass(frozen=True)
class BaselineImage:
    s0: Volume3D


@dataclass(frozen=True)
class CtcField:
    """Per-voxel contrast curves, shape (nx, ny, nz, T); zero outside the mask."""

    curves: np.ndarray
    onset: int
    mask: Mask3D
    dt: float
    quality: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.curves.shape[3]

    def masked_curves(self) -> np.ndarray:
        """In-mask curves as an (n_voxels, T) array in C order of the mask."""
        return self.curves[self.mask.data]


def mean_signal_curve(vol: Volume4D, mask: Mask3D) -> TimeSeries:
    """Mean in-mask signal per frame, normalised to the first frame."""
    if not mask.data.any():
        raise ValueError("mask is empty")
    means = vol.data[mask.data].mean(axis=0)
    if means[0] == 0:
        raise ZeroBaseline("mean in-mask signal of frame 0 is zero")
    return TimeSeries(means / means[0], vol.dt)


def default_direction(modality) -> str:
    return "increase" if Modality.parse(modality) is Modality.CTP else "any"


def detect_bolus_onset(series: TimeSeries, threshold: float = 0.05, window: int = 3,
                       direction: str = "increase") -> int:
    """Index of the first post-arrival frame.

    Adjacent windows of ``window`` frames slide forward one frame at a time;
    the first position whose window mean differs from the preceding
    window's mean by more than ``threshold`` triggers. The onset is the
    first frame inside the triggering window whose own change from the
    preceding window's mean exceeds ``threshold`` in the trigger direction,
    so frames still at baseline at the start of the window are not counted
    as bolus. Such a frame always exists once the window mean has moved by
    more than ``threshold``.
    """
    v = series.values
    n = v.size
    if n < 2 * window:
        raise ValueError(f"series of {n} points is shorter than two windows of {window}")
    for i in range(window, n - window + 1):
        prev = v[i - window : i].mean()
        cur = v[i : i + window].mean()
        change = cur - prev
        if direction == "increase":
            hit = change > threshold
        elif direction == "decrease":
            hit = -change > threshold
        else:
            hit = abs(change) > threshold
        if hit:
            sign = 1.0 if change > 0 else -1.0
            moved = sign * (v[i : i + window] - prev) > threshold
            return i + int(np.argmax(moved))
    raise NoBolusDetected(f"no window change above {threshold:g} in {n} frames")


def baseline_s0(vol: Volume4D, onset: int) -> BaselineImage:
    if onset < 1:
        raise NoPreBolusFrames("bolus onset at frame 0 leaves no baseline frames")
    return BaselineImage(vol.geometry(vol.data[..., :onset].mean(axis=3)))


def compute_ctc(vol: Volume4D, s0: BaselineImage, mask: Mask3D, onset: int,
                mr_sign: str = "negated", echo_time: float | None = None) -> CtcField:
    """Contrast time curves: S - S0 for CT, -(1/TE) ln(S/S0) for MR.

    ``mr_sign='raw'`` keeps the un-negated logarithm. For MR, voxels with a
    non-positive baseline are zeroed entirely and non-positive samples are
    set to 0; both are counted in ``quality``.
    """
    m = mask.data
    sig = vol.data[m]
    base = s0.s0.data[m][:, None]
    curves = np.zeros(vol.data.shape, dtype=np.float64)
    quality = {"mr_bad_baseline_voxels": 0, "mr_clamped_samples": 0}
    if vol.modality is Modality.CTP:
        curves[m] = sig - base
    else:
        te = echo_time if echo_time is not None else vol.echo_time
        if te is None:
            raise MissingEchoTime("MR perfusion needs an echo time (--te or ctc.echo_time_s)")
        if mr_sign not in MR_SIGNS:
            raise ValueError(f"mr_sign must be one of {MR_SIGNS}")
        bad_base = base[:, 0] <= 0
        bad_sample = (sig <= 0) & ~bad_base[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ctc = np.log(sig / base) / te
        if mr_sign == "negated":
            ctc = -ctc
        ctc[bad_base] = 0.0
        ctc[bad_sample] = 0.0
        curves[m] = ctc
        quality["mr_bad_baseline_voxels"] = int(bad_base.sum())
        quality["mr_clamped_samples"] = int(bad_sample.sum())
    return CtcField(curves, int(onset), mask, vol.dt, quality)


def ttp_map(ctc: CtcField, fill: float = 0.0) -> Volume3D:
    """Time of the CTC peak relative to bolus onset, in seconds.

    np.argmax returns the earliest index on ties; out-of-mask voxels get ``fill``.
    """
    m = ctc.mask.data
    out = np.full(m.shape, fill, dtype=np.float64)
    out[m] = (np.argmax(ctc.curves[m], axis=1) - ctc.onset) * ctc.dt
    return Volume3D(out, ctc.mask.spacing, ctc.mask.affine)


def low_signal_voxels(ctc: CtcField) -> Mask3D:
    """In-mask voxels whose curve never rises above zero."""
    m = ctc.mask.data
    low = np.zeros(m.shape, dtype=bool)
    low[m] = ctc.curves[m].max(axis=1) <= 0
    return Mask3D.like(ctc.mask, low)
