"""End-to-end orchestration: raw 4D volume in, perfusion maps out."""
from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import aif as aif_mod
from . import bolus_ctc, deconvolution, maps, masking, preprocess
from .config import PipelineConfig
from .debug_report import DebugReport
from .errors import ConfigError, EmptyMask, StageError
from .nifti_io import Mask3D, Volume3D, read_nifti, reorient_ras

log = logging.getLogger(__name__)

STAGES = ("read", "reorient", "downsample", "motion_correct", "smooth", "mask", "bolus",
          "ctc", "aif", "deconvolve", "maps", "write", "debug_report")


@dataclass
class PipelineResult:
    maps: maps.PerfusionMaps
    onset: int
    aif: aif_mod.AifResult
    mask: Mask3D
    quality: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    written: list = field(default_factory=list)
    report: list = field(default_factory=list)


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # every failure is reported with its stage name
        raise StageError(name, exc) from exc
    finally:
        timings[name] = time.perf_counter() - start
        log.info("stage %-14s %.3f s", name, timings[name])


def _downsample_mask(mask: Mask3D, cfg: preprocess.PreprocessConfig) -> Mask3D:
    as_float = Volume3D(mask.data.astype(np.float64), mask.spacing, mask.affine)
    small = preprocess.downsample(as_float, cfg)
    if small is as_float:
        return mask
    return Mask3D(small.data >= 0.5, small.spacing, small.affine)


def run_pipeline(cfg: PipelineConfig, volume=None) -> PipelineResult:
    """Run every stage in order; the first failure raises StageError.

    ``volume`` may supply an already loaded Volume4D instead of ``cfg.input``.
    Maps are written only when ``cfg.out_dir`` is set.
    """
    if volume is None and not cfg.input:
        raise ConfigError("no input volume given")
    if cfg.debug and not cfg.out_dir:
        raise ConfigError("debug output needs an output directory")
    timings: dict = {}
    quality: dict = {}
    report = None

    with _stage("read", timings):
        vol = volume if volume is not None else read_nifti(
            cfg.input, cfg.modality, echo_time=cfg.echo_time, dt=cfg.dt)
        if volume is not None and cfg.dt is not None:
            vol = vol.with_data(vol.data, dt=cfg.dt)
        user_mask = masking.load_mask(cfg.mask.path, vol) if cfg.mask.mode == "file" else None
        log.info("input %s, dt %.4g s, modality %s", vol.data.shape, vol.dt, vol.modality.value)
    with _stage("reorient", timings):
        vol = reorient_ras(vol)
        if user_mask is not None:
            user_mask = reorient_ras(user_mask)
    with _stage("downsample", timings):
        vol = preprocess.downsample(vol, cfg.preprocess)
        if user_mask is not None:
            user_mask = _downsample_mask(user_mask, cfg.preprocess)
    with _stage("motion_correct", timings):
        vol, shifts = preprocess.motion_correct_with_shifts(vol, cfg.preprocess)
        quality["max_shift_voxels"] = float(np.abs(np.asarray(shifts)).max())
    with _stage("smooth", timings):
        vol = preprocess.gaussian_smooth(vol, cfg.preprocess)
    with _stage("mask", timings):
        mask = user_mask if user_mask is not None else masking.make_mask(vol, cfg.mask)
        if not mask.data.any():
            raise EmptyMask("brain mask is empty")
        quality["mask_voxels"] = mask.count
    with _stage("bolus", timings):
        series = bolus_ctc.mean_signal_curve(vol, mask)
        direction = cfg.bolus.direction or bolus_ctc.default_direction(vol.modality)
        onset = bolus_ctc.detect_bolus_onset(series, cfg.bolus.threshold, cfg.bolus.window, direction)
        log.info("bolus onset at frame %d", onset)
    with _stage("ctc", timings):
        s0 = bolus_ctc.baseline_s0(vol, onset)
        ctc = bolus_ctc.compute_ctc(vol, s0, mask, onset, cfg.mr_sign, cfg.echo_time)
        ttp = bolus_ctc.ttp_map(ctc)
        quality.update(ctc.quality)
    with _stage("aif", timings):
        aif = aif_mod.select_aif(ctc, ttp, cfg.aif)
        quality["aif_voxels"] = int(aif.segmentation.data.sum())
        quality["aif_clusters"] = aif.n_clusters
    with _stage("deconvolve", timings):
        res = deconvolution.deconvolve_volume(ctc, aif.curve, cfg.deconv)
        quality.update(res.quality)
    with _stage("maps", timings):
        out = maps.assemble_maps(res, ttp, cfg.maps)
        quality["valid_voxels"] = out.validity.count
    written = []
    if cfg.out_dir:
        with _stage("write", timings):
            written = out.write(cfg.out_dir)
    if cfg.debug:
        # written after the maps so that a report failure leaves them intact
        with _stage("debug_report", timings):
            report = DebugReport(cfg.out_dir)
            report.input_stage(vol, vol.modality)
            report.mask_stage(vol, mask)
            report.bolus_stage(series, onset)
            report.ctc_stage(ctc)
            report.aif_stage(ctc, aif)
            report.write_index()
    for key, value in quality.items():
        log.info("quality %s = %s", key, value)
    return PipelineResult(out, onset, aif, mask, quality, timings, written,
                          report.stages if report is not None else [])
