"""Quantitative perfusion maps from 4D CT or MR perfusion volumes."""
from .config import PipelineConfig, build_config, read_config
from .errors import PerfusionError, StageError
from .maps import PerfusionMaps
from .nifti_io import Mask3D, Modality, Volume3D, Volume4D, read_nifti, write_nifti
from .phantom import PhantomSpec, default_spec, generate
from .pipeline import run_pipeline
from .validation import compare_runs, ssim

__version__ = "0.1.0"

__all__ = [
    "Mask3D", "Modality", "PerfusionError", "PerfusionMaps", "PhantomSpec", "PipelineConfig",
    "StageError", "Volume3D", "Volume4D", "build_config", "compare_runs", "default_spec",
    "generate", "read_config", "read_nifti", "run_pipeline", "ssim", "write_nifti",
]
