import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from perfmap.nifti_io import Mask3D, Volume3D, Volume4D  # noqa: E402


def vol4d(data, spacing=(1.0, 1.0, 1.0), affine=None, dt=1.0, modality="CTP", echo_time=None):
    data = np.asarray(data, dtype=np.float64)
    if affine is None:
        affine = np.diag(list(spacing) + [1.0])
    return Volume4D(data, spacing, affine, dt, modality, echo_time)


def vol3d(data, spacing=(1.0, 1.0, 1.0), affine=None):
    data = np.asarray(data, dtype=np.float64)
    if affine is None:
        affine = np.diag(list(spacing) + [1.0])
    return Volume3D(data, spacing, affine)


def mask3d(data, spacing=(1.0, 1.0, 1.0)):
    return Mask3D(np.asarray(data, dtype=bool), spacing, np.diag(list(spacing) + [1.0]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# preprocessing that leaves the noiseless phantom's analytic curves intact
PHANTOM_RUN_CONFIG = "preprocess.registration = off\npreprocess.smooth_sigma_mm = 0\n"


def phantom_case(directory, modality="CTP", **kw):
    """Write a default phantom plus a run config; returns (spec, phantom, config path)."""
    from perfmap.phantom import default_spec, generate, write_phantom

    spec = default_spec(modality=modality, **kw)
    ph = generate(spec)
    write_phantom(spec, ph, directory)
    cfg = os.path.join(directory, "run.cfg")
    with open(cfg, "w") as fh:
        fh.write(PHANTOM_RUN_CONFIG)
    return spec, ph, cfg
