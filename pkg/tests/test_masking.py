import numpy as np
import pytest
from scipy import ndimage

from conftest import vol3d, vol4d
from perfmap.errors import EmptyMask, GeometryMismatch, NoSkullFound
from perfmap.masking import (
    MaskConfig,
    brain_mask_ct,
    brain_mask_mr,
    load_mask,
    make_mask,
)
from perfmap.nifti_io import write_nifti

CONN26 = np.ones((3, 3, 3), dtype=bool)


def dice(a, b):
    return 2.0 * (a & b).sum() / (a.sum() + b.sum())


def _grid(shape):
    return np.indices(shape).astype(float)


def _sphere(shape, centre, radius):
    g = _grid(shape)
    d2 = sum((g[i] - centre[i]) ** 2 for i in range(3))
    return d2 <= radius**2


def _ct_head(shape=(40, 40, 40), centre=(19.5, 19.5, 19.5), r_in=12, r_out=15, frames=3):
    brain = _sphere(shape, centre, r_in)
    shell = _sphere(shape, centre, r_out) & ~brain
    img = np.full(shape, -1000.0)
    img[brain] = 40.0
    img[shell] = 1000.0
    return np.repeat(img[..., None], frames, axis=3), brain, shell


def test_ct_sphere_in_shell():
    data, brain, _ = _ct_head()
    mask = brain_mask_ct(vol4d(data))
    assert dice(mask.data, brain) >= 0.95


def test_ct_mask_excludes_bone():
    data, _, shell = _ct_head()
    mask = brain_mask_ct(vol4d(data))
    assert not (mask.data & (data.mean(axis=3) >= 300)).any()


def test_ct_all_air():
    with pytest.raises(NoSkullFound):
        brain_mask_ct(vol4d(np.full((20, 20, 20, 2), -1000.0)))


def test_ct_two_shells_uses_larger():
    shape = (60, 40, 40)
    big_brain = _sphere(shape, (20, 19.5, 19.5), 12)
    big_shell = _sphere(shape, (20, 19.5, 19.5), 15) & ~big_brain
    small_brain = _sphere(shape, (50, 19.5, 19.5), 3)
    small_shell = _sphere(shape, (50, 19.5, 19.5), 5) & ~small_brain
    assert big_shell.sum() >= 10 * small_shell.sum()
    img = np.full(shape, -1000.0)
    img[big_brain | small_brain] = 40.0
    img[big_shell | small_shell] = 1000.0
    mask = brain_mask_ct(vol4d(np.repeat(img[..., None], 2, axis=3)))
    assert not (mask.data & small_brain).any()
    assert dice(mask.data, big_brain) >= 0.95


def test_ct_mask_is_single_component():
    data, _, _ = _ct_head()
    data = data.copy()
    # isolated soft-tissue blob outside the skull must not join the mask
    data[1:4, 1:4, 1:4] = 40.0
    mask = brain_mask_ct(vol4d(data))
    _, n = ndimage.label(mask.data, structure=CONN26)
    assert n == 1
    assert not mask.data[1:4, 1:4, 1:4].any()


def test_ct_seed_search_when_centre_is_out_of_band():
    data, brain, _ = _ct_head()
    data = data.copy()
    # a dense calcification at the centre pushes the seed to a neighbour
    data[18:22, 18:22, 18:22] = 200.0
    mask = brain_mask_ct(vol4d(data))
    assert mask.data.sum() > 0.8 * brain.sum()


def test_ct_mask_deterministic():
    data, _, _ = _ct_head()
    a = brain_mask_ct(vol4d(data))
    b = brain_mask_ct(vol4d(data.copy()))
    np.testing.assert_array_equal(a.data, b.data)


def _mr_ellipsoid(shape=(40, 36, 20), noise=0.01, seed=0):
    g = _grid(shape)
    c = [(n - 1) / 2 for n in shape]
    ell = ((g[0] - c[0]) / 14) ** 2 + ((g[1] - c[1]) / 12) ** 2 + ((g[2] - c[2]) / 7) ** 2 <= 1
    img = np.where(ell, 500.0, 10.0)
    rng = np.random.default_rng(seed)
    data = img[..., None] + rng.normal(0, noise * 490, shape + (3,))
    return data, ell


def test_mr_ellipsoid():
    data, ell = _mr_ellipsoid()
    mask = brain_mask_mr(vol4d(data, modality="MRP", echo_time=0.03))
    assert dice(mask.data, ell) >= 0.95


def test_mr_constant_volume():
    with pytest.raises(EmptyMask):
        brain_mask_mr(vol4d(np.full((8, 8, 8, 2), 5.0), modality="MRP", echo_time=0.03))


def test_mr_hole_filled():
    data, ell = _mr_ellipsoid(noise=0.0)
    data = data.copy()
    data[19, 17, 9, :] = 10.0
    mask = brain_mask_mr(vol4d(data, modality="MRP", echo_time=0.03))
    assert mask.data[19, 17, 9]


def test_mr_single_component():
    data, _ = _mr_ellipsoid()
    data = data.copy()
    data[0:3, 0:3, 0:3, :] = 500.0
    mask = brain_mask_mr(vol4d(data, modality="MRP", echo_time=0.03))
    _, n = ndimage.label(mask.data, structure=CONN26)
    assert n == 1


def _write_mask(path, data):
    write_nifti(vol3d(np.asarray(data, dtype=float)), path)


def test_load_mask_demo_dims(tmp_path):
    p = tmp_path / "m.nii.gz"
    m = np.zeros((200, 200, 23))
    m[50:150, 50:150, 5:18] = 1
    _write_mask(p, m)
    geom = vol4d(np.zeros((200, 200, 23, 2), dtype=np.float32))
    mask = load_mask(p, geom)
    assert mask.dims == (200, 200, 23)
    assert mask.count == 100 * 100 * 13


def test_load_mask_geometry_mismatch(tmp_path):
    p = tmp_path / "m.nii.gz"
    _write_mask(p, np.ones((100, 100, 23)))
    with pytest.raises(GeometryMismatch):
        load_mask(p, vol4d(np.zeros((200, 200, 23, 2), dtype=np.float32)))


def test_load_mask_all_ones(tmp_path):
    p = tmp_path / "m.nii.gz"
    _write_mask(p, np.full((4, 5, 6), 3.0))
    mask = load_mask(p, vol4d(np.zeros((4, 5, 6, 2))))
    assert mask.data.all()


def test_make_mask_dispatch(tmp_path):
    data, brain, _ = _ct_head()
    assert dice(make_mask(vol4d(data), MaskConfig()).data, brain) >= 0.95
    p = tmp_path / "m.nii.gz"
    _write_mask(p, brain)
    out = make_mask(vol4d(data), MaskConfig(mode="file", path=str(p)))
    np.testing.assert_array_equal(out.data, brain)
    mr, ell = _mr_ellipsoid()
    assert dice(make_mask(vol4d(mr, modality="MRP", echo_time=0.03), MaskConfig()).data, ell) >= 0.95


def test_mask_config_validation():
    with pytest.raises(ValueError):
        MaskConfig(mode="file")
    with pytest.raises(ValueError):
        MaskConfig(hu_lo=50, hu_hi=10)
    with pytest.raises(ValueError):
        MaskConfig(bone_hu=50)
