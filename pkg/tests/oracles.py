"""Independent reference implementations used as test oracles.

Each oracle is written from the definition with plain loops or the stdlib,
sharing no code with the package, so that agreement is evidence of
correctness rather than of shared bugs.
"""
from __future__ import annotations

import gzip
import math
import struct

import numpy as np


def dense_ssim(a, b, mask, window=7, k1=0.01, k2=0.03, pooled=False):
    """Per-slice windowed SSIM by explicit loops over window positions.

    Intensities are offset by the reference minimum over the whole volume
    (the pooled minimum when ``pooled``); the dynamic range comes from the
    in-mask values. Windows touching a masked-out voxel are skipped.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pooled:
        vals = np.concatenate([a[mask], b[mask]])
        lo = min(a.min(), b.min())
    else:
        vals = b[mask]
        lo = b.min()
    dr = vals.max() - vals.min()
    a = a - lo
    b = b - lo
    c1 = (k1 * dr) ** 2
    c2 = (k2 * dr) ** 2
    nx, ny, nz = a.shape
    out = []
    for z in range(nz):
        for i in range(nx - window + 1):
            for j in range(ny - window + 1):
                if not mask[i : i + window, j : j + window, z].all():
                    continue
                xa = a[i : i + window, j : j + window, z].ravel()
                xb = b[i : i + window, j : j + window, z].ravel()
                n = xa.size
                ma = sum(xa) / n
                mb = sum(xb) / n
                va = sum((xa - ma) ** 2) / n
                vb = sum((xb - mb) ** 2) / n
                cv = sum((xa - ma) * (xb - mb)) / n
                out.append(((2 * ma * mb + c1) * (2 * cv + c2))
                           / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(out))


def direct_convolution(aif, residue, dt):
    """c[n] = dt * sum_{m <= n} aif[n - m] * residue[m]."""
    n = len(aif)
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for m in range(i + 1):
            s += aif[i - m] * residue[m]
        out[i] = dt * s
    return out


def brute_force_onset(values, threshold, window, direction="increase"):
    """Scan every window position; return the onset index or None.

    A position triggers when the mean of ``window`` frames differs from the
    preceding window's mean by more than ``threshold``. The onset is the
    first frame in that window that itself departs from the preceding
    window's mean by more than ``threshold`` in the trigger direction.
    """
    v = [float(x) for x in values]
    n = len(v)
    for i in range(window, n - window + 1):
        prev = sum(v[i - window : i]) / window
        cur = sum(v[i : i + window]) / window
        d = cur - prev
        if direction == "increase":
            hit = d > threshold
        elif direction == "decrease":
            hit = -d > threshold
        else:
            hit = abs(d) > threshold
        if hit:
            sign = 1 if d > 0 else -1
            for j in range(i, i + window):
                if sign * (v[j] - prev) > threshold:
                    return j
    return None


def trapezoid(values, dt):
    v = list(values)
    return sum((v[i] + v[i + 1]) * dt / 2.0 for i in range(len(v) - 1))


def gamma_variate(t, a, t0, alpha, beta):
    out = np.zeros(len(t))
    for i, ti in enumerate(t):
        if ti > t0:
            x = (ti - t0) / (alpha * beta)
            out[i] = a * x**alpha * math.exp(alpha - (ti - t0) / beta)
    return out


def gaussian_kernel_1d(sigma):
    r = int(math.ceil(3 * sigma))
    w = [math.exp(-0.5 * (i / sigma) ** 2) for i in range(-r, r + 1)]
    s = sum(w)
    return np.array([x / s for x in w])


# ---------------------------------------------------------------- NIfTI


def read_nifti_header(path):
    """Parse the fields of a gzip NIfTI-1 header with struct at fixed offsets."""
    with gzip.open(path, "rb") as fh:
        raw = fh.read()
    endian = "<" if struct.unpack("<i", raw[:4])[0] == 348 else ">"

    def get(fmt, off):
        return struct.unpack_from(endian + fmt, raw, off)

    hdr = {
        "sizeof_hdr": get("i", 0)[0],
        "dim": get("8h", 40),
        "datatype": get("h", 70)[0],
        "bitpix": get("h", 72)[0],
        "pixdim": get("8f", 76),
        "vox_offset": get("f", 108)[0],
        "scl_slope": get("f", 112)[0],
        "scl_inter": get("f", 116)[0],
        "xyzt_units": raw[123],
        "qform_code": get("h", 252)[0],
        "sform_code": get("h", 254)[0],
        "srow_x": get("4f", 280),
        "srow_y": get("4f", 296),
        "srow_z": get("4f", 312),
        "magic": raw[344:348],
    }
    return hdr, raw, endian


def read_nifti_data(path):
    """Voxel array of a float32/float64/int16/uint8/int32 NIfTI-1 file, x fastest."""
    hdr, raw, endian = read_nifti_header(path)
    codes = {2: "B", 4: "h", 8: "i", 16: "f", 64: "d"}
    nd = hdr["dim"][0]
    shape = hdr["dim"][1 : nd + 1]
    count = int(np.prod(shape))
    off = int(hdr["vox_offset"])
    vals = struct.unpack_from(f"{endian}{count}{codes[hdr['datatype']]}", raw, off)
    return np.array(vals, dtype=np.float64).reshape(shape, order="F"), hdr


def write_nifti_raw(path, data, datatype=16, pixdim=(1, 1, 1, 1, 0), slope=0.0,
                    inter=0.0, xyzt_units=10, sform=None, qform_code=0, magic=b"n+1\0",
                    sizeof_hdr=348, endian="<", truncate=None, gz=True, quatern=None):
    """Write a NIfTI-1 file byte by byte with struct (independent of the package writer)."""
    codes = {2: ("B", 8), 4: ("h", 16), 8: ("i", 32), 16: ("f", 32), 64: ("d", 64)}
    data = np.asarray(data)
    buf = bytearray(352)
    struct.pack_into(endian + "i", buf, 0, sizeof_hdr)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into(endian + "8h", buf, 40, *dim)
    code, bits = codes.get(datatype, ("f", 32))
    struct.pack_into(endian + "h", buf, 70, datatype)
    struct.pack_into(endian + "h", buf, 72, bits)
    pd = [1.0] + list(pixdim) + [0.0] * (7 - len(pixdim))
    struct.pack_into(endian + "8f", buf, 76, *pd)
    struct.pack_into(endian + "f", buf, 108, 352.0)
    struct.pack_into(endian + "f", buf, 112, slope)
    struct.pack_into(endian + "f", buf, 116, inter)
    buf[123] = xyzt_units
    struct.pack_into(endian + "h", buf, 252, qform_code)
    if quatern is not None:
        struct.pack_into(endian + "6f", buf, 256, *quatern)
    if sform is not None:
        struct.pack_into(endian + "h", buf, 254, 1)
        for r in range(3):
            struct.pack_into(endian + "4f", buf, 280 + 16 * r, *sform[r])
    buf[344:348] = magic
    flat = data.ravel(order="F")
    payload = struct.pack(f"{endian}{flat.size}{code}", *flat.tolist()) if datatype in codes else b""
    blob = bytes(buf) + payload
    if truncate is not None:
        blob = blob[:truncate]
    if gz:
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)
