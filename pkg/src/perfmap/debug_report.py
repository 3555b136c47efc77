"""Static per-stage debug artifacts: PNG montages, line plots, CSVs and an HTML index.

Images are rasterised with numpy and encoded by a small stdlib PNG writer,
so the report adds no plotting dependency.
"""
from __future__ import annotations

import csv
import html
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import IoFailure
from .nifti_io import Modality

STAGE_TITLES = {
    "input": "Preprocessed input",
    "mask": "Brain mask",
    "bolus": "Bolus arrival",
    "ctc": "Contrast time curves",
    "aif": "Arterial input function",
}
OVERLAY = np.array([230, 40, 40], dtype=np.float64)
COLORS = {"data": (30, 90, 200), "fit": (220, 60, 30), "marker": (20, 160, 60)}


@dataclass
class StageArtifact:
    stage: str
    images: list = field(default_factory=list)
    data: list = field(default_factory=list)
    notes: list = field(default_factory=list)


# ---------------------------------------------------------------- PNG


def encode_png(rgb: np.ndarray) -> bytes:
    """8-bit RGB or grayscale array -> PNG bytes (no filtering, zlib level 6)."""
    img = np.ascontiguousarray(rgb, dtype=np.uint8)
    if img.ndim == 2:
        color_type, channels = 0, 1
        img = img[..., None]
    elif img.ndim == 3 and img.shape[2] == 3:
        color_type, channels = 2, 3
    else:
        raise ValueError(f"unsupported image shape {rgb.shape}")
    h, w = img.shape[:2]
    rows = np.concatenate([np.zeros((h, 1), dtype=np.uint8), img.reshape(h, w * channels)], axis=1)

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(rows.tobytes(), 6)) + chunk(b"IEND", b""))


def decode_png(data: bytes) -> np.ndarray:
    """Inverse of :func:`encode_png` for its own output (filter type 0 only)."""
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError("not a PNG stream")
    pos, idat, w, h = 8, b"", 0, 0
    channels = 1
    while pos < len(data):
        (n,) = struct.unpack(">I", data[pos : pos + 4])
        tag, payload = data[pos + 4 : pos + 8], data[pos + 8 : pos + 8 + n]
        pos += 12 + n
        if tag == b"IHDR":
            w, h, _, ct = struct.unpack(">IIBB", payload[:10])
            channels = 3 if ct == 2 else 1
        elif tag == b"IDAT":
            idat += payload
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8).reshape(h, 1 + w * channels)
    img = raw[:, 1:].reshape(h, w, channels)
    return img[..., 0] if channels == 1 else img


def write_png(path, rgb: np.ndarray) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(encode_png(rgb))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- raster helpers


def to_gray(img: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Window a 2D array to 0..255 between robust percentiles (1, 99) by default."""
    a = np.asarray(img, dtype=np.float64)
    finite = a[np.isfinite(a)]
    if finite.size == 0:
        return np.zeros(a.shape, dtype=np.uint8)
    lo = np.percentile(finite, 1) if lo is None else lo
    hi = np.percentile(finite, 99) if hi is None else hi
    if hi <= lo:
        hi = lo + 1.0
    out = np.clip((np.nan_to_num(a, nan=lo) - lo) / (hi - lo), 0.0, 1.0)
    return (out * 255.0 + 0.5).astype(np.uint8)


def slice_view(vol2d: np.ndarray) -> np.ndarray:
    """RAS voxel slice (x, y) -> display rows (anterior up, right on the right)."""
    return np.flipud(np.asarray(vol2d).T)


def montage(slices: list, cols: int | None = None, pad: int = 2, fill=0) -> np.ndarray:
    """Tile equally sized 2D or RGB images into a grid."""
    n = len(slices)
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    h, w = slices[0].shape[:2]
    extra = slices[0].shape[2:]
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad) + extra, fill, dtype=np.uint8)
    for i, s in enumerate(slices):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y : y + h, x : x + w] = s
    return canvas


def overlay(gray: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    rgb = np.repeat(gray[..., None].astype(np.float64), 3, axis=2)
    m = mask.astype(bool)
    rgb[m] = (1 - alpha) * rgb[m] + alpha * OVERLAY
    return (rgb + 0.5).astype(np.uint8)


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    if factor <= 1:
        return img
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def _display_factor(shape, target: int = 160) -> int:
    return max(1, int(target // max(shape[:2])))


class Plot:
    """Minimal line-plot canvas: axes box, polylines and vertical markers."""

    def __init__(self, width: int = 480, height: int = 300, margin: int = 30):
        self.w, self.h, self.m = width, height, margin
        self.img = np.full((height, width, 3), 255, dtype=np.uint8)
        self.xlim = (0.0, 1.0)
        self.ylim = (0.0, 1.0)

    def set_limits(self, xs, ys) -> None:
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(ys.min()), float(ys.max())
        if x1 <= x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0
        span = y1 - y0
        self.xlim, self.ylim = (x0, x1), (y0 - 0.05 * span, y1 + 0.05 * span)

    def _px(self, x, y):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        px = self.m + (np.asarray(x, float) - x0) / (x1 - x0) * (self.w - 2 * self.m)
        py = self.h - self.m - (np.asarray(y, float) - y0) / (y1 - y0) * (self.h - 2 * self.m)
        return px, py

    def _segment(self, xa, ya, xb, yb, color) -> None:
        n = int(max(abs(xb - xa), abs(yb - ya))) + 1
        xs = np.rint(np.linspace(xa, xb, n + 1)).astype(int)
        ys = np.rint(np.linspace(ya, yb, n + 1)).astype(int)
        ok = (xs >= 0) & (xs < self.w) & (ys >= 0) & (ys < self.h)
        self.img[ys[ok], xs[ok]] = color

    def axes(self) -> None:
        m, w, h = self.m, self.w, self.h
        black = (0, 0, 0)
        self._segment(m, h - m, w - m, h - m, black)
        self._segment(m, m, m, h - m, black)
        if self.ylim[0] < 0 < self.ylim[1]:
            _, zy = self._px(self.xlim[0], 0.0)
            self._segment(m, float(zy), w - m, float(zy), (180, 180, 180))

    def line(self, xs, ys, color) -> None:
        px, py = self._px(xs, ys)
        for i in range(len(px) - 1):
            self._segment(px[i], py[i], px[i + 1], py[i + 1], color)

    def markers(self, xs, ys, color, size: int = 2) -> None:
        px, py = self._px(xs, ys)
        for x, y in zip(np.rint(px).astype(int), np.rint(py).astype(int)):
            self.img[max(0, y - size) : y + size + 1, max(0, x - size) : x + size + 1] = color

    def vline(self, x, color) -> None:
        px, _ = self._px(x, 0.0)
        self._segment(float(px), self.m, float(px), self.h - self.m, color)


def write_csv(path, header, columns) -> None:
    """Columns of floats written with repr() so values re-parse exactly."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in zip(*columns):
                w.writerow([repr(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))
                            for v in row])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- report


def middle_third(nz: int) -> slice:
    lo = nz // 3
    hi = max(lo + 1, nz - nz // 3)
    return slice(lo, hi)


class DebugReport:
    """Collects stage artifacts under ``<out>/debug`` and writes ``index.html``."""

    def __init__(self, out_dir):
        self.dir = os.path.join(out_dir, "debug")
        self.stages: list = []
        try:
            os.makedirs(self.dir, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {self.dir}: {exc}") from exc

    def _path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def _image(self, art: StageArtifact, name: str, img: np.ndarray) -> None:
        write_png(self._path(name), img)
        art.images.append(name)

    def _slices(self, vol3d: np.ndarray, lo=None, hi=None) -> list:
        f = _display_factor(vol3d.shape)
        return [upscale(slice_view(to_gray(vol3d[..., z], lo, hi)), f) for z in range(vol3d.shape[2])]

    def input_stage(self, vol, modality) -> StageArtifact:
        art = StageArtifact("input")
        data = vol.data
        lo, hi = np.percentile(data, (1, 99))
        frames = sorted({0, data.shape[3] // 2, data.shape[3] - 1})
        for t in frames:
            self._image(art, f"01_input_frame{t:03d}.png", montage(self._slices(data[..., t], lo, hi)))
        slab = data[:, :, middle_third(data.shape[2])]
        if Modality.parse(modality) is Modality.CTP:
            proj, kind = slab.max(axis=(2, 3)), "max"
        else:
            proj, kind = slab.min(axis=(2, 3)), "min"
        f = _display_factor(proj.shape, 320)
        self._image(art, f"01_input_{kind}ip.png", upscale(slice_view(to_gray(proj)), f))
        art.notes.append(f"{kind}imum-intensity projection over time and slices "
                         f"{middle_third(data.shape[2]).start}-{middle_third(data.shape[2]).stop - 1}")
        self.stages.append(art)
        return art

    def mask_stage(self, vol, mask) -> StageArtifact:
        art = StageArtifact("mask")
        mean = vol.data.mean(axis=3)
        lo, hi = np.percentile(mean, (1, 99))
        f = _display_factor(mean.shape)
        tiles = [upscale(overlay(slice_view(to_gray(mean[..., z], lo, hi)),
                                 slice_view(mask.data[..., z])), f) for z in range(mean.shape[2])]
        self._image(art, "02_mask_overlay.png", montage(tiles, fill=255))
        art.notes.append(f"{mask.count} voxels")
        self.stages.append(art)
        return art

    def bolus_stage(self, series, onset: int) -> StageArtifact:
        art = StageArtifact("bolus")
        t = series.times
        p = Plot()
        p.set_limits(t, series.values)
        p.axes()
        p.line(t, series.values, COLORS["data"])
        p.markers(t, series.values, COLORS["data"], 1)
        p.vline(onset * series.dt, COLORS["marker"])
        self._image(art, "03_bolus_curve.png", p.img)
        write_csv(self._path("03_bolus_curve.csv"), ["frame", "time_s", "normalized_mean"],
                  [np.arange(t.size), t, series.values])
        art.data.append("03_bolus_curve.csv")
        art.notes.append(f"onset frame {onset} ({onset * series.dt:g} s)")
        self.stages.append(art)
        return art

    def ctc_stage(self, ctc) -> StageArtifact:
        art = StageArtifact("ctc")
        m = ctc.mask.data
        mean = ctc.curves[m].mean(axis=0) if m.any() else np.zeros(ctc.n_frames)
        peak = int(np.argmax(mean))
        frame = ctc.curves[..., peak]
        lo, hi = np.percentile(frame[m], (1, 99)) if m.any() else (0.0, 1.0)
        self._image(art, f"04_ctc_frame{peak:03d}.png", montage(self._slices(frame, lo, hi)))
        mip = ctc.curves[:, :, middle_third(m.shape[2])].max(axis=(2, 3))
        f = _display_factor(mip.shape, 320)
        self._image(art, "04_ctc_mip.png", upscale(slice_view(to_gray(mip)), f))
        art.notes.append(f"montage at peak mean frame {peak}")
        self.stages.append(art)
        return art

    def aif_stage(self, ctc, aif) -> StageArtifact:
        art = StageArtifact("aif")
        auc = np.trapezoid(ctc.curves, dx=ctc.dt, axis=3)
        lo, hi = np.percentile(auc[ctc.mask.data], (1, 99)) if ctc.mask.data.any() else (0.0, 1.0)
        f = _display_factor(auc.shape)
        seg = aif.segmentation.data
        tiles = [upscale(overlay(slice_view(to_gray(auc[..., z], lo, hi)), slice_view(seg[..., z]), 0.7), f)
                 for z in range(auc.shape[2])]
        self._image(art, "05_aif_overlay.png", montage(tiles, fill=255))
        t = ctc.dt * np.arange(ctc.n_frames)
        measured = aif.curve.values if aif.curve is not None else aif.fitted_curve.values
        fitted = aif.fitted_curve.values
        # fitted curve on a fine grid for the plot only
        fine = np.linspace(t[0], t[-1], 8 * t.size)
        p = Plot()
        p.set_limits(t, np.concatenate([measured, fitted]))
        p.axes()
        p.markers(t, measured, COLORS["data"], 2)
        p.line(t, measured, COLORS["data"])
        p.line(fine, aif.fit(fine), COLORS["fit"])
        self._image(art, "05_aif_curve.png", p.img)
        write_csv(self._path("05_aif_curve.csv"), ["frame", "time_s", "mean_aif", "gamma_fit"],
                  [np.arange(t.size), t, measured, fitted])
        art.data.append("05_aif_curve.csv")
        g = aif.fit
        art.notes.append(f"{int(seg.sum())} voxels; gamma fit A={g.amplitude:.4g} t0={g.t0:.4g} "
                         f"alpha={g.alpha:.4g} beta={g.beta:.4g} rmse={g.rmse:.4g}")
        self.stages.append(art)
        return art

    def write_index(self) -> str:
        parts = ["<!DOCTYPE html>", "<html><head><meta charset=\"utf-8\">",
                 "<title>Perfusion debug report</title></head><body>",
                 "<h1>Perfusion debug report</h1>"]
        for i, art in enumerate(self.stages, start=1):
            title = STAGE_TITLES.get(art.stage, art.stage)
            parts.append(f"<section id=\"{art.stage}\"><h2>{i}. {html.escape(title)}</h2>")
            for note in art.notes:
                parts.append(f"<p>{html.escape(note)}</p>")
            for img in art.images:
                parts.append(f"<figure><img src=\"{img}\" alt=\"{img}\"><figcaption>{img}</figcaption></figure>")
            for name in art.data:
                parts.append(f"<p><a href=\"{name}\">{name}</a></p>")
            parts.append("</section>")
        parts.append("</body></html>")
        path = self._path("index.html")
        try:
            with open(path, "w") as fh:
                fh.write("\n".join(parts) + "\n")
        except OSError as exc:
            raise IoFailure(f"cannot write {path}: {exc}") from exc
        return path
