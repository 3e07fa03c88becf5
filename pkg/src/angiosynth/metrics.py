"""Slice fidelity (PSNR, SSIM) and 3D vessel overlap / connectivity metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .volume import Volume3D, extract_slices

PSNR_CAP = 99.0
SSIM_WINDOW = 8
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class NonBinaryMaskError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be > 0")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(data_range ** 2 / mse))


def ssim(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all window x window patches (uniform weights, stride 1)."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"images must be 2D and at least {window}x{window}, got {a.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def otsu_threshold(values, bins: int = 256) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        raise ValueError("constant volume: Otsu threshold undefined")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    w1 = 1 - w0
    m0 = np.cumsum(p * centers)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mt * w0 - m0) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    k = int(np.argmax(between[:-1]))
    return float(edges[k + 1])


def segment_vessels(v: Volume3D, method: str = "otsu", threshold: float | None = None) -> Volume3D:
    """Binary vessel mask: v >= threshold, with the threshold fixed or from Otsu."""
    vox = v.voxels
    if method == "fixed":
        if threshold is None:
            raise ValueError("fixed segmentation needs a threshold")
        theta = threshold
    elif method == "otsu":
        theta = otsu_threshold(vox)
    else:
        raise ValueError(f"unknown threshold method {method!r}")
    return Volume3D((vox >= theta).astype(np.float32), v.spacing)


def _binary(m):
    m = m.voxels if isinstance(m, Volume3D) else np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise NonBinaryMaskError("mask values must be exactly 0 or 1")
    return m.astype(bool)


def dice(a, b) -> float:
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(a, b).sum() / total)


def jaccard(a, b) -> float:
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def exposed_faces(mask: np.ndarray) -> int:
    m = np.pad(mask.astype(bool), 1)
    count = 0
    for axis in range(3):
        for shift in (1, -1):
            count += int(np.logical_and(m, ~np.roll(m, shift, axis=axis)).sum())
    return count


def connectivity_score(mask) -> float:
    """0-10 blend of largest-component share, component count, and surface smoothness."""
    m = _binary(mask)
    n_fg = int(m.sum())
    if n_fg == 0:
        return 0.0
    labels, n = ndimage.label(m, structure=CONNECTIVITY_26)
    largest = np.bincount(labels.ravel())[1:].max()
    f_largest = largest / n_fg
    f_components = 1.0 / n
    f_surface = 1.0 - exposed_faces(m) / (6.0 * n_fg)
    return float(10 * (0.6 * f_largest + 0.3 * f_components + 0.1 * f_surface))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    dice: float
    jaccard: float
    connectivity: float
    n_slices: int
    psnr_per_slice: list = field(default_factory=list)
    ssim_per_slice: list = field(default_factory=list)

    def to_json(self) -> str:
        keys = ("psnr", "ssim", "dice", "jaccard", "connectivity", "n_slices")
        return json.dumps({k: getattr(self, k) for k in keys})

    @classmethod
    def from_json(cls, line: str) -> "MetricReport":
        return cls(**json.loads(line))


def evaluate_volumes(synth: Volume3D, truth: Volume3D, truth_mask: Volume3D | None = None,
                     data_range: float = 1.0, axis: str = "z", segmentation: str = "otsu") -> MetricReport:
    """Per-slice PSNR/SSIM (averaged) and 3D overlap/connectivity of the segmented synthesis."""
    if synth.dims != truth.dims:
        raise ValueError(f"dims differ: {synth.dims} vs {truth.dims}")
    s_slices = extract_slices(synth, axis)
    t_slices = extract_slices(truth, axis)
    ps = [psnr(a, b, data_range) for a, b in zip(s_slices, t_slices)]
    window = min(SSIM_WINDOW, *s_slices[0].shape)
    ss = [ssim(a, b, data_range, window) for a, b in zip(s_slices, t_slices)]
    seg = segment_vessels(synth, segmentation)
    ref = truth_mask if truth_mask is not None else segment_vessels(truth, segmentation)
    return MetricReport(float(np.mean(ps)), float(np.mean(ss)), dice(seg, ref), jaccard(seg, ref),
                        connectivity_score(seg), len(s_slices), ps, ss)
