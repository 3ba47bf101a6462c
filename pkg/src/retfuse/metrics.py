"""Fusion quality metrics: EN, SD, SF, MI, SCD, VIF, Q^AB/F and SSIM.

Inputs are quantised to 8-bit luminance first (floats in [0, 1] are scaled
by 255; integer arrays are taken as-is), then evaluated in float64.

Two-source conventions: MI is the sum over sources, SCD the sum of both
cross terms, VIF and SSIM the mean over sources, and Q^AB/F the
edge-strength-weighted combination of both sources.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

COLUMNS = ("EN", "SD", "SF", "MI", "SCD", "VIF", "QABF", "SSIM")

# Q^AB/F sigmoid constants (Xydeas & Petrovic)
QABF_PARAMS = {"Tg": 0.9994, "kg": -15.0, "Dg": 0.5, "Ta": 0.9879, "ka": -22.0, "Da": 0.8}
VIF_SIGMA_NSQ = 2.0
VIF_SCALES = 4
SSIM_PARAMS = {"window": 11, "sigma": 1.5, "K1": 0.01, "K2": 0.03, "L": 255.0}

REPORT_HEADER = (
    "MI=sum over sources; SCD=sum of both cross terms; VIF,SSIM=mean over sources; "
    f"QABF constants={QABF_PARAMS}; VIF sigma_nsq={VIF_SIGMA_NSQ}, scales={VIF_SCALES}; "
    f"SSIM={SSIM_PARAMS}"
)


@dataclass
class MetricReport:
    EN: float
    SD: float
    SF: float
    MI: float
    SCD: float
    VIF: float
    QABF: float
    SSIM: float

    def row(self) -> list[float]:
        return [getattr(self, c) for c in COLUMNS]


def quantize(img) -> np.ndarray:
    a = np.asarray(img)
    if np.issubdtype(a.dtype, np.integer):
        return np.clip(a, 0, 255).astype(np.float64)
    if a.dtype == bool:
        return a.astype(np.float64) * 255.0
    return np.round(np.clip(a.astype(np.float64), 0.0, 1.0) * 255.0)


def _check_shapes(*imgs):
    shapes = {np.shape(i) for i in imgs}
    if len(shapes) != 1:
        raise ValueError(f"images must share a shape, got {sorted(shapes)}")
    if len(next(iter(shapes))) != 2:
        raise ValueError("metrics expect single-channel 2-D images")


# ---------------------------------------------------------------- intensity statistics

def _entropy_from_counts(counts: np.ndarray) -> float:
    p = counts[counts > 0].astype(np.float64) / counts.sum()
    return float(-(p * np.log2(p)).sum())


def entropy(img) -> float:
    q = quantize(img).astype(np.int64)
    return _entropy_from_counts(np.bincount(q.ravel(), minlength=256))


def standard_deviation(img) -> float:
    return float(np.std(quantize(img)))


def spatial_frequency(img) -> float:
    q = quantize(img)
    rf = np.mean((q[:, 1:] - q[:, :-1]) ** 2) if q.shape[1] > 1 else 0.0
    cf = np.mean((q[1:, :] - q[:-1, :]) ** 2) if q.shape[0] > 1 else 0.0
    return float(np.sqrt(rf + cf))


def intensity_stats(fused) -> tuple[float, float, float]:
    return entropy(fused), standard_deviation(fused), spatial_frequency(fused)


# ---------------------------------------------------------------- information metrics

def mutual_information(a, b) -> float:
    """MI in bits from the 256x256 joint histogram, as H(a) + H(b) - H(a, b)."""
    qa = quantize(a).astype(np.int64).ravel()
    qb = quantize(b).astype(np.int64).ravel()
    joint = np.bincount(qa * 256 + qb, minlength=256 * 256)
    ha = _entropy_from_counts(np.bincount(qa, minlength=256))
    hb = _entropy_from_counts(np.bincount(qb, minlength=256))
    hab = _entropy_from_counts(joint)
    return max(0.0, ha + hb - hab)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac, bc = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((ac * ac).sum()) * float((bc * bc).sum()))
    return 0.0 if denom == 0 else float((ac * bc).sum()) / denom


def scd(fused, img1, img2) -> float:
    f, a, b = quantize(fused), quantize(img1), quantize(img2)
    return _pearson(f - b, a) + _pearson(f - a, b)


def information_metrics(fused, img1, img2) -> tuple[float, float]:
    _check_shapes(fused, img1, img2)
    return mutual_information(fused, img1) + mutual_information(fused, img2), scd(fused, img1, img2)


# ---------------------------------------------------------------- SSIM

def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(img, kernel):
    return ndimage.correlate(img, kernel, mode="mirror")


def ssim(a, b) -> float:
    """Mean Gaussian-window SSIM on 8-bit data; borders mirror-padded."""
    x, y = quantize(a), quantize(b)
    p = SSIM_PARAMS
    k = _gauss_kernel(p["window"], p["sigma"])
    mx, my = _filter(x, k), _filter(y, k)
    sxx = _filter(x * x, k) - mx * mx
    syy = _filter(y * y, k) - my * my
    sxy = _filter(x * y, k) - mx * my
    c1, c2 = (p["K1"] * p["L"]) ** 2, (p["K2"] * p["L"]) ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())


# ---------------------------------------------------------------- VIF

def _vif_window(scale: int) -> np.ndarray:
    n = 2 ** (VIF_SCALES - scale + 1) + 1
    return _gauss_kernel(n, n / 5.0)


def _decimate(img: np.ndarray) -> np.ndarray:
    """Halve each axis on a grid centred in the image.

    Odd lengths keep every other sample starting at 0; even lengths average
    neighbouring pairs. Either way the grid is mirror-symmetric, so the
    pyramid commutes with flips.
    """
    for axis in (0, 1):
        n = img.shape[axis]
        a = np.moveaxis(img, axis, 0)
        a = a[::2] if n % 2 else 0.5 * (a[0::2] + a[1::2])
        img = np.moveaxis(a, 0, axis)
    return img


def vif(reference, distorted) -> float:
    """Pixel-domain multiscale VIF of ``distorted`` against ``reference``.

    Four dyadic scales with Gaussian windows of size 17, 9, 5, 3. A scale
    whose image is smaller than the 3x3 coarsest window is skipped.
    """
    ref, dist = quantize(reference), quantize(distorted)
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        win = _vif_window(scale)
        if scale > 1:
            ref = _decimate(_filter(ref, win))
            dist = _decimate(_filter(dist, win))
        if min(ref.shape) < 3:
            log.warning("VIF scale %d skipped: image %s smaller than 3x3", scale, ref.shape)
            continue
        mu1, mu2 = _filter(ref, win), _filter(dist, win)
        s1 = np.maximum(_filter(ref * ref, win) - mu1 * mu1, 0.0)
        s2 = np.maximum(_filter(dist * dist, win) - mu2 * mu2, 0.0)
        s12 = _filter(ref * dist, win) - mu1 * mu2

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        low1 = s1 < eps
        g[low1] = 0
        sv[low1] = s2[low1]
        s1 = np.where(low1, 0.0, s1)
        low2 = s2 < eps
        g[low2] = 0
        sv[low2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        num += float(np.sum(np.log10(1 + g * g * s1 / (sv + VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1 + s1 / VIF_SIGMA_NSQ)))
    if den == 0:
        return 1.0
    return num / den


# ---------------------------------------------------------------- Q^AB/F

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def edge_strength_orientation(img) -> tuple[np.ndarray, np.ndarray]:
    q = quantize(img)
    sx = ndimage.correlate(q, _SOBEL_X, mode="mirror")
    sy = ndimage.correlate(q, _SOBEL_X.T, mode="mirror")
    g = np.sqrt(sx * sx + sy * sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(sx == 0, math.pi / 2, np.arctan(sy / np.where(sx == 0, 1.0, sx)))
    return g, a


def _edge_preservation(ga, aa, gf, af) -> np.ndarray:
    p = QABF_PARAMS
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ga > gf, gf / ga, np.where(ga < gf, ga / gf, 1.0))
    diff = np.abs(aa - af)
    diff = np.minimum(diff, math.pi - diff)  # orientations are defined modulo pi
    orient = 1.0 - diff / (math.pi / 2)
    qg = p["Tg"] / (1 + np.exp(p["kg"] * (ratio - p["Dg"])))
    qa = p["Ta"] / (1 + np.exp(p["ka"] * (orient - p["Da"])))
    return qg * qa


def qabf(fused, img1, img2) -> float:
    """Edge-strength weighted preservation of both sources' Sobel edges (0 if edge-free)."""
    g1, a1 = edge_strength_orientation(img1)
    g2, a2 = edge_strength_orientation(img2)
    gf, af = edge_strength_orientation(fused)
    q1 = _edge_preservation(g1, a1, gf, af)
    q2 = _edge_preservation(g2, a2, gf, af)
    den = float(np.sum(g1 + g2))
    if den == 0:
        return 0.0
    return float(np.sum(q1 * g1 + q2 * g2)) / den


def perceptual_metrics(fused, img1, img2) -> tuple[float, float, float]:
    _check_shapes(fused, img1, img2)
    v = 0.5 * (vif(img1, fused) + vif(img2, fused))
    s = 0.5 * (ssim(fused, img1) + ssim(fused, img2))
    return v, qabf(fused, img1, img2), s


# ---------------------------------------------------------------- reports

def evaluate_pair(fused, img1, img2) -> MetricReport:
    _check_shapes(fused, img1, img2)
    en, sd, sf = intensity_stats(fused)
    mi, scd_v = information_metrics(fused, img1, img2)
    v, q, s = perceptual_metrics(fused, img1, img2)
    return MetricReport(en, sd, sf, mi, scd_v, v, q, s)


def evaluate_batch(triples: Iterable[Sequence], workers: int = 1) -> list[MetricReport]:
    """Reports in input order; ``workers > 1`` evaluates pairs in a thread pool."""
    triples = list(triples)
    if workers <= 1:
        return [evaluate_pair(*t) for t in triples]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda t: evaluate_pair(*t), triples))


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    return MetricReport(*[float(np.mean([getattr(r, c) for r in reports])) for c in COLUMNS])


def write_csv(path, names: Sequence[str], reports: Sequence[MetricReport]) -> None:
    """One row per pair plus a ``mean`` row; a comment line documents conventions."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {REPORT_HEADER}\n")
        w = csv.writer(fh)
        w.writerow(("name",) + COLUMNS)
        for name, r in zip(names, reports):
            w.writerow([name] + [f"{v:.6f}" for v in r.row()])
        if reports:
            w.writerow(["mean"] + [f"{v:.6f}" for v in mean_report(reports).row()])


def read_csv(path) -> dict[str, MetricReport]:
    out = {}
    with open(path) as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    for rec in csv.DictReader(rows):
        out[rec["name"]] = MetricReport(*[float(rec[c]) for c in COLUMNS])
    return out
