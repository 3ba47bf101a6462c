"""Training objectives for the reconstruction stage and the fusion stage.

Image tensors are ``(B, 1, H, W)`` or ``(H, W)`` with values in [0, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 2.0
    alpha3: float = 0.5
    alpha4: float = 10.0
    alpha5: float = 2.0
    mu: float = 5.0
    eps: float = 1.01

    def __post_init__(self):
        if self.eps <= 1.0:
            raise ValueError("eps must exceed 1 so CC_B + eps stays positive")
        for k in ("alpha1", "alpha2", "alpha3", "alpha4", "alpha5", "mu"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")


@dataclass
class LossReport:
    total: torch.Tensor
    terms: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {"total": float(self.total.detach())}
        out.update({k: (None if v is None else float(v.detach())) for k, v in self.terms.items()})
        return out


def _as4d(x: torch.Tensor) -> torch.Tensor:
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


# ---------------------------------------------------------------- SSIM

def gaussian_window(size=11, sigma=1.5, dtype=torch.float64, device=None):
    r = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x: torch.Tensor, y: torch.Tensor, data_range=1.0, window=11, sigma=1.5,
         k1=0.01, k2=0.03) -> torch.Tensor:
    """Mean SSIM with a Gaussian window; borders are reflect-padded."""
    x, y = _as4d(x), _as4d(y)
    c = x.shape[1]
    w = gaussian_window(window, sigma, x.dtype, x.device).expand(c, 1, window, window)
    pad = window // 2

    def filt(t):
        return F.conv2d(F.pad(t, (pad,) * 4, mode="reflect"), w, groups=c)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return smap.mean()


# ---------------------------------------------------------------- stage I terms

def recon_loss(target, recon, mu=5.0, reduction="sum") -> torch.Tensor:
    """Squared-L2 intensity error plus ``mu * (1 - SSIM)``.

    ``reduction="sum"`` gives the plain squared norm; ``"mean"`` divides it by
    the pixel count.
    """
    if target.shape != recon.shape:
        raise ValueError("shape mismatch")
    sq = (target - recon) ** 2
    intensity = sq.sum() if reduction == "sum" else sq.mean()
    return intensity + mu * (1.0 - ssim(target, recon))


def correlation(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pearson correlation over all elements; 0 when either side is constant."""
    a = a.reshape(-1)
    b = b.reshape(-1)
    ac, bc = a - a.mean(), b - b.mean()
    denom2 = (ac * ac).sum() * (bc * bc).sum()
    ok = denom2 > 0
    safe = torch.where(ok, denom2, torch.ones_like(denom2))
    return torch.where(ok, (ac * bc).sum() / torch.sqrt(safe), torch.zeros_like(denom2))


def decomp_loss(base1, base2, detail1, detail2, eps=1.01) -> torch.Tensor:
    """(CC of detail maps)^2 / (CC of base maps + eps)."""
    if base1.shape != base2.shape or detail1.shape != detail2.shape:
        raise ValueError("shape mismatch")
    return correlation(detail1, detail2) ** 2 / (correlation(base1, base2) + eps)


def graph_loss(g1, g2) -> Optional[torch.Tensor]:
    """1 - cosine similarity of the flattened maps; ``None`` when both are zero."""
    if g1.shape != g2.shape:
        raise ValueError("shape mismatch")
    a, b = g1.reshape(-1), g2.reshape(-1)
    n1, n2 = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    z1, z2 = float(n1.detach()) == 0.0, float(n2.detach()) == 0.0
    if z1 and z2:
        return None
    if z1 or z2:
        return torch.ones((), dtype=a.dtype, device=a.device) - 0.0 * (a.sum() + b.sum())
    return 1.0 - (a @ b) / (n1 * n2)


# ---------------------------------------------------------------- stage II terms

def stage2_intensity_loss(fused, img1, img2) -> torch.Tensor:
    return (fused - torch.maximum(img1, img2)).abs().mean()


def sobel_magnitude(img: torch.Tensor) -> torch.Tensor:
    """|∇I| from 3x3 Sobel responses with reflect padding; zero-safe gradient.

    Computed as a [1, 2, 1] smoothing followed by a central difference, so a
    constant image gives exactly zero.
    """
    x = F.pad(_as4d(img), (1, 1, 1, 1), mode="reflect")
    rows = x[..., :-2, :] + 2 * x[..., 1:-1, :] + x[..., 2:, :]
    cols = x[..., :, :-2] + 2 * x[..., :, 1:-1] + x[..., :, 2:]
    gx = rows[..., :, 2:] - rows[..., :, :-2]
    gy = cols[..., 2:, :] - cols[..., :-2, :]
    sq = gx * gx + gy * gy
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def grad_loss(fused, img1, img2) -> torch.Tensor:
    target = torch.maximum(sobel_magnitude(img1), sobel_magnitude(img2))
    return (sobel_magnitude(fused) - target).abs().mean()


# ---------------------------------------------------------------- totals

def _check(parts: Mapping[str, Optional[torch.Tensor]]):
    for name, v in parts.items():
        if v is not None and not math.isfinite(float(v.detach())):
            raise FloatingPointError(f"loss term {name!r} is not finite")


def _weighted(parts, coeffs) -> LossReport:
    _check(parts)
    total = None
    for name, coef in coeffs.items():
        v = parts.get(name)
        if v is None:
            continue
        total = coef * v if total is None else total + coef * v
    if total is None:
        total = torch.zeros(())
    return LossReport(total, dict(parts))


def total_stage1(parts: Mapping[str, Optional[torch.Tensor]], weights: LossWeights) -> LossReport:
    """``recon1 + a1*recon2 + a2*decomp + a3*graph``; a ``None`` graph term is skipped."""
    return _weighted(parts, {"recon1": 1.0, "recon2": weights.alpha1,
                             "decomp": weights.alpha2, "graph": weights.alpha3})


def total_stage2(parts: Mapping[str, Optional[torch.Tensor]], weights: LossWeights) -> LossReport:
    """``int + a3*graph + a4*grad + a5*decomp``."""
    return _weighted(parts, {"intensity": 1.0, "graph": weights.alpha3,
                             "grad": weights.alpha4, "decomp": weights.alpha5})
