"""Long-short range encoder: shared shallow features plus base and detail branches.

Every block keeps the input resolution. Tensors are ``(B, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    pass


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    restormer_blocks: int = 4
    attention_heads: int = 4
    lt_blocks: int = 2
    inn_blocks: int = 2
    ffn_expansion: float = 2.0
    lt_pool: int = 4

    def __post_init__(self):
        if self.embed_dim % self.attention_heads:
            raise ConfigurationError("embed_dim must be divisible by attention_heads")
        if self.embed_dim % 2:
            raise ConfigurationError("embed_dim must be even for the coupling split")
        if (self.embed_dim // 2) % self.attention_heads:
            raise ConfigurationError("embed_dim / 2 must be divisible by attention_heads")
        for name in ("restormer_blocks", "lt_blocks", "inn_blocks"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")


@dataclass
class FeatureBundle:
    shared: torch.Tensor
    base: torch.Tensor
    detail: torch.Tensor


class LayerNorm2d(nn.Module):
    """Layer norm over the channel axis at every pixel."""

    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = x.var(1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + 1e-5)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class TransposedAttention(nn.Module):
    """Multi-head attention across channels (covariance over all pixels)."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.proj = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv_dw(self.qkv(x)).chunk(3, dim=1)
        q = F.normalize(q.reshape(b, self.heads, c // self.heads, h * w), dim=-1)
        k = F.normalize(k.reshape(b, self.heads, c // self.heads, h * w), dim=-1)
        v = v.reshape(b, self.heads, c // self.heads, h * w)
        attn = (q @ k.transpose(-2, -1)) * self.temperature
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.reshape(b, c, h, w))


class GatedFeedForward(nn.Module):
    def __init__(self, dim, expansion=2.0):
        super().__init__()
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden * 2, 1)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2)
        self.project_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class RestormerBlock(nn.Module):
    def __init__(self, dim, heads, expansion=2.0):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = TransposedAttention(dim, heads)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GatedFeedForward(dim, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class PooledSelfAttention(nn.Module):
    """Spatial self-attention whose keys/values come from an average-pooled grid.

    Every query pixel sees the whole image, at a cost linear in H·W.
    """

    def __init__(self, dim, heads, pool=4):
        super().__init__()
        self.heads = heads
        self.pool = pool
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Conv2d(dim, dim, 1)
        self.kv = nn.Conv2d(dim, dim * 2, 1)
        self.proj = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        d = c // self.heads
        q = self.q(x).reshape(b, self.heads, d, h * w).transpose(-2, -1)
        ph, pw = -(-h // self.pool), -(-w // self.pool)
        k, v = self.kv(F.adaptive_avg_pool2d(x, (ph, pw))).chunk(2, dim=1)
        k = k.reshape(b, self.heads, d, ph * pw)
        v = v.reshape(b, self.heads, d, ph * pw).transpose(-2, -1)
        attn = (q @ k * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(-2, -1).reshape(b, c, h, w)
        return self.proj(out)


class LiteTransformerBlock(nn.Module):
    """Half the channels go through global attention, half through local convolution."""

    def __init__(self, dim, heads, expansion=2.0, pool=4):
        super().__init__()
        half = dim // 2
        self.norm1 = LayerNorm2d(dim)
        self.global_branch = PooledSelfAttention(half, heads, pool)
        self.local_branch = nn.Sequential(
            nn.Conv2d(half, half, 1),
            nn.Conv2d(half, half, 3, padding=1, groups=half),
            nn.GELU(),
            nn.Conv2d(half, half, 1),
        )
        self.merge = nn.Conv2d(dim, dim, 1)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GatedFeedForward(dim, expansion)

    def forward(self, x):
        y = self.norm1(x)
        g, l = y.chunk(2, dim=1)
        x = x + self.merge(torch.cat([self.global_branch(g), self.local_branch(l)], dim=1))
        return x + self.ffn(self.norm2(x))


class _EdgePad(nn.Module):
    """1-pixel reflect padding; replicate when a side is too short to reflect."""

    def forward(self, x):
        mode = "reflect" if min(x.shape[-2:]) > 1 else "replicate"
        return F.pad(x, (1, 1, 1, 1), mode=mode)


class InvertedResidual(nn.Module):
    def __init__(self, dim, expansion=2):
        super().__init__()
        hidden = dim * expansion
        self.body = nn.Sequential(
            nn.Conv2d(dim, hidden, 1, bias=False),
            nn.ReLU6(),
            _EdgePad(),
            nn.Conv2d(hidden, hidden, 3, groups=hidden, bias=False),
            nn.ReLU6(),
            nn.Conv2d(hidden, dim, 1, bias=False),
        )

    def forward(self, x):
        return self.body(x)

    def zero_(self):
        nn.init.zeros_(self.body[-1].weight)


class AffineCoupling(nn.Module):
    """Additive-then-affine coupling; exactly invertible for any weights.

    Forward: ``z2 += phi(z1); z1 = z1 * exp(rho(z2)) + eta(z2)``.
    """

    def __init__(self, dim):
        super().__init__()
        half = dim // 2
        self.phi = InvertedResidual(half)
        self.rho = InvertedResidual(half)
        self.eta = InvertedResidual(half)

    def forward(self, x):
        z1, z2 = x.chunk(2, dim=1)
        z2 = z2 + self.phi(z1)
        z1 = z1 * torch.exp(self.rho(z2)) + self.eta(z2)
        return torch.cat([z1, z2], dim=1)

    def inverse(self, y):
        z1, z2 = y.chunk(2, dim=1)
        z1 = (z1 - self.eta(z2)) * torch.exp(-self.rho(z2))
        z2 = z2 - self.phi(z1)
        return torch.cat([z1, z2], dim=1)

    def zero_(self):
        for net in (self.phi, self.rho, self.eta):
            net.zero_()


def _swap_halves(x):
    a, b = x.chunk(2, dim=1)
    return torch.cat([b, a], dim=1)


class SharedFeatureEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, in_channels=1):
        super().__init__()
        self.embed = nn.Conv2d(in_channels, cfg.embed_dim, 3, padding=1)
        self.blocks = nn.Sequential(*[
            RestormerBlock(cfg.embed_dim, cfg.attention_heads, cfg.ffn_expansion)
            for _ in range(cfg.restormer_blocks)])

    def forward(self, image):
        return self.blocks(self.embed(image))


class BaseTransformerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.blocks = nn.Sequential(*[
            LiteTransformerBlock(cfg.embed_dim, cfg.attention_heads, cfg.ffn_expansion, cfg.lt_pool)
            for _ in range(cfg.lt_blocks)])

    def forward(self, shared):
        return self.blocks(shared)


class DetailCNNEncoder(nn.Module):
    """Stack of affine couplings; the halves swap roles between blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.embed_dim % 2:
            raise ConfigurationError("detail encoder needs an even channel count")
        self.blocks = nn.ModuleList(AffineCoupling(cfg.embed_dim) for _ in range(cfg.inn_blocks))

    def forward(self, shared):
        if shared.shape[1] % 2:
            raise ConfigurationError(f"odd channel count {shared.shape[1]}")
        x = shared
        for k, block in enumerate(self.blocks):
            if k:
                x = _swap_halves(x)
            x = block(x)
        return x

    def inverse(self, detail):
        x = detail
        for k in reversed(range(len(self.blocks))):
            x = self.blocks[k].inverse(x)
            if k:
                x = _swap_halves(x)
        return x

    def zero_(self):
        for block in self.blocks:
            block.zero_()


class LSREncoder(nn.Module):
    """One encoder shared by both modalities."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.sfe = SharedFeatureEncoder(self.cfg)
        self.bte = BaseTransformerEncoder(self.cfg)
        self.dce = DetailCNNEncoder(self.cfg)

    def forward(self, image) -> FeatureBundle:
        shared = self.sfe(image)
        return FeatureBundle(shared, self.bte(shared), self.dce(shared))
