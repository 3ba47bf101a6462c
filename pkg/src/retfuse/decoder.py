"""Feature fusion layers and the image decoder shared by both training stages."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import FeatureBundle, RestormerBlock


@dataclass
class DecoderConfig:
    embed_dim: int = 64
    blocks: int = 4
    heads: int = 4
    ffn_expansion: float = 2.0
    use_base_detail: bool = True
    use_graph: bool = True


@dataclass
class FusedFeatureSet:
    base: torch.Tensor
    detail: torch.Tensor
    graph: torch.Tensor

    def concat(self) -> torch.Tensor:
        return torch.cat([self.base, self.detail, self.graph], dim=1)


class PairFusion(nn.Module):
    """Concatenate the two modalities' maps and mix back to one map with a 3x3 conv."""

    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv2d(2 * dim, dim, 3, padding=1)

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.conv(torch.cat([a, b], dim=1))

    @torch.no_grad()
    def set_average_(self):
        """Weights that make the output the elementwise mean of the two inputs."""
        dim = self.conv.out_channels
        self.conv.weight.zero_()
        self.conv.bias.zero_()
        for c in range(dim):
            self.conv.weight[c, c, 1, 1] = 0.5
            self.conv.weight[c, dim + c, 1, 1] = 0.5


class FeatureFusion(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.base = PairFusion(dim)
        self.detail = PairFusion(dim)
        self.graph = PairFusion(dim)

    def forward(self, b1: FeatureBundle, b2: FeatureBundle, g1, g2) -> FusedFeatureSet:
        return FusedFeatureSet(self.base(b1.base, b2.base),
                               self.detail(b1.detail, b2.detail),
                               self.graph(g1, g2))

    def set_average_(self):
        for f in (self.base, self.detail, self.graph):
            f.set_average_()


class Decoder(nn.Module):
    """(base, detail, graph) channel stack -> single-channel image in [0, 1].

    Ablations drop feature groups by zeroing their input channels, so the
    weight shapes stay the same across variants.
    """

    def __init__(self, cfg: DecoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or DecoderConfig()
        d = self.cfg.embed_dim
        self.reduce = nn.Conv2d(3 * d, d, 1)
        self.blocks = nn.Sequential(*[RestormerBlock(d, self.cfg.heads, self.cfg.ffn_expansion)
                                      for _ in range(self.cfg.blocks)])
        self.out = nn.Conv2d(d, 1, 3, padding=1)
        mask = torch.ones(3 * d)
        if not self.cfg.use_base_detail:
            mask[: 2 * d] = 0
        if not self.cfg.use_graph:
            mask[2 * d:] = 0
        self.register_buffer("channel_mask", mask[None, :, None, None], persistent=False)

    def forward(self, features):
        if features.shape[1] != self.reduce.in_channels:
            raise ValueError(f"decoder expects {self.reduce.in_channels} channels, "
                             f"got {features.shape[1]}")
        x = self.reduce(features * self.channel_mask.to(features.dtype))
        return torch.sigmoid(self.out(self.blocks(x)))

    def reconstruct(self, bundle: FeatureBundle, graph_features):
        return self(torch.cat([bundle.base, bundle.detail, graph_features], dim=1))
