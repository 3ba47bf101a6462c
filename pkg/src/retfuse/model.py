"""The full fusion network: shared encoder, topology encoder, fusion layers, decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .config import TrainConfig
from .decoder import Decoder, FeatureFusion, FusedFeatureSet
from .encoder import FeatureBundle, LSREncoder
from .topology import TopologyAwareEncoder
from .vessel_graph import VesselGraph


@dataclass
class ModalityFeatures:
    bundle: FeatureBundle
    graph: torch.Tensor


class FusionNet(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = LSREncoder(cfg.encoder)
        self.tae = TopologyAwareEncoder(cfg.tae) if cfg.uses_graph else None
        self.fusion = FeatureFusion(cfg.encoder.embed_dim)
        self.decoder = Decoder(cfg.decoder)

    def encode(self, image: torch.Tensor, graph: VesselGraph) -> ModalityFeatures:
        bundle = self.encoder(image)
        if self.tae is None:
            g = torch.zeros_like(bundle.base)
        else:
            g = self.tae(bundle.base, bundle.detail, graph)
        return ModalityFeatures(bundle, g)

    def reconstruct(self, feats: ModalityFeatures) -> torch.Tensor:
        return self.decoder.reconstruct(feats.bundle, feats.graph)

    def fuse_features(self, f1: ModalityFeatures, f2: ModalityFeatures) -> FusedFeatureSet:
        return self.fusion(f1.bundle, f2.bundle, f1.graph, f2.graph)

    def fuse_stage2(self, f1: ModalityFeatures, f2: ModalityFeatures) -> torch.Tensor:
        return self.decoder(self.fuse_features(f1, f2).concat())

    def forward(self, img1, img2, graph1: VesselGraph, graph2: VesselGraph) -> torch.Tensor:
        return self.fuse_stage2(self.encode(img1, graph1), self.encode(img2, graph2))

    def reset_fusion(self, seed: Optional[int] = None):
        """Fresh fusion layers, as at the start of the second stage."""
        gen_state = torch.random.get_rng_state()
        if seed is not None:
            torch.manual_seed(seed)
        self.fusion = FeatureFusion(self.cfg.encoder.embed_dim).to(
            next(self.decoder.parameters()).dtype)
        if seed is not None:
            torch.random.set_rng_state(gen_state)
