"""Topology-aware encoder: spatial features -> vessel-graph nodes -> graph attention -> spatial map."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vessel_graph import VesselGraph


class NumericError(FloatingPointError):
    pass


@dataclass
class TAEConfig:
    in_dim: int = 64
    reduced_dim: int = 64
    patch_size: int = 21
    giu_layers: int = 2
    giu_heads: int = 12
    giu_head_dim: int = 64
    leaky_slope: float = 0.2
    g2s_kernel: int = 7
    g2s_dilation: int = 2
    attention: str = "gat"  # "gat" or "uniform" (plain neighbourhood mean)
    use_g2s: bool = True

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and positive")
        if self.giu_heads < 1:
            raise ValueError("giu_heads must be >= 1")
        if self.attention not in ("gat", "uniform"):
            raise ValueError(f"unknown attention mode {self.attention!r}")


@dataclass
class AttentionMap:
    """Coefficients per directed edge ``source -> target`` and head.

    ``index[0]`` holds the neighbour j, ``index[1]`` the receiving node i;
    ``alpha`` is ``(K, E)``.
    """
    index: torch.Tensor
    alpha: torch.Tensor

    def row_sums(self, num_nodes: int) -> torch.Tensor:
        out = torch.zeros(self.alpha.shape[0], num_nodes, dtype=self.alpha.dtype)
        return out.index_add_(1, self.index[1], self.alpha)

    def to_dict(self) -> dict:
        return {"source": self.index[0].tolist(), "target": self.index[1].tolist(),
                "alpha": self.alpha.detach().cpu().tolist()}


def neighbourhood_index(graph: VesselGraph, device=None) -> torch.Tensor:
    """Directed (j -> i) pairs: every undirected edge both ways plus a self-loop per node."""
    n = graph.num_nodes
    loops = np.stack([np.arange(n), np.arange(n)])
    e = graph.edges.T if graph.num_edges else np.zeros((2, 0), dtype=np.int64)
    both = np.concatenate([loops, e, e[::-1]], axis=1)
    return torch.as_tensor(both, dtype=torch.long, device=device)


def reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Whole-sample-symmetric reflection (edge pixel not repeated), any overshoot."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patches(features: torch.Tensor, nodes: np.ndarray, p: int) -> torch.Tensor:
    """``(C, H, W)`` map -> ``(N, C, p, p)`` patches centred on ``(x, y)`` nodes."""
    c, h, w = features.shape
    r = p // 2
    offs = np.arange(-r, r + 1)
    rows = reflect_indices(nodes[:, 1, None] + offs[None, :], h)  # (N, p)
    cols = reflect_indices(nodes[:, 0, None] + offs[None, :], w)
    rows_t = torch.as_tensor(rows, device=features.device)[:, :, None]
    cols_t = torch.as_tensor(cols, device=features.device)[:, None, :]
    # features[:, rows, cols] -> (C, N, p, p)
    return features[:, rows_t, cols_t].permute(1, 0, 2, 3)


class S2GReduce(nn.Module):
    """Concatenate base and detail maps and mix them down with a 1x1 convolution."""

    def __init__(self, in_dim, reduced_dim):
        super().__init__()
        self.conv = nn.Conv2d(2 * in_dim, reduced_dim, 1)

    def forward(self, base, detail):
        if base.shape != detail.shape:
            raise ValueError(f"shape mismatch {tuple(base.shape)} vs {tuple(detail.shape)}")
        return self.conv(torch.cat([base, detail], dim=1))


class NodePatchEncoder(nn.Module):
    def __init__(self, dim, patch_size=21, slope=0.2):
        super().__init__()
        self.patch_size = patch_size
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)
        self.slope = slope

    def forward(self, reduced: torch.Tensor, graph: VesselGraph) -> torch.Tensor:
        """``(C, H, W)`` reduced map -> ``(N, C)`` node features in node order."""
        if graph.num_nodes == 0:
            return reduced.new_zeros((0, reduced.shape[0]))
        patches = extract_patches(reduced, graph.nodes, self.patch_size)
        x = F.leaky_relu(self.conv1(patches), self.slope)
        x = F.leaky_relu(self.conv2(x), self.slope)
        return x.mean(dim=(2, 3))


def _segment_softmax(scores: torch.Tensor, target: torch.Tensor, n: int) -> torch.Tensor:
    """Softmax of ``(K, E)`` scores over edges sharing a target node."""
    k = scores.shape[0]
    idx = target.expand(k, -1)
    peak = scores.new_full((k, n), float("-inf")).scatter_reduce(
        1, idx, scores, reduce="amax", include_self=True)
    ex = torch.exp(scores - peak.gather(1, idx))
    denom = scores.new_zeros((k, n)).index_add_(1, target, ex)
    return ex / denom.gather(1, idx)


class GATLayer(nn.Module):
    """Multi-head graph attention; head outputs are averaged.

    Per head: ``H = X W``, ``e_ij = LeakyReLU(a^T [H_i || H_j])``, softmax over
    the neighbourhood of i (self included), ``out_i = ELU(sum_j alpha_ij H_j)``.
    """

    def __init__(self, in_dim, out_dim, heads, slope=0.2, attention="gat"):
        super().__init__()
        self.heads = heads
        self.slope = slope
        self.attention = attention
        self.weight = nn.Parameter(torch.empty(heads, in_dim, out_dim))
        self.att = nn.Parameter(torch.empty(heads, 2 * out_dim))
        nn.init.xavier_uniform_(self.weight.view(heads * in_dim, out_dim))
        nn.init.normal_(self.att, std=(2.0 / (2 * out_dim)) ** 0.5)

    @property
    def out_dim(self):
        return self.weight.shape[-1]

    def forward(self, x: torch.Tensor, index: torch.Tensor):
        if not torch.isfinite(x).all():
            raise NumericError("non-finite node features")
        n = x.shape[0]
        h = torch.einsum("nc,kcd->knd", x, self.weight)  # (K, N, D)
        src, dst = index[0], index[1]
        if self.attention == "uniform":
            deg = torch.zeros(n, dtype=x.dtype, device=x.device).index_add_(
                0, dst, torch.ones_like(dst, dtype=x.dtype))
            alpha = (1.0 / deg[dst]).expand(self.heads, -1)
        else:
            d = self.out_dim
            s_dst = torch.einsum("knd,kd->kn", h, self.att[:, :d])  # a_1 . H_i
            s_src = torch.einsum("knd,kd->kn", h, self.att[:, d:])  # a_2 . H_j
            e = F.leaky_relu(s_dst[:, dst] + s_src[:, src], self.slope)
            alpha = _segment_softmax(e, dst, n)
        msg = h[:, src, :] * alpha[..., None]
        agg = torch.zeros_like(h).index_add_(1, dst, msg)
        out = F.elu(agg).mean(dim=0)
        return out, AttentionMap(index, alpha)


class GraphInfoUpdate(nn.Module):
    def __init__(self, in_dim, cfg: TAEConfig):
        super().__init__()
        layers = []
        dim = in_dim
        for _ in range(cfg.giu_layers):
            layers.append(GATLayer(dim, cfg.giu_head_dim, cfg.giu_heads, cfg.leaky_slope, cfg.attention))
            dim = cfg.giu_head_dim
        self.layers = nn.ModuleList(layers)
        self.out_dim = dim

    def forward(self, x, graph: VesselGraph, return_attention=False):
        index = neighbourhood_index(graph, x.device)
        maps = []
        for layer in self.layers:
            x, amap = layer(x, index)
            maps.append(amap)
        return (x, maps) if return_attention else x


def scatter_nodes(values: torch.Tensor, nodes: np.ndarray, size) -> torch.Tensor:
    """``(N, C)`` -> ``(C, H, W)`` zero map with node vectors added at ``(x, y)``."""
    h, w = size
    c = values.shape[1]
    flat = values.new_zeros((h * w, c))
    if len(nodes):
        lin = torch.as_tensor(nodes[:, 1] * w + nodes[:, 0], device=values.device)
        flat = flat.index_add(0, lin, values)
    return flat.T.reshape(c, h, w)


class G2SDiffuse(nn.Module):
    """Scatter node features onto the grid and spread them with dilated convolutions."""

    def __init__(self, node_dim, out_dim, kernel=7, dilation=2, slope=0.2, diffuse=True):
        super().__init__()
        pad = dilation * (kernel // 2)
        self.diffuse = diffuse
        self.slope = slope
        self.conv1 = nn.Conv2d(node_dim, out_dim, kernel, padding=pad, dilation=dilation, bias=False)
        self.conv2 = nn.Conv2d(out_dim, out_dim, kernel, padding=pad, dilation=dilation, bias=False)
        self.skip = (nn.Identity() if node_dim == out_dim
                     else nn.Conv2d(node_dim, out_dim, 1, bias=False))
        if not diffuse:
            self.conv1 = self.conv2 = None

    @property
    def reach(self) -> int:
        """Chebyshev radius of the receptive field around one node."""
        if not self.diffuse:
            return 0
        k, d = self.conv1.kernel_size[0], self.conv1.dilation[0]
        return 2 * d * (k // 2)

    def forward(self, node_values, graph: VesselGraph, size):
        grid = scatter_nodes(node_values, graph.nodes, size)[None]
        out = self.skip(grid)
        if self.diffuse:
            y = F.leaky_relu(self.conv1(grid), self.slope)
            out = out + self.conv2(y)
        return out[0]


class TopologyAwareEncoder(nn.Module):
    """Φ^B, Φ^D and a vessel graph -> graph feature map Φ^G of the same spatial size."""

    def __init__(self, cfg: TAEConfig | None = None):
        super().__init__()
        self.cfg = cfg or TAEConfig()
        c = self.cfg
        self.reduce = S2GReduce(c.in_dim, c.reduced_dim)
        self.node_encoder = NodePatchEncoder(c.reduced_dim, c.patch_size, c.leaky_slope)
        self.giu = GraphInfoUpdate(c.reduced_dim, c)
        self.g2s = G2SDiffuse(self.giu.out_dim, c.in_dim, c.g2s_kernel, c.g2s_dilation,
                              c.leaky_slope, diffuse=c.use_g2s)

    def node_features(self, base, detail, graph: VesselGraph):
        reduced = self.reduce(base, detail)
        return self.node_encoder(reduced[0], graph)

    def forward(self, base, detail, graph: VesselGraph, return_attention=False):
        """``base``/``detail`` are ``(1, C, H, W)``; returns ``(1, C, H, W)``."""
        if base.shape[0] != 1:
            raise ValueError("the topology encoder runs one image (one graph) at a time")
        size = base.shape[-2:]
        if graph.num_nodes == 0:
            zero = base.new_zeros(base.shape)
            return (zero, []) if return_attention else zero
        nodes = self.node_features(base, detail, graph)
        nodes, maps = self.giu(nodes, graph, return_attention=True)
        out = self.g2s(nodes, graph, size)[None]
        return (out, maps) if return_attention else out
