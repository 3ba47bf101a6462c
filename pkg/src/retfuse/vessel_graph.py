"""Vessel topology graphs from binary vessel masks.

Nodes are skeleton endpoints and branch points, given as ``(x, y)`` =
(column, row). Edges join two nodes whenever a skeleton path connects them
without passing through a third node.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import apply_hysteresis_threshold, sato
from skimage.morphology import remove_small_objects, thin

MIN_EDGE_LENGTH = 3

_EIGHT = np.ones((3, 3), dtype=int)
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
# 4-connected moves first so staircase walks prefer the direct step
_OFFSETS_WALK = sorted(_OFFSETS, key=lambda d: abs(d[0]) + abs(d[1]))


@dataclass
class VesselGraph:
    nodes: np.ndarray
    edges: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        h, w = self.image_size
        n = len(self.nodes)
        if n:
            x, y = self.nodes[:, 0], self.nodes[:, 1]
            if (x < 0).any() or (x >= w).any() or (y < 0).any() or (y >= h).any():
                raise ValueError("node coordinates out of bounds")
            if len({tuple(p) for p in self.nodes.tolist()}) != n:
                raise ValueError("node coordinates must be unique")
        if len(self.edges):
            i, j = self.edges[:, 0], self.edges[:, 1]
            if (i >= j).any():
                raise ValueError("edges must be stored once with i < j")
            if (i < 0).any() or (j >= n).any():
                raise ValueError("edge references a missing node")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @classmethod
    def empty(cls, image_size) -> "VesselGraph":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), image_size)

    def edge_set(self) -> set[tuple[tuple[int, int], tuple[int, int]]]:
        """Edges as unordered pairs of coordinates (label-free comparison)."""
        out = set()
        for i, j in self.edges.tolist():
            a, b = tuple(self.nodes[i].tolist()), tuple(self.nodes[j].tolist())
            out.add((min(a, b), max(a, b)))
        return out

    def node_set(self) -> set[tuple[int, int]]:
        return {tuple(p) for p in self.nodes.tolist()}

    def to_dict(self) -> dict:
        return {"image_size": list(self.image_size),
                "nodes": self.nodes.tolist(),
                "edges": self.edges.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "VesselGraph":
        return cls(np.array(d["nodes"]), np.array(d["edges"]), tuple(d["image_size"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "VesselGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _canonical(nodes: Sequence, edges, image_size) -> VesselGraph:
    """Sort nodes in raster order (row, col) and reindex edges."""
    nodes = [tuple(int(v) for v in p) for p in nodes]
    order = sorted(range(len(nodes)), key=lambda k: (nodes[k][1], nodes[k][0]))
    remap = {old: new for new, old in enumerate(order)}
    pairs = set()
    for i, j in edges:
        a, b = remap[i], remap[j]
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    return VesselGraph(np.array([nodes[k] for k in order]).reshape(-1, 2),
                       np.array(sorted(pairs)).reshape(-1, 2), image_size)


# ---------------------------------------------------------------- segmentation

def segment_vessels(image: np.ndarray, mask: Optional[np.ndarray] = None,
                    sigmas: Sequence[float] = (1.0, 1.5, 2.0),
                    low: float = 0.3, high: float = 0.6,
                    min_size: int = 10) -> np.ndarray:
    """Binary vessel mask.

    With ``mask`` given, it is returned unchanged (external segmentations are
    the preferred path). Otherwise a multiscale Sato ridge response, in
    whichever polarity (dark or bright vessels) peaks higher, is
    hysteresis-thresholded relative to its maximum.
    """
    if mask is not None:
        return np.asarray(mask, dtype=bool)
    image = np.asarray(image, dtype=np.float64)
    if np.ptp(image) == 0:
        return np.zeros(image.shape, dtype=bool)
    dark = sato(image, sigmas=sigmas, black_ridges=True, mode="reflect")
    bright = sato(image, sigmas=sigmas, black_ridges=False, mode="reflect")
    # one polarity per image: background edges of the other polarity would leak in
    resp = dark if dark.max() >= bright.max() else bright
    peak = resp.max()
    if peak <= 1e-6:
        return np.zeros(image.shape, dtype=bool)
    resp = resp / peak
    out = apply_hysteresis_threshold(resp, low, high)
    if min_size:
        out = remove_small_objects(out, min_size=min_size, connectivity=2)
    return out


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom


# ---------------------------------------------------------------- skeleton

def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Topology-preserving thinning to 1-pixel-wide, 8-connected curves."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    return thin(mask)


def neighbour_count(skeleton: np.ndarray) -> np.ndarray:
    s = skeleton.astype(int)
    return ndimage.convolve(s, _EIGHT, mode="constant") - s


# ---------------------------------------------------------------- graph extraction

def _trace_raw(skeleton: np.ndarray):
    """Node clusters and skeleton-path edges (with lengths), before pruning."""
    sk = np.asarray(skeleton, dtype=bool)
    h, w = sk.shape
    nb = neighbour_count(sk) * sk
    endpoints = sk & (nb <= 1)  # isolated pixels count as degenerate endpoints
    junction = sk & (nb >= 3)

    # junction pixels that touch merge into one node at their centroid
    jlab, nj = ndimage.label(junction, structure=_EIGHT)
    node_label = np.full((h, w), -1, dtype=np.int64)
    coords: list[tuple[int, int]] = []
    for k, sl in enumerate(ndimage.find_objects(jlab)):
        rows, cols = np.nonzero(jlab[sl] == k + 1)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        node_label[rows, cols] = len(coords)
        coords.append((int(np.floor(cols.mean() + 0.5)), int(np.floor(rows.mean() + 0.5))))
    for r, c in zip(*np.nonzero(endpoints)):
        node_label[r, c] = len(coords)
        coords.append((int(c), int(r)))

    def neighbours(r, c, offsets=_OFFSETS):
        for dr, dc in offsets:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and sk[rr, cc]:
                yield rr, cc

    edges: dict[tuple[int, int], int] = {}
    visited = np.zeros((h, w), dtype=bool)

    def add_edge(a, b, length):
        if a == b:
            return
        key = (min(a, b), max(a, b))
        edges[key] = min(length, edges.get(key, length))

    for r, c in sorted(zip(*np.nonzero(node_label >= 0))):
        start = node_label[r, c]
        for qr, qc in neighbours(r, c):
            q_node = node_label[qr, qc]
            if q_node >= 0:
                add_edge(start, q_node, 1)
                continue
            if visited[qr, qc]:
                continue
            walk = [(qr, qc)]
            visited[qr, qc] = True
            end = None
            while end is None:
                cr, cc_ = walk[-1]
                others = [node_label[p] for p in neighbours(cr, cc_)
                          if node_label[p] >= 0 and node_label[p] != start]
                if others:
                    end = others[0]
                    break
                nxt = [p for p in neighbours(cr, cc_, _OFFSETS_WALK) if node_label[p] < 0
                       and not visited[p]]
                if nxt:
                    visited[nxt[0]] = True
                    walk.append(nxt[0])
                    continue
                end = start  # closed back on the start node, or dead end
            add_edge(start, end, len(walk) + 1)

    # cycles with no endpoint or junction get a single anchor node
    lab, nlab = ndimage.label(sk, structure=_EIGHT)
    has_node = np.zeros(nlab + 1, dtype=bool)
    has_node[lab[node_label >= 0]] = True
    for k in range(1, nlab + 1):
        if not has_node[k]:
            rows, cols = np.nonzero(lab == k)
            coords.append((int(cols[0]), int(rows[0])))
    return coords, edges


def _prune_spurs(coords, edges: dict, min_length: int):
    """Drop endpoint-to-junction edges shorter than ``min_length``.

    A junction left with exactly two edges stops being a branch point and is
    dissolved into one longer edge.
    """
    adj: dict[int, dict[int, int]] = {i: {} for i in range(len(coords))}
    for (a, b), ln in edges.items():
        adj[a][b] = ln
        adj[b][a] = ln
    degree0 = {i: len(v) for i, v in adj.items()}
    removed_nodes = set()
    touched = set()
    for (a, b), ln in sorted(edges.items()):
        if ln >= min_length:
            continue
        for tip, hub in ((a, b), (b, a)):
            if degree0[tip] == 1 and degree0[hub] >= 3 and b in adj[a]:
                del adj[tip][hub]
                del adj[hub][tip]
                removed_nodes.add(tip)
                touched.add(hub)
                break
    for hub in sorted(touched):
        nbrs = list(adj[hub].items())
        if len(nbrs) == 2:
            (u, lu), (v, lv) = nbrs
            del adj[u][hub]
            del adj[v][hub]
            adj[hub] = {}
            removed_nodes.add(hub)
            if u != v:
                ln = lu + lv
                adj[u][v] = min(ln, adj[u].get(v, ln))
                adj[v][u] = adj[u][v]
    keep = [i for i in range(len(coords)) if i not in removed_nodes]
    remap = {old: new for new, old in enumerate(keep)}
    new_edges = {}
    for a in keep:
        for b, ln in adj[a].items():
            if a < b and b in remap:
                new_edges[(remap[a], remap[b])] = ln
    return [coords[i] for i in keep], new_edges


def extract_graph(skeleton: np.ndarray, min_edge_length: int = MIN_EDGE_LENGTH) -> VesselGraph:
    skeleton = np.asarray(skeleton, dtype=bool)
    if not skeleton.any():
        return VesselGraph.empty(skeleton.shape)
    coords, edges = _trace_raw(skeleton)
    if min_edge_length > 1:
        coords, edges = _prune_spurs(coords, edges, min_edge_length)
    # two junction clusters can round onto the same pixel; merge them
    unique: dict[tuple[int, int], int] = {}
    remap = {}
    for i, p in enumerate(coords):
        remap[i] = unique.setdefault(p, len(unique))
    merged = [(remap[a], remap[b]) for a, b in edges]
    return _canonical(list(unique), merged, skeleton.shape)


def graph_from_mask(mask: np.ndarray, min_edge_length: int = MIN_EDGE_LENGTH) -> VesselGraph:
    return extract_graph(skeletonize(mask), min_edge_length)


def scale_graph(graph: VesselGraph, new_size: tuple[int, int]) -> VesselGraph:
    """Map node coordinates onto a resized pixel grid (pixel-centre aligned)."""
    new_size = (int(new_size[0]), int(new_size[1]))
    if min(new_size) <= 0:
        raise ValueError("new_size must be positive")
    if new_size == graph.image_size:
        return VesselGraph(graph.nodes.copy(), graph.edges.copy(), graph.image_size)
    h, w = graph.image_size
    nh, nw = new_size
    if graph.num_nodes == 0:
        return VesselGraph.empty(new_size)
    x = (graph.nodes[:, 0] + 0.5) * (nw / w) - 0.5
    y = (graph.nodes[:, 1] + 0.5) * (nh / h) - 0.5
    x = np.clip(np.floor(x + 0.5), 0, nw - 1).astype(int)
    y = np.clip(np.floor(y + 0.5), 0, nh - 1).astype(int)
    unique: dict[tuple[int, int], int] = {}
    remap = {}
    for i, p in enumerate(zip(x.tolist(), y.tolist())):
        remap[i] = unique.setdefault(p, len(unique))
    edges = [(remap[a], remap[b]) for a, b in graph.edges.tolist()]
    return _canonical(list(unique), edges, new_size)


def adjacency_lists(graph: VesselGraph) -> list[list[int]]:
    adj = [[] for _ in range(graph.num_nodes)]
    for i, j in graph.edges.tolist():
        adj[i].append(j)
        adj[j].append(i)
    return adj
