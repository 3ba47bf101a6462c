"""Two-stage training, inference and the ablation runner."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from . import data_io, losses, metrics
from .checkpoint import CheckpointState, CheckpointVersionError
from .config import VARIANT_LABELS, VARIANTS, TrainConfig
from .data_io import AugmentationSpec, RegisteredPair
from .model import FusionNet
from .vessel_graph import VesselGraph, graph_from_mask, segment_vessels

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message, checkpoint: Optional[CheckpointState]):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------- data preparation

@dataclass
class PreparedPair:
    pair: RegisteredPair
    graph1: VesselGraph
    graph2: VesselGraph
    mask1: np.ndarray
    mask2: np.ndarray


class GraphCache:
    """Vessel graphs stored as JSON beside the data, keyed by a hash of the mask."""

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory else None
        self._memory: dict[str, VesselGraph] = {}
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(mask: np.ndarray) -> str:
        m = np.ascontiguousarray(mask, dtype=np.uint8)
        h = hashlib.sha256(m.tobytes())
        h.update(str(m.shape).encode())
        return h.hexdigest()[:24]

    def get(self, mask: np.ndarray) -> VesselGraph:
        k = self.key(mask)
        if k in self._memory:
            return self._memory[k]
        path = self.directory / f"{k}.graph.json" if self.directory else None
        if path is not None and path.exists():
            g = VesselGraph.load(path)
        else:
            g = graph_from_mask(mask)
            if path is not None:
                g.save(path)
        self._memory[k] = g
        return g


def prepare_pair(pair: RegisteredPair, size, cache: Optional[GraphCache] = None) -> PreparedPair:
    """Resize to the model grid, segment if no masks were supplied, extract graphs."""
    pair = data_io.resize_pair(pair, size)
    cache = cache or GraphCache()
    m1 = segment_vessels(pair.image1, pair.mask1)
    m2 = segment_vessels(pair.image2, pair.mask2)
    return PreparedPair(pair, cache.get(m1), cache.get(m2), m1, m2)


def prepare_dataset(dataset: Iterable[RegisteredPair], cfg: TrainConfig,
                    cache: Optional[GraphCache] = None) -> list[PreparedPair]:
    cache = cache or GraphCache()
    return [prepare_pair(p, cfg.input_size, cache) for p in dataset]


def augment_prepared(item: PreparedPair, spec: AugmentationSpec) -> PreparedPair:
    pair = data_io.augment(item.pair, spec)
    return PreparedPair(pair, data_io.augment_graph(item.graph1, spec),
                        data_io.augment_graph(item.graph2, spec), pair.mask1, pair.mask2)


def _tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(img), dtype=dtype)[None, None]


# ---------------------------------------------------------------- runtime setup

@contextmanager
def reproducible(cfg: TrainConfig):
    """Seed everything; in deterministic mode also pin one thread and deterministic kernels."""
    prev_threads = torch.get_num_threads()
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        if cfg.deterministic:
            torch.set_num_threads(prev_threads)
            torch.use_deterministic_algorithms(prev_det)


def _optimizer(model: FusionNet, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_step_epochs, gamma=cfg.lr_decay)
    return opt, sched


def _state(model, opt, cfg, epoch, stage, meta=None) -> CheckpointState:
    model_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    opt_state = opt.state_dict()
    opt_state = {"state": {k: {n: (t.detach().clone() if torch.is_tensor(t) else t)
                               for n, t in st.items()} for k, st in opt_state["state"].items()},
                 "param_groups": [dict(g) for g in opt_state["param_groups"]]}
    return CheckpointState(cfg, model_state, opt_state, epoch, stage, meta=dict(meta or {}))


def model_from_checkpoint(ckpt: CheckpointState) -> FusionNet:
    with torch.random.fork_rng():
        torch.manual_seed(ckpt.config.seed)
        model = FusionNet(ckpt.config)
    model.load_state_dict(ckpt.model)
    return model


# ---------------------------------------------------------------- loss assembly

def stage1_losses(model: FusionNet, item: PreparedPair, cfg: TrainConfig):
    x1, x2 = _tensor(item.pair.image1), _tensor(item.pair.image2)
    f1, f2 = model.encode(x1, item.graph1), model.encode(x2, item.graph2)
    r1, r2 = model.reconstruct(f1), model.reconstruct(f2)
    w = cfg.weights
    parts = {
        "recon1": losses.recon_loss(x1, r1, w.mu, cfg.recon_reduction),
        "recon2": losses.recon_loss(x2, r2, w.mu, cfg.recon_reduction),
        "decomp": losses.decomp_loss(f1.bundle.base, f2.bundle.base,
                                     f1.bundle.detail, f2.bundle.detail, w.eps),
        "graph": losses.graph_loss(f1.graph, f2.graph) if cfg.uses_graph_loss else None,
    }
    return losses.total_stage1(parts, w), (r1, r2)


def stage2_losses(model: FusionNet, item: PreparedPair, cfg: TrainConfig):
    x1, x2 = _tensor(item.pair.image1), _tensor(item.pair.image2)
    f1, f2 = model.encode(x1, item.graph1), model.encode(x2, item.graph2)
    fused = model.fuse_stage2(f1, f2)
    w = cfg.weights
    parts = {
        "intensity": losses.stage2_intensity_loss(fused, x1, x2),
        "graph": losses.graph_loss(f1.graph, f2.graph) if cfg.uses_graph_loss else None,
        "grad": losses.grad_loss(fused, x1, x2),
        "decomp": losses.decomp_loss(f1.bundle.base, f2.bundle.base,
                                     f1.bundle.detail, f2.bundle.detail, w.eps),
    }
    return losses.total_stage2(parts, w), fused


# ---------------------------------------------------------------- training loops

@dataclass
class TrainResult:
    checkpoint: CheckpointState
    log: list = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.log if r.get("kind") == "step"]


def _run_stage(stage: int, model: FusionNet, data: Sequence[PreparedPair], cfg: TrainConfig,
               epochs: int, loss_fn: Callable, log_path=None, progress: bool = False) -> TrainResult:
    if not data:
        raise ValueError("training needs a non-empty dataset")
    opt, sched = _optimizer(model, cfg)
    rng = np.random.default_rng([cfg.seed, stage])
    records = []
    last_good = _state(model, opt, cfg, 0, stage, {"variant": cfg.variant})
    sink = open(log_path, "a") if log_path else None
    step = 0
    t0 = time.perf_counter()
    try:
        model.train()
        for epoch in range(epochs):
            epoch_totals = []
            for idx in rng.permutation(len(data)):
                item = data[idx]
                if cfg.augment:
                    item = augment_prepared(item, AugmentationSpec.sample(rng))
                try:
                    report, _ = loss_fn(model, item, cfg)
                except FloatingPointError as err:
                    raise TrainingAborted(f"stage {stage} step {step}: {err}", last_good) from err
                total = float(report.total.detach())
                if not math.isfinite(total):
                    raise TrainingAborted(f"non-finite loss at stage {stage} step {step}", last_good)
                opt.zero_grad(set_to_none=True)
                report.total.backward()
                opt.step()
                step += 1
                rec = {"kind": "step", "stage": stage, "epoch": epoch, "step": step,
                       "lr": opt.param_groups[0]["lr"], "variant": cfg.variant,
                       **report.as_floats()}
                records.append(rec)
                epoch_totals.append(total)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            sched.step()
            rec = {"kind": "epoch", "stage": stage, "epoch": epoch, "variant": cfg.variant,
                   "mean_total": float(np.mean(epoch_totals)), "lr": opt.param_groups[0]["lr"]}
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
                sink.flush()
            if progress:
                log.info("stage %d epoch %d/%d mean loss %.4f (%.0fs)", stage, epoch + 1, epochs,
                         rec["mean_total"], time.perf_counter() - t0)
            last_good = _state(model, opt, cfg, epoch + 1, stage, {"variant": cfg.variant})
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if sink:
            sink.close()
    model.eval()
    return TrainResult(last_good, records)


def train_stage1(dataset, cfg: TrainConfig, log_path=None, progress=False) -> TrainResult:
    """Encoders, topology encoder and decoder learn to reconstruct each modality."""
    data = _as_prepared(dataset, cfg)
    with reproducible(cfg):
        model = FusionNet(cfg)
        return _run_stage(1, model, data, cfg, cfg.stage1_epochs, stage1_losses, log_path, progress)


def train_stage2(dataset, cfg: TrainConfig, stage1: CheckpointState,
                 log_path=None, progress=False) -> TrainResult:
    """Fine-tune everything for fusion; the fusion layers start from fresh weights."""
    if stage1.stage != 1:
        raise ValueError("stage 2 starts from a stage-1 checkpoint")
    if stage1.fingerprint != cfg.fingerprint():
        raise CheckpointVersionError("stage-1 checkpoint was trained with another architecture")
    data = _as_prepared(dataset, cfg)
    with reproducible(cfg):
        model = FusionNet(cfg)
        model.load_state_dict(stage1.model)
        model.reset_fusion(seed=cfg.seed + 2)
        return _run_stage(2, model, data, cfg, cfg.stage2_epochs, stage2_losses, log_path, progress)


def _as_prepared(dataset, cfg) -> list[PreparedPair]:
    items = list(dataset)
    if items and isinstance(items[0], PreparedPair):
        return items
    return prepare_dataset(items, cfg)


# ---------------------------------------------------------------- inference

@dataclass
class FusionOutput:
    fused: np.ndarray
    report: metrics.MetricReport
    chroma: Optional[np.ndarray] = None


@torch.no_grad()
def fuse_prepared(model: FusionNet, item: PreparedPair) -> np.ndarray:
    model.eval()
    x1, x2 = _tensor(item.pair.image1), _tensor(item.pair.image2)
    out = model(x1, x2, item.graph1, item.graph2)
    return out[0, 0].double().numpy()


def fuse(pair: RegisteredPair, checkpoint: CheckpointState,
         expect: Optional[TrainConfig] = None, model: Optional[FusionNet] = None) -> FusionOutput:
    """Fuse one pair; the result is returned at the pair's own resolution.

    Chroma from whichever modality carries colour (the first if both do) is
    passed through for recomposition.
    """
    if expect is not None and expect.fingerprint() != checkpoint.fingerprint:
        raise CheckpointVersionError("checkpoint does not match the requested architecture")
    model = model or model_from_checkpoint(checkpoint)
    cfg = checkpoint.config
    item = prepare_pair(pair, cfg.input_size)
    fused = fuse_prepared(model, item)
    if fused.shape != pair.shape:
        from skimage.transform import resize
        fused = np.clip(resize(fused, pair.shape, order=1, mode="edge", anti_aliasing=False), 0, 1)
    report = metrics.evaluate_pair(fused, pair.image1, pair.image2)
    chroma = pair.chroma1 if pair.chroma1 is not None else pair.chroma2
    return FusionOutput(fused, report, chroma)


@torch.no_grad()
def attention_maps(model: FusionNet, item: PreparedPair) -> dict:
    """Per-modality, per-layer attention coefficients as plain lists."""
    out = {}
    if model.tae is None:
        return out
    model.eval()
    for key, img, g in (("image1", item.pair.image1, item.graph1),
                        ("image2", item.pair.image2, item.graph2)):
        bundle = model.encoder(_tensor(img))
        _, maps = model.tae(bundle.base, bundle.detail, g, return_attention=True)
        out[key] = {"nodes": g.nodes.tolist(), "layers": [m.to_dict() for m in maps]}
    return out


def naive_average(pair: RegisteredPair) -> np.ndarray:
    return 0.5 * (pair.image1 + pair.image2)


@torch.no_grad()
def reconstruction_ssim(model: FusionNet, data: Sequence[PreparedPair]) -> float:
    """Mean 8-bit SSIM of stage-1 reconstructions over both modalities."""
    model.eval()
    scores = []
    for item in data:
        for img, g in ((item.pair.image1, item.graph1), (item.pair.image2, item.graph2)):
            rec = model.reconstruct(model.encode(_tensor(img), g))[0, 0].double().numpy()
            scores.append(metrics.ssim(rec, img))
    return float(np.mean(scores))


# ---------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("SD", "MI", "VIF", "SSIM")


@dataclass
class AblationRow:
    variant: Optional[str]
    label: str
    report: metrics.MetricReport

    def values(self) -> list[float]:
        return [getattr(self.report, c) for c in ABLATION_COLUMNS]


def run_ablation(train_set, eval_set, cfg: TrainConfig,
                 variants: Sequence[Optional[str]] = VARIANTS, log_path=None,
                 progress=False) -> list[AblationRow]:
    """Train and evaluate each variant under the same seed; the full model is the last row."""
    train_items = prepare_dataset(train_set, cfg)
    eval_items = prepare_dataset(eval_set, cfg)
    rows = []
    for variant in list(variants) + [None]:
        vcfg = cfg.with_variant(variant)
        s1 = train_stage1(train_items, vcfg, log_path, progress)
        s2 = train_stage2(train_items, vcfg, s1.checkpoint, log_path, progress)
        model = model_from_checkpoint(s2.checkpoint)
        reports = [metrics.evaluate_pair(fuse_prepared(model, it), it.pair.image1, it.pair.image2)
                   for it in eval_items]
        rows.append(AblationRow(variant, VARIANT_LABELS[variant], metrics.mean_report(reports)))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    lines = [f"{'':4} {'Configuration':30} " + " ".join(f"{c:>8}" for c in ABLATION_COLUMNS)]
    for r in rows:
        vid = r.variant or "Ours"
        lines.append(f"{vid:4} {r.label:30} " + " ".join(f"{v:8.3f}" for v in r.values()))
    return "\n".join(lines)
