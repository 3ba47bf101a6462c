"""Run configuration: training schedule, loss weights and architecture sizes."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .losses import LossWeights
from .topology import TAEConfig

VARIANTS = ("I", "II", "III", "IV", "V")
VARIANT_LABELS = {
    None: "full model",
    "I": "w/o graph loss",
    "II": "w/o G2S",
    "III": "w/o base/detail for decoder",
    "IV": "w/o graph features",
    "V": "GAT -> uniform graph conv",
}


@dataclass
class TrainConfig:
    stage1_epochs: int = 40
    stage2_epochs: int = 80
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_step_epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 1
    input_size: tuple[int, int] = (288, 360)
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tae: TAEConfig = field(default_factory=TAEConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    recon_reduction: str = "sum"
    augment: bool = True
    seed: int = 0
    deterministic: bool = False
    variant: Optional[str] = None
    toy_mode: bool = False
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("stage1_epochs", "stage2_epochs", "lr_step_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported (one graph per image)")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown ablation variant {self.variant!r}")
        if self.recon_reduction not in ("sum", "mean"):
            raise ValueError("recon_reduction must be 'sum' or 'mean'")
        if self.toy_mode:
            self._apply_toy()
        self._sync_dims()

    def _apply_toy(self):
        """Desk-scale preset; fields that differ from the full defaults are left alone."""
        full = TrainConfig.__dataclass_fields__
        if self.input_size == (288, 360):
            self.input_size = (64, 80)
        if self.stage1_epochs == full["stage1_epochs"].default:
            self.stage1_epochs = 25
        if self.stage2_epochs == full["stage2_epochs"].default:
            self.stage2_epochs = 25
        if self.encoder == EncoderConfig():
            self.encoder = EncoderConfig(embed_dim=16, restormer_blocks=1, attention_heads=2,
                                         lt_blocks=1, inn_blocks=1)
        if self.tae == TAEConfig():
            self.tae = TAEConfig(reduced_dim=16, giu_heads=4, giu_head_dim=16)
        if self.decoder == DecoderConfig():
            self.decoder = DecoderConfig(blocks=1, heads=2)
        if self.lr == full["lr"].default:
            self.lr = 2e-3
        self.augment = False

    def _sync_dims(self):
        d = self.encoder.embed_dim
        self.tae.in_dim = d
        self.decoder.embed_dim = d
        v = self.variant
        if v == "II":
            self.tae.use_g2s = False
        if v == "III":
            self.decoder.use_base_detail = False
        if v == "IV":
            self.decoder.use_graph = False
        if v == "V":
            self.tae.attention = "uniform"

    @property
    def uses_graph(self) -> bool:
        return self.variant != "IV"

    @property
    def uses_graph_loss(self) -> bool:
        return self.variant not in ("I", "IV")

    def with_variant(self, variant: Optional[str]) -> "TrainConfig":
        d = self.to_dict()
        d["variant"] = variant
        d["toy_mode"] = False  # sizes already resolved
        for k in ("tae", "decoder"):
            d[k].pop("use_g2s", None)
            d[k].pop("use_base_detail", None)
            d[k].pop("use_graph", None)
        d["tae"]["attention"] = "gat"
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"weights": LossWeights, "encoder": EncoderConfig, "tae": TAEConfig,
                  "decoder": DecoderConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        """Hash of everything that determines parameter shapes and graph wiring."""
        d = self.to_dict()
        arch = {k: d[k] for k in ("encoder", "tae", "decoder", "variant")}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step_epochs)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
