"""Topology-aware fusion of registered multi-modal retinal images."""
from .checkpoint import CheckpointState, CheckpointVersionError, load_checkpoint, save_checkpoint
from .config import VARIANTS, TrainConfig, load_config, save_config
from .data_io import (AugmentationSpec, RegisteredPair, RegistrationError, ImageFormatError,
                      SyntheticSceneSpec, generate_synthetic_pair, load_pair, synthetic_dataset)
from .metrics import MetricReport, evaluate_pair
from .model import FusionNet
from .training import fuse, run_ablation, train_stage1, train_stage2
from .vessel_graph import VesselGraph, extract_graph, graph_from_mask, segment_vessels

__version__ = "0.1.0"
