"""Schrodinger-bridge style enhancement of brain disks."""
from .losses import adv_loss, msssim_loss, patch_contrastive_loss, sb_loss
from .networks import CriticModel, GeneratorModel
from .sampling import BridgeConfig, TimeGrid, sample_bridge, sample_bridge_t, simulate_trajectory
from .sinkhorn import Coupling, bridge_epsilon, sinkhorn_eot
from .train import TrainOptions, enhance, load_model, save_model, train

__all__ = [
    "BridgeConfig",
    "Coupling",
    "CriticModel",
    "GeneratorModel",
    "TimeGrid",
    "TrainOptions",
    "adv_loss",
    "bridge_epsilon",
    "enhance",
    "load_model",
    "msssim_loss",
    "patch_contrastive_loss",
    "sample_bridge",
    "sample_bridge_t",
    "save_model",
    "sb_loss",
    "simulate_trajectory",
    "sinkhorn_eot",
    "train",
]
