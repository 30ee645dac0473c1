"""Criticality-guided adversarial fine-tuning on a small numpy autodiff engine."""

from .attacks import AttackConfig, feature_deviation_pgd, fgsm, pgd_untargeted
from .criticality import (CriticalityReport, criticality_indices, curvature_weakness, layer_weakness,
                          select_topk, stability_probe)
from .data import Dataset, load_checkpoint, load_cifar_binary, load_idx, save_checkpoint, synth_dataset
from .network import GradientRequest, LayerSpec, Network, build_network
from .tensor import Tensor
from .trainer import EpochMetrics, TrainConfig, TrainState, clat_epoch, evaluate, pgd_at_epoch, run_clat

__version__ = "0.1.0"
