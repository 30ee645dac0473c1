"""Desk-scale paired runs: PGD-AT baseline vs. critical-layer fine-tuning.

All arms of one seed share the same pretraining prefix.  The cosine schedule
spans the whole run in every arm, so the first ``pretrain`` epochs are
identical and are computed once; the arms then branch from a snapshot of the
network and the full training state.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig
from .config import DESK_LAYERS
from .data import Dataset, synth_dataset
from .network import Network, build_network
from .trainer import TrainConfig, evaluate, run_clat

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSetup:
    """Synthetic 10-class gratings at 12x12 and a 6-layer CNN, attacked at eps = 0.1."""

    num_classes: int = 10
    n_train: int = 1000
    n_test: int = 500
    size: int = 12
    noise: float = 0.15
    amplitude: tuple = (0.15, 0.3)
    waveform: str = "square"
    data_seed: int = 0
    layers: tuple = DESK_LAYERS
    epsilon: float = 0.1
    alpha: float = 0.025
    steps: int = 10
    lr0: float = 0.02
    batch_size: int = 64
    eps_warmup: int = 10
    lr_warmup: int = 5
    total_epochs: int = 50
    pretrain_epochs: int = 30
    k: int = 1
    lam: float = 0.3
    reselect_period: int = 10
    ce_on_adversarial: bool = False

    @property
    def attack(self) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, alpha=self.alpha, steps=self.steps)

    def datasets(self) -> tuple[Dataset, Dataset]:
        kw = dict(noise=self.noise, amplitude=self.amplitude, waveform=self.waveform)
        train = synth_dataset(self.num_classes, self.n_train, self.size, seed=self.data_seed, **kw)
        test = synth_dataset(self.num_classes, self.n_test, self.size, seed=self.data_seed + 1_000_003,
                             split="test", **kw)
        return train, test

    def network(self, seed: int) -> Network:
        return build_network(list(self.layers), (1, self.size, self.size), self.num_classes, seed=seed)

    def train_config(self, seed: int, pretrain_epochs: int | None = None, fixed_layers: bool = False) -> TrainConfig:
        return TrainConfig(epochs=self.total_epochs,
                           pretrain_epochs=self.total_epochs if pretrain_epochs is None else pretrain_epochs,
                           reselect_period=self.reselect_period, k=self.k, lam=self.lam, lr0=self.lr0,
                           batch_size=self.batch_size, seed=seed, attack=self.attack,
                           fixed_layers=fixed_layers, eps_warmup=self.eps_warmup, lr_warmup=self.lr_warmup,
                           ce_on_adversarial=self.ce_on_adversarial)


@dataclass
class ArmResult:
    name: str
    clean_acc: float
    adv_acc: float
    critical_sets: list = field(default_factory=list)
    metrics: list = field(default_factory=list, repr=False)
    seconds: float = 0.0
    net: Network | None = field(default=None, repr=False)


@dataclass
class PairedResult:
    seed: int
    prefix: ArmResult
    arms: dict  # name -> ArmResult

    def row(self) -> str:
        cells = [f"seed={self.seed}", f"prefix adv={self.prefix.adv_acc:.4f}"]
        cells += [f"{a.name} clean={a.clean_acc:.4f} adv={a.adv_acc:.4f}" for a in self.arms.values()]
        return "  ".join(cells)


def _final_eval(net: Network, test: Dataset, setup: DeskSetup, seed: int) -> tuple:
    # one fixed attack seed per training seed, shared by every arm
    return evaluate(net, test, setup.attack, seed=[seed, 0xE5A1])


def paired_run(setup: DeskSetup, seed: int, arms=("at", "clat", "fixed"), keep_networks: bool = False) -> PairedResult:
    """Train the shared prefix once, then every requested arm to ``total_epochs``."""
    train, test = setup.datasets()
    start = time.perf_counter()
    net = setup.network(seed)
    base_cfg = setup.train_config(seed)
    net, prefix_metrics, state = run_clat(net, train, base_cfg, stop_at=setup.pretrain_epochs)
    prefix = ArmResult("prefix", *_final_eval(net, test, setup, seed), metrics=prefix_metrics,
                       seconds=time.perf_counter() - start)
    log.info("seed %d prefix done: clean %.4f adv %.4f", seed, prefix.clean_acc, prefix.adv_acc)
    results = {}
    for name in arms:
        t0 = time.perf_counter()
        arm_net, arm_state = net.clone(), copy.deepcopy(state)
        if name == "at":
            cfg = base_cfg
        elif name == "clat":
            cfg = setup.train_config(seed, setup.pretrain_epochs)
        elif name == "fixed":
            cfg = setup.train_config(seed, setup.pretrain_epochs, fixed_layers=True)
        else:
            raise ValueError(f"unknown arm {name!r}")
        sets = []

        def on_epoch(_net, m, st, sets=sets):
            if m.phase == "clat" and (not sets or sets[-1] != m.critical_set):
                sets.append(m.critical_set)

        arm_net, metrics, _ = run_clat(arm_net, train, cfg, state=arm_state, on_epoch=on_epoch)
        arm_net.unfreeze_all()
        clean, adv = _final_eval(arm_net, test, setup, seed)
        results[name] = ArmResult(name, clean, adv, sets, metrics, time.perf_counter() - t0,
                                  arm_net if keep_networks else None)
        log.info("seed %d %s: clean %.4f adv %.4f sets %s", seed, name, clean, adv, sets)
    return PairedResult(seed, prefix, results)


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=float)))


def efficacy_summary(results: list) -> dict:
    """Median accuracies per arm and the per-seed dynamic-vs-fixed comparison."""
    out = {}
    for name in results[0].arms:
        out[name] = {"clean": median([r.arms[name].clean_acc for r in results]),
                     "adv": median([r.arms[name].adv_acc for r in results])}
    if "clat" in results[0].arms and "fixed" in results[0].arms:
        out["dynamic_wins"] = sum(r.arms["clat"].adv_acc >= r.arms["fixed"].adv_acc for r in results)
    return out
