"""Layer weakness, criticality indices and critical-layer selection.

The weakness of layer i is the batch mean of ||F_i(x+delta) - F_i(x)||_2
divided by the per-sample feature size N_i.  The criticality index of layer i
is its weakness divided by that of layer i-1 (layer 1 keeps its own weakness),
so the running product of indices reproduces the weakness profile.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, _per_sample_l2, feature_deviation_pgd, pgd_untargeted
from .errors import DegenerateFeatureError, UsageError
from .network import Network, predict
from .tensor import Tensor

DEGENERATE_WEAKNESS = 1e-12


@dataclass
class CriticalityReport:
    weakness: np.ndarray  # float64, entry i-1 is layer i
    criticality: np.ndarray
    selected: tuple = ()
    epsilon: float = 0.0
    batch_size: int = 0
    seed: object = None

    @property
    def depth(self) -> int:
        return len(self.weakness)

    def ranked(self) -> list:
        """(layer, weakness, criticality) rows in descending criticality."""
        order = select_topk(self, self.depth)
        return [(i, float(self.weakness[i - 1]), float(self.criticality[i - 1])) for i in order]

    def reconstruction_error(self) -> float:
        """Largest relative gap between cumprod(criticality) and weakness."""
        rebuilt = np.cumprod(self.criticality)
        scale = np.maximum(np.abs(self.weakness), np.finfo(float).tiny)
        return float(np.max(np.abs(rebuilt - self.weakness) / scale))

    def to_record(self) -> str:
        """Line-oriented text form: a header line, then one line per layer."""
        sel = ",".join(str(i) for i in self.selected)
        lines = [f"criticality epsilon={self.epsilon!r} batch_size={self.batch_size} "
                 f"seed={self.seed} selected={sel or '-'}"]
        for i, w, c in self.ranked():
            lines.append(f"layer={i} weakness={w!r} criticality={c!r}")
        return "\n".join(lines) + "\n"


def criticality_from_weakness(weakness) -> np.ndarray:
    weakness = np.asarray(weakness, dtype=np.float64)
    crit = np.empty_like(weakness)
    crit[0] = weakness[0]
    for i in range(1, len(weakness)):
        if weakness[i - 1] < DEGENERATE_WEAKNESS:
            raise DegenerateFeatureError(i)
        crit[i] = weakness[i] / weakness[i - 1]
    return crit


def layer_weaknesses(net: Network, x, delta, layers=None) -> np.ndarray:
    """Weakness of every requested layer from one clean and one perturbed tapped pass."""
    layers = list(range(1, net.depth + 1)) if layers is None else list(layers)
    dims = net.feature_dims()
    x = np.asarray(x, dtype=np.float32)
    with T.no_grad():
        clean = net.forward_with_taps(Tensor(x), layers)[1]
        adv = net.forward_with_taps(Tensor(x + delta), layers)[1]
    return np.array([_per_sample_l2(adv[i].data - clean[i].data).mean() / dims[i] for i in layers])


def layer_weakness(net: Network, x, delta, i: int) -> float:
    net.layer(i)
    return float(layer_weaknesses(net, x, delta, [i])[0])


def criticality_indices(net: Network, x, y=None, cfg: AttackConfig | None = None, rng=None,
                        seed=None) -> CriticalityReport:
    """One output-loss PGD attack, then two tapped passes over every layer.

    ``y`` defaults to the network's own predictions.
    """
    x = np.asarray(x, dtype=np.float32)
    if len(x) == 0:
        raise UsageError("criticality needs a non-empty batch")
    cfg = cfg or AttackConfig()
    if y is None:
        y = predict(net, x)
    delta = pgd_untargeted(net, x, y, cfg, rng if rng is not None else seed)
    weakness = layer_weaknesses(net, x, delta)
    return CriticalityReport(weakness, criticality_from_weakness(weakness),
                             epsilon=cfg.epsilon, batch_size=len(x), seed=seed)


def select_topk(report: CriticalityReport, k: int) -> tuple:
    """Indices of the k largest criticality values; ties go to the smaller index."""
    n = report.depth
    if not 1 <= k <= n:
        raise UsageError(f"k must lie in 1..{n}, got {k}")
    order = sorted(range(1, n + 1), key=lambda i: (-report.criticality[i - 1], i))
    return tuple(order[:k])


def default_k(depth: int) -> int:
    """About 5% of the layers, and at least one."""
    return max(1, math.ceil(0.05 * depth))


@dataclass
class BatchStability:
    batch_size: int
    topk_sets: list
    modal_set: tuple
    modal_frequency: float
    pairwise_top1_agreement: float
    top1_counts: dict = field(default_factory=dict)


@dataclass
class StabilityResult:
    k: int
    per_batch: list
    modal_top1: int
    top1_agreement: float  # share of all runs whose top-1 equals the overall modal top-1

    def summary(self) -> str:
        lines = [f"stability k={self.k} overall_top1={self.modal_top1} agreement={self.top1_agreement:.4f}"]
        for b in self.per_batch:
            sel = ",".join(map(str, b.modal_set))
            lines.append(f"batch_size={b.batch_size} modal_topk={sel} modal_freq={b.modal_frequency:.4f} "
                         f"pairwise_top1={b.pairwise_top1_agreement:.4f}")
        return "\n".join(lines)


def stability_probe(net: Network, x, y, batch_sizes, trials: int, k: int,
                    cfg: AttackConfig | None = None, seed: int = 0,
                    fixed_batch: bool = False) -> StabilityResult:
    """Repeat the criticality computation on fresh random batches.

    With ``fixed_batch`` every trial reuses the first ``batch_size`` samples and
    the same attack seed, so all trials must agree.
    """
    if trials < 2:
        raise UsageError("stability_probe needs at least 2 trials")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    per_batch, all_top1 = [], []
    for bs in batch_sizes:
        if bs > len(x) or bs < 1:
            raise UsageError(f"batch size {bs} exceeds dataset of {len(x)} samples")
        sets = []
        for t in range(trials):
            rng = np.random.default_rng([seed, bs, 0 if fixed_batch else t])
            idx = np.arange(bs) if fixed_batch else np.sort(rng.choice(len(x), size=bs, replace=False))
            report = criticality_indices(net, x[idx], y[idx], cfg, rng=rng)
            sets.append(select_topk(report, k))
        counts = Counter(sets)
        modal, freq = max(counts.items(), key=lambda kv: (kv[1], [-v for v in kv[0]]))
        top1 = [s[0] for s in sets]
        pairs = list(itertools.combinations(top1, 2))
        per_batch.append(BatchStability(
            bs, sets, modal, freq / trials,
            sum(a == b for a, b in pairs) / len(pairs), dict(Counter(top1))))
        all_top1 += top1
    top1_counts = Counter(all_top1)
    modal_top1 = max(top1_counts, key=lambda i: (top1_counts[i], -i))
    return StabilityResult(k, per_batch, modal_top1, top1_counts[modal_top1] / len(all_top1))


def curvature_from_delta(net: Network, x, delta, i: int) -> np.ndarray:
    """Per-sample 2 ||J_i^T (F_i(x') - F_i(x))||_2 / ||x' - x||_2 at x' = x + delta.

    J_i is the Jacobian of F_i at x'.  The transposed product is one
    vector-Jacobian backward pass; samples with delta = 0 give 0.
    """
    net.layer(i)
    x = np.asarray(x, dtype=np.float32)
    delta = np.asarray(delta, dtype=np.float32)
    with T.no_grad():
        clean = net.forward_with_taps(Tensor(x), [i])[1][i].data
    xt = Tensor(x + delta, requires_grad=True)
    feat = net.forward_with_taps(xt, [i])[1][i]
    residual = Tensor(feat.data - clean)
    (vjp,) = T.grad(T.sum(T.mul(feat, residual)), xt)
    step = _per_sample_l2(delta)
    num = 2.0 * _per_sample_l2(vjp)
    return np.where(step > 0, num / np.where(step > 0, step, 1.0), 0.0)


def curvature_weakness(net: Network, x, i: int, cfg: AttackConfig | None = None, rng=None) -> float:
    """Batch mean of the curvature estimate, with x' from a feature attack on layer i."""
    cfg = cfg or AttackConfig()
    delta = feature_deviation_pgd(net, x, [i], cfg, rng)
    return float(curvature_from_delta(net, x, delta, i).mean())


def with_selection(report: CriticalityReport, k: int) -> CriticalityReport:
    return replace(report, selected=select_topk(report, k))
