"""Adversarial perturbations: FGSM, untargeted PGD, and feature-deviation PGD.

All attacks return the perturbation ``delta`` (not the adversarial input).
Every returned ``delta`` lies inside the norm ball of radius ``epsilon`` and
keeps ``x + delta`` inside the input domain, elementwise, in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .network import Network
from .tensor import Tensor


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.03
    alpha: float = 0.007
    steps: int = 10
    norm: str = "linf"
    random_start: bool = True
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.norm not in ("linf", "l2"):
            raise ConfigurationError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        lo, hi = self.domain
        if not lo < hi:
            raise ConfigurationError(f"empty input domain {self.domain}")


def _per_sample_l2(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(len(a), -1).astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", flat, flat))


def _project(x: np.ndarray, delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    eps = np.float32(cfg.epsilon)
    if cfg.norm == "linf":
        delta = np.clip(delta, -eps, eps)
    else:
        norms = _per_sample_l2(delta)
        scale = np.where(norms > cfg.epsilon, cfg.epsilon / np.maximum(norms, 1e-30), 1.0)
        delta = (delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))).astype(np.float32)
    return _clamp_to_domain(x, delta, cfg.domain, eps if cfg.norm == "linf" else None)


def _clamp_to_domain(x: np.ndarray, delta: np.ndarray, domain, eps=None) -> np.ndarray:
    lo, hi = np.float32(domain[0]), np.float32(domain[1])
    delta = (np.clip(x + delta, lo, hi) - x).astype(np.float32)
    if eps is not None:
        # the subtraction above can also round one ulp past the ball
        delta = np.clip(delta, -eps, eps)
    # x + (clip(x + d) - x) can round one ulp past the boundary in float32
    for _ in range(8):
        adv = x + delta
        over, under = adv > hi, adv < lo
        if not (over.any() or under.any()):
            break
        delta = np.where(over, np.nextafter(delta, np.float32(-np.inf)), delta)
        delta = np.where(under, np.nextafter(delta, np.float32(np.inf)), delta)
    return delta


def _random_start(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.random_start or cfg.epsilon == 0:
        return np.zeros_like(x)
    if cfg.norm == "linf":
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
    else:
        direction = rng.standard_normal(x.shape)
        direction /= np.maximum(_per_sample_l2(direction), 1e-30).reshape((-1,) + (1,) * (x.ndim - 1))
        radius = cfg.epsilon * rng.uniform(size=len(x)) ** (1.0 / x[0].size)
        delta = (direction * radius.reshape((-1,) + (1,) * (x.ndim - 1))).astype(np.float32)
    return _project(x, delta, cfg)


def _ascent_step(delta: np.ndarray, g: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm == "linf":
        return delta + np.float32(cfg.alpha) * np.sign(g)
    norms = _per_sample_l2(g)
    scale = np.where(norms > 0, cfg.alpha / np.where(norms > 0, norms, 1.0), 0.0)
    return (delta + g * scale.reshape((-1,) + (1,) * (g.ndim - 1))).astype(np.float32)


def _check_batch(net: Network, x: np.ndarray, y=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if tuple(x.shape[1:]) != tuple(net.input_shape):
        raise DimensionError(f"input {x.shape} does not match network input {net.input_shape}")
    if y is not None and np.shape(y) != (len(x),):
        raise DimensionError(f"labels {np.shape(y)} do not match batch of {len(x)}")
    return x


def loss_input_grad(net: Network, x_adv: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy at ``x_adv`` and its gradient w.r.t. the input."""
    xt = Tensor(x_adv, requires_grad=True)
    per = T.softmax_cross_entropy(net.forward(xt), y, reduction="none")
    (g,) = T.grad(T.sum(per), xt)
    return per.data, g


def fgsm(net: Network, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    """One signed-gradient step of size epsilon, optionally evaluated at a random start."""
    x = _check_batch(net, x, y)
    rng = np.random.default_rng(rng)
    if cfg.epsilon == 0:
        return np.zeros_like(x)
    start = _random_start(x, cfg, rng)
    _, g = loss_input_grad(net, x + start, y)
    if cfg.norm == "linf":
        delta = np.float32(cfg.epsilon) * np.sign(g)
    else:
        norms = _per_sample_l2(g)
        scale = np.where(norms > 0, cfg.epsilon / np.where(norms > 0, norms, 1.0), 0.0)
        delta = (g * scale.reshape((-1,) + (1,) * (g.ndim - 1))).astype(np.float32)
    return _project(x, delta.astype(np.float32), cfg)


def pgd_untargeted(net: Network, x, y, cfg: AttackConfig, rng=None) -> np.ndarray:
    """Projected gradient ascent on the cross-entropy loss; returns the last iterate."""
    x = _check_batch(net, x, y)
    rng = np.random.default_rng(rng)
    if cfg.epsilon == 0:
        return np.zeros_like(x)
    delta = _random_start(x, cfg, rng)
    for _ in range(cfg.steps):
        _, g = loss_input_grad(net, x + delta, y)
        delta = _project(x, _ascent_step(delta, g, cfg), cfg)
    return delta


def feature_deviation(net: Network, x, delta, layers, clean: dict | None = None) -> np.ndarray:
    """Per-sample sum over ``layers`` of ||F_i(x + delta) - F_i(x)||_2 (float64)."""
    x = _check_batch(net, x)
    layers = sorted(set(layers))
    with T.no_grad():
        if clean is None:
            clean = net.forward_with_taps(Tensor(x), layers)[1]
        adv = net.forward_with_taps(Tensor(x + delta), layers)[1]
    total = np.zeros(len(x))
    for i in layers:
        total += _per_sample_l2(adv[i].data - clean[i].data)
    return total


def feature_deviation_pgd(net: Network, x, layers, cfg: AttackConfig, rng=None, restarts: int = 1) -> np.ndarray:
    """Projected ascent on sum_{i in layers} ||F_i(x+delta) - F_i(x)||_2.

    The clean features are computed once and held constant.  The best iterate
    per sample (including the start point) is returned, so the objective at the
    result is never below its value at the random start.  With ``restarts`` > 1
    the best iterate is kept across independent random starts.
    """
    layers = sorted(set(layers))
    if not layers:
        raise UsageError("feature_deviation_pgd needs a non-empty layer set")
    if restarts < 1:
        raise UsageError(f"restarts must be >= 1, got {restarts}")
    for i in layers:
        net.layer(i)
    x = _check_batch(net, x)
    rng = np.random.default_rng(rng)
    if cfg.epsilon == 0:
        return np.zeros_like(x)
    with T.no_grad():
        clean = {i: f.data for i, f in net.forward_with_taps(Tensor(x), layers)[1].items()}
    best = np.zeros_like(x)
    best_obj = np.full(len(x), -np.inf)
    for _ in range(restarts):
        delta = _random_start(x, cfg, rng)
        for step in range(cfg.steps + 1):
            xt = Tensor(x + delta, requires_grad=True)
            taps = net.forward_with_taps(xt, layers)[1]
            per = None
            for i in layers:
                dev = T.row_norms(T.sub(taps[i], Tensor(clean[i])))
                per = dev if per is None else T.add(per, dev)
            improved = per.data.astype(np.float64) > best_obj
            best_obj = np.where(improved, per.data, best_obj)
            best[improved] = delta[improved]
            if step == cfg.steps:
                break
            (g,) = T.grad(T.sum(per), xt)
            delta = _project(x, _ascent_step(delta, g, cfg), cfg)
    return best
