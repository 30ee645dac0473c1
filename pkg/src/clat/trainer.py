"""PGD adversarial training and criticality-targeted fine-tuning.

A run is a pretraining phase of plain PGD-AT (or clean training) followed by a
fine-tuning phase in which only the current critical layers are trained on

    CE(F(x), y) + lam * mean_x sum_{i in S} ||F_i(x + delta) - F_i(x)||_2,

with ``delta`` from a feature-deviation attack on the layers in S.  The
critical set is recomputed every ``reselect_period`` fine-tuning epochs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, feature_deviation_pgd, fgsm, pgd_untargeted
from .criticality import criticality_indices, default_k, select_topk
from .data import Checkpoint, Dataset, load_checkpoint, save_checkpoint
from .errors import ConfigurationError, UsageError
from .network import GradientRequest, Network
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100  # pretraining + fine-tuning
    pretrain_epochs: int = 50
    reselect_period: int = 10
    k: int | None = None  # None: about 5% of the layers
    lam: float = 1.0
    lr0: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    crit_batch_size: int = 100
    pretrain_mode: str = "pgd"  # "pgd" or "clean"
    fixed_layers: bool = False
    fast: bool = False  # single-step inner maximisation while fine-tuning
    ce_on_adversarial: bool = False
    restart_schedule: bool = False  # restart the cosine schedule when fine-tuning starts
    eps_warmup: int = 0  # pretraining epochs over which the budget ramps linearly up to epsilon
    lr_warmup: int = 0  # first epochs scale the rate by epoch / lr_warmup

    def __post_init__(self):
        if not 0 <= self.pretrain_epochs <= self.epochs:
            raise ConfigurationError("need 0 <= pretrain_epochs <= epochs")
        if self.reselect_period < 1:
            raise ConfigurationError("reselect_period must be >= 1")
        if self.lam < 0:
            raise ConfigurationError("lam must be >= 0")
        if self.k is not None and self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.batch_size < 1 or self.crit_batch_size < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.eps_warmup < 0 or self.lr_warmup < 0:
            raise ConfigurationError("warm-up lengths must be >= 0")
        if self.pretrain_mode not in ("pgd", "clean"):
            raise ConfigurationError(f"pretrain_mode must be 'pgd' or 'clean', got {self.pretrain_mode!r}")

    @property
    def clat_epochs(self) -> int:
        return self.epochs - self.pretrain_epochs

    def lr_at(self, epoch: int) -> float:
        """Cosine-decayed learning rate for the 1-based global ``epoch``."""
        if self.restart_schedule and epoch > self.pretrain_epochs:
            t, span = epoch - self.pretrain_epochs - 1, self.clat_epochs
        elif self.restart_schedule:
            t, span = epoch - 1, self.pretrain_epochs
        else:
            t, span = epoch - 1, self.epochs
        lr = self.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / max(span, 1)))
        return lr * epoch / self.lr_warmup if epoch < self.lr_warmup else lr

    def attack_at(self, epoch: int) -> AttackConfig:
        """Training attack for a pretraining epoch; budget and step scale together during warm-up."""
        if epoch > self.eps_warmup or self.attack.epsilon == 0:
            return self.attack
        scale = epoch / self.eps_warmup
        return replace(self.attack, epsilon=self.attack.epsilon * scale, alpha=self.attack.alpha * scale)

    def resolve_k(self, depth: int) -> int:
        return default_k(depth) if self.k is None else self.k


CSV_HEADER = ("epoch", "phase", "clean_acc", "adv_acc", "ce_loss", "crit_loss", "critical_set", "trainable_frac")


@dataclass
class EpochMetrics:
    epoch: int
    phase: str  # "pretrain" | "clat"
    clean_acc: float
    adv_acc: float
    ce_loss: float
    crit_loss: float
    critical_set: tuple
    trainable_frac: float

    def to_row(self) -> list:
        return [str(self.epoch), self.phase, repr(self.clean_acc), repr(self.adv_acc), repr(self.ce_loss),
                repr(self.crit_loss), " ".join(map(str, self.critical_set)), repr(self.trainable_frac)]


class SGD:
    """SGD with heavy-ball momentum and no weight decay, one buffer pair per layer."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = np.float32(momentum)
        self.buffers: dict = {}

    def step(self, net: Network, grads: dict, lr: float) -> None:
        lr = np.float32(lr)
        for i in sorted(grads):
            spec = net.layer(i)
            if spec.frozen:
                raise UsageError(f"optimizer step on frozen layer {i}")
            bufs = self.buffers.get(i)
            if bufs is None:
                bufs = [np.array(g, dtype=np.float32) for g in grads[i]]
            else:
                bufs = [self.momentum * b + g for b, g in zip(bufs, grads[i])]
            self.buffers[i] = bufs
            spec.weight.data -= lr * bufs[0]
            spec.bias.data -= lr * bufs[1]

    def clear(self, layers) -> None:
        for i in layers:
            self.buffers.pop(i, None)


class TrainHooks:
    """Override to observe every optimizer step (instrumentation, tests)."""

    def before_step(self, net: Network, info: dict) -> None:
        pass

    def after_step(self, net: Network, info: dict) -> None:
        pass


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


@dataclass
class TrainState:
    """Everything besides the parameters needed to continue a run bit-exactly."""

    epoch: int = 0  # completed global epochs
    critical: tuple | None = None
    optimizer: SGD = field(default_factory=SGD)
    data_rng: np.random.Generator | None = None
    attack_rng: np.random.Generator | None = None
    crit_rng: np.random.Generator | None = None
    reselections: int = 0
    last_report: object = None

    @classmethod
    def fresh(cls, seed: int, momentum: float = 0.9) -> "TrainState":
        data, attack, crit = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(optimizer=SGD(momentum), data_rng=data, attack_rng=attack, crit_rng=crit)

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "critical": list(self.critical) if self.critical else None,
                "reselections": self.reselections,
                "rngs": {"data": self.data_rng.bit_generator.state,
                         "attack": self.attack_rng.bit_generator.state,
                         "crit": self.crit_rng.bit_generator.state}}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, momentum: float = 0.9) -> "TrainState":
        st = ckpt.state
        if "rngs" not in st:
            state = cls.fresh(ckpt.seed, momentum)
            state.epoch = ckpt.epoch
            return state
        opt = SGD(momentum)
        opt.buffers = {i: [b.copy() for b in bufs] for i, bufs in ckpt.optimizer.items()}
        rngs = st["rngs"]
        return cls(epoch=ckpt.epoch, critical=tuple(st["critical"]) if st.get("critical") else None,
                   optimizer=opt, data_rng=_rng_from_state(rngs["data"]),
                   attack_rng=_rng_from_state(rngs["attack"]), crit_rng=_rng_from_state(rngs["crit"]),
                   reselections=st.get("reselections", 0))


def save_run(path, net: Network, state: TrainState, cfg: TrainConfig):
    return save_checkpoint(path, net, epoch=state.epoch, seed=cfg.seed,
                           optimizer=state.optimizer.buffers, state=state.to_json())


def load_run(path, momentum: float = 0.9) -> tuple:
    ckpt = load_checkpoint(path)
    return ckpt.net, TrainState.from_checkpoint(ckpt, momentum)


def _hits(logits: np.ndarray, y: np.ndarray) -> int:
    return int((logits.argmax(axis=1) == y).sum())


class _Tally:
    def __init__(self):
        self.n = self.clean = self.adv = 0
        self.ce = self.crit = 0.0

    def add(self, n, clean, adv, ce, crit):
        self.n += n
        self.clean += clean
        self.adv += adv
        self.ce += float(ce) * n
        self.crit += float(crit) * n

    def metrics(self, epoch, phase, critical, frac) -> EpochMetrics:
        n = max(self.n, 1)
        return EpochMetrics(epoch, phase, self.clean / n, self.adv / n, self.ce / n, self.crit / n,
                            tuple(critical), frac)


def pgd_at_epoch(net: Network, data: Dataset, cfg: TrainConfig, state: TrainState, lr: float,
                 epoch: int = 0, hooks: TrainHooks | None = None, clean: bool = False) -> EpochMetrics:
    """One epoch of PGD adversarial training over all parameters (``clean`` skips the attack)."""
    if net.trainable_layers() != tuple(range(1, net.depth + 1)):
        raise UsageError("PGD-AT expects every layer to be trainable")
    hooks = hooks or TrainHooks()
    request = GradientRequest(wrt_parameters=frozenset(range(1, net.depth + 1)))
    attack = cfg.attack_at(epoch) if epoch else cfg.attack
    tally = _Tally()
    for x, y in data.batches(cfg.batch_size, state.data_rng):
        x_in = x if clean else x + pgd_untargeted(net, x, y, attack, state.attack_rng)
        logits = net.forward(Tensor(x_in))
        if clean:
            clean_logits = logits.data
        else:
            with T.no_grad():
                clean_logits = net.forward(Tensor(x)).data
        loss = T.softmax_cross_entropy(logits, y)
        grads = net.gradients(loss, request).layers
        info = {"epoch": epoch, "phase": "pretrain", "critical": tuple(sorted(request.wrt_parameters)),
                "ce": loss.item(), "crit": 0.0, "total": loss.item()}
        hooks.before_step(net, info)
        state.optimizer.step(net, grads, lr)
        hooks.after_step(net, info)
        tally.add(len(y), _hits(clean_logits, y), _hits(logits.data, y), loss.item(), 0.0)
    return tally.metrics(epoch, "pretrain", (), net.param_census().fraction)


def clat_epoch(net: Network, data: Dataset, critical, cfg: TrainConfig, state: TrainState, lr: float,
               epoch: int = 0, hooks: TrainHooks | None = None) -> EpochMetrics:
    """One fine-tuning epoch over the layers in ``critical``; all others stay frozen."""
    critical = tuple(critical)
    net.set_freeze_mask(critical)
    hooks = hooks or TrainHooks()
    request = GradientRequest(wrt_parameters=frozenset(critical))
    attack = cfg.attack
    if cfg.fast:
        attack = replace(attack, steps=1, alpha=max(1.25 * attack.epsilon, 1e-12))
    lam = float(np.float32(cfg.lam))
    tally = _Tally()
    for x, y in data.batches(cfg.batch_size, state.data_rng):
        delta = feature_deviation_pgd(net, x, critical, attack, state.attack_rng)
        logits, clean_taps = net.forward_with_taps(Tensor(x), critical)
        adv_logits, adv_taps = net.forward_with_taps(Tensor(x + delta), critical)
        per_sample = None
        for i in critical:
            dev = T.row_norms(T.sub(adv_taps[i], clean_taps[i]))
            per_sample = dev if per_sample is None else T.add(per_sample, dev)
        crit_loss = T.mean(per_sample)
        ce = T.softmax_cross_entropy(adv_logits if cfg.ce_on_adversarial else logits, y)
        total = T.add(ce, T.mul(crit_loss, lam))
        grads = net.gradients(total, request).layers
        info = {"epoch": epoch, "phase": "clat", "critical": critical, "ce": ce.item(),
                "crit": crit_loss.item(), "total": total.item(), "lam": lam}
        hooks.before_step(net, info)
        state.optimizer.step(net, grads, lr)
        hooks.after_step(net, info)
        tally.add(len(y), _hits(logits.data, y), _hits(adv_logits.data, y), ce.item(), crit_loss.item())
    return tally.metrics(epoch, "clat", critical, net.param_census().fraction)


def evaluate(net: Network, data: Dataset, attack: AttackConfig | None = None, seed=0,
             batch_size: int = 250, restarts: int = 1, method: str = "pgd") -> tuple:
    """(clean accuracy, adversarial accuracy); parameters are never touched.

    With several restarts a sample only counts as robust if every restart fails.
    """
    if restarts < 1:
        raise UsageError("restarts must be >= 1")
    if method not in ("pgd", "fgsm"):
        raise UsageError(f"unknown attack method {method!r}")
    attack_fn = pgd_untargeted if method == "pgd" else fgsm
    rng = np.random.default_rng(seed)
    clean_hits = adv_hits = 0
    for x, y in data.batches(batch_size):
        with T.no_grad():
            clean_ok = net.forward(Tensor(x)).data.argmax(axis=1) == y
        clean_hits += int(clean_ok.sum())
        if attack is None:
            continue
        robust = clean_ok.copy()
        for _ in range(restarts):
            delta = attack_fn(net, x, y, attack, rng)
            with T.no_grad():
                robust &= net.forward(Tensor(x + delta)).data.argmax(axis=1) == y
        adv_hits += int(robust.sum())
    n = max(len(data), 1)
    return clean_hits / n, (adv_hits / n if attack is not None else float("nan"))


def reselect(net: Network, data: Dataset, cfg: TrainConfig, state: TrainState):
    """Recompute criticality on a random training batch and reset the freeze mask."""
    rng = state.crit_rng
    size = min(cfg.crit_batch_size, len(data))
    idx = np.sort(rng.choice(len(data), size=size, replace=False))
    report = criticality_indices(net, data.images[idx], data.labels[idx], cfg.attack, rng=rng)
    critical = select_topk(report, cfg.resolve_k(net.depth))
    previous = set(state.critical) if state.critical else set(range(1, net.depth + 1))
    state.optimizer.clear(sorted(previous - set(critical)))
    state.critical = critical
    state.reselections += 1
    state.last_report = replace(report, selected=critical)
    net.set_freeze_mask(critical)
    return state.last_report


def run_clat(net: Network, data: Dataset, cfg: TrainConfig, state: TrainState | None = None,
             eval_data: Dataset | None = None, hooks: TrainHooks | None = None,
             stop_at: int | None = None, on_epoch=None) -> tuple:
    """Pretrain, then fine-tune critical layers with periodic reselection.

    Continues from ``state.epoch`` and stops after global epoch ``stop_at``
    (default ``cfg.epochs``).  With ``eval_data`` the per-epoch accuracies are
    measured on it (clean and PGD); otherwise they are training-batch figures.
    Returns ``(net, metrics, state)``.
    """
    state = state or TrainState.fresh(cfg.seed, cfg.momentum)
    last = cfg.epochs if stop_at is None else min(stop_at, cfg.epochs)
    metrics = []
    for epoch in range(state.epoch + 1, last + 1):
        lr = cfg.lr_at(epoch)
        if epoch <= cfg.pretrain_epochs:
            net.unfreeze_all()
            m = pgd_at_epoch(net, data, cfg, state, lr, epoch, hooks, clean=cfg.pretrain_mode == "clean")
        else:
            local = epoch - cfg.pretrain_epochs
            due = state.critical is None or (not cfg.fixed_layers and (local - 1) % cfg.reselect_period == 0)
            if due:
                report = reselect(net, data, cfg, state)
                log.info("epoch %d critical set %s (criticality %s)", epoch,
                         ",".join(map(str, report.selected)),
                         " ".join(f"{c:.4g}" for c in report.criticality))
            m = clat_epoch(net, data, state.critical, cfg, state, lr, epoch, hooks)
        if eval_data is not None:
            m.clean_acc, m.adv_acc = evaluate(net, eval_data, cfg.attack, seed=[cfg.seed, epoch])
        state.epoch = epoch
        metrics.append(m)
        log.info("epoch %d %s clean=%.4f adv=%.4f ce=%.4f crit=%.4f frac=%.4f", epoch, m.phase,
                 m.clean_acc, m.adv_acc, m.ce_loss, m.crit_loss, m.trainable_frac)
        if on_epoch is not None:
            on_epoch(net, m, state)
    return net, metrics, state


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
