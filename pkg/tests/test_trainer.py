import math

import numpy as np
import pytest

from clat import tensor as T
from clat.attacks import AttackConfig
from clat.data import synth_dataset
from clat.errors import ConfigurationError, UsageError
from clat.network import GradientRequest, build_network
from clat.tensor import Tensor
from clat.trainer import (CSV_HEADER, SGD, TrainConfig, TrainHooks, TrainState, clat_epoch, evaluate,
                          load_run, pgd_at_epoch, run_clat, save_run)

LAYERS = ["conv 4 k=3 pad=1 relu", "conv 4 k=3 pad=1 relu maxpool:2", "dense 12 relu", "dense 3"]
ATTACK = AttackConfig(epsilon=0.05, alpha=0.02, steps=2)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(3, 96, size=6, seed=4, noise=0.05)


def make_net(seed=0):
    return build_network(LAYERS, (1, 6, 6), 3, seed=seed)


def params(net):
    return [p.data.copy() for s in net.layers for p in (s.weight, s.bias)]


def same(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def cfg(**kw):
    base = dict(epochs=4, pretrain_epochs=2, reselect_period=1, k=1, lr0=0.05, batch_size=32,
                crit_batch_size=32, attack=ATTACK, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class Recorder(TrainHooks):
    """Snapshots every layer around each step."""

    def __init__(self):
        self.steps = []

    def before_step(self, net, info):
        self._before = [(s.weight.data.tobytes(), s.bias.data.tobytes()) for s in net.layers]

    def after_step(self, net, info):
        after = [(s.weight.data.tobytes(), s.bias.data.tobytes()) for s in net.layers]
        changed = {s.index for s, b, a in zip(net.layers, self._before, after) if b != a}
        self.steps.append((dict(info), changed))


@pytest.mark.parametrize("kw", [dict(pretrain_epochs=5, epochs=4), dict(reselect_period=0), dict(lam=-1),
                                dict(k=0), dict(batch_size=0), dict(pretrain_mode="fgsm"),
                                dict(eps_warmup=-1), dict(lr_warmup=-1)])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        cfg(**kw)


def test_cosine_schedule():
    c = TrainConfig(epochs=10, pretrain_epochs=4, lr0=0.1)
    assert c.lr_at(1) == pytest.approx(0.1)
    assert c.lr_at(6) == pytest.approx(0.05)
    lrs = [c.lr_at(e) for e in range(1, 11)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    r = TrainConfig(epochs=10, pretrain_epochs=4, lr0=0.1, restart_schedule=True)
    assert r.lr_at(5) == pytest.approx(0.1) and r.lr_at(4) < r.lr_at(5)
    w = TrainConfig(epochs=10, pretrain_epochs=4, lr0=0.1, lr_warmup=4)
    assert [w.lr_at(e) / c.lr_at(e) for e in (1, 2, 3)] == pytest.approx([0.25, 0.5, 0.75])
    assert [w.lr_at(e) for e in range(4, 11)] == [c.lr_at(e) for e in range(4, 11)]


def test_eps_warmup_ramp():
    c = TrainConfig(attack=AttackConfig(epsilon=0.1, alpha=0.02), eps_warmup=4)
    assert c.attack_at(1).epsilon == pytest.approx(0.025) and c.attack_at(1).alpha == pytest.approx(0.005)
    assert c.attack_at(4) == c.attack and c.attack_at(9) == c.attack
    assert TrainConfig(attack=c.attack).attack_at(1) == c.attack


def test_zero_budget_at_equals_clean_training(data):
    a, b = make_net(), make_net()
    c = cfg(attack=AttackConfig(epsilon=0.0, alpha=0.01, steps=2))
    pgd_at_epoch(a, data, c, TrainState.fresh(3), 0.05)
    pgd_at_epoch(b, data, c, TrainState.fresh(3), 0.05, clean=True)
    assert same(params(a), params(b))


def test_sgd_momentum_and_frozen_guard():
    net = build_network(["dense 2"], (2,), 2)
    w0 = net.layer(1).weight.data.copy()
    g = [np.ones((2, 2), np.float32), np.zeros(2, np.float32)]
    opt = SGD(0.9)
    opt.step(net, {1: g}, 0.1)
    opt.step(net, {1: g}, 0.1)
    np.testing.assert_allclose(net.layer(1).weight.data, w0 - 0.1 * 1 - 0.1 * 1.9, rtol=1e-6)
    net.layer(1).set_frozen(True)
    with pytest.raises(UsageError):
        opt.step(net, {1: g}, 0.1)


def test_freeze_soundness_and_loss_identity(data):
    net = make_net()
    rec = Recorder()
    c = cfg(epochs=4, pretrain_epochs=1, reselect_period=2, lam=0.7)
    run_clat(net, data, c, hooks=rec)
    clat_steps = [(i, ch) for i, ch in rec.steps if i["phase"] == "clat"]
    assert clat_steps
    for info, changed in clat_steps:
        assert changed <= set(info["critical"]) and changed
        assert abs(info["total"] - (info["ce"] + info["lam"] * info["crit"])) <= 1e-6 * max(1, abs(info["total"]))
    pre = [ch for i, ch in rec.steps if i["phase"] == "pretrain"]
    assert all(ch == {1, 2, 3, 4} for ch in pre)


def test_zero_lambda_is_clean_finetuning_of_critical_set(data):
    net = make_net()
    state = TrainState.fresh(1)
    before = params(net)
    m = clat_epoch(net, data, (3,), cfg(lam=0.0), state, 0.05)
    after = params(net)
    moved = [not np.array_equal(p, q) for p, q in zip(before, after)]
    assert moved == [False, False, False, False, True, True, False, False]
    # same update as a clean step restricted to layer 3, replayed with the same batch order
    twin = make_net()
    twin.set_freeze_mask((3,))
    opt = SGD(0.9)
    for x, y in data.batches(32, TrainState.fresh(1).data_rng):
        loss = T.softmax_cross_entropy(twin.forward(Tensor(x)), y)
        opt.step(twin, twin.gradients(loss, GradientRequest(wrt_parameters=frozenset({3}))).layers, 0.05)
    assert same(params(twin), after)
    assert m.phase == "clat" and m.critical_set == (3,)


def test_reselection_count_and_fixed_equivalence(data):
    c = cfg(epochs=7, pretrain_epochs=2, reselect_period=2)
    _, ms, st = run_clat(make_net(), data, c)
    assert st.reselections == math.ceil(5 / 2)
    assert [m.phase for m in ms] == ["pretrain"] * 2 + ["clat"] * 5
    a = run_clat(make_net(), data, cfg(epochs=5, reselect_period=3))
    b = run_clat(make_net(), data, cfg(epochs=5, reselect_period=1, fixed_layers=True))
    assert a[2].reselections == b[2].reselections == 1
    assert same(params(a[0]), params(b[0]))


def test_momentum_cleared_for_layers_leaving_the_set(data):
    net = make_net()
    c = cfg(epochs=3, pretrain_epochs=1, k=2)
    _, _, state = run_clat(net, data, c)
    assert set(state.optimizer.buffers) <= set(state.critical)


def test_seeded_runs_match_and_resume_is_exact(data, tmp_path):
    c = cfg(epochs=4, pretrain_epochs=2, reselect_period=1)
    full, full_m, _ = run_clat(make_net(), data, c)
    again, again_m, _ = run_clat(make_net(), data, c)
    assert same(params(full), params(again))
    assert [m.to_row() for m in full_m] == [m.to_row() for m in again_m]
    half, half_m, st = run_clat(make_net(), data, c, stop_at=3)
    save_run(tmp_path / "mid.cltf", half, st, c)
    net, st2 = load_run(tmp_path / "mid.cltf")
    assert st2.epoch == 3 and st2.critical == st.critical
    resumed, rest, _ = run_clat(net, data, c, state=st2)
    assert same(params(resumed), params(full))
    assert [m.to_row() for m in half_m + rest] == [m.to_row() for m in full_m]


def test_metrics_rows_match_header(data):
    _, ms, _ = run_clat(make_net(), data, cfg(epochs=2, pretrain_epochs=1))
    for m in ms:
        assert len(m.to_row()) == len(CSV_HEADER)
    assert ms[1].critical_set and 0 < ms[1].trainable_frac < 1


def test_pgd_at_rejects_frozen_network(data):
    net = make_net()
    net.set_freeze_mask({2})
    with pytest.raises(UsageError):
        pgd_at_epoch(net, data, cfg(), TrainState.fresh(0), 0.1)


def test_evaluate_properties(data):
    net = make_net(5)
    before = params(net)
    clean, adv = evaluate(net, data, AttackConfig(epsilon=0.0))
    assert clean == adv
    assert abs(clean - 1 / 3) < 0.25
    one = evaluate(net, data, ATTACK, seed=2, restarts=1)[1]
    ten = evaluate(net, data, ATTACK, seed=2, restarts=10)[1]
    assert ten <= one <= clean
    assert math.isnan(evaluate(net, data)[1])
    assert same(before, params(net))
    with pytest.raises(UsageError):
        evaluate(net, data, ATTACK, restarts=0)
    with pytest.raises(UsageError):
        evaluate(net, data, ATTACK, method="cw")


def test_untrained_network_is_near_chance():
    big = synth_dataset(3, 900, size=6, seed=8)
    accs = [evaluate(make_net(s), big)[0] for s in range(5)]
    assert abs(np.mean(accs) - 1 / 3) < 0.15
