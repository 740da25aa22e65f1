import numpy as np
import pytest

from optproxy.grid import Generator, Line, Network
from optproxy.instances import Instance, SamplerConfig, build_dataset, label_dataset
from optproxy.nn import grad_check
from optproxy.primal import (
    EdBatch,
    LdState,
    ProxyModel,
    TrainConfig,
    evaluate,
    evaluate_dispatch,
    forward_proxy,
    ld_update,
    loss_lagrangian,
    loss_selfsup,
    loss_supervised,
    penalized_objective_grad,
    predict,
    train,
)
from optproxy.solver.models import DEFAULT_PENALTIES, get_sens, penalized_objective

TOY_SAMPLER = SamplerConfig(reserve_range=(0.6, 0.9))


@pytest.fixture(scope="module")
def toy():
    # the dear unit holds at most 2 MW of reserve, so the cheap one must keep R - 2 MW of headroom
    gens = [Generator("a", 1, 0.0, 10.0, 10.0, 1.0, 0.0), Generator("b", 2, 0.0, 10.0, 2.0, 2.0, 0.0)]
    net = Network(buses=[1, 2], slack_bus=1, generators=gens, lines=[Line("l", 1, 2, 10.0, 100.0)], loads=(0.0, 8.0))
    ds = label_dataset(build_dataset(net, 300, TOY_SAMPLER, 0), net)
    return net, ds


@pytest.fixture(scope="module")
def case30_data(case30):
    return label_dataset(build_dataset(case30, 40, SamplerConfig.for_kind("ed"), 1), case30)


def test_e2elr_balance_holds_untrained(case30, case30_data):
    model = ProxyModel(case30, "e2elr", seed=3)
    for d, inst in zip(predict(model, case30_data.instances), case30_data.instances):
        assert abs(d.p.sum() - inst.total_load) <= 1e-9 * (1 + inst.total_load)
        assert np.all(d.p >= case30.p_min) and np.all(d.p <= inst.p_max(case30))


def test_naive_violation_is_reported(case30, case30_data):
    model = ProxyModel(case30, "naive", seed=3)
    rep = evaluate(model, case30_data.instances, case30_data.labels)
    assert np.all(rep.balance > 1.0)
    assert rep.feasibility_rate == 0.0


def test_supervised_loss():
    p = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert loss_supervised(p, p)[0] == 0.0
    label = np.array([[0.0, 0.0], [1.0, 1.0]])
    base = loss_supervised(p, label)[0]
    # ((1 + 4) + (4 + 9)) / 2
    assert base == pytest.approx(9.0)
    assert loss_supervised(label + 2 * (p - label), label)[0] == pytest.approx(4 * base)


def test_lagrangian_reduces_to_supervised(toy):
    net, ds = toy
    batch = EdBatch.from_instances(net, ds.instances[:5])
    p = np.array([lb["p"] for lb in ds.labels[:5]])
    ld = LdState(lam=3.0, nu=2.0)
    assert loss_lagrangian(p, p, ld, net, batch)[0] == pytest.approx(0.0, abs=1e-9)
    assert ld_update(ld, np.zeros(5), np.zeros(5)) == ld


def test_multiplier_updates():
    ld = ld_update(LdState(step=0.5), np.full(4, 2.0), np.zeros(4))
    assert ld.lam == pytest.approx(1.0)
    ld = LdState(nu=0.1, step=1.0)
    for _ in range(3):
        ld = ld_update(ld, np.zeros(2), np.array([-5.0, -5.0]))
        assert ld.nu >= 0.0


def test_selfsup_loss_at_optimum(toy):
    net, ds = toy
    sens = get_sens(net)
    for inst, lb in list(zip(ds.instances, ds.labels))[:10]:
        batch = EdBatch.from_instances(net, [inst])
        val, _ = loss_selfsup(net, batch, np.array([lb["p"]]))
        assert val == pytest.approx(lb["objective"], rel=1e-9)
        assert val == pytest.approx(penalized_objective(net, sens, inst, np.array(lb["p"])), rel=1e-12)


def test_selfsup_loss_bounded_by_optimum(toy, rng):
    net, ds = toy
    model = ProxyModel(net, "e2elr", width=16, seed=0)
    batch = EdBatch.from_instances(net, ds.instances)
    p, _ = forward_proxy(model, batch)
    val, _ = loss_selfsup(net, batch, p)
    assert val >= np.mean([lb["objective"] for lb in ds.labels]) - 1e-9


def test_penalized_objective_gradient(case30, rng):
    inst = Instance(case30.base_loads * 1.1, 200.0, np.ones(case30.n_gen), np.ones(case30.n_gen))
    batch = EdBatch.from_instances(case30, [inst])
    for _ in range(5):
        x = rng.uniform(0.1, 0.9, size=case30.n_gen) * case30.p_max
        rep = grad_check(
            lambda v: penalized_objective_grad(case30, batch, v[None])[0],
            lambda v, e: e[0] * penalized_objective_grad(case30, batch, v[None])[1][0],
            x,
        )
        assert rep.passed, rep.max_rel_err


@pytest.mark.parametrize("arch", ["naive", "deepopf", "dc3", "e2elr"])
def test_end_to_end_gradient(case30, case30_data, arch):
    model = ProxyModel(case30, arch, n_hidden=2, width=8, seed=1)
    batch = EdBatch.from_instances(case30, case30_data.instances[:2])
    w = np.random.default_rng(0).normal(size=(2, case30.n_gen))
    p, back = forward_proxy(model, batch, dc3_steps=5)
    grads = back(w)
    theta = model.mlp.flat()
    j = np.argmax(np.abs(np.concatenate([a.ravel() for layer in grads for a in layer])))
    h = 1e-6
    vals = []
    for sgn in (1, -1):
        t = theta.copy()
        t[j] += sgn * h
        model.mlp.set_flat(t)
        vals.append(np.sum(w * forward_proxy(model, batch, dc3_steps=5)[0]))
    model.mlp.set_flat(theta)
    ana = np.concatenate([a.ravel() for layer in grads for a in layer])[j]
    assert ana == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-4)


def test_lr_zero_keeps_model(toy):
    net, ds = toy
    model = ProxyModel(net, "e2elr", width=16, seed=0)
    before = model.mlp.flat()
    train(model, ds.instances, cfg=TrainConfig("ssl", epochs=2, lr=0.0))
    assert np.array_equal(before, model.mlp.flat())


def test_supervised_training_cuts_loss(toy):
    net, ds = toy
    model = ProxyModel(net, "naive", width=16, seed=0)
    hist = train(model, ds.instances, ds.labels, TrainConfig("sl", epochs=150, lr=3e-3))
    assert hist[-1]["loss"] * 10 <= hist[0]["loss"]


def test_lagrangian_training_runs(toy):
    net, ds = toy
    model = ProxyModel(net, "naive", width=16, seed=0)
    hist = train(model, ds.instances, ds.labels, TrainConfig("ld", epochs=5))
    assert hist[-1]["ld"]["nu"] >= 0.0


def test_selfsup_toy_gap(toy):
    net, ds = toy
    train_i, _ = ds.subset("train")
    test_i, test_l = ds.subset("test")
    model = ProxyModel(net, "e2elr", width=16, seed=0)
    train(model, train_i, cfg=TrainConfig("ssl", epochs=200, batch=32, lr=3e-3))
    rep = evaluate(model, test_i, test_l)
    assert rep.mean_gap <= 0.02
    assert np.all(rep.gaps >= -1e-9)


def test_missing_labels(toy):
    net, ds = toy
    with pytest.raises(ValueError):
        train(ProxyModel(net, "naive"), ds.instances, None, TrainConfig("sl"))
    with pytest.raises(ValueError):
        TrainConfig("rl")


def test_replay_has_zero_gap(case30, case30_data):
    p = np.array([lb["p"] for lb in case30_data.labels])
    rep = evaluate_dispatch(case30, case30_data.instances, case30_data.labels, p)
    assert np.max(np.abs(rep.gaps)) < 1e-9
    assert rep.feasibility_rate == 1.0


def test_gap_includes_balance_price(case30, case30_data):
    inst, lb = case30_data.instances[:1], case30_data.labels[:1]
    p = np.array([lb[0]["p"]])
    p[0, 0] -= 1.0
    rep = evaluate_dispatch(case30, inst, lb, p)
    cost = inst[0].cost(case30)[0]
    expected = (DEFAULT_PENALTIES.balance - cost) / abs(lb[0]["objective"])
    assert rep.gaps[0] == pytest.approx(expected, rel=1e-6)


def test_checkpoint_round_trip(case30, case3):
    model = ProxyModel(case30, "dc3", seed=2)
    back = ProxyModel.from_dict(case30, model.to_dict())
    assert back.arch == "dc3" and np.array_equal(back.mlp.flat(), model.mlp.flat())
    with pytest.raises(ValueError):
        ProxyModel.from_dict(case3, model.to_dict())
