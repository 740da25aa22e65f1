import numpy as np
import pytest

from optproxy.grid import Generator, Line, Network
from optproxy.instances import (
    DegenerateFleet,
    SamplerConfig,
    build_dataset,
    draw_parameters,
    label_dataset,
    load_dataset,
    reserve_factor,
    sample_instance,
    save_dataset,
    set_reserve_capacities,
    split_counts,
)


def fleet(p_max):
    gens = [Generator(f"g{i}", 1, 0.0, p, p, 1.0, 0.0) for i, p in enumerate(p_max)]
    return Network(buses=[1, 2], slack_bus=1, generators=gens, lines=[Line("l", 1, 2, 1.0, 10.0)], loads=(0.0, 1.0))


def test_degenerate_sampler_returns_base(case30):
    cfg = SamplerConfig(gamma_range=(1.0, 1.0), eta_sd=0.0)
    inst = sample_instance(case30, case30.base_loads, cfg, 11)
    assert np.array_equal(inst.loads, case30.base_loads)


def test_same_seed_same_instance(case30):
    cfg = SamplerConfig.for_kind("ed")
    a = sample_instance(case30, case30.base_loads, cfg, 42)
    b = sample_instance(case30, case30.base_loads, cfg, 42)
    assert a.to_dict() == b.to_dict()


def test_sampler_moments(case30):
    rng = np.random.default_rng(0)
    cfg = SamplerConfig.for_kind("ed")
    base = np.ones(case30.n_bus)
    loads, reserve, _, _ = draw_parameters(case30, base, cfg, rng, 10_000)
    # with unit base loads, gamma times the bus-mean of eta recovers gamma up to a 5%/sqrt(30) wobble
    gamma_est = loads.mean(axis=1)
    assert abs(gamma_est.mean() - 1.0) < 0.01
    eta = loads / loads.mean(axis=1, keepdims=True)
    assert abs(eta.std() - 0.05) < 0.005
    big = case30.p_max.max()
    assert reserve.min() >= big and reserve.max() <= 2 * big


def test_reserve_factor_examples():
    assert reserve_factor([10, 10]) == 1.0
    assert reserve_factor([100] + [25] * 16) == pytest.approx(1.0)
    assert reserve_factor([100, 100, 100, 100, 100, 100]) == pytest.approx(5 / 6)
    assert reserve_factor([50]) == 1.0
    with pytest.raises(DegenerateFleet):
        reserve_factor([0.0, 0.0])


def test_set_reserve_capacities():
    net = set_reserve_capacities(fleet([10.0, 10.0]))
    np.testing.assert_allclose(net.r_max, [10.0, 10.0])
    net = set_reserve_capacities(fleet([60.0] * 10))
    np.testing.assert_allclose(net.r_max, 30.0)


def test_split_counts():
    assert list(split_counts(10, (0.8, 0.1, 0.1))) == [8, 1, 1]
    assert split_counts(7, (0.8, 0.1, 0.1)).sum() == 7


def test_labels_are_balanced(case30):
    ds = label_dataset(build_dataset(case30, 10, SamplerConfig.for_kind("ed"), 3), case30)
    for inst, lb in zip(ds.instances, ds.labels):
        assert abs(sum(lb["p"]) - inst.total_load) <= 1e-8
        assert lb["status"] == "Optimal"


def test_serialization_is_deterministic(tmp_path, case3):
    cfg = SamplerConfig.for_kind("dcopf")
    for name in ("a", "b"):
        save_dataset(label_dataset(build_dataset(case3, 12, cfg, 9, "dcopf"), case3), tmp_path / name)
    for split in ("train", "val", "test"):
        assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == (tmp_path / "b" / f"{split}.jsonl").read_bytes()
    back = load_dataset(tmp_path / "a")
    assert len(back) == 12 and back.labels is not None
    assert [len(back.split[s]) for s in ("train", "val", "test")] == [10, 1, 1]


def test_infeasible_instances_are_dropped(case3):
    cfg = SamplerConfig(gamma_range=(3.0, 3.0), eta_sd=0.0)
    ds = label_dataset(build_dataset(case3, 4, cfg, 0), case3)
    assert len(ds) == 0 and ds.config["dropped"] == 4


def test_scopf_kind_draws_multipliers(scopf3):
    inst = sample_instance(scopf3, scopf3.base_loads, SamplerConfig.for_kind("scopf"), 5)
    assert inst.reserve_req == 0.0
    assert np.all((inst.cost_scale >= 0.9) & (inst.cost_scale <= 1.1))
    assert np.all((inst.pmax_scale >= 0.9) & (inst.pmax_scale <= 1.1))


def test_unknown_kind():
    with pytest.raises(ValueError):
        SamplerConfig.for_kind("acopf")
    with pytest.raises(ValueError):
        build_dataset(None, 0, SamplerConfig(), 0)
