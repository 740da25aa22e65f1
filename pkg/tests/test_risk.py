import numpy as np
import pytest

from optproxy.primal import ProxyModel
from optproxy.risk import (
    ScenarioConfig,
    ScenarioSet,
    congested_network,
    daily_profile,
    generate_scenarios,
    oracle_engine,
    run_risk,
)

SMALL = ScenarioConfig(n_scenarios=3, horizon=8, seed=2)


@pytest.fixture(scope="module")
def tight(case30):
    # line 33 feeds the 3.5 MW load at bus 26 on its own
    return congested_network(case30, 33, 3.5)


@pytest.fixture(scope="module")
def scen(case30):
    return generate_scenarios(case30, SMALL)


@pytest.fixture(scope="module")
def oracle_report(tight, scen):
    return run_risk(tight, scen, "oracle")


def test_profile_shape():
    prof = daily_profile()
    assert prof.shape == (288,)
    # evening peak above the small hours
    assert prof[19 * 12] > prof[3 * 12]
    assert np.all(prof > 0)


def test_scenarios_are_reproducible(case30, scen, tmp_path):
    again = generate_scenarios(case30, SMALL)
    np.testing.assert_array_equal(scen.loads, again.loads)
    assert scen.shape == (3, 8)
    scen.save(tmp_path / "s.json")
    back = ScenarioSet.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.loads, scen.loads)
    assert ScenarioConfig.from_dict(back.config) == SMALL


def test_scenario_file_needs_three_axes(tmp_path):
    (tmp_path / "bad.json").write_text('{"loads": [[1.0, 2.0]], "reserve": [1.0]}')
    with pytest.raises(ValueError):
        ScenarioSet.load(tmp_path / "bad.json")


def test_oracle_never_misses_balance(oracle_report):
    assert not np.any(oracle_report.balance)
    assert oracle_report.thermal.shape == (8, 41)


def test_forced_line_overloads(oracle_report):
    # bus 26 hangs off line 33 alone, so peak hours push it past a rating equal to its base load
    assert oracle_report.thermal[:, 33].max() > 0.0
    others = np.delete(oracle_report.thermal, 33, axis=1)
    assert not np.any(others)


def test_replaying_oracle_reproduces_it(tight, scen, oracle_report):
    dispatch = np.array([oracle_engine(tight, scen.instances(tight, s)) for s in range(3)])
    rep = run_risk(tight, scen, "replay", dispatch=dispatch, compare_oracle=True)
    np.testing.assert_array_equal(rep.thermal, oracle_report.thermal)
    np.testing.assert_array_equal(rep.balance, oracle_report.balance)
    assert rep.summary()["max_thermal_disagreement"] == 0.0


def test_scenario_order_does_not_matter(tight, scen, oracle_report):
    perm = [2, 0, 1]
    shuffled = ScenarioSet(scen.loads[perm], scen.reserve[perm], scen.config)
    rep = run_risk(tight, shuffled, "oracle")
    np.testing.assert_allclose(rep.thermal, oracle_report.thermal)


def test_model_engine_rows(tight, scen):
    rep = run_risk(tight, scen, "model", model=ProxyModel(tight, "e2elr", seed=0))
    # the repair layers keep an untrained proxy balanced
    assert not np.any(rep.balance)
    rows = list(rep.rows())
    assert len(rows) == 8
    assert len(rows[0]) == len(rep.columns([ln.id for ln in tight.lines]))
    assert [r[0] for r in rows] == list(range(8))


def test_engine_arguments_checked(tight, scen):
    with pytest.raises(ValueError):
        run_risk(tight, scen, "crystal-ball")
    with pytest.raises(ValueError):
        run_risk(tight, scen, "model")
    with pytest.raises(ValueError):
        run_risk(tight, scen, "replay")
