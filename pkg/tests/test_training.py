"""Unit tests for the episode loop, training runs, and CSV logging."""
from types import SimpleNamespace

import numpy as np
import pytest

from apil_lab.agent import PersonaAgent
from apil_lab.envs import GridWorld, make_env
from apil_lab.query import (AlwaysQueryPolicy, ApilConfig, DaggerPolicy,
                            ErrPredQueryPolicy, HindsightQueryPolicy,
                            NeverQueryPolicy, QueryNet, ThresholdQueryPolicy)
from apil_lab.teachers import make_committee
from apil_lab.training import (METRICS_COLUMNS, RunConfig, evaluate,
                               final_query_rate, final_success_rate,
                               make_query_policy, read_csv, run_episode,
                               run_training, tune_tau, write_csv)


def _fresh_setup(teacher="detm", seed=0):
    env = make_env("grid", None)
    committee = make_committee(teacher)
    rng = np.random.default_rng(seed)
    agent = PersonaAgent(env.state_dim, env.n_actions, committee.size, rng)
    return env, committee, agent, rng


def _arrays(agent):
    return {k: v.copy() for k, v in agent.param_arrays().items()}


def test_never_query_run_leaves_the_agent_at_init():
    cfg = RunConfig(method="never", episodes=40, seed=0, probe_every=0)
    result = run_training(cfg)
    init_rng = np.random.default_rng(cfg.seed).spawn(4)[0]
    replica = PersonaAgent(result.env.state_dim, result.env.n_actions,
                           result.committee.size, init_rng, lr=cfg.lr)
    trained = result.agent.param_arrays()
    for name, value in replica.param_arrays().items():
        assert np.array_equal(trained[name], value)


def test_bc_episode_follows_the_teacher():
    env, committee, agent, rng = _fresh_setup()
    traj, metrics = run_episode(agent, committee, env, AlwaysQueryPolicy(), rng)
    actions = [s.exe_action for s in traj.steps]
    assert actions == [GridWorld.RIGHT] * 4 + [GridWorld.DOWN] * 4
    assert traj.distances == {t: float(8 - t) for t in range(9)}
    assert metrics.query_rate == 1.0
    assert metrics.success
    assert metrics.exe_loss is not None


def test_same_seed_runs_are_identical():
    cfg = RunConfig(method="apil", episodes=30, seed=5)
    assert run_training(cfg).rows == run_training(cfg).rows


def test_untrained_apil_queries_about_half_the_time():
    rates = []
    for seed in range(20):
        cfg = RunConfig(method="apil", episodes=1, seed=seed, probe_every=0)
        rates.append(run_training(cfg).rows[0]["query_rate"])
    assert 0.3 <= np.mean(rates) <= 0.7


def test_apil_query_rate_trends_down(apil_runs):
    for teacher, (result, _) in apil_runs.items():
        episodes = [r["episode"] for r in result.rows]
        rates = [r["query_rate"] for r in result.rows]
        slope = np.polyfit(episodes, rates, 1)[0]
        assert slope < 0.0, f"{teacher}: slope {slope}"


def test_evaluate_fresh_bc_agent():
    env, committee, agent, rng = _fresh_setup()
    summary = evaluate(agent, AlwaysQueryPolicy(), env, committee, 20, rng)
    assert summary["query_rate"] == 1.0
    assert summary["success_rate"] == 1.0  # any grid rollout reaches the goal
    assert summary["mean_final_dist"] == 0.0


def test_evaluate_restores_sampling_mode_and_supports_greedy_exe():
    env, committee, agent, rng = _fresh_setup()
    net = QueryNet(env.state_dim, env.n_actions, env.horizon, rng)
    policy = HindsightQueryPolicy(net, ApilConfig())
    assert policy.greedy is False
    evaluate(agent, policy, env, committee, 3, rng)
    assert policy.greedy is False
    summary = evaluate(agent, policy, env, committee, 3, rng, greedy_exe=True)
    assert set(summary) == {"query_rate", "success_rate", "mean_final_dist"}
    assert summary["success_rate"] == 1.0


def test_csv_round_trip_preserves_values(tmp_path):
    path = tmp_path / "metrics.csv"
    columns = ("episode", "query_rate", "success", "final_dist", "exe_loss")
    rows = [{"episode": 0, "query_rate": 1 / 3, "success": True,
             "final_dist": np.float64(0.25), "exe_loss": None}]
    write_csv(path, columns, rows)
    back = read_csv(path)
    assert len(back) == 1
    assert float(back[0]["query_rate"]) == 1 / 3  # repr round-trips exactly
    assert back[0]["success"] == "1"
    assert back[0]["final_dist"] == "0.25"
    assert back[0]["exe_loss"] == ""


def test_write_csv_creates_parent_dirs(tmp_path):
    path = tmp_path / "a" / "b" / "c.csv"
    write_csv(path, ("x",), [{"x": 1}])
    assert path.exists()


def test_probe_cadence():
    cfg = RunConfig(method="never", episodes=60, seed=0, probe_every=25)
    result = run_training(cfg)
    probed = [r["episode"] for r in result.rows if "intrinsic" in r]
    assert probed == [0, 25, 50]
    for r in result.rows:
        assert set(r) <= set(METRICS_COLUMNS)


def test_config_validation():
    with pytest.raises(ValueError, match="unknown method"):
        RunConfig(method="bogus")
    with pytest.raises(ValueError, match="episodes"):
        RunConfig(episodes=0)


def test_make_query_policy_dispatch():
    env = make_env("grid", None)
    rng = np.random.default_rng(0)

    def build(method, **kw):
        return make_query_policy(RunConfig(method=method, **kw), env, rng)

    apil = build("apil")
    assert type(apil) is HindsightQueryPolicy and not apil.use_ignore
    phil = build("phil-ignore")
    assert type(phil) is HindsightQueryPolicy and phil.use_ignore
    assert type(build("bc")) is AlwaysQueryPolicy
    assert type(build("dagger")) is DaggerPolicy
    intrun = build("intrun", tau=0.4)
    assert type(intrun) is ThresholdQueryPolicy
    assert (intrun.kind, intrun.tau) == ("intrun", 0.4)
    assert type(build("extrun")) is ThresholdQueryPolicy
    assert type(build("behvun")) is ThresholdQueryPolicy
    assert type(build("errpred")) is ErrPredQueryPolicy
    assert type(build("never")) is NeverQueryPolicy


def test_final_window_statistics():
    rows = [{"query_rate": float(i), "success": i % 2} for i in range(150)]
    assert final_query_rate(rows) == 99.5  # mean of 50..149
    assert final_success_rate(rows) == 0.5


def test_tune_tau_scans_ascending(monkeypatch):
    calls = []

    def fake_run(cfg):
        calls.append(cfg.tau)
        qr = round(max(0.0, 1.0 - cfg.tau), 2)
        return SimpleNamespace(rows=[{"query_rate": qr}] * 100)

    monkeypatch.setattr("apil_lab.training.run_training", fake_run)
    base = RunConfig(method="intrun")
    assert tune_tau(base, 0.33) == 0.65  # first grid point within tolerance
    assert len(calls) == 13
    calls.clear()
    assert tune_tau(base, 2.0) == 0.05  # no match: closest candidate wins
    assert len(calls) == 20


def test_run_episode_without_training_is_read_only():
    env, committee, agent, rng = _fresh_setup()
    before = _arrays(agent)
    run_episode(agent, committee, env, AlwaysQueryPolicy(), rng, train=False)
    after = agent.param_arrays()
    for name, value in before.items():
        assert np.array_equal(value, after[name])
