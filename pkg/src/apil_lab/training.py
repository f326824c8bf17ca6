"""Episode loop, training runs, evaluation, and metrics logging.

One run = one (env, teacher committee, method, seed) cell trained for a fixed
number of episodes with batch-one updates at episode end. Losses from queried
steps accumulate into the persona agent; methods with a learned ask policy
additionally train it on hindsight labels of the finished trajectory.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from .agent import PersonaAgent
from .envs import make_env
from .query import (ASK_QUERY, AlwaysQueryPolicy, ApilConfig, DaggerPolicy,
                    DecisionContext, ErrPredNet, ErrPredQueryPolicy,
                    HindsightQueryPolicy, NeverQueryPolicy, QueryNet,
                    StepRecord, ThresholdQueryPolicy, Trajectory)
from .teachers import estimate_teacher_final_distance, make_committee
from .uncertainty import UncertaintyConfig, mean_report

METHODS = ("apil", "phil-ignore", "bc", "dagger", "intrun", "extrun",
           "behvun", "errpred", "never")

METRICS_COLUMNS = ("episode", "method", "teacher", "env", "seed", "query_rate",
                   "success", "final_dist", "exe_loss", "ask_loss", "intrinsic",
                   "extrinsic", "behavioral", "total", "model")

INFLATION_COLUMNS = ("episode", "method", "teacher", "env", "seed", "n1", "model")

EVAL_COLUMNS = ("episode", "method", "teacher", "env", "seed", "query_rate",
                "success_rate", "mean_final_dist")


@dataclass(frozen=True)
class RunConfig:
    env: str = "grid"
    map_path: str | None = None
    teacher: str = "detm"
    method: str = "apil"
    episodes: int = 1000
    seed: int = 0
    lr: float = 1e-3
    sigma: float = 2.0
    epsilon: float = 0.0
    tau: float = 0.5
    err_threshold: float = 0.5
    n1: int = 5
    n2: int = 10
    probe_every: int = 25
    probe_rollouts: int = 3
    inflation_n1s: tuple[int, ...] = ()
    eval_every: int = 0
    eval_episodes: int = 20
    d_star_rollouts: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.episodes < 1:
            raise ValueError("episodes must be positive")


@dataclass
class EpisodeMetrics:
    query_rate: float
    success: bool
    final_dist: float
    exe_loss: float | None
    ask_loss: float | None


@dataclass
class RunResult:
    config: RunConfig
    rows: list[dict]
    inflation_rows: list[dict]
    eval_rows: list[dict]
    agent: PersonaAgent
    policy: object
    env: object
    committee: object
    probe_features: list[np.ndarray]
    d_star: float


def make_query_policy(cfg: RunConfig, env, rng: np.random.Generator):
    apil_cfg = ApilConfig(sigma=cfg.sigma, epsilon=cfg.epsilon)
    if cfg.method in ("apil", "phil-ignore"):
        net = QueryNet(env.state_dim, env.n_actions, env.horizon, rng, lr=cfg.lr)
        return HindsightQueryPolicy(net, apil_cfg,
                                    use_ignore=cfg.method == "phil-ignore")
    if cfg.method == "bc":
        return AlwaysQueryPolicy()
    if cfg.method == "dagger":
        return DaggerPolicy()
    if cfg.method in ("intrun", "extrun", "behvun"):
        return ThresholdQueryPolicy(cfg.method, cfg.tau,
                                    UncertaintyConfig(cfg.n1, cfg.n2))
    if cfg.method == "errpred":
        net = ErrPredNet(env.state_dim, env.n_actions, rng, lr=cfg.lr)
        return ErrPredQueryPolicy(net, cfg.err_threshold)
    if cfg.method == "never":
        return NeverQueryPolicy()
    raise ValueError(f"unknown method {cfg.method!r}")


def run_episode(agent: PersonaAgent, committee, env, policy,
                rng: np.random.Generator, n1: int = 5,
                train: bool = True):
    """Run one episode; returns (Trajectory, EpisodeMetrics).

    Queried steps accumulate agent losses and execute the reference action
    unless the policy opts out (dagger). Non-queried steps sample from the
    mean execution policy. Updates fire at episode end only when training.
    """
    committee.select_member(rng)
    policy.begin_episode()
    state = env.reset()
    steps: list[StepRecord] = []
    distances: dict[int, float] = {}
    pol_losses: list[float] = []
    n_queries = 0
    t = 0
    while t < env.horizon and not state.terminal:
        features = env.encode(state)
        remaining = env.horizon - t
        mean_policy: np.ndarray | None = None

        def get_mean():
            nonlocal mean_policy
            if mean_policy is None:
                mean_policy = agent.mean_exe_policy(features, n1, rng)
            return mean_policy

        ctx = DecisionContext(features=features, remaining=remaining, rng=rng,
                              agent=agent, mean_policy=get_mean)
        ask = policy.decide(ctx)
        if ask == ASK_QUERY:
            n_queries += 1
            response = committee.respond(env, state, rng)
            distances[t] = response.dist
            if train:
                pol_loss, _ = agent.exe_losses(features, response)
                pol_losses.append(pol_loss)
                if policy.uses_mean_policy:
                    policy.observe_query(features, get_mean(), response)
            if policy.act_with_reference:
                action = response.exe_action
            else:
                action = int(rng.choice(env.n_actions, p=get_mean()))
        else:
            action = int(rng.choice(env.n_actions, p=get_mean()))
        steps.append(StepRecord(features=features, exe_action=action,
                                ask_action=ask, mean_policy=mean_policy,
                                remaining=remaining))
        state = env.step(state, action)
        t += 1

    final_dist = env.distance(state)
    distances[len(steps)] = final_dist
    traj = Trajectory(steps, distances)

    ask_loss = None
    if train:
        agent.end_episode_update()
        ask_loss = policy.end_episode(traj)

    metrics = EpisodeMetrics(
        query_rate=n_queries / env.horizon,
        success=final_dist == 0.0,
        final_dist=final_dist,
        exe_loss=float(np.mean(pol_losses)) if pol_losses else None,
        ask_loss=ask_loss,
    )
    return traj, metrics


def probe_trajectory_features(env, committee, rng: np.random.Generator,
                              n_rollouts: int) -> list[np.ndarray]:
    """States of a few frozen always-query rollouts, encoded for the agent."""
    features = []
    for _ in range(n_rollouts):
        committee.select_member(rng)
        state = env.reset()
        while not state.terminal:
            features.append(env.encode(state))
            resp = committee.respond(env, state, rng)
            state = env.step(state, resp.exe_action)
    return features


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns, rows) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_training(cfg: RunConfig, out_path=None) -> RunResult:
    """Train one cell; optionally write its metrics CSV (plus side CSVs)."""
    env = make_env(cfg.env, cfg.map_path)
    committee = make_committee(cfg.teacher)
    root = np.random.default_rng(cfg.seed)
    init_rng, train_rng, probe_rng, dstar_rng = root.spawn(4)

    agent = PersonaAgent(env.state_dim, env.n_actions, committee.size,
                         init_rng, lr=cfg.lr)
    policy = make_query_policy(cfg, env, init_rng)

    if env.always_succeeds:
        d_star = 0.0
    else:
        d_star = estimate_teacher_final_distance(committee, env,
                                                 cfg.d_star_rollouts, dstar_rng)
    if isinstance(policy, HindsightQueryPolicy):
        policy.cfg = replace(policy.cfg, teacher_final_distance=d_star)

    probe_features = probe_trajectory_features(env, committee, probe_rng,
                                               cfg.probe_rollouts)
    ucfg = UncertaintyConfig(cfg.n1, cfg.n2)

    tag = {"method": cfg.method, "teacher": cfg.teacher, "env": cfg.env,
           "seed": cfg.seed}
    rows: list[dict] = []
    inflation_rows: list[dict] = []
    eval_rows: list[dict] = []
    for episode in range(cfg.episodes):
        probe = None
        if cfg.probe_every and episode % cfg.probe_every == 0:
            probe = mean_report(agent, probe_features, ucfg, probe_rng)
            for n1 in cfg.inflation_n1s:
                rep = mean_report(agent, probe_features,
                                  UncertaintyConfig(int(n1), cfg.n2), probe_rng)
                inflation_rows.append({"episode": episode, **tag,
                                       "n1": int(n1), "model": rep.model})
        _, metrics = run_episode(agent, committee, env, policy, train_rng,
                                 n1=cfg.n1, train=True)
        row = {"episode": episode, **tag,
               "query_rate": metrics.query_rate,
               "success": metrics.success,
               "final_dist": metrics.final_dist,
               "exe_loss": metrics.exe_loss,
               "ask_loss": metrics.ask_loss}
        if probe is not None:
            row.update(intrinsic=probe.intrinsic, extrinsic=probe.extrinsic,
                       behavioral=probe.behavioral, total=probe.total,
                       model=probe.model)
        rows.append(row)

        if cfg.eval_every and (episode + 1) % cfg.eval_every == 0:
            summary = evaluate(agent, policy, env, committee,
                               cfg.eval_episodes, probe_rng, n1=cfg.n1)
            eval_rows.append({"episode": episode, **tag, **summary})

    if out_path is not None:
        write_csv(out_path, METRICS_COLUMNS, rows)
        if inflation_rows:
            write_csv(str(out_path) + ".inflation.csv", INFLATION_COLUMNS,
                      inflation_rows)
        if eval_rows:
            write_csv(str(out_path) + ".eval.csv", EVAL_COLUMNS, eval_rows)

    return RunResult(config=cfg, rows=rows, inflation_rows=inflation_rows,
                     eval_rows=eval_rows, agent=agent, policy=policy, env=env,
                     committee=committee, probe_features=probe_features,
                     d_star=d_star)


def evaluate(agent: PersonaAgent, policy, env, committee, n_episodes: int,
             rng: np.random.Generator, n1: int = 5,
             greedy_exe: bool = False) -> dict:
    """Frozen-parameter rollouts: greedy ask decisions, sampled executions."""
    was_greedy = getattr(policy, "greedy", None)
    if was_greedy is not None:
        policy.greedy = True
    try:
        rates, successes, finals = [], [], []
        for _ in range(n_episodes):
            if greedy_exe:
                traj, metrics = _greedy_exe_episode(agent, committee, env,
                                                    policy, rng, n1)
            else:
                traj, metrics = run_episode(agent, committee, env, policy, rng,
                                            n1=n1, train=False)
            rates.append(metrics.query_rate)
            successes.append(metrics.success)
            finals.append(metrics.final_dist)
    finally:
        if was_greedy is not None:
            policy.greedy = was_greedy
    return {"query_rate": float(np.mean(rates)),
            "success_rate": float(np.mean(successes)),
            "mean_final_dist": float(np.mean(finals))}


def _greedy_exe_episode(agent, committee, env, policy, rng, n1):
    """Evaluation episode taking the argmax of the mean policy when acting."""
    committee.select_member(rng)
    policy.begin_episode()
    state = env.reset()
    n_queries = 0
    t = 0
    while t < env.horizon and not state.terminal:
        features = env.encode(state)
        mean_policy = None

        def get_mean():
            nonlocal mean_policy
            if mean_policy is None:
                mean_policy = agent.mean_exe_policy(features, n1, rng)
            return mean_policy

        ctx = DecisionContext(features=features, remaining=env.horizon - t,
                              rng=rng, agent=agent, mean_policy=get_mean)
        ask = policy.decide(ctx)
        if ask == ASK_QUERY:
            n_queries += 1
            response = committee.respond(env, state, rng)
            action = (response.exe_action if policy.act_with_reference
                      else int(np.argmax(get_mean())))
        else:
            action = int(np.argmax(get_mean()))
        state = env.step(state, action)
        t += 1
    final = env.distance(state)
    return None, EpisodeMetrics(n_queries / env.horizon, final == 0.0, final,
                                None, None)


def final_query_rate(rows: list[dict], window: int = 100) -> float:
    tail = rows[-window:]
    return float(np.mean([float(r["query_rate"]) for r in tail]))


def final_success_rate(rows: list[dict], window: int = 100) -> float:
    tail = rows[-window:]
    return float(np.mean([float(r["success"]) for r in tail]))


TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


def tune_tau(base_cfg: RunConfig, target_query_rate: float,
             taus=TAU_GRID, tol: float = 0.05) -> float:
    """Smallest tau whose final-100 query rate matches the target within tol.

    Falls back to the closest candidate if none matches. Candidates run in
    ascending order and the scan stops at the first match.
    """
    best_tau, best_gap = None, np.inf
    for tau in taus:
        result = run_training(replace(base_cfg, tau=float(tau)))
        gap = abs(final_query_rate(result.rows) - target_query_rate)
        if gap <= tol:
            return float(tau)
        if gap < best_gap:
            best_tau, best_gap = float(tau), gap
    return best_tau
