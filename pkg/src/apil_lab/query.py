"""Query policies: hindsight progress labeling, learned ask nets, baselines.

A finished trajectory only carries distances at queried steps plus the final
step. Hindsight labeling sweeps backward over those observations: a step is
"progressable" when the final gap is within epsilon or some later observed
pair shrinks the gap by a factor sigma, and progressable steps are labeled
continue while the rest are labeled query. The ignore variant additionally
compares the label against what the agent actually did.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nncore import AdamState, Dense, Embedding, ParamSet, softmax, softmax_nll

ASK_CONTINUE = 0
ASK_QUERY = 1
ASK_IGNORE = 2

ASK_NAMES = {ASK_CONTINUE: "continue", ASK_QUERY: "query", ASK_IGNORE: "ignore"}


@dataclass(frozen=True)
class StepRecord:
    features: np.ndarray
    exe_action: int
    ask_action: int
    mean_policy: np.ndarray | None = None
    remaining: int = 0


@dataclass
class Trajectory:
    steps: list[StepRecord]
    distances: dict[int, float]  # keyed by step index; horizon entry required

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def queried_steps(self) -> list[int]:
        return [t for t, s in enumerate(self.steps) if s.ask_action == ASK_QUERY]

    def validate(self) -> None:
        T = self.horizon
        if T not in self.distances:
            raise ValueError("trajectory is missing its final distance")
        for t in self.queried_steps():
            if t not in self.distances:
                raise ValueError(f"queried step {t} has no observed distance")


@dataclass(frozen=True)
class ApilConfig:
    sigma: float = 2.0
    epsilon: float = 0.0
    teacher_final_distance: float = 0.0
    # flips the progress test to g_t <= sigma * g_min (ablation only)
    leq_gap_test: bool = False

    def __post_init__(self):
        if self.sigma <= 1.0:
            raise ValueError(f"sigma must exceed 1, got {self.sigma}")
        if self.epsilon < 0.0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


def progress_flags(traj: Trajectory, cfg: ApilConfig) -> list[bool]:
    """Per-step progressable flags from one backward sweep over observations.

    The epsilon test uses the raw final distance; the sigma test compares the
    gap at each queried step against the minimum over later observed gaps,
    seeded with the final gap.
    """
    traj.validate()
    T = traj.horizon
    gap = lambda t: traj.distances[t] - cfg.teacher_final_distance
    g_min = gap(T)
    progress = traj.distances[T] <= cfg.epsilon
    flags = [False] * T
    for t in reversed(range(T)):
        if traj.steps[t].ask_action == ASK_QUERY:
            g_t = gap(t)
            if cfg.leq_gap_test:
                hit = g_t <= cfg.sigma * g_min
            else:
                hit = g_t >= cfg.sigma * g_min
            progress = progress or hit
            g_min = min(g_min, g_t)
        flags[t] = progress
    return flags


def apil_labels(traj: Trajectory, cfg: ApilConfig) -> list[int]:
    """Hindsight ask labels: continue at progressable steps, query elsewhere."""
    return [ASK_CONTINUE if ok else ASK_QUERY for ok in progress_flags(traj, cfg)]


def ignore_labels(traj: Trajectory, cfg: ApilConfig) -> list[int]:
    """Ignore-action variant: steps that already queried while progressable
    are masked out, and non-progressable steps that queried are confirmed."""
    labels = []
    for ok, step in zip(progress_flags(traj, cfg), traj.steps):
        queried = step.ask_action == ASK_QUERY
        if ok:
            labels.append(ASK_IGNORE if queried else ASK_CONTINUE)
        else:
            labels.append(ASK_CONTINUE if queried else ASK_QUERY)
    return labels


def always_query() -> int:
    return ASK_QUERY


def never_query() -> int:
    return ASK_CONTINUE


# ---------------------------------------------------------------- ask network


class QueryNet:
    """Ask policy over {continue, query}.

    Input is concat(state features, mean-policy ProbVec, remaining-steps
    embedding); the embedding table is indexed by the number of steps left.
    """

    STEPS_EMBED_DIM = 10

    def __init__(self, state_dim: int, n_actions: int, horizon: int,
                 rng: np.random.Generator, hidden: int = 100, lr: float = 1e-3):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.horizon = horizon
        self.params = ParamSet()
        in_dim = state_dim + n_actions + self.STEPS_EMBED_DIM
        self.hidden = Dense(self.params, "ask.hidden", in_dim, hidden, "tanh", rng)
        self.out = Dense(self.params, "ask.out", hidden, 2, "identity", rng)
        self.steps_embed = Embedding(self.params, "ask.steps",
                                     horizon + 1, self.STEPS_EMBED_DIM, rng)
        self.opt = AdamState(self.params, lr=lr)
        self._pending = 0

    def _input(self, features, mean_policy, remaining):
        if mean_policy is None:
            raise ValueError("ask decision needs the mean execution policy")
        return np.concatenate([features, mean_policy,
                               self.steps_embed.forward(remaining)])

    def forward(self, features, mean_policy, remaining: int) -> np.ndarray:
        x = self._input(features, mean_policy, remaining)
        h, _ = self.hidden.forward(x)
        logits, _ = self.out.forward(h)
        return softmax(logits)

    def forward_cached(self, features, mean_policy, remaining: int):
        x = self._input(features, mean_policy, remaining)
        h, h_cache = self.hidden.forward(x)
        logits, out_cache = self.out.forward(h)
        return softmax(logits), (remaining, h_cache, out_cache)

    def backward_from_dlogits(self, cache, dlogits: np.ndarray) -> None:
        remaining, h_cache, out_cache = cache
        dh = self.out.backward(out_cache, dlogits)
        dx = self.hidden.backward(h_cache, dh)
        self.steps_embed.backward(remaining, dx[self.state_dim + self.n_actions:])
        self._pending += 1

    def accumulate_nll(self, features, mean_policy, remaining: int,
                       label: int) -> float:
        x = self._input(features, mean_policy, remaining)
        h, h_cache = self.hidden.forward(x)
        logits, out_cache = self.out.forward(h)
        _, loss, dlogits = softmax_nll(logits, label)
        self.backward_from_dlogits((remaining, h_cache, out_cache), dlogits)
        return loss

    def end_episode_update(self) -> None:
        if self._pending == 0:
            return
        self.opt.step(self.params)
        self._pending = 0

    def param_arrays(self) -> dict[str, np.ndarray]:
        return self.params.as_arrays()

    def load_arrays(self, arrays) -> None:
        self.params.load_arrays(arrays)


def query_imitation_loss(net: QueryNet, steps: list[StepRecord],
                         labels: list[int]) -> float:
    """Summed NLL over non-ignore labels; gradients accumulate into the net."""
    if len(steps) != len(labels):
        raise ValueError("one label per step is required")
    total = 0.0
    for step, label in zip(steps, labels):
        if label == ASK_IGNORE:
            continue
        total += net.accumulate_nll(step.features, step.mean_policy,
                                    step.remaining, label)
    return total


def lemma2_gradient_check(net: QueryNet, step: StepRecord) -> float:
    """Max elementwise gap between two gradient routes at a progressable state.

    Route one is the imitation gradient under the ignore-action labeling of the
    agent's ask action; route two is the REINFORCE gradient of the expected
    query count, -grad[log pi(a) * 1{a != query}]. The lemma says they match.
    """
    def grab():
        grads = {p.name: p.grad.copy() for p in net.params}
        net.params.zero_grad()
        net._pending = 0
        return grads

    label = ASK_IGNORE if step.ask_action == ASK_QUERY else ASK_CONTINUE
    query_imitation_loss(net, [step], [label])
    imitation = grab()

    probs, cache = net.forward_cached(step.features, step.mean_policy,
                                      step.remaining)
    if step.ask_action != ASK_QUERY:
        dlogits = probs.copy()
        dlogits[step.ask_action] -= 1.0
        net.backward_from_dlogits(cache, dlogits)
    reinforce = grab()

    return max(float(np.abs(imitation[name] - reinforce[name]).max())
               for name in imitation)


# --------------------------------------------------------------- err-pred net


class ErrPredNet:
    """Margin regressor for the error-prediction baseline.

    The output head starts at exactly 1.0 (zero weights, unit bias), so an
    untrained regressor always predicts a query-worthy margin.
    """

    def __init__(self, state_dim: int, n_actions: int, rng: np.random.Generator,
                 hidden: int = 100, lr: float = 1e-3):
        self.params = ParamSet()
        self.hidden = Dense(self.params, "errpred.hidden",
                            state_dim + n_actions, hidden, "tanh", rng)
        self.out = Dense(self.params, "errpred.out", hidden, 1, "identity", rng)
        self.out.w.value[...] = 0.0
        self.out.b.value[...] = 1.0
        self.opt = AdamState(self.params, lr=lr)
        self._pending = 0

    def predict(self, features, mean_policy) -> float:
        x = np.concatenate([features, mean_policy])
        h, _ = self.hidden.forward(x)
        y, _ = self.out.forward(h)
        return float(y[0])

    def accumulate_sq_loss(self, features, mean_policy, target: float) -> float:
        x = np.concatenate([features, mean_policy])
        h, h_cache = self.hidden.forward(x)
        y, out_cache = self.out.forward(h)
        err = float(y[0]) - target
        dh = self.out.backward(out_cache, np.array([2.0 * err]))
        self.hidden.backward(h_cache, dh)
        self._pending += 1
        return err * err

    def end_episode_update(self) -> None:
        if self._pending == 0:
            return
        self.opt.step(self.params)
        self._pending = 0

    def param_arrays(self) -> dict[str, np.ndarray]:
        return self.params.as_arrays()

    def load_arrays(self, arrays) -> None:
        self.params.load_arrays(arrays)


# ------------------------------------------------------------- query policies


@dataclass
class DecisionContext:
    features: np.ndarray
    remaining: int
    rng: np.random.Generator
    agent: object
    mean_policy: Callable[[], np.ndarray]


class QueryPolicyBase:
    """Per-step ask decisions plus optional end-of-episode learning."""

    act_with_reference = True
    uses_mean_policy = False

    def begin_episode(self) -> None:
        pass

    def decide(self, ctx: DecisionContext) -> int:
        raise NotImplementedError

    def observe_query(self, features, mean_policy, response) -> None:
        pass

    def end_episode(self, traj: Trajectory) -> float | None:
        return None

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_arrays(self, arrays) -> None:
        pass


class AlwaysQueryPolicy(QueryPolicyBase):
    def decide(self, ctx: DecisionContext) -> int:
        return always_query()


class NeverQueryPolicy(QueryPolicyBase):
    def decide(self, ctx: DecisionContext) -> int:
        return never_query()


class DaggerPolicy(AlwaysQueryPolicy):
    """Labels every step but executes the agent's own policy."""

    act_with_reference = False


class HindsightQueryPolicy(QueryPolicyBase):
    """Learned ask policy trained on hindsight labels after each episode."""

    uses_mean_policy = True

    def __init__(self, net: QueryNet, cfg: ApilConfig, use_ignore: bool = False,
                 greedy: bool = False):
        self.net = net
        self.cfg = cfg
        self.use_ignore = use_ignore
        self.greedy = greedy

    def decide(self, ctx: DecisionContext) -> int:
        probs = self.net.forward(ctx.features, ctx.mean_policy(), ctx.remaining)
        if self.greedy:
            return int(np.argmax(probs))
        return int(ctx.rng.choice(2, p=probs))

    def end_episode(self, traj: Trajectory) -> float | None:
        labeler = ignore_labels if self.use_ignore else apil_labels
        labels = labeler(traj, self.cfg)
        n_valid = sum(1 for lab in labels if lab != ASK_IGNORE)
        total = query_imitation_loss(self.net, traj.steps, labels)
        self.net.end_episode_update()
        return total / n_valid if n_valid else None

    def param_arrays(self):
        return self.net.param_arrays()

    def load_arrays(self, arrays):
        self.net.load_arrays(arrays)


THRESHOLD_KINDS = ("intrun", "extrun", "behvun")


def threshold_decision(kind: str, tau: float, report) -> int:
    """Query iff the selected uncertainty strictly exceeds tau."""
    if kind == "intrun":
        value = report.intrinsic
    elif kind == "extrun":
        value = report.extrinsic
    elif kind == "behvun":
        value = report.behavioral
    else:
        raise ValueError(f"unknown threshold kind {kind!r}")
    return ASK_QUERY if value > tau else ASK_CONTINUE


class ThresholdQueryPolicy(QueryPolicyBase):
    """Queries when a per-step posterior uncertainty estimate exceeds tau."""

    def __init__(self, kind: str, tau: float, ucfg):
        if kind not in THRESHOLD_KINDS:
            raise ValueError(f"unknown threshold kind {kind!r}")
        self.kind = kind
        self.tau = tau
        self.ucfg = ucfg

    def decide(self, ctx: DecisionContext) -> int:
        from .uncertainty import estimate
        report = estimate(ctx.agent, ctx.features, self.ucfg, ctx.rng)
        return threshold_decision(self.kind, self.tau, report)


class ErrPredQueryPolicy(QueryPolicyBase):
    """Queries when the predicted margin 1 - pi(a*|s) exceeds a threshold."""

    uses_mean_policy = True

    def __init__(self, net: ErrPredNet, threshold: float = 0.5):
        self.net = net
        self.threshold = threshold
        self._pairs: list[tuple[np.ndarray, np.ndarray, float]] = []

    def decide(self, ctx: DecisionContext) -> int:
        pred = self.net.predict(ctx.features, ctx.mean_policy())
        return ASK_QUERY if pred > self.threshold else ASK_CONTINUE

    def observe_query(self, features, mean_policy, response) -> None:
        margin = 1.0 - float(mean_policy[response.exe_action])
        self._pairs.append((features, mean_policy, margin))

    def end_episode(self, traj: Trajectory) -> float | None:
        if not self._pairs:
            return None
        total = 0.0
        for features, mean_policy, margin in self._pairs:
            total += self.net.accumulate_sq_loss(features, mean_policy, margin)
        loss = total / len(self._pairs)
        self.net.end_episode_update()
        self._pairs = []
        return loss

    def param_arrays(self):
        return self.net.param_arrays()

    def load_arrays(self, arrays):
        self.net.load_arrays(arrays)
