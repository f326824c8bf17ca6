"""Teacher committees: non-deterministic reference policies with identities."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class TeacherKind(enum.Enum):
    DETM_FIRST = "detm-first"
    DETM_LAST = "detm-last"
    RAND = "rand"


TEACHER_MODELS: dict[str, tuple[TeacherKind, ...]] = {
    "detm": (TeacherKind.DETM_FIRST,),
    "rand": (TeacherKind.RAND,),
    "tworand": (TeacherKind.RAND, TeacherKind.RAND),
    "twodifdetm": (TeacherKind.DETM_FIRST, TeacherKind.DETM_LAST),
}


@dataclass(frozen=True)
class TeacherResponse:
    exe_action: int
    identity: int
    dist: float


class Committee:
    """A set of teachers; one member is active per episode."""

    def __init__(self, members: tuple[TeacherKind, ...]):
        if not members:
            raise ValueError("committee needs at least one member")
        self.members = tuple(members)
        self.active_member: int | None = None

    @property
    def size(self) -> int:
        return len(self.members)

    def select_member(self, rng: np.random.Generator) -> int:
        self.active_member = int(rng.integers(self.size))
        return self.active_member

    def respond(self, env, state, rng: np.random.Generator) -> TeacherResponse:
        """Answer a query: reference action, active identity, current distance."""
        if state.terminal:
            raise ValueError("teacher queried at a terminal state")
        if self.active_member is None:
            raise ValueError("select_member must run before respond")
        kind = self.members[self.active_member]
        refs = env.ref_action_set(state)
        if kind is TeacherKind.DETM_FIRST:
            action = refs[0]
        elif kind is TeacherKind.DETM_LAST:
            action = refs[-1]
        else:
            action = refs[int(rng.integers(len(refs)))]
        return TeacherResponse(action, self.active_member, env.distance(state))

    def action_distribution(self, env, state, member: int | None = None) -> np.ndarray:
        """Exact per-member action distribution; mixture over members if None."""
        if member is None:
            dists = [self.action_distribution(env, state, m) for m in range(self.size)]
            return np.mean(dists, axis=0)
        kind = self.members[member]
        refs = env.ref_action_set(state)
        probs = np.zeros(env.n_actions)
        if kind is TeacherKind.DETM_FIRST:
            probs[refs[0]] = 1.0
        elif kind is TeacherKind.DETM_LAST:
            probs[refs[-1]] = 1.0
        else:
            probs[list(refs)] = 1.0 / len(refs)
        return probs


def make_committee(model: str) -> Committee:
    if model not in TEACHER_MODELS:
        raise ValueError(
            f"unknown teacher model {model!r}; expected one of {sorted(TEACHER_MODELS)}"
        )
    return Committee(TEACHER_MODELS[model])


def estimate_teacher_final_distance(committee: Committee, env, n_rollouts: int,
                                    rng: np.random.Generator) -> float:
    """Mean final distance over always-query rollouts (the d* baseline)."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be positive")
    total = 0.0
    for _ in range(n_rollouts):
        committee.select_member(rng)
        state = env.reset()
        while not state.terminal:
            resp = committee.respond(env, state, rng)
            state = env.step(state, resp.exe_action)
        total += env.distance(state)
    return total / n_rollouts
