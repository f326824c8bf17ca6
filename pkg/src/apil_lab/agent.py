"""Persona-aware policy-distribution agent.

The agent models a distribution over teacher policies with three parts:
an identity net rho(k|s), a persona embedding table, and a persona-conditioned
policy net pi(a|s,h). Sampling a policy means sampling an identity, looking up
its persona, and evaluating the policy net on concat(state, persona).
Dropout on the policy-net input is used only for posterior sampling; acting
and training always run with the mask disabled.
"""
from __future__ import annotations

import numpy as np

from .nncore import (AdamState, Dense, DropoutSpec, Embedding, ParamSet,
                     sample_dropout_mask, softmax, softmax_nll)
from .teachers import TeacherResponse

HIDDEN_WIDTH = 100
PERSONA_DIM = 50
DROPOUT_RATE = 0.2


class PersonaAgent:
    def __init__(self, state_dim: int, n_actions: int, n_teachers: int,
                 rng: np.random.Generator, hidden: int = HIDDEN_WIDTH,
                 persona_dim: int = PERSONA_DIM, dropout_rate: float = DROPOUT_RATE,
                 lr: float = 1e-3):
        if n_teachers < 1:
            raise ValueError("need at least one teacher")
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.n_teachers = n_teachers
        self.persona_dim = persona_dim
        self.policy_input_dim = state_dim + persona_dim
        self.dropout = DropoutSpec(dropout_rate, target="policy_input")

        self.exe_params = ParamSet()
        self.pol_hidden = Dense(self.exe_params, "exe.hidden",
                                self.policy_input_dim, hidden, "tanh", rng)
        self.pol_out = Dense(self.exe_params, "exe.out",
                             hidden, n_actions, "identity", rng)
        self.personas = Embedding(self.exe_params, "exe.persona",
                                  n_teachers, persona_dim, rng)

        self.id_params = ParamSet()
        self.id_hidden = Dense(self.id_params, "id.hidden",
                               state_dim, hidden, "tanh", rng)
        self.id_out = Dense(self.id_params, "id.out",
                            hidden, n_teachers, "identity", rng)

        self.exe_opt = AdamState(self.exe_params, lr=lr)
        self.id_opt = AdamState(self.id_params, lr=lr)
        self._pending = 0

    # ---------------------------------------------------------------- forward

    def identity_probs(self, features: np.ndarray) -> np.ndarray:
        h, _ = self.id_hidden.forward(features)
        logits, _ = self.id_out.forward(h)
        return softmax(logits)

    def policy_probs(self, features: np.ndarray, identity: int,
                     mask: np.ndarray | None = None) -> np.ndarray:
        x = np.concatenate([features, self.personas.forward(identity)])
        if mask is not None:
            x = x * mask
        h, _ = self.pol_hidden.forward(x)
        logits, _ = self.pol_out.forward(h)
        return softmax(logits)

    def sample_policy(self, features: np.ndarray, rng: np.random.Generator,
                      posterior_sampling: bool = False):
        """Sample an identity, then return (identity, its policy ProbVec).

        A fresh dropout mask is drawn iff ``posterior_sampling`` is set.
        """
        rho = self.identity_probs(features)
        k = int(rng.choice(self.n_teachers, p=rho))
        mask = None
        if posterior_sampling:
            mask = sample_dropout_mask(self.dropout, self.policy_input_dim, rng)
        return k, self.policy_probs(features, k, mask)

    def mean_exe_policy(self, features: np.ndarray, n: int,
                        rng: np.random.Generator) -> np.ndarray:
        """Arithmetic mean of ``n`` sampled policies (no posterior sampling)."""
        if n < 1:
            raise ValueError("n must be positive")
        rho = self.identity_probs(features)
        ks = rng.choice(self.n_teachers, size=n, p=rho)
        counts = np.bincount(ks, minlength=self.n_teachers)
        mean = np.zeros(self.n_actions)
        for k in np.flatnonzero(counts):
            mean += (counts[k] / n) * self.policy_probs(features, int(k))
        return mean

    # --------------------------------------------------------------- training

    def exe_losses(self, features: np.ndarray, response: TeacherResponse):
        """Accumulate gradients for one query; returns (policy loss, identity loss).

        The policy loss conditions on the observed persona, not the mean one.
        """
        k_star = response.identity
        if not 0 <= k_star < self.n_teachers:
            raise IndexError(f"identity {k_star} out of range")

        x = np.concatenate([features, self.personas.forward(k_star)])
        h, h_cache = self.pol_hidden.forward(x)
        logits, out_cache = self.pol_out.forward(h)
        _, pol_loss, dlogits = softmax_nll(logits, response.exe_action)
        dh = self.pol_out.backward(out_cache, dlogits)
        dx = self.pol_hidden.backward(h_cache, dh)
        self.personas.backward(k_star, dx[self.state_dim:])

        h, h_cache = self.id_hidden.forward(features)
        logits, out_cache = self.id_out.forward(h)
        _, id_loss, dlogits = softmax_nll(logits, k_star)
        dh = self.id_out.backward(out_cache, dlogits)
        self.id_hidden.backward(h_cache, dh)

        self._pending += 1
        return pol_loss, id_loss

    def end_episode_update(self) -> None:
        """One Adam step per model, only if the episode contributed losses."""
        if self._pending == 0:
            return
        self.exe_opt.step(self.exe_params)
        self.id_opt.step(self.id_params)
        self._pending = 0

    # ----------------------------------------------------------------- acting

    def act(self, features: np.ndarray, queried: bool,
            response: TeacherResponse | None = None,
            rng: np.random.Generator | None = None, n_samples: int = 5) -> int:
        if queried:
            if response is None:
                raise ValueError("queried step needs a teacher response")
            return response.exe_action
        if rng is None:
            raise ValueError("acting without a query needs an rng")
        mean = self.mean_exe_policy(features, n_samples, rng)
        return int(rng.choice(self.n_actions, p=mean))

    # ------------------------------------------------------------ persistence

    def param_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.exe_params.as_arrays())
        arrays.update(self.id_params.as_arrays())
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.exe_params.load_arrays(arrays)
        self.id_params.load_arrays(arrays)
