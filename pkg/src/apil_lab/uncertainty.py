"""Monte-Carlo decompositions of predictive uncertainty (discrete, in nats).

Per posterior draw omega (one dropout mask), N1 policies are sampled from the
agent's policy distribution. The mean entropy of those policies is the
intrinsic term, the entropy of their mixture is the behavioral term, and the
extrinsic term is their difference (Jensen makes it non-negative because both
terms share the same draws). Averaging the per-draw mixtures over N2 masks
gives the total predictive entropy, and the model term is total minus the
expected behavioral term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import sample_dropout_mask


@dataclass(frozen=True)
class UncertaintyConfig:
    n1: int = 5
    n2: int = 10

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("n1 and n2 must be positive")


@dataclass(frozen=True)
class UncertaintyReport:
    intrinsic: float
    extrinsic: float
    behavioral: float
    total: float
    model: float
    n1: int
    n2: int
    state_id: str = ""


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("entropy expects a non-empty 1-d probability vector")
    if (p < -1e-12).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("entropy expects a normalized probability vector")
    nz = p > 0.0
    return float(-(p[nz] * np.log(p[nz])).sum())


def estimate(agent, features: np.ndarray, cfg: UncertaintyConfig,
             rng: np.random.Generator, state_id: str = "") -> UncertaintyReport:
    """Nested Monte-Carlo uncertainty estimate at one state.

    The dropout mask is held fixed across the N1 policy draws of each of the
    N2 posterior draws; identities repeat, so per-mask policies are evaluated
    once per distinct identity and mixed by draw counts.
    """
    rho = agent.identity_probs(features)
    behavioral_terms = np.empty(cfg.n2)
    intrinsic_terms = np.empty(cfg.n2)
    mixture_sum = np.zeros(agent.n_actions)
    for i in range(cfg.n2):
        mask = sample_dropout_mask(agent.dropout, agent.policy_input_dim, rng)
        ks = rng.choice(agent.n_teachers, size=cfg.n1, p=rho)
        counts = np.bincount(ks, minlength=agent.n_teachers)
        mixture = np.zeros(agent.n_actions)
        intrinsic = 0.0
        for k in np.flatnonzero(counts):
            weight = counts[k] / cfg.n1
            probs = agent.policy_probs(features, int(k), mask)
            mixture += weight * probs
            intrinsic += weight * entropy(probs)
        behavioral_terms[i] = entropy(mixture)
        intrinsic_terms[i] = intrinsic
        mixture_sum += mixture
    behavioral = float(behavioral_terms.mean())
    intrinsic = float(intrinsic_terms.mean())
    total = entropy(mixture_sum / cfg.n2)
    return UncertaintyReport(
        intrinsic=intrinsic,
        extrinsic=behavioral - intrinsic,
        behavioral=behavioral,
        total=total,
        model=total - behavioral,
        n1=cfg.n1,
        n2=cfg.n2,
        state_id=state_id,
    )


def variance_decomposition(means: np.ndarray, variances: np.ndarray,
                           weights: np.ndarray):
    """Law-of-total-variance split of a mixture: (total, intrinsic, extrinsic)."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not means.shape == variances.shape == weights.shape:
        raise ValueError("means, variances and weights must have equal shapes")
    if (variances < 0.0).any():
        raise ValueError("variances must be non-negative")
    if (weights < 0.0).any() or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be a probability vector")
    grand_mean = float(weights @ means)
    intrinsic = float(weights @ variances)
    extrinsic = float(weights @ (means - grand_mean) ** 2)
    return intrinsic + extrinsic, intrinsic, extrinsic


def mean_report(agent, features_list, cfg: UncertaintyConfig,
                rng: np.random.Generator,
                weights=None) -> UncertaintyReport:
    """Average per-state estimates over a collection of states.

    Differences (extrinsic, model) are recomputed from the averaged terms so
    the decomposition identities survive aggregation exactly.
    """
    if not features_list:
        raise ValueError("need at least one state")
    if weights is None:
        weights = np.full(len(features_list), 1.0 / len(features_list))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    intrinsic = behavioral = total = 0.0
    for w, feats in zip(weights, features_list):
        rep = estimate(agent, feats, cfg, rng)
        intrinsic += float(w) * rep.intrinsic
        behavioral += float(w) * rep.behavioral
        total += float(w) * rep.total
    return UncertaintyReport(
        intrinsic=intrinsic,
        extrinsic=behavioral - intrinsic,
        behavioral=behavioral,
        total=total,
        model=total - behavioral,
        n1=cfg.n1,
        n2=cfg.n2,
        state_id="mean",
    )


def sampling_inflation_sweep(snapshots, features_list, n1_values, n2: int,
                             rng: np.random.Generator) -> dict[int, list[float]]:
    """Model-uncertainty series per N1 across training-stage snapshots.

    ``snapshots`` is an iterable of agents (or one agent re-loaded per stage);
    small N1 inflates the model term wherever extrinsic uncertainty is high.
    """
    series: dict[int, list[float]] = {int(n1): [] for n1 in n1_values}
    for agent in snapshots:
        for n1 in n1_values:
            cfg = UncertaintyConfig(n1=int(n1), n2=n2)
            rep = mean_report(agent, features_list, cfg, rng)
            series[int(n1)].append(rep.model)
    return series
