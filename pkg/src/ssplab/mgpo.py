"""Max-entropy-guided advantage weighting.

Each question's rollout group yields an empirical accuracy ``p_c``. Its binary
KL divergence from the maximum-entropy target ``p0`` (0.5 by default) sets a
weight ``exp(-lambda * D)`` that scales every advantage of the group, so
questions the policy solves about half the time dominate the update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputDomainError
from .grpo import ClipConfig, RolloutGroup, surrogate


@dataclass(frozen=True)
class MgpoConfig:
    lam: float = 1.0
    p0: float = 0.5

    def __post_init__(self):
        if not self.lam >= 0:
            raise InputDomainError("lambda must be >= 0")
        if not 0 < self.p0 < 1:
            raise InputDomainError("p0 must lie in (0, 1)")


@dataclass(frozen=True)
class QuestionUncertainty:
    question_id: int
    p_c: float
    entropy: float
    distance: float
    weight: float


def _xlogy(x: float, y: float) -> float:
    return 0.0 if x == 0 else x * math.log(y)


def _check_prob(p: float, name: str = "p") -> None:
    if not 0 <= p <= 1:
        raise InputDomainError(f"{name} = {p!r} lies outside [0, 1]")


def empirical_accuracy(group: RolloutGroup) -> float:
    r = np.asarray(group.rewards)
    if r.size < 1:
        raise InputDomainError("empty rollout group")
    return float(np.count_nonzero(r == 1)) / r.size


def binary_entropy(p: float) -> float:
    _check_prob(p)
    return -_xlogy(p, p) - _xlogy(1 - p, 1 - p)


def max_entropy_deviation(p: float, p0: float = 0.5) -> float:
    """KL divergence between Bernoulli(p) and Bernoulli(p0), in nats."""
    _check_prob(p)
    if not 0 < p0 < 1:
        raise InputDomainError(f"p0 = {p0!r} must lie in (0, 1)")
    q = 1 - p
    return _xlogy(p, p / p0) + _xlogy(q, q / (1 - p0))


def entropy_weight(p: float, cfg: MgpoConfig) -> float:
    return math.exp(-cfg.lam * max_entropy_deviation(p, cfg.p0))


def uncertainty(group: RolloutGroup, cfg: MgpoConfig, question_id: int = 0) -> QuestionUncertainty:
    p = empirical_accuracy(group)
    d = max_entropy_deviation(p, cfg.p0)
    return QuestionUncertainty(question_id, p, binary_entropy(p), d, math.exp(-cfg.lam * d))


def modulate_advantages(group: RolloutGroup, cfg: MgpoConfig) -> RolloutGroup:
    """Return a copy of ``group`` with every advantage scaled by its entropy weight.

    Not idempotent: apply once per rollout batch.
    """
    w = entropy_weight(empirical_accuracy(group), cfg)
    return group.with_advantages(group.advantages * w, weight=group.weight * w)


def mgpo_objective_and_grad(params, old_snapshot, groups: Sequence[RolloutGroup], clip: ClipConfig, cfg: MgpoConfig):
    objective, grad, _ = surrogate(params, old_snapshot, [modulate_advantages(g, cfg) for g in groups], clip)
    return objective, grad


def weight_record(groups: Sequence[RolloutGroup]) -> dict:
    """Per-step weighting diagnostics for already-modulated groups.

    ``pc_hist[k]`` counts groups with exactly ``k`` correct rollouts (groups are
    assumed to share one size ``G``). ``eff_weight_frac`` is the weight mass of
    groups that carry a non-zero advantage signal, as a fraction of all groups.
    """
    g = groups[0].size
    hist = [0] * (g + 1)
    for grp in groups:
        hist[int(np.count_nonzero(grp.rewards == 1))] += 1
    weights = np.array([grp.weight for grp in groups])
    signal = np.array([grp.std > 0 for grp in groups])
    return {
        "pc_hist": hist,
        "mean_w_me": float(weights.mean()),
        "eff_weight_frac": float((weights * signal).sum() / len(groups)),
    }
