"""Rollout groups, group-relative advantages and the clipped surrogate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InputDomainError
from .policy import (
    LogProbTrace,
    PolicyArchitecture,
    PolicySnapshot,
    StepBatch,
    backprop_logits,
    categorical_kl,
    check_params,
    logprob_grad_coeffs,
    sample_batch,
    step_log_probs,
    trace_steps,
)
from .tasks import Problem, verify


@dataclass(frozen=True)
class ClipConfig:
    epsilon: float = 0.2
    kl_coef: float = 0.0
    reference: PolicySnapshot | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise InputDomainError("epsilon must lie in (0, 1)")
        if self.kl_coef < 0:
            raise InputDomainError("kl_coef must be >= 0")
        if (self.kl_coef == 0) != (self.reference is None):
            raise InputDomainError("a reference policy is required iff kl_coef > 0")


@dataclass
class RolloutGroup:
    question: Problem
    responses: list[np.ndarray]
    traces: list[LogProbTrace]
    rewards: np.ndarray
    mean: float
    std: float
    advantages: np.ndarray
    # decode-step features of ``responses``; filled lazily when absent
    steps: StepBatch | None = field(default=None, repr=False)
    # advantage scale applied after standardization (1.0 for plain GRPO)
    weight: float = 1.0

    @property
    def size(self) -> int:
        return len(self.responses)

    def with_advantages(self, advantages, weight: float) -> "RolloutGroup":
        return replace(self, advantages=np.asarray(advantages, dtype=np.float64), weight=weight)


def group_advantages(rewards) -> tuple[float, float, np.ndarray]:
    """Group mean, population std and standardized advantages.

    A group whose rewards are all equal carries no relative signal: its
    advantages are all zero.
    """
    r = np.asarray(rewards, dtype=np.float64)
    mu = float(r.mean())
    # Equal rewards: report sigma exactly 0 rather than a rounding residue.
    sigma = float(r.std()) if r.max() > r.min() else 0.0
    if sigma > 0:
        adv = (r - mu) / sigma
    else:
        adv = np.zeros_like(r)
    return mu, sigma, adv


def make_group(question: Problem, responses, traces, steps: StepBatch | None = None) -> RolloutGroup:
    rewards = np.array([verify(question, r) for r in responses], dtype=np.float64)
    mu, sigma, adv = group_advantages(rewards)
    return RolloutGroup(question, list(responses), list(traces), rewards, mu, sigma, adv, steps)


def _split_steps(steps: StepBatch, n_groups: int, g: int) -> list[StepBatch]:
    out = []
    bounds = np.searchsorted(steps.seq, np.arange(n_groups + 1) * g)
    for k in range(n_groups):
        lo, hi = bounds[k], bounds[k + 1]
        out.append(
            StepBatch(
                steps.idx[lo:hi],
                steps.val[lo:hi],
                steps.target[lo:hi],
                steps.seq[lo:hi] - k * g,
                steps.lengths[k * g : (k + 1) * g],
            )
        )
    return out


def rollout_groups(params, arch, questions: Sequence[Problem], G: int, temperature: float, max_len: int, rng):
    """Sample ``G`` responses for each question in one vectorized pass."""
    if G < 2:
        raise InputDomainError("group size G must be >= 2")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    prompts = [q.prompt for q in questions for _ in range(G)]
    responses, traces, steps = sample_batch(params, arch, prompts, temperature, max_len, rng)
    parts = _split_steps(steps, len(questions), G)
    return [
        make_group(q, responses[k * G : (k + 1) * G], traces[k * G : (k + 1) * G], parts[k])
        for k, q in enumerate(questions)
    ]


def rollout_group(params, arch, question: Problem, G: int, temperature: float, max_len: int, seed):
    return rollout_groups(params, arch, [question], G, temperature, max_len, seed)[0]


def _group_steps(arch: PolicyArchitecture, group: RolloutGroup) -> StepBatch:
    if group.steps is None:
        group.steps = trace_steps(arch, [(group.question.prompt, r) for r in group.responses])
    return group.steps


def clipped_term(ratio, adv, epsilon: float):
    """Per-token ``min(r*A, clip(r, 1-eps, 1+eps)*A)`` and whether the unclipped branch is live.

    Where the clipped branch is active the term is constant in the parameters.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    lo, hi = 1.0 - epsilon, 1.0 + epsilon
    term = np.minimum(ratio * adv, np.clip(ratio, lo, hi) * adv)
    live = ((adv > 0) & (ratio < hi)) | ((adv < 0) & (ratio > lo))
    return term, live


def surrogate(params, old_snapshot: PolicySnapshot, groups: Sequence[RolloutGroup], clip: ClipConfig):
    """Clipped surrogate objective, its gradient, and diagnostics.

    Token weights are ``1 / (n_groups * G * |y_i|)`` so the objective is the
    mean over groups of the per-group token-and-response average. Tokens on
    the clipped branch of the ``min`` contribute nothing to the gradient.
    """
    arch = old_snapshot.arch
    params = np.asarray(params, dtype=np.float64)
    check_params(params, arch)
    if not groups:
        raise InputDomainError("need at least one rollout group")
    if clip.reference is not None and clip.reference.arch != arch:
        raise InputDomainError("reference policy architecture differs from the trained policy")

    steps = StepBatch.concat([_group_steps(arch, g) for g in groups])
    old_lp = np.concatenate([t.per_token for g in groups for t in g.traces])
    seq_adv = np.concatenate([g.advantages for g in groups])
    seq_w = np.concatenate(
        [np.full(g.size, 1.0 / (len(groups) * g.size)) for g in groups]
    ) / steps.lengths
    adv = seq_adv[steps.seq]
    w = seq_w[steps.seq]

    logp, lp = step_log_probs(params, arch, steps)
    ratio = np.exp(lp - old_lp)
    term, live = clipped_term(ratio, adv, clip.epsilon)
    objective = float(np.dot(w, term))

    coef = np.where(live, w * adv * ratio, 0.0)
    dlogits = coef[:, None] * logprob_grad_coeffs(logp, steps.target)

    kl_mean = 0.0
    if clip.kl_coef > 0:
        ref_logp, _ = step_log_probs(clip.reference.params, arch, steps)
        kl = categorical_kl(logp, ref_logp)
        kl_mean = float(np.dot(w, kl))
        objective -= clip.kl_coef * kl_mean
        p = np.exp(logp)
        dlogits -= (clip.kl_coef * w)[:, None] * p * (logp - ref_logp - kl[:, None])

    grad = backprop_logits(arch, steps, dlogits)
    stats = {
        "clip_frac": float(np.mean((adv != 0) & ~live)) if steps.n_steps else 0.0,
        "kl": kl_mean,
    }
    return objective, grad, stats


def grpo_objective_and_grad(params, old_snapshot: PolicySnapshot, groups, clip: ClipConfig):
    objective, grad, _ = surrogate(params, old_snapshot, groups, clip)
    return objective, grad


def step_record(step: int, groups: Sequence[RolloutGroup], objective: float, grad, stats: dict) -> dict:
    rewards = np.concatenate([g.rewards for g in groups])
    adv = np.concatenate([g.advantages for g in groups])
    return {
        "step": int(step),
        "mean_reward": float(rewards.mean()),
        "mean_abs_adv": float(np.abs(adv).mean()),
        "clip_frac": stats["clip_frac"],
        "objective": objective,
        "grad_norm": float(math.sqrt(float(np.dot(grad, grad)))),
    }
