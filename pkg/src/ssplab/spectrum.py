"""Pass@K estimation, checkpoint probing, specialist selection and parameter fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InputDomainError, MissingDependencyError
from .policy import PolicySnapshot, sample_batch
from .tasks import ProbingSet, verify

UNBIASED = "unbiased"
NAIVE_MAX = "naive-max"
# Above this, exact integer binomials get large; switch to the product form.
EXACT_LIMIT = 64


@dataclass(frozen=True)
class PassKEstimate:
    n: int
    c: int
    k: int
    value: float
    kind: str = UNBIASED


@dataclass
class ProbeCurve:
    subdomain: int
    points: list[tuple[int, float]]

    def __post_init__(self):
        steps = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InputDomainError("probe curve steps must be strictly increasing")


def pass_at_k(n: int, c: int, k: int, kind: str = UNBIASED, outcomes=None) -> float:
    """Probability that at least one of ``k`` draws is correct, from ``n`` samples with ``c`` correct.

    The unbiased estimator is ``1 - C(n-c, k) / C(n, k)``. It is computed with
    exact integers up to ``n = 64`` (one rounding at the final division) and as
    a running product beyond. ``naive-max`` needs the per-sample ``outcomes``
    and reports whether any of the first ``k`` is correct.
    """
    if not 1 <= k <= n:
        raise InputDomainError(f"need 1 <= K <= n, got K={k}, n={n}")
    if not 0 <= c <= n:
        raise InputDomainError(f"need 0 <= c <= n, got c={c}, n={n}")
    if kind == NAIVE_MAX:
        if outcomes is None or len(outcomes) != n:
            raise InputDomainError("naive-max estimate needs the n per-sample outcomes")
        if sum(1 for o in outcomes if o) != c:
            raise InputDomainError("outcomes disagree with c")
        return 1.0 if any(outcomes[:k]) else 0.0
    if kind != UNBIASED:
        raise InputDomainError(f"unknown estimator kind {kind!r}")
    if c == 0:
        return 0.0
    if n - c < k:
        return 1.0
    if n <= EXACT_LIMIT:
        total = math.comb(n, k)
        return (total - math.comb(n - c, k)) / total
    miss = 1.0
    for i in range(k):
        miss *= (n - c - i) / (n - i)
    return 1.0 - miss


def correct_counts(snapshot: PolicySnapshot, problems, n: int, rng, temperature: float = 1.0, max_len=None):
    """Sample ``n`` responses per problem; return the correct count for each problem."""
    if not problems:
        return np.zeros(0, dtype=np.int64)
    if max_len is None:
        max_len = max(len(p.answer) for p in problems)
    prompts = [p.prompt for p in problems for _ in range(n)]
    responses, _, _ = sample_batch(snapshot.params, snapshot.arch, prompts, temperature, max_len, rng)
    ok = np.array([verify(problems[j // n], r) for j, r in enumerate(responses)], dtype=np.int64)
    return ok.reshape(len(problems), n).sum(axis=1)


def probe_scores(snapshot, probe_set: ProbingSet, n: int, k: int, seed, temperature: float = 1.0, max_len=None):
    """Mean Pass@1 and mean Pass@K over a probing set, from one shared sample."""
    if probe_set is None or len(probe_set.problems) == 0:
        raise InputDomainError("probing set is empty")
    if n < k:
        raise InputDomainError("need n >= K")
    rng = np.random.default_rng(seed)
    counts = correct_counts(snapshot, probe_set.problems, n, rng, temperature, max_len)
    pass1 = float(np.mean([pass_at_k(n, int(c), 1) for c in counts]))
    passk = float(np.mean([pass_at_k(n, int(c), k) for c in counts]))
    return pass1, passk


def probe_checkpoint(snapshot: PolicySnapshot, probe_set: ProbingSet, n: int, k: int, seed, **kw) -> float:
    return probe_scores(snapshot, probe_set, n, k, seed, **kw)[1]


def select_specialists(curves: Sequence[ProbeCurve], snapshots: Mapping) -> list[PolicySnapshot]:
    """Per curve, the snapshot at the step with the highest score (earliest step on ties).

    ``snapshots`` maps either ``step`` or ``(subdomain, step)`` to a snapshot.
    """
    chosen = []
    for curve in curves:
        t = best_step(curve)
        if (curve.subdomain, t) in snapshots:
            chosen.append(snapshots[(curve.subdomain, t)])
        elif t in snapshots:
            chosen.append(snapshots[t])
        else:
            raise MissingDependencyError("sft-train", f"checkpoint for subdomain {curve.subdomain} at step {t}")
    return chosen


def best_step(curve: ProbeCurve) -> int:
    """Step with the highest score; the earliest such step on ties."""
    if not curve.points:
        raise InputDomainError(f"probe curve for subdomain {curve.subdomain} is empty")
    top, top_score = curve.points[0]
    for t, v in curve.points[1:]:
        if v > top_score:
            top, top_score = t, v
    return top


@dataclass
class FusionSpec:
    specialists: list[PolicySnapshot]
    weights: list[float]

    def __post_init__(self):
        if not self.specialists:
            raise InputDomainError("fusion needs at least one specialist")
        if len(self.weights) != len(self.specialists):
            raise InputDomainError("one weight per specialist required")
        if any(not w >= 0 for w in self.weights):
            raise InputDomainError("fusion weights must be non-negative")
        if abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise InputDomainError("fusion weights must sum to 1")
        arch = self.specialists[0].arch
        if any(s.arch != arch for s in self.specialists[1:]):
            raise InputDomainError("all specialists must share one architecture")

    @classmethod
    def uniform(cls, specialists: Sequence[PolicySnapshot]) -> "FusionSpec":
        n = len(specialists)
        return cls(list(specialists), [1.0 / n] * n)


def fuse(spec: FusionSpec) -> PolicySnapshot:
    """Weighted elementwise sum of specialist parameters."""
    first = spec.specialists[0]
    # A vertex of the simplex returns that specialist bit-for-bit.
    for s, w in zip(spec.specialists, spec.weights):
        if w == 1.0:
            return PolicySnapshot(s.arch, s.params, max(x.step for x in spec.specialists))
    stack = np.stack([s.params for s in spec.specialists])
    params = np.asarray(spec.weights) @ stack
    # Guard the convex hull against rounding.
    params = np.clip(params, stack.min(axis=0), stack.max(axis=0))
    return PolicySnapshot(first.arch, params, max(s.step for s in spec.specialists))
