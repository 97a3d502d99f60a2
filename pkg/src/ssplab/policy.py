"""Toy autoregressive softmax policies.

Two architectures share one log-linear core: at every decode step a small set
of active feature rows is summed into a logit vector over the vocabulary.

* ``tabular-softmax``: exactly one active row, indexed by the last
  ``context_length`` tokens of ``prompt + prefix`` (left-padded with EOS).
* ``linear-softmax``: three hand-coded feature rows -- decode position,
  previous token, and the prompt's leading token together with the
  ``context_length`` prompt tokens aligned with the current response position.

Because logits are linear in the parameters, every gradient below is the
closed-form ``(onehot - softmax)`` expression; no autodiff is involved.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputDomainError

TABULAR = "tabular-softmax"
LINEAR = "linear-softmax"
ARCH_KINDS = (TABULAR, LINEAR)

# Decode positions beyond this share the last position feature.
N_POSITION_FEATURES = 16
MAX_PARAMS = 1 << 26
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise InputDomainError("vocabulary needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputDomainError("vocabulary tokens must be distinct")
        if not 0 <= self.eos_id < len(self.tokens):
            raise InputDomainError(f"eos id {self.eos_id} out of range")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def with_eos(cls, tokens: Iterable[str], eos: str = "<eos>") -> "Vocabulary":
        toks = list(tokens) + [eos]
        return cls(tuple(toks), len(toks) - 1)

    def encode(self, symbols: Iterable[str]) -> list[int]:
        lookup = {t: i for i, t in enumerate(self.tokens)}
        return [lookup[s] for s in symbols]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "eos_id": self.eos_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), int(d["eos_id"]))


@dataclass(frozen=True)
class PolicyArchitecture:
    kind: str
    vocab: Vocabulary
    context_length: int
    feature_dim: int | None = None

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise InputDomainError(f"unknown architecture kind {self.kind!r}")
        if self.context_length < 1:
            raise InputDomainError("context_length must be >= 1")
        if self.kind == LINEAR:
            if self.feature_dim is None:
                object.__setattr__(
                    self, "feature_dim", self.natural_feature_dim(self.vocab, self.context_length)
                )
            if self.feature_dim < 1:
                raise InputDomainError("feature_dim must be positive")
        elif self.feature_dim is not None:
            raise InputDomainError("feature_dim applies to linear-softmax only")
        if self.n_params > MAX_PARAMS:
            raise InputDomainError(f"architecture too large ({self.n_params} parameters)")

    @staticmethod
    def natural_feature_dim(vocab: Vocabulary, context_length: int) -> int:
        """Feature count at which the linear feature map is collision-free."""
        v = vocab.size
        return N_POSITION_FEATURES + v + v ** (context_length + 1)

    @classmethod
    def tabular(cls, vocab: Vocabulary, context_length: int) -> "PolicyArchitecture":
        return cls(TABULAR, vocab, context_length)

    @classmethod
    def linear(cls, vocab: Vocabulary, context_length: int, feature_dim: int | None = None):
        return cls(LINEAR, vocab, context_length, feature_dim)

    @property
    def n_rows(self) -> int:
        if self.kind == TABULAR:
            return self.vocab.size ** self.context_length
        return int(self.feature_dim)

    @property
    def n_params(self) -> int:
        return self.n_rows * self.vocab.size

    @property
    def n_active(self) -> int:
        return 1 if self.kind == TABULAR else 3

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "vocab": self.vocab.to_dict(), "context_length": self.context_length}
        if self.kind == LINEAR:
            d["feature_dim"] = self.feature_dim
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyArchitecture":
        return cls(
            d["kind"], Vocabulary.from_dict(d["vocab"]), int(d["context_length"]), d.get("feature_dim")
        )


@dataclass(frozen=True)
class PolicySnapshot:
    """A checkpoint: parameters, the architecture they belong to, and a step index."""

    arch: PolicyArchitecture
    params: np.ndarray
    step: int = 0

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        check_params(p, self.arch)
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "params", p)


@dataclass
class LogProbTrace:
    per_token: np.ndarray
    total: float

    @classmethod
    def from_tokens(cls, per_token) -> "LogProbTrace":
        per_token = np.asarray(per_token, dtype=np.float64)
        return cls(per_token, float(per_token.sum()))

    def __len__(self):
        return len(self.per_token)


@dataclass
class StepBatch:
    """Flattened decode steps of many (prompt, response) pairs.

    Row ``s`` is one decode step: its active feature rows ``idx[s]`` with
    weights ``val[s]``, the emitted token ``target[s]``, and the index ``seq[s]``
    of the sequence it belongs to.
    """

    idx: np.ndarray
    val: np.ndarray
    target: np.ndarray
    seq: np.ndarray
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_steps(self) -> int:
        return len(self.target)

    @property
    def n_seqs(self) -> int:
        return len(self.lengths)

    def select(self, seqs) -> "StepBatch":
        """Sub-batch holding sequences ``seqs`` (renumbered 0..len-1, in the given order)."""
        seqs = np.asarray(seqs, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(self.lengths)])
        rows = np.concatenate([np.arange(starts[s], starts[s + 1]) for s in seqs])
        lengths = self.lengths[seqs]
        new_seq = np.repeat(np.arange(len(seqs)), lengths)
        return StepBatch(self.idx[rows], self.val[rows], self.target[rows], new_seq, lengths)

    @classmethod
    def concat(cls, batches: Sequence["StepBatch"]) -> "StepBatch":
        offsets = np.cumsum([0] + [b.n_seqs for b in batches])
        return cls(
            np.concatenate([b.idx for b in batches]),
            np.concatenate([b.val for b in batches]),
            np.concatenate([b.target for b in batches]),
            np.concatenate([b.seq + off for b, off in zip(batches, offsets)]),
            np.concatenate([b.lengths for b in batches]),
        )


def check_params(params: np.ndarray, arch: PolicyArchitecture) -> None:
    if params.ndim != 1 or params.shape[0] != arch.n_params:
        raise InputDomainError(
            f"parameter vector has shape {params.shape}, architecture expects ({arch.n_params},)"
        )
    if not np.all(np.isfinite(params)):
        raise InputDomainError("parameter vector contains non-finite entries")


def check_tokens(ids, vocab: Vocabulary, what: str = "sequence") -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab.size):
        raise InputDomainError(f"{what} contains token ids outside 0..{vocab.size - 1}")
    return arr


def init_params(arch: PolicyArchitecture, seed: int, scale: float) -> np.ndarray:
    if scale < 0:
        raise InputDomainError("scale must be >= 0")
    if scale == 0:
        return np.zeros(arch.n_params)
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=arch.n_params)


# --- features -----------------------------------------------------------------


def _mixed_radix(cols: np.ndarray, base: int) -> np.ndarray:
    code = np.zeros(cols.shape[0], dtype=np.int64)
    for j in range(cols.shape[1]):
        code = code * base + cols[:, j]
    return code


def step_features(arch: PolicyArchitecture, prompts: np.ndarray, prefix: np.ndarray):
    """Active feature rows for one decode step of a batch of equal-length prompts.

    ``prompts`` is ``(B, Lp)`` and ``prefix`` is ``(B, t)`` (tokens emitted so far).
    Returns ``(idx, val)``, both ``(B, n_active)``.
    """
    v = arch.vocab.size
    eos = arch.vocab.eos_id
    b = prompts.shape[0]
    t = prefix.shape[1]
    if arch.kind == TABULAR:
        L = arch.context_length
        ctx = np.concatenate([np.full((b, L), eos, dtype=np.int64), prompts, prefix], axis=1)[:, -L:]
        return _mixed_radix(ctx, v)[:, None], np.ones((b, 1))

    c = arch.context_length
    d = arch.feature_dim
    idx = np.zeros((b, 3), dtype=np.int64)
    val = np.ones((b, 3))
    idx[:, 0] = min(t, N_POSITION_FEATURES - 1)
    idx[:, 1] = N_POSITION_FEATURES + (prefix[:, -1] if t > 0 else eos)
    start = 1 + c * t
    lp = prompts.shape[1]
    if lp >= 1 and start + c <= lp:
        window = np.concatenate([prompts[:, :1], prompts[:, start : start + c]], axis=1)
        idx[:, 2] = N_POSITION_FEATURES + v + _mixed_radix(window, v)
    else:
        val[:, 2] = 0.0
    return idx % d, val


def trace_steps(arch: PolicyArchitecture, pairs: Sequence[tuple]) -> StepBatch:
    """Feature rows for every decode step of every (prompt, response) pair."""
    idx, val, tgt, seq, lengths = [], [], [], [], []
    for k, (prompt, response) in enumerate(pairs):
        p = check_tokens(prompt, arch.vocab, "prompt")[None, :]
        r = check_tokens(response, arch.vocab, "response")
        if r.size == 0:
            raise InputDomainError("response must be non-empty")
        for t in range(r.size):
            i, w = step_features(arch, p, r[None, :t])
            idx.append(i)
            val.append(w)
        tgt.append(r)
        seq.append(np.full(r.size, k, dtype=np.int64))
        lengths.append(r.size)
    if not lengths:
        f = arch.n_active
        return StepBatch(
            np.zeros((0, f), np.int64), np.zeros((0, f)), np.zeros(0, np.int64), np.zeros(0, np.int64)
        )
    return StepBatch(
        np.concatenate(idx),
        np.concatenate(val),
        np.concatenate(tgt),
        np.concatenate(seq),
        np.asarray(lengths, dtype=np.int64),
    )


# --- log-linear core ------------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def step_logits(params: np.ndarray, arch: PolicyArchitecture, idx: np.ndarray, val: np.ndarray):
    table = params.reshape(arch.n_rows, arch.vocab.size)
    return np.einsum("sf,sfv->sv", val, table[idx])


def step_log_probs(params, arch, steps: StepBatch):
    """Full per-step log-distributions ``(S, V)`` and the emitted tokens' log-probs ``(S,)``."""
    logp = log_softmax(step_logits(params, arch, steps.idx, steps.val))
    return logp, logp[np.arange(steps.n_steps), steps.target]


def backprop_logits(arch: PolicyArchitecture, steps: StepBatch, dlogits: np.ndarray) -> np.ndarray:
    """Chain per-step logit gradients ``(S, V)`` back onto the flat parameter vector."""
    grad = np.zeros((arch.n_rows, arch.vocab.size))
    np.add.at(grad, steps.idx, steps.val[:, :, None] * dlogits[:, None, :])
    return grad.reshape(-1)


def logprob_grad_coeffs(logp: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d log p(target) / d logits = onehot(target) - softmax, row-wise."""
    g = -np.exp(logp)
    g[np.arange(len(target)), target] += 1.0
    return g


# --- public operations -----------------------------------------------------------


def logprob(params, arch: PolicyArchitecture, prompt, response) -> LogProbTrace:
    params = np.asarray(params, dtype=np.float64)
    check_params(params, arch)
    steps = trace_steps(arch, [(prompt, response)])
    _, lp = step_log_probs(params, arch, steps)
    return LogProbTrace.from_tokens(lp)


def sample_batch(params, arch: PolicyArchitecture, prompts, temperature: float, max_len: int, rng):
    """Sample one response per prompt.

    Returns ``(responses, traces, steps)`` where ``steps`` holds the decode-step
    features in response order, so callers can re-score responses under other
    parameters without recomputing features. Traces record untempered model
    log-probabilities.
    """
    if temperature <= 0:
        raise InputDomainError("temperature must be > 0")
    if max_len < 1:
        raise InputDomainError("max_len must be >= 1")
    params = np.asarray(params, dtype=np.float64)
    check_params(params, arch)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    prompts = [check_tokens(p, arch.vocab, "prompt") for p in prompts]

    out: list = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for k, p in enumerate(prompts):
        by_len.setdefault(p.size, []).append(k)
    for lp in sorted(by_len):
        rows = by_len[lp]
        block = np.stack([prompts[k] for k in rows]) if lp else np.zeros((len(rows), 0), np.int64)
        for k, res in zip(rows, _sample_block(params, arch, block, temperature, max_len, rng)):
            out[k] = res

    responses = [r for r, _, _, _ in out]
    traces = [LogProbTrace.from_tokens(lp) for _, lp, _, _ in out]
    steps = StepBatch(
        np.concatenate([i for _, _, i, _ in out]),
        np.concatenate([w for _, _, _, w in out]),
        np.concatenate(responses),
        np.concatenate([np.full(r.size, k, dtype=np.int64) for k, r in enumerate(responses)]),
        np.asarray([r.size for r in responses], dtype=np.int64),
    )
    return responses, traces, steps


def _sample_block(params, arch, prompts: np.ndarray, temperature, max_len, rng):
    b = prompts.shape[0]
    eos = arch.vocab.eos_id
    tokens = np.full((b, max_len), eos, dtype=np.int64)
    logps = np.zeros((b, max_len))
    feats_i = np.zeros((b, max_len, arch.n_active), dtype=np.int64)
    feats_w = np.zeros((b, max_len, arch.n_active))
    length = np.zeros(b, dtype=np.int64)
    active = np.arange(b)
    for t in range(max_len):
        if active.size == 0:
            break
        idx, val = step_features(arch, prompts[active], tokens[active, :t])
        z = step_logits(params, arch, idx, val)
        logp = log_softmax(z)
        if t == max_len - 1:
            tok = np.full(active.size, eos, dtype=np.int64)
        else:
            probs = np.exp(logp if temperature == 1.0 else log_softmax(z / temperature))
            cdf = np.cumsum(probs, axis=1)
            cdf /= cdf[:, -1:]
            u = rng.random(active.size)
            tok = (cdf <= u[:, None]).sum(axis=1)
        tokens[active, t] = tok
        logps[active, t] = logp[np.arange(active.size), tok]
        feats_i[active, t] = idx
        feats_w[active, t] = val
        length[active] += 1
        active = active[tok != eos]
    for k in range(b):
        n = length[k]
        yield tokens[k, :n].copy(), logps[k, :n].copy(), feats_i[k, :n], feats_w[k, :n]


def sample(params, arch: PolicyArchitecture, prompt, temperature: float, max_len: int, rng_seed):
    responses, traces, _ = sample_batch(params, arch, [prompt], temperature, max_len, rng_seed)
    return responses[0], traces[0]


def sft_loss_and_grad(params, arch: PolicyArchitecture, batch, steps: StepBatch | None = None):
    """Mean negative log-likelihood of the batch and its exact gradient.

    ``steps`` may be passed to reuse precomputed features for ``batch``.
    """
    params = np.asarray(params, dtype=np.float64)
    check_params(params, arch)
    if steps is None:
        if len(batch) == 0:
            raise InputDomainError("SFT batch must be non-empty")
        steps = trace_steps(arch, batch)
    n = steps.n_seqs
    logp, lp = step_log_probs(params, arch, steps)
    loss = -float(lp.sum()) / n
    grad = -backprop_logits(arch, steps, logprob_grad_coeffs(logp, steps.target)) / n
    return loss, grad


def sgd_step(params, grad, lr: float, max_grad_norm: float | None = None) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise InputDomainError(f"dimension mismatch: params {params.shape} vs grad {grad.shape}")
    if not math.isfinite(lr):
        raise InputDomainError("learning rate must be finite")
    if max_grad_norm is not None:
        grad = clip_grad_norm(grad, max_grad_norm)
    return params - lr * grad


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm > 0:
        return grad * (max_norm / norm)
    return grad


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) from log-distributions."""
    return (np.exp(logp) * (logp - logq)).sum(axis=-1)


# --- checkpoints -------------------------------------------------------------------


def save_checkpoint(snapshot: PolicySnapshot, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": snapshot.arch.to_dict(),
        "step": int(snapshot.step),
        "params": [float(x) for x in snapshot.params],
    }
    if extra:
        doc["meta"] = extra
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, allow_nan=False)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> PolicySnapshot:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise InputDomainError(f"{path}: unsupported checkpoint format version {version!r}")
    arch = PolicyArchitecture.from_dict(doc["architecture"])
    return PolicySnapshot(arch, np.asarray(doc["params"], dtype=np.float64), int(doc["step"]))
