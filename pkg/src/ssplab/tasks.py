"""Synthetic verifiable task universe.

Every subdomain is a digit-wise modular operation on two ``width``-digit
operands. A prompt interleaves the operands after a subdomain tag::

    [<tag>, a1, b1, a2, b2, ..., aW, bW]

and the answer is ``[f(a1, b1), ..., f(aW, bW), <eos>]``. Digits are tokens
``"0" .. str(base - 1)``; each subdomain owns its tag token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .policy import Vocabulary

SPLITS = ("train", "probe", "holdout")

OPERATIONS = {
    "add": lambda a, b, base: (a + b) % base,
    "sub": lambda a, b, base: (a - b) % base,
    "mul": lambda a, b, base: (a * b) % base,
    "parity": lambda a, b, base: (a + b) % 2,
}


@dataclass(frozen=True)
class Subdomain:
    id: int
    name: str
    kind: str
    operand_range: int


@dataclass(frozen=True)
class Problem:
    prompt: tuple[int, ...]
    answer: tuple[int, ...]
    subdomain: int


@dataclass
class ProbingSet:
    subdomain: int
    problems: list[Problem]
    split: str

    def __post_init__(self):
        if not self.problems:
            raise ConfigError("probing set must be non-empty")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if any(p.subdomain != self.subdomain for p in self.problems):
            raise ConfigError("all problems in a probing set must share its subdomain")

    def __len__(self):
        return len(self.problems)


DEFAULT_SUBDOMAINS = (
    {"name": "modadd", "kind": "add"},
    {"name": "modsub", "kind": "sub"},
    {"name": "modmul", "kind": "mul"},
    {"name": "parity", "kind": "parity"},
)


@dataclass
class UniverseConfig:
    base: int = 10
    width: int = 3
    subdomains: list[dict] = field(default_factory=lambda: [dict(d) for d in DEFAULT_SUBDOMAINS])
    sizes: dict = field(default_factory=lambda: {"train": 256, "probe": 200, "holdout": 200})

    def __post_init__(self):
        if self.base < 2:
            raise ConfigError("base must be >= 2")
        if self.width < 1:
            raise ConfigError("width must be >= 1")
        if len(self.subdomains) < 1:
            raise ConfigError("universe needs at least one subdomain")
        names = [d["name"] for d in self.subdomains]
        if len(set(names)) != len(names):
            raise ConfigError("subdomain names must be unique")
        for d in self.subdomains:
            if d["kind"] not in OPERATIONS:
                raise ConfigError(f"unknown operation kind {d['kind']!r}")
            r = d.get("operand_range", self.base)
            if not 1 <= r <= self.base:
                raise ConfigError(f"operand_range {r} outside 1..{self.base}")
        for s in SPLITS:
            if int(self.sizes.get(s, 0)) <= 0:
                raise ConfigError(f"split size for {s!r} must be positive")
        for d in self.domains():
            capacity = d.operand_range ** (2 * self.width)
            if capacity < sum(int(self.sizes[s]) for s in SPLITS):
                raise ConfigError(f"subdomain {d.name!r} has only {capacity} distinct prompts")

    def domains(self) -> list[Subdomain]:
        return [
            Subdomain(i, d["name"], d["kind"], int(d.get("operand_range", self.base)))
            for i, d in enumerate(self.subdomains)
        ]

    def vocabulary(self) -> Vocabulary:
        digits = [str(i) for i in range(self.base)]
        tags = [f"<{d['name']}>" for d in self.subdomains]
        return Vocabulary.with_eos(digits + tags)

    def tag_id(self, subdomain: int) -> int:
        return self.base + subdomain

    @property
    def answer_length(self) -> int:
        return self.width + 1

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "width": self.width,
            "subdomains": [
                {"name": d.name, "kind": d.kind, "operand_range": d.operand_range} for d in self.domains()
            ],
            "sizes": {s: int(self.sizes[s]) for s in SPLITS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UniverseConfig":
        known = {"base", "width", "subdomains", "sizes"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown universe config fields: {sorted(extra)}")
        return cls(**d)


def make_problem(cfg: UniverseConfig, domain: Subdomain, a: Sequence[int], b: Sequence[int]) -> Problem:
    op = OPERATIONS[domain.kind]
    prompt = [cfg.tag_id(domain.id)]
    for x, y in zip(a, b):
        prompt += [int(x), int(y)]
    eos = cfg.vocabulary().eos_id
    answer = [op(int(x), int(y), cfg.base) for x, y in zip(a, b)] + [eos]
    return Problem(tuple(prompt), tuple(answer), domain.id)


def generate_universe(cfg: UniverseConfig, seed: int) -> list[ProbingSet]:
    """One ProbingSet per (subdomain, split), ordered by subdomain then split."""
    sets = []
    w = cfg.width
    for d in cfg.domains():
        rng = np.random.default_rng([seed, d.id])
        sizes = [int(cfg.sizes[s]) for s in SPLITS]
        r = d.operand_range
        codes = rng.choice(r ** (2 * w), size=sum(sizes), replace=False)
        problems = []
        for code in codes:
            digits = []
            code = int(code)
            for _ in range(2 * w):
                code, rem = divmod(code, r)
                digits.append(rem)
            problems.append(make_problem(cfg, d, digits[:w], digits[w:]))
        start = 0
        for split, n in zip(SPLITS, sizes):
            sets.append(ProbingSet(d.id, problems[start : start + n], split))
            start += n
    return sets


def select(universe: Iterable[ProbingSet], split: str | None = None, subdomain: int | None = None):
    return [
        s
        for s in universe
        if (split is None or s.split == split) and (subdomain is None or s.subdomain == subdomain)
    ]


def verify(problem: Problem, response) -> int:
    return int(tuple(int(t) for t in response) == problem.answer)


def save_universe(universe: Sequence[ProbingSet], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ps in universe:
            for p in ps.problems:
                rec = {"prompt": list(p.prompt), "answer": list(p.answer), "subdomain": p.subdomain, "split": ps.split}
                fh.write(json.dumps(rec) + "\n")
    return path


def load_universe(path) -> list[ProbingSet]:
    grouped: dict[tuple[int, str], list[Problem]] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            key = (int(rec["subdomain"]), rec["split"])
            grouped.setdefault(key, []).append(
                Problem(tuple(rec["prompt"]), tuple(rec["answer"]), int(rec["subdomain"]))
            )
    order = {s: i for i, s in enumerate(SPLITS)}
    keys = sorted(grouped, key=lambda k: (k[0], order[k[1]]))
    return [ProbingSet(k[0], grouped[k], k[1]) for k in keys]
