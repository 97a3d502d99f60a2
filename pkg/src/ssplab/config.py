"""Experiment configuration, hashing and seed derivation.

Configs are JSON documents. Every section is optional; missing fields take
the defaults below, and unknown fields are rejected. The canonical form
(``ExperimentConfig.to_dict``) always carries every field, so the config hash
depends only on values, never on key order or on whether a default was spelled
out.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .policy import ARCH_KINDS, LINEAR
from .tasks import UniverseConfig

CONFIG_VERSION = 1
ALGORITHMS = ("GRPO", "MGPO")


def derive_seed(master: int, *labels) -> int:
    """64-bit seed for one component: BLAKE2b-64 of the JSON list ``[master, *labels]``.

    Labels name the component (``"sft", 2`` for subdomain 2's SFT run), so new
    components never shift the seeds of existing ones.
    """
    payload = json.dumps([int(master), *labels], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _build(cls, data: dict | None, where: str):
    data = dict(data or {})
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


@dataclass
class PolicyConfig:
    kind: str = LINEAR
    context_length: int = 2
    feature_dim: int | None = None
    init_scale: float = 0.01

    def __post_init__(self):
        _require(self.kind in ARCH_KINDS, f"policy.kind must be one of {ARCH_KINDS}")
        _require(self.context_length >= 1, "policy.context_length must be >= 1")
        _require(self.init_scale >= 0, "policy.init_scale must be >= 0")


@dataclass
class SFTConfig:
    lr: float = 8.0
    warmup_steps: int = 100
    steps: int = 600
    batch_size: int = 32
    checkpoint_every: int = 200
    max_grad_norm: float | None = None

    def __post_init__(self):
        _require(self.steps >= 1, "sft.steps must be >= 1")
        _require(self.warmup_steps >= 0, "sft.warmup_steps must be >= 0")
        _require(self.batch_size >= 1, "sft.batch_size must be >= 1")
        _require(self.checkpoint_every >= 1, "sft.checkpoint_every must be >= 1")
        _require(self.lr > 0, "sft.lr must be > 0")


@dataclass
class ProbeConfig:
    n: int = 16
    k: int = 8
    temperature: float = 1.0

    def __post_init__(self):
        _require(1 <= self.k <= self.n, "probe needs 1 <= k <= n")
        _require(self.temperature > 0, "probe.temperature must be > 0")


@dataclass
class FusionConfig:
    weights: list[float] | None = None


@dataclass
class StageConfig:
    algorithm: str = "MGPO"
    lam: float = 1.0
    epsilon: float = 0.2
    G: int = 8
    temperature: float = 1.0
    max_len: int = 4
    steps: int = 100

    def __post_init__(self):
        _require(self.algorithm in ALGORITHMS, f"stage algorithm must be one of {ALGORITHMS}")
        _require(self.lam >= 0, "stage lam must be >= 0")
        _require(0 < self.epsilon < 1, "stage epsilon must lie in (0, 1)")
        _require(self.G >= 2, "stage G must be >= 2")
        _require(self.temperature > 0, "stage temperature must be > 0")
        _require(self.max_len >= 1, "stage max_len must be >= 1")
        _require(self.steps >= 1, "stage steps must be >= 1")


def _default_stages():
    return [
        {"algorithm": "MGPO", "lam": 1.0, "max_len": 4, "steps": 150},
        {"algorithm": "MGPO", "lam": 1.0, "max_len": 6, "steps": 150},
    ]


@dataclass
class RLConfig:
    lr: float = 100.0
    batch_size: int = 128
    epochs_per_batch: int = 1
    kl_coef: float = 0.0
    max_grad_norm: float | None = None
    eval_every: int = 25
    stages: list = field(default_factory=_default_stages)

    def __post_init__(self):
        _require(self.lr > 0, "rl.lr must be > 0")
        _require(self.batch_size >= 1, "rl.batch_size must be >= 1")
        _require(self.epochs_per_batch >= 1, "rl.epochs_per_batch must be >= 1")
        _require(self.kl_coef >= 0, "rl.kl_coef must be >= 0")
        _require(self.eval_every >= 1, "rl.eval_every must be >= 1")
        self.stages = [
            s if isinstance(s, StageConfig) else _build(StageConfig, s, f"rl.stages[{i}]")
            for i, s in enumerate(self.stages)
        ]


@dataclass
class EvalConfig:
    n: int = 16
    k: int = 8
    split: str = "holdout"

    def __post_init__(self):
        _require(1 <= self.k <= self.n, "eval needs 1 <= k <= n")


@dataclass
class ExperimentConfig:
    seed: int = 0
    universe: UniverseConfig = field(default_factory=UniverseConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sft: SFTConfig = field(default_factory=SFTConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        _require(0 <= int(self.seed) < 2**64, "seed must be an unsigned 64-bit integer")
        n_sub = len(self.universe.subdomains)
        w = self.fusion.weights
        if w is not None:
            _require(len(w) == n_sub, "fusion.weights needs one weight per subdomain")
            _require(all(x >= 0 for x in w) and abs(sum(w) - 1) <= 1e-12, "fusion.weights must lie on the simplex")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            universe = UniverseConfig.from_dict(data.get("universe", {}))
        except TypeError as exc:
            raise ConfigError(f"universe: {exc}") from None
        return cls(
            seed=int(data.get("seed", 0)),
            universe=universe,
            policy=_build(PolicyConfig, data.get("policy"), "policy"),
            sft=_build(SFTConfig, data.get("sft"), "sft"),
            probe=_build(ProbeConfig, data.get("probe"), "probe"),
            fusion=_build(FusionConfig, data.get("fusion"), "fusion"),
            rl=_build(RLConfig, data.get("rl"), "rl"),
            eval=_build(EvalConfig, data.get("eval"), "eval"),
        )

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": int(self.seed),
            "universe": self.universe.to_dict(),
            "policy": asdict(self.policy),
            "sft": asdict(self.sft),
            "probe": asdict(self.probe),
            "fusion": asdict(self.fusion),
            "rl": asdict(self.rl),
            "eval": asdict(self.eval),
        }

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path=None, seed: int | None = None, overrides: dict | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    if overrides:
        data = {**data, **overrides}
    if seed is not None:
        data["seed"] = seed
    return ExperimentConfig.from_dict(data)
