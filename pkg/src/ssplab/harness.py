"""Staged experiment runner: sft-train -> probe -> merge -> rl-train, plus eval and report.

A run directory is owned by one process at a time (``.lock``) and described by
``manifest.json``, which records the config hash, the files each stage wrote
and per-stage wall-clock timings. All randomness comes from
:func:`ssplab.config.derive_seed` applied to the master seed, so every stage is
reproducible in isolation.
"""

from __future__ import annotations

import csv
import fcntl
import json
import logging
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, StageConfig, derive_seed
from .errors import ConfigError, MissingDependencyError, NumericError, SSPLabError
from .grpo import ClipConfig, rollout_groups, step_record, surrogate
from .mgpo import MgpoConfig, entropy_weight, modulate_advantages, weight_record
from .policy import (
    PolicyArchitecture,
    PolicySnapshot,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sft_loss_and_grad,
    sgd_step,
    trace_steps,
)
from .spectrum import FusionSpec, ProbeCurve, best_step, correct_counts, fuse, pass_at_k, probe_scores
from .tasks import generate_universe, load_universe, save_universe, select

log = logging.getLogger(__name__)

STAGES = ("sft", "probe", "merge", "rl")
REPORT_COLUMNS = ["stage", "step", "pass1", "passk", "mean_w_me"]


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, allow_nan=False) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class Run:
    """A run directory plus its manifest."""

    def __init__(self, cfg: ExperimentConfig, out, resume: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.resume = resume
        self._lock_fh = None
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            probe = self.out / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {self.out} is not writable: {exc}") from None
        self.manifest_path = self.out / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
            if self.manifest.get("config_hash") != cfg.hash():
                raise ConfigError(f"{self.out} holds a run with a different config; use a fresh --out")
        else:
            self.manifest = {
                "config_hash": cfg.hash(),
                "code_version": __version__,
                "config": cfg.to_dict(),
                "stages": {},
                "timings": {},
            }

    # -- locking / manifest ---------------------------------------------------------

    def __enter__(self):
        self._lock_fh = open(self.out / ".lock", "w")
        try:
            fcntl.flock(self._lock_fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            self._lock_fh.close()
            raise SSPLabError(f"{self.out} is locked by another process") from None
        return self

    def __exit__(self, *exc):
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh, fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def save_manifest(self):
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True))
        tmp.replace(self.manifest_path)

    def rel(self, path: Path) -> str:
        return str(Path(path).relative_to(self.out))

    def path(self, rel: str) -> Path:
        return self.out / rel

    def stage_done(self, name: str) -> bool:
        entry = self.manifest["stages"].get(name)
        return entry is not None and all(self.path(p).exists() for p in entry["files"])

    def require(self, name: str) -> dict:
        if not self.stage_done(name):
            raise MissingDependencyError(name, self.out / name)
        return self.manifest["stages"][name]

    def record_stage(self, name: str, files, seconds: float, **info):
        self.manifest["stages"][name] = {"files": sorted({self.rel(f) for f in files}), **info}
        self.manifest["timings"][name] = round(seconds, 3)
        self.save_manifest()

    @contextmanager
    def timed(self, name: str):
        t0 = time.perf_counter()
        box = {}
        yield box
        box["seconds"] = time.perf_counter() - t0

    # -- shared artifacts -------------------------------------------------------------

    def seed(self, *labels) -> int:
        return derive_seed(self.cfg.seed, *labels)

    def arch(self) -> PolicyArchitecture:
        p = self.cfg.policy
        return PolicyArchitecture(
            p.kind, self.cfg.universe.vocabulary(), p.context_length, p.feature_dim if p.kind != "tabular-softmax" else None
        )

    def universe(self):
        path = self.out / "universe.jsonl"
        if not path.exists():
            save_universe(generate_universe(self.cfg.universe, self.seed("universe")), path)
        return load_universe(path)


def _finite(value: float, what: str, params=None):
    if not math.isfinite(value) or (params is not None and not np.all(np.isfinite(params))):
        raise NumericError(f"non-finite {what}")


# --- stages ----------------------------------------------------------------------------


def _sft_run(arch, params, problems, steps: int, cfg, rng, on_step=None):
    """Minibatch SGD on the mean sequence NLL of ``problems``."""
    all_steps = trace_steps(arch, [(p.prompt, p.answer) for p in problems])
    bs = min(cfg.batch_size, len(problems))
    metrics = []
    for step in range(1, steps + 1):
        batch = rng.choice(len(problems), size=bs, replace=False)
        loss, grad = sft_loss_and_grad(params, arch, None, steps=all_steps.select(batch))
        _finite(loss, f"SFT loss (step {step})")
        params = sgd_step(params, grad, cfg.lr, cfg.max_grad_norm)
        _finite(loss, f"parameters after SFT step {step}", params)
        metrics.append({"step": step, "loss": loss, "grad_norm": float(np.linalg.norm(grad))})
        if on_step is not None:
            on_step(step, params)
    return params, metrics


def cmd_sft_train(run: Run) -> dict:
    """Random init, shared warm-start SFT on all train splits, then per-subdomain SFT with checkpoints."""
    if run.resume and run.stage_done("sft"):
        return run.manifest["stages"]["sft"]
    cfg = run.cfg
    sft = cfg.sft
    arch = run.arch()
    with run.timed("sft") as timer:
        universe = run.universe()
        sft_dir = run.out / "sft"
        init = PolicySnapshot(arch, init_params(arch, run.seed("init"), cfg.policy.init_scale), 0)
        files = [save_checkpoint(init, sft_dir / "init.json"), run.out / "universe.jsonl"]
        train_all = [p for ps in select(universe, "train") for p in ps.problems]
        params, metrics = _sft_run(arch, init.params.copy(), train_all, sft.warmup_steps, sft,
                                   np.random.default_rng(run.seed("sft", "warmup")))
        files.append(save_checkpoint(PolicySnapshot(arch, params, 0), sft_dir / "warmstart.json"))
        files.append(write_jsonl(sft_dir / "warmstart_metrics.jsonl", metrics))
        warm = params
        checkpoints: dict[str, list] = {}
        for d in cfg.universe.domains():
            series = []

            def checkpoint(step, params, d=d, series=series):
                if step % sft.checkpoint_every == 0:
                    path = save_checkpoint(PolicySnapshot(arch, params, step), sft_dir / d.name / f"step_{step:06d}.json")
                    series.append([step, run.rel(path)])
                    files.append(path)

            train = select(universe, "train", d.id)[0].problems
            _, metrics = _sft_run(arch, warm.copy(), train, sft.steps, sft, np.random.default_rng(run.seed("sft", d.id)),
                                  checkpoint)
            files.append(write_jsonl(sft_dir / d.name / "metrics.jsonl", metrics))
            checkpoints[str(d.id)] = series
            log.info("sft %s: final loss %.4f", d.name, metrics[-1]["loss"])
    run.record_stage("sft", files, timer["seconds"], init="sft/init.json", warmstart="sft/warmstart.json",
                     checkpoints=checkpoints)
    return run.manifest["stages"]["sft"]


def cmd_probe(run: Run) -> list[ProbeCurve]:
    """Pass@K of every SFT checkpoint on its subdomain's probe split."""
    if not (run.resume and run.stage_done("probe")):
        sft = run.require("sft")
        cfg = run.cfg
        with run.timed("probe") as timer:
            universe = run.universe()
            rows = []
            for d in cfg.universe.domains():
                probe_set = select(universe, "probe", d.id)[0]
                for step, rel in sft["checkpoints"][str(d.id)]:
                    snap = load_checkpoint(run.path(rel))
                    pass1, passk = probe_scores(
                        snap, probe_set, cfg.probe.n, cfg.probe.k, run.seed("probe", d.id, step), cfg.probe.temperature
                    )
                    rows.append(
                        {"subdomain": d.id, "name": d.name, "step": step, "passk": passk, "pass1": pass1,
                         "n": cfg.probe.n, "K": cfg.probe.k}
                    )
            path = write_jsonl(run.out / "probe" / "curves.jsonl", rows)
        run.record_stage("probe", [path], timer["seconds"], curves="probe/curves.jsonl")
    return load_curves(run.path(run.manifest["stages"]["probe"]["curves"]))


def load_curves(path) -> list[ProbeCurve]:
    points: dict[int, list] = {}
    for row in read_jsonl(path):
        points.setdefault(int(row["subdomain"]), []).append((int(row["step"]), float(row["passk"])))
    return [ProbeCurve(s, sorted(points[s])) for s in sorted(points)]


def cmd_merge(run: Run) -> PolicySnapshot:
    """Pick the Pass@K-maximizing checkpoint per subdomain and fuse them."""
    if not (run.resume and run.stage_done("merge")):
        sft = run.require("sft")
        probe = run.require("probe")
        with run.timed("merge") as timer:
            curves = load_curves(run.path(probe["curves"]))
            paths = {(int(s), step): rel for s, series in sft["checkpoints"].items() for step, rel in series}
            chosen_keys = [(c.subdomain, best_step(c)) for c in curves]
            missing = [k for k in chosen_keys if k not in paths]
            if missing:
                raise MissingDependencyError("sft-train", f"checkpoints {missing}")
            specialists = [load_checkpoint(run.path(paths[k])) for k in chosen_keys]
            weights = run.cfg.fusion.weights
            spec = FusionSpec(specialists, list(weights)) if weights else FusionSpec.uniform(specialists)
            fused = fuse(spec)
            fused_path = save_checkpoint(fused, run.out / "merge" / "fused.json")
            scores = {(c.subdomain, t): v for c in curves for t, v in c.points}
            manifest = {
                "specialists": [
                    {"subdomain": s, "step": t, "path": paths[(s, t)], "passk": scores[(s, t)]} for s, t in chosen_keys
                ],
                "weights": spec.weights,
                "fused": run.rel(fused_path),
                "fused_step": fused.step,
            }
            man_path = run.out / "merge" / "fusion_manifest.json"
            man_path.write_text(json.dumps(manifest, indent=2))
        run.record_stage("merge", [fused_path, man_path], timer["seconds"], fused="merge/fused.json",
                         fusion_manifest="merge/fusion_manifest.json")
    return load_checkpoint(run.path(run.manifest["stages"]["merge"]["fused"]))


def rl_stage(run: Run, snapshot: PolicySnapshot, k: int, stage: StageConfig, train_problems, probe_sets):
    """Run one RL stage; return the final snapshot, per-step records and eval records."""
    cfg = run.cfg.rl
    arch = snapshot.arch
    rng = np.random.default_rng(run.seed("rl", k))
    reference = snapshot if cfg.kl_coef > 0 else None
    clip = ClipConfig(stage.epsilon, cfg.kl_coef, reference)
    mgpo = MgpoConfig(stage.lam if stage.algorithm == "MGPO" else 0.0)
    params = snapshot.params.copy()
    step0 = snapshot.step
    records, evals = [], []
    bs = min(cfg.batch_size, len(train_problems))
    for step in range(1, stage.steps + 1):
        batch = rng.choice(len(train_problems), size=bs, replace=False)
        questions = [train_problems[i] for i in batch]
        groups = rollout_groups(params, arch, questions, stage.G, stage.temperature, stage.max_len, rng)
        if stage.algorithm == "MGPO":
            groups = [modulate_advantages(g, mgpo) for g in groups]
        old = PolicySnapshot(arch, params, step0 + step - 1)
        for _ in range(cfg.epochs_per_batch):
            objective, grad, stats = surrogate(params, old, groups, clip)
            _finite(objective, f"RL objective (stage {k}, step {step})")
            params = sgd_step(params, -grad, cfg.lr, cfg.max_grad_norm)
            _finite(objective, f"parameters after RL step {step} (stage {k})", params)
        rec = step_record(step, groups, objective, grad, stats)
        rec.update(weight_record(groups))
        rec["w_me_by_pc"] = [entropy_weight(j / stage.G, mgpo) for j in range(stage.G + 1)]
        records.append(rec)
        if step % cfg.eval_every == 0 or step == stage.steps:
            snap = PolicySnapshot(arch, params, step0 + step)
            pass1, passk = _mean_scores(run, snap, probe_sets, ("rl-eval", k, step), stage.max_len)
            evals.append({"stage": k, "step": step, "pass1": pass1, "passk": passk, "mean_w_me": rec["mean_w_me"]})
            log.info("rl stage %d step %d: pass1 %.3f passk %.3f", k, step, pass1, passk)
    return PolicySnapshot(arch, params, step0 + stage.steps), records, evals


def _mean_scores(run: Run, snap, sets, label, max_len=None):
    n, kk = run.cfg.probe.n, run.cfg.probe.k
    total1 = totalk = 0.0
    count = 0
    for ps in sets:
        p1, pk = probe_scores(snap, ps, n, kk, run.seed(*label, ps.subdomain), 1.0, max_len)
        total1 += p1 * len(ps)
        totalk += pk * len(ps)
        count += len(ps)
    return total1 / count, totalk / count


def cmd_rl_train(run: Run) -> PolicySnapshot:
    """Execute the ordered RL stage list starting from the fused checkpoint."""
    if not run.cfg.rl.stages:
        raise ConfigError("rl-train needs a non-empty stage list")
    if not (run.resume and run.stage_done("rl")):
        merge = run.require("merge")
        with run.timed("rl") as timer:
            universe = run.universe()
            train = [p for ps in select(universe, "train") for p in ps.problems]
            probe_sets = select(universe, "probe")
            snap = load_checkpoint(run.path(merge["fused"]))
            files, stage_info = [], []
            for k, stage in enumerate(run.cfg.rl.stages):
                snap, records, evals = rl_stage(run, snap, k, stage, train, probe_sets)
                sdir = run.out / "rl" / f"stage_{k}"
                files += [
                    write_jsonl(sdir / "metrics.jsonl", records),
                    write_jsonl(sdir / "evals.jsonl", evals),
                    save_checkpoint(snap, sdir / "final.json"),
                ]
                stage_info.append({"algorithm": stage.algorithm, "dir": run.rel(sdir)})
            files.append(save_checkpoint(snap, run.out / "rl" / "final.json"))
        run.record_stage("rl", files, timer["seconds"], final="rl/final.json", stages=stage_info)
    return load_checkpoint(run.path(run.manifest["stages"]["rl"]["final"]))


CHECKPOINT_ALIASES = {
    "init": ("sft", "init"),
    "warmstart": ("sft", "warmstart"),
    "fused": ("merge", "fused"),
    "final": ("rl", "final"),
}


def resolve_checkpoint(run: Run, ref: str) -> tuple[str, Path]:
    if ref in CHECKPOINT_ALIASES:
        stage, key = CHECKPOINT_ALIASES[ref]
        return ref, run.path(run.require(stage)[key])
    path = Path(ref)
    if not path.exists():
        raise MissingDependencyError("checkpoint", path)
    return path.stem, path


def cmd_eval(run: Run, checkpoint: str = "final", split: str | None = None, n: int | None = None, k: int | None = None):
    """Pass@1 / Pass@K table for a checkpoint: one row per subdomain plus an aggregate."""
    ecfg = run.cfg.eval
    split = split or ecfg.split
    n = n or ecfg.n
    k = k or ecfg.k
    if not 1 <= k <= n:
        raise ConfigError("eval needs 1 <= k <= n")
    tag, path = resolve_checkpoint(run, checkpoint)
    snap = load_checkpoint(path)
    universe = run.universe()
    rows = []
    all1, allk = [], []
    for d in run.cfg.universe.domains():
        sets = select(universe, split, d.id)
        if not sets:
            raise ConfigError(f"unknown split {split!r}")
        problems = sets[0].problems
        counts = correct_counts(snap, problems, n, np.random.default_rng(run.seed("eval", tag, split, d.id)))
        p1 = [pass_at_k(n, int(c), 1) for c in counts]
        pk = [pass_at_k(n, int(c), k) for c in counts]
        all1 += p1
        allk += pk
        rows.append({"subdomain": d.name, "problems": len(problems), "pass1": float(np.mean(p1)),
                     "passk": float(np.mean(pk))})
    rows.append({"subdomain": "all", "problems": len(all1), "pass1": float(np.mean(all1)),
                 "passk": float(np.mean(allk))})
    table = {"checkpoint": str(path), "split": split, "n": n, "K": k, "rows": rows}
    out = run.out / "eval" / f"{tag}_{split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=2))
    run.manifest.setdefault("evals", {})[f"{tag}_{split}"] = run.rel(out)
    run.save_manifest()
    return table


def cmd_report(run: Run) -> Path:
    """Plot-ready CSV of probe and RL evaluation points, plus a JSON summary."""
    rows = []
    if run.stage_done("probe"):
        for r in read_jsonl(run.path(run.manifest["stages"]["probe"]["curves"])):
            rows.append({"stage": f"sft/{r['name']}", "step": r["step"], "pass1": r["pass1"], "passk": r["passk"],
                         "mean_w_me": ""})
    if run.stage_done("rl"):
        for info in run.manifest["stages"]["rl"]["stages"]:
            for r in read_jsonl(run.path(info["dir"]) / "evals.jsonl"):
                rows.append({"stage": f"rl/{r['stage']}", "step": r["step"], "pass1": r["pass1"],
                             "passk": r["passk"], "mean_w_me": r["mean_w_me"]})
    if not rows:
        raise MissingDependencyError("probe", run.out / "probe")
    out = run.out / "report" / "summary.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    summary = {
        "config_hash": run.manifest["config_hash"],
        "timings": run.manifest["timings"],
        "evals": {tag: json.loads(run.path(rel).read_text()) for tag, rel in run.manifest.get("evals", {}).items()},
    }
    if run.stage_done("merge"):
        summary["fusion"] = json.loads(run.path(run.manifest["stages"]["merge"]["fusion_manifest"]).read_text())
    (run.out / "report" / "summary.json").write_text(json.dumps(summary, indent=2))
    return out


def run_pipeline(run: Run) -> dict:
    cmd_sft_train(run)
    cmd_probe(run)
    cmd_merge(run)
    cmd_rl_train(run)
    init = cmd_eval(run, "init")
    fused = cmd_eval(run, "fused")
    final = cmd_eval(run, "final")
    cmd_report(run)
    return {"init": init, "fused": fused, "final": final}
