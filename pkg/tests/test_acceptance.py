"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line and
records it for the end-of-session summary."""

import itertools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from ssplab import harness
from ssplab.config import ExperimentConfig
from ssplab.decontam import build_index, filter_corpus, normalize
from ssplab.grpo import ClipConfig, group_advantages, grpo_objective_and_grad, rollout_groups
from ssplab.mgpo import MgpoConfig, binary_entropy, entropy_weight, max_entropy_deviation, mgpo_objective_and_grad
from ssplab.policy import PolicySnapshot, init_params, load_checkpoint, sgd_step
from ssplab.spectrum import FusionSpec, fuse, pass_at_k
from ssplab.tasks import generate_universe

from conftest import (
    ACCEPTANCE_RESULTS,
    decontam_fixture,
    fd_check_grpo,
    fd_check_mgpo,
    fd_check_sft,
    throughput_corpus,
    tiny_arch,
    tiny_universe_config,
)


def record(name, ok, detail):
    ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    worst = 0.0
    checks = 0
    for seed in range(20):
        for kind in ("tabular", "linear"):
            for err in (fd_check_sft(seed, kind), fd_check_grpo(seed, kind), fd_check_mgpo(seed, kind)):
                worst = max(worst, err)
                checks += 1
    elapsed = time.perf_counter() - t0
    record("1 gradient fidelity", worst <= 1e-5 and elapsed < 120,
           f"{checks} checks, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_lambda_zero_degradation():
    cfg = tiny_universe_config()
    problems = [p for s in generate_universe(cfg, 0) for p in s.problems]
    worst = 0.0
    steps = 120
    for kind in ("tabular", "linear"):
        arch = tiny_arch(kind)
        theta = {"grpo": init_params(arch, 1, 0.5), "mgpo": init_params(arch, 1, 0.5)}
        rngs = {k: np.random.default_rng(42) for k in theta}
        for _ in range(steps):
            for algo in theta:
                rng = rngs[algo]
                qs = [problems[i] for i in rng.choice(len(problems), 6, replace=False)]
                groups = rollout_groups(theta[algo], arch, qs, 4, 1.0, 3, rng)
                old = PolicySnapshot(arch, theta[algo])
                if algo == "grpo":
                    _, g = grpo_objective_and_grad(theta[algo], old, groups, ClipConfig(0.2))
                else:
                    _, g = mgpo_objective_and_grad(theta[algo], old, groups, ClipConfig(0.2), MgpoConfig(0.0))
                theta[algo] = sgd_step(theta[algo], -g, 2.0)
            worst = max(worst, float(np.max(np.abs(theta["grpo"] - theta["mgpo"]))))
    record("2 lambda=0 degradation", worst <= 1e-12, f"{steps} steps x 2 archs, max |dtheta| {worst:.1e}")


def test_criterion_3_mgpo_weight_suite():
    grid = np.linspace(0, 1, 101)
    problems = []
    if entropy_weight(0.5, MgpoConfig(1.0)) != 1.0:
        problems.append("w(0.5) != 1")
    sym = max(abs(entropy_weight(p, MgpoConfig(lam)) - entropy_weight(1 - p, MgpoConfig(lam)))
              for p in grid for lam in (0.5, 1.0, 3.0))
    if sym > 1e-15:
        problems.append(f"symmetry {sym:.1e}")
    lams = [0, 0.25, 0.5, 1, 2, 4, 8]
    for p in grid:
        ws = [entropy_weight(p, MgpoConfig(l)) for l in lams]
        if any(b > a for a, b in zip(ws, ws[1:])):
            problems.append(f"not monotone at p={p}")
    ident = max(abs(max_entropy_deviation(p) - (math.log(2) - binary_entropy(p))) for p in grid)
    if ident > 1e-12:
        problems.append(f"identity {ident:.1e}")
    d = max_entropy_deviation(0.75)
    if abs(d - 0.130812) > 1e-6:
        problems.append(f"D(0.75)={d}")
    record("3 MGPO weight suite", not problems,
           "; ".join(problems) or f"symmetry {sym:.0e}, identity {ident:.0e}, D(0.75)={d:.6f}")


def test_criterion_4_advantage_normalization():
    rng = np.random.default_rng(0)
    worst_mean = worst_std = 0.0
    tested = degenerate_ok = 0
    while tested < 10_000:
        G = int(rng.integers(2, 33))
        if rng.random() < 0.5:
            rewards = rng.integers(0, 2, G).astype(float)
        else:
            rewards = rng.normal(size=G) * 10 ** rng.uniform(-3, 3)
        _, sigma, adv = group_advantages(rewards)
        if sigma == 0:
            degenerate_ok += bool(np.all(adv == 0))
            continue
        tested += 1
        worst_mean = max(worst_mean, abs(float(adv.mean())))
        worst_std = max(worst_std, abs(float(adv.std()) - 1))
    zero_ok = all(np.all(group_advantages([v] * G)[2] == 0) for v in (0.0, 1.0, 0.3) for G in (2, 8, 64))
    ok = worst_mean <= 1e-12 and worst_std <= 1e-9 and zero_ok
    record("4 advantage normalization", ok,
           f"{tested} groups, max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, degenerate zero {zero_ok}")


def test_criterion_5_pass_at_k_oracle():
    mismatches = 0
    for n in range(1, 9):
        for c in range(n + 1):
            for k in range(1, n + 1):
                subsets = list(itertools.combinations(range(n), k))
                exact = Fraction(sum(any(i < c for i in s) for s in subsets), len(subsets))
                mismatches += pass_at_k(n, c, k) != float(exact)
    monotone = all(
        pass_at_k(n, c, k) <= pass_at_k(n, c, k + 1) and pass_at_k(n, c, k) <= pass_at_k(n, min(c + 1, n), k)
        for n in range(1, 30) for c in range(n + 1) for k in range(1, n)
    )
    pass1 = all(pass_at_k(n, c, 1) == c / n for n in range(1, 40) for c in range(n + 1))
    spot = pass_at_k(4, 2, 2)
    ok = mismatches == 0 and monotone and pass1 and spot == 5 / 6
    record("5 Pass@K oracle", ok, f"{mismatches} mismatches vs enumeration, monotone {monotone}, "
                                  f"Pass@1=c/n {pass1}, (4,2,2)={spot:.6f}")


def test_criterion_6_fusion():
    arch = tiny_arch("linear")

    def snap(values):
        return PolicySnapshot(arch, np.asarray(values, dtype=float))

    rng = np.random.default_rng(0)
    a = np.zeros(arch.n_params)
    b = np.zeros(arch.n_params)
    a[1], b[0] = 2.0, 2.0
    mid = fuse(FusionSpec([snap(a), snap(b)], [0.5, 0.5])).params
    midpoint = mid[0] == 1.0 and mid[1] == 1.0 and np.all(mid[2:] == 0)
    x = rng.normal(size=arch.n_params)
    vertex = fuse(FusionSpec([snap(x), snap(a)], [1.0, 0.0])).params.tobytes() == x.tobytes()
    idem = all(fuse(FusionSpec.uniform([snap(x)] * n)).params.tobytes() == x.tobytes() for n in (2, 3, 4, 7))
    single = fuse(FusionSpec.uniform([snap(x)])).params.tobytes() == x.tobytes()
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(2, 6))
        stack = rng.normal(size=(n, arch.n_params)) * 10 ** rng.uniform(-3, 3, size=(n, 1))
        w = rng.dirichlet(np.ones(n))
        w[-1] = 0.0
        w[-1] = max(0.0, 1.0 - math.fsum(w))
        fused = fuse(FusionSpec([snap(s) for s in stack], list(w))).params
        violations += int(np.any(fused < stack.min(axis=0)) or np.any(fused > stack.max(axis=0)))
    ok = midpoint and vertex and idem and single and violations == 0
    record("6 fusion", ok, f"midpoint {midpoint}, vertex {vertex}, idempotent {idem}, N=1 identity {single}, "
                           f"hull violations {violations}/1000")


def test_criterion_7_decontamination():
    evals, train, planted = decontam_fixture()
    index = build_index(evals)
    kept, removed, _ = filter_corpus(train, index)
    exact = {r[0] for r in removed} == planted and len(removed) == 50
    again = filter_corpus(kept, index)
    idempotent = again[1] == [] and again[0] == kept
    corpus = throughput_corpus()
    normalize("warm up")
    tokens = sum(len(r.split()) for r in corpus)
    t0 = time.perf_counter()
    filter_corpus(corpus, build_index(corpus[:200]))
    rate = tokens / (time.perf_counter() - t0)
    ok = exact and idempotent and rate >= 1e6
    record("7 decontamination", ok, f"removed {len(removed)} (planted {len(planted)}, exact {exact}), "
                                    f"idempotent {idempotent}, {rate / 1e6:.2f}M tokens/s")


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    cfg = ExperimentConfig(seed=0)
    out = []
    for tag in ("a", "b"):
        d = tmp_path_factory.mktemp(f"e2e_{tag}")
        t0 = time.perf_counter()
        with harness.Run(cfg, d) as run:
            tables = harness.run_pipeline(run)
        out.append((d, tables, time.perf_counter() - t0))
    return out


def test_criterion_8_end_to_end(default_runs):
    d, tables, elapsed = default_runs[0]
    init = tables["init"]["rows"][-1]["pass1"]
    fused = tables["fused"]["rows"][-1]["pass1"]
    final = tables["final"]["rows"][-1]["pass1"]
    curves = harness.read_jsonl(d / "probe" / "curves.jsonl")
    fusion = json.loads((d / "merge" / "fusion_manifest.json").read_text())
    # independent argmax: highest passk, earliest step on ties
    by_sub = {}
    for row in curves:
        by_sub.setdefault(row["subdomain"], []).append((-row["passk"], row["step"]))
    expected = {s: min(pts)[1] for s, pts in by_sub.items()}
    chosen = {s["subdomain"]: s["step"] for s in fusion["specialists"]}
    selection_ok = chosen == expected and len(chosen) == 4
    hist_ok = True
    for stage_dir in sorted((d / "rl").glob("stage_*")):
        for rec in harness.read_jsonl(stage_dir / "metrics.jsonl"):
            hist_ok &= "pc_hist" in rec and "w_me_by_pc" in rec and "mean_w_me" in rec
    ok = init < 0.10 and final >= 0.90 and elapsed < 600 and selection_ok and hist_ok
    record("8 end-to-end", ok, f"holdout Pass@1 init {init:.4f} -> fused {fused:.4f} -> final {final:.4f}, "
                               f"{elapsed:.0f}s, selection verified {selection_ok}, histograms {hist_ok}")


def test_criterion_9_reproducibility(default_runs):
    (a, _, _), (b, _, _) = default_runs
    final_a = load_checkpoint(a / "rl" / "final.json").params
    final_b = load_checkpoint(b / "rl" / "final.json").params
    same_ckpt = final_a.tobytes() == final_b.tobytes()
    rels = sorted(p.relative_to(a) for p in a.rglob("*.json*") if p.name != "manifest.json" and "report" not in p.parts)
    same_files = all((a / r).read_bytes() == (b / r).read_bytes() for r in rels if "eval" not in r.parts)
    record("9 reproducibility", same_ckpt and same_files,
           f"final checkpoints bit-identical {same_ckpt}; {len(rels)} artifacts compared, identical {same_files}")
