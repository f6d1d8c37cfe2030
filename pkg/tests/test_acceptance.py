"""Acceptance suite: one verdict line per criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary of any pytest run.
The slow experiments (training, ablation) take several minutes in total.
"""
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import VERDICTS
from opal.bench_stats import friedman, holm_adjust, wilcoxon_exact_p, wilcoxon_normal_p, rankdata
from opal.config import profile
from opal.env_tasks import Environment, make_environment, make_function, sample_task
from opal.experiments import cmd_ablate
from opal.landscape_graph import build_graph, graph_from_env
from opal.meta_train import TrainConfig, aux_accuracy, reward, train
from opal.neural_policy import Architecture, PolicyParams, loss_and_gradient, policy_forward
from opal.operators import (
    REGISTRY,
    TOKENS,
    OperatorCall,
    OperatorProgram,
    PopulationState,
    de_baseline,
    design_phase,
    execute_program,
    uniform_population,
)


def verdict(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# -- gradient oracle ----------------------------------------------------------


def _logsumexp(x):
    m = x.max()
    return m + math.log(np.exp(x - m).sum())


def reference_loss(flat, arch, H, A, choices, adv, label, beta, lam):
    """Plain-numpy forward pass of the training loss, independent of the autodiff engine."""
    w, pos = {}, 0
    for name, shape in arch.layout():
        size = math.prod(shape)
        w[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    An = A / A.sum(axis=1, keepdims=True)
    x = H
    for i in range(arch.layers):
        x = np.maximum(An @ (x @ w[f"gnn{i}.W"]) + w[f"gnn{i}.b"], 0.0)
    z = x.mean(axis=0)
    logp = ent = 0.0
    for p in range(arch.n_phases):
        logits = z @ w[f"phase{p}.W"] + w[f"phase{p}.b"]
        ls = logits - _logsumexp(logits)
        logp += ls[choices[p]]
        ent -= float(np.sum(np.exp(ls) * ls))
    a = np.maximum(z @ w["aux.W1"] + w["aux.b1"], 0.0) @ w["aux.W2"] + w["aux.b2"]
    return -adv * logp - beta * ent + lam * (_logsumexp(a) - a[label])


def test_gradient_oracle():
    t0 = time.perf_counter()
    arch = Architecture(hidden=8)
    worst, worst_elem, worst_fwd = 0.0, 0.0, 0.0
    for inst in range(20):
        rng = np.random.default_rng([7, inst])
        g = build_graph(rng.normal(size=(12, 5)), rng.normal(size=12), d=5, rng=inst)
        params = PolicyParams(arch, rng.normal(0.0, 0.5, arch.n_params))
        choices = [int(c) for c in rng.integers(0, len(TOKENS), 3)]
        args = (choices, float(rng.normal()), int(rng.integers(0, 4)), 0.01, 0.3)
        loss, grad = loss_and_gradient(g.H, g.A, *args, params)
        x = params.flat.copy()
        f = lambda: reference_loss(x, arch, g.H, g.A, *args)
        worst_fwd = max(worst_fwd, abs(f() - loss))
        fd = np.empty_like(x)
        for i in range(x.size):
            old = x[i]
            x[i] = old + 1e-5
            fp = f()
            x[i] = old - 1e-5
            fm = f()
            x[i] = old
            fd[i] = (fp - fm) / 2e-5
        # relative error per parameter block: single entries near 1e-8 sit below the
        # rounding floor of central differences and are reported separately
        for sl in params.slices.values():
            gb, fb = grad[sl], fd[sl]
            scale = max(np.linalg.norm(gb), np.linalg.norm(fb))
            if scale > 0:
                worst = max(worst, float(np.linalg.norm(gb - fb) / scale))
        elem = np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-6)
        worst_elem = max(worst_elem, float(elem.max()))
    elapsed = time.perf_counter() - t0
    verdict("gradient oracle", worst < 1e-4 and elapsed < 30.0,
            f"max blockwise rel err {worst:.2e} (< 1e-4) over 20 instances (elementwise max "
            f"{worst_elem:.1e}), forward agreement {worst_fwd:.1e}, {elapsed:.1f} s (< 30 s)")


# -- reward -------------------------------------------------------------------


def test_reward_exactness():
    a = reward(100, 1, 1e-12)
    same = [reward(x, x, 1e-12) for x in (0.0, 1e-15, 3.7, 1e6)]
    c = reward(1, 0, 1e-12)
    ok = abs(a - 2.0) < 1e-9 and all(s == 0.0 for s in same) and 11.9 <= c <= 12.1
    verdict("reward exactness", ok, f"R(100,1)={a!r}, R(x,x)={same}, R(1,0)={c:.6f}")


# -- executor budget law --------------------------------------------------------


def _random_theta(token, rng, P):
    theta = {}
    for key in REGISTRY[token].defaults:
        if rng.random() < 0.5:
            continue
        if key == "n_samp":
            theta[key] = int(rng.integers(1, 2 * P + 1))
        elif key in ("q_pair", "q_restart"):
            theta[key] = float(rng.uniform(0.01, 1.0))
        else:
            theta[key] = REGISTRY[token].defaults[key] * float(rng.uniform(0.2, 2.0))
    return theta


def test_executor_budget_law():
    bad = []
    max_over = 0
    for case in range(1000):
        rng = np.random.default_rng([11, case])
        d, P = int(rng.integers(1, 8)), int(rng.integers(4, 61))
        family = ("sphere", "rastrigin")[case % 2]
        env = Environment(make_function(family, d), np.full(d, -100.0), np.full(d, 100.0),
                          10**8, seed=case)
        X = uniform_population(env, P, rng)
        S0 = PopulationState(X, env.evaluate_batch(X))
        tokens = rng.choice(TOKENS, size=int(rng.integers(1, 6)))
        prog = OperatorProgram([OperatorCall(t, _random_theta(t, rng, P)) for t in tokens])
        T_run = int(rng.integers(1, 3001))
        trace = execute_program(env, S0, prog, T_run, seed=case)
        costs = np.diff(trace.H_fe)
        used = trace.fe_used
        ok = (T_run <= used < T_run + costs.max() and np.all(np.diff(trace.H_best) <= 0)
              and used == env.evals_used - P)
        max_over = max(max_over, used - T_run)
        if not ok:
            bad.append(case)
    verdict("executor budget law", not bad,
            f"{1000 - len(bad)}/1000 cases with T_run <= T_used < T_run + max call cost "
            f"and nonincreasing best (largest overshoot {max_over} FEs)")


# -- graph invariants -------------------------------------------------------------


def test_graph_invariants():
    t0 = time.perf_counter()
    strategies = ("time_uniform", "random", "fitness_stratified", "mixed")
    failures = []
    worst_mean = 0.0
    for case in range(1000):
        rng = np.random.default_rng([13, case])
        M = int(rng.integers(1, 40)) if case % 3 == 0 else int(rng.integers(1, 2500))
        d = int(rng.integers(1, 21))
        scale = 10.0 ** rng.uniform(-3, 6)
        f = scale * rng.normal(size=M) + rng.uniform(-1, 1) * scale * 10
        if case % 17 == 0:
            f = np.full(M, f[0])
        elif case % 7 == 0:
            f = np.round(f / scale)
        pts = rng.uniform(-100, 100, size=(M, d))
        g = build_graph(pts, f, d, strategy=strategies[case % 4], rng=case)
        N = g.n_nodes
        k_eff = min(10, N - 1)
        A, H = g.A, g.H
        mean = max(abs(H[:, 0].mean()), abs(H[:, 4].mean()))
        worst_mean = max(worst_mean, mean)
        ok = (np.array_equal(A, A.T) and np.all(np.diag(A) == 1) and N <= 300
              and N == min(M, 300) and g.k_eff == k_eff
              and np.all(A.sum(axis=1) >= k_eff + 1) and mean < 1e-9
              and np.all(np.isfinite(H)) and (M > 1 or np.all(H[:, 3] == 0)))
        if not ok:
            failures.append(case)
    elapsed = time.perf_counter() - t0
    verdict("graph invariant suite", not failures and elapsed < 60.0,
            f"{1000 - len(failures)}/1000 fuzzed trajectories valid, max |standardized "
            f"mean| {worst_mean:.1e}, {elapsed:.1f} s (< 60 s)")


# -- statistics oracles --------------------------------------------------------------


def test_statistics_oracles():
    diffs = {}
    for case in range(1000):
        rng = np.random.default_rng([17, case])
        m = int(rng.integers(1, 13))
        a = rng.normal(size=m)
        b = rng.normal(size=m) + rng.normal(0.0, 1.0)
        d = a - b
        d = d[d != 0]
        r = rankdata(np.abs(d))
        w_plus = float(r[d > 0].sum())
        gap = abs(wilcoxon_normal_p(r, w_plus) - wilcoxon_exact_p(r, w_plus))
        diffs.setdefault(m, []).append(gap)
    worst = {m: max(v) for m, v in sorted(diffs.items())}
    within = sum(g <= 0.03 for v in diffs.values() for g in v)
    wil_ok = all(v <= 0.03 for v in worst.values())
    stat, _ = friedman(np.tile([1.0, 2.0, 3.0], (3, 1)))
    tied, _ = friedman(np.full((6, 4), 2.5))
    holm = holm_adjust([0.01, 0.02, 0.04])
    fr_ok = abs(stat - 6.0) < 1e-12 and tied == 0.0
    holm_ok = np.allclose(holm, [0.03, 0.04, 0.04], atol=1e-15)
    per_m = ", ".join(f"m={m}:{w:.3f}" for m, w in worst.items())
    verdict("statistics oracles", wil_ok and fr_ok and holm_ok,
            f"Wilcoxon normal vs exact within 0.03 in {within}/1000 cases, worst gap per m "
            f"[{per_m}]; Friedman chi2={stat:.6f} and tied={tied}; Holm={holm}")


# -- learning smoke test ----------------------------------------------------------------


def _one_run(spec, run_seed, choose_program):
    env = make_environment(spec, env_seed=run_seed)
    rng = np.random.default_rng(run_seed)
    state, f_design = design_phase(env, T_design=math.floor(0.2 * spec.budget),
                                   rng=int(rng.integers(2**31)))
    graph = graph_from_env(env, rng=int(rng.integers(2**31)))
    trace = execute_program(env, state, choose_program(graph), spec.budget - env.evals_used,
                            int(rng.integers(2**31)))
    return env.error(min(f_design, trace.final_best))


@pytest.mark.slow
def test_learning_smoke():
    t0 = time.perf_counter()
    cfg = TrainConfig(episodes=300, families=("sphere", "rastrigin"), dims=(10,), seed=0)
    result = train(cfg)
    R = np.array([r.reward for r in result.records])
    first, last = R[:50].mean(), R[250:].mean()
    pool = cfg.pool()
    wins = 0
    for i in range(20):
        spec, _ = sample_task(np.random.default_rng([99, i]), pool)
        runs = [int(np.random.SeedSequence([99, i, r]).generate_state(1)[0]) for r in range(5)]
        greedy = [_one_run(spec, s, lambda g: policy_forward(g.H, g.A, result.params).program)
                  for s in runs]
        pick = np.random.default_rng([31337, i])
        rand = [_one_run(spec, s, lambda g: OperatorProgram.from_tokens(
            list(pick.choice(TOKENS, size=3)))) for s in runs]
        wins += np.median(greedy) <= np.median(rand)
    elapsed = time.perf_counter() - t0
    ok = wins >= 12 and last > first and elapsed < 1200
    verdict("learning smoke test", ok,
            f"trained greedy <= random 3-token median on {wins}/20 held-out instances "
            f"(need >= 12); mean reward episodes 251-300 {last:.3f} vs 1-50 {first:.3f}; "
            f"{elapsed:.0f} s (< 1200 s)")


# -- baseline sanity ---------------------------------------------------------------------


def test_de_baseline_sanity():
    ratios = []
    for seed in range(20):
        env = Environment(make_function("sphere", 10), np.full(10, -100.0), np.full(10, 100.0),
                          10_000, seed=seed)
        trace = de_baseline(env, T=10_000, seed=seed)
        ratios.append(trace.final_best / trace.H_best[0])
    med = float(np.median(ratios))
    verdict("baseline sanity", med <= 1e-3,
            f"median final/initial best over 20 seeds {med:.2e} (<= 1e-3)")


# -- overhead bound --------------------------------------------------------------------------

_OVERHEAD_SCRIPT = r"""
import json, time, numpy as np
from opal.env_tasks import build_task, make_environment
from opal.landscape_graph import graph_from_env
from opal.neural_policy import Architecture, PolicyParams, policy_forward
from opal.operators import design_phase
spec = build_task("rastrigin", 100, seed=0, budget=100_000)
env = make_environment(spec)
design_phase(env, T_design=2000, rng=0)
params = PolicyParams.initialize(Architecture(hidden=64), seed=0)
times = []
for rep in range(6):
    t = time.perf_counter()
    g = graph_from_env(env, rng=rep)
    out = policy_forward(g.H, g.A, params, "greedy")
    times.append(time.perf_counter() - t)
print(json.dumps({"N": g.n_nodes, "times": times[1:]}))
"""


def test_overhead_bound():
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    out = subprocess.run([sys.executable, "-c", _OVERHEAD_SCRIPT], env=env, check=True,
                         capture_output=True, text=True).stdout
    res = json.loads(out)
    med = 1000 * float(np.median(res["times"]))
    verdict("overhead bound", res["N"] == 300 and med < 100.0,
            f"graph + forward + greedy decode, N={res['N']}, d=100, h=64, single thread: "
            f"median {med:.1f} ms (< 100 ms)")


# -- aux head learnability ---------------------------------------------------------------------


@pytest.mark.slow
def test_aux_head_learnability():
    cfg = TrainConfig(episodes=300, families=("sphere", "rastrigin", "hybrid_blend",
                                              "composition_blend"), dims=(10,), seed=0)
    result = train(cfg)
    acc = aux_accuracy(result.params, cfg, n_graphs=200)
    verdict("aux-head learnability", acc > 0.40,
            f"accuracy {acc:.3f} on 200 fresh design-phase graphs (> 0.40, chance 0.25)")


# -- ablation pipeline ----------------------------------------------------------------------------


@pytest.mark.slow
def test_ablation_pipeline(tmp_path):
    cfg = profile("desk")
    cfg.paths.out_dir = str(tmp_path)
    rows, path = cmd_ablate(cfg)
    header = open(path).readline().strip().split(",")
    manifests = {r["variant"]: json.loads((tmp_path / r["variant"] / "variant.manifest.json")
                                          .read_text()) for r in rows}
    ng = manifests.get("noGraph", {})
    ok = (len(rows) == 4 and {"avg_rank", "unique_programs", "non_de_frac"} <= set(header)
          and ng.get("adjacency") == "identity" and ng.get("adjacency_is_identity") is True
          and all(not m["adjacency_is_identity"] for k, m in manifests.items() if k != "noGraph"))
    ranks = ", ".join(f"{r['variant']}={r['avg_rank']:.2f}" for r in rows)
    verdict("ablation pipeline", ok,
            f"{len(rows)} rows with columns {header}; avg ranks [{ranks}]; noGraph adjacency "
            f"{ng.get('adjacency')}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-s", "-q"]))
