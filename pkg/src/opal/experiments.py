"""Train / evaluate / compare / ablate workflows and their on-disk artifacts."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .bench_stats import RunRecord, comparison_report, operator_usage, rank_matrix, write_records
from .config import ExperimentConfig
from .env_tasks import FAMILY_LABEL, build_task, make_environment
from .landscape_graph import graph_from_env
from .meta_train import train
from .neural_policy import (
    PolicyParams,
    gnn_forward,
    load_checkpoint,
    phase_logits,
    policy_forward,
)
from .operators import de_baseline, design_phase, execute_program, pso_baseline

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": {},
    "noAux": {"lam_aux": 0.0},
    "cecOnly": {"task_pool": "restricted"},
    "noGraph": {"graph_mode": "identity"},
}


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, cfg: ExperimentConfig, extra=None, checkpoint=None):
    doc = {
        "opal_version": __version__,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "train_seed": cfg.train.seed,
        "eval_seed": cfg.eval.seed,
        "config": cfg.to_ini(),
    }
    if checkpoint is not None and Path(checkpoint).exists():
        doc["checkpoint"] = str(checkpoint)
        doc["checkpoint_sha256"] = file_hash(checkpoint)
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


def instance_seed(function: str, dim: int) -> int:
    """Fixed problem instance per (function, dim), shared by all runs and algorithms."""
    return zlib.crc32(f"{function}:{dim}".encode())


def run_seed(base: int, function: str, dim: int, run: int) -> int:
    return int(np.random.SeedSequence([base, instance_seed(function, dim), run]).generate_state(1)[0])


# -- train --------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, resume=True):
    cfg.validate()
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.paths.resolve("checkpoint_out", "policy.json")
    log_path = cfg.paths.resolve("log_out", "episodes.csv")
    params, doc = None, None
    if resume and cfg.paths.checkpoint_in:
        params, doc = load_checkpoint(cfg.paths.checkpoint_in)
        if params.arch != cfg.train.architecture:
            raise ValueError("checkpoint architecture differs from the configured one")
    result = train(cfg.train, params, log_path=log_path, checkpoint_path=ckpt, resume=doc,
                   metadata={"graph_mode": cfg.train.graph_mode, "lam_aux": cfg.train.lam_aux,
                             "task_pool": cfg.train.task_pool})
    write_manifest(ckpt.with_suffix(".manifest.json"), cfg, checkpoint=ckpt,
                   extra={"episodes_done": result.episode, "log": str(log_path)})
    return result, ckpt


# -- evaluate -----------------------------------------------------------------


@dataclass
class EvalJob:
    algorithm: str
    function: str
    dim: int
    run: int
    seed: int
    budget: int
    rho: float
    params: Optional[PolicyParams] = None
    graph_mode: str = "knn"


def run_job(job: EvalJob):
    """One (algorithm, function, dim, seed) run; returns (RunRecord, tokens or None)."""
    spec = build_task(job.function, job.dim, instance_seed(job.function, job.dim),
                      noisy=False, budget=job.budget)
    env = make_environment(spec, env_seed=job.seed)
    rng = np.random.default_rng(job.seed)
    tokens = None
    if job.algorithm in ("de", "pso"):
        fn = de_baseline if job.algorithm == "de" else pso_baseline
        best = fn(env, job.budget, seed=int(rng.integers(2**31))).final_best
    else:
        T_design = int(math.floor(job.rho * job.budget))
        state, f_design = design_phase(env, T_design=T_design, rng=int(rng.integers(2**31)))
        graph = graph_from_env(env, identity_adjacency=job.graph_mode == "identity",
                               rng=int(rng.integers(2**31)))
        out = policy_forward(graph.H, graph.A, job.params, "greedy")
        trace = execute_program(env, state, out.program, job.budget - env.evals_used,
                                int(rng.integers(2**31)))
        best = min(f_design, trace.final_best)
        tokens = out.tokens
    rec = RunRecord(job.algorithm, job.function, job.dim, job.run, float(env.error(best)))
    return rec, tokens


def _workers(n):
    return (os.cpu_count() or 1) if n == 0 else n


def run_jobs(jobs: List[EvalJob], workers=0):
    n = _workers(workers)
    if n <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        return list(pool.map(run_job, jobs, chunksize=max(1, len(jobs) // (4 * n))))


def evaluation_jobs(cfg: ExperimentConfig, policies: Dict[str, tuple]):
    """Jobs for every (algorithm, function, dim, run).

    ``policies`` maps an algorithm label to ``(params, graph_mode)``; the
    baselines named in ``cfg.eval.algorithms`` are added alongside.
    """
    ev = cfg.eval
    algos = list(policies) + [a for a in ev.algorithms if a in ("de", "pso")]
    jobs = []
    for fn in ev.functions:
        for d in ev.dims:
            for run in range(ev.runs):
                seed = run_seed(ev.seed, fn, d, run)
                for a in algos:
                    params, mode = policies.get(a, (None, "knn"))
                    jobs.append(EvalJob(a, fn, d, run, seed, ev.budget(d), ev.rho, params, mode))
    return jobs


def write_programs(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "function", "dim", "seed", "label", "tokens"])
        for rec, toks in results:
            if toks is not None:
                w.writerow([rec.algorithm, rec.function, rec.dim, rec.seed,
                            FAMILY_LABEL[rec.function], "|".join(toks)])


def cmd_evaluate(cfg: ExperimentConfig, checkpoint=None):
    cfg.validate()
    checkpoint = checkpoint or cfg.paths.checkpoint_in
    policies = {}
    if "opal" in cfg.eval.algorithms:
        if not checkpoint:
            raise ValueError("evaluating opal needs a checkpoint (paths.checkpoint_in)")
        params, doc = load_checkpoint(checkpoint)
        mode = doc.get("metadata", {}).get("graph_mode", "knn")
        policies["opal"] = (params, mode)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_jobs(evaluation_jobs(cfg, policies), cfg.eval.workers)
    records = [r for r, _ in results]
    rec_path = cfg.paths.resolve("records_out", "records.csv")
    write_records(rec_path, records)
    write_programs(rec_path.with_name("programs.csv"), results)
    write_manifest(rec_path.with_suffix(".manifest.json"), cfg, checkpoint=checkpoint,
                   extra={"records": str(rec_path), "n_records": len(records)})
    return records, results


# -- compare ------------------------------------------------------------------


def write_report(report_dir, report: Dict[str, str]):
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    for name, text in report.items():
        (report_dir / name).write_text(text)
    return report_dir


def cmd_compare(cfg: ExperimentConfig, records=None, reference="opal"):
    from .bench_stats import read_records

    if records is None:
        records = read_records(cfg.paths.records_in or cfg.paths.resolve("records_out", "records.csv"))
    algos = {r.algorithm for r in records}
    report = comparison_report(records, reference if reference in algos else None)
    return write_report(cfg.paths.resolve("report_out", "report"), report), report


# -- ablate -------------------------------------------------------------------


def variant_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    v = copy.deepcopy(cfg)
    for key, val in ABLATIONS[name].items():
        setattr(v.train, key, val)
    v.paths.out_dir = str(Path(cfg.paths.out_dir) / name)
    v.paths.checkpoint_out = None
    v.paths.log_out = None
    v.paths.checkpoint_in = None
    return v


def _train_variant(args):
    name, vcfg = args
    _, ckpt = cmd_train(vcfg, resume=False)
    return name, str(ckpt)


def _adjacency_is_identity(vcfg: ExperimentConfig) -> bool:
    spec = build_task("sphere", 10, 0, budget=1000)
    env = make_environment(spec)
    design_phase(env, T_design=200, rng=0)
    g = graph_from_env(env, identity_adjacency=vcfg.train.graph_mode == "identity", rng=0)
    return bool(np.array_equal(g.A, np.eye(g.n_nodes)))


def cmd_ablate(cfg: ExperimentConfig):
    """Train the four variants, evaluate them greedily and tabulate the comparison."""
    cfg.validate()
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = {name: variant_config(cfg, name) for name in ABLATIONS}
    n = min(_workers(cfg.eval.workers), len(variants))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            ckpts = dict(pool.map(_train_variant, variants.items()))
    else:
        ckpts = dict(map(_train_variant, variants.items()))
    policies = {}
    for name, vcfg in variants.items():
        params, doc = load_checkpoint(ckpts[name])
        policies[name] = (params, vcfg.train.graph_mode)
        identity = _adjacency_is_identity(vcfg)
        write_manifest(Path(vcfg.paths.out_dir) / "variant.manifest.json", vcfg,
                       checkpoint=ckpts[name],
                       extra={"variant": name, "lam_aux": vcfg.train.lam_aux,
                              "task_pool": vcfg.train.task_pool,
                              "graph_mode": vcfg.train.graph_mode,
                              "adjacency": "identity" if identity else "knn",
                              "adjacency_is_identity": identity})
    ecfg = copy.deepcopy(cfg)
    ecfg.eval.algorithms = ()
    results = run_jobs(evaluation_jobs(ecfg, policies), cfg.eval.workers)
    records = [r for r, _ in results]
    write_records(out / "ablation_records.csv", records)
    write_programs(out / "ablation_programs.csv", results)
    R, problems, algos = rank_matrix(records, list(ABLATIONS))
    rows = []
    for j, name in enumerate(algos):
        logs = [(FAMILY_LABEL[r.function], toks) for r, toks in results if r.algorithm == name]
        usage = operator_usage(logs)
        vt = variants[name].train
        rows.append({"variant": name, "avg_rank": float(R[:, j].mean()),
                     "unique_programs": usage.unique_programs,
                     "non_de_frac": usage.non_de_fraction,
                     "lam_aux": vt.lam_aux, "task_pool": vt.task_pool,
                     "graph_mode": vt.graph_mode})
    report_path = cfg.paths.resolve("report_out", "ablation.csv")
    with open(report_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    write_manifest(out / "ablation.manifest.json", cfg,
                   extra={"variants": {k: str(v) for k, v in ckpts.items()},
                          "report": str(report_path)})
    return rows, report_path


# -- inspection -----------------------------------------------------------------


def _design_graph(cfg: ExperimentConfig, graph_mode="knn"):
    budget = cfg.eval.budget(cfg.dim)
    spec = build_task(cfg.function, cfg.dim, instance_seed(cfg.function, cfg.dim), budget=budget)
    env = make_environment(spec, env_seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    design_phase(env, T_design=int(math.floor(cfg.eval.rho * budget)),
                 rng=int(rng.integers(2**31)))
    g = graph_from_env(env, identity_adjacency=graph_mode == "identity",
                       rng=int(rng.integers(2**31)))
    return spec, g


def cmd_graph_dump(cfg: ExperimentConfig):
    cfg.validate()
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec, g = _design_graph(cfg, cfg.train.graph_mode)
    np.savetxt(out / "H.csv", g.H, delimiter=",", header=",".join(
        ["f_z", "r_norm", "d_best", "t_norm", "df_loc", "d_feat"]), comments="")
    np.savetxt(out / "A.csv", g.A, delimiter=",", fmt="%d")
    side = {"N": g.n_nodes, "k_eff": g.k_eff, "strategy": g.strategy, "seed": cfg.seed,
            "task": spec.to_record()}
    (out / "graph.json").write_text(json.dumps(side, indent=2))
    return g, side


def cmd_inspect_program(cfg: ExperimentConfig, checkpoint=None):
    cfg.validate()
    params, doc = load_checkpoint(checkpoint or cfg.paths.checkpoint_in)
    mode = doc.get("metadata", {}).get("graph_mode", "knn")
    spec, g = _design_graph(cfg, mode)
    z = gnn_forward(g.H, g.A, params)
    out = policy_forward(g.H, g.A, params, "greedy")
    _, probs = phase_logits(z, params)
    lines = [f"# task: {spec.to_record()}"]
    for p, row in enumerate(probs):
        lines.append("# phase %d: %s" % (p, " ".join(f"{x:.3f}" for x in row)))
    return "\n".join(lines) + "\n" + out.program.to_text()
