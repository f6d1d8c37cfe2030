"""REINFORCE meta-training of the graph policy over a task distribution."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from .autodiff import NonFiniteError
from .env_tasks import POOLS, TaskPool, TaskSpec, sample_task
from .landscape_graph import M_MAX, STRATEGIES, graph_from_env
from .neural_policy import (
    Architecture,
    PolicyParams,
    aux_forward,
    gnn_forward,
    loss_and_gradient,
    policy_forward,
    save_checkpoint,
)
from .operators import design_phase, execute_program

log = logging.getLogger(__name__)

REWARD_EPS = 1e-12
LOG_COLUMNS = ("episode", "family", "dim", "R", "b", "A", "loss", "grad_norm", "tokens",
               "f_design", "f_final", "entropy", "aux_pred", "label", "fe_used", "flagged",
               "task")


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class TrainConfig:
    episodes: int = 10_000
    rho: float = 0.2
    beta: float = 0.01
    lam_aux: float = 0.3
    alpha: float = 0.9
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    task_pool: str = "mixed"
    graph_mode: str = "knn"
    families: Optional[Tuple[str, ...]] = None
    dims: Optional[Tuple[int, ...]] = None
    hidden: int = 64
    layers: int = 3
    population: int = 50
    k: int = 10
    m_max: int = M_MAX
    strategy: str = "mixed"
    checkpoint_every: int = 500
    baseline_update: str = "pre"

    def validate(self) -> "TrainConfig":
        if self.episodes < 0:
            raise ConfigError("episodes", "must be >= 0")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho", f"must lie in (0, 1), got {self.rho}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1), got {self.alpha}")
        for name in ("beta", "lam_aux", "lr", "clip_norm"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.task_pool not in POOLS:
            raise ConfigError("task_pool", f"must be one of {sorted(POOLS)}")
        if self.graph_mode not in ("knn", "identity"):
            raise ConfigError("graph_mode", "must be 'knn' or 'identity'")
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {STRATEGIES}")
        if self.baseline_update not in ("pre", "post"):
            raise ConfigError("baseline_update", "must be 'pre' or 'post'")
        if self.hidden < 1 or self.layers < 1 or self.k < 1 or self.m_max < 1:
            raise ConfigError("hidden", "architecture sizes must be positive")
        if self.population < 4:
            raise ConfigError("population", "must be >= 4")
        return self

    @property
    def architecture(self) -> Architecture:
        return Architecture(hidden=self.hidden, layers=self.layers)

    def pool(self) -> TaskPool:
        base = POOLS[self.task_pool]
        return TaskPool(
            families=tuple(self.families) if self.families else base.families,
            dims=tuple(self.dims) if self.dims else base.dims,
            noise_prob=base.noise_prob,
            budget_per_dim=base.budget_per_dim,
        )

    def to_dict(self):
        d = asdict(self)
        for key in ("families", "dims"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown training option")
        d = dict(d)
        for key in ("families", "dims"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class EpisodeRecord:
    episode: int
    task: TaskSpec
    reward: float
    advantage: float
    baseline: float
    tokens: List[str]
    loss: float
    grad_norm: float
    f_design_best: float
    f_final_best: float
    entropy: float = 0.0
    aux_pred: int = -1
    fe_used: int = 0
    flagged: bool = False

    def row(self):
        return {
            "episode": self.episode, "family": self.task.family, "dim": self.task.dim,
            "R": repr(self.reward), "b": repr(self.baseline), "A": repr(self.advantage),
            "loss": repr(self.loss), "grad_norm": repr(self.grad_norm),
            "tokens": "|".join(self.tokens), "f_design": repr(self.f_design_best),
            "f_final": repr(self.f_final_best), "entropy": repr(self.entropy),
            "aux_pred": self.aux_pred, "label": self.task.label_index,
            "fe_used": self.fe_used, "flagged": int(self.flagged),
            "task": self.task.to_record(),
        }


def reward(f_design, f_final, eps=REWARD_EPS, known_shift=None) -> float:
    """Log10 improvement from the design-phase best to the final best."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if known_shift is not None:
        f_design, f_final = f_design - known_shift, f_final - known_shift
    a = max(f_design, 0.0) + eps
    b = max(f_final, 0.0) + eps
    return math.log10(a / b)


def update_baseline(b, R, episode_index, alpha=0.9) -> float:
    if episode_index < 1:
        raise ValueError("episodes are numbered from 1")
    return R if episode_index == 1 else alpha * b + (1.0 - alpha) * R


def clip_by_norm(grad, clip_norm):
    norm = float(np.linalg.norm(grad))
    if clip_norm > 0 and norm > clip_norm:
        grad = grad * (clip_norm / norm)
    return grad, norm


class Adam:
    def __init__(self, n, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad):
        """In-place descent step on ``theta``."""
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    def load_state_dict(self, d):
        self.t = int(d["t"])
        self.m = np.asarray(d["m"], dtype=float)
        self.v = np.asarray(d["v"], dtype=float)


@dataclass
class TrainResult:
    params: PolicyParams
    records: List[EpisodeRecord] = field(default_factory=list)
    baseline: float = 0.0
    optimizer: Optional[Adam] = None
    episode: int = 0


def episode_rng(seed, episode):
    return np.random.default_rng([int(seed), int(episode)])


def run_episode(params, cfg: TrainConfig, episode: int, pool: TaskPool):
    """Roll out one episode; returns everything needed for the update."""
    rng = episode_rng(cfg.seed, episode)
    spec, env = sample_task(rng, pool)
    T = spec.budget
    T_design = int(math.floor(cfg.rho * T))
    state, f_design = design_phase(env, P=cfg.population, T_design=T_design,
                                   rng=int(rng.integers(2**31)))
    graph = graph_from_env(env, M_max=cfg.m_max, k=cfg.k, strategy=cfg.strategy,
                           identity_adjacency=cfg.graph_mode == "identity",
                           rng=int(rng.integers(2**31)))
    out = policy_forward(graph.H, graph.A, params, "sample", rng)
    T_run = T - env.evals_used
    trace = execute_program(env, state, out.program, T_run, int(rng.integers(2**31)))
    f_final = min(f_design, trace.final_best)
    return spec, env, graph, out, f_design, f_final


def train(cfg: TrainConfig, params: Optional[PolicyParams] = None, *, log_path=None,
          checkpoint_path=None, resume: Optional[dict] = None,
          callback: Optional[Callable[[EpisodeRecord], None]] = None,
          metadata: Optional[dict] = None) -> TrainResult:
    """Meta-train for ``cfg.episodes`` episodes (continuing from ``resume``).

    ``resume`` is a loaded checkpoint document; training picks up at the
    episode after the one it records, with its baseline and optimizer state.
    """
    cfg.validate()
    pool = cfg.pool()
    if params is None:
        params = PolicyParams.initialize(cfg.architecture, cfg.seed)
    opt = Adam(params.flat.size, lr=cfg.lr)
    b = 0.0
    start = 1
    if resume is not None:
        trainer = resume.get("metadata", {}).get("trainer", {})
        b = float(trainer.get("baseline", 0.0))
        start = int(resume.get("episode", 0)) + 1
        if "optimizer" in resume:
            opt.load_state_dict(resume["optimizer"])
    result = TrainResult(params, baseline=b, optimizer=opt, episode=start - 1)
    writer = None
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = start == 1 or not log_path.exists()
        fh = open(log_path, "w" if start == 1 else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fresh:
            writer.writeheader()
    meta = dict(metadata or {})
    meta["train_config"] = cfg.to_dict()

    def checkpoint(ep):
        if checkpoint_path is None:
            return
        meta["trainer"] = {"baseline": result.baseline}
        save_checkpoint(checkpoint_path, params, seed=cfg.seed, episode=ep,
                        metadata=meta, optimizer=opt.state_dict())

    try:
        for ep in range(start, cfg.episodes + 1):
            spec, env, graph, out, f_design, f_final = run_episode(params, cfg, ep, pool)
            R = reward(f_design, f_final, known_shift=spec.bias)
            # b_used is the baseline the advantage is measured against
            if cfg.baseline_update == "pre":
                b_used = b
                b = update_baseline(b, R, ep, cfg.alpha)
            else:
                b = b_used = update_baseline(b, R, ep, cfg.alpha)
            A = R - b_used
            rec = EpisodeRecord(ep, spec, R, A, b_used, out.tokens, float("nan"), 0.0,
                                f_design, f_final, entropy=out.entropy,
                                aux_pred=int(np.argmax(out.aux_logits)), fe_used=env.evals_used)
            try:
                loss, grad = loss_and_gradient(graph.H, graph.A, out.choices, A,
                                               spec.label_index, cfg.beta, cfg.lam_aux, params)
            except NonFiniteError as exc:
                log.warning("episode %d skipped: %s", ep, exc)
                rec.flagged = True
            else:
                grad, _ = clip_by_norm(grad, cfg.clip_norm)
                rec.loss = loss
                rec.grad_norm = float(np.linalg.norm(grad))
                opt.step(params.flat, grad)
            result.records.append(rec)
            result.baseline = b
            result.episode = ep
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
            if callback is not None:
                callback(rec)
            if cfg.checkpoint_every and ep % cfg.checkpoint_every == 0:
                checkpoint(ep)
        checkpoint(result.episode)
    finally:
        if fh is not None:
            fh.close()
    return result


def aux_accuracy(params, cfg: TrainConfig, n_graphs=200, seed=12345):
    """Fraction of fresh design-phase graphs whose landscape class is predicted right."""
    pool = cfg.pool()
    correct = 0
    for i in range(n_graphs):
        rng = episode_rng(seed, i)
        spec, env = sample_task(rng, pool)
        design_phase(env, P=cfg.population, T_design=int(math.floor(cfg.rho * spec.budget)),
                     rng=int(rng.integers(2**31)))
        graph = graph_from_env(env, M_max=cfg.m_max, k=cfg.k, strategy=cfg.strategy,
                               identity_adjacency=cfg.graph_mode == "identity",
                               rng=int(rng.integers(2**31)))
        z = gnn_forward(graph.H, graph.A, params)
        correct += int(np.argmax(aux_forward(z, params)) == spec.label_index)
    return correct / n_graphs
