"""Population state, the eight-operator registry, DE probe, baselines and executor."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .env_tasks import Environment


@dataclass
class PopulationState:
    X: np.ndarray
    fitness: np.ndarray
    velocities: Optional[np.ndarray] = None
    pbest_X: Optional[np.ndarray] = None
    pbest_f: Optional[np.ndarray] = None

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.fitness))

    @property
    def best_fitness(self) -> float:
        return float(self.fitness[self.best_index])

    @property
    def size(self) -> int:
        return self.X.shape[0]

    def copy(self) -> "PopulationState":
        c = lambda a: None if a is None else a.copy()
        return PopulationState(self.X.copy(), self.fitness.copy(),
                               c(self.velocities), c(self.pbest_X), c(self.pbest_f))


@dataclass
class OperatorCall:
    token: str
    theta: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.token not in REGISTRY:
            raise ValueError(f"unknown operator token {self.token!r}")
        extra = set(self.theta) - set(REGISTRY[self.token].defaults)
        if extra:
            raise ValueError(f"{self.token} has no hyperparameters {sorted(extra)}")

    def to_text(self) -> str:
        return " ".join([self.token] + [f"{k}={v!r}" for k, v in self.theta.items()
                                        if v is not None])


@dataclass
class OperatorProgram:
    calls: List[OperatorCall] = field(default_factory=list)

    @classmethod
    def from_tokens(cls, tokens, with_defaults: bool = True) -> "OperatorProgram":
        return cls([OperatorCall(t, default_theta(t) if with_defaults else {}) for t in tokens])

    @property
    def tokens(self) -> List[str]:
        return [c.token for c in self.calls]

    def __len__(self):
        return len(self.calls)

    def to_text(self) -> str:
        return "".join(c.to_text() + "\n" for c in self.calls)

    @classmethod
    def from_text(cls, text: str) -> "OperatorProgram":
        calls = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            token, *pairs = line.split()
            theta = {}
            for p in pairs:
                key, sep, val = p.partition("=")
                if not sep:
                    raise ValueError(f"malformed hyperparameter {p!r} in line {line!r}")
                theta[key] = float(val)
            calls.append(OperatorCall(token, theta))
        return cls(calls)


@dataclass
class RunTrace:
    H_best: List[float]
    H_fe: List[int]
    final_state: PopulationState

    @property
    def final_best(self) -> float:
        return self.H_best[-1]

    @property
    def fe_used(self) -> int:
        return self.H_fe[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("fe,best\n")
        for fe, b in zip(self.H_fe, self.H_best):
            buf.write(f"{fe},{b!r}\n")
        return buf.getvalue()


# -- helpers -----------------------------------------------------------------


def uniform_population(env: Environment, P: int, rng: np.random.Generator) -> np.ndarray:
    return env.lower + rng.random((P, env.dim)) * env.range


def _distinct_indices(P: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """For each row i, ``k`` distinct indices in [0, P) all different from i."""
    if P < k + 1:
        raise ValueError(f"population of {P} too small for {k} distinct donors")
    keys = rng.random((P, P))
    np.fill_diagonal(keys, np.inf)
    return np.argsort(keys, axis=1)[:, :k]


def de_mutation_rand1(x_r1, x_r2, x_r3, F):
    """Classical DE/rand/1 donor ``x_r1 + F (x_r2 - x_r3)``."""
    return np.asarray(x_r1) + F * (np.asarray(x_r2) - np.asarray(x_r3))


def binomial_crossover(X, V, CR, rng):
    P, d = X.shape
    mask = rng.random((P, d)) < CR
    mask[np.arange(P), rng.integers(d, size=P)] = True
    return np.where(mask, V, X)


def _sync_pbest(state: PopulationState, rows):
    """Keep PSO personal bests in step with greedy replacements."""
    if state.pbest_f is None:
        return
    rows = np.asarray(rows)
    better = state.fitness[rows] < state.pbest_f[rows]
    r = rows[better]
    state.pbest_X[r] = state.X[r]
    state.pbest_f[r] = state.fitness[r]


def _greedy_replace(state: PopulationState, rows, cand, f_cand):
    improve = f_cand < state.fitness[rows]
    r = np.asarray(rows)[improve]
    state.X[r] = cand[improve]
    state.fitness[r] = f_cand[improve]
    _sync_pbest(state, r)


def de_generation(state, env, rng, F=0.7, CR=0.9, base="rand"):
    P = state.size
    if base == "rand":
        idx = _distinct_indices(P, 3, rng)
        V = de_mutation_rand1(state.X[idx[:, 0]], state.X[idx[:, 1]], state.X[idx[:, 2]], F)
    else:
        idx = _distinct_indices(P, 2, rng)
        V = state.X[state.best_index] + F * (state.X[idx[:, 0]] - state.X[idx[:, 1]])
    U = env.clip(binomial_crossover(state.X, V, CR, rng))
    f = env.evaluate_batch(U, allow_overshoot=True)
    _greedy_replace(state, np.arange(P), U, f)
    return P


# -- the operator vocabulary -------------------------------------------------
# Each operator mutates ``state`` in place and returns the FEs it spent.


def op_de_rand_1_bin(state, env, rng, F=0.7, CR=0.9):
    return de_generation(state, env, rng, F, CR, base="rand")


def op_de_best_1_bin(state, env, rng, F=0.7, CR=0.9):
    return de_generation(state, env, rng, F, CR, base="best")


def op_uniform_crossover_pairs(state, env, rng, q_pair=0.5):
    P = state.size
    pairs = min(P // 2, max(1, int(math.floor(q_pair * P / 2))))
    if pairs == 0:
        return 0
    order = rng.permutation(P)[: 2 * pairs]
    a, b = order[:pairs], order[pairs:]
    mask = rng.random((pairs, env.dim)) < 0.5
    c1 = np.where(mask, state.X[a], state.X[b])
    c2 = np.where(mask, state.X[b], state.X[a])
    f = env.evaluate_batch(np.vstack([c1, c2]), allow_overshoot=True)
    _greedy_replace(state, a, c1, f[:pairs])
    _greedy_replace(state, b, c2, f[pairs:])
    return 2 * pairs


def op_pso_global_step(state, env, rng, w=0.7, c1=1.5, c2=1.5, v_max=0.2):
    if state.velocities is None:
        state.velocities = np.zeros_like(state.X)
        state.pbest_X = state.X.copy()
        state.pbest_f = state.fitness.copy()
    P, d = state.X.shape
    gbest = state.pbest_X[int(np.argmin(state.pbest_f))]
    r1, r2 = rng.random((P, d)), rng.random((P, d))
    vlim = v_max * env.range
    V = w * state.velocities + c1 * r1 * (state.pbest_X - state.X) + c2 * r2 * (gbest - state.X)
    state.velocities = np.clip(V, -vlim, vlim)
    state.X = env.clip(state.X + state.velocities)
    state.fitness = env.evaluate_batch(state.X, allow_overshoot=True)
    _sync_pbest(state, np.arange(P))
    return P


def op_gaussian_mutation_self(state, env, rng, sigma_self=0.1):
    cand = env.clip(state.X + sigma_self * env.range * rng.standard_normal(state.X.shape))
    f = env.evaluate_batch(cand, allow_overshoot=True)
    _greedy_replace(state, np.arange(state.size), cand, f)
    return state.size


def op_gaussian_mutation_best(state, env, rng, sigma_best=0.05, n_samp=None):
    n = state.size if n_samp is None else max(1, int(n_samp))
    best = state.X[state.best_index]
    cand = env.clip(best + sigma_best * env.range * rng.standard_normal((n, env.dim)))
    f = env.evaluate_batch(cand, allow_overshoot=True)
    for x, fx in zip(cand, f):
        worst = int(np.argmax(state.fitness))
        if fx < state.fitness[worst]:
            state.X[worst] = x
            state.fitness[worst] = fx
            _sync_pbest(state, [worst])
    return n


def op_restart_worst_fraction(state, env, rng, q_restart=0.2):
    n = min(state.size, int(math.ceil(q_restart * state.size)))
    if n == 0:
        return 0
    worst = np.argsort(state.fitness, kind="stable")[-n:]
    fresh = uniform_population(env, n, rng)
    state.X[worst] = fresh
    state.fitness[worst] = env.evaluate_batch(fresh, allow_overshoot=True)
    if state.velocities is not None:
        state.velocities[worst] = 0.0
        state.pbest_X[worst] = fresh
        state.pbest_f[worst] = state.fitness[worst]
    return n


def op_local_search_best_axis(state, env, rng, delta=0.01):
    b = state.best_index
    x, fx = state.X[b].copy(), float(state.fitness[b])
    limit = min(2 * env.dim, max(env.remaining, 0))
    step = delta * env.range
    used = 0
    for j in range(env.dim):
        if used >= limit:
            break
        accepted = False
        for sign in (1.0, -1.0):
            if used >= limit:
                break
            y = x.copy()
            y[j] = min(max(y[j] + sign * step[j], env.lower[j]), env.upper[j])
            fy = env.evaluate(y, allow_overshoot=True)
            used += 1
            if not accepted and fy < fx:
                xn, fn = y, fy
                accepted = True
        if accepted:
            x, fx = xn, fn
    if fx < state.fitness[b]:
        state.X[b] = x
        state.fitness[b] = fx
        _sync_pbest(state, [b])
    return used


@dataclass(frozen=True)
class OperatorSpec:
    fn: Callable
    defaults: Dict[str, float]
    greedy: bool


REGISTRY: Dict[str, OperatorSpec] = {
    "de_rand_1_bin": OperatorSpec(op_de_rand_1_bin, {"F": 0.7, "CR": 0.9}, True),
    "de_best_1_bin": OperatorSpec(op_de_best_1_bin, {"F": 0.7, "CR": 0.9}, True),
    "uniform_crossover_pairs": OperatorSpec(op_uniform_crossover_pairs, {"q_pair": 0.5}, True),
    "pso_global_step": OperatorSpec(
        op_pso_global_step, {"w": 0.7, "c1": 1.5, "c2": 1.5, "v_max": 0.2}, False),
    "gaussian_mutation_self": OperatorSpec(op_gaussian_mutation_self, {"sigma_self": 0.1}, True),
    "gaussian_mutation_best": OperatorSpec(
        op_gaussian_mutation_best, {"sigma_best": 0.05, "n_samp": None}, True),
    "restart_worst_fraction": OperatorSpec(op_restart_worst_fraction, {"q_restart": 0.2}, False),
    "local_search_best_axis": OperatorSpec(op_local_search_best_axis, {"delta": 0.01}, True),
}
TOKENS: Tuple[str, ...] = tuple(REGISTRY)


def default_theta(token: str) -> Dict[str, float]:
    return {k: v for k, v in REGISTRY[token].defaults.items() if v is not None}
DE_TOKENS = frozenset({"de_rand_1_bin", "de_best_1_bin"})


def apply_operator(token, theta, state, env, rng) -> Tuple[PopulationState, int]:
    """Apply one operator to a copy of ``state``; returns ``(new_state, fe_cost)``.

    Returns zero cost without touching the state once the environment budget
    is spent.
    """
    try:
        spec = REGISTRY[token]
    except KeyError:
        raise ValueError(f"unknown operator token {token!r}") from None
    new = state.copy()
    if env.remaining <= 0:
        return new, 0
    kwargs = {k: v for k, v in (theta or {}).items() if v is not None}
    unknown = set(kwargs) - set(spec.defaults)
    if unknown:
        raise ValueError(f"{token} has no hyperparameters {sorted(unknown)}")
    cost = spec.fn(new, env, rng, **kwargs)
    return new, int(cost)


def execute_program(env, S0, program, T_run, seed) -> RunTrace:
    """Run ``program`` cyclically from ``S0`` until ``T_run`` FEs are spent."""
    rng = np.random.default_rng(seed)
    state = S0.copy()
    used = 0
    H_best, H_fe = [state.best_fitness], [0]
    calls = program.calls if isinstance(program, OperatorProgram) else list(program)
    if not calls:
        return RunTrace(H_best, H_fe, state)
    i = 0
    while used < T_run:
        call = calls[i]
        i = (i + 1) % len(calls)
        state, cost = apply_operator(call.token, call.theta, state, env, rng)
        if cost == 0:
            # environment budget exhausted; nothing further can be evaluated
            break
        used += cost
        H_best.append(min(H_best[-1], state.best_fitness))
        H_fe.append(used)
    return RunTrace(H_best, H_fe, state)


# -- DE probe and standalone baselines ---------------------------------------


def design_phase(env, P=50, F=0.7, CR=0.9, T_design=None, rng=None):
    """Run DE/rand/1/bin for ``T_design`` FEs; returns ``(state, f_design_best)``.

    The evaluated points land in ``env``'s trajectory.
    """
    rng = np.random.default_rng(rng)
    T_design = env.budget if T_design is None else int(T_design)
    if T_design < P:
        raise ValueError(f"design budget {T_design} smaller than population {P}")
    start = env.evals_used
    X = uniform_population(env, P, rng)
    state = PopulationState(X, env.evaluate_batch(X, allow_overshoot=True))
    while env.evals_used - start < T_design:
        de_generation(state, env, rng, F, CR, base="rand")
    _, f = env.trajectory_arrays(start)
    return state, float(np.min(f))


def de_baseline(env, T=None, P=50, F=0.7, CR=0.9, seed=None) -> RunTrace:
    rng = np.random.default_rng(seed)
    T = env.budget if T is None else int(T)
    if T < P:
        raise ValueError(f"budget {T} smaller than population {P}")
    start = env.evals_used
    X = uniform_population(env, P, rng)
    state = PopulationState(X, env.evaluate_batch(X, allow_overshoot=True))
    H_best, H_fe = [state.best_fitness], [P]
    while env.evals_used - start < T:
        de_generation(state, env, rng, F, CR, base="rand")
        H_best.append(min(H_best[-1], state.best_fitness))
        H_fe.append(env.evals_used - start)
    return RunTrace(H_best, H_fe, state)


def inertia_weight(fe, T, w_start=0.9, w_end=0.4):
    """Linear inertia schedule over the FE budget."""
    return w_start + (w_end - w_start) * min(max(fe / T, 0.0), 1.0)


def pso_baseline(env, T=None, P=50, c1=2.0, c2=2.0, v_max=0.2, seed=None) -> RunTrace:
    rng = np.random.default_rng(seed)
    T = env.budget if T is None else int(T)
    if T < P:
        raise ValueError(f"budget {T} smaller than population {P}")
    start = env.evals_used
    X = uniform_population(env, P, rng)
    state = PopulationState(X, env.evaluate_batch(X, allow_overshoot=True),
                            velocities=np.zeros_like(X))
    state.pbest_X, state.pbest_f = X.copy(), state.fitness.copy()
    vlim = v_max * env.range
    H_best, H_fe = [state.best_fitness], [P]
    while (fe := env.evals_used - start) < T:
        w = inertia_weight(fe, T)
        gbest = state.pbest_X[int(np.argmin(state.pbest_f))]
        r1, r2 = rng.random(X.shape), rng.random(X.shape)
        V = (w * state.velocities + c1 * r1 * (state.pbest_X - state.X)
             + c2 * r2 * (gbest - state.X))
        state.velocities = np.clip(V, -vlim, vlim)
        state.X = env.clip(state.X + state.velocities)
        state.fitness = env.evaluate_batch(state.X, allow_overshoot=True)
        _sync_pbest(state, np.arange(P))
        H_best.append(min(H_best[-1], float(np.min(state.pbest_f))))
        H_fe.append(env.evals_used - start)
    return RunTrace(H_best, H_fe, state)
