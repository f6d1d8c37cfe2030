"""Budget-accounted black-box environments and the training task generator.

Every objective here is vectorised: it takes an ``(n, d)`` array and returns
an ``(n,)`` array of values. Single points are handled by the environment.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], np.ndarray]

FAMILIES = (
    "sphere",
    "rastrigin",
    "ackley",
    "rosenbrock",
    "hybrid_blend",
    "composition_blend",
    "nn_landscape",
)
LABELS = ("unimodal", "simple_multimodal", "hybrid", "composition")
FAMILY_LABEL = {
    "sphere": "unimodal",
    "rosenbrock": "unimodal",
    "rastrigin": "simple_multimodal",
    "ackley": "simple_multimodal",
    "hybrid_blend": "hybrid",
    "composition_blend": "composition",
    "nn_landscape": "simple_multimodal",
}
DOMAIN = (-100.0, 100.0)
NONFINITE_VALUE = 1e100

# Coordinate shrink applied before the base function so each one shows its
# characteristic structure on [-100, 100]^d (CEC convention).
_SHRINK = {"sphere": 1.0, "rastrigin": 5.12 / 100.0, "ackley": 1.0, "rosenbrock": 2.048 / 100.0}


class BudgetExhausted(RuntimeError):
    """Raised when an evaluation is requested past the FE budget."""


# -- analytic base functions -------------------------------------------------


def sphere(X):
    X = np.atleast_2d(X)
    return np.sum(X * X, axis=1)


def rastrigin(X):
    X = np.atleast_2d(X)
    return 10.0 * X.shape[1] + np.sum(X * X - 10.0 * np.cos(2.0 * np.pi * X), axis=1)


def ackley(X):
    X = np.atleast_2d(X)
    d = X.shape[1]
    a = -20.0 * np.exp(-0.2 * np.sqrt(np.sum(X * X, axis=1) / d))
    b = -np.exp(np.sum(np.cos(2.0 * np.pi * X), axis=1) / d)
    return a + b + 20.0 + math.e


def rosenbrock(X):
    X = np.atleast_2d(X)
    return np.sum(100.0 * (X[:, 1:] - X[:, :-1] ** 2) ** 2 + (1.0 - X[:, :-1]) ** 2, axis=1)


_BASE = {"sphere": sphere, "rastrigin": rastrigin, "ackley": ackley, "rosenbrock": rosenbrock}


def _centered(name: str) -> Objective:
    """Base function with its optimum moved to the origin, value 0, after shrink."""
    fn = _BASE[name]
    shrink = _SHRINK[name]
    if name == "rosenbrock":
        return lambda Z: fn(shrink * Z + 1.0)
    return lambda Z: fn(shrink * Z)


class HybridBlend:
    """Disjoint variable groups, each scored by a different base function."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim < 2:
            raise ValueError("hybrid_blend needs dim >= 2")
        names = rng.choice(list(_BASE), size=2, replace=False)
        perm = rng.permutation(dim)
        cut = max(1, min(dim - 1, int(round(0.5 * dim))))
        self.names = [str(n) for n in names]
        self.groups = [perm[:cut], perm[cut:]]
        self._parts = [_centered(n) for n in self.names]

    def __call__(self, Z):
        Z = np.atleast_2d(Z)
        out = np.zeros(Z.shape[0])
        for idx, part in zip(self.groups, self._parts):
            out += part(Z[:, idx])
        return out


class CompositionBlend:
    """Minimum over three shifted, scaled base-function copies plus bias.

    Component 0 sits at the origin with bias 0, so the global optimum is 0 at 0.
    """

    biases = (0.0, 100.0, 200.0)

    def __init__(self, dim: int, rng: np.random.Generator):
        names = rng.choice(list(_BASE), size=3, replace=True)
        if dim < 2:
            names = np.where(names == "rosenbrock", "sphere", names)
        self.names = [str(n) for n in names]
        self.offsets = np.vstack([np.zeros(dim), rng.uniform(-60.0, 60.0, size=(2, dim))])
        self.scales = rng.uniform(0.5, 2.0, size=3)
        self._parts = [_centered(n) for n in self.names]

    def __call__(self, Z):
        Z = np.atleast_2d(Z)
        vals = [
            s * part(Z - o) + b
            for part, o, s, b in zip(self._parts, self.offsets, self.scales, self.biases)
        ]
        return np.min(np.vstack(vals), axis=0)


class NNLandscape:
    """Random two-hidden-layer tanh network turned into a minimisation target.

    The value is ``amp * (net(u) - net(0))**2 + |u|^2`` with ``u = z / 25``;
    the level set of the network carves multiple valleys while the small
    quadratic keeps a unique global minimum 0 at the origin.
    """

    def __init__(self, dim: int, rng: np.random.Generator, width: int = 16):
        self.W1 = rng.normal(0.0, 1.5 / math.sqrt(dim), size=(dim, width))
        self.b1 = rng.normal(0.0, 0.5, size=width)
        self.W2 = rng.normal(0.0, 1.5 / math.sqrt(width), size=(width, width))
        self.b2 = rng.normal(0.0, 0.5, size=width)
        self.w3 = rng.normal(0.0, 1.0 / math.sqrt(width), size=width)
        self.amp = 100.0
        self._ref = float(self._net(np.zeros((1, dim)))[0])

    def _net(self, U):
        return np.tanh(np.tanh(U @ self.W1 + self.b1) @ self.W2 + self.b2) @ self.w3

    def __call__(self, Z):
        U = np.atleast_2d(Z) / 25.0
        return self.amp * (self._net(U) - self._ref) ** 2 + np.sum(U * U, axis=1)


def make_function(family: str, dim: int, rng: Optional[np.random.Generator] = None) -> Objective:
    """Return the base objective for ``family``.

    Analytic families are the textbook forms (Rosenbrock optimum at all-ones).
    Composite and network families draw their structure from ``rng``.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if dim < 1 or (family in ("rosenbrock", "hybrid_blend") and dim < 2):
        raise ValueError(f"dim={dim} too small for {family}")
    if family in _BASE:
        return _BASE[family]
    rng = np.random.default_rng(0) if rng is None else rng
    if family == "hybrid_blend":
        return HybridBlend(dim, rng)
    if family == "composition_blend":
        return CompositionBlend(dim, rng)
    return NNLandscape(dim, rng)


# -- environment -------------------------------------------------------------


class Environment:
    """Bounded objective with FE counting and trajectory recording."""

    def __init__(
        self,
        objective: Objective,
        lower,
        upper,
        budget: int,
        noise_sigma: float = 0.0,
        known_shift: Optional[float] = None,
        seed: Optional[int] = None,
    ):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bounds must be 1-D vectors of equal length")
        if not np.all(self.lower < self.upper):
            raise ValueError("lower bound must be strictly below upper bound")
        if budget < 1:
            raise ValueError("budget must be positive")
        self.dim = self.lower.size
        self.budget = int(budget)
        self.objective = objective
        self.noise_sigma = float(noise_sigma)
        self.known_shift = known_shift
        self.rng = np.random.default_rng(seed)
        self.evals_used = 0
        self.nonfinite_count = 0
        self._X = np.empty((max(64, min(budget, 1 << 16)), self.dim))
        self._f = np.empty(self._X.shape[0])

    @property
    def range(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def remaining(self) -> int:
        return self.budget - self.evals_used

    def clip(self, X):
        return np.clip(X, self.lower, self.upper)

    def evaluate(self, x, allow_overshoot: bool = False) -> float:
        return float(self.evaluate_batch(np.asarray(x, dtype=float)[None, :], allow_overshoot)[0])

    def evaluate_batch(self, X, allow_overshoot: bool = False) -> np.ndarray:
        """Evaluate each row of ``X``; one FE per row."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        if X.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {X.shape[1]}")
        if not allow_overshoot and self.evals_used + n > self.budget:
            raise BudgetExhausted(
                f"{n} evaluations requested with {self.remaining} of {self.budget} left"
            )
        f = np.asarray(self.objective(X), dtype=float).reshape(n)
        if self.noise_sigma > 0.0:
            f = f + self.noise_sigma * self.rng.standard_normal(n)
        bad = ~np.isfinite(f)
        if bad.any():
            self.nonfinite_count += int(bad.sum())
            log.warning("objective returned %d non-finite values", int(bad.sum()))
            f = np.where(bad, NONFINITE_VALUE, f)
        self._record(X, f)
        return f

    def _record(self, X, f):
        n = X.shape[0]
        need = self.evals_used + n
        if need > self._X.shape[0]:
            cap = max(need, 2 * self._X.shape[0])
            self._X = np.resize(self._X, (cap, self.dim))
            self._f = np.resize(self._f, cap)
        self._X[self.evals_used:need] = X
        self._f[self.evals_used:need] = f
        self.evals_used = need

    def trajectory_arrays(self, start: int = 0, stop: Optional[int] = None):
        """(points, fitness) copies of the recorded trajectory slice."""
        stop = self.evals_used if stop is None else stop
        return self._X[start:stop].copy(), self._f[start:stop].copy()

    @property
    def trajectory(self):
        return [(self._X[i].copy(), float(self._f[i])) for i in range(self.evals_used)]

    def error(self, f: float) -> float:
        """Distance of ``f`` above the known optimum value, when one is known."""
        return f - self.known_shift if self.known_shift is not None else f


# -- task generation ---------------------------------------------------------


@dataclass(frozen=True)
class TaskPool:
    families: tuple
    dims: tuple = (10, 30, 50)
    noise_prob: float = 0.3
    budget_per_dim: int = 1000


POOLS = {
    "mixed": TaskPool(families=FAMILIES),
    # CEC-like: shifted/rotated analytic and composite landscapes, noise-free
    "restricted": TaskPool(families=FAMILIES[:6], noise_prob=0.0),
}


@dataclass
class TaskSpec:
    family: str
    dim: int
    seed: int
    noisy: bool
    budget: int
    rotation: np.ndarray = field(repr=False)
    shift: np.ndarray = field(repr=False)
    noise_sigma: float = 0.0
    bias: float = 0.0

    @property
    def landscape_label(self) -> str:
        return FAMILY_LABEL[self.family]

    @property
    def label_index(self) -> int:
        return LABELS.index(self.landscape_label)

    def to_record(self) -> str:
        return (
            f"family={self.family} dim={self.dim} seed={self.seed} "
            f"noisy={int(self.noisy)} noise={self.noise_sigma!r} "
            f"label={self.landscape_label} budget={self.budget}"
        )

    @classmethod
    def from_record(cls, record: str) -> "TaskSpec":
        kv = dict(tok.split("=", 1) for tok in record.split())
        spec = build_task(kv["family"], int(kv["dim"]), int(kv["seed"]),
                          noisy=bool(int(kv["noisy"])), budget=int(kv["budget"]))
        if spec.landscape_label != kv["label"]:
            raise ValueError("record label disagrees with family")
        return spec


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormalise a Gaussian matrix (QR with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


class ShiftedRotated:
    """``x -> base(R (x - shift)) + bias``; keeps the base's optimum at ``shift``."""

    def __init__(self, base: Objective, rotation: np.ndarray, shift: np.ndarray, bias: float):
        self.base = base
        self.rotation = rotation
        self.shift = shift
        self.bias = bias

    def __call__(self, X):
        Z = (np.atleast_2d(X) - self.shift) @ self.rotation.T
        return self.base(Z) + self.bias


def _task_objective(family: str, dim: int, rng: np.random.Generator) -> Objective:
    if family in _BASE:
        return _centered(family)
    return make_function(family, dim, rng)


def build_task(family: str, dim: int, seed: int, noisy: bool = False, budget: Optional[int] = None):
    """Deterministically rebuild a task from its record fields."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    rng = np.random.default_rng(seed)
    rotation = random_rotation(dim, rng)
    shift = rng.uniform(-80.0, 80.0, size=dim)
    bias = 100.0 * float(rng.integers(1, 31))
    base = _task_objective(family, dim, rng)
    objective = ShiftedRotated(base, rotation, shift, bias)
    noise_sigma = 0.0
    if noisy:
        probe = rng.uniform(DOMAIN[0], DOMAIN[1], size=(64, dim))
        vals = objective(probe)
        noise_sigma = 0.01 * abs(float(np.max(vals) - np.min(vals)))
    spec = TaskSpec(
        family=family, dim=dim, seed=int(seed), noisy=noisy,
        budget=int(budget if budget is not None else 1000 * dim),
        rotation=rotation, shift=shift, noise_sigma=noise_sigma, bias=bias,
    )
    spec._objective = objective
    return spec


def make_environment(spec: TaskSpec, env_seed: Optional[int] = None) -> Environment:
    objective = getattr(spec, "_objective", None)
    if objective is None:
        objective = build_task(spec.family, spec.dim, spec.seed, spec.noisy, spec.budget)._objective
    lo, hi = DOMAIN
    return Environment(
        objective, np.full(spec.dim, lo), np.full(spec.dim, hi), spec.budget,
        noise_sigma=spec.noise_sigma, known_shift=spec.bias,
        seed=spec.seed if env_seed is None else env_seed,
    )


def sample_task(rng: np.random.Generator, pool: Union[str, TaskPool] = "mixed"):
    """Draw a task from ``pool`` and return ``(TaskSpec, Environment)``."""
    if isinstance(pool, str):
        try:
            pool = POOLS[pool]
        except KeyError:
            raise ValueError(f"unknown task pool {pool!r}") from None
    family = str(pool.families[rng.integers(len(pool.families))])
    dim = int(pool.dims[rng.integers(len(pool.dims))])
    seed = int(rng.integers(2**31 - 1))
    noisy = bool(rng.random() < pool.noise_prob)
    spec = build_task(family, dim, seed, noisy=noisy, budget=pool.budget_per_dim * dim)
    return spec, make_environment(spec)


def pool_from_families(families: Sequence[str], dims: Sequence[int] = (10,), noise_prob: float = 0.0):
    for fam in families:
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam!r}")
    return TaskPool(families=tuple(families), dims=tuple(dims), noise_prob=noise_prob)
