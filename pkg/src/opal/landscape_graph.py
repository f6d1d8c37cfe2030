"""Trajectory graph: six node features per sampled point plus a k-NN adjacency."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

EPS = 1e-12
M_MAX = 300
FEATURES = ("f_z", "r_norm", "d_best", "t_norm", "df_loc", "d_feat")
STRATEGIES = ("time_uniform", "random", "fitness_stratified", "mixed")


@dataclass
class TrajectoryGraph:
    H: np.ndarray
    A: np.ndarray
    selected_indices: np.ndarray
    points: np.ndarray
    k_eff: int = 0
    strategy: str = "mixed"

    @property
    def n_nodes(self) -> int:
        return self.H.shape[0]


def _time_uniform(M, n):
    if n <= 0:
        return np.empty(0, dtype=int)
    if n == 1:
        return np.array([0])
    # floor(x + 0.5) keeps the rounded grid strictly increasing for step >= 1
    return np.floor(np.linspace(0.0, M - 1, n) + 0.5).astype(int)


def _fitness_stratified(fitness, n, rng, n_bins=10):
    M = len(fitness)
    order = np.argsort(fitness, kind="stable")
    bins = [b for b in np.array_split(order, min(n_bins, M)) if b.size]
    quota = np.full(len(bins), n // len(bins))
    quota[: n % len(bins)] += 1
    sizes = np.array([b.size for b in bins])
    short = np.minimum(quota, sizes)
    spare = n - short.sum()
    # hand the shortfall of small bins to the others, round-robin
    while spare > 0:
        moved = False
        for i in range(len(bins)):
            if spare and short[i] < sizes[i]:
                short[i] += 1
                spare -= 1
                moved = True
        if not moved:
            break
    picks = [rng.choice(b, size=q, replace=False) for b, q in zip(bins, short) if q]
    return np.concatenate(picks) if picks else np.empty(0, dtype=int)


def subsample(M, M_max=M_MAX, strategy="mixed", fitness=None, rng=None):
    """Sorted unique trajectory indices, ``min(M, M_max)`` of them."""
    if M < 1:
        raise ValueError("trajectory must contain at least one point")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown subsampling strategy {strategy!r}")
    rng = np.random.default_rng(rng)
    if M <= M_max:
        return np.arange(M)
    if strategy in ("fitness_stratified", "mixed") and fitness is None:
        raise ValueError(f"{strategy} sampling needs the fitness vector")
    if strategy == "time_uniform":
        idx = _time_uniform(M, M_max)
    elif strategy == "random":
        idx = rng.choice(M, size=M_max, replace=False)
    elif strategy == "fitness_stratified":
        idx = _fitness_stratified(np.asarray(fitness), M_max, rng)
    else:
        half = M_max // 2
        idx = np.union1d(_time_uniform(M, half),
                         _fitness_stratified(np.asarray(fitness), M_max - half, rng))
        if idx.size > M_max:
            idx = rng.choice(idx, size=M_max, replace=False)
        elif idx.size < M_max:
            # duplicates between the halves: top up from unused indices
            rest = np.setdiff1d(np.arange(M), idx)
            idx = np.concatenate([idx, rng.choice(rest, size=M_max - idx.size, replace=False)])
    return np.unique(idx)


def _standardize(v):
    c = v - v.mean()
    # second pass removes the rounding residue left by the first; without it a
    # constant vector of large magnitude standardizes to +-1 instead of 0
    c -= c.mean()
    return c / (c.std() + EPS)


def node_features(points, fitness, original_indices, M, d) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    f = np.asarray(fitness, dtype=float)
    t = np.asarray(original_indices)
    N = f.size
    if N < 1:
        raise ValueError("need at least one node")
    H = np.empty((N, 6))
    H[:, 0] = _standardize(f)
    rank = np.empty(N)
    rank[np.argsort(f, kind="stable")] = np.arange(N)
    H[:, 1] = rank / max(N - 1, 1)
    best = points[int(np.argmin(f))]
    H[:, 2] = np.sqrt(np.sum((points - best) ** 2, axis=1))
    H[:, 3] = t / (M - 1) if M > 1 else 0.0
    by_time = np.argsort(t, kind="stable")
    df = np.zeros(N)
    df[by_time[1:]] = f[by_time[:-1]] - f[by_time[1:]]
    H[:, 4] = _standardize(df)
    H[:, 5] = math.log(d + 1)
    return H


def knn_adjacency(points, k=10) -> np.ndarray:
    """Symmetric binary k-NN adjacency with self-loops."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    N = points.shape[0]
    k_eff = min(k, N - 1)
    A = np.zeros((N, N))
    if k_eff > 0:
        D = cdist(points, points)
        np.fill_diagonal(D, np.inf)
        nbrs = np.argsort(D, axis=1, kind="stable")[:, :k_eff]
        A[np.repeat(np.arange(N), k_eff), nbrs.ravel()] = 1.0
        A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1.0)
    return A


def build_graph(points, fitness, d=None, M_max=M_MAX, k=10, strategy="mixed",
                identity_adjacency=False, rng=None) -> TrajectoryGraph:
    """Subsample a trajectory, compute node features and the k-NN adjacency.

    ``identity_adjacency`` replaces A by the identity (graph-free ablation).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fitness = np.asarray(fitness, dtype=float)
    M = fitness.size
    if M == 0:
        raise ValueError("empty trajectory")
    d = points.shape[1] if d is None else d
    idx = subsample(M, M_max, strategy, fitness, rng)
    P, f = points[idx], fitness[idx]
    H = node_features(P, f, idx, M, d)
    N = idx.size
    A = np.eye(N) if identity_adjacency else knn_adjacency(P, k)
    return TrajectoryGraph(H, A, idx, P, k_eff=min(k, N - 1), strategy=strategy)


def graph_from_env(env, start=0, stop=None, **kwargs) -> TrajectoryGraph:
    X, f = env.trajectory_arrays(start, stop)
    return build_graph(X, f, env.dim, **kwargs)
