"""Graph encoder, phase heads, landscape head and program decoding.

The encoder is a stack of mean-aggregation message-passing layers
``H' = relu(D^-1 A H W + b)`` followed by mean pooling over nodes. Three
linear heads on the pooled embedding give one categorical distribution over
operator tokens per program phase; a one-hidden-layer head predicts the
coarse landscape class.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .autodiff import NonFiniteError, Tensor
from .env_tasks import LABELS
from .operators import TOKENS, OperatorProgram

N_PHASES = 3
CHECKPOINT_FORMAT = "opal-policy"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    in_dim: int = 6
    hidden: int = 64
    layers: int = 3
    n_ops: int = len(TOKENS)
    n_phases: int = N_PHASES
    n_classes: int = len(LABELS)
    hidden_aux: int = 32

    def layout(self):
        """Ordered ``(name, shape)`` for every parameter block."""
        out = []
        fan_in = self.in_dim
        for i in range(self.layers):
            out += [(f"gnn{i}.W", (fan_in, self.hidden)), (f"gnn{i}.b", (self.hidden,))]
            fan_in = self.hidden
        for p in range(self.n_phases):
            out += [(f"phase{p}.W", (self.hidden, self.n_ops)), (f"phase{p}.b", (self.n_ops,))]
        out += [("aux.W1", (self.hidden, self.hidden_aux)), ("aux.b1", (self.hidden_aux,)),
                ("aux.W2", (self.hidden_aux, self.n_classes)), ("aux.b2", (self.n_classes,))]
        return out

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.layout())


class PolicyParams:
    """All weights in one flat vector, with named structured views into it."""

    def __init__(self, arch: Architecture, flat: Optional[np.ndarray] = None):
        self.arch = arch
        n = arch.n_params
        self.flat = np.zeros(n) if flat is None else np.array(flat, dtype=float)
        if self.flat.shape != (n,):
            raise ValueError(f"expected {n} parameters for {arch}, got {self.flat.size}")
        self.views: Dict[str, np.ndarray] = {}
        self.slices: Dict[str, slice] = {}
        pos = 0
        for name, shape in arch.layout():
            size = math.prod(shape)
            self.slices[name] = slice(pos, pos + size)
            self.views[name] = self.flat[pos:pos + size].reshape(shape)
            pos += size

    @classmethod
    def initialize(cls, arch: Architecture = Architecture(), seed: int = 0) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        params = cls(arch)
        for name, shape in arch.layout():
            # phase heads start at zero: a uniform initial policy regardless of
            # the embedding scale (distance features are in domain units)
            if len(shape) == 2 and not name.startswith("phase"):
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                params.views[name][...] = rng.uniform(-bound, bound, size=shape)
        return params

    def __getitem__(self, name):
        return self.views[name]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, self.flat.copy())

    def structured(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.views.items()}

    @classmethod
    def from_structured(cls, arch: Architecture, blocks: Dict[str, np.ndarray]) -> "PolicyParams":
        params = cls(arch)
        for name, shape in arch.layout():
            params.views[name][...] = np.asarray(blocks[name]).reshape(shape)
        return params


@dataclass
class PolicyOutput:
    program: OperatorProgram
    choices: List[int]
    log_prob: float
    entropy: float
    z: np.ndarray
    aux_logits: np.ndarray
    probs: np.ndarray = field(repr=False)

    @property
    def tokens(self) -> List[str]:
        return self.program.tokens


# -- forward pass on tensors --------------------------------------------------


def _leaves(params: PolicyParams) -> Dict[str, Tensor]:
    return {name: Tensor(v, name=name) for name, v in params.views.items()}


def _mean_adjacency(A):
    A = np.asarray(A, dtype=float)
    deg = A.sum(axis=1, keepdims=True)
    if np.any(deg <= 0):
        raise ValueError("every node needs at least one neighbour (add self-loops)")
    return A / deg


def _encode(H, A, leaves, arch):
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[1] != arch.in_dim:
        raise ValueError(f"node features must be N x {arch.in_dim}, got {H.shape}")
    if np.shape(A) != (H.shape[0], H.shape[0]):
        raise ValueError(f"adjacency shape {np.shape(A)} does not match {H.shape[0]} nodes")
    A_mean = Tensor(_mean_adjacency(A))
    x = Tensor(H)
    for i in range(arch.layers):
        x = (A_mean @ (x @ leaves[f"gnn{i}.W"]) + leaves[f"gnn{i}.b"]).relu()
        x.named(f"gnn{i}.out")
    return x.mean(axis=0).named("z")


def _phase_logits(z, leaves, arch):
    return [(z @ leaves[f"phase{p}.W"] + leaves[f"phase{p}.b"]).named(f"phase{p}.logits")
            for p in range(arch.n_phases)]


def _aux_logits(z, leaves):
    hidden = (z @ leaves["aux.W1"] + leaves["aux.b1"]).relu()
    return (hidden @ leaves["aux.W2"] + leaves["aux.b2"]).named("aux.logits")


# -- public inference API ------------------------------------------------------


def gnn_forward(H, A, params: PolicyParams) -> np.ndarray:
    return _encode(H, A, _leaves(params), params.arch).data.copy()


def softmax(logits):
    x = np.asarray(logits, dtype=float)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def phase_logits(z, params: PolicyParams):
    """Per-phase logits ``(n_phases, n_ops)`` and their softmax distributions."""
    leaves = _leaves(params)
    logits = np.vstack([t.data for t in _phase_logits(Tensor(z), leaves, params.arch)])
    return logits, softmax(logits)


def aux_forward(z, params: PolicyParams) -> np.ndarray:
    return _aux_logits(Tensor(z), _leaves(params)).data.copy()


def categorical_entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def decode(z, params: PolicyParams, mode="sample", rng=None) -> PolicyOutput:
    """Pick one token per phase, by sampling or by per-phase argmax."""
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown decode mode {mode!r}")
    logits, probs = phase_logits(z, params)
    log_probs = logits - logits.max(axis=1, keepdims=True)
    log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=1, keepdims=True))
    if mode == "greedy":
        choices = [int(np.argmax(row)) for row in logits]
    else:
        rng = np.random.default_rng(rng)
        choices = []
        for row in probs:
            cdf = np.cumsum(row)
            choices.append(int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"),
                                   row.size - 1)))
    log_prob = float(sum(log_probs[p, c] for p, c in enumerate(choices)))
    entropy = float(sum(categorical_entropy(row) for row in probs))
    program = OperatorProgram.from_tokens([TOKENS[c] for c in choices])
    return PolicyOutput(program, choices, log_prob, entropy, np.asarray(z, dtype=float),
                        aux_forward(z, params), probs)


def policy_forward(H, A, params: PolicyParams, mode="greedy", rng=None) -> PolicyOutput:
    return decode(gnn_forward(H, A, params), params, mode, rng)


# -- training loss -------------------------------------------------------------


def loss_and_gradient(H, A, choices, advantage, label, beta, lam_aux, params: PolicyParams):
    """Scalar REINFORCE loss and its gradient w.r.t. the flat parameter vector.

    ``loss = -advantage * log p(choices) - beta * entropy + lam_aux * CE(aux, label)``.
    The sampled ``choices`` are held fixed; the aux term is skipped when
    ``label`` is None or ``lam_aux`` is 0.
    """
    if not np.isfinite(advantage):
        raise NonFiniteError("advantage")
    if isinstance(choices, PolicyOutput):
        choices = choices.choices
    arch = params.arch
    leaves = _leaves(params)
    z = _encode(H, A, leaves, arch).check_finite()
    log_prob = None
    entropy = None
    for p, logits in enumerate(_phase_logits(z, leaves, arch)):
        ls = logits.check_finite().log_softmax().named(f"phase{p}.log_softmax")
        lp = ls[int(choices[p])]
        ent = -(ls.exp() * ls).sum()
        log_prob = lp if log_prob is None else log_prob + lp
        entropy = ent if entropy is None else entropy + ent
    loss = log_prob * (-float(advantage)) - entropy * float(beta)
    if label is not None and lam_aux != 0.0:
        aux_ls = _aux_logits(z, leaves).check_finite().log_softmax()
        loss = loss + aux_ls[int(label)] * (-float(lam_aux))
    loss.named("loss").check_finite()
    loss.backward()
    grad = np.zeros_like(params.flat)
    for name, t in leaves.items():
        if t.grad is not None:
            grad[params.slices[name]] = t.grad.ravel()
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("gradient")
    return float(loss.data), grad


def aux_cross_entropy(aux_logits, label) -> float:
    x = np.asarray(aux_logits, dtype=float)
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()) - x[int(label)])


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: PolicyParams, seed=0, episode=0, metadata=None, optimizer=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "h": params.arch.hidden, "L": params.arch.layers, "n_ops": params.arch.n_ops,
            "C": params.arch.n_classes, "hidden_a": params.arch.hidden_aux,
            "in_dim": params.arch.in_dim, "n_phases": params.arch.n_phases,
        },
        "n_params": params.arch.n_params,
        "params": params.flat.tolist(),
        "seed": int(seed),
        "episode": int(episode),
        "metadata": metadata or {},
    }
    if optimizer is not None:
        doc["optimizer"] = optimizer
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(params, doc)``; raises ValueError on a malformed or mismatched file."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} policy checkpoint")
    a = doc["architecture"]
    arch = Architecture(in_dim=a["in_dim"], hidden=a["h"], layers=a["L"], n_ops=a["n_ops"],
                        n_phases=a["n_phases"], n_classes=a["C"], hidden_aux=a["hidden_a"])
    if arch.n_ops != len(TOKENS) or arch.n_classes != len(LABELS):
        raise ValueError(f"{path}: architecture does not match the operator/label vocabulary")
    if len(doc["params"]) != arch.n_params or doc.get("n_params", arch.n_params) != arch.n_params:
        raise ValueError(
            f"{path}: {len(doc['params'])} parameters stored, architecture needs {arch.n_params}")
    return PolicyParams(arch, np.asarray(doc["params"], dtype=float)), doc
