"""Nonparametric comparison of optimisers over many problems and seeds.

Ranks with average ties, Friedman chi-square, exact/normal Wilcoxon
signed-rank, Holm step-down adjustment, W/T/L counts and operator usage.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .operators import DE_TOKENS, TOKENS

EXACT_MAX_M = 12


@dataclass(frozen=True)
class RunRecord:
    algorithm: str
    function: str
    dim: int
    seed: int
    final_best: float
    trace_path: Optional[str] = None


RECORD_FIELDS = ("algorithm", "function", "dim", "seed", "final_best")


def write_records(path, records: Iterable[RunRecord], append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append or fh.tell() == 0:
            w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.algorithm, r.function, r.dim, r.seed, repr(float(r.final_best))])


def read_records(path) -> List[RunRecord]:
    with open(path, newline="") as fh:
        return [RunRecord(row["algorithm"], row["function"], int(row["dim"]), int(row["seed"]),
                          float(row["final_best"])) for row in csv.DictReader(fh)]


# -- summaries and ranks --------------------------------------------------------


@dataclass(frozen=True)
class CellSummary:
    median: float
    mean: float
    std: float
    n: int


def summarize(records: Sequence[RunRecord]) -> Dict[tuple, CellSummary]:
    """Median/mean/std of final values per (algorithm, function, dim)."""
    cells = defaultdict(list)
    for r in records:
        cells[(r.algorithm, r.function, r.dim)].append(r.final_best)
    if not cells:
        raise ValueError("no records to summarise")
    out = {}
    for key, vals in cells.items():
        v = np.asarray(vals, dtype=float)
        out[key] = CellSummary(float(np.median(v)), float(v.mean()), float(v.std()), v.size)
    return out


def rankdata(values) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_matrix(records, algorithms=None):
    """Problems x algorithms ranks of median final values (smaller is better).

    Returns ``(R, problems, algorithms)`` where problems are (function, dim).
    """
    summ = summarize(records)
    algorithms = sorted({k[0] for k in summ}) if algorithms is None else list(algorithms)
    problems = sorted({(k[1], k[2]) for k in summ}, key=lambda p: (p[1], p[0]))
    R = np.empty((len(problems), len(algorithms)))
    for i, (fn, d) in enumerate(problems):
        try:
            med = [summ[(a, fn, d)].median for a in algorithms]
        except KeyError as exc:
            raise ValueError(f"missing cell {exc.args[0]}") from None
        R[i] = rankdata(med)
    return R, problems, algorithms


# -- chi-square tail via the regularised incomplete gamma ------------------------


def _gammainc_lower_series(a, x):
    term = 1.0 / a
    total = term
    n = 0
    while abs(term) > abs(total) * 1e-16 and n < 10_000:
        n += 1
        term *= x / (a + n)
        total += term
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammainc_upper_cf(a, x):
    # modified Lentz continued fraction
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a, x) -> float:
    """Regularised upper incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gammainc_lower_series(a, x)
    return _gammainc_upper_cf(a, x)


def chi2_sf(x, df) -> float:
    return gammaincc(0.5 * df, 0.5 * x)


def normal_sf(z) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


# -- Friedman ------------------------------------------------------------------


def friedman(R):
    """Friedman chi-square and p-value from an n x k rank matrix."""
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] < 2 or R.shape[1] < 2:
        raise ValueError(f"need at least 2 problems and 2 algorithms, got shape {R.shape}")
    n, k = R.shape
    mean_ranks = R.mean(axis=0)
    stat = 12.0 * n / (k * (k + 1)) * float(np.sum(mean_ranks ** 2)) - 3.0 * n * (k + 1)
    stat = max(stat, 0.0)
    return stat, chi2_sf(stat, k - 1)


# -- Wilcoxon signed-rank --------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of signed ranks of a - b; flips sign when a, b swap
    pvalue: float
    w_plus: float
    w_minus: float
    n_used: int
    method: str
    tie: bool = False


def _wilcoxon_parts(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.ndim != 1:
        raise ValueError("paired samples must be 1-D")
    d = d[d != 0.0]
    r = rankdata(np.abs(d))
    return d, r


def wilcoxon_exact_p(ranks, w_plus) -> float:
    """Two-sided p by enumerating all sign assignments of ``ranks``."""
    ranks = np.asarray(ranks, dtype=float)
    m = ranks.size
    mean = ranks.sum() / 2.0
    dev = abs(w_plus - mean)
    signs = np.array(list(itertools.product((0.0, 1.0), repeat=m)))
    W = signs @ ranks
    return float(np.mean(np.abs(W - mean) >= dev - 1e-9))


def wilcoxon_normal_p(ranks, w_plus) -> float:
    """Two-sided p from the normal approximation with tie and continuity corrections."""
    ranks = np.asarray(ranks, dtype=float)
    m = ranks.size
    mean = m * (m + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = m * (m + 1) * (2 * m + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, 2.0 * normal_sf(z))


def wilcoxon_signed_rank(a, b, method="auto") -> WilcoxonResult:
    """Paired two-sided Wilcoxon test; zero differences are dropped."""
    if len(a) != len(b) or len(a) < 1:
        raise ValueError("need two paired samples of equal, nonzero length")
    d, r = _wilcoxon_parts(a, b)
    m = d.size
    if m == 0:
        return WilcoxonResult(0.0, 1.0, 0.0, 0.0, 0, "none", tie=True)
    w_plus = float(r[d > 0].sum())
    w_minus = float(r[d < 0].sum())
    if method == "auto":
        method = "exact" if m <= EXACT_MAX_M else "normal"
    if method == "exact":
        p = wilcoxon_exact_p(r, w_plus)
    elif method == "normal":
        p = wilcoxon_normal_p(r, w_plus)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w_plus - w_minus, p, w_plus, w_minus, m, method)


# -- Holm -------------------------------------------------------------------------


def holm_adjust(pvalues) -> List[float]:
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("need a non-empty list of p-values")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adj_sorted = np.maximum.accumulate(np.minimum(1.0, (m - np.arange(m)) * p[order]))
    out = np.empty(m)
    out[order] = adj_sorted
    return out.tolist()


# -- W/T/L ------------------------------------------------------------------------


@dataclass
class WTL:
    win: int = 0
    tie: int = 0
    loss: int = 0

    @property
    def total(self):
        return self.win + self.tie + self.loss

    def __str__(self):
        return f"{self.win}/{self.tie}/{self.loss}"


def _paired_finals(records):
    cells = defaultdict(dict)
    for r in records:
        cell = cells[(r.algorithm, r.function, r.dim)]
        if r.seed in cell:
            raise ValueError(f"duplicate seed {r.seed} for {r.algorithm} {r.function} d={r.dim}")
        cell[r.seed] = r.final_best
    return cells


def wtl(records, reference, alpha=0.05, by_dim=False):
    """Per-opponent Win/Tie/Loss of ``reference`` from paired Wilcoxon tests.

    Returns ``{opponent: WTL}``, or ``{(opponent, dim): WTL}`` with ``by_dim``.
    """
    cells = _paired_finals(records)
    algorithms = sorted({k[0] for k in cells})
    if reference not in algorithms:
        raise ValueError(f"reference algorithm {reference!r} not in records")
    problems = sorted({(k[1], k[2]) for k in cells if k[0] == reference}, key=lambda p: (p[1], p[0]))
    out = {}
    for opp in algorithms:
        if opp == reference:
            continue
        for fn, d in problems:
            ref, other = cells[(reference, fn, d)], cells.get((opp, fn, d))
            if other is None or set(ref) != set(other):
                raise ValueError(f"seeds of {reference} and {opp} misaligned on {fn} d={d}")
            seeds = sorted(ref)
            a = np.array([ref[s] for s in seeds])
            b = np.array([other[s] for s in seeds])
            res = wilcoxon_signed_rank(a, b)
            key = (opp, d) if by_dim else opp
            tally = out.setdefault(key, WTL())
            if res.pvalue < alpha and np.median(a) < np.median(b):
                tally.win += 1
            elif res.pvalue < alpha and np.median(a) > np.median(b):
                tally.loss += 1
            else:
                tally.tie += 1
    return out


def pairwise_holm(records, reference):
    """Holm-adjusted p of reference vs each opponent over per-problem medians."""
    summ = summarize(records)
    algorithms = sorted({k[0] for k in summ})
    problems = sorted({(k[1], k[2]) for k in summ}, key=lambda p: (p[1], p[0]))
    opps = [a for a in algorithms if a != reference]
    raw = []
    for opp in opps:
        a = [summ[(reference, fn, d)].median for fn, d in problems]
        b = [summ[(opp, fn, d)].median for fn, d in problems]
        raw.append(wilcoxon_signed_rank(a, b).pvalue)
    adj = holm_adjust(raw) if raw else []
    return {o: (r, q) for o, r, q in zip(opps, raw, adj)}


# -- operator usage ----------------------------------------------------------------


@dataclass
class UsageReport:
    families: List[str]
    tokens: List[str]
    frequencies: np.ndarray
    unique_programs: int
    non_de_fraction: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["family"] + self.tokens)
        for fam, row in zip(self.families, self.frequencies):
            w.writerow([fam] + [f"{x:.6g}" for x in row])
        return buf.getvalue()


def operator_usage(logs) -> UsageReport:
    """Token frequencies per landscape family from ``(family, tokens)`` pairs."""
    logs = [(fam, tuple(toks)) for fam, toks in logs]
    if not logs:
        raise ValueError("no program logs")
    counts = defaultdict(Counter)
    for fam, toks in logs:
        counts[fam].update(toks)
    families = sorted(counts)
    freq = np.zeros((len(families), len(TOKENS)))
    for i, fam in enumerate(families):
        total = sum(counts[fam].values())
        for j, tok in enumerate(TOKENS):
            freq[i, j] = counts[fam][tok] / total if total else 0.0
    all_tokens = [t for _, toks in logs for t in toks]
    non_de = sum(t not in DE_TOKENS for t in all_tokens) / len(all_tokens) if all_tokens else 0.0
    return UsageReport(families, list(TOKENS), freq, len({toks for _, toks in logs}), non_de)


# -- report ------------------------------------------------------------------------


def comparison_report(records, reference=None, alpha=0.05):
    """Rank table, Friedman test, Holm table and W/T/L as CSV strings + text summary."""
    R, problems, algorithms = rank_matrix(records)
    avg = R.mean(axis=0)
    out = {}
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["algorithm", "avg_rank"])
    for a, r in sorted(zip(algorithms, avg), key=lambda t: t[1]):
        w.writerow([a, f"{r:.4f}"])
    out["ranks.csv"] = buf.getvalue()
    lines = [f"problems: {len(problems)}  algorithms: {len(algorithms)}"]
    if len(problems) >= 2 and len(algorithms) >= 2:
        stat, p = friedman(R)
        lines.append(f"Friedman chi2={stat:.3f} p={p:.4g}")
    reference = reference if reference is not None else algorithms[int(np.argmin(avg))]
    holm = pairwise_holm(records, reference) if len(problems) >= 1 else {}
    table = wtl(records, reference, alpha)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["algorithm", "avg_rank", "raw_p", "holm_p", "wtl"])
    for a, r in zip(algorithms, avg):
        if a == reference:
            w.writerow([a, f"{r:.4f}", "", "", ""])
        else:
            raw, adj = holm[a]
            w.writerow([a, f"{r:.4f}", f"{raw:.4g}", f"{adj:.4g}", str(table[a])])
    out["holm.csv"] = buf.getvalue()
    by_dim = wtl(records, reference, alpha, by_dim=True)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["opponent", "dim", "win", "tie", "loss"])
    for (opp, d), t in sorted(by_dim.items()):
        w.writerow([opp, d, t.win, t.tie, t.loss])
    out["wtl.csv"] = buf.getvalue()
    lines.append(f"reference: {reference}")
    for a, r in sorted(zip(algorithms, avg), key=lambda t: t[1]):
        extra = "" if a == reference else f"  holm_p={holm[a][1]:.4g}  W/T/L={table[a]}"
        lines.append(f"  {a:<20s} avg_rank={r:.3f}{extra}")
    out["summary.txt"] = "\n".join(lines) + "\n"
    return out
