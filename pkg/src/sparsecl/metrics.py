"""Continual-learning scores (OP, BWT, AP, forgetting), BLEU, ROUGE-L and correlations."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)


class ScoreMatrix:
    """Lower-triangular R[t, i]: score on task i after training task t (1-based)."""

    def __init__(self, rows=None):
        self._rows = []
        for row in rows or []:
            self.add_row(row)

    def add_row(self, scores):
        scores = [float(s) for s in scores]
        t = len(self._rows) + 1
        if len(scores) != t:
            raise ValueError(f"row {t} needs {t} scores, got {len(scores)}")
        if not all(math.isfinite(s) for s in scores):
            raise ValueError("scores must be finite")
        self._rows.append(scores)

    @property
    def n_tasks(self):
        return len(self._rows)

    def __getitem__(self, key):
        t, i = key
        if not 1 <= i <= t <= self.n_tasks:
            raise KeyError(f"R[{t},{i}] is not defined for {self.n_tasks} tasks")
        return self._rows[t - 1][i - 1]

    def row(self, t):
        if not 1 <= t <= self.n_tasks:
            raise ValueError(f"row {t} is incomplete or missing")
        return list(self._rows[t - 1])

    def to_list(self):
        return [list(r) for r in self._rows]

    @classmethod
    def from_list(cls, rows):
        return cls(rows)

    def __eq__(self, other):
        return isinstance(other, ScoreMatrix) and self._rows == other._rows


def _q(x):
    # the shortest decimal that round-trips to x; lossless, and 0.4 stays 2/5
    return Fraction(repr(float(x)))


def _mean(values, denom):
    return float(sum((_q(v) for v in values), Fraction(0)) / denom)


def op_metric(R, t):
    """(1/t) sum_i R[t, i].

    The score-matrix metrics sum the entries as exact rationals and round
    once, so hand fixtures such as (0.4 - 0.7) / 2 give -0.15, not
    -0.14999999999999997.
    """
    return _mean(R.row(t), t)


def bwt_metric(R, t, conventional=False):
    """Backward transfer with the 1/t normalization (1/(t-1) if ``conventional``)."""
    if t < 2:
        return 0.0
    R.row(t)
    total = sum((_q(R[t, i]) - _q(R[i, i]) for i in range(1, t)), Fraction(0))
    return float(total / ((t - 1) if conventional else t))


def ap_metric(R, t):
    return _mean([R[i, i] for i in range(1, t + 1)], t)


def forgetting_rate(R, i, t):
    if t <= i:
        raise ValueError(f"forgetting rate needs t > i (got i={i}, t={t})")
    return float(_q(R[i, i]) - _q(R[t, i]))


def mean_forgetting(R):
    """Average of R[i,i] - R[T,i] over i < T (0 for a single task)."""
    T = R.n_tasks
    if T < 2:
        return 0.0
    total = sum((_q(R[i, i]) - _q(R[T, i]) for i in range(1, T)), Fraction(0))
    return float(total / (T - 1))


def series(R):
    T = R.n_tasks
    return {
        "OP": [op_metric(R, t) for t in range(1, T + 1)],
        "BWT": [bwt_metric(R, t) for t in range(1, T + 1)],
        "AP": [ap_metric(R, t) for t in range(1, T + 1)],
    }


# --- text metrics -----------------------------------------------------------

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, N=4):
    """Sentence BLEU-N: clipped n-gram precisions, geometric mean, brevity penalty.

    No smoothing: any zero precision (including when the candidate is shorter
    than n) gives 0.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    candidate, reference = list(candidate), list(reference)
    c, r = len(candidate), len(reference)
    if c == 0:
        log.warning("bleu: empty candidate scores 0")
        return 0.0
    log_sum = 0.0
    for n in range(1, N + 1):
        cand = _ngrams(candidate, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        ref = _ngrams(reference, n)
        clipped = sum(min(cnt, ref[g]) for g, cnt in cand.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / N)


def lcs_length(x, y):
    x, y = list(x), list(y)
    prev = [0] * (len(y) + 1)
    for a in x:
        cur = [0]
        for j, b in enumerate(y):
            cur.append(prev[j] + 1 if a == b else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta=1.0):
    candidate, reference = list(candidate), list(reference)
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def text_score(candidate, reference, N=4):
    """Mean of ROUGE-L and BLEU on a 0-100 scale.

    BLEU order is capped at the reference length so an exact reproduction of
    a short reference scores 100.
    """
    n = max(1, min(N, len(reference)))
    return 100.0 * 0.5 * (rouge_l(candidate, reference) + bleu(candidate, reference, n))


# --- correlation ------------------------------------------------------------

@dataclass
class CorrelationReport:
    pearson_r: float | None
    pearson_p: float | None
    spearman_rho: float | None
    spearman_p: float | None
    n: int
    status: str = "ok"

    def to_dict(self):
        return asdict(self)


def rankdata(x):
    """Ranks starting at 1; ties share their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _t_pvalue(r, n):
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 2)))


def correlate(xs, ys):
    """Pearson and Spearman coefficients with two-sided t-distribution p-values.

    Zero variance in either series yields ``status="degenerate"`` and None
    for the undefined fields instead of NaN.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("correlate needs two 1-D series of equal length")
    n = x.size
    if n < 3:
        raise ValueError("correlate needs at least 3 points")
    r = _pearson(x, y)
    rho = _pearson(rankdata(x), rankdata(y))
    if r is None or rho is None:
        return CorrelationReport(r, None if r is None else _t_pvalue(r, n),
                                 rho, None if rho is None else _t_pvalue(rho, n), n, "degenerate")
    return CorrelationReport(r, _t_pvalue(r, n), rho, _t_pvalue(rho, n), n)
