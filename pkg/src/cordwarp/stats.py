"""Image similarity metrics and statistical comparison machinery.

Covers Pearson cross-correlation and mutual information inside a mask,
repeated-measures Tukey comparisons of per-subject metric tables, and
pairwise logistic modeling of expert rankings with per-rater intercepts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats as sps

from .errors import DegenerateData, DegenerateVariance, EmptyMask, InvalidSpec, NoRecords
from .volume import Mask, Volume, check_same_grid

__all__ = [
    "PairedSamples",
    "TukeyComparison",
    "RankingRecord",
    "PairwiseRankSummary",
    "cross_correlation",
    "mutual_information",
    "paired_tukey",
    "pairwise_rank_logistic",
]


@dataclass(frozen=True)
class PairedSamples:
    """Subjects x conditions metric table with named conditions."""

    values: np.ndarray
    conditions: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidSpec("values must be 2D (subjects x conditions)")
        if values.shape[0] < 2 or values.shape[1] < 2:
            raise InvalidSpec("need >= 2 subjects and >= 2 conditions")
        if values.shape[1] != len(self.conditions):
            raise InvalidSpec("condition names must match the value columns")
        if len(set(self.conditions)) != len(self.conditions):
            raise InvalidSpec("condition names must be unique")
        if not np.all(np.isfinite(values)):
            raise InvalidSpec("values must be finite (no missing cells)")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "conditions", tuple(self.conditions))

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_conditions(self) -> int:
        return self.values.shape[1]

    def column(self, condition: str) -> np.ndarray:
        return self.values[:, self.conditions.index(condition)]


@dataclass(frozen=True)
class TukeyComparison:
    condition: str
    baseline: str
    mean_diff: float
    q: float
    p_adjusted: float
    t_paired: float
    p_paired_t: float


@dataclass(frozen=True)
class RankingRecord:
    """One rater's full ranking of the methods for one subject.

    `ranking` lists method names from rank 1 (best) downward.
    """

    rater: str
    subject: str
    ranking: tuple[str, ...]

    def __post_init__(self):
        ranking = tuple(self.ranking)
        if len(set(ranking)) != len(ranking) or len(ranking) < 2:
            raise InvalidSpec("ranking must be a permutation of >= 2 methods")
        object.__setattr__(self, "ranking", ranking)

    def rank_of(self, method: str) -> int:
        return self.ranking.index(method) + 1


@dataclass(frozen=True)
class PairwiseRankSummary:
    method1: str
    method2: str
    wins1: int
    wins2: int
    log_odds: float
    p_value: float
    p_binomial: float
    fallback: bool


def cross_correlation(x: Volume, y: Volume, mask: Mask) -> float:
    """Pearson correlation of the two images over the masked voxels."""
    check_same_grid(x, y)
    check_same_grid(x, mask)
    a = x.data[mask.data]
    b = y.data[mask.data]
    if a.size < 2:
        raise DegenerateVariance("need >= 2 masked voxels")
    a = a - a.mean()
    b = b - b.mean()
    va = float((a * a).sum())
    vb = float((b * b).sum())
    if va == 0.0 or vb == 0.0:
        raise DegenerateVariance("an input is constant inside the mask")
    return float((a * b).sum() / math.sqrt(va * vb))


def _marginal_range(v: np.ndarray) -> tuple[float, float]:
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        hi = lo + 1.0  # constant image: everything lands in one bin
    return lo, hi


def mutual_information(x: Volume, y: Volume, mask: Mask, bins: int = 32) -> float:
    """Mutual information in nats from an equal-width joint histogram."""
    if bins < 2:
        raise InvalidSpec("bins must be >= 2")
    check_same_grid(x, y)
    check_same_grid(x, mask)
    if not mask.data.any():
        raise EmptyMask("mask has no voxels")
    a = x.data[mask.data]
    b = y.data[mask.data]
    joint, _, _ = np.histogram2d(a, b, bins=bins,
                                 range=[_marginal_range(a), _marginal_range(b)])
    p = joint / joint.sum()
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    outer = px[:, None] * py[None, :]
    return float((p[nz] * np.log(p[nz] / outer[nz])).sum())


def paired_tukey(samples: PairedSamples, baseline: str) -> list[TukeyComparison]:
    """Repeated-measures Tukey comparisons of every condition vs the baseline.

    The error term removes per-subject and per-condition means
    (df = (n-1)(k-1)); each comparison reports the studentized-range
    statistic with its adjusted p alongside the plain paired t-test.
    """
    if baseline not in samples.conditions:
        raise InvalidSpec(f"unknown baseline {baseline!r}")
    x = samples.values
    n, k = x.shape
    resid = x - x.mean(axis=1, keepdims=True) - x.mean(axis=0) + x.mean()
    df = (n - 1) * (k - 1)
    ms_error = float((resid ** 2).sum()) / df

    base = samples.column(baseline)
    out = []
    for cond in samples.conditions:
        if cond == baseline:
            continue
        d = samples.column(cond) - base
        mean_diff = float(d.mean())
        if ms_error <= 0.0:
            if mean_diff != 0.0:
                raise DegenerateData("zero within-subject error with nonzero difference")
            out.append(TukeyComparison(condition=cond, baseline=baseline,
                                       mean_diff=0.0, q=0.0, p_adjusted=1.0,
                                       t_paired=0.0, p_paired_t=1.0))
            continue
        q = abs(mean_diff) / math.sqrt(ms_error / n)
        p_adj = float(sps.studentized_range.sf(q, k, df))
        sd = float(d.std(ddof=1))
        if sd > 0:
            t = mean_diff / (sd / math.sqrt(n))
            p_t = 2.0 * float(sps.t.sf(abs(t), n - 1))
        else:
            t = 0.0 if mean_diff == 0.0 else math.inf * np.sign(mean_diff)
            p_t = 1.0 if mean_diff == 0.0 else 0.0
        out.append(TukeyComparison(condition=cond, baseline=baseline,
                                   mean_diff=mean_diff, q=q, p_adjusted=p_adj,
                                   t_paired=t, p_paired_t=p_t))
    return out


def _doubled_tail_binomial(wins1: int, wins2: int) -> float:
    n = wins1 + wins2
    k = max(wins1, wins2)
    p = 2.0 * float(sps.binom.sf(k - 1, n, 0.5))
    return min(p, 1.0)


def _logistic_fit(x: np.ndarray, y: np.ndarray):
    """IRLS logistic regression; returns (beta, covariance, fitted p)."""
    beta = np.zeros(x.shape[1])
    for _ in range(100):
        eta = x @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p)
        h = (x * w[:, None]).T @ x + 1e-10 * np.eye(x.shape[1])
        g = x.T @ (y - p)
        step = np.linalg.solve(h, g)
        beta = beta + step
        if np.abs(step).max() < 1e-10:
            break
    eta = x @ beta
    p = 1.0 / (1.0 + np.exp(-eta))
    w = p * (1.0 - p)
    h = (x * w[:, None]).T @ x + 1e-10 * np.eye(x.shape[1])
    return beta, np.linalg.inv(h), p


def pairwise_rank_logistic(records: list[RankingRecord]) -> list[PairwiseRankSummary]:
    """Per method pair: shared log-odds of being ranked better, with
    per-rater intercepts, Wald p-value, and an exact binomial fallback on
    separation."""
    if not records:
        raise NoRecords("no ranking records")
    methods = sorted(records[0].ranking)
    for rec in records:
        if sorted(rec.ranking) != methods:
            raise InvalidSpec("all records must rank the same method set")
    raters = sorted({rec.rater for rec in records})
    out = []
    for m1, m2 in combinations(methods, 2):
        y = np.array([1.0 if rec.rank_of(m1) < rec.rank_of(m2) else 0.0
                      for rec in records])
        wins1 = int(y.sum())
        wins2 = len(records) - wins1
        p_binom = _doubled_tail_binomial(wins1, wins2)
        # design: shared log-odds column + sum-coded rater intercepts
        ncol = 1 + max(len(raters) - 1, 0)
        x = np.zeros((len(records), ncol))
        x[:, 0] = 1.0
        for row, rec in enumerate(records):
            i = raters.index(rec.rater)
            if i < len(raters) - 1:
                x[row, 1 + i] = 1.0
            else:
                x[row, 1:] = -1.0
        beta, cov, fitted = _logistic_fit(x, y)
        separated = bool(np.any(fitted < 1e-6) or np.any(fitted > 1.0 - 1e-6))
        if separated:
            out.append(PairwiseRankSummary(
                method1=m1, method2=m2, wins1=wins1, wins2=wins2,
                log_odds=float(beta[0]), p_value=p_binom,
                p_binomial=p_binom, fallback=True))
            continue
        se = math.sqrt(cov[0, 0])
        z = beta[0] / se
        p_wald = 2.0 * float(sps.norm.sf(abs(z)))
        out.append(PairwiseRankSummary(
            method1=m1, method2=m2, wins1=wins1, wins2=wins2,
            log_odds=float(beta[0]), p_value=p_wald,
            p_binomial=p_binom, fallback=False))
    return out
