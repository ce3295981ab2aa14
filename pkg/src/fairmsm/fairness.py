"""Post-processing and pre-processing fairness adjustments, plus parity metrics.

The in-processing (adversarial) adjustment lives in
:mod:`fairmsm.adversarial`.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
from collections import Counter
from dataclasses import dataclass
from numbers import Real
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import Policy, RateModel, as_frame
from .errors import EmptySample, InsufficientGroups, LevelMismatch, NonContinuous, ValidationError


@dataclass(frozen=True)
class SensitiveDistribution:
    levels: tuple
    weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.levels) != len(self.weights) or len(set(self.levels)) != len(self.levels):
            raise ValidationError("levels and weights must align and levels must be unique")
        if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, abs_tol=1e-12):
            raise ValidationError(f"weights must be non-negative and sum to 1, got {self.weights}")

    def as_dict(self) -> dict:
        return dict(zip(self.levels, self.weights))


def policy_level_distribution(policies: Sequence[Policy]) -> SensitiveDistribution:
    """Empirical distribution of the sensitive attribute over policies.

    Counting is per insured, never per exposure row: the number of rows an
    insured contributes depends only on their realised trajectory.
    """
    if not policies:
        raise EmptySample("at least one policy is required")
    counts = Counter(p.sensitive for p in policies)
    if None in counts:
        raise ValidationError("every policy needs a sensitive attribute")
    levels = tuple(sorted(counts))
    n = len(policies)
    return SensitiveDistribution(levels, tuple(counts[lv] / n for lv in levels))


class DiscriminationFreeModel(RateModel):
    """Rates ``lambda*_m(z, x) = sum_s w(s) lambda_m(z, x, s)``.

    The sensitive argument of :meth:`log_rates` is accepted and ignored, so
    the result is a function of ``(z, x)`` only.
    """

    uses_sensitive = False

    def __init__(self, model: RateModel, dist: SensitiveDistribution):
        if not model.uses_sensitive:
            raise ValidationError("discrimination-free rates need a model fitted with the sensitive attribute")
        if set(dist.levels) != set(model.sensitive_levels):
            raise LevelMismatch(f"distribution levels {dist.levels} differ from model levels {model.sensitive_levels}")
        self.base = model
        self.dist = dist
        self.spec = model.spec

    def log_rates(self, covariates, ages, sensitive=None) -> np.ndarray:
        cov = as_frame(covariates)
        n = len(np.atleast_1d(ages))
        total = 0.0
        for level, w in zip(self.dist.levels, self.dist.weights):
            if w == 0.0:
                continue
            total = total + w * np.exp(self.base.log_rates(cov, ages, [level] * n))
        with np.errstate(divide="ignore"):
            return np.log(total)


def discrimination_free_rate(model: RateModel, m: int, z, x: float, dist: SensitiveDistribution) -> float:
    return DiscriminationFreeModel(model, dist).predict_rate(m, z, x)


# --- optimal-transport pre-processing ----------------------------------------

def _is_continuous(values) -> bool:
    return all(isinstance(v, Real) and not isinstance(v, bool) for v in values)


def _pooled_quantile(sorted_pooled: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Piecewise-linear quantile with plotting positions ``(i + 0.5) / N``."""
    N = len(sorted_pooled)
    pos = np.clip(u * N - 0.5, 0.0, N - 1)
    return np.interp(pos, np.arange(N), sorted_pooled)


def quantile_transport(values, groups) -> np.ndarray:
    """Map each group's values onto the pooled marginal by rank.

    Within a group a value with mid-rank ``r`` (ties averaged) goes to the
    pooled quantile at ``(r - 0.5) / n_group``; this is the monotone
    (optimal, in one dimension) transport to the pooled distribution.
    """
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups, dtype=object)
    pooled = np.sort(values)
    out = np.empty_like(values)
    for g in sorted(set(groups)):
        idx = np.flatnonzero(groups == g)
        u = (stats.rankdata(values[idx], method="average") - 0.5) / len(idx)
        out[idx] = _pooled_quantile(pooled, u)
    return out


def ot_preprocess(policies: Sequence[Policy], covariates: Sequence[str]) -> list:
    """Transport the listed continuous covariates so each group's marginal matches the pooled one.

    Issue ages, the sensitive attribute and unlisted covariates are left
    untouched. Only per-coordinate marginal equality is achieved.
    """
    if not policies:
        raise EmptySample("no policies to transform")
    groups = [p.sensitive for p in policies]
    if any(g is None for g in groups):
        raise ValidationError("every policy needs a sensitive attribute")
    new_cols = {}
    for name in covariates:
        vals = [p.covariates[name] for p in policies]
        if not _is_continuous(vals):
            raise NonContinuous(f"covariate {name!r} is not continuous")
        new_cols[name] = quantile_transport(vals, groups)
    out = []
    for k, p in enumerate(policies):
        cov = dict(p.covariates)
        for name, col in new_cols.items():
            cov[name] = float(col[k])
        out.append(dataclasses.replace(p, covariates=cov))
    return out


# --- parity metrics ----------------------------------------------------------

def ks_distance(a, b) -> float:
    return float(stats.ks_2samp(np.asarray(a, float), np.asarray(b, float)).statistic)


def ks_to_pooled(values, groups) -> dict:
    """KS distance between each group's values and the pooled sample."""
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups, dtype=object)
    return {g: ks_distance(values[groups == g], values) for g in sorted(set(groups))}


@dataclass
class ParityReport:
    gap: float
    means: dict
    counts: dict
    ks: dict  # (level_a, level_b) -> KS distance
    age: Optional[int] = None

    @property
    def max_ks(self) -> float:
        return max(self.ks.values())


def demographic_parity_gap(quotes, age: Optional[int] = None) -> ParityReport:
    """Largest difference of mean premium between any two groups.

    All quotes must share one issue age (pass ``age`` to assert which).
    Pairwise KS distances of the premium distributions are also reported.
    """
    ages = {q.issue_age for q in quotes}
    if age is not None and ages - {age}:
        raise ValidationError(f"quotes have issue ages {sorted(ages)}, expected {age}")
    if len(ages) > 1:
        raise ValidationError(f"quotes must share one issue age, got {sorted(ages)}")
    by_group: dict = {}
    for q in quotes:
        by_group.setdefault(q.sensitive, []).append(q.lump_sum)
    if len(by_group) < 2:
        raise InsufficientGroups("need at least two sensitive levels")
    levels = sorted(by_group)
    means = {g: float(np.mean(by_group[g])) for g in levels}
    gap = max(abs(means[a] - means[b]) for a, b in itertools.combinations(levels, 2))
    ks = {(a, b): ks_distance(by_group[a], by_group[b]) for a, b in itertools.combinations(levels, 2)}
    return ParityReport(gap, means, {g: len(by_group[g]) for g in levels}, ks, next(iter(ages)) if ages else age)
