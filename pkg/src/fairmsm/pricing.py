"""Expected-present-value pricing on an annual grid.

Issue ages are floored to age last birthday; sums run over durations
``t = 0 .. terminal_age - issue_age`` and nothing is valued past the
terminal age. Lapses are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Policy, ProductSpec, RateModel, as_frame, ltci_product
from .errors import ModeModelMismatch, ValidationError
from .multistate import occupancy
from .pipeline import policies_to_frame

MODES = ("best_estimate", "blind", "fairness_adjusted")


@dataclass(frozen=True)
class PremiumQuote:
    individual_id: object
    issue_age: int
    sensitive: Optional[str]
    mode: str
    epv_benefits: float
    epv_premium_annuity: float
    lump_sum: float
    level_premium: Optional[float]


@dataclass
class EPVs:
    """Vectorised EPV components, one entry per insured."""

    annuity: np.ndarray
    benefits: np.ndarray
    death: np.ndarray

    @property
    def total_benefits(self) -> np.ndarray:
        return self.benefits + self.death


def _issue_ages(x) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=float) + 1e-9).astype(np.int64)


def price_components(model: RateModel, covariates, issue_ages, product: ProductSpec, sensitive=None) -> EPVs:
    """Annuity factor, state-contingent benefit EPV and death-benefit EPV."""
    spec = model.spec
    product.check_against(spec)
    x0 = _issue_ages(np.atleast_1d(issue_ages))
    sens = sensitive if model.uses_sensitive else None
    occ = occupancy(model, as_frame(covariates), x0, sens, product.initial_state, product.terminal_age)
    n, L, _ = occ.shape
    t = np.arange(L)
    horizon = product.terminal_age - x0
    alive = t[None, :] <= horizon[:, None]
    disc = product.discount ** t

    def in_states(states):
        cols = [spec.state_index(s) for s in states]
        return occ[:, :, cols].sum(axis=2) if cols else np.zeros((n, L))

    annuity = np.sum(np.where(alive, disc * in_states(product.premium_states), 0.0), axis=1)
    sched = np.array([product.benefit_schedule(int(k)) for k in t], dtype=float)
    benefits = np.sum(np.where(alive, disc * sched * in_states(product.benefit_states), 0.0), axis=1)
    death = np.zeros(n)
    if product.death_benefit is not None:
        dead = occ[:, :, spec.state_index(product.death_state)]
        inc = dead[:, 1:] - dead[:, :-1]
        valid = t[None, :-1] < horizon[:, None]
        death = product.death_benefit * np.sum(np.where(valid, product.discount ** (t[:-1] + 1) * inc, 0.0), axis=1)
    return EPVs(annuity, benefits, death)


def _single(model, z, x_u, product, s):
    return price_components(model, as_frame(z), [x_u], product, None if s is None else [s])


def epv_premium_annuity(model: RateModel, z, x_u: float, product: ProductSpec, s: Optional[str] = None) -> float:
    """EPV of a unit annual premium payable in advance while in a premium state."""
    return float(_single(model, z, x_u, product, s).annuity[0])


def epv_benefits(model: RateModel, z, x_u: float, product: ProductSpec, s: Optional[str] = None) -> float:
    """EPV of ``B_t`` payable at each duration ``t`` spent in a benefit state."""
    return float(_single(model, z, x_u, product, s).benefits[0])


def epv_death_benefit(model: RateModel, z, x_u: float, product: ProductSpec, s: Optional[str] = None) -> float:
    if product.death_benefit is None:
        raise ValidationError("product has no death benefit")
    return float(_single(model, z, x_u, product, s).death[0])


def lump_sum_ltci(model: RateModel, z, x_u: float, s: Optional[str] = None,
                  discount: float = 1 / 1.03, terminal_age: int = 110) -> float:
    """Single premium for $1 a year while disabled, issued to a healthy life."""
    return epv_benefits(model, z, x_u, ltci_product(discount, terminal_age), s)


def check_mode(mode: str, model: RateModel) -> None:
    if mode not in MODES:
        raise ValidationError(f"unknown pricing mode {mode!r}; expected one of {MODES}")
    if mode == "best_estimate" and not model.uses_sensitive:
        raise ModeModelMismatch("best_estimate pricing needs a model that uses the sensitive attribute")
    if mode != "best_estimate" and model.uses_sensitive:
        raise ModeModelMismatch(f"{mode} pricing must not use the sensitive attribute")


def quote_batch(policies: Sequence[Policy], models: Mapping[str, RateModel], product: ProductSpec,
                modes: Optional[Sequence[str]] = None, issue_age: Optional[float] = None) -> list:
    """Quotes for every policy under every requested mode.

    ``issue_age`` overrides each policy's own age, which is how premiums at a
    common age ``x*`` are produced for parity checks.
    """
    modes = list(models) if modes is None else list(modes)
    for mode in modes:
        if mode not in models:
            raise ModeModelMismatch(f"no model supplied for mode {mode!r}")
        check_mode(mode, models[mode])
    frame = policies_to_frame(policies)
    ages = _issue_ages([p.issue_age if issue_age is None else issue_age for p in policies])
    sens = [p.sensitive for p in policies]
    out = []
    for mode in modes:
        model = models[mode]
        epv = price_components(model, frame, ages, product, sens)
        for k, p in enumerate(policies):
            ann = float(epv.annuity[k])
            ben = float(epv.total_benefits[k])
            level = ben / ann if ann > 0 else None
            out.append(PremiumQuote(p.individual_id, int(ages[k]), p.sensitive, mode, ben, ann, ben, level))
    return out


def quote(policy: Policy, models: Mapping[str, RateModel], product: ProductSpec,
          modes: Optional[Sequence[str]] = None) -> list:
    return quote_batch([policy], models, product, modes)
