"""Domain types shared across the package.

Transitions are numbered from 1 in the order they are listed in a
:class:`TransitionSpec`, so ``m = 1`` is the first ``(from, to)`` pair.
Ages follow the age-last-birthday convention throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateTransition,
    IllegalTransition,
    SelfLoop,
    UnknownState,
    ValidationError,
)

CENSORED = "censored"
DEFAULT_TERMINAL_AGE = 110


@dataclass(frozen=True)
class TransitionSpec:
    """State graph of a multi-state model.

    Parameters
    ----------
    states : sequence of str
        Ordered state labels; the order fixes rows/columns of generator
        and probability matrices.
    transitions : sequence of (str, str)
        Allowed moves, indexed ``m = 1..M`` in the given order.
    """

    states: tuple
    transitions: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "transitions", tuple(tuple(t) for t in self.transitions))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    @property
    def absorbing(self) -> frozenset:
        sources = {a for a, _ in self.transitions}
        return frozenset(s for s in self.states if s not in sources)

    def state_index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise UnknownState(f"unknown state {state!r}") from None

    def transition_id(self, from_state: str, to_state: str) -> int:
        try:
            return self.transitions.index((from_state, to_state)) + 1
        except ValueError:
            raise IllegalTransition(
                f"transition {from_state!r} -> {to_state!r} is not allowed"
            ) from None

    def live_transitions(self, state: str) -> list:
        """Transition ids (1-based) that can occur from ``state``."""
        return [m for m, (a, _) in enumerate(self.transitions, start=1) if a == state]

    def label(self, m: int) -> str:
        a, b = self.transitions[m - 1]
        return f"{a}->{b}"


def validate_transition_spec(spec: TransitionSpec) -> None:
    """Raise if ``spec`` violates any structural invariant, else return None."""
    if len(set(spec.states)) != len(spec.states):
        raise ValidationError(f"duplicate state labels in {spec.states}")
    seen = set()
    for a, b in spec.transitions:
        for s in (a, b):
            if s not in spec.states:
                raise UnknownState(f"transition ({a!r}, {b!r}) names unknown state {s!r}")
        if a == b:
            raise SelfLoop(f"self-loop transition ({a!r}, {b!r})")
        if (a, b) in seen:
            raise DuplicateTransition(f"duplicate transition ({a!r}, {b!r})")
        seen.add((a, b))


def two_state_spec() -> TransitionSpec:
    """Alive/Dead model used for life insurance."""
    return TransitionSpec(("Alive", "Dead"), [("Alive", "Dead")])


def three_state_spec() -> TransitionSpec:
    """Healthy/Disabled/Dead model with recovery.

    Transition numbering: 1 H->F, 2 F->H, 3 H->D, 4 F->D.
    """
    return TransitionSpec(
        ("Healthy", "Disabled", "Dead"),
        [
            ("Healthy", "Disabled"),
            ("Disabled", "Healthy"),
            ("Healthy", "Dead"),
            ("Disabled", "Dead"),
        ],
    )


@dataclass(frozen=True)
class Sojourn:
    state: str
    start_age: float
    end_age: float


@dataclass(frozen=True)
class Trajectory:
    """Observed path of one individual.

    ``terminal_state`` is the state entered at the end of the last sojourn,
    or :data:`CENSORED` if observation stopped without a transition.
    """

    individual_id: object
    sojourns: tuple
    terminal_state: str = CENSORED

    def __post_init__(self):
        object.__setattr__(
            self, "sojourns", tuple(s if isinstance(s, Sojourn) else Sojourn(*s) for s in self.sojourns)
        )

    def moves(self):
        """Yield ``(from_state, to_state, age)`` for every observed transition."""
        for cur, nxt in zip(self.sojourns, self.sojourns[1:]):
            yield cur.state, nxt.state, cur.end_age
        if self.sojourns and self.terminal_state != CENSORED:
            last = self.sojourns[-1]
            yield last.state, self.terminal_state, last.end_age

    def state_at(self, age: float) -> Optional[str]:
        """State occupied at ``age`` (None before entry or after censoring)."""
        if not self.sojourns or age < self.sojourns[0].start_age:
            return None
        for soj in self.sojourns:
            if soj.start_age <= age < soj.end_age:
                return soj.state
        if self.terminal_state != CENSORED and age >= self.sojourns[-1].end_age:
            return self.terminal_state
        return None


def validate_trajectory(traj: Trajectory, spec: TransitionSpec) -> None:
    prev = None
    for soj in traj.sojourns:
        spec.state_index(soj.state)
        if not soj.start_age < soj.end_age:
            raise ValidationError(
                f"individual {traj.individual_id}: sojourn in {soj.state} has "
                f"start {soj.start_age} >= end {soj.end_age}"
            )
        if prev is not None and not math.isclose(prev.end_age, soj.start_age, abs_tol=1e-9):
            raise ValidationError(f"individual {traj.individual_id}: sojourns are not contiguous")
        prev = soj
    if traj.terminal_state != CENSORED:
        spec.state_index(traj.terminal_state)
    for a, b, _ in traj.moves():
        spec.transition_id(a, b)


@dataclass(frozen=True)
class Policy:
    """One insured: static covariates, issue age and sensitive attribute.

    Covariate values are floats for continuous covariates and strings for
    categorical ones.
    """

    individual_id: object
    covariates: Mapping = field(default_factory=dict)
    issue_age: float = 0.0
    sensitive: Optional[str] = None

    def __post_init__(self):
        if self.issue_age < 0:
            raise ValidationError(f"issue age must be non-negative, got {self.issue_age}")


@dataclass(frozen=True, slots=True)
class ExposureRow:
    """One Poisson observation: transition ``m`` at integer age ``age``.

    ``start_age``/``end_age`` are kept so that splitting is idempotent and
    age-split rows can be listed with their exact start and end ages.
    """

    individual_id: object
    transition: int
    age: int
    event: int
    exposure: float
    covariates: Optional[Mapping] = None
    sensitive: Optional[str] = None
    start_age: Optional[float] = None
    end_age: Optional[float] = None


def _unit_benefit(t: int) -> float:
    return 1.0


@dataclass(frozen=True)
class ProductSpec:
    """Cash-flow definition of a long-term product (annual time steps)."""

    premium_states: frozenset
    benefit_states: frozenset
    benefit_schedule: Callable[[int], float] = _unit_benefit
    death_benefit: Optional[float] = None
    discount: float = 1 / 1.03
    terminal_age: int = DEFAULT_TERMINAL_AGE
    initial_state: str = "Healthy"
    death_state: str = "Dead"

    def __post_init__(self):
        object.__setattr__(self, "premium_states", frozenset(self.premium_states))
        object.__setattr__(self, "benefit_states", frozenset(self.benefit_states))
        if not 0 < self.discount <= 1:
            raise ValidationError(f"discount factor must lie in (0, 1], got {self.discount}")
        if self.terminal_age <= 0:
            raise ValidationError("terminal_age must be positive")

    def check_against(self, spec: TransitionSpec) -> None:
        for s in (*self.premium_states, *self.benefit_states, self.initial_state):
            spec.state_index(s)


def ltci_product(discount: float = 1 / 1.03, terminal_age: int = DEFAULT_TERMINAL_AGE) -> ProductSpec:
    """Lump-sum LTCI: $1 per year spent disabled, issued to a healthy life."""
    return ProductSpec(
        premium_states={"Healthy"},
        benefit_states={"Disabled"},
        discount=discount,
        terminal_age=terminal_age,
        initial_state="Healthy",
    )


def as_frame(covariates) -> pd.DataFrame:
    """Coerce a covariate mapping, list of mappings or DataFrame to a DataFrame."""
    if isinstance(covariates, pd.DataFrame):
        return covariates
    if isinstance(covariates, Mapping):
        return pd.DataFrame([dict(covariates)])
    return pd.DataFrame([dict(c) for c in covariates])


class RateModel:
    """Per-transition log-intensity predictor ``ln lambda_m = f_m(z, x[, s])``.

    Subclasses implement :meth:`log_rates`, which is vectorised over rows.
    """

    spec: TransitionSpec
    uses_sensitive: bool = False
    sensitive_levels: tuple = ()

    def log_rates(self, covariates: pd.DataFrame, ages, sensitive=None) -> np.ndarray:
        """Return an ``(n, M)`` array of log intensities."""
        raise NotImplementedError

    def rates(self, covariates, ages, sensitive=None) -> np.ndarray:
        return np.exp(self.log_rates(as_frame(covariates), ages, sensitive))

    def predict_rate(self, m: int, z, x: float, s: Optional[str] = None) -> float:
        """Intensity of transition ``m`` for one insured at age ``x``."""
        sens = None if s is None else [s]
        return float(self.rates(as_frame(z), np.array([x], dtype=float), sens)[0, m - 1])


def repeat_rows(frame: pd.DataFrame, counts: Sequence[int]) -> pd.DataFrame:
    idx = np.repeat(np.arange(len(frame)), counts)
    return frame.iloc[idx].reset_index(drop=True)
