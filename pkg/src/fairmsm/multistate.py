"""Generators, transition probabilities and trajectory simulation.

Rates are piecewise constant over each integer age, so the one-year
transition matrix at age ``x`` is ``expm(Q(x))`` and multi-year matrices are
ordered products of one-year matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .core import CENSORED, RateModel, Sojourn, TransitionSpec, Trajectory, as_frame, repeat_rows
from .errors import NumericalOverflow, ValidationError

MAX_GENERATOR_NORM = 1e6


@dataclass(frozen=True)
class GeneratorMatrix:
    Q: np.ndarray
    age: int
    states: tuple

    def __post_init__(self):
        Q = self.Q
        off = Q - np.diag(np.diag(Q))
        if np.any(off < 0):
            raise ValidationError("generator has negative off-diagonal entries")
        if np.max(np.abs(Q.sum(axis=1)), initial=0.0) > 1e-12 * max(1.0, np.abs(Q).max(initial=0.0)):
            raise ValidationError("generator rows do not sum to zero")


@dataclass(frozen=True)
class ProbabilityMatrix:
    P: np.ndarray
    from_age: float
    to_age: float
    states: tuple

    def prob(self, from_state: str, to_state: str) -> float:
        return float(self.P[self.states.index(from_state), self.states.index(to_state)])

    def records(self):
        """Rows ``(from_state, to_state, from_age, to_age, prob)`` for CSV export."""
        for i, a in enumerate(self.states):
            for j, b in enumerate(self.states):
                yield a, b, self.from_age, self.to_age, float(self.P[i, j])


def generators(spec: TransitionSpec, log_rates: np.ndarray) -> np.ndarray:
    """Stack of generators ``(n, S, S)`` from an ``(n, M)`` log-rate array."""
    lam = np.exp(np.atleast_2d(log_rates))
    n = lam.shape[0]
    S = spec.n_states
    Q = np.zeros((n, S, S))
    for m, (a, b) in enumerate(spec.transitions):
        Q[:, spec.state_index(a), spec.state_index(b)] = lam[:, m]
    idx = np.arange(S)
    Q[:, idx, idx] = -Q.sum(axis=2)
    return Q


def build_generator(model: RateModel, z, x: int, s: Optional[str] = None) -> GeneratorMatrix:
    sens = None if s is None else [s]
    Q = generators(model.spec, model.log_rates(as_frame(z), np.array([x], dtype=float), sens))[0]
    return GeneratorMatrix(Q, int(x), model.spec.states)


def expm_generators(Q: np.ndarray) -> np.ndarray:
    """Matrix exponential of one or many generators, cleaned to be stochastic.

    Tiny negative entries from rounding are clipped and rows renormalised
    when their sums drift by more than 1e-12.
    """
    Q = np.asarray(Q, dtype=float)
    norms = np.abs(Q).sum(axis=-1).max(axis=-1)
    if np.any(~np.isfinite(norms)) or np.any(norms > MAX_GENERATOR_NORM):
        raise NumericalOverflow(f"generator norm exceeds {MAX_GENERATOR_NORM:g}")
    P = linalg.expm(Q)
    P = np.clip(P, 0.0, 1.0)
    sums = P.sum(axis=-1, keepdims=True)
    drift = np.abs(sums - 1.0) > 1e-12
    if np.any(drift):
        P = np.where(drift, P / sums, P)
    return P


def one_year_probs(G: GeneratorMatrix) -> ProbabilityMatrix:
    return ProbabilityMatrix(expm_generators(G.Q), G.age, G.age + 1, G.states)


def _one_year_stack(model: RateModel, z, ages, s=None) -> np.ndarray:
    ages = np.asarray(ages, dtype=float)
    frame = repeat_rows(as_frame(z), [len(ages)])
    sens = None if s is None else [s] * len(ages)
    return expm_generators(generators(model.spec, model.log_rates(frame, ages, sens)))


def multi_year_probs(model: RateModel, z, from_age: int, to_age: int, s: Optional[str] = None) -> ProbabilityMatrix:
    """Chapman-Kolmogorov product of one-year matrices from ``from_age`` to ``to_age``."""
    if to_age < from_age:
        raise ValidationError(f"to_age {to_age} precedes from_age {from_age}")
    S = model.spec.n_states
    P = np.eye(S)
    if to_age > from_age:
        for Pk in _one_year_stack(model, z, np.arange(from_age, to_age), s):
            P = P @ Pk
    return ProbabilityMatrix(P, from_age, to_age, model.spec.states)


def occupancy(model: RateModel, covariates: pd.DataFrame, issue_ages, sensitive=None,
              initial_state: str = "Healthy", terminal_age: int = 110) -> np.ndarray:
    """State-occupancy probabilities at integer durations for many insureds.

    Returns an array ``(n, L, S)`` where ``L = terminal_age - min(issue_age) + 1``
    and entry ``[k, t]`` is the distribution of the state at age
    ``issue_age[k] + t``. Durations beyond ``terminal_age - issue_age[k]``
    are zero-filled.
    """
    spec = model.spec
    covariates = as_frame(covariates)
    x0 = np.asarray(issue_ages, dtype=np.int64)
    n = len(x0)
    if np.any(x0 > terminal_age):
        raise ValidationError("issue age beyond terminal age")
    steps = terminal_age - x0  # number of one-year transitions per insured
    L = int(steps.max(initial=0)) + 1
    S = spec.n_states
    out = np.zeros((n, L, S))
    out[:, 0, spec.state_index(initial_state)] = 1.0
    if L == 1:
        return out
    frame = repeat_rows(covariates.reset_index(drop=True), steps)
    owner = np.repeat(np.arange(n), steps)
    t_idx = np.concatenate([np.arange(k) for k in steps]) if n else np.zeros(0, dtype=np.int64)
    ages = (x0[owner] + t_idx).astype(float)
    sens = None
    if sensitive is not None:
        sens = np.asarray(sensitive, dtype=object)[owner]
    P = expm_generators(generators(spec, model.log_rates(frame, ages, sens)))
    Pfull = np.zeros((n, L - 1, S, S))
    Pfull[owner, t_idx] = P
    for t in range(L - 1):
        out[:, t + 1] = np.einsum("ki,kij->kj", out[:, t], Pfull[:, t])
    return out


# --- simulation ---------------------------------------------------------------

def simulate_cohort(model: RateModel, covariates, sensitive=None, start_state="Healthy", start_ages=0.0,
                    horizon=np.inf, seed=0, ids=None, terminal_age: float = np.inf) -> list:
    """Simulate exactly-observed trajectories for a cohort.

    Within each integer age the intensities are constant; every live
    transition gets an independent exponential clock and the first to ring
    fires (equivalent to drawing the total exit rate and then the type).
    Clocks restart at each birthday, which is valid by memorylessness.
    Observation stops at ``start_age + horizon`` (censored) or at absorption.
    """
    spec = model.spec
    cov = as_frame(covariates).reset_index(drop=True)
    n = len(cov)
    rng = np.random.default_rng(seed)
    a = np.broadcast_to(np.asarray(start_ages, dtype=float), (n,)).copy()
    end = np.minimum(a + np.broadcast_to(np.asarray(horizon, dtype=float), (n,)), terminal_age)
    sens = None if sensitive is None else np.broadcast_to(np.asarray(sensitive, dtype=object), (n,))
    start_states = np.broadcast_to(np.asarray(start_state, dtype=object), (n,))
    state = np.array([spec.state_index(s) for s in start_states], dtype=np.int64)
    ids = list(range(n)) if ids is None else list(ids)

    src = np.array([spec.state_index(f) for f, _ in spec.transitions], dtype=np.int64)
    dst = np.array([spec.state_index(t) for _, t in spec.transitions], dtype=np.int64)
    absorbing = np.array([s in spec.absorbing for s in spec.states])

    soj_start = a.copy()
    sojourns = [[] for _ in range(n)]
    terminal = [CENSORED] * n
    active = a < end
    while active.any():
        idx = np.flatnonzero(active)
        age_int = np.floor(a[idx] + 1e-9)
        boundary = np.minimum(age_int + 1.0, end[idx])
        lr = model.log_rates(cov.iloc[idx], age_int, None if sens is None else sens[idx])
        lam = np.exp(lr) * (src[None, :] == state[idx, None])
        clocks = rng.standard_exponential(lam.shape)
        with np.errstate(divide="ignore"):
            times = np.where(lam > 0, clocks / lam, np.inf)
        first = np.argmin(times, axis=1)
        t_first = times[np.arange(len(idx)), first]
        t_jump = a[idx] + t_first
        jumps = t_jump < boundary
        for k, j, t in zip(idx[jumps], first[jumps], t_jump[jumps]):
            sojourns[k].append(Sojourn(spec.states[state[k]], float(soj_start[k]), float(t)))
            state[k] = dst[j]
            soj_start[k] = t
            a[k] = t
            if absorbing[dst[j]]:
                terminal[k] = spec.states[dst[j]]
                active[k] = False
        stay = idx[~jumps]
        a[stay] = boundary[~jumps]
        done = stay[a[stay] >= end[stay]]
        for k in done:
            if a[k] > soj_start[k]:
                sojourns[k].append(Sojourn(spec.states[state[k]], float(soj_start[k]), float(a[k])))
            active[k] = False
    return [Trajectory(ids[k], sojourns[k], terminal[k]) for k in range(n)]


def simulate_trajectory(model: RateModel, z, s, start_state: str, start_age: float, horizon: float,
                        rng_seed: int, individual_id=0) -> Trajectory:
    """Single-individual convenience wrapper around :func:`simulate_cohort`."""
    return simulate_cohort(model, as_frame(z), None if s is None else [s], start_state, start_age,
                           horizon, rng_seed, ids=[individual_id])[0]


class ConstantRateModel(RateModel):
    """Intensities that depend on nothing; handy for closed-form checks."""

    def __init__(self, spec: TransitionSpec, rates: Sequence[float]):
        self.spec = spec
        self._rates = np.asarray(rates, dtype=float)
        if self._rates.shape != (spec.n_transitions,):
            raise ValidationError("one rate per transition required")

    def log_rates(self, covariates, ages, sensitive=None):
        n = len(np.atleast_1d(ages))
        with np.errstate(divide="ignore"):
            return np.broadcast_to(np.log(self._rates), (n, len(self._rates))).copy()


class AgeRateModel(RateModel):
    """Intensities given as a function of integer age only."""

    def __init__(self, spec: TransitionSpec, rate_fn):
        self.spec = spec
        self.rate_fn = rate_fn

    def log_rates(self, covariates, ages, sensitive=None):
        ages = np.atleast_1d(np.asarray(ages, dtype=float))
        lam = np.array([np.broadcast_to(self.rate_fn(int(math.floor(x + 1e-9))), (self.spec.n_transitions,)) for x in ages])
        with np.errstate(divide="ignore"):
            return np.log(lam.reshape(len(ages), self.spec.n_transitions))
