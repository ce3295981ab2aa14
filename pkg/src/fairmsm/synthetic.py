"""Synthetic insured populations with controllable proxy structure.

A scenario fixes how covariates depend on the sensitive attribute (for
example, a continuous covariate whose mean shifts by group, which turns it
into a proxy) and the true log-linear intensities used to simulate health
histories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import CENSORED, Policy, Sojourn, TransitionSpec, Trajectory, three_state_spec
from .errors import ValidationError
from .glm import Encoding, GLMRateModel
from .multistate import simulate_cohort
from .pipeline import policies_to_frame


@dataclass
class ContinuousCovariate:
    name: str
    means: Mapping  # level -> mean; levels absent use 0
    sd: float = 1.0
    lognormal: bool = False


@dataclass
class CategoricalCovariate:
    name: str
    probs: Mapping  # level -> {category: probability}, or "*" for all levels


@dataclass
class ScenarioSpec:
    """Everything needed to generate policies and their health histories.

    ``coefficients`` maps a 1-based transition id to ``{column: value}``
    using design-column names such as ``"(Intercept)"``, ``"age"``, ``"z1"``,
    ``"smoker[yes]"`` or ``"sensitive[B]"``; unspecified columns are 0.
    """

    n: int
    levels: tuple
    level_probs: tuple
    coefficients: Mapping
    continuous: Sequence = ()
    categorical: Sequence = ()
    issue_age: tuple = (50.0, 80.0)
    horizon: float = 20.0
    censoring: str = "exact"
    seed: int = 0
    transition_spec: TransitionSpec = field(default_factory=three_state_spec)
    terminal_age: float = 110.0

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("population size must be at least 1")
        if len(self.levels) != len(self.level_probs) or not math.isclose(sum(self.level_probs), 1.0, abs_tol=1e-9):
            raise ValidationError("level probabilities must align with levels and sum to 1")
        if any(p < 0 for p in self.level_probs):
            raise ValidationError("level probabilities must be non-negative")
        if self.censoring not in ("exact", "biennial_midpoint"):
            raise ValidationError(f"unknown censoring mode {self.censoring!r}")
        for c in self.categorical:
            for dist in c.probs.values():
                if not math.isclose(sum(dist.values()), 1.0, abs_tol=1e-9):
                    raise ValidationError(f"category probabilities for {c.name!r} must sum to 1")
        self.truth()  # validates coefficient names

    @property
    def covariate_names(self) -> list:
        return [c.name for c in self.continuous] + [c.name for c in self.categorical]

    def encoding(self) -> Encoding:
        cats = []
        for c in self.categorical:
            cats_all = sorted({k for d in c.probs.values() for k in d})
            cats.append((c.name, tuple(cats_all)))
        uses_s = any(k.startswith("sensitive[") for coefs in self.coefficients.values() for k in coefs)
        return Encoding(
            tuple(c.name for c in self.continuous), tuple(cats), "linear", (),
            tuple(sorted(self.levels)) if uses_s else (),
        )

    def truth(self) -> GLMRateModel:
        """The generating intensities as a GLM rate model."""
        enc = self.encoding()
        names = enc.column_names()
        M = self.transition_spec.n_transitions
        coefs = np.zeros((M, len(names)))
        for m, terms in self.coefficients.items():
            if not 1 <= int(m) <= M:
                raise ValidationError(f"transition id {m} out of range")
            for name, value in terms.items():
                if name not in names:
                    raise ValidationError(f"coefficient {name!r} is not a design column; columns are {names}")
                coefs[int(m) - 1, names.index(name)] = value
        return GLMRateModel(self.transition_spec, enc, coefs)


def generate_population(spec: ScenarioSpec) -> list:
    """Draw ``spec.n`` policies; identical seeds give identical populations."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    s = rng.choice(len(spec.levels), size=n, p=np.asarray(spec.level_probs, dtype=float))
    labels = np.asarray(spec.levels, dtype=object)[s]
    cols = {}
    for c in spec.continuous:
        mu = np.array([float(c.means.get(lv, 0.0)) for lv in spec.levels])[s]
        v = rng.normal(mu, c.sd)
        cols[c.name] = np.exp(v) if c.lognormal else v
    for c in spec.categorical:
        out = np.empty(n, dtype=object)
        u = rng.random(n)
        for j, lv in enumerate(spec.levels):
            dist = c.probs.get(lv, c.probs.get("*"))
            if dist is None:
                raise ValidationError(f"no category distribution for level {lv!r} of {c.name!r}")
            cats = sorted(dist)
            cum = np.cumsum([dist[k] for k in cats])
            idx = np.flatnonzero(s == j)
            out[idx] = np.asarray(cats, dtype=object)[np.minimum(np.searchsorted(cum, u[idx], side="right"), len(cats) - 1)]
        cols[c.name] = out
    lo, hi = spec.issue_age
    ages = rng.uniform(lo, hi, size=n)
    names = spec.covariate_names
    return [
        Policy(k + 1, {name: (float(cols[name][k]) if not isinstance(cols[name][k], str) else cols[name][k])
                       for name in names}, float(ages[k]), str(labels[k]))
        for k in range(n)
    ]


def _state_before(traj: Trajectory, age: float) -> Optional[str]:
    for soj in traj.sojourns:
        if soj.start_age <= age <= soj.end_age and (age < soj.end_age or soj is traj.sojourns[-1]):
            return soj.state
    return None


def observe_biennial(traj: Trajectory, spec: TransitionSpec, interval: float = 2.0) -> Trajectory:
    """Re-observe an exact trajectory at survey waves every ``interval`` years.

    State changes between waves are placed at the interval midpoint; only
    the net change between consecutive waves is seen. Death dates stay
    exact. Follow-up after the last wave before censoring is lost.
    """
    if not traj.sojourns:
        return traj
    entry = traj.sojourns[0].start_age
    last_end = traj.sojourns[-1].end_age
    died = traj.terminal_state != CENSORED and traj.terminal_state in spec.absorbing
    waves = [entry]
    while waves[-1] + interval < last_end or (not died and waves[-1] + interval <= last_end):
        waves.append(entry + interval * len(waves))
    obs = [_state_before(traj, w) for w in waves]
    sojourns = []
    cur, cur_start = obs[0], entry
    for j in range(1, len(waves)):
        if obs[j] != obs[j - 1]:
            spec.transition_id(obs[j - 1], obs[j])
            mid = 0.5 * (waves[j - 1] + waves[j])
            sojourns.append(Sojourn(cur, cur_start, mid))
            cur, cur_start = obs[j], mid
    if died:
        spec.transition_id(cur, traj.terminal_state)
        sojourns.append(Sojourn(cur, cur_start, last_end))
        return Trajectory(traj.individual_id, sojourns, traj.terminal_state)
    if waves[-1] > cur_start:
        sojourns.append(Sojourn(cur, cur_start, waves[-1]))
    return Trajectory(traj.individual_id, sojourns, CENSORED)


def generate_study(spec: ScenarioSpec, population: Optional[Sequence[Policy]] = None) -> list:
    """Simulate health histories for a population under the scenario's true rates."""
    pop = generate_population(spec) if population is None else list(population)
    truth = spec.truth()
    ts = spec.transition_spec
    trajs = simulate_cohort(
        truth,
        policies_to_frame(pop, spec.covariate_names),
        [p.sensitive for p in pop],
        ts.states[0],
        [p.issue_age for p in pop],
        spec.horizon,
        seed=spec.seed + 1,
        ids=[p.individual_id for p in pop],
        terminal_age=spec.terminal_age,
    )
    if spec.censoring == "biennial_midpoint":
        trajs = [observe_biennial(t, ts) for t in trajs]
    return trajs


# Baseline log-linear intensities at ages 50-110 in the Healthy/Disabled/Dead model.
BASE_COEFFICIENTS = {
    1: {"(Intercept)": -10.5, "age": 0.10},   # Healthy -> Disabled
    2: {"(Intercept)": -0.2, "age": -0.02},   # Disabled -> Healthy
    3: {"(Intercept)": -10.0, "age": 0.09},   # Healthy -> Dead
    4: {"(Intercept)": -5.5, "age": 0.05},    # Disabled -> Dead
}


def default_scenario(n: int = 5000, seed: int = 0, censoring: str = "exact", proxy_shift: float = 0.8,
                     direct_effect: float = 0.4, level_probs=(0.6, 0.25, 0.15), horizon: float = 20.0,
                     smoker: bool = True) -> ScenarioSpec:
    """Case-study-shaped scenario: three states, three groups, one proxy covariate.

    ``z1`` has its mean shifted by ``proxy_shift`` for group B (half that for
    C) and raises disability incidence; group B (and C, half as much) also
    has a direct effect of size ``direct_effect`` on disability incidence.
    ``z2`` is independent of the group; ``smoker`` is optional.
    """
    coefs = {m: dict(v) for m, v in BASE_COEFFICIENTS.items()}
    effects = {
        "z1": (0.3, -0.2, 0.2, 0.15),
        "z2": (-0.2, 0.1, -0.15, 0.1),
        "smoker[yes]": (0.2, -0.1, 0.4, 0.2),
    }
    if not smoker:
        effects.pop("smoker[yes]")
    for name, vals in effects.items():
        for m, v in enumerate(vals, start=1):
            coefs[m][name] = v
    if direct_effect:
        coefs[1]["sensitive[B]"] = direct_effect
        coefs[1]["sensitive[C]"] = direct_effect / 2
        coefs[2]["sensitive[B]"] = -direct_effect / 2
        coefs[2]["sensitive[C]"] = -direct_effect / 4
    return ScenarioSpec(
        n=n,
        levels=("A", "B", "C"),
        level_probs=tuple(level_probs),
        coefficients=coefs,
        continuous=[
            ContinuousCovariate("z1", {"A": 0.0, "B": proxy_shift, "C": proxy_shift / 2}),
            ContinuousCovariate("z2", {}),
        ],
        categorical=[CategoricalCovariate("smoker", {"*": {"no": 0.8, "yes": 0.2}})] if smoker else [],
        horizon=horizon,
        censoring=censoring,
        seed=seed,
    )
