import math

import numpy as np
import pytest

from fairmsm.core import CENSORED, Sojourn, Trajectory, three_state_spec, two_state_spec
from fairmsm.errors import ValidationError
from fairmsm.pipeline import read_policies_csv, read_trajectories_csv, write_policies_csv, write_trajectories_csv
from fairmsm.synthetic import (
    CategoricalCovariate, ContinuousCovariate, ScenarioSpec, default_scenario, generate_population,
    generate_study, observe_biennial,
)


def test_group_and_category_frequencies():
    spec = default_scenario(n=20_000, seed=3)
    pop = generate_population(spec)
    n = len(pop)
    for level, p in zip(spec.levels, spec.level_probs):
        share = np.mean([q.sensitive == level for q in pop])
        assert abs(share - p) < 4 * math.sqrt(p * (1 - p) / n)
    smoke = np.mean([q.covariates["smoker"] == "yes" for q in pop])
    assert abs(smoke - 0.2) < 4 * math.sqrt(0.16 / n)
    ages = np.array([q.issue_age for q in pop])
    assert ages.min() >= 50 and ages.max() <= 80


def test_proxy_shift_and_null_dependence():
    pop = generate_population(default_scenario(n=20_000, seed=4, proxy_shift=0.8))
    by = {lv: np.array([q.covariates["z1"] for q in pop if q.sensitive == lv]) for lv in "ABC"}
    assert by["B"].mean() - by["A"].mean() == pytest.approx(0.8, abs=0.08)
    assert by["C"].mean() - by["A"].mean() == pytest.approx(0.4, abs=0.08)
    # z2 is drawn independently of the group
    z2 = {lv: np.mean([q.covariates["z2"] for q in pop if q.sensitive == lv]) for lv in "ABC"}
    assert max(z2.values()) - min(z2.values()) < 0.1
    null = generate_population(default_scenario(n=20_000, seed=4, proxy_shift=0.0))
    s_is_b = np.array([q.sensitive == "B" for q in null], dtype=float)
    z1 = np.array([q.covariates["z1"] for q in null])
    assert abs(np.corrcoef(s_is_b, z1)[0, 1]) < 4 / math.sqrt(len(null))


def test_same_seed_same_study():
    spec = default_scenario(n=300, seed=5)
    assert generate_population(spec) == generate_population(spec)
    assert generate_study(spec) == generate_study(spec)
    other = default_scenario(n=300, seed=6)
    assert generate_population(spec) != generate_population(other)


def test_constant_hazard_survival():
    lam = 0.05
    spec = ScenarioSpec(n=20_000, levels=("A",), level_probs=(1.0,), coefficients={1: {"(Intercept)": math.log(lam)}},
                        horizon=10.0, seed=1, transition_spec=two_state_spec())
    trajs = generate_study(spec)
    alive = np.mean([t.terminal_state == CENSORED for t in trajs])
    p = math.exp(-10 * lam)
    assert abs(alive - p) < 4 * math.sqrt(p * (1 - p) / spec.n)


def test_truth_uses_design_names():
    spec = default_scenario(n=10)
    truth = spec.truth()
    assert truth.uses_sensitive
    j = truth.names.index("sensitive[B]")
    assert truth.coefficients[0, j] == 0.4
    assert not default_scenario(n=10, direct_effect=0).truth().uses_sensitive
    with pytest.raises(ValidationError):
        ScenarioSpec(n=10, levels=("A",), level_probs=(1.0,), coefficients={1: {"income": 1.0}})


def test_scenario_validation():
    with pytest.raises(ValidationError):
        default_scenario(n=0)
    with pytest.raises(ValidationError):
        default_scenario(level_probs=(0.5, 0.5, 0.5))
    with pytest.raises(ValidationError):
        default_scenario(censoring="monthly")
    with pytest.raises(ValidationError):
        ScenarioSpec(n=5, levels=("A",), level_probs=(1.0,), coefficients={},
                     categorical=[CategoricalCovariate("c", {"*": {"x": 0.5, "y": 0.6}})])


def test_lognormal_covariate_is_positive():
    spec = ScenarioSpec(n=500, levels=("A", "B"), level_probs=(0.5, 0.5), coefficients={},
                        continuous=[ContinuousCovariate("wealth", {"B": 1.0}, lognormal=True)])
    assert all(q.covariates["wealth"] > 0 for q in generate_population(spec))


def test_biennial_midpoint_placement():
    spec = three_state_spec()
    t = Trajectory(1, [Sojourn("Healthy", 60.0, 63.3), Sojourn("Disabled", 63.3, 67.0)], CENSORED)
    obs = observe_biennial(t, spec)
    # waves at 60, 62, 64, 66: the change shows up between 62 and 64
    assert [(s.state, s.start_age, s.end_age) for s in obs.sojourns] == \
        [("Healthy", 60.0, 63.0), ("Disabled", 63.0, 66.0)]
    assert obs.terminal_state == CENSORED


def test_biennial_keeps_exact_death():
    spec = three_state_spec()
    t = Trajectory(1, [Sojourn("Healthy", 60.0, 61.0), Sojourn("Disabled", 61.0, 65.7)], "Dead")
    obs = observe_biennial(t, spec)
    assert [(s.state, s.start_age, s.end_age) for s in obs.sojourns] == \
        [("Healthy", 60.0, 61.0), ("Disabled", 61.0, 65.7)]
    assert obs.terminal_state == "Dead"


def test_biennial_collapses_round_trips():
    spec = three_state_spec()
    # disabled and recovered between two waves: not seen at all
    t = Trajectory(1, [Sojourn("Healthy", 60.0, 60.5), Sojourn("Disabled", 60.5, 61.5),
                       Sojourn("Healthy", 61.5, 64.0)], CENSORED)
    obs = observe_biennial(t, spec)
    assert [(s.state, s.start_age, s.end_age) for s in obs.sojourns] == [("Healthy", 60.0, 64.0)]


def test_study_csv_round_trip(tmp_path):
    spec = default_scenario(n=200, seed=8, censoring="biennial_midpoint")
    pop = generate_population(spec)
    trajs = generate_study(spec, pop)
    write_trajectories_csv(tmp_path / "t.csv", trajs)
    write_policies_csv(tmp_path / "p.csv", pop)
    back = read_trajectories_csv(tmp_path / "t.csv", spec.transition_spec)
    # identifiers come back as strings; ages are written to 12 significant digits
    assert [(t.individual_id, t.terminal_state, len(t.sojourns)) for t in back] == \
        [(str(t.individual_id), t.terminal_state, len(t.sojourns)) for t in trajs if t.sojourns]
    for a, b in zip(back, [t for t in trajs if t.sojourns]):
        assert a.sojourns[-1].end_age == pytest.approx(b.sojourns[-1].end_age, rel=1e-11)
    pols = read_policies_csv(tmp_path / "p.csv")
    assert len(pols) == len(pop)
    assert [p.sensitive for p in pols] == [p.sensitive for p in pop]
    assert pols[0].covariates["z1"] == pytest.approx(pop[0].covariates["z1"], rel=1e-11)
