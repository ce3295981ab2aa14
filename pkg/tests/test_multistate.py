import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from fairmsm.core import CENSORED, three_state_spec, two_state_spec
from fairmsm.errors import NumericalOverflow, ValidationError
from fairmsm.multistate import (
    AgeRateModel, ConstantRateModel, GeneratorMatrix, build_generator, expm_generators, generators,
    multi_year_probs, occupancy, one_year_probs, simulate_cohort, simulate_trajectory,
)

from oracles import taylor_expm


def random_generator(rng, S=3, scale=0.5):
    Q = rng.uniform(0, scale, size=(S, S))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


@pytest.mark.parametrize("lam", [0.01, 0.1, 1.0])
def test_two_state_closed_form(lam):
    P = expm_generators(np.array([[-lam, lam], [0.0, 0.0]]))
    assert P[0, 1] == pytest.approx(1 - math.exp(-lam), abs=1e-12)
    assert P[1] == pytest.approx([0.0, 1.0], abs=1e-15)


def test_matches_taylor_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        Q = random_generator(rng)
        np.testing.assert_allclose(expm_generators(Q), taylor_expm(Q), atol=1e-10)


def test_batched_equals_single():
    rng = np.random.default_rng(1)
    Qs = np.stack([random_generator(rng) for _ in range(20)])
    batch = expm_generators(Qs)
    for Q, P in zip(Qs, batch):
        np.testing.assert_allclose(P, expm_generators(Q), atol=1e-15)


@given(st.floats(0.05, 1.5), st.floats(0.05, 1.5), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_semigroup_and_stochastic(s, t, seed):
    Q = random_generator(np.random.default_rng(seed))
    Ps, Pt, Pst = expm_generators(Q * s), expm_generators(Q * t), expm_generators(Q * (s + t))
    np.testing.assert_allclose(Ps @ Pt, Pst, atol=1e-10)
    assert np.all(Pst >= 0)
    np.testing.assert_allclose(Pst.sum(axis=1), 1.0, atol=1e-12)


def test_zero_generator_is_identity():
    np.testing.assert_array_equal(expm_generators(np.zeros((3, 3))), np.eye(3))


def test_overflow_guard():
    with pytest.raises(NumericalOverflow):
        expm_generators(np.array([[-1e7, 1e7], [0.0, 0.0]]))


def test_generator_construction():
    spec = three_state_spec()
    Q = generators(spec, np.log([[0.1, 0.2, 0.3, 0.4]]))[0]
    expected = np.array([[-0.4, 0.1, 0.3], [0.2, -0.6, 0.4], [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(Q, expected, atol=1e-15)
    G = build_generator(ConstantRateModel(spec, [0.1, 0.2, 0.3, 0.4]), {}, 70)
    np.testing.assert_allclose(G.Q, expected, atol=1e-15)
    with pytest.raises(ValidationError):
        GeneratorMatrix(np.array([[-1.0, 0.5], [0.0, 0.0]]), 70, ("A", "B"))


def test_absorbing_row_stays_put():
    spec = three_state_spec()
    P = one_year_probs(build_generator(ConstantRateModel(spec, [0.1, 0.2, 0.3, 0.4]), {}, 70))
    assert P.prob("Dead", "Dead") == 1.0
    assert P.prob("Dead", "Healthy") == 0.0


def _age_model():
    spec = three_state_spec()
    return AgeRateModel(spec, lambda x: np.exp(np.array([-10.5 + 0.1 * x, -0.2 - 0.02 * x,
                                                         -10.0 + 0.09 * x, -5.5 + 0.05 * x])))


def test_multi_year_is_ordered_product():
    model = _age_model()
    P = np.eye(3)
    for x in range(65, 70):
        P = P @ one_year_probs(build_generator(model, {}, x)).P
    np.testing.assert_allclose(multi_year_probs(model, {}, 65, 70).P, P, atol=1e-14)
    # Chapman-Kolmogorov split at an intermediate age
    np.testing.assert_allclose(
        multi_year_probs(model, {}, 65, 68).P @ multi_year_probs(model, {}, 68, 70).P,
        multi_year_probs(model, {}, 65, 70).P, atol=1e-14)
    np.testing.assert_array_equal(multi_year_probs(model, {}, 70, 70).P, np.eye(3))
    with pytest.raises(ValidationError):
        multi_year_probs(model, {}, 70, 65)


def test_occupancy_matches_multi_year_probs():
    model = _age_model()
    cov = pd.DataFrame(index=range(3))
    occ = occupancy(model, cov, [60, 75, 109], terminal_age=110)
    assert occ.shape == (3, 51, 3)
    for k, x0 in enumerate([60, 75, 109]):
        for t in sorted({0, 1, min(7, 110 - x0), 110 - x0}):
            expected = multi_year_probs(model, {}, x0, x0 + t).P[0]
            np.testing.assert_allclose(occ[k, t], expected, atol=1e-13)
        assert np.all(occ[k, 110 - x0 + 1:] == 0)


def test_exponential_survival_from_simulation():
    lam = 0.08
    n = 50_000
    trajs = simulate_cohort(ConstantRateModel(two_state_spec(), [lam]), pd.DataFrame(index=range(n)),
                            start_state="Alive", start_ages=60.0, horizon=5.0, seed=2)
    alive = np.mean([t.terminal_state == CENSORED for t in trajs])
    p = math.exp(-5 * lam)
    assert abs(alive - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_simulation_competing_risks_split():
    # from Healthy, the share of first exits that are deaths is rate3 / (rate1 + rate3)
    spec = three_state_spec()
    n = 40_000
    trajs = simulate_cohort(ConstantRateModel(spec, [0.2, 0.0, 0.05, 0.0]), pd.DataFrame(index=range(n)),
                            start_ages=50.0, horizon=200.0, seed=3)
    first = [next(iter(t.moves()))[1] for t in trajs]
    share = np.mean([f == "Dead" for f in first])
    assert abs(share - 0.2) < 3 * math.sqrt(0.2 * 0.8 / n)


def test_simulated_trajectories_are_valid_and_deterministic():
    model = _age_model()
    a = simulate_trajectory(model, {}, None, "Healthy", 70.3, 30.0, rng_seed=9, individual_id="x")
    b = simulate_trajectory(model, {}, None, "Healthy", 70.3, 30.0, rng_seed=9, individual_id="x")
    assert a == b
    assert a.sojourns[0].start_age == 70.3
    for s1, s2 in zip(a.sojourns, a.sojourns[1:]):
        assert s1.end_age == s2.start_age and s1.state != s2.state
    if a.terminal_state == CENSORED:
        assert a.sojourns[-1].end_age == pytest.approx(100.3)


def test_simulation_respects_terminal_age():
    trajs = simulate_cohort(ConstantRateModel(two_state_spec(), [1e-6]), pd.DataFrame(index=range(5)),
                            start_state="Alive", start_ages=105.5, horizon=50, seed=0, terminal_age=110)
    assert all(t.sojourns[-1].end_age == 110 for t in trajs)
