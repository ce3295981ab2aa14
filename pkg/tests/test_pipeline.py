import csv
import math

import pytest
from hypothesis import given, settings, strategies as st

from fairmsm.core import CENSORED, Policy, Sojourn, Trajectory, three_state_spec
from fairmsm.errors import IllegalTransition, MissingIndividual, ValidationError
from fairmsm.pipeline import (
    build_exposure, expand_exposure, merge_covariates, partition_by_transition, read_policies_csv,
    read_trajectories_csv, rows_to_frame, split_by_age, write_exposure_csv, write_policies_csv,
    write_trajectories_csv,
)

from conftest import DATA

# (transition, start, end, event, exposure) of the sojourn-level rows,
# then (transition, start, end, age, event, exposure) after the age split.
EXPANDED = [
    (1, 70.5, 71.9, 1, 1.4),
    (3, 70.5, 71.9, 0, 1.4),
    (2, 71.9, 73.8, 0, 1.9),
    (4, 71.9, 73.8, 1, 1.9),
]
SPLIT = [
    (1, 70.5, 71.0, 70, 0, 0.5),
    (1, 71.0, 71.9, 71, 1, 0.9),
    (3, 70.5, 71.0, 70, 0, 0.5),
    (3, 71.0, 71.9, 71, 0, 0.9),
    (2, 71.9, 72.0, 71, 0, 0.1),
    (2, 72.0, 73.0, 72, 0, 1.0),
    (2, 73.0, 73.8, 73, 0, 0.8),
    (4, 71.9, 72.0, 71, 0, 0.1),
    (4, 72.0, 73.0, 72, 0, 1.0),
    (4, 73.0, 73.8, 73, 1, 0.8),
]


def test_expand_matches_worked_example(worked_trajectory, spec3):
    rows = expand_exposure(worked_trajectory, spec3)
    got = [(r.transition, r.start_age, r.end_age, r.event, round(r.exposure, 1)) for r in rows]
    assert got == EXPANDED


def test_split_matches_worked_example(worked_trajectory, spec3):
    rows = split_by_age(expand_exposure(worked_trajectory, spec3))
    got = [(r.transition, r.start_age, r.end_age, r.age, r.event, round(r.exposure, 1)) for r in rows]
    assert got == SPLIT


def test_censored_last_sojourn_has_no_event(spec3):
    t = Trajectory(5, [Sojourn("Healthy", 60.2, 62.5)], CENSORED)
    rows = split_by_age(expand_exposure(t, spec3))
    assert [r.event for r in rows] == [0] * 6
    assert {r.transition for r in rows} == {1, 3}


def test_absorbed_at_entry_gives_no_rows(spec3):
    assert expand_exposure(Trajectory(1, [], "Dead"), spec3) == []


def test_event_exactly_at_birthday(spec3):
    t = Trajectory(1, [Sojourn("Healthy", 70.5, 72.0)], "Dead")
    rows = [r for r in split_by_age(expand_exposure(t, spec3)) if r.transition == 3]
    assert [(r.age, r.event) for r in rows] == [(70, 0), (71, 1)]


def test_illegal_trajectory_rejected(spec3):
    t = Trajectory(1, [Sojourn("Disabled", 70, 71)], "Disabled")
    with pytest.raises(IllegalTransition):
        expand_exposure(t, spec3)


@st.composite
def trajectories(draw):
    spec = three_state_spec()
    age = draw(st.floats(50, 90))
    state = "Healthy"
    sojourns = []
    for _ in range(draw(st.integers(1, 4))):
        length = draw(st.floats(1e-3, 6.0))
        sojourns.append(Sojourn(state, age, age + length))
        age += length
        state = "Disabled" if state == "Healthy" else "Healthy"
    terminal = draw(st.sampled_from([CENSORED, "Dead", "next"]))
    if terminal == "next":
        terminal = state
    return Trajectory(1, sojourns, terminal), spec


@given(trajectories())
@settings(max_examples=200, deadline=None)
def test_split_invariants(case):
    traj, spec = case
    expanded = expand_exposure(traj, spec)
    split = split_by_age(expanded)
    for m in range(1, 5):
        before = [r for r in expanded if r.transition == m]
        after = [r for r in split if r.transition == m]
        # exposure and events are conserved per transition
        assert math.isclose(sum(r.exposure for r in before), sum(r.exposure for r in after), abs_tol=1e-9)
        assert sum(r.event for r in before) == sum(r.event for r in after)
    for r in split:
        assert r.exposure > 0
        assert r.age == math.floor(r.start_age + 1e-9)
        assert r.end_age <= r.age + 1 + 1e-9
    # splitting again changes nothing
    again = split_by_age(split)
    assert [(r.transition, r.age, r.event, r.exposure) for r in again] == \
        [(r.transition, r.age, r.event, r.exposure) for r in split]
    # each sojourn yields one event at most, on its final piece
    assert sum(r.event for r in split) == len(list(traj.moves()))


def test_merge_drops_missing_and_attaches(spec3, worked_trajectory):
    rows = split_by_age(expand_exposure(worked_trajectory, spec3))
    other = split_by_age(expand_exposure(Trajectory(2, [Sojourn("Healthy", 60, 61.5)]), spec3))
    pol = Policy(1, {"z": 1.5}, 70.5, "A")
    merged, dropped = merge_covariates(rows + other, [pol])
    assert dropped == len(other)
    assert all(r.covariates == {"z": 1.5} and r.sensitive == "A" for r in merged)
    with pytest.raises(MissingIndividual):
        merge_covariates(rows, [], keep_ids=[1])


def test_partition_by_transition(spec3, worked_trajectory):
    rows = split_by_age(expand_exposure(worked_trajectory, spec3))
    parts = partition_by_transition(rows, 4)
    assert sorted(parts) == [1, 2, 3, 4]
    assert [len(parts[m]) for m in (1, 2, 3, 4)] == [2, 3, 2, 3]
    assert partition_by_transition([], 2) == {1: [], 2: []}


def test_trajectory_csv_roundtrip(tmp_path, spec3, worked_trajectory):
    path = tmp_path / "t.csv"
    write_trajectories_csv(path, [worked_trajectory])
    back = read_trajectories_csv(path, spec3)
    assert len(back) == 1
    assert back[0].terminal_state == "Dead"
    assert [(s.state, s.start_age, s.end_age) for s in back[0].sojourns] == \
        [(s.state, s.start_age, s.end_age) for s in worked_trajectory.sojourns]


def test_golden_trajectory_file_reads(spec3):
    trajs = read_trajectories_csv(DATA / "worked_example_trajectories.csv", spec3)
    rows = [r for t in trajs for r in split_by_age(expand_exposure(t, spec3))]
    with open(DATA / "worked_example_exposure.csv") as fh:
        golden = list(csv.DictReader(fh))
    assert len(rows) == len(golden) == 10
    for r, g in zip(rows, golden):
        assert (r.transition, r.age, r.event) == (int(g["transition"]), int(g["age"]), int(g["event"]))
        assert r.exposure == pytest.approx(float(g["exposure"]), abs=1e-12)


def test_malformed_age_names_row(tmp_path, spec3):
    path = tmp_path / "bad.csv"
    path.write_text(
        "individual_id,initial_state,ending_state,starting_age,ending_age,exposure\n"
        "1,Healthy,Dead,70,71,1\n"
        "2,Healthy,Dead,seventy,71,1\n"
    )
    with pytest.raises(ValidationError, match="row 3"):
        read_trajectories_csv(path, spec3)


def test_policy_csv_roundtrip(tmp_path):
    pols = [Policy("1", {"z": 0.25, "smoker": "yes"}, 61.5, "A"), Policy("2", {"z": -1.0, "smoker": "no"}, 70.0, "B")]
    path = tmp_path / "p.csv"
    write_policies_csv(path, pols)
    assert read_policies_csv(path) == pols


def test_exposure_csv_and_frame(tmp_path, spec3, worked_trajectory):
    rows = build_exposure([worked_trajectory], spec3, [Policy(1, {"z": 2.0}, 70.5, "B")])
    frame = rows_to_frame(rows)
    assert list(frame.columns) == ["individual_id", "transition", "age", "event", "exposure", "sensitive", "z"]
    assert frame["exposure"].sum() == pytest.approx(2 * 1.4 + 2 * 1.9)
    write_exposure_csv(tmp_path / "e.csv", rows)
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "individual_id,transition,age,event,exposure,sensitive,z"
