"""Reshape observed trajectories into Poisson regression datasets.

The sequence is: one row per (sojourn, live transition) with an event flag
(:func:`expand_exposure`), then a split at every birthday so that age last
birthday is constant within a row (:func:`split_by_age`), then a join with
the policy covariates (:func:`merge_covariates`) and finally one dataset per
transition (:func:`partition_by_transition`).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .core import (
    CENSORED,
    ExposureRow,
    Policy,
    Sojourn,
    TransitionSpec,
    Trajectory,
    validate_trajectory,
)
from .errors import MissingIndividual, ValidationError

log = logging.getLogger(__name__)

AGE_TOL = 1e-9

TRAJECTORY_COLUMNS = ["individual_id", "initial_state", "ending_state", "starting_age", "ending_age", "exposure"]
EXPOSURE_COLUMNS = ["individual_id", "transition", "age", "event", "exposure"]


@dataclass(frozen=True, slots=True)
class SojournRow:
    individual_id: object
    transition: int
    start_age: float
    end_age: float
    event: int
    exposure: float


def expand_exposure(traj: Trajectory, spec: TransitionSpec) -> list:
    """One :class:`SojournRow` per sojourn and transition live from its state.

    Only the transition actually taken at the end of the sojourn carries
    ``event = 1``; a censored final sojourn has no event.
    """
    validate_trajectory(traj, spec)
    out = []
    n = len(traj.sojourns)
    for i, soj in enumerate(traj.sojourns):
        dest = traj.sojourns[i + 1].state if i + 1 < n else traj.terminal_state
        taken = None if dest == CENSORED else spec.transition_id(soj.state, dest)
        exposure = soj.end_age - soj.start_age
        for m in spec.live_transitions(soj.state):
            out.append(
                SojournRow(traj.individual_id, m, soj.start_age, soj.end_age, int(m == taken), exposure)
            )
    return out


def _snap(age: float) -> float:
    r = round(age)
    return float(r) if abs(age - r) <= AGE_TOL else age


def split_by_age(rows: Iterable) -> list:
    """Split rows at every integer age crossed.

    Accepts :class:`SojournRow` or already-split :class:`ExposureRow` objects
    (anything with ``start_age``/``end_age``/``event``); covariates and the
    sensitive attribute are carried through when present. The event goes to
    the final piece; a transition exactly at a birthday belongs to the age
    just completed.
    """
    out = []
    for row in rows:
        a, b = _snap(row.start_age), _snap(row.end_age)
        if not b > a:
            continue
        cuts = [a]
        cuts.extend(float(k) for k in range(math.floor(a) + 1, math.ceil(b)))
        cuts.append(b)
        covs = getattr(row, "covariates", None)
        sens = getattr(row, "sensitive", None)
        last = len(cuts) - 2
        for i in range(len(cuts) - 1):
            lo, hi = cuts[i], cuts[i + 1]
            out.append(
                ExposureRow(
                    row.individual_id,
                    row.transition,
                    math.floor(lo),
                    row.event if i == last else 0,
                    hi - lo,
                    covs,
                    sens,
                    lo,
                    hi,
                )
            )
    return out


def merge_covariates(rows: Sequence[ExposureRow], policies: Sequence[Policy], keep_ids=None):
    """Attach each individual's covariates and sensitive attribute.

    Rows whose individual is not in ``keep_ids`` (by default, the ids of
    ``policies``) are dropped, mirroring removal of individuals excluded
    during covariate cleaning. Returns ``(merged_rows, n_dropped)``.
    """
    by_id = {p.individual_id: p for p in policies}
    keep = set(by_id) if keep_ids is None else set(keep_ids)
    merged = []
    dropped = 0
    for r in rows:
        if r.individual_id not in keep:
            dropped += 1
            continue
        p = by_id.get(r.individual_id)
        if p is None:
            raise MissingIndividual(f"no covariates for individual {r.individual_id!r}")
        merged.append(
            ExposureRow(
                r.individual_id, r.transition, r.age, r.event, r.exposure,
                p.covariates, p.sensitive, r.start_age, r.end_age,
            )
        )
    if dropped:
        log.info("dropped %d exposure rows for individuals without covariates", dropped)
    return merged, dropped


def partition_by_transition(rows: Iterable[ExposureRow], n_transitions: Optional[int] = None) -> dict:
    """Group rows by transition id; keys ``1..M`` are always present when M is given."""
    parts = {m: [] for m in range(1, (n_transitions or 0) + 1)}
    for r in rows:
        parts.setdefault(r.transition, []).append(r)
    return dict(sorted(parts.items()))


def build_exposure(trajectories: Iterable[Trajectory], spec: TransitionSpec, policies=None) -> list:
    """Full reshaping from trajectories to merged exposure rows."""
    rows = []
    for traj in trajectories:
        rows.extend(split_by_age(expand_exposure(traj, spec)))
    if policies is not None:
        rows, _ = merge_covariates(rows, policies)
    return rows


def rows_to_frame(rows: Sequence[ExposureRow], covariate_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Columnar view of exposure rows for model fitting."""
    frame = pd.DataFrame(
        {
            "individual_id": [r.individual_id for r in rows],
            "transition": np.fromiter((r.transition for r in rows), dtype=np.int64, count=len(rows)),
            "age": np.fromiter((r.age for r in rows), dtype=np.int64, count=len(rows)),
            "event": np.fromiter((r.event for r in rows), dtype=np.int64, count=len(rows)),
            "exposure": np.fromiter((r.exposure for r in rows), dtype=float, count=len(rows)),
            "sensitive": [r.sensitive for r in rows],
        }
    )
    if covariate_names is None:
        covariate_names = list(rows[0].covariates or {}) if rows else []
    for name in covariate_names:
        frame[name] = [r.covariates[name] for r in rows]
    return frame


def policies_to_frame(policies: Sequence[Policy], covariate_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    if covariate_names is None:
        covariate_names = list(policies[0].covariates) if policies else []
    frame = pd.DataFrame({name: [p.covariates[name] for p in policies] for name in covariate_names})
    frame.index = range(len(policies))
    return frame


# --- CSV input/output -------------------------------------------------------

def fmt(value) -> str:
    """12-significant-digit float formatting used for every CSV we write."""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".12g")
    return str(value)


def write_csv(path, header: Sequence[str], records: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in records:
            w.writerow([fmt(v) for v in rec])


def _parse_float(text: str, what: str, lineno: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"row {lineno}: malformed {what} {text!r}") from None


def read_trajectories_csv(path, spec: TransitionSpec) -> list:
    """Read the sojourn table (one row per sojourn, grouped by individual)."""
    groups: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRAJECTORY_COLUMNS[:5]) - set(reader.fieldnames or [])
        if reader.fieldnames is not None and missing:
            raise ValidationError(f"trajectory file lacks columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            a = _parse_float(rec["starting_age"], "starting_age", lineno)
            b = _parse_float(rec["ending_age"], "ending_age", lineno)
            groups.setdefault(rec["individual_id"], []).append((rec["initial_state"], a, b, rec["ending_state"]))
    out = []
    for iid, sojourns in groups.items():
        traj = Trajectory(iid, [Sojourn(s, a, b) for s, a, b, _ in sojourns], sojourns[-1][3])
        for (_, _, _, end), nxt in zip(sojourns, sojourns[1:]):
            if end != nxt[0]:
                raise ValidationError(f"individual {iid}: ending state {end!r} does not match next sojourn {nxt[0]!r}")
        validate_trajectory(traj, spec)
        out.append(traj)
    return out


def write_trajectories_csv(path, trajectories: Iterable[Trajectory]) -> None:
    def records():
        for t in trajectories:
            n = len(t.sojourns)
            for i, s in enumerate(t.sojourns):
                end = t.sojourns[i + 1].state if i + 1 < n else t.terminal_state
                yield [t.individual_id, s.state, end, float(s.start_age), float(s.end_age), float(s.end_age - s.start_age)]

    write_csv(path, TRAJECTORY_COLUMNS, records())


def write_exposure_csv(path, rows: Sequence[ExposureRow], covariate_names: Optional[Sequence[str]] = None) -> None:
    merged = bool(rows) and rows[0].covariates is not None
    if covariate_names is None:
        covariate_names = list(rows[0].covariates) if merged else []
    header = list(EXPOSURE_COLUMNS) + (["sensitive"] if merged else []) + list(covariate_names)

    def records():
        for r in rows:
            rec = [r.individual_id, r.transition, r.age, r.event, float(r.exposure)]
            if merged:
                rec.append(r.sensitive)
                rec.extend(r.covariates[c] for c in covariate_names)
            yield rec

    write_csv(path, header, records())


def read_exposure_frame(path, categorical: Sequence[str] = ()) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"individual_id": str, "sensitive": str})
    for c in categorical:
        if c in frame:
            frame[c] = frame[c].astype(str)
    return frame


def write_policies_csv(path, policies: Sequence[Policy]) -> None:
    names = list(policies[0].covariates) if policies else []
    write_csv(
        path,
        ["individual_id", "issue_age", "sensitive"] + names,
        ([p.individual_id, float(p.issue_age), p.sensitive] + [p.covariates[n] for n in names] for p in policies),
    )


def read_policies_csv(path, categorical: Sequence[str] = ()) -> list:
    """Read policies; a column is categorical if listed or not parseable as float."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        recs = list(reader)
        fields = reader.fieldnames or []
    for col in ("individual_id", "issue_age", "sensitive"):
        if col not in fields:
            raise ValidationError(f"policy file lacks column {col!r}")
    names = [f for f in fields if f not in ("individual_id", "issue_age", "sensitive")]
    kinds = {}
    for n in names:
        if n in categorical:
            kinds[n] = str
            continue
        try:
            for r in recs:
                float(r[n])
            kinds[n] = float
        except ValueError:
            kinds[n] = str
    out = []
    for lineno, r in enumerate(recs, start=2):
        age = _parse_float(r["issue_age"], "issue_age", lineno)
        out.append(Policy(r["individual_id"], {n: kinds[n](r[n]) for n in names}, age, r["sensitive"] or None))
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
