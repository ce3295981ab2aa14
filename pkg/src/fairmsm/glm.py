"""Poisson regression with log link and log-exposure offset.

Each transition of a multi-state model is estimated as its own Poisson GLM
on the exposure rows produced by :mod:`fairmsm.pipeline`: the event flag is
the response, ``ln(exposure)`` the offset, and (covariates, age[, sensitive])
the regressors. Coefficients are found by iteratively reweighted least
squares.
"""
from __future__ import annotations

import configparser
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import gammaln

from .core import RateModel, TransitionSpec, as_frame
from .errors import Collinear, Diverged, UnknownCovariate, UnknownLevel, ValidationError

INTERCEPT = "(Intercept)"
SENSITIVE = "sensitive"
AGE = "age"


@dataclass(frozen=True)
class Encoding:
    """Mapping from raw covariates to design-matrix columns.

    Categorical covariates are one-hot encoded against their first level in
    lexicographic order. Age enters linearly or, with ``age="categorical"``,
    as one dummy per integer age (saturated in age).
    """

    continuous: tuple = ()
    categorical: tuple = ()  # ((name, (level0, level1, ...)), ...)
    age: str = "linear"
    age_levels: tuple = ()
    sensitive_levels: tuple = ()

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, continuous=(), categorical=(), age="linear",
                   uses_sensitive=False) -> "Encoding":
        cats = tuple((c, tuple(sorted({str(v) for v in frame[c]}))) for c in categorical)
        age_levels = tuple(sorted(int(a) for a in set(frame[AGE]))) if age == "categorical" else ()
        if age not in ("linear", "categorical"):
            raise ValidationError(f"age must be 'linear' or 'categorical', got {age!r}")
        sens = ()
        if uses_sensitive:
            if frame[SENSITIVE].isna().any():
                raise ValidationError("sensitive attribute missing for some rows")
            sens = tuple(sorted({str(v) for v in frame[SENSITIVE]}))
        return cls(tuple(continuous), cats, age, age_levels, sens)

    @property
    def uses_sensitive(self) -> bool:
        return bool(self.sensitive_levels)

    @property
    def covariate_names(self) -> tuple:
        return self.continuous + tuple(c for c, _ in self.categorical)

    def terms(self) -> dict:
        """Term name -> list of design column indices."""
        out = {INTERCEPT: [0]}
        j = 1
        for c in self.continuous:
            out[c] = [j]
            j += 1
        for c, levels in self.categorical:
            out[c] = list(range(j, j + len(levels) - 1))
            j += len(levels) - 1
        n_age = 1 if self.age == "linear" else len(self.age_levels) - 1
        out[AGE] = list(range(j, j + n_age))
        j += n_age
        if self.sensitive_levels:
            out[SENSITIVE] = list(range(j, j + len(self.sensitive_levels) - 1))
        return out

    def column_names(self) -> list:
        names = [INTERCEPT, *self.continuous]
        for c, levels in self.categorical:
            names.extend(f"{c}[{lv}]" for lv in levels[1:])
        if self.age == "linear":
            names.append(AGE)
        else:
            names.extend(f"age[{a}]" for a in self.age_levels[1:])
        names.extend(f"sensitive[{lv}]" for lv in self.sensitive_levels[1:])
        return names

    def matrix(self, covariates: pd.DataFrame, ages, sensitive=None) -> np.ndarray:
        ages = np.asarray(ages, dtype=float)
        n = len(ages)
        cols = [np.ones(n)]
        for c in self.continuous:
            if c not in covariates:
                raise UnknownCovariate(f"covariate {c!r} missing")
            try:
                cols.append(np.asarray(covariates[c], dtype=float))
            except (TypeError, ValueError):
                raise ValidationError(f"covariate {c!r} must be numeric") from None
        for c, levels in self.categorical:
            if c not in covariates:
                raise UnknownCovariate(f"covariate {c!r} missing")
            cols.extend(_one_hot(covariates[c].astype(str).to_numpy(), levels, c))
        if self.age == "linear":
            cols.append(ages)
        else:
            cols.extend(_one_hot(ages.astype(np.int64), self.age_levels, AGE))
        if self.sensitive_levels:
            if sensitive is None:
                raise ValidationError("model uses the sensitive attribute but none was supplied")
            s = np.asarray(sensitive, dtype=object)
            s = np.broadcast_to(s, (n,)) if s.ndim == 0 or len(s) == 1 else s
            cols.extend(_one_hot(s.astype(str), self.sensitive_levels, SENSITIVE))
        return np.column_stack(cols)


def _one_hot(values: np.ndarray, levels: Sequence, name: str) -> list:
    codes = pd.Categorical(values, categories=list(levels)).codes
    if (codes < 0).any():
        bad = sorted({str(v) for v, c in zip(values, codes) if c < 0})
        raise UnknownLevel(f"unseen level(s) {bad} for {name!r}; known levels {list(levels)}")
    return [(codes == k).astype(float) for k in range(1, len(levels))]


@dataclass
class DesignMatrix:
    X: np.ndarray
    names: list
    response: np.ndarray
    offset: np.ndarray
    terms: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.response = np.asarray(self.response, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        if not np.all(np.isfinite(self.offset)):
            raise ValidationError("offsets must be finite (exposures must be positive)")
        if not self.terms:
            self.terms = {n: [j] for j, n in enumerate(self.names)}

    def drop_columns(self, cols) -> "DesignMatrix":
        drop = set(cols)
        keep = [j for j in range(self.X.shape[1]) if j not in drop]
        remap = {old: new for new, old in enumerate(keep)}
        terms = {t: [remap[j] for j in js if j in remap] for t, js in self.terms.items()}
        terms = {t: js for t, js in terms.items() if js}
        return DesignMatrix(self.X[:, keep], [self.names[j] for j in keep], self.response, self.offset, terms)


def build_design(frame: pd.DataFrame, encoding: Encoding) -> DesignMatrix:
    """Design for exposure rows (columns ``event``, ``exposure``, ``age``...)."""
    sens = frame[SENSITIVE].to_numpy() if encoding.uses_sensitive else None
    X = encoding.matrix(frame, frame[AGE].to_numpy(), sens)
    return DesignMatrix(
        X,
        encoding.column_names(),
        frame["event"].to_numpy(dtype=float),
        np.log(frame["exposure"].to_numpy(dtype=float)),
        encoding.terms(),
    )


@dataclass
class FitResult:
    names: list
    coefficients: np.ndarray
    log_likelihood: float
    deviance: float
    iterations: int
    converged: bool
    score_max: float
    covariance: Optional[np.ndarray] = None

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.coefficients))


def poisson_log_likelihood(y, eta) -> float:
    """Sum of ``y*eta - exp(eta) - ln(y!)`` where ``eta`` includes the offset."""
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))


def _deviance(y, mu) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


def check_rank(X: np.ndarray, names: Sequence[str], rtol: float = 1e-10) -> None:
    """Raise :class:`Collinear` if ``X`` is rank deficient (pivoted QR)."""
    n, p = X.shape
    if n < p:
        raise Collinear(f"{n} rows for {p} columns", dependent=list(names))
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    R, piv = linalg.qr(X / scale, mode="r", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * d[0])) if d.size and d[0] > 0 else 0
    if rank < p:
        dep = [names[j] for j in piv[rank:]]
        raise Collinear(f"design is rank deficient (rank {rank} < {p}); dependent columns: {dep}", dep)


def fit_poisson(design: DesignMatrix, max_iter: int = 100, grad_tol: float = 1e-8,
                max_halvings: int = 20) -> FitResult:
    """Maximum-likelihood Poisson regression by IRLS with step halving.

    The score reported (and used for the convergence test) is the gradient
    of the log-likelihood divided by the number of rows, so the tolerance
    does not depend on sample size. Iteration stops once it drops below
    ``grad_tol``; a stalled deviance alone is not treated as convergence.
    """
    X, y, off = design.X, design.response, design.offset
    n, p = X.shape
    check_rank(X, design.names)

    mu = y + 0.1
    eta = np.log(mu)
    beta = None
    dev_old = np.inf
    converged = False
    grad_max = np.inf
    for it in range(1, max_iter + 1):
        z = eta - off + (y - mu) / mu
        sw = np.sqrt(mu)
        beta_new = linalg.lstsq(X * sw[:, None], z * sw, lapack_driver="gelsy")[0]
        eta_new = X @ beta_new + off
        dev_new = _deviance(y, np.exp(eta_new))
        if beta is not None:
            h = 0
            while (not np.isfinite(dev_new) or dev_new > dev_old + 1e-12 * abs(dev_old)) and h < max_halvings:
                beta_new = 0.5 * (beta + beta_new)
                eta_new = X @ beta_new + off
                dev_new = _deviance(y, np.exp(eta_new))
                h += 1
        beta, eta = beta_new, eta_new
        mu = np.exp(eta)
        grad_max = float(np.max(np.abs(X.T @ (y - mu)))) / n
        dev_old = dev_new
        if grad_max <= grad_tol:
            converged = True
            break
    if converged:
        # one more Newton step: convergence is quadratic here, so this takes
        # the coefficients to rounding level at negligible cost
        z = eta - off + (y - mu) / mu
        sw = np.sqrt(mu)
        beta_pol = linalg.lstsq(X * sw[:, None], z * sw, lapack_driver="gelsy")[0]
        eta_pol = X @ beta_pol + off
        dev_pol = _deviance(y, np.exp(eta_pol))
        mu_pol = np.exp(eta_pol)
        grad_pol = float(np.max(np.abs(X.T @ (y - mu_pol)))) / n
        if np.isfinite(dev_pol) and dev_pol <= dev_new + 1e-12 * abs(dev_new) and grad_pol <= grad_tol:
            beta, eta, mu, dev_new, grad_max = beta_pol, eta_pol, mu_pol, dev_pol, grad_pol
    if not converged:
        raise Diverged(f"IRLS did not converge in {max_iter} iterations (score {grad_max:.3g})")

    sw = np.sqrt(mu)
    R = linalg.qr(X * sw[:, None], mode="r")[0][:p]
    Rinv = linalg.solve_triangular(R, np.eye(p))
    cov = Rinv @ Rinv.T
    return FitResult(
        list(design.names), beta, poisson_log_likelihood(y, eta), dev_new, it, True, grad_max, cov
    )


class GLMRateModel(RateModel):
    """Log-linear intensities, one coefficient vector per transition."""

    def __init__(self, spec: TransitionSpec, encoding: Encoding, coefficients, std_errors=None, fits=None):
        self.spec = spec
        self.encoding = encoding
        self.coefficients = np.atleast_2d(np.asarray(coefficients, dtype=float))
        if self.coefficients.shape != (spec.n_transitions, len(encoding.column_names())):
            raise ValidationError(
                f"coefficients shape {self.coefficients.shape} does not match "
                f"{spec.n_transitions} transitions x {len(encoding.column_names())} columns"
            )
        self.std_errors = None if std_errors is None else np.asarray(std_errors, dtype=float)
        self.fits = fits

    @property
    def uses_sensitive(self) -> bool:
        return self.encoding.uses_sensitive

    @property
    def sensitive_levels(self) -> tuple:
        return self.encoding.sensitive_levels

    @property
    def names(self) -> list:
        return self.encoding.column_names()

    def log_rates(self, covariates, ages, sensitive=None) -> np.ndarray:
        X = self.encoding.matrix(as_frame(covariates), ages, sensitive)
        return X @ self.coefficients.T

    def coefficient_table(self) -> pd.DataFrame:
        recs = []
        for m in range(1, self.spec.n_transitions + 1):
            for j, name in enumerate(self.names):
                se = np.nan if self.std_errors is None else self.std_errors[m - 1, j]
                recs.append((m, name, self.coefficients[m - 1, j], se))
        return pd.DataFrame(recs, columns=["transition", "term", "estimate", "std_error"])


def fit_rate_model(frame: pd.DataFrame, spec: TransitionSpec, continuous=(), categorical=(),
                   uses_sensitive=False, age="linear", encoding: Optional[Encoding] = None,
                   **fit_kw) -> GLMRateModel:
    """Fit one Poisson GLM per transition on an exposure frame.

    ``frame`` is the columnar form of merged exposure rows
    (see :func:`fairmsm.pipeline.rows_to_frame`).
    """
    if encoding is None:
        encoding = Encoding.from_frame(frame, continuous, categorical, age, uses_sensitive)
    coefs, ses, fits = [], [], []
    for m in range(1, spec.n_transitions + 1):
        part = frame[frame["transition"] == m]
        if part.empty:
            raise ValidationError(f"no exposure rows for transition {spec.label(m)}")
        fit = fit_poisson(build_design(part, encoding), **fit_kw)
        coefs.append(fit.coefficients)
        ses.append(fit.std_errors)
        fits.append(fit)
    return GLMRateModel(spec, encoding, np.array(coefs), np.array(ses), fits)


def likelihood_contribution(design: DesignMatrix, covariate_name: str, full_fit: Optional[FitResult] = None) -> float:
    """Log-likelihood lost by removing every column derived from a covariate.

    All-zero columns carry no information and are dropped from both fits,
    so an identically-zero covariate contributes exactly 0.
    """
    if covariate_name not in design.terms:
        raise UnknownCovariate(f"unknown covariate {covariate_name!r}; terms are {list(design.terms)}")
    zero = np.flatnonzero(~np.any(design.X != 0, axis=0))
    full = design.drop_columns(zero) if zero.size else design
    if full_fit is None or zero.size:
        full_fit = fit_poisson(full)
    if covariate_name not in full.terms:
        return 0.0
    reduced = full.drop_columns(full.terms[covariate_name])
    red_fit = fit_poisson(reduced)
    return max(0.0, full_fit.log_likelihood - red_fit.log_likelihood)


def likelihood_contributions(frame: pd.DataFrame, model: GLMRateModel) -> pd.DataFrame:
    """Per-transition contribution of every non-intercept term of ``model``."""
    terms = [t for t in model.encoding.terms() if t != INTERCEPT]
    recs = []
    for m in range(1, model.spec.n_transitions + 1):
        design = build_design(frame[frame["transition"] == m], model.encoding)
        fit = model.fits[m - 1] if model.fits else None
        for t in terms:
            recs.append((m, t, likelihood_contribution(design, t, fit)))
    return pd.DataFrame(recs, columns=["transition", "covariate", "contribution"])


class FinancialCovariates(NamedTuple):
    log_abs_wealth: np.ndarray
    sign_wealth: np.ndarray
    signed_log_wealth: np.ndarray
    log_income: np.ndarray


def transform_financial(wealth, income) -> FinancialCovariates:
    """Skew-reducing transforms for net wealth (may be negative) and income.

    Wealth becomes ``ln(1+|W|)``, ``sgn(W)`` and their product; income
    becomes ``ln(1+Y)``. Negative incomes are clamped to zero with a warning.
    """
    w = np.asarray(wealth, dtype=float)
    y = np.asarray(income, dtype=float)
    if np.any(y < 0):
        warnings.warn("negative income clamped to 0 before ln(1+Y)", RuntimeWarning, stacklevel=2)
        y = np.maximum(y, 0.0)
    mag = np.log1p(np.abs(w))
    sgn = np.sign(w)
    return FinancialCovariates(mag, sgn, sgn * mag, np.log1p(y))


# --- persistence: plain-text model card + coefficient CSV --------------------

def _join(items) -> str:
    return ", ".join(str(i) for i in items)


def _split(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def write_model_card(path, model: GLMRateModel, mode: str = "") -> None:
    enc = model.encoding
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["model"] = {
        "mode": mode,
        "states": _join(model.spec.states),
        "transitions": _join(f"{a}>{b}" for a, b in model.spec.transitions),
        "continuous": _join(enc.continuous),
        "categorical": _join(c for c, _ in enc.categorical),
        "age": enc.age,
        "age_levels": _join(enc.age_levels),
        "sensitive_levels": _join(enc.sensitive_levels),
        "uses_sensitive": str(enc.uses_sensitive).lower(),
    }
    cp["levels"] = {c: _join(levels) for c, levels in enc.categorical}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def read_model_card(path) -> tuple:
    """Return ``(spec, encoding, mode)`` from a model card."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    sec = cp["model"]
    spec = TransitionSpec(
        _split(sec["states"]), [tuple(t.split(">")) for t in _split(sec["transitions"])]
    )
    levels = cp["levels"] if cp.has_section("levels") else {}
    enc = Encoding(
        tuple(_split(sec["continuous"])),
        tuple((c, tuple(_split(levels[c]))) for c in _split(sec["categorical"])),
        sec["age"],
        tuple(int(a) for a in _split(sec["age_levels"])),
        tuple(_split(sec["sensitive_levels"])),
    )
    return spec, enc, sec.get("mode", "")


def load_glm_model(card_path, coef_path) -> GLMRateModel:
    spec, enc, _ = read_model_card(card_path)
    table = pd.read_csv(coef_path, float_precision="round_trip")
    names = enc.column_names()
    coefs = np.zeros((spec.n_transitions, len(names)))
    ses = np.zeros_like(coefs)
    col = {n: j for j, n in enumerate(names)}
    for rec in table.itertuples(index=False):
        if rec.term not in col:
            raise ValidationError(f"coefficient file has unknown term {rec.term!r}")
        coefs[int(rec.transition) - 1, col[rec.term]] = rec.estimate
        ses[int(rec.transition) - 1, col[rec.term]] = rec.std_error
    return GLMRateModel(spec, enc, coefs, ses)
