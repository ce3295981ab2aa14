"""Batch command line: simulate, transform, fit, price, fair, report.

Every command reads one ``key = value`` config file with ``[section]``
headers. Relative paths in the config are resolved against the config
file's directory; outputs go to ``--out``. Exit codes: 0 success,
2 configuration or validation error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from pathlib import Path
from typing import Optional

import pandas as pd

from .core import ProductSpec, TransitionSpec, ltci_product, three_state_spec
from .errors import NumericalError, ValidationError
from .fairness import (
    DiscriminationFreeModel, demographic_parity_gap, ks_to_pooled, ot_preprocess, policy_level_distribution,
)
from .glm import fit_rate_model, likelihood_contributions, load_glm_model, write_model_card
from .pipeline import (
    ensure_dir, fmt, merge_covariates, read_exposure_frame, read_policies_csv,
    read_trajectories_csv, split_by_age, expand_exposure, write_csv, write_exposure_csv, write_policies_csv,
    write_trajectories_csv,
)
from .pricing import MODES, quote_batch

MIN_ISSUE_AGE, MAX_ISSUE_AGE = 50, 80

SCHEMA = {
    "model": {"states", "transitions"},
    "scenario": {"n", "seed", "censoring", "horizon", "proxy_shift", "direct_effect", "level_probs", "smoker"},
    "data": {"trajectories", "policies", "exposure", "quotes"},
    "fit": {"mode", "continuous", "categorical", "age", "contributions"},
    "product": {"discount", "terminal_age"},
    "price": {"modes", "best_estimate", "blind", "issue_age", "window"},
    "fair": {"mode", "model", "issue_age", "ot_covariates"},
    "adversarial": {"alphas", "variant", "epochs", "batch_size", "patience", "lr", "seed", "hidden",
                    "representation"},
    "report": {"issue_age"},
}

QUOTE_COLUMNS = ["individual_id", "mode", "issue_age", "sensitive", "epv_benefits", "epv_premium_annuity",
                 "lump_sum", "level_premium"]
REPORT_COLUMNS = ["method", "alpha", "issue_age", "sensitive", "n", "mean_premium", "parity_gap", "max_ks"]


class ConfigError(ValidationError):
    pass


class RunConfig:
    """Parsed config with typed accessors; unknown sections and keys are rejected."""

    def __init__(self, path, seed: Optional[int] = None):
        self.path = Path(path)
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        with open(self.path, encoding="utf-8") as fh:  # OSError -> exit 3
            try:
                cp.read_file(fh)
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse config: {exc}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            unknown = sorted(set(cp[sec]) - SCHEMA[sec])
            if unknown:
                raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(unknown)}")
        self.cp = cp
        self.seed_override = seed

    def has(self, section, key) -> bool:
        return self.cp.has_option(section, key)

    def get(self, section, key, default=None, required=False) -> Optional[str]:
        if self.has(section, key):
            return self.cp[section][key].strip()
        if required:
            raise ConfigError(f"missing required key '{key}' in [{section}]")
        return default

    def number(self, section, key, kind=float, default=None, required=False):
        text = self.get(section, key, None, required)
        if text is None:
            return default
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {text!r} is not a valid {kind.__name__}") from None

    def boolean(self, section, key, default=False) -> bool:
        text = self.get(section, key)
        if text is None:
            return default
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"[{section}] {key} = {text!r} is not a boolean")

    def items(self, section, key, default=()) -> list:
        text = self.get(section, key)
        if text is None:
            return list(default)
        return [t.strip() for t in text.split(",") if t.strip()]

    def seed(self, section) -> int:
        if self.seed_override is not None:
            return self.seed_override
        return self.number(section, "seed", int, required=True)

    def input_path(self, section, key, required=True) -> Optional[Path]:
        text = self.get(section, key, None, required)
        if text is None:
            return None
        p = Path(text)
        if not p.is_absolute():
            p = self.path.parent / p
        if not p.exists():
            raise FileNotFoundError(f"[{section}] {key}: {p} does not exist")
        return p

    def transition_spec(self) -> TransitionSpec:
        if not self.cp.has_section("model"):
            return three_state_spec()
        states = self.items("model", "states")
        trans = [tuple(t.split(">")) for t in self.items("model", "transitions")]
        if any(len(t) != 2 for t in trans):
            raise ConfigError("[model] transitions must look like 'From>To'")
        return TransitionSpec([s for s in states], [(a.strip(), b.strip()) for a, b in trans])

    def product(self) -> ProductSpec:
        discount = self.number("product", "discount", float, 1 / 1.03)
        terminal = self.number("product", "terminal_age", int, 110)
        if not 0 < discount <= 1:
            raise ConfigError("[product] discount must lie in (0, 1]")
        return ltci_product(discount, terminal)


# --- shared helpers -------------------------------------------------------------

def _model_from_dir(cfg: RunConfig, section: str, key: str):
    d = cfg.input_path(section, key)
    return load_glm_model(d / "model_card.ini", d / "coefficients.csv")


def _check_issue_age(x) -> None:
    if not MIN_ISSUE_AGE <= x < MAX_ISSUE_AGE + 1:
        raise ValidationError(f"issue age {x} outside [{MIN_ISSUE_AGE}, {MAX_ISSUE_AGE}]")


def _quote_records(quotes):
    for q in quotes:
        yield [q.individual_id, q.mode, q.issue_age, q.sensitive, q.epv_benefits, q.epv_premium_annuity,
               q.lump_sum, "" if q.level_premium is None else q.level_premium]


def _report_records(method, alpha, quotes):
    rep = demographic_parity_gap(quotes)
    for level in rep.means:
        yield [method, alpha, rep.age, level, rep.counts[level], rep.means[level], rep.gap, rep.max_ks]


def _exposure_with(frame: pd.DataFrame, policies, names) -> pd.DataFrame:
    """Exposure frame with covariate columns replaced by those of ``policies``."""
    base = frame.drop(columns=[c for c in names if c in frame])
    cov = pd.DataFrame({"individual_id": [str(p.individual_id) for p in policies],
                        **{n: [p.covariates[n] for p in policies] for n in names}})
    return base.merge(cov, on="individual_id", how="inner", sort=False)


def smoothed_premium_curves(quotes, window: int = 5) -> pd.DataFrame:
    """Per-mode, per-group mean premium by issue age and its centred moving average.

    The smoothed value at age ``a`` averages every quote with issue age in
    ``[a - window//2, a + window//2]``.
    """
    frame = pd.DataFrame({"mode": [q.mode for q in quotes], "sensitive": [q.sensitive for q in quotes],
                          "issue_age": [q.issue_age for q in quotes], "lump_sum": [q.lump_sum for q in quotes]})
    half = window // 2
    recs = []
    for (mode, level), g in frame.groupby(["mode", "sensitive"], sort=True):
        stats = g.groupby("issue_age")["lump_sum"].agg(["sum", "count"])
        for a in stats.index:
            near = stats.loc[(stats.index >= a - half) & (stats.index <= a + half)]
            recs.append((mode, level, int(a), int(stats.at[a, "count"]), stats.at[a, "sum"] / stats.at[a, "count"],
                         near["sum"].sum() / near["count"].sum()))
    return pd.DataFrame(recs, columns=["mode", "sensitive", "issue_age", "n", "mean_premium", "smoothed_premium"])


# --- commands -------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path) -> None:
    from .synthetic import default_scenario, generate_population, generate_study

    n = cfg.number("scenario", "n", int, required=True)
    if n < 1:
        raise ConfigError("[scenario] n must be at least 1")
    kw = {}
    for key in ("horizon", "proxy_shift", "direct_effect"):
        if cfg.has("scenario", key):
            kw[key] = cfg.number("scenario", key)
    if cfg.has("scenario", "level_probs"):
        try:
            kw["level_probs"] = tuple(float(p) for p in cfg.items("scenario", "level_probs"))
        except ValueError:
            raise ConfigError("[scenario] level_probs must be a comma-separated list of numbers") from None
    spec = default_scenario(n=n, seed=cfg.seed("scenario"), censoring=cfg.get("scenario", "censoring", "exact"),
                            smoker=cfg.boolean("scenario", "smoker", True), **kw)
    pop = generate_population(spec)
    trajs = generate_study(spec, pop)
    write_trajectories_csv(out / "trajectories.csv", trajs)
    write_policies_csv(out / "policies.csv", pop)


def cmd_transform(cfg: RunConfig, out: Path) -> None:
    spec = cfg.transition_spec()
    trajs = read_trajectories_csv(cfg.input_path("data", "trajectories"), spec)
    pol_path = cfg.input_path("data", "policies", required=False)
    rows = []
    for t in trajs:
        rows.extend(split_by_age(expand_exposure(t, spec)))
    if pol_path is not None:
        policies = read_policies_csv(pol_path, cfg.items("fit", "categorical"))
        rows, dropped = merge_covariates(rows, policies)
        if dropped:
            print(f"dropped {dropped} exposure rows without covariates", file=sys.stderr)
    write_exposure_csv(out / "exposure.csv", rows)


def cmd_fit(cfg: RunConfig, out: Path) -> None:
    spec = cfg.transition_spec()
    mode = cfg.get("fit", "mode", "blind")
    if mode not in ("blind", "best_estimate"):
        raise ConfigError(f"[fit] mode must be 'blind' or 'best_estimate', got {mode!r}")
    continuous = cfg.items("fit", "continuous")
    categorical = cfg.items("fit", "categorical")
    frame = read_exposure_frame(cfg.input_path("data", "exposure"), categorical)
    missing = [c for c in continuous + categorical if c not in frame]
    if missing:
        raise ConfigError(f"exposure file lacks covariate column(s) {missing}")
    model = fit_rate_model(frame, spec, continuous, categorical, uses_sensitive=(mode == "best_estimate"),
                           age=cfg.get("fit", "age", "linear"))
    write_model_card(out / "model_card.ini", model, mode)
    table = model.coefficient_table()
    write_csv(out / "coefficients.csv", list(table.columns), table.itertuples(index=False))
    if cfg.boolean("fit", "contributions", True):
        contrib = likelihood_contributions(frame, model)
        write_csv(out / "likelihood_contributions.csv", list(contrib.columns), contrib.itertuples(index=False))


def cmd_price(cfg: RunConfig, out: Path) -> None:
    modes = cfg.items("price", "modes", MODES)
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown pricing mode {mode!r}; expected one of {', '.join(MODES)}")
    policies = read_policies_csv(cfg.input_path("data", "policies"), cfg.items("fit", "categorical"))
    x_star = cfg.number("price", "issue_age", float)
    for age in ([x_star] if x_star is not None else [p.issue_age for p in policies]):
        _check_issue_age(age)
    models = {}
    if "best_estimate" in modes or "fairness_adjusted" in modes:
        best = _model_from_dir(cfg, "price", "best_estimate")
        if "best_estimate" in modes:
            models["best_estimate"] = best
        if "fairness_adjusted" in modes:
            models["fairness_adjusted"] = DiscriminationFreeModel(best, policy_level_distribution(policies))
    if "blind" in modes:
        models["blind"] = _model_from_dir(cfg, "price", "blind")
    quotes = quote_batch(policies, models, cfg.product(), modes, issue_age=x_star)
    write_csv(out / "quotes.csv", QUOTE_COLUMNS, _quote_records(quotes))
    curves = smoothed_premium_curves(quotes, cfg.number("price", "window", int, 5))
    write_csv(out / "premium_by_age.csv", list(curves.columns), curves.itertuples(index=False))


def cmd_fair(cfg: RunConfig, out: Path) -> None:
    mode = cfg.get("fair", "mode", required=True)
    if mode not in ("post", "pre", "adv"):
        raise ConfigError(f"[fair] mode must be post, pre or adv, got {mode!r}")
    x_star = cfg.number("fair", "issue_age", int, 65)
    _check_issue_age(x_star)
    categorical = cfg.items("fit", "categorical")
    continuous = cfg.items("fit", "continuous")
    policies = read_policies_csv(cfg.input_path("data", "policies"), categorical)
    product = cfg.product()
    records = []

    if mode == "post":
        best = _model_from_dir(cfg, "fair", "model")
        adj = DiscriminationFreeModel(best, policy_level_distribution(policies))
        quotes = quote_batch(policies, {"best_estimate": best, "fairness_adjusted": adj}, product, issue_age=x_star)
        write_csv(out / "fair_quotes.csv", QUOTE_COLUMNS, _quote_records(quotes))
        for m in ("best_estimate", "fairness_adjusted"):
            records.extend(_report_records(m, "", [q for q in quotes if q.mode == m]))

    elif mode == "pre":
        ot_cols = cfg.items("fair", "ot_covariates")
        if not ot_cols:
            raise ConfigError("[fair] ot_covariates must list at least one covariate")
        unknown = [c for c in ot_cols if c not in (policies[0].covariates if policies else {})]
        if unknown:
            raise ConfigError(f"[fair] ot_covariates not in policy file: {unknown}")
        transformed = ot_preprocess(policies, ot_cols)
        write_policies_csv(out / "policies_ot.csv", transformed)
        ks_recs = []
        for c in ot_cols:
            ks = ks_to_pooled([p.covariates[c] for p in transformed], [p.sensitive for p in policies])
            ks_recs.extend((c, lv, v) for lv, v in ks.items())
        write_csv(out / "ot_ks.csv", ["covariate", "sensitive", "ks_to_pooled"], ks_recs)
        frame = read_exposure_frame(cfg.input_path("data", "exposure"), categorical)
        spec = cfg.transition_spec()
        names = continuous + categorical
        for method, pols in (("blind", policies), ("ot", transformed)):
            model = fit_rate_model(_exposure_with(frame, pols, names), spec, continuous, categorical)
            quotes = quote_batch(pols, {"blind": model}, product, issue_age=x_star)
            records.extend(_report_records(method, "", quotes))

    else:
        from .adversarial import NetConfig, TrainConfig, adversarial_fit, adversarial_fit_divided

        variant = cfg.get("adversarial", "variant", "shared")
        if variant not in ("shared", "divided"):
            raise ConfigError("[adversarial] variant must be shared or divided")
        try:
            alphas = [float(a) for a in cfg.items("adversarial", "alphas", ["0", "2"])]
        except ValueError:
            raise ConfigError("[adversarial] alphas must be numbers") from None
        net_cfg = NetConfig(hidden=cfg.number("adversarial", "hidden", int, 16),
                            representation=cfg.number("adversarial", "representation", int, 8))
        patience = cfg.get("adversarial", "patience", "20")
        if patience.lower() != "none":
            patience = cfg.number("adversarial", "patience", int, 20)
        train_cfg = TrainConfig(
            epochs=cfg.number("adversarial", "epochs", int, 200),
            batch_size=cfg.number("adversarial", "batch_size", int, 256),
            lr_model=cfg.number("adversarial", "lr", float, 1e-3),
            lr_adversary=cfg.number("adversarial", "lr", float, 1e-3),
            patience=None if isinstance(patience, str) else patience,
        )
        seed = cfg.seed("adversarial")
        frame = read_exposure_frame(cfg.input_path("data", "exposure"), categorical)
        spec = cfg.transition_spec()
        fit = adversarial_fit if variant == "shared" else adversarial_fit_divided
        for alpha in alphas:
            model = fit(frame, policies, spec, alpha, continuous, categorical, net_cfg, train_cfg, seed)
            nets = [model] if variant == "shared" else model.nets
            logs = []
            for m, net in enumerate(nets, start=1):
                lf = net.log_frame()
                lf.insert(0, "transition", "all" if variant == "shared" else m)
                logs.append(lf)
            log = pd.concat(logs, ignore_index=True)
            write_csv(out / f"training_log_alpha{fmt(alpha)}.csv", list(log.columns), log.itertuples(index=False))
            quotes = quote_batch(policies, {"blind": model}, product, issue_age=x_star)
            records.extend(_report_records("adversarial", alpha, quotes))
    write_csv(out / "fairness_report.csv", REPORT_COLUMNS, records)


def cmd_report(cfg: RunConfig, out: Path) -> None:
    frame = pd.read_csv(cfg.input_path("data", "quotes"), dtype={"individual_id": str, "sensitive": str, "mode": str})
    missing = {"mode", "issue_age", "sensitive", "lump_sum"} - set(frame.columns)
    if missing:
        raise ValidationError(f"quote file lacks columns {sorted(missing)}")
    age = cfg.number("report", "issue_age", int)
    if age is not None:
        frame = frame[frame["issue_age"] == age]
        if frame.empty:
            raise ValidationError(f"no quotes at issue age {age}")
    elif frame["issue_age"].nunique() > 1:
        raise ValidationError("quotes span several issue ages; set [report] issue_age")

    class _Q:  # minimal quote view for the parity metric
        __slots__ = ("issue_age", "sensitive", "lump_sum")

        def __init__(self, a, s, v):
            self.issue_age, self.sensitive, self.lump_sum = a, s, v

    records, pairs = [], []
    for mode, g in frame.groupby("mode", sort=True):
        quotes = [_Q(int(a), s, float(v)) for a, s, v in zip(g["issue_age"], g["sensitive"], g["lump_sum"])]
        records.extend(_report_records(mode, "", quotes))
        rep = demographic_parity_gap(quotes)
        pairs.extend((mode, a, b, v) for (a, b), v in rep.ks.items())
    write_csv(out / "parity_report.csv", REPORT_COLUMNS, records)
    write_csv(out / "parity_ks.csv", ["method", "level_a", "level_b", "ks"], pairs)


COMMANDS = {
    "simulate": cmd_simulate,
    "transform": cmd_transform,
    "fit": cmd_fit,
    "price": cmd_price,
    "fair": cmd_fair,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairmsm", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="key = value config file")
    parser.add_argument("--out", default=".", help="output directory (created if needed)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None, help="CPU threads for numerical kernels")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return 2
        try:
            import torch
            torch.set_num_threads(args.threads)
        except ImportError:
            pass
    try:
        cfg = RunConfig(args.config, args.seed)
        out = ensure_dir(args.out)
        COMMANDS[args.command](cfg, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
