"""Adversarial in-processing for multi-state rates.

A shared encoder maps static covariates to a representation ``W = f(z)``;
one regressor per transition predicts ``ln lambda_m = g_m(W, x)`` from the
representation and age; an adversary ``h(W)`` tries to recover the
sensitive attribute. The objective is

    Loss = mean Poisson loss over all exposure rows - alpha * Loss_Adv

with ``Loss_Adv`` the cross-entropy of ``h`` averaged over policies (one
term per insured). The model minimises it; the adversary is trained to
minimise its own cross-entropy, which is the same as maximising ``Loss``
whenever ``alpha > 0`` and keeps the adversary meaningful as a diagnostic
when ``alpha = 0``.

Everything runs in float64 on CPU so gradient checks are tight and fits are
reproducible for a given seed.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch import nn

from .core import Policy, RateModel, TransitionSpec, as_frame
from .errors import NonFiniteLoss, ValidationError
from .glm import Encoding
from .pipeline import policies_to_frame

DTYPE = torch.float64


@dataclass
class NetConfig:
    hidden: int = 16
    depth: int = 2
    representation: int = 8
    regressor_hidden: int = 16
    adversary_hidden: int = 16


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr_model: float = 1e-3
    lr_adversary: float = 1e-3
    patience: Optional[int] = 20
    val_fraction: float = 0.1
    adversary_steps: int = 1
    restore_best: bool = False
    schedule: str = "constant"  # or "cosine": both learning rates anneal to 0 over the epoch budget


class _MLP(nn.Module):
    """Tanh MLP with a linear skip path from input to output."""

    def __init__(self, n_in, n_out, hidden, depth):
        super().__init__()
        layers, width = [], n_in
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.Tanh()]
            width = hidden
        layers.append(nn.Linear(width, n_out))
        self.body = nn.Sequential(*layers)
        self.skip = nn.Linear(n_in, n_out, bias=False)

    def forward(self, x):
        return self.body(x) + self.skip(x)


class _Network(nn.Module):
    def __init__(self, n_features, n_transitions, n_levels, cfg: NetConfig):
        super().__init__()
        self.encoder = _MLP(n_features, cfg.representation, cfg.hidden, cfg.depth)
        self.regressors = nn.ModuleList(
            _MLP(cfg.representation + 1, 1, cfg.regressor_hidden, 1) for _ in range(n_transitions)
        )
        adv = [nn.Linear(cfg.representation, cfg.adversary_hidden), nn.Tanh(),
               nn.Linear(cfg.adversary_hidden, n_levels)]
        self.adversary = nn.Sequential(*adv)

    def model_parameters(self):
        return list(self.encoder.parameters()) + list(self.regressors.parameters())

    def log_rates(self, z, x):
        """``(n, M)`` log intensities for standardised features and ages."""
        w = self.encoder(z)
        wx = torch.cat([w, x[:, None]], dim=1)
        return torch.cat([g(wx) for g in self.regressors], dim=1)


@dataclass
class TrainingData:
    """Tensors for one fit: per-policy features and per-row Poisson data."""

    Z: torch.Tensor          # (n_policies, d) standardised features
    s: torch.Tensor          # (n_policies,) level codes
    row_policy: torch.Tensor  # (n_rows,) index into Z
    row_transition: torch.Tensor  # (n_rows,) 0-based transition index
    x: torch.Tensor          # (n_rows,) standardised age
    y: torch.Tensor          # (n_rows,) events
    log_exposure: torch.Tensor

    def subset(self, policies: np.ndarray) -> "TrainingData":
        keep = np.zeros(len(self.Z), dtype=bool)
        keep[policies] = True
        new_index = -np.ones(len(self.Z), dtype=np.int64)
        new_index[policies] = np.arange(len(policies))
        rp = self.row_policy.numpy()
        rows = torch.from_numpy(np.flatnonzero(keep[rp]))
        return TrainingData(
            self.Z[policies], self.s[policies], torch.from_numpy(new_index[rp[rows.numpy()]]),
            self.row_transition[rows], self.x[rows], self.y[rows], self.log_exposure[rows],
        )


@dataclass
class Preprocessor:
    encoding: Encoding
    mean: np.ndarray
    scale: np.ndarray
    age_center: float
    age_scale: float

    def features(self, covariates: pd.DataFrame) -> np.ndarray:
        X = self.encoding.matrix(covariates, np.zeros(len(covariates)))[:, 1:-1]
        return (X - self.mean) / self.scale

    def ages(self, ages) -> np.ndarray:
        return (np.asarray(ages, dtype=float) - self.age_center) / self.age_scale


def _losses(net: _Network, data: TrainingData, alpha: float, rows=None, pols=None):
    if rows is None:
        rp, rt, x, y, lt = data.row_policy, data.row_transition, data.x, data.y, data.log_exposure
    else:
        rp, rt, x, y, lt = (data.row_policy[rows], data.row_transition[rows], data.x[rows],
                            data.y[rows], data.log_exposure[rows])
    Zp, sp = (data.Z, data.s) if pols is None else (data.Z[pols], data.s[pols])
    eta = net.log_rates(data.Z[rp], x).gather(1, rt[:, None])[:, 0] + lt
    pred = torch.mean(torch.exp(eta) - y * eta + torch.lgamma(y + 1.0))
    adv = nn.functional.cross_entropy(net.adversary(net.encoder(Zp)), sp)
    return pred - alpha * adv, pred, adv


def adversary_accuracy(net: _Network, data: TrainingData) -> float:
    with torch.no_grad():
        pred = net.adversary(net.encoder(data.Z)).argmax(dim=1)
    return float((pred == data.s).double().mean())


class AdversarialNet(RateModel):
    """Fitted encoder/regressors/adversary usable as a :class:`RateModel`."""

    uses_sensitive = False

    def __init__(self, spec: TransitionSpec, network: _Network, prep: Preprocessor, levels: tuple,
                 alpha: float, log: Optional[list] = None):
        self.spec = spec
        self.network = network
        self.prep = prep
        self.levels = tuple(levels)
        self.alpha = float(alpha)
        self.log = log or []

    def log_rates(self, covariates, ages, sensitive=None) -> np.ndarray:
        cov = as_frame(covariates)
        z = torch.from_numpy(self.prep.features(cov))
        x = torch.from_numpy(self.prep.ages(np.atleast_1d(ages)))
        with torch.no_grad():
            return self.network.log_rates(z, x).numpy().copy()

    def representation(self, covariates) -> np.ndarray:
        z = torch.from_numpy(self.prep.features(as_frame(covariates)))
        with torch.no_grad():
            return self.network.encoder(z).numpy().copy()

    def adversary_accuracy(self, policies: Sequence[Policy]) -> float:
        w = torch.from_numpy(self.representation(policies_to_frame(policies, self.prep.encoding.covariate_names)))
        codes = torch.tensor([self.levels.index(p.sensitive) for p in policies])
        with torch.no_grad():
            pred = self.network.adversary(w).argmax(dim=1)
        return float((pred == codes).double().mean())

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.log, columns=["epoch", "loss", "loss_pred", "loss_adv", "adversary_accuracy", "val_loss"])


class DividedAdversarialModel(RateModel):
    """One independently trained representation/adversary pair per transition."""

    uses_sensitive = False

    def __init__(self, spec: TransitionSpec, nets: Sequence[AdversarialNet]):
        self.spec = spec
        self.nets = list(nets)

    def log_rates(self, covariates, ages, sensitive=None) -> np.ndarray:
        return np.column_stack([net.log_rates(covariates, ages)[:, 0] for net in self.nets])


def prepare_data(exposure: pd.DataFrame, policies: Sequence[Policy], continuous=(), categorical=(),
                 transitions: Optional[Sequence[int]] = None):
    """Build tensors and the preprocessing state from exposure rows and policies.

    ``transitions`` (1-based ids) restricts the rows used; their order fixes
    the regressor order.
    """
    pol_frame = policies_to_frame(policies, list(continuous) + list(categorical))
    enc = Encoding.from_frame(pol_frame.assign(age=0), continuous, categorical)
    raw = enc.matrix(pol_frame, np.zeros(len(pol_frame)))[:, 1:-1]
    mean = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale[scale == 0] = 1.0
    levels = tuple(sorted({p.sensitive for p in policies}))
    if None in levels:
        raise ValidationError("every policy needs a sensitive attribute")
    pos = {p.individual_id: k for k, p in enumerate(policies)}

    rows = exposure
    if transitions is not None:
        rows = rows[rows["transition"].isin(list(transitions))]
        tmap = {m: j for j, m in enumerate(transitions)}
    else:
        tmap = {m: m - 1 for m in sorted(rows["transition"].unique())}
    rows = rows[rows["individual_id"].isin(pos)]
    ages = rows["age"].to_numpy(dtype=float)
    prep = Preprocessor(enc, mean, scale, float(ages.mean()) if len(ages) else 0.0,
                        float(ages.std()) if len(ages) and ages.std() > 0 else 1.0)
    data = TrainingData(
        Z=torch.from_numpy((raw - mean) / scale),
        s=torch.tensor([levels.index(p.sensitive) for p in policies]),
        row_policy=torch.tensor(rows["individual_id"].map(pos).to_numpy(dtype=np.int64)),
        row_transition=torch.tensor(rows["transition"].map(tmap).to_numpy(dtype=np.int64)),
        x=torch.from_numpy(prep.ages(ages)),
        y=torch.from_numpy(rows["event"].to_numpy(dtype=float)),
        log_exposure=torch.from_numpy(np.log(rows["exposure"].to_numpy(dtype=float))),
    )
    return data, prep, levels


def _train(data: TrainingData, n_transitions: int, n_levels: int, alpha: float, net_cfg: NetConfig,
           train_cfg: TrainConfig, seed: int):
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = _Network(data.Z.shape[1], n_transitions, n_levels, net_cfg).to(DTYPE)
    # start each regressor at its transition's crude occurrence-exposure rate
    with torch.no_grad():
        expo = torch.exp(data.log_exposure)
        for m, g in enumerate(net.regressors):
            sel = data.row_transition == m
            events, time_at_risk = float(data.y[sel].sum()), float(expo[sel].sum())
            if events > 0 and time_at_risk > 0:
                g.body[-1].bias.fill_(math.log(events / time_at_risk))

    n_pol = len(data.Z)
    perm = rng.permutation(n_pol)
    n_val = int(round(train_cfg.val_fraction * n_pol)) if train_cfg.patience is not None else 0
    val = data.subset(np.sort(perm[:n_val])) if n_val else None
    train = data.subset(np.sort(perm[n_val:])) if n_val else data

    opt_model = torch.optim.Adam(net.model_parameters(), lr=train_cfg.lr_model)
    opt_adv = torch.optim.Adam(net.adversary.parameters(), lr=train_cfg.lr_adversary)
    if train_cfg.schedule not in ("constant", "cosine"):
        raise ValidationError(f"unknown schedule {train_cfg.schedule!r}")
    scheds = []
    if train_cfg.schedule == "cosine":
        scheds = [torch.optim.lr_scheduler.CosineAnnealingLR(o, T_max=train_cfg.epochs) for o in (opt_model, opt_adv)]
    n_rows = len(train.y)
    n_train_pol = len(train.Z)
    bs = train_cfg.batch_size
    best, stale = math.inf, 0
    best_state = None
    log = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = torch.from_numpy(rng.permutation(n_rows))
        for start in range(0, n_rows, bs):
            rows = order[start:start + bs]
            pols = torch.from_numpy(rng.integers(0, n_train_pol, size=min(bs, n_train_pol)))
            for _ in range(train_cfg.adversary_steps):
                opt_adv.zero_grad()
                w = net.encoder(train.Z[pols]).detach()
                nn.functional.cross_entropy(net.adversary(w), train.s[pols]).backward()
                opt_adv.step()
            opt_model.zero_grad()
            total, _, _ = _losses(net, train, alpha, rows, pols)
            total.backward()
            opt_model.step()
        for sch in scheds:
            sch.step()
        with torch.no_grad():
            total, pred, adv = _losses(net, train, alpha)
            val_loss = float(_losses(net, val, alpha)[0]) if val is not None else float("nan")
        if not all(math.isfinite(float(v)) for v in (total, pred, adv)):
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", epoch)
        log.append((epoch, float(total), float(pred), float(adv), adversary_accuracy(net, train), val_loss))
        if val is not None:
            if val_loss < best - 1e-12:
                best, stale = val_loss, 0
                best_state = copy.deepcopy(net.state_dict())
            else:
                stale += 1
                if stale >= train_cfg.patience:
                    break
    if train_cfg.restore_best and best_state is not None:
        net.load_state_dict(best_state)  # weights from the best validation epoch
    return net, log


def adversarial_fit(exposure: pd.DataFrame, policies: Sequence[Policy], spec: TransitionSpec, alpha: float,
                    continuous=(), categorical=(), net_config: Optional[NetConfig] = None,
                    train_config: Optional[TrainConfig] = None, seed: int = 0) -> AdversarialNet:
    """Shared representation and adversary across all transitions."""
    if alpha < 0:
        raise ValidationError("alpha must be non-negative")
    net_config = net_config or NetConfig()
    train_config = train_config or TrainConfig()
    data, prep, levels = prepare_data(exposure, policies, continuous, categorical,
                                      list(range(1, spec.n_transitions + 1)))
    net, log = _train(data, spec.n_transitions, len(levels), alpha, net_config, train_config, seed)
    return AdversarialNet(spec, net, prep, levels, alpha, log)


def adversarial_fit_divided(exposure: pd.DataFrame, policies: Sequence[Policy], spec: TransitionSpec,
                            alpha: float, continuous=(), categorical=(), net_config: Optional[NetConfig] = None,
                            train_config: Optional[TrainConfig] = None, seed: int = 0) -> DividedAdversarialModel:
    """Separate encoder/regressor/adversary per transition (seed ``seed + m - 1`` for transition m)."""
    if alpha < 0:
        raise ValidationError("alpha must be non-negative")
    net_config = net_config or NetConfig()
    train_config = train_config or TrainConfig()
    nets = []
    for m in range(1, spec.n_transitions + 1):
        sub = TransitionSpec(spec.states, [spec.transitions[m - 1]])
        data, prep, levels = prepare_data(exposure, policies, continuous, categorical, [m])
        net, log = _train(data, 1, len(levels), alpha, net_config, train_config, seed + m - 1)
        nets.append(AdversarialNet(sub, net, prep, levels, alpha, log))
    return DividedAdversarialModel(spec, nets)


def _flat_grad(loss, params):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)
    ])


def total_loss_gradient(net: AdversarialNet, data: TrainingData, alpha: Optional[float] = None) -> torch.Tensor:
    """Analytic gradient of the total loss with respect to every parameter."""
    alpha = net.alpha if alpha is None else alpha
    params = list(net.network.parameters())
    total, _, _ = _losses(net.network, data, alpha)
    return _flat_grad(total, params)


def gradient_check(net: AdversarialNet, data: TrainingData, eps: float = 1e-3, n_params: int = 200,
                   alpha: Optional[float] = None, seed: int = 0, floor: float = 1e-6, stencil: int = 5) -> float:
    """Largest relative error between autograd and finite-difference gradients.

    Up to ``n_params`` parameters are sampled; the relative error uses the
    denominator ``max(|analytic|, |numeric|, floor)``. The default five-point
    stencil has O(eps^4) truncation error, which allows a step large enough
    to keep rounding noise well below the tolerance even where gradients are
    tiny (near a stationary point); ``stencil=3`` gives the plain central
    difference.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValidationError("eps must lie in [1e-7, 1e-3]")
    if stencil not in (3, 5):
        raise ValidationError("stencil must be 3 or 5")
    weights = {-1: -0.5, 1: 0.5} if stencil == 3 else {-2: 1 / 12, -1: -8 / 12, 1: 8 / 12, 2: -1 / 12}
    alpha = net.alpha if alpha is None else alpha
    network = copy.deepcopy(net.network)
    params = list(network.parameters())
    total, _, _ = _losses(network, data, alpha)
    analytic = _flat_grad(total, params).detach().numpy()
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            view = params[k].view(-1)
            j = int(flat - offsets[k])
            orig = float(view[j])
            numeric = 0.0
            for h, w in weights.items():
                view[j] = orig + h * eps
                numeric += w * float(_losses(network, data, alpha)[0])
            view[j] = orig
            numeric /= eps
            a = analytic[flat]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def probe_accuracy(model: AdversarialNet, policies: Sequence[Policy], steps: int = 500, lr: float = 1e-2,
                   seed: int = 0) -> float:
    """Accuracy of a fresh adversary trained to convergence on the frozen representation.

    Unlike the adversary trained alongside the encoder, the probe cannot
    lag behind it, so this measures what ``W`` actually reveals about the
    sensitive attribute (training-set accuracy, full-batch Adam).
    """
    w = torch.from_numpy(model.representation(policies_to_frame(policies, model.prep.encoding.covariate_names)))
    codes = torch.tensor([model.levels.index(p.sensitive) for p in policies])
    cfg_hidden = model.network.adversary[0].out_features
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        probe = nn.Sequential(nn.Linear(w.shape[1], cfg_hidden), nn.Tanh(),
                              nn.Linear(cfg_hidden, len(model.levels))).to(DTYPE)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        nn.functional.cross_entropy(probe(w), codes).backward()
        opt.step()
    with torch.no_grad():
        return float((probe(w).argmax(dim=1) == codes).double().mean())
