"""Minibatch SGD in three modes (plain, data augmentation, feature averaging)
with per-epoch telemetry."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, softmax

from .groups import FiniteGroupAction
from .losses import get_loss
from .models import ModelSpec, ParamVector, init_params, predictor, value_and_gradient
from .symmetrization import (SymmetrizationMode, augmented_risk, augmented_risk_mc, empirical_risk,
                             orbit_prediction_variance, symmetrized, _rows)


class ConfigError(ValueError):
    """Training configuration incompatible with itself, the spec, or the data."""


@dataclass(frozen=True)
class TrainMode:
    """``baseline``; ``da`` with ``m`` sampled transforms per example (or every
    element once when ``exhaustive``); ``fa`` through the model's averaging layer.

    For Monte Carlo FA, ``per_epoch=True`` draws one fixed element set per
    epoch instead of fresh draws on every forward pass.
    """

    kind: str = "baseline"
    m: int = 1
    exhaustive: bool = False
    symmetrization: SymmetrizationMode | None = None
    per_epoch: bool = False

    def __post_init__(self):
        if self.kind not in ("baseline", "da", "fa"):
            raise ConfigError(f"unknown training mode {self.kind!r}")
        if self.kind == "da" and self.m < 1:
            raise ConfigError("data augmentation needs m >= 1")

    @classmethod
    def baseline(cls) -> "TrainMode":
        return cls("baseline")

    @classmethod
    def da(cls, m: int = 1, exhaustive: bool = False) -> "TrainMode":
        return cls("da", m=m, exhaustive=exhaustive)

    @classmethod
    def fa(cls, mode: SymmetrizationMode | None = None, per_epoch: bool = False) -> "TrainMode":
        return cls("fa", symmetrization=mode, per_epoch=per_epoch)

    @property
    def label(self) -> str:
        if self.kind == "da":
            return "da(exhaustive)" if self.exhaustive else f"da({self.m})"
        if self.kind == "fa":
            s = self.symmetrization
            return "fa" if s is None else f"fa({s.kind}" + (f",{s.k})" if s.kind == "monte_carlo" else ")")
        return "baseline"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "m": self.m, "exhaustive": self.exhaustive,
                "symmetrization": self.symmetrization.to_dict() if self.symmetrization else None,
                "per_epoch": self.per_epoch}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainMode":
        s = d.get("symmetrization")
        return cls(d["kind"], int(d.get("m", 1)), bool(d.get("exhaustive", False)),
                   SymmetrizationMode.from_dict(s) if s else None, bool(d.get("per_epoch", False)))


@dataclass(frozen=True)
class Telemetry:
    gradient_variance: bool = False
    orbit_variance: bool = False
    eval_with_and_without_fa: bool = False


@dataclass(frozen=True, eq=False)
class TrainConfig:
    mode: TrainMode = field(default_factory=TrainMode)
    loss: str = "cross_entropy"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    schedule: str = "constant"
    seed: int = 0
    group: FiniteGroupAction | None = None
    telemetry: Telemetry = field(default_factory=Telemetry)
    probe_batches: int = 20
    orbit_eval_size: int = 200

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.schedule not in ("constant", "robbins_monro"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not get_loss(self.loss).differentiable:
            raise ConfigError(f"cannot train on the non-differentiable {self.loss} loss")

    def step_size(self, t: int, steps_per_epoch: int) -> float:
        """Constant, or ``lr / (1 + t / T0)`` with ``T0`` one epoch of steps."""
        if self.schedule == "constant":
            return self.lr
        return self.lr / (1.0 + t / steps_per_epoch)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_loss_plain: float
    test_loss: float
    train_loss_fa_eval: float = math.nan
    test_loss_fa_eval: float = math.nan
    train_loss_single: float = math.nan
    test_loss_single: float = math.nan
    gradient_variance: float = math.nan
    mean_orbit_variance_in_dist: float = math.nan
    mean_orbit_variance_ood: float = math.nan
    eval_seed: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class TrainTelemetry:
    """One record per completed epoch plus the record at initialization."""

    mode: str
    initial: EpochRecord | None = None
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def series(self, metric: str, include_initial: bool = True) -> np.ndarray:
        recs = ([self.initial] if include_initial and self.initial else []) + self.records
        return np.array([getattr(r, metric) for r in recs], dtype=float)

    def rows(self):
        """Long-format rows ``(epoch, metric, value, split)``."""
        metrics = [("train_loss", "loss", "train"), ("train_loss_plain", "loss_plain", "train"),
                   ("test_loss", "loss", "test"), ("train_loss_fa_eval", "loss_fa_eval", "train"),
                   ("test_loss_fa_eval", "loss_fa_eval", "test"),
                   ("train_loss_single", "loss_single", "train"),
                   ("test_loss_single", "loss_single", "test"),
                   ("gradient_variance", "gradient_variance", "train"),
                   ("mean_orbit_variance_in_dist", "orbit_variance", "test"),
                   ("mean_orbit_variance_ood", "orbit_variance", "ood")]
        for r in ([self.initial] if self.initial else []) + self.records:
            for attr, metric, split in metrics:
                v = getattr(r, attr)
                if not math.isnan(v):
                    yield r.epoch, metric, v, split
            for metric, v in sorted(r.extra.items()):
                yield r.epoch, metric, float(v), "train"

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "metric", "value", "split"])
            for e, metric, v, split in self.rows():
                w.writerow([e, metric, format(v, ".17g"), split])
        return path

    def to_dict(self) -> dict:
        return {"mode": self.mode, "initial": asdict(self.initial) if self.initial else None,
                "records": [asdict(r) for r in self.records]}


# -- helpers -----------------------------------------------------------------------------


def _resolve(spec: ModelSpec, config: TrainConfig) -> tuple[ModelSpec, FiniteGroupAction | None]:
    mode = config.mode
    group = config.group
    if spec.averaging is not None:
        if group is not None and group.order != spec.averaging.group.order:
            raise ConfigError("config group differs from the spec's averaging group")
        group = spec.averaging.group
    if mode.kind == "fa":
        if spec.averaging is None:
            raise ConfigError("fa mode needs a spec with an averaging layer")
        if mode.symmetrization is not None:
            spec = spec.with_mode(mode.symmetrization)
        if mode.per_epoch and spec.averaging.mode.kind != "monte_carlo":
            raise ConfigError("per-epoch resampling applies to Monte Carlo averaging only")
    elif mode.kind == "da" and group is None:
        raise ConfigError("data augmentation needs a group")
    if group is not None and group.input_dim != spec.input_dim:
        raise ConfigError("group does not act on the model input")
    return spec, group


def _scores(spec: ModelSpec, params: ParamVector, loss: str, rng=None):
    """Batch function giving predictive probabilities (raw outputs for regression)."""
    f = predictor(spec, params, rng)
    if loss == "cross_entropy":
        return lambda X: softmax(f(X), axis=-1)
    if loss == "logistic":
        return lambda X: expit(f(X))
    return f


def _augment(X, y, group, mode: TrainMode, rng):
    if mode.exhaustive:
        k = group.order
        elements = np.broadcast_to(np.arange(k)[:, None], (k, len(y)))
    else:
        k = mode.m
        elements = rng.integers(group.order, size=(k, len(y)))
    Xg = group.act(elements, X[None]).reshape(k * len(y), -1)
    return Xg, np.tile(y, k)


def _batch_gradient(spec, params, config, group, X, y, rng):
    if config.mode.kind == "da":
        X, y = _augment(X, y, group, config.mode, rng)
    return value_and_gradient(spec, params, config.loss, (X, y), rng)


def gradient_variance_probe(spec: ModelSpec, params: ParamVector, config: TrainConfig, dataset,
                            n_batches: int, rng: np.random.Generator | None = None) -> float:
    """Across-minibatch variance of the stochastic gradient at fixed params,
    averaged over parameter coordinates.

    Each probe batch is ``batch_size`` distinct examples (plus the mode's
    augmentation or averaging draws).
    """
    if n_batches < 2:
        raise ConfigError("the probe needs at least two minibatches")
    X, y = _rows(dataset)
    if len(y) < config.batch_size:
        raise ConfigError("dataset is smaller than one minibatch")
    spec, group = _resolve(spec, config)
    rng = rng or np.random.default_rng(config.seed)
    grads = np.empty((n_batches, spec.n_params))
    for t in range(n_batches):
        idx = np.sort(rng.choice(len(y), size=config.batch_size, replace=False))
        grads[t] = _batch_gradient(spec, params, config, group, X[idx], y[idx], rng)[1].values
    return float(grads.var(axis=0, ddof=1).mean())


def mean_orbit_variance(spec: ModelSpec, params: ParamVector, loss: str, X: np.ndarray,
                        group: FiniteGroupAction, rng=None) -> float:
    """Mean over rows of the orbit variance of predictive probabilities."""
    if len(X) == 0:
        return math.nan
    return float(np.mean(orbit_prediction_variance(_scores(spec, params, loss, rng), X, group)))


def _record(epoch, spec, params, config, group, train, test, ood, eval_seed) -> EpochRecord:
    mode, loss, flags = config.mode, config.loss, config.telemetry
    rng = np.random.default_rng(eval_seed)
    f = predictor(spec, params, rng)
    if mode.kind == "da" and mode.exhaustive:
        train_loss = augmented_risk(f, train, loss, group).value
    elif mode.kind == "da":
        train_loss = augmented_risk_mc(f, train, loss, group, mode.m, rng).value
    else:
        train_loss = empirical_risk(f, train, loss).value
    rec = EpochRecord(epoch, train_loss, empirical_risk(f, train, loss).value,
                      empirical_risk(f, test, loss).value if len(test[1]) else math.nan,
                      eval_seed=int(eval_seed))
    if flags.eval_with_and_without_fa and group is not None:
        if spec.averaging is not None:
            exact = spec.with_mode(SymmetrizationMode.exact())
            g_fa = predictor(exact, params)
            single = predictor(spec.without_averaging(), params)
        else:
            g_fa = symmetrized(f, group)
            single = f
        rec.train_loss_fa_eval = empirical_risk(g_fa, train, loss).value
        rec.train_loss_single = empirical_risk(single, train, loss).value
        if len(test[1]):
            rec.test_loss_fa_eval = empirical_risk(g_fa, test, loss).value
            rec.test_loss_single = empirical_risk(single, test, loss).value
    if flags.gradient_variance:
        rec.gradient_variance = gradient_variance_probe(spec, params, config, train,
                                                        config.probe_batches, rng)
    if flags.orbit_variance and group is not None:
        m = config.orbit_eval_size
        rec.mean_orbit_variance_in_dist = mean_orbit_variance(spec, params, loss, test[0][:m], group, rng)
        if ood is not None:
            rec.mean_orbit_variance_ood = mean_orbit_variance(spec, params, loss, ood[0][:m], group, rng)
    return rec


def train(spec: ModelSpec, config: TrainConfig, train_set, test_set=None, ood_set=None,
          init: ParamVector | None = None, callback=None) -> tuple[ParamVector, TrainTelemetry]:
    """Run SGD; the result depends only on ``(spec, config, data)``.

    In ``da`` mode each minibatch example is replaced by its transformed
    copies inside the same minibatch; in ``fa`` mode gradients flow through
    the averaging layer. Telemetry is evaluated after every epoch; the
    per-epoch evaluation seeds are logged so every number can be recomputed.
    ``callback(epoch, params)`` may return a dict of extra metrics to log.
    """
    spec, group = _resolve(spec, config)
    X, y = _rows(train_set)
    test = _rows(test_set) if test_set is not None and len(test_set[1]) else (X[:0], y[:0])
    ood = _rows(ood_set) if ood_set is not None and len(ood_set[1]) else None
    if test[0].shape[1:] != X.shape[1:] or (ood is not None and ood[0].shape[1] != X.shape[1]):
        raise ConfigError("train, test and ood inputs have different dimensions")
    if X.shape[1] != spec.input_dim:
        raise ConfigError("data dimension does not match the model")
    s_init, s_shuffle, s_aug, s_eval = np.random.SeedSequence(config.seed).spawn(4)
    params = init if init is not None else init_params(spec, np.random.default_rng(s_init))
    if params.spec.n_params != spec.n_params:
        raise ConfigError("initial parameters do not match the spec")
    params = ParamVector(params.values, spec)
    shuffle, aug = np.random.default_rng(s_shuffle), np.random.default_rng(s_aug)
    eval_seeds = s_eval.generate_state(config.epochs + 1)

    tel = TrainTelemetry(config.mode.label)
    tel.initial = _record(0, spec, params, config, group, (X, y), test, ood, eval_seeds[0])
    if callback:
        tel.initial.extra.update(callback(0, params) or {})
    n = len(y)
    steps = math.ceil(n / config.batch_size)
    t = 0
    for epoch in range(1, config.epochs + 1):
        run_spec = spec
        if config.mode.per_epoch:
            g_set = aug.integers(group.order, size=spec.averaging.mode.k)
            run_spec = spec.with_mode(SymmetrizationMode.monte_carlo(len(g_set), g_set.tolist()))
        order = shuffle.permutation(n)
        for b in range(steps):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            value, g = _batch_gradient(run_spec, params, config, group, X[idx], y[idx], aug)
            if not np.isfinite(value):
                raise FloatingPointError(f"training diverged at epoch {epoch}, step {b} (loss {value})")
            params = ParamVector(params.values - config.step_size(t, steps) * g.values, spec)
            t += 1
        tel.records.append(_record(epoch, spec, params, config, group, (X, y), test, ood,
                                   eval_seeds[epoch]))
        if callback:
            tel.records[-1].extra.update(callback(epoch, params) or {})
    return params, tel


def invariance_failure_study(spec: ModelSpec, config: TrainConfig, train_domain, ood_domain,
                             held_out=None) -> TrainTelemetry:
    """Train (DA by default) on one domain and track orbit variance of
    predictions on held-out in-domain orbits and on another domain's orbits."""
    tr_g = getattr(train_domain, "group", None)
    ood_g = getattr(ood_domain, "group", None)
    if tr_g is not None and ood_g is not None and tr_g.to_dict() != ood_g.to_dict():
        raise ConfigError("train and ood domains carry different groups")
    if _rows(train_domain)[0].shape[1] != _rows(ood_domain)[0].shape[1]:
        raise ConfigError("train and ood domains have different input dimensions")
    if config.group is None and spec.averaging is None and tr_g is not None:
        config = TrainConfig(**{**config.__dict__, "group": tr_g})
    config = TrainConfig(**{**config.__dict__,
                            "telemetry": Telemetry(config.telemetry.gradient_variance, True,
                                                   config.telemetry.eval_with_and_without_fa)})
    if held_out is None:
        X, y = _rows(train_domain)
        cut = max(1, len(y) // 5)
        held_out, train_domain = (X[:cut], y[:cut]), (X[cut:], y[cut:])
    return train(spec, config, train_domain, held_out, ood_domain)[1]
