"""Group averaging of predictors and the plain / augmented risk estimators.

Functions ``f`` passed here are vectorized: they take a batch of inputs of
shape ``(M, d)`` and return ``(M,)`` or ``(M, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .groups import FiniteGroupAction
from .losses import LossFn, get_loss

Predictor = Callable[[np.ndarray], np.ndarray]

KINDS = ("exact", "monte_carlo", "max_pool", "min_pool")


@dataclass(frozen=True)
class SymmetrizationMode:
    """How a function is made invariant.

    ``resample_policy`` is ``"fresh_per_call"`` (new group draws on every
    evaluation) or ``"fixed"`` (reuse ``g_set`` for every example).
    """

    kind: str = "exact"
    k: int = 1
    resample_policy: str = "fresh_per_call"
    g_set: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown symmetrization kind {self.kind!r}")
        if self.kind == "monte_carlo" and self.k < 1:
            raise ValueError("monte_carlo needs k >= 1")
        if self.resample_policy not in ("fresh_per_call", "fixed"):
            raise ValueError(f"unknown resample policy {self.resample_policy!r}")
        if self.resample_policy == "fixed":
            if not self.g_set:
                raise ValueError("fixed resample policy needs a nonempty g_set")
            object.__setattr__(self, "g_set", tuple(int(g) for g in self.g_set))
            object.__setattr__(self, "k", len(self.g_set))

    @classmethod
    def exact(cls) -> "SymmetrizationMode":
        return cls("exact")

    @classmethod
    def monte_carlo(cls, k: int, g_set: Sequence[int] | None = None) -> "SymmetrizationMode":
        if g_set is not None:
            return cls("monte_carlo", len(g_set), "fixed", tuple(g_set))
        return cls("monte_carlo", k)

    def validate(self, group: FiniteGroupAction) -> None:
        if self.g_set is not None and any(not 0 <= g < group.order for g in self.g_set):
            raise ValueError("g_set contains ids outside the group")

    def draw(self, group: FiniteGroupAction, n: int, rng: np.random.Generator | None) -> np.ndarray:
        """Element ids to average over, shape ``(k, n)`` (one column per example)."""
        if self.kind != "monte_carlo":
            return np.broadcast_to(np.arange(group.order)[:, None], (group.order, n))
        if self.resample_policy == "fixed":
            return np.broadcast_to(np.asarray(self.g_set)[:, None], (self.k, n))
        if rng is None:
            raise ValueError("fresh Monte Carlo symmetrization needs an rng")
        return rng.integers(group.order, size=(self.k, n))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "resample_policy": self.resample_policy,
                "g_set": list(self.g_set) if self.g_set else None}

    @classmethod
    def from_dict(cls, d: dict) -> "SymmetrizationMode":
        g_set = d.get("g_set")
        return cls(d["kind"], int(d.get("k", 1)), d.get("resample_policy", "fresh_per_call"),
                   tuple(g_set) if g_set else None)


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    estimator: str
    n: int
    loss_name: str
    per_example: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def stderr(self) -> float:
        if self.per_example is None or self.n < 2:
            return float("nan")
        return float(np.std(self.per_example, ddof=1) / np.sqrt(self.n))


def evaluate(f: Predictor, x: np.ndarray) -> np.ndarray:
    """Apply ``f`` to inputs with arbitrary leading dimensions."""
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    out = np.asarray(f(x.reshape(-1, x.shape[-1])), dtype=float)
    return out.reshape(lead + out.shape[1:])


def symmetrize_exact(f: Predictor, x, group: FiniteGroupAction) -> np.ndarray:
    """``|G|^-1 sum_g f(g x)``; rows of a 2-D ``x`` are averaged independently."""
    return evaluate(f, group.act_all(x)).mean(axis=0)


def symmetrize_mc(f: Predictor, x, group: FiniteGroupAction, k: int,
                  rng: np.random.Generator | None = None,
                  g_set: Sequence[int] | None = None) -> np.ndarray:
    """Average of ``f`` over ``k`` uniformly drawn elements (or a fixed ``g_set``)."""
    mode = SymmetrizationMode.monte_carlo(k, g_set)
    mode.validate(group)
    x = np.asarray(x, dtype=float)
    n = 1 if x.ndim == 1 else x.shape[0]
    elements = mode.draw(group, n, rng)
    if x.ndim == 1:
        return evaluate(f, group.act(elements[:, 0], x[None])).mean(axis=0)
    return evaluate(f, group.act(elements, x[None])).mean(axis=0)


def pool_invariant(f: Predictor, x, group: FiniteGroupAction, kind: str) -> np.ndarray:
    """Coordinatewise max or min of ``f`` over the orbit."""
    vals = evaluate(f, group.act_all(x))
    if kind == "max_pool":
        return vals.max(axis=0)
    if kind == "min_pool":
        return vals.min(axis=0)
    raise ValueError(f"pool kind must be max_pool or min_pool, got {kind!r}")


def symmetrize(f: Predictor, x, group: FiniteGroupAction, mode: SymmetrizationMode,
               rng: np.random.Generator | None = None) -> np.ndarray:
    if mode.kind == "exact":
        return symmetrize_exact(f, x, group)
    if mode.kind == "monte_carlo":
        return symmetrize_mc(f, x, group, mode.k, rng, mode.g_set)
    return pool_invariant(f, x, group, mode.kind)


def symmetrized(f: Predictor, group: FiniteGroupAction, mode: SymmetrizationMode | None = None,
                rng: np.random.Generator | None = None) -> Predictor:
    """The invariant predictor ``x -> symmetrize(f, x)`` as a batch function."""
    mode = mode or SymmetrizationMode.exact()
    return lambda X: symmetrize(f, np.asarray(X, dtype=float), group, mode, rng)


# -- risk estimators --------------------------------------------------------------


def _check(dataset):
    X, y = np.asarray(dataset[0], dtype=float), np.asarray(dataset[1])
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, d) input array with labels")
    if y.shape[0] != X.shape[0]:
        raise ValueError("inputs and labels differ in length")
    return X, y


def _rows(dataset):
    # accept LabeledDataset or an (X, y) pair
    if hasattr(dataset, "X"):
        return _check((dataset.X, dataset.y))
    return _check(dataset)


def empirical_risk(f: Predictor, dataset, loss) -> RiskEstimate:
    """``n^-1 sum_i loss(f(X_i), Y_i)``."""
    loss = get_loss(loss)
    X, y = _rows(dataset)
    per = loss(evaluate(f, X), y)
    return RiskEstimate(float(per.mean()), "plain", len(y), loss.name, per)


def _augmented(f, X, y, loss: LossFn, group, elements) -> np.ndarray:
    k, n = elements.shape
    Xg = group.act(elements, X[None])  # (k, n, d)
    preds = evaluate(f, Xg)
    flat = preds.reshape((k * n,) + preds.shape[2:])
    return loss(flat, np.tile(y, k)).reshape(k, n).mean(axis=0)


def augmented_risk(f: Predictor, dataset, loss, group: FiniteGroupAction) -> RiskEstimate:
    """Orbit-averaged loss per example, averaged over the sample."""
    loss = get_loss(loss)
    X, y = _rows(dataset)
    elements = np.broadcast_to(np.arange(group.order)[:, None], (group.order, len(y)))
    per = _augmented(f, X, y, loss, group, elements)
    return RiskEstimate(float(per.mean()), "augmented_exact", len(y), loss.name, per)


def augmented_risk_mc(f: Predictor, dataset, loss, group: FiniteGroupAction, m: int,
                      rng: np.random.Generator | None = None,
                      g_set: Sequence[int] | None = None) -> RiskEstimate:
    """Monte Carlo augmented risk with ``m`` i.i.d. uniform elements per example.

    With ``g_set`` the same elements are used for every example (``m`` is then
    ``len(g_set)``).
    """
    loss = get_loss(loss)
    X, y = _rows(dataset)
    mode = SymmetrizationMode.monte_carlo(m, g_set)
    mode.validate(group)
    per = _augmented(f, X, y, loss, group, mode.draw(group, len(y), rng))
    return RiskEstimate(float(per.mean()), f"augmented_mc({mode.k})", len(y), loss.name, per)


def orbit_prediction_variance(f: Predictor, x, group: FiniteGroupAction) -> np.ndarray | float:
    """Population variance of ``f(g x)`` over the group, averaged over outputs."""
    vals = evaluate(f, group.act_all(x))
    single = np.asarray(x).ndim == 1
    var = vals.var(axis=0)
    if var.ndim > (0 if single else 1):
        var = var.mean(axis=-1)
    return float(var) if single else var


class IteratedExpectation(NamedTuple):
    direct: float
    disintegrated: float
    direct_stderr: float
    disintegrated_stderr: float


def iterated_expectation_check(h: Callable[[np.ndarray, np.ndarray], np.ndarray], dist,
                               n_samples: int, rng: np.random.Generator) -> IteratedExpectation:
    """Two estimates of ``E[h(X, Y)]`` under an invariant distribution.

    ``direct`` samples ``(X, Y)`` as the generator does (one random element
    per representative). ``disintegrated`` samples ``(Phi, Y)`` and replaces
    ``h`` by its exact inner average over the group. ``dist`` must expose
    ``group`` and ``sample_representatives(rng, n) -> (Phi, Y)``.
    """
    group = dist.group
    phi, y = dist.sample_representatives(rng, n_samples)
    X = group.act(group.sample_uniform(rng, size=n_samples), phi)
    direct = np.asarray(h(X, y), dtype=float)

    phi2, y2 = dist.sample_representatives(rng, n_samples)
    orbits = group.act_all(phi2)  # (|G|, n, d)
    inner = np.mean([np.asarray(h(o, y2), dtype=float) for o in orbits], axis=0)
    se = lambda v: float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return IteratedExpectation(float(direct.mean()), float(inner.mean()), se(direct), se(inner))
