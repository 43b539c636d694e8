"""Catoni PAC-Bayes bounds, Gaussian and discrete KL divergences, and their
pushforwards through symmetrization maps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .groups import FiniteGroupAction
from .losses import predict_classes
from .models import Activation, Dense, ModelError, ModelSpec, ParamVector, forward, value_and_gradient
from .symmetrization import augmented_risk, augmented_risk_mc, _rows

BETA_GRID = 2.0 ** np.arange(-6.0, 6.0 + 1e-9, 0.25)
PRIOR_STD_GRID = 0.1 * 2.0 ** (-np.arange(18) / 2.0)
EIG_RTOL = 1e-10
GRID_PENALTY = math.log(len(PRIOR_STD_GRID))


class BoundDomainError(ValueError):
    """Inputs outside the domain of a bound or divergence."""


class InconsistentLabelsError(ValueError):
    """A dataset assigns two labels to inputs the function class cannot separate."""

    def __init__(self, message: str, function_class: str):
        super().__init__(message)
        self.function_class = function_class


# -- Catoni bound ----------------------------------------------------------------------


@dataclass(frozen=True)
class BoundInputs:
    n: int
    delta: float = 0.05
    beta: float | str = "optimize"
    mc_samples: int = 150
    loss: str = "zero_one"

    def __post_init__(self):
        if int(self.n) < 1:
            raise BoundDomainError("n must be a positive integer")
        if not 0.0 < self.delta <= 1.0:
            raise BoundDomainError("delta must lie in (0, 1]")
        if self.beta != "optimize" and not (isinstance(self.beta, (int, float)) and self.beta > 0):
            raise BoundDomainError("beta must be positive or 'optimize'")
        if self.mc_samples < 1:
            raise BoundDomainError("mc_samples must be positive")
        if self.loss != "zero_one":
            raise BoundDomainError("the Catoni bound here is stated for the zero_one loss")


def _catoni(r, kl, n, delta, beta):
    return -np.expm1(-beta * r - (kl + math.log(1.0 / delta)) / n) / -np.expm1(-beta)


def catoni_bound_beta(risk: float, kl: float, inputs: BoundInputs) -> tuple[float, float]:
    """Bound value and the beta it was evaluated at.

    With ``beta="optimize"`` the bound is minimized over ``BETA_GRID``; the
    inequality holds for every beta simultaneously, so no correction is needed.
    """
    if not 0.0 <= risk <= 1.0:
        raise BoundDomainError(f"empirical risk {risk} outside [0, 1]")
    if not kl >= 0.0:
        raise BoundDomainError(f"KL {kl} must be nonnegative")
    if inputs.beta == "optimize":
        vals = _catoni(risk, kl, inputs.n, inputs.delta, BETA_GRID)
        i = int(np.argmin(vals))
        return float(vals[i]), float(BETA_GRID[i])
    b = float(inputs.beta)
    return float(_catoni(risk, kl, inputs.n, inputs.delta, b)), b


def catoni_bound(risk: float, kl: float, inputs: BoundInputs) -> float:
    """``(1 - exp(-beta r - (KL + log 1/delta)/n)) / (1 - exp(-beta))``."""
    return catoni_bound_beta(risk, kl, inputs)[0]


# -- Gaussian KLs ----------------------------------------------------------------------


class KLDecomposition(NamedTuple):
    value: float
    variance_term: float
    mean_term: float


@dataclass(frozen=True, eq=False)
class GaussianWeightDistribution:
    """Diagonal Gaussian over a model's flat parameter vector."""

    mean: ParamVector | np.ndarray
    std: np.ndarray

    def __post_init__(self):
        std = np.broadcast_to(np.asarray(self.std, dtype=float), self.mean_values.shape).copy()
        if not np.all(std > 0) or not np.all(np.isfinite(std)):
            raise BoundDomainError("standard deviations must be positive and finite")
        object.__setattr__(self, "std", std)

    @property
    def mean_values(self) -> np.ndarray:
        m = self.mean.values if isinstance(self.mean, ParamVector) else self.mean
        return np.asarray(m, dtype=float).ravel()

    @property
    def spec(self) -> ModelSpec:
        if not isinstance(self.mean, ParamVector):
            raise ModelError("distribution is not attached to a model spec")
        return self.mean.spec

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.mean_values + self.std * rng.standard_normal((size, self.std.size))


def _as_gaussian(d) -> GaussianWeightDistribution:
    if isinstance(d, GaussianWeightDistribution):
        return d
    mean, std = d
    return GaussianWeightDistribution(np.asarray(mean, dtype=float), std)


def kl_diag_gaussian(Q, P) -> KLDecomposition:
    """KL(Q || P) for diagonal Gaussians, in nats."""
    Q, P = _as_gaussian(Q), _as_gaussian(P)
    if Q.std.shape != P.std.shape:
        raise BoundDomainError("Q and P have different dimensions")
    ratio = (Q.std / P.std) ** 2
    var = 0.5 * float(np.sum(ratio - 1.0 - np.log(ratio)))
    mean = 0.5 * float(np.sum(((Q.mean_values - P.mean_values) / P.std) ** 2))
    return KLDecomposition(var + mean, var, mean)


def kl_pushforward_gaussian(Q, P, A) -> KLDecomposition:
    """KL between the images of Q and P under the linear map ``A``.

    The KL only depends on the row space of ``A``, so both distributions are
    projected onto an orthonormal basis of it (singular values below
    ``1e-10`` times the largest count as zero). This keeps ill-conditioned
    maps from squaring their condition number into the covariances. Prior
    directions with eigenvalue below ``1e-10`` times the largest are treated
    as collapsed.
    """
    Q, P = _as_gaussian(Q), _as_gaussian(P)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != Q.std.size or Q.std.size != P.std.size:
        raise BoundDomainError("map and distributions have mismatched dimensions")
    if not A.any():
        return KLDecomposition(0.0, 0.0, 0.0)
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    A = Vt[sv > EIG_RTOL * sv[0]]
    SQ = (A * Q.std**2) @ A.T
    SP = (A * P.std**2) @ A.T
    diff = A @ (Q.mean_values - P.mean_values)
    lam, U = np.linalg.eigh(SP)
    if lam[-1] <= 0:
        return KLDecomposition(0.0, 0.0, 0.0)
    keep = lam > EIG_RTOL * lam[-1]
    U, lam = U[:, keep], lam[keep]
    scale = max(np.abs(SQ).max(), 1e-300)
    outside = SQ - U @ (U.T @ SQ @ U) @ U.T
    if np.abs(outside).max() > 1e-8 * scale:
        raise BoundDomainError("pushforward of Q is not supported on the support of P")
    off = diff - U @ (U.T @ diff)
    if np.linalg.norm(off) > 1e-8 * max(np.linalg.norm(diff), 1.0):
        raise BoundDomainError("mean difference leaves the support of the prior image")
    w = 1.0 / np.sqrt(lam)
    M = (U.T @ SQ @ U) * np.outer(w, w)
    mu = np.linalg.eigvalsh(M)
    if mu.min() <= EIG_RTOL * mu.max():
        raise BoundDomainError("image of Q is degenerate where the image of P is not")
    var = 0.5 * float(np.sum(mu - 1.0 - np.log(mu)))
    mean = 0.5 * float(np.sum((U.T @ diff) ** 2 / lam))
    return KLDecomposition(var + mean, var, mean)


def linear_symmetrization_map(group: FiniteGroupAction, n_outputs: int = 1,
                              elements: Sequence[int] | None = None) -> np.ndarray:
    """Matrix acting on row-major ``(d, n_outputs)`` weights that replaces the
    weights by their dual-action average over ``elements`` (default: all)."""
    if elements is None:
        avg = group.averaging_matrix()
    else:
        avg = np.mean([group.matrix(g) for g in elements], axis=0)
    return np.kron(avg.T, np.eye(n_outputs))


def _linear_block(Q) -> tuple[int, int, int]:
    """(offset, d, n_outputs) of the weight block of a linear model."""
    if isinstance(Q.mean, ParamVector):
        spec = Q.spec
        if not spec.is_linear:
            raise ModelError("a one-layer linear spec is required")
        name = next(n for n in spec.layout if n.endswith(".W"))
        off, (d, out) = spec.layout[name]
        return off, d, out
    return 0, Q.std.size, 1


def _embed(block: np.ndarray, off: int, total: int) -> np.ndarray:
    A = np.eye(total)
    A[off:off + block.shape[0], off:off + block.shape[1]] = block
    return A


def symmetrized_linear_kl(Q, P, group: FiniteGroupAction,
                          elements: Sequence[int] | None = None) -> KLDecomposition:
    """KL between the images of Q and P under weight symmetrization of a
    linear model (bias untouched)."""
    Q, P = _as_gaussian(Q), _as_gaussian(P)
    off, d, out = _linear_block(Q)
    if d != group.input_dim:
        raise BoundDomainError("group and weight dimensions differ")
    A = _embed(linear_symmetrization_map(group, out, elements), off, Q.std.size)
    return kl_pushforward_gaussian(Q, P, A)


def symmetrization_gap_linear(Q, P, group: FiniteGroupAction) -> float:
    """``KL(Q||P) - KL(Q°||P°)`` for a linear model; nonnegative."""
    return kl_diag_gaussian(Q, P).value - symmetrized_linear_kl(Q, P, group).value


# -- FA models: KL after the averaging layer ---------------------------------------------


def averaged_coordinate_classes(spec: ModelSpec) -> np.ndarray | None:
    """Class label per parameter such that the FA model depends on the first
    dense weights only through their class means.

    Applies when the averaging is exact, sits directly before or after the
    first dense layer, and the group permutes coordinates without signs.
    Other parameters get singleton classes. Returns None when not applicable.
    """
    avg = spec.averaging
    if avg is None or avg.mode.kind != "exact":
        return None
    a = spec.averaging_index
    first = next(i for i, l in enumerate(spec.layers) if isinstance(l, Dense))
    between = spec.layers[min(a, first) + 1:max(a, first)]
    if abs(first - a) != 1 and not all(isinstance(l, Activation) and l.kind == "identity"
                                       for l in between):
        return None
    group = avg.group
    if not group.is_permutation:
        return None
    row_class = group.coordinate_orbits()
    labels = np.arange(spec.n_params, dtype=np.int64) + spec.n_params  # singletons
    off, (d, h) = spec.layout[f"{spec.block_names[first]}.W"]
    labels[off:off + d * h] = (row_class[:, None] * h + np.arange(h)[None, :]).ravel()
    _, labels = np.unique(labels, return_inverse=True)
    return labels


def _class_stats(labels, x):
    counts = np.bincount(labels)
    return np.bincount(labels, weights=x) / counts, counts


def partition_kl(mu_q, s, mu_p, sigma, labels) -> tuple[KLDecomposition, np.ndarray, np.ndarray, np.ndarray]:
    """KL between the images of two diagonal Gaussians under class-mean
    averaging, with gradients in ``mu_q``, ``s`` and per-coordinate ``sigma``.

    For each class C of size c with vQ = mean s^2, vP = mean sigma^2 and
    dbar = mean(mu_q - mu_p), the contribution is
    ``0.5 (vQ/vP - 1 + log(vP/vQ)) + c dbar^2 / (2 vP)``.
    """
    labels = np.asarray(labels)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), np.shape(s))
    vq, counts = _class_stats(labels, s * s)
    vp, _ = _class_stats(labels, sigma * sigma)
    dbar, _ = _class_stats(labels, mu_q - mu_p)
    var = 0.5 * float(np.sum(vq / vp - 1.0 - np.log(vq / vp)))
    mean = 0.5 * float(np.sum(counts * dbar**2 / vp))
    c = counts[labels]
    g_mu = (dbar / vp)[labels]
    g_s = s / c * (1.0 / vp - 1.0 / vq)[labels]
    # derivative in each coordinate's prior variance, through vP of its class
    d_vp = 0.5 * (1.0 / vp - vq / vp**2) - 0.5 * counts * dbar**2 / vp**2
    g_sigma = (d_vp / counts)[labels] * 2.0 * sigma
    return KLDecomposition(var + mean, var, mean), g_mu, g_s, g_sigma


def effective_kl(Q, P) -> KLDecomposition:
    """KL of the distributions the model actually realizes as functions of the
    input: pushforward through the averaging layer when it is exact and
    closed-form, the weight-space KL otherwise."""
    Q, P = _as_gaussian(Q), _as_gaussian(P)
    labels = averaged_coordinate_classes(Q.spec) if isinstance(Q.mean, ParamVector) else None
    if labels is None:
        return kl_diag_gaussian(Q, P)
    return partition_kl(Q.mean_values, Q.std, P.mean_values, P.std, labels)[0]


# -- discrete KLs ----------------------------------------------------------------------


def _kl_discrete(p, q) -> float:
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def kl_pushforward_discrete(mu, nu, psi) -> tuple[float, float, float]:
    """KL before and after pushing two finite distributions through ``psi``.

    ``psi`` is a sequence of (hashable) images, one per atom, or a callable on
    atom indices. Returns ``(kl_before, kl_after, gap)`` where the gap is
    ``sum_x mu(x) log(m(x) / m_psi(psi(x)))`` for the density ``m = dmu/dnu``.
    """
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != nu.shape or mu.ndim != 1:
        raise BoundDomainError("mu and nu must be 1-D over the same atoms")
    if np.any(mu < 0) or np.any(nu < 0):
        raise BoundDomainError("probabilities must be nonnegative")
    if np.any((mu > 0) & (nu == 0)):
        raise BoundDomainError("mu is not absolutely continuous with respect to nu")
    images = [psi(i) for i in range(mu.size)] if callable(psi) else list(psi)
    if len(images) != mu.size:
        raise BoundDomainError("psi must give one image per atom")
    _, fiber = np.unique(np.array(images, dtype=object).astype(str), return_inverse=True)
    mu_psi = np.bincount(fiber, weights=mu)
    nu_psi = np.bincount(fiber, weights=nu)
    before = _kl_discrete(mu, nu)
    after = _kl_discrete(mu_psi, nu_psi)
    m = mu > 0
    gap = float(np.sum(mu[m] * (np.log(mu[m] / nu[m]) - np.log(mu_psi[fiber[m]] / nu_psi[fiber[m]]))))
    return before, after, gap


class BooleanKL(NamedTuple):
    kl_bits: int
    kl_inv_bits: int
    gap_bits: int


def boolean_kl(dataset, k: int) -> BooleanKL:
    """KLs (bits) of the consistent-set posterior against the uniform prior over
    k-ary Boolean functions, raw and permutation-invariant.

    ``dataset`` is an iterable of ``(x, y)`` pairs or an ``(X, y)`` array pair.
    """
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        pairs = list(zip(dataset[0], dataset[1]))
    else:
        pairs = list(dataset)
    raw: dict[tuple, int] = {}
    inv: dict[int, int] = {}
    for x, y in pairs:
        x = tuple(int(v) for v in np.asarray(x).ravel())
        y = int(y)
        if len(x) != k or any(v not in (0, 1) for v in x) or y not in (0, 1):
            raise ValueError(f"observation {x}, {y} is not a binary {k}-vector with binary label")
        if raw.setdefault(x, y) != y:
            raise InconsistentLabelsError(f"input {x} carries both labels", "raw")
        if inv.setdefault(sum(x), y) != y:
            raise InconsistentLabelsError(f"inputs with {sum(x)} ones carry both labels", "invariant")
    return BooleanKL(len(raw), len(inv), len(raw) - len(inv))


# -- stochastic risks and reports --------------------------------------------------------


class RiskSummary(NamedTuple):
    value: float
    stderr: float
    draws: int


def stochastic_risk(Q: GaussianWeightDistribution, dataset, rng: np.random.Generator,
                    draws: int, estimator: str = "plain", group: FiniteGroupAction | None = None,
                    m: int = 1, g_set: Sequence[int] | None = None,
                    weights: np.ndarray | None = None) -> RiskSummary:
    """``E_{W~Q}`` of a 0-1 risk estimator, by Monte Carlo over weight draws.

    ``estimator`` is ``plain``, ``augmented`` (exact orbit average) or
    ``augmented_mc`` (``m`` draws, or the fixed ``g_set``).
    """
    spec = Q.spec
    W = Q.sample(rng, draws) if weights is None else weights
    per = np.empty(len(W))
    for t, w in enumerate(W):
        f = lambda X, w=w: forward(spec, ParamVector(w, spec), X)
        if estimator == "plain":
            X, y = _rows(dataset)
            per[t] = np.mean(predict_classes(f(X)) != y)
        elif estimator == "augmented":
            per[t] = augmented_risk(f, dataset, "zero_one", group).value
        elif estimator == "augmented_mc":
            per[t] = augmented_risk_mc(f, dataset, "zero_one", group, m, rng, g_set).value
        else:
            raise ValueError(f"unknown risk estimator {estimator!r}")
    se = float(np.std(per, ddof=1) / np.sqrt(len(per))) if len(per) > 1 else 0.0
    return RiskSummary(float(per.mean()), se, len(per))


@dataclass(frozen=True)
class BoundReport:
    mode: str
    n: int
    delta: float
    beta: float
    risk: RiskSummary
    kl: KLDecomposition
    bound: float
    union_bound_penalty: float = 0.0
    kl_unit: str = "nats"
    # in-memory context such as the chosen prior std; not serialized
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def empirical_risk_Q(self) -> float:
        return self.risk.value

    @property
    def kl_value(self) -> float:
        return self.kl.value

    @property
    def bound_value(self) -> float:
        return self.bound

    @property
    def beta_used(self) -> float:
        return self.beta

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "n": self.n, "delta": self.delta, "beta": self.beta,
            "risk": {"value": self.risk.value, "stderr": self.risk.stderr, "draws": self.risk.draws},
            "kl": {"value": self.kl.value, "unit": self.kl_unit,
                   "variance_term": self.kl.variance_term, "mean_term": self.kl.mean_term,
                   "union_bound_penalty": self.union_bound_penalty},
            "bound": self.bound,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        r, k = d["risk"], d["kl"]
        return cls(d["mode"], int(d["n"]), float(d["delta"]), float(d["beta"]),
                   RiskSummary(r["value"], r["stderr"], r["draws"]),
                   KLDecomposition(k["value"], k["variance_term"], k["mean_term"]),
                   float(d["bound"]), float(k.get("union_bound_penalty", 0.0)),
                   k.get("unit", "nats"))


def assemble_report(mode, inputs: BoundInputs, risk: RiskSummary, kl: KLDecomposition,
            penalty: float = 0.0, extra=None) -> BoundReport:
    # a union bound over N candidates spends delta / N on each
    shifted = BoundInputs(inputs.n, inputs.delta / math.exp(penalty), inputs.beta, inputs.mc_samples)
    bound, beta = catoni_bound_beta(risk.value, kl.value, shifted)
    return BoundReport(mode, inputs.n, inputs.delta, beta, risk, kl, bound, penalty,
                       extra=extra or {})


def bound_baseline(Q, P, dataset, inputs: BoundInputs, rng: np.random.Generator,
                   weights: np.ndarray | None = None) -> BoundReport:
    """Plain risk of Q with the weight-space KL."""
    risk = stochastic_risk(Q, dataset, rng, inputs.mc_samples, weights=weights)
    return assemble_report("baseline", inputs, risk, kl_diag_gaussian(Q, P))


def bound_da(Q, P, dataset, group: FiniteGroupAction, inputs: BoundInputs,
             rng: np.random.Generator, estimator: str | int = "exact",
             weights: np.ndarray | None = None) -> BoundReport:
    """Augmented risk of Q with the (unsymmetrized) weight-space KL.

    ``estimator`` is ``"exact"``, an integer ``m`` for i.i.d. Monte Carlo
    augmentation, or ``"exhaustive"`` (every element once, as a fixed set).
    """
    if estimator == "exact":
        risk = stochastic_risk(Q, dataset, rng, inputs.mc_samples, "augmented", group, weights=weights)
        mode = "da"
    elif estimator == "exhaustive":
        risk = stochastic_risk(Q, dataset, rng, inputs.mc_samples, "augmented_mc", group,
                               g_set=range(group.order), weights=weights)
        mode = "da_mc"
    else:
        risk = stochastic_risk(Q, dataset, rng, inputs.mc_samples, "augmented_mc", group,
                               m=int(estimator), weights=weights)
        mode = "da_mc"
    return assemble_report(mode, inputs, risk, kl_diag_gaussian(Q, P))


def bound_fa(Q, P, dataset, inputs: BoundInputs, rng: np.random.Generator,
             weights: np.ndarray | None = None) -> BoundReport:
    """Risk of the feature-averaged model with the KL of the pushforward."""
    if Q.spec.averaging is None:
        raise ModelError("bound_fa needs a spec with an averaging layer")
    risk = stochastic_risk(Q, dataset, rng, inputs.mc_samples, weights=weights)
    return assemble_report("fa", inputs, risk, effective_kl(Q, P))


# -- surrogate bound optimization --------------------------------------------------------


@dataclass(frozen=True)
class SurrogateSettings:
    steps: int = 2000
    batch_size: int = 128
    lr: float = 0.01
    beta: float = 2.0
    init_prior_std: float = 0.03


def _kl_and_grads(mu, s, mu_p, sigma, labels):
    if labels is None:
        ratio = (s / sigma) ** 2
        d = mu - mu_p
        var = 0.5 * float(np.sum(ratio - 1.0 - np.log(ratio)))
        mean = 0.5 * float(np.sum(d * d)) / sigma**2
        g_mu = d / sigma**2
        g_s = s / sigma**2 - 1.0 / s
        g_sigma = float(np.sum(-ratio / sigma + 1.0 / sigma - d * d / sigma**3))
        return KLDecomposition(var + mean, var, mean), g_mu, g_s, g_sigma
    kl, g_mu, g_s, g_sig = partition_kl(mu, s, mu_p, np.full_like(s, sigma), labels)
    return kl, g_mu, g_s, float(np.sum(g_sig))


def fit_posterior(spec: ModelSpec, trained_params: ParamVector, dataset, prior_center: ParamVector,
                  rng: np.random.Generator,
                  settings: SurrogateSettings = SurrogateSettings()) -> tuple[GaussianWeightDistribution, float]:
    """Fit a diagonal Gaussian posterior by SGD on ``beta * CE(W) + KL(Q || P) / n``.

    ``W = mu + s * eps`` with one draw per step. The prior is isotropic around
    ``prior_center`` with a learnable scale, clamped to the range of
    ``PRIOR_STD_GRID``. Models with exact averaging use the KL of the
    function-space pushforward. Returns the posterior and the learned scale.
    """
    X, y = _rows(dataset)
    n = len(y)
    labels = averaged_coordinate_classes(spec)
    mu = trained_params.values.copy()
    rho = np.log(0.05 * np.abs(mu) + 1e-3)
    log_sigma = math.log(settings.init_prior_std)
    mu_p = prior_center.values
    lo, hi = math.log(PRIOR_STD_GRID[-1]), math.log(PRIOR_STD_GRID[0])
    for step in range(settings.steps):
        idx = rng.choice(n, size=min(settings.batch_size, n), replace=False)
        s = np.exp(rho)
        eps = rng.standard_normal(mu.size)
        w = mu + s * eps
        ce, g = value_and_gradient(spec, ParamVector(w, spec), "cross_entropy", (X[idx], y[idx]))
        sigma = math.exp(log_sigma)
        kl, k_mu, k_s, k_sigma = _kl_and_grads(mu, s, mu_p, sigma, labels)
        objective = settings.beta * ce + kl.value / n
        if not np.isfinite(objective):
            raise FloatingPointError(f"surrogate bound diverged at step {step} (value {objective})")
        gw = settings.beta * g.values
        mu -= settings.lr * (gw + k_mu / n)
        rho -= settings.lr * (gw * eps + k_s / n) * s
        log_sigma -= settings.lr * k_sigma * sigma / n
        # keep the learned scale inside the range the report can use
        log_sigma = min(max(log_sigma, lo), hi)
    learned = min(max(math.exp(log_sigma), PRIOR_STD_GRID[-1]), PRIOR_STD_GRID[0])
    return GaussianWeightDistribution(ParamVector(mu, spec), np.exp(rho)), float(learned)


def grid_prior(prior_center: ParamVector, sigma: float) -> GaussianWeightDistribution:
    return GaussianWeightDistribution(prior_center, np.full(prior_center.values.size, float(sigma)))


def optimize_stochastic_bound(spec: ModelSpec, trained_params: ParamVector, dataset,
                              inputs: BoundInputs, prior_center: ParamVector,
                              rng: np.random.Generator,
                              settings: SurrogateSettings = SurrogateSettings()) -> BoundReport:
    """Fit a posterior with :func:`fit_posterior`, then report the 0-1 Catoni
    bound under the best prior scale of the 18-point grid ``PRIOR_STD_GRID``,
    paying ``log 18`` for the union bound over the grid."""
    Q, learned = fit_posterior(spec, trained_params, dataset, prior_center, rng, settings)
    fa = averaged_coordinate_classes(spec) is not None
    risk = stochastic_risk(Q, dataset, rng, inputs.mc_samples)
    best = None
    for sigma in PRIOR_STD_GRID:
        P = grid_prior(prior_center, sigma)
        kl = effective_kl(Q, P) if fa else kl_diag_gaussian(Q, P)
        rep = assemble_report("fa" if fa else "baseline", inputs, risk, kl, GRID_PENALTY,
                      {"prior_std": float(sigma), "learned_prior_std": learned})
        if best is None or rep.bound < best.bound:
            best = rep
    return best


# -- Laplace-transform estimate ------------------------------------------------------------


class LaplaceEstimate(NamedTuple):
    value: float
    stderr: float
    draws: int
    certified: bool


def laplace_transform_estimate(P: GaussianWeightDistribution, dataset, group: FiniteGroupAction,
                               C: float, n_weight_samples: int, rng: np.random.Generator,
                               n: int | None = None) -> LaplaceEstimate:
    """Exploratory Monte Carlo estimate of
    ``E_{f~P}[(E_Phi[exp(-C lbar_f(Phi))] / E_{Z~Bern(R(f))}[exp(-C Z)])^n]``.

    ``lbar_f`` is the orbit-averaged 0-1 loss on each held-out example and
    ``R(f)`` is estimated by its mean, so every per-draw ratio is at most 1.
    The result depends on the data and is not a certified bound.
    """
    if C < 0:
        raise BoundDomainError("C must be nonnegative")
    X, y = _rows(dataset)
    n = len(y) if n is None else int(n)
    spec = P.spec
    orbits = group.act_all(X)  # (|G|, N, d)
    vals = np.empty(n_weight_samples)
    for t, w in enumerate(P.sample(rng, n_weight_samples)):
        params = ParamVector(w, spec)
        out = forward(spec, params, orbits.reshape(-1, X.shape[1]))
        lbar = (predict_classes(out).reshape(group.order, -1) != y).mean(axis=0)
        if C == 0:
            vals[t] = 1.0
            continue
        R = lbar.mean()
        ratio = np.mean(np.exp(-C * lbar)) / (1.0 + R * np.expm1(-C))
        vals[t] = ratio**n
    se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return LaplaceEstimate(float(vals.mean()), se, len(vals), False)
