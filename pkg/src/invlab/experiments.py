"""Desk-scale studies: configuration, replicate execution and summaries.

Every study is a pair of functions. ``replicate`` turns one seed into a list
of CSV rows (and may write telemetry or checkpoints next to them);
``summarize`` reduces the rows of all replicates, read back from disk, to
metrics and pass/fail assertions. Because summaries are computed from the
CSV files only, ``invlab report`` can recompute and cross-check them.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import groups
from .datasets import generate, grid_rotation_task, permutation_pointset_task, sign_task
from .losses import get_loss, predict_classes
from .models import (AverageOverGroup, Dense, ModelSpec, ParamVector, forward, init_params,
                     invariant_projection_residual, save_checkpoint,
                     symmetrize_linear_weights)
from .pac_bayes import (GRID_PENALTY, PRIOR_STD_GRID, BoundInputs, GaussianWeightDistribution,
                        SurrogateSettings, assemble_report, boolean_kl, fit_posterior, grid_prior,
                        kl_diag_gaussian, optimize_stochastic_bound, stochastic_risk,
                        symmetrized_linear_kl)
from .symmetrization import augmented_risk, empirical_risk
from .training import ConfigError, Telemetry, TrainConfig, TrainMode, train

SEED_ENV = "INVLAB_SEED"
SUMMARY_FILE = "summary.json"
REPLICATE_DIR = "replicates"
FORMAT_VERSION = 1


class RunFilesError(ValueError):
    """A run directory is missing files or holds unreadable ones."""


# -- CSV helpers -------------------------------------------------------------------------


def format_value(v) -> str:
    """Locale-independent cell text; floats keep 17 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_rows(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])
    return path


def read_rows(path: Path, header) -> list[tuple[int, str, float]]:
    """Rows of a replicate CSV as ``(replicate, key, value)``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            first = next(reader, None)
            if first != list(header):
                raise RunFilesError(f"{path}: expected header {','.join(header)}, found {first}")
            return [(int(r), k, float(v)) for r, k, v in reader]
    except FileNotFoundError:
        raise RunFilesError(f"{path}: missing replicate file") from None
    except ValueError as exc:
        if isinstance(exc, RunFilesError):
            raise
        raise RunFilesError(f"{path}: malformed row ({exc})") from None


def _by_key(rows) -> dict[str, np.ndarray]:
    """Column per key, ordered by replicate index."""
    out: dict[str, list] = {}
    for r, k, v in sorted(rows, key=lambda t: t[0]):
        out.setdefault(k, []).append(v)
    return {k: np.array(v) for k, v in out.items()}


def _assertion(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


# -- study registry ----------------------------------------------------------------------


@dataclass
class ReplicateContext:
    index: int
    seed: np.random.SeedSequence
    params: dict
    out_dir: Path

    @property
    def int_seed(self) -> int:
        return int(self.seed.generate_state(1)[0])

    def path(self, sub: str, name: str) -> Path:
        p = self.out_dir / sub
        p.mkdir(parents=True, exist_ok=True)
        return p / name


@dataclass(frozen=True)
class Study:
    name: str
    defaults: dict
    default_replicates: int
    replicate: Callable[[ReplicateContext], list]
    summarize: Callable[[list, dict], dict]
    header: tuple = ("replicate", "quantity", "value")
    validate: Callable[[dict], None] | None = None


STUDIES: dict[str, Study] = {}


def register(study: Study) -> Study:
    STUDIES[study.name] = study
    return study


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


# -- variance reduction ------------------------------------------------------------------


def _sign_moments(lo: float, hi: float) -> tuple[float, float]:
    """E[x^2] and E[x^4] for |x| ~ U(lo, hi) (a point mass when lo == hi)."""
    if hi == lo:
        return lo**2, lo**4
    return (hi**3 - lo**3) / (3 * (hi - lo)), (hi**5 - lo**5) / (5 * (hi - lo))


def _variance_replicate(ctx: ReplicateContext) -> list:
    p = ctx.params
    rng = np.random.default_rng(ctx.seed)
    task = sign_task(sizes=(p["n"], 0, 0), magnitude=tuple(p["magnitude"]))
    ds = task.sample(rng, p["n"])
    group = task.group if p["group"] == "sign" else groups.trivial(1)
    f = lambda X: X[:, 0]
    return [(ctx.index, "plain", empirical_risk(f, ds, "squared").value),
            (ctx.index, "augmented", augmented_risk(f, ds, "squared", group).value)]


def _variance_summary(rows, p) -> dict:
    cols = _by_key(rows)
    plain, aug = cols["plain"], cols["augmented"]
    R = len(plain)
    var_p, var_a = plain.var(ddof=1), aug.var(ddof=1)
    diff = plain - aug
    se = diff.std(ddof=1) / math.sqrt(R)
    # squared deviations are paired per replicate; test E[d] > 0
    d = (plain - plain.mean()) ** 2 - (aug - aug.mean()) ** 2
    if d.std() == 0:
        pval = 0.0 if d.mean() > 0 else 1.0
    else:
        pval = float(stats.ttest_1samp(d, 0.0, alternative="greater").pvalue)
    ex2, ex4 = _sign_moments(*p["magnitude"])
    within, between = 4 * ex2, ex4 - ex2**2
    vacuous = p["group"] == "trivial"
    metrics = {
        "var_plain": var_p, "var_augmented": var_a,
        "ratio": var_a / var_p if var_p > 0 else math.nan,
        "p_value": pval,
        "mean_plain": plain.mean(), "mean_augmented": aug.mean(),
        "mean_difference": diff.mean(), "mean_difference_se": se,
        "predicted_var_plain": (within + between) / p["n"],
        "predicted_var_augmented": (within + between if vacuous else between) / p["n"],
        "within_orbit_share": within / (within + between),
    }
    if vacuous:
        reduced = _assertion("variance_reduced", True, "vacuous: the trivial group does not augment")
    else:
        reduced = _assertion("variance_reduced", var_a < var_p and pval < p["alpha"],
                             f"Var aug {var_a:.4g} vs plain {var_p:.4g}, one-sided p = {pval:.3g}")
    agree = abs(diff.mean()) <= 3 * se if se > 0 else diff.mean() == 0
    return {"metrics": metrics, "assertions": [
        reduced,
        _assertion("means_agree", agree, f"|mean diff| {abs(diff.mean()):.3g} vs 3 SE {3 * se:.3g}"),
    ]}


def _variance_validate(p):
    _require(p["n"] >= 1, "n must be positive")
    _require(p["group"] in ("sign", "trivial"), "group must be 'sign' or 'trivial'")
    _require(len(p["magnitude"]) == 2 and 0 <= p["magnitude"][0] <= p["magnitude"][1],
             "magnitude must be [low, high] with 0 <= low <= high")


register(Study("variance_reduction", {"n": 50, "group": "sign", "magnitude": [1.0, 1.0],
                                      "alpha": 0.01},
               2000, _variance_replicate, _variance_summary,
               header=("replicate", "estimator", "risk"), validate=_variance_validate))


# -- pointwise Jensen ordering -----------------------------------------------------------


def _random_group(rng, max_dim):
    kind = rng.choice(["cyclic_shift", "sign_flip", "symmetric"])
    if kind == "symmetric":
        d = int(rng.integers(2, min(max_dim, 5) + 1))
        return groups.symmetric_group(d)
    d = int(rng.integers(1, max_dim + 1))
    return groups.cyclic_shift(d) if kind == "cyclic_shift" else groups.sign_flip(d)


def _jensen_replicate(ctx: ReplicateContext) -> list:
    p = ctx.params
    rng = np.random.default_rng(ctx.seed)
    sq, lg = get_loss("squared"), get_loss("logistic")
    counts = {"squared": [0, -math.inf], "logistic": [0, -math.inf]}
    for _ in range(p["models"]):
        G = _random_group(rng, p["max_dim"])
        d = G.input_dim
        hidden = [int(h) for h in rng.integers(1, 9, size=rng.integers(0, 3))]
        spec = ModelSpec.mlp(d, hidden, 1, str(rng.choice(["relu", "tanh", "identity"])))
        params = ParamVector(rng.normal(size=spec.n_params), spec)
        X = rng.normal(size=(p["points"], d))
        out = forward(spec, params, G.act_all(X).reshape(-1, d)).reshape(G.order, -1)
        fbar = out.mean(axis=0)
        y_reg = rng.normal(size=p["points"])
        y_bin = (rng.random(p["points"]) < 0.5).astype(float)
        for name, loss, y in (("squared", sq, y_reg), ("logistic", lg, y_bin)):
            lhs = loss(fbar, y)
            rhs = np.mean([loss(o, y) for o in out], axis=0)
            excess = lhs - rhs
            counts[name][0] += int(np.sum(excess > p["tol"] * (1.0 + np.abs(rhs))))
            counts[name][1] = max(counts[name][1], float(excess.max()))
    triples = p["models"] * p["points"]
    rows = []
    for name, (viol, worst) in counts.items():
        rows += [(ctx.index, f"triples_{name}", triples), (ctx.index, f"violations_{name}", viol),
                 (ctx.index, f"max_excess_{name}", worst)]
    return rows


def _jensen_summary(rows, p) -> dict:
    cols = _by_key(rows)
    metrics, checks = {}, []
    for name in ("squared", "logistic"):
        n, v = int(cols[f"triples_{name}"].sum()), int(cols[f"violations_{name}"].sum())
        worst = float(cols[f"max_excess_{name}"].max())
        metrics.update({f"triples_{name}": n, f"violations_{name}": v, f"max_excess_{name}": worst})
        checks.append(_assertion(f"jensen_{name}", v == 0,
                                 f"{v} violations in {n} triples, largest excess {worst:.3g}"))
    return {"metrics": metrics, "assertions": checks}


register(Study("jensen_ordering", {"models": 50, "points": 20, "max_dim": 6, "tol": 1e-12},
               10, _jensen_replicate, _jensen_summary))


# -- invariant convergence of linear DA ----------------------------------------------------


def _convergence_replicate(ctx: ReplicateContext) -> list:
    p = ctx.params
    seed = ctx.int_seed
    task = permutation_pointset_task(p["k"], 1, sizes=(p["n_train"], p["n_test"], 0), seed=seed,
                                     label_rule="invariant_regression")
    tr, te, _ = generate(task)
    G = task.group
    spec = ModelSpec.linear(p["k"], 1, bias=True)
    cfg = TrainConfig(TrainMode.da(exhaustive=True), "squared", epochs=p["epochs"],
                      batch_size=p["batch_size"], lr=p["lr"], schedule="robbins_monro",
                      seed=seed, group=G)
    params, tel = train(spec, cfg, tr, te,
                        callback=lambda e, w: {"invariant_residual": invariant_projection_residual(w, G)})
    tel.write_csv(ctx.path("telemetry", f"da_r{ctx.index:04d}.csv"))
    # least squares on the augmented design
    A = G.act_all(tr.X).reshape(-1, p["k"])
    A1 = np.column_stack([A, np.ones(len(A))])
    w_ls = np.linalg.lstsq(A1, np.tile(tr.y, G.order), rcond=None)[0]
    res = np.array([r.extra["invariant_residual"] for r in [tel.initial] + tel.records])
    return [(ctx.index, "residual_initial", res[0]),
            (ctx.index, "residual_final", res[-1]),
            (ctx.index, "least_squares_residual", invariant_projection_residual(w_ls[:-1], G)),
            (ctx.index, "distance_to_least_squares", float(np.linalg.norm(params.values - w_ls))),
            (ctx.index, "train_loss_final", tel.records[-1].train_loss if tel.records else math.nan)]


def _convergence_summary(rows, p) -> dict:
    c = _by_key(rows)
    final, ls = c["residual_final"], c["least_squares_residual"]
    metrics = {"replicates": len(final), "max_residual_final": final.max(),
               "median_residual_final": float(np.median(final)),
               "max_least_squares_residual": ls.max(),
               "max_distance_to_least_squares": c["distance_to_least_squares"].max()}
    ok = int(np.sum(final < p["tol"]))
    return {"metrics": metrics, "assertions": [
        _assertion("da_reaches_invariant", ok == len(final),
                   f"{ok}/{len(final)} runs with residual < {p['tol']:g}"),
        _assertion("least_squares_invariant", bool(np.all(ls < 1e-8)),
                   f"largest least-squares residual {ls.max():.3g}"),
    ]}


register(Study("invariant_convergence",
               {"k": 3, "n_train": 200, "n_test": 100, "epochs": 60, "batch_size": 10, "lr": 0.1,
                "tol": 1e-3},
               10, _convergence_replicate, _convergence_summary))


# -- orbit variance in and out of distribution --------------------------------------------


def _ood_replicate(ctx: ReplicateContext) -> list:
    p = ctx.params
    seed = ctx.int_seed
    task = grid_rotation_task(p["p"], p["n_classes"], sizes=(p["n_train"], p["n_test"], p["n_ood"]),
                              seed=seed)
    tr, te, ood = generate(task)
    G = task.group
    d = p["p"] ** 2
    rows = []
    runs = {"da": (ModelSpec.mlp(d, [p["hidden"]], p["n_classes"]), TrainMode.da(p["m"])),
            "fa": (ModelSpec.mlp(d, [p["hidden"]], p["n_classes"], average=AverageOverGroup(G)),
                   TrainMode.fa())}
    for name, (spec, mode) in runs.items():
        cfg = TrainConfig(mode, "cross_entropy", epochs=p["epochs"], batch_size=p["batch_size"],
                          lr=p["lr"], seed=seed, group=G, telemetry=Telemetry(orbit_variance=True))
        _, tel = train(spec, cfg, tr, te, ood)
        tel.write_csv(ctx.path("telemetry", f"{name}_r{ctx.index:04d}.csv"))
        v_in, v_ood = tel.series("mean_orbit_variance_in_dist"), tel.series("mean_orbit_variance_ood")
        if name == "da":
            rows += [(ctx.index, "da_orbit_variance_in_initial", v_in[0]),
                     (ctx.index, "da_orbit_variance_in_final", v_in[-1]),
                     (ctx.index, "da_orbit_variance_ood_initial", v_ood[0]),
                     (ctx.index, "da_orbit_variance_ood_final", v_ood[-1])]
        else:
            rows += [(ctx.index, "fa_orbit_variance_in_max", v_in.max()),
                     (ctx.index, "fa_orbit_variance_ood_max", v_ood.max())]
        rows.append((ctx.index, f"{name}_test_loss_final", tel.series("test_loss")[-1]))
    return rows


def _ood_summary(rows, p) -> dict:
    c = _by_key(rows)
    red = 1.0 - c["da_orbit_variance_in_final"] / c["da_orbit_variance_in_initial"]
    ood_change = c["da_orbit_variance_ood_final"] / c["da_orbit_variance_ood_initial"]
    fa_max = max(c["fa_orbit_variance_in_max"].max(), c["fa_orbit_variance_ood_max"].max())
    metrics = {"min_in_dist_reduction": red.min(), "median_in_dist_reduction": float(np.median(red)),
               "median_ood_variance_ratio": float(np.median(ood_change)),
               "median_da_orbit_variance_ood_final": float(np.median(c["da_orbit_variance_ood_final"])),
               "fa_max_orbit_variance": fa_max,
               "median_da_test_loss": float(np.median(c["da_test_loss_final"])),
               "median_fa_test_loss": float(np.median(c["fa_test_loss_final"]))}
    ok = int(np.sum(red >= p["min_reduction"]))
    return {"metrics": metrics, "assertions": [
        _assertion("da_reduces_in_dist_variance", ok == len(red),
                   f"{ok}/{len(red)} runs reduce by >= {p['min_reduction']:.0%}"),
        _assertion("fa_variance_zero", fa_max == 0.0, f"largest FA orbit variance {fa_max:.3g}"),
    ]}


register(Study("ood_orbit_variance",
               {"p": 6, "n_classes": 3, "hidden": 32, "epochs": 30, "batch_size": 32, "lr": 0.1,
                "m": 1, "n_train": 2000, "n_test": 500, "n_ood": 500, "min_reduction": 0.5},
               5, _ood_replicate, _ood_summary))


# -- training mode comparison --------------------------------------------------------------


TRAIN_MODES = {"baseline": TrainMode.baseline(), "da1": TrainMode.da(1), "da4": TrainMode.da(4),
               "fa": TrainMode.fa()}


def _compare_replicate(ctx: ReplicateContext) -> list:
    p = ctx.params
    seed = ctx.int_seed
    task = permutation_pointset_task(p["k"], p["dims"], sizes=(p["n_train"], p["n_test"], 0),
                                     seed=seed)
    tr, te, _ = generate(task)
    G = task.group
    d = p["k"] * p["dims"]
    rows = []
    for name, mode in TRAIN_MODES.items():
        avg = AverageOverGroup(G) if name == "fa" else None
        spec = ModelSpec.mlp(d, [p["hidden"]], 2, average=avg, averaging_index=p["averaging_index"])
        cfg = TrainConfig(mode, "cross_entropy", epochs=p["epochs"], batch_size=p["batch_size"],
                          lr=p["lr"], seed=seed, group=G, probe_batches=p["probe_batches"],
                          telemetry=Telemetry(gradient_variance=True, eval_with_and_without_fa=True))
        _, tel = train(spec, cfg, tr, te)
        tel.write_csv(ctx.path("telemetry", f"{name}_r{ctx.index:04d}.csv"))
        gv = tel.series("gradient_variance")
        last = tel.records[-1] if tel.records else tel.initial
        rows += [(ctx.index, f"{name}_gradient_variance_initial", gv[0]),
                 (ctx.index, f"{name}_gradient_variance_mean", gv[1:].mean() if len(gv) > 1 else gv[0]),
                 (ctx.index, f"{name}_train_loss_final", last.train_loss_plain),
                 (ctx.index, f"{name}_test_loss_final", last.test_loss),
                 (ctx.index, f"{name}_single_minus_averaged_test_loss",
                  last.test_loss_single - last.test_loss_fa_eval)]
    return rows


def _compare_summary(rows, p) -> dict:
    c = _by_key(rows)
    metrics = {}
    for name in TRAIN_MODES:
        for q in ("gradient_variance_initial", "gradient_variance_mean", "train_loss_final",
                  "test_loss_final", "single_minus_averaged_test_loss"):
            metrics[f"{name}_{q}"] = float(np.median(c[f"{name}_{q}"]))
    fa0, da0 = c["fa_gradient_variance_initial"], c["da1_gradient_variance_initial"]
    ok = int(np.sum(fa0 <= da0))
    return {"metrics": metrics, "assertions": [
        _assertion("fa_gradient_variance_at_init", ok == len(fa0),
                   f"FA probe <= DA(1) probe at the shared initialization in {ok}/{len(fa0)} runs"),
    ]}


register(Study("train_compare",
               {"k": 4, "dims": 2, "hidden": 16, "averaging_index": 1, "epochs": 15,
                "batch_size": 32, "lr": 0.05, "probe_batches": 20, "n_train": 1000,
                "n_test": 500},
               3, _compare_replicate, _compare_summary))


# -- PAC-Bayes bound ordering ---------------------------------------------------------------


def _prior_center(spec: ModelSpec, seed: int) -> ParamVector:
    # the initialization train() used for this seed
    return init_params(spec, np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[0]))


def _bound_json(ctx, name, rep):
    path = ctx.path("bounds", f"{name}_r{ctx.index:04d}.json")
    path.write_text(rep.to_json() + "\n", encoding="utf-8")


def invariant_posterior(Q: GaussianWeightDistribution, G) -> GaussianWeightDistribution:
    """Project a linear model's posterior onto laws invariant under the dual action.

    The mean is dual-averaged and the weight variances are averaged over
    coordinate orbits, so ``w.gx`` and ``w.x`` share a distribution for every
    ``g`` and the plain and augmented risks of Q agree in expectation.
    """
    mean = symmetrize_linear_weights(Q.mean, G)
    spec = Q.spec
    name = next(n for n in spec.layout if n.endswith(".W"))
    off, (d, out) = spec.layout[name]
    labels = G.coordinate_orbits()
    var = Q.std[off:off + d * out].reshape(d, out) ** 2
    sums = np.zeros((labels.max() + 1, out))
    np.add.at(sums, labels, var)
    counts = np.bincount(labels)[:, None]
    std = Q.std.copy()
    std[off:off + d * out] = np.sqrt(sums / counts)[labels].ravel()
    return GaussianWeightDistribution(mean, std)


def _linear_pipeline(ctx: ReplicateContext, seed: int) -> list:
    """Plain, augmented and feature-averaged bounds for one linear Gaussian posterior."""
    p = ctx.params
    k, dims = p["linear_k"], p["dims"]
    task = permutation_pointset_task(k, dims, sizes=(p["n_train"], 0, 0), seed=seed,
                                     label_rule="centroid_sum")
    tr, _, _ = generate(task)
    G = task.group
    spec = ModelSpec.linear(k * dims, 2, bias=True)
    cfg = TrainConfig(TrainMode.da(1), "cross_entropy", epochs=p["epochs"], batch_size=32,
                      lr=0.1, seed=seed, group=G)
    trained, _ = train(spec, cfg, tr)
    center = _prior_center(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    Q, _ = fit_posterior(spec, trained, tr, center, rng, SurrogateSettings(steps=p["surrogate_steps"]))
    Q = invariant_posterior(Q, G)
    inputs = BoundInputs(len(tr), p["delta"], mc_samples=p["mc_samples"])
    W = Q.sample(rng, inputs.mc_samples)
    fa_spec = ModelSpec(k * dims, (AverageOverGroup(G), Dense(2)))
    Q_fa = GaussianWeightDistribution(ParamVector(Q.mean_values, fa_spec), Q.std)
    # per-draw plain minus augmented 0-1 risk on the shared draws
    orbits = G.act_all(tr.X).reshape(-1, k * dims)
    diff = np.empty(len(W))
    for t, w in enumerate(W):
        pv = ParamVector(w, spec)
        plain = np.mean(predict_classes(forward(spec, pv, tr.X)) != tr.y)
        aug = np.mean(predict_classes(forward(spec, pv, orbits)).reshape(G.order, -1) != tr.y)
        diff[t] = plain - aug
    r_plain = stochastic_risk(Q, tr, rng, 0, weights=W)
    r_aug = stochastic_risk(Q, tr, rng, 0, "augmented", G, weights=W)
    r_fa = stochastic_risk(Q_fa, tr, rng, 0, weights=W)
    best = None
    for sigma in PRIOR_STD_GRID:
        P = grid_prior(center, sigma)
        rep = assemble_report("baseline", inputs, r_plain, kl_diag_gaussian(Q, P), GRID_PENALTY,
                              {"prior_std": float(sigma)})
        if best is None or rep.bound < best[0].bound:
            best = (rep, P)
    b0, P = best
    bda = assemble_report("da", inputs, r_aug, kl_diag_gaussian(Q, P), GRID_PENALTY, b0.extra)
    bfa = assemble_report("fa", inputs, r_fa, symmetrized_linear_kl(Q, P, G), GRID_PENALTY, b0.extra)
    for name, rep in (("linear_baseline", b0), ("linear_da", bda), ("linear_fa", bfa)):
        _bound_json(ctx, name, rep)
    return [(ctx.index, "linear_bound_baseline", b0.bound), (ctx.index, "linear_bound_da", bda.bound),
            (ctx.index, "linear_bound_fa", bfa.bound),
            (ctx.index, "linear_kl_baseline", b0.kl.value), (ctx.index, "linear_kl_da", bda.kl.value),
            (ctx.index, "linear_kl_fa", bfa.kl.value),
            (ctx.index, "linear_risk_baseline", r_plain.value), (ctx.index, "linear_risk_da", r_aug.value),
            (ctx.index, "linear_risk_fa", r_fa.value),
            (ctx.index, "linear_risk_difference", diff.mean()),
            (ctx.index, "linear_risk_difference_se", diff.std(ddof=1) / math.sqrt(len(diff)))]


def _pacbayes_replicate(ctx: ReplicateContext) -> list:
    p = ctx.params
    seed = ctx.int_seed
    k, dims = p["k"], p["dims"]
    task = permutation_pointset_task(k, dims, sizes=(p["n_train"], p["n_test"], 0), seed=seed)
    tr, te, _ = generate(task)
    models = {"invariant": groups.symmetric_group(k, dims),
              "partial": groups.block_permutation_group(tuple(p["partial_blocks"]), dims),
              "unconstrained": None}
    rows = []
    inputs = BoundInputs(len(tr), p["delta"], mc_samples=p["mc_samples"])
    settings = SurrogateSettings(steps=p["surrogate_steps"])
    for j, (name, G) in enumerate(models.items()):
        avg = AverageOverGroup(G) if G is not None else None
        spec = ModelSpec.mlp(k * dims, [p["hidden"]], 2, average=avg, averaging_index=1)
        mode = TrainMode.fa() if G is not None else TrainMode.baseline()
        cfg = TrainConfig(mode, "cross_entropy", epochs=p["epochs"], batch_size=32, lr=0.1, seed=seed)
        params, tel = train(spec, cfg, tr, te)
        save_checkpoint(ctx.path("checkpoints", f"{name}_r{ctx.index:04d}.ckpt"), spec, params, seed,
                        mode.to_dict())
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[j + 1])
        rep = optimize_stochastic_bound(spec, params, tr, inputs, _prior_center(spec, seed), rng, settings)
        _bound_json(ctx, name, rep)
        rows += [(ctx.index, f"bound_{name}", rep.bound), (ctx.index, f"risk_{name}", rep.risk.value),
                 (ctx.index, f"kl_{name}", rep.kl.value),
                 (ctx.index, f"test_loss_{name}", tel.series("test_loss")[-1])]
    if p["linear"]:
        rows += _linear_pipeline(ctx, seed)
    return rows


def _pacbayes_summary(rows, p) -> dict:
    c = _by_key(rows)
    inv, part, unc = c["bound_invariant"], c["bound_partial"], c["bound_unconstrained"]
    ordered = (inv < part) & (part < unc)
    R = len(inv)
    # under exchangeable bounds each of the 3! orders is equally likely
    pval = float(stats.binomtest(int(ordered.sum()), R, 1 / 6, alternative="greater").pvalue)
    metrics = {"median_bound_invariant": float(np.median(inv)),
               "median_bound_partial": float(np.median(part)),
               "median_bound_unconstrained": float(np.median(unc)),
               "ordered_replicates": int(ordered.sum()), "ordering_p_value": pval}
    checks = [_assertion("bound_ordering", pval < p["alpha"],
                         f"invariant < partial < unconstrained in {int(ordered.sum())}/{R} runs, "
                         f"binomial p = {pval:.3g}")]
    if p["linear"]:
        b0, bda, bfa = c["linear_bound_baseline"], c["linear_bound_da"], c["linear_bound_fa"]
        diff, se = c["linear_risk_difference"], c["linear_risk_difference_se"]
        same_kl = bool(np.all(c["linear_kl_baseline"] == c["linear_kl_da"]))
        close = np.abs(diff) <= 3 * se
        fa_ok = bfa <= bda
        metrics.update({"median_linear_bound_baseline": float(np.median(b0)),
                        "median_linear_bound_da": float(np.median(bda)),
                        "median_linear_bound_fa": float(np.median(bfa)),
                        "max_linear_risk_difference_z": float(np.max(np.abs(diff) / np.where(se > 0, se, np.inf)))})
        checks += [
            _assertion("linear_da_matches_baseline", same_kl and bool(close.all()),
                       f"identical KL: {same_kl}; risks within 3 SE in {int(close.sum())}/{R} runs"),
            _assertion("linear_fa_below_da", bool(fa_ok.all()),
                       f"B_FA <= B_DA in {int(fa_ok.sum())}/{R} runs"),
        ]
    return {"metrics": metrics, "assertions": checks}


register(Study("pacbayes_ordering",
               {"k": 6, "dims": 2, "hidden": 16, "partial_blocks": [3, 3], "epochs": 20,
                "n_train": 2000, "n_test": 500, "delta": 0.05, "mc_samples": 150,
                "surrogate_steps": 2000, "alpha": 0.05, "linear": True, "linear_k": 4},
               10, _pacbayes_replicate, _pacbayes_summary,
               validate=lambda p: _require(sum(p["partial_blocks"]) == p["k"],
                                           "partial_blocks must sum to k")))


# -- Boolean KLs ---------------------------------------------------------------------------

BOOLEAN_EXAMPLE = (2, [((0, 1), 1), ((1, 0), 1)])


def enumerate_boolean_kl(pairs, k: int) -> tuple[int, int]:
    """KL in bits by listing every Boolean (and every permutation-invariant)
    function and counting those consistent with the data."""
    idx = np.array([int("".join(map(str, x)), 2) for x, _ in pairs], dtype=np.int64)
    ones = np.array([sum(x) for x, _ in pairs], dtype=np.int64)
    y = np.array([y for _, y in pairs], dtype=np.int64)
    out = []
    for n_inputs, pos in ((2**k, idx), (k + 1, ones)):
        tables = np.arange(2**n_inputs, dtype=np.int64)
        consistent = int(np.sum(np.all(((tables[:, None] >> pos[None, :]) & 1) == y, axis=1)))
        # both counts are powers of two
        out.append((2**n_inputs).bit_length() - consistent.bit_length())
    return out[0], out[1]


def _boolean_replicate(ctx: ReplicateContext) -> list:
    if ctx.index == 0:
        k, pairs = BOOLEAN_EXAMPLE
    else:
        rng = np.random.default_rng(ctx.seed)
        k = int(rng.choice(ctx.params["arities"]))
        h = rng.integers(0, 2, size=k + 1)
        X = rng.integers(0, 2, size=(int(rng.integers(1, 2**k + 3)), k))
        pairs = [(tuple(int(v) for v in x), int(h[x.sum()])) for x in X]
    kl = boolean_kl(pairs, k)
    e_raw, e_inv = enumerate_boolean_kl(pairs, k)
    i = ctx.index
    return [(i, "k", k), (i, "n", len(pairs)), (i, "kl_bits", kl.kl_bits),
            (i, "kl_inv_bits", kl.kl_inv_bits), (i, "gap_bits", kl.gap_bits),
            (i, "enumerated_kl_bits", e_raw), (i, "enumerated_kl_inv_bits", e_inv)]


def _boolean_summary(rows, p) -> dict:
    c = _by_key(rows)
    example = (int(c["kl_bits"][0]), int(c["kl_inv_bits"][0]), int(c["gap_bits"][0]))
    match = (c["kl_bits"] == c["enumerated_kl_bits"]) & (c["kl_inv_bits"] == c["enumerated_kl_inv_bits"])
    bounded = c["kl_bits"] <= c["n"]
    R = len(match)
    return {"metrics": {"kl_bits": example[0], "kl_inv_bits": example[1], "gap": example[2],
                        "datasets": R, "enumeration_matches": int(match.sum()),
                        "kl_within_n": int(bounded.sum())},
            "assertions": [
                _assertion("example", example == (2, 1, 1), f"(kl, kl_inv, gap) = {example}"),
                _assertion("counting_matches_enumeration", bool(match.all()),
                           f"{int(match.sum())}/{R} datasets agree"),
                _assertion("kl_at_most_n", bool(bounded.all()), f"{int(bounded.sum())}/{R} datasets"),
            ]}


register(Study("boolean_kl", {"arities": [2, 3]}, 101, _boolean_replicate, _boolean_summary,
               validate=lambda p: _require(all(a in (1, 2, 3, 4) for a in p["arities"]),
                                           "arities must lie in 1..4")))


# -- configuration -------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    study: str
    params: dict = field(default_factory=dict)
    replicates: int = 1
    seed: int = 0
    output: Path = Path("runs")
    jobs: int = 1

    def to_dict(self) -> dict:
        return {"study": self.study, "params": self.params, "replicates": self.replicates,
                "seed": self.seed}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"parameter {key!r} expects true or false, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"parameter {key!r} expects a list, got {value!r}")
        kind = type(default[0]) if default else str
        return [_coerce(key, v, kind()) for v in value]
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {key!r} expects {type(default).__name__}, got {value!r}") from None
    return str(value)


def resolve_params(study: Study, given: dict) -> dict:
    unknown = sorted(set(given) - set(study.defaults))
    if unknown:
        raise ConfigError(f"unknown parameter(s) for {study.name}: {', '.join(unknown)}; "
                          f"expected {', '.join(sorted(study.defaults))}")
    params = {k: _coerce(k, given[k], d) if k in given else d for k, d in study.defaults.items()}
    if study.validate:
        study.validate(params)
    return params


def build_config(data: dict, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """Merge defaults < file < ``INVLAB_SEED`` < flags into a validated config.

    ``overrides`` may hold ``seed``, ``replicates``, ``output``, ``jobs`` and
    a ``params`` dict of per-study parameters.
    """
    env = os.environ if env is None else env
    overrides = overrides or {}
    allowed = {"study", "seed", "replicates", "output", "jobs", "params"}
    extra = sorted(set(data) - allowed)
    if extra:
        raise ConfigError(f"unknown config key(s): {', '.join(extra)}")
    name = overrides.get("study") or data.get("study")
    if name not in STUDIES:
        raise ConfigError(f"unknown study {name!r}; choose from {', '.join(STUDIES)}")
    study = STUDIES[name]
    if not isinstance(data.get("params", {}), dict):
        raise ConfigError("params must be a table")
    params = resolve_params(study, {**data.get("params", {}), **overrides.get("params", {})})

    seed = data.get("seed", 0)
    if env.get(SEED_ENV, "").strip():
        seed = env[SEED_ENV]
    if overrides.get("seed") is not None:
        seed = overrides["seed"]
    pick = lambda key, default: overrides[key] if overrides.get(key) is not None else data.get(key, default)
    replicates = pick("replicates", study.default_replicates)
    jobs = pick("jobs", 1)
    try:
        seed, replicates, jobs = int(seed), int(replicates), int(jobs)
    except (TypeError, ValueError):
        raise ConfigError("seed, replicates and jobs must be integers") from None
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    if replicates < 1:
        raise ConfigError("replicate count must be >= 1")
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    output = Path(overrides.get("output") or data.get("output") or Path("runs") / name)
    return ExperimentConfig(name, params, replicates, seed, output, jobs)


def load_config(path, overrides: dict | None = None, env=None) -> ExperimentConfig:
    """Read a TOML config; a relative ``output`` is taken relative to the file."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "output" in data and not Path(data["output"]).is_absolute():
        data["output"] = str(path.parent / data["output"])
    return build_config(data, overrides, env)


# -- running -------------------------------------------------------------------------------


def replicate_path(out_dir: Path, i: int) -> Path:
    return out_dir / REPLICATE_DIR / f"r{i:04d}.csv"


def load_rows(out_dir: Path, study: Study, replicates: int) -> list:
    rows = []
    for i in range(replicates):
        rows += read_rows(replicate_path(out_dir, i), study.header)
    return rows


def summarize(study: Study, rows: list, config: dict) -> dict:
    out = study.summarize(rows, config["params"])
    metrics = {k: _clean(v) for k, v in out["metrics"].items()}
    passed = all(a["passed"] for a in out["assertions"])
    return {"format_version": FORMAT_VERSION, **config, "metrics": metrics,
            "assertions": out["assertions"], "passed": passed}


def summary_schema() -> dict:
    text = resources.files("invlab").joinpath("schemas/summary.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_summary(summary: dict) -> None:
    import jsonschema

    jsonschema.validate(summary, summary_schema())


def dump_summary(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n"


def run_experiment(config: ExperimentConfig, progress: Callable[[int], None] | None = None) -> dict:
    """Run every replicate (up to ``config.jobs`` at a time), then reduce.

    Replicate ``i`` draws from the ``i``-th child of ``SeedSequence(seed)`` and
    owns ``replicates/r{i:04d}.csv``; the reducer reads the files back in
    index order after all workers finish, so the summary does not depend on
    scheduling.
    """
    study = STUDIES[config.study]
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(config.seed).spawn(config.replicates)

    def work(i):
        rows = study.replicate(ReplicateContext(i, seeds[i], config.params, out))
        write_rows(replicate_path(out, i), study.header, rows)
        if progress:
            progress(i)

    if config.jobs == 1:
        for i in range(config.replicates):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            for fut in [pool.submit(work, i) for i in range(config.replicates)]:
                fut.result()
    summary = summarize(study, load_rows(out, study, config.replicates), config.to_dict())
    validate_summary(summary)
    (out / SUMMARY_FILE).write_text(dump_summary(summary), encoding="utf-8")
    return summary


def read_run(out_dir) -> tuple[Study, dict, list]:
    """Load ``(study, stored summary, rows)`` from a completed run directory."""
    out = Path(out_dir)
    if not out.is_dir():
        raise RunFilesError(f"{out} is not a directory")
    spath = out / SUMMARY_FILE
    if not spath.exists():
        raise RunFilesError(f"{out} holds no {SUMMARY_FILE}; "
                            "run `invlab run <config>` with its output set to this directory first")
    try:
        summary = json.loads(spath.read_text(encoding="utf-8"))
        study = STUDIES[summary["study"]]
        replicates = int(summary["replicates"])
    except (ValueError, KeyError, TypeError) as exc:
        raise RunFilesError(f"{spath}: corrupt summary ({exc})") from None
    return study, summary, load_rows(out, study, replicates)


def recompute(out_dir) -> tuple[dict, dict]:
    """Stored and freshly recomputed summaries of a run directory."""
    study, stored, rows = read_run(out_dir)
    config = {k: stored[k] for k in ("study", "params", "replicates", "seed")}
    return stored, summarize(study, rows, config)
