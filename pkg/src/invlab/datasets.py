"""Synthetic invariant datasets built by disintegration (draw an orbit
representative, then a uniformly random group element), CSV/JSON file I/O,
and the two counterexample constructions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .groups import FiniteGroupAction, build_group
from .losses import ABSOLUTE
from .symmetrization import augmented_risk, empirical_risk


class DatasetError(ValueError):
    """Malformed dataset file or infeasible construction."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise DatasetError(f"inputs {X.shape} and labels {y.shape} do not align")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i):
        # tuple unpacking as (X, y)
        return (self.X, self.y)[i]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.X[idx], self.y[idx], dict(self.meta))

    # -- files --------------------------------------------------------------

    def save(self, path, sidecar: dict | None = None) -> Path:
        """Write ``id,label,x0..x{d-1}`` CSV and a ``<name>.json`` sidecar."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "label"] + [f"x{j}" for j in range(self.input_dim)])
            integral = np.issubdtype(self.y.dtype, np.integer)
            for i, (x, lab) in enumerate(zip(self.X, self.y)):
                w.writerow([i, int(lab) if integral else format(float(lab), ".17g")]
                           + [format(v, ".17g") for v in x])
        meta = dict(self.meta)
        if sidecar:
            meta.update(sidecar)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        path = Path(path)
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise DatasetError(f"cannot read {path}: {exc}") from exc
        if not rows or rows[0][:2] != ["id", "label"]:
            raise DatasetError(f"{path}: expected header starting with 'id,label'")
        d = len(rows[0]) - 2
        if rows[0][2:] != [f"x{j}" for j in range(d)]:
            raise DatasetError(f"{path}: feature columns must be x0..x{d - 1}")
        body = rows[1:]
        try:
            labels = [r[1] for r in body]
            X = np.array([[float(v) for v in r[2:]] for r in body], dtype=float).reshape(len(body), d)
            if all(lab.lstrip("-").isdigit() for lab in labels):
                y = np.array([int(lab) for lab in labels], dtype=np.int64)
            else:
                y = np.array([float(lab) for lab in labels])
        except (ValueError, IndexError) as exc:
            raise DatasetError(f"{path}: malformed row ({exc})") from exc
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(X, y, meta)

    @property
    def group(self) -> FiniteGroupAction | None:
        g = self.meta.get("group")
        return FiniteGroupAction.from_dict(g) if g else None


# -- task registry ---------------------------------------------------------------------

# sampler(rng, n, params, domain) -> raw representatives (n, d)
SAMPLERS: dict[str, Callable] = {}
# rule(representatives, params, domain) -> labels (n,)
LABEL_RULES: dict[str, Callable] = {}


def register_sampler(name: str):
    def deco(fn):
        SAMPLERS[name] = fn
        return fn
    return deco


def register_label_rule(name: str):
    def deco(fn):
        LABEL_RULES[name] = fn
        return fn
    return deco


@dataclass(frozen=True, eq=False)
class InvariantTaskSpec:
    """A G-invariant distribution described by its disintegration.

    Labels are computed from the canonical orbit representative, so every
    orbit carries exactly one label.
    """

    name: str
    group_kind: str
    group_params: dict
    sampler: str
    label_rule: str
    params: dict
    n_train: int = 2000
    n_test: int = 500
    n_ood: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise DatasetError(f"unknown sampler {self.sampler!r}")
        if self.label_rule not in LABEL_RULES:
            raise DatasetError(f"unknown label rule {self.label_rule!r}")
        if min(self.n_train, self.n_test, self.n_ood) < 0:
            raise DatasetError("split sizes must be nonnegative")

    @property
    def group(self) -> FiniteGroupAction:
        if "_group" not in self.__dict__:
            object.__setattr__(self, "_group", build_group(self.group_kind, **self.group_params))
        return self.__dict__["_group"]

    def sample_representatives(self, rng: np.random.Generator, n: int,
                               domain: str = "in") -> tuple[np.ndarray, np.ndarray]:
        phi = self.group.canonical_representative(SAMPLERS[self.sampler](rng, n, self.params, domain))
        y = LABEL_RULES[self.label_rule](phi, self.params, domain)
        return phi, np.asarray(y)

    def sample(self, rng: np.random.Generator, n: int, domain: str = "in") -> LabeledDataset:
        phi, y = self.sample_representatives(rng, n, domain)
        g = self.group.sample_uniform(rng, size=n)
        X = self.group.act(g, phi)
        return LabeledDataset(X, y, {"task": self.to_dict(), "domain": domain})

    def to_dict(self) -> dict:
        return {"name": self.name, "group": {"kind": self.group_kind, **self.group_params},
                "sampler": self.sampler, "label_rule": self.label_rule, "params": self.params,
                "n_train": self.n_train, "n_test": self.n_test, "n_ood": self.n_ood,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "InvariantTaskSpec":
        g = dict(d["group"])
        kind = g.pop("kind")
        return cls(d["name"], kind, g, d["sampler"], d["label_rule"], dict(d["params"]),
                   int(d["n_train"]), int(d["n_test"]), int(d["n_ood"]), int(d["seed"]))


def generate(task: InvariantTaskSpec, rng: np.random.Generator | None = None):
    """Train, test and out-of-distribution splits, each from its own derived stream."""
    root = np.random.SeedSequence(task.seed) if rng is None else np.random.SeedSequence(
        rng.integers(2**63))
    streams = [np.random.default_rng(s) for s in root.spawn(3)]
    out = []
    for split, n, domain, r in zip(("train", "test", "ood"),
                                   (task.n_train, task.n_test, task.n_ood),
                                   ("in", "in", "ood"), streams):
        ds = task.sample(r, n, domain)
        ds.meta.update(split=split, seed=task.seed, group=task.group.to_dict())
        out.append(ds)
    return tuple(out)


def invariance_audit(ds: LabeledDataset, task: InvariantTaskSpec, rng: np.random.Generator,
                     n_pairs: int = 100) -> int:
    """Number of random (example, element) pairs whose relabeled transform
    disagrees with the stored label (0 for a valid invariant dataset)."""
    if len(ds) == 0:
        return 0
    domain = ds.meta.get("domain", "in")
    idx = rng.integers(len(ds), size=n_pairs)
    g = task.group.sample_uniform(rng, size=n_pairs)
    moved = task.group.act(g, ds.X[idx])
    phi = task.group.canonical_representative(moved)
    relabeled = LABEL_RULES[task.label_rule](phi, task.params, domain)
    return int(np.sum(np.asarray(relabeled) != ds.y[idx]))


# -- grid task ---------------------------------------------------------------------------


def _blob(p: int, centers, width: float) -> np.ndarray:
    ii, jj = np.mgrid[0:p, 0:p]
    img = sum(np.exp(-((ii - r) ** 2 + (jj - c) ** 2) / (2 * width**2)) for r, c in centers)
    return (img / img.max()).ravel()


def grid_templates(p: int, n_classes: int, width: float = 1.0, template_seed: int = 0):
    """In-distribution single-blob templates and OOD two-blob templates, each
    centered on a different rotation orbit of grid cells. OOD templates are
    rescaled to the mean in-distribution orbit spread."""
    group = build_group("grid_rotations", p=p)
    cells = np.eye(p * p)
    orbit_of = {}
    for c in range(p * p):
        orbit_of.setdefault(tuple(group.canonical_representative(cells[c])), c)
    reps = sorted(orbit_of.values())
    reps = [c for c in reps if len(group.orbit(cells[c])) == 4]
    need = 3 * n_classes
    if len(reps) < need:
        raise DatasetError(f"grid side {p} is too small for {n_classes} classes")
    order = np.random.default_rng(template_seed).permutation(len(reps))
    pick = [divmod(reps[i], p) for i in order[:need]]
    ind = np.array([_blob(p, [pick[c]], width) for c in range(n_classes)])
    ood = np.array([_blob(p, [pick[n_classes + 2 * c], pick[n_classes + 2 * c + 1]], width)
                    for c in range(n_classes)])
    # match the within-orbit spread so an untrained model sees both domains alike
    spread = lambda t: group.act_all(t).var(axis=0).sum(axis=-1)
    ood *= np.sqrt(spread(ind).mean() / spread(ood))[:, None]
    return ind, ood


def _grid_setup(params):
    key = ("_templates", params["p"], params["n_classes"], params.get("width", 1.0),
           params.get("template_seed", 0))
    cache = _grid_setup.__dict__.setdefault("cache", {})
    if key not in cache:
        ind, ood = grid_templates(params["p"], params["n_classes"], params.get("width", 1.0),
                                  params.get("template_seed", 0))
        group = build_group("grid_rotations", p=params["p"])
        cache[key] = (ind, ood, group.act_all(ind), group.act_all(ood))
    return cache[key]


@register_sampler("grid_blobs")
def _sample_grid(rng, n, params, domain):
    ind, ood, _, _ = _grid_setup(params)
    templates = ind if domain == "in" else ood
    cls = rng.integers(len(templates), size=n)
    amp = rng.uniform(0.8, 1.2, size=(n, 1))
    return amp * templates[cls] + params.get("noise", 0.15) * rng.standard_normal((n, templates.shape[1]))


@register_label_rule("nearest_template_orbit")
def _label_grid(phi, params, domain):
    _, _, ind_orb, ood_orb = _grid_setup(params)
    orb = ind_orb if domain == "in" else ood_orb  # (4, C, d)
    d2 = ((phi[None, None] - orb[:, :, None]) ** 2).sum(-1)  # (4, C, n)
    return d2.min(axis=0).argmin(axis=0).astype(np.int64)


def grid_rotation_task(p: int = 6, n_classes: int = 3, sizes=(2000, 500, 500), seed: int = 0,
                       noise: float = 0.15, width: float = 1.0) -> InvariantTaskSpec:
    """C4 rotations of p x p images; each class is a noisy Gaussian blob at
    its own rotation orbit; OOD images carry two blobs at unused orbits."""
    if p < 2:
        raise DatasetError("grid side must be at least 2")
    return InvariantTaskSpec("grid_rotation", "grid_rotations", {"p": p}, "grid_blobs",
                             "nearest_template_orbit",
                             {"p": p, "n_classes": n_classes, "noise": noise, "width": width,
                              "template_seed": 0},
                             *sizes, seed=seed)


# -- point sets --------------------------------------------------------------------------


@register_sampler("point_cloud")
def _sample_points(rng, n, params, domain):
    k, dims = params["k_points"], params["dims"]
    if domain == "in":
        center = params.get("center_scale", 1.0) * rng.standard_normal((n, 1, dims))
        pts = center + params.get("point_scale", 1.0) * rng.standard_normal((n, k, dims))
    else:
        # heavier tails and a shifted center: a different representative law
        center = 2.0 + params.get("center_scale", 1.0) * rng.standard_t(3, size=(n, 1, dims))
        pts = center + params.get("point_scale", 1.0) * rng.laplace(size=(n, k, dims))
    return pts.reshape(n, k * dims)


def _points(phi, params):
    return phi.reshape(len(phi), params["k_points"], params["dims"])


def _centroid_threshold(params) -> float:
    # median of |centroid| under the in-distribution law (chi distribution)
    v = params.get("center_scale", 1.0) ** 2 + params.get("point_scale", 1.0) ** 2 / params["k_points"]
    return float(np.sqrt(v * stats.chi2.median(params["dims"])))


@register_label_rule("centroid_norm")
def _label_centroid_norm(phi, params, domain):
    c = _points(phi, params).mean(axis=1)
    t = params.get("threshold") or _centroid_threshold(params)
    return (np.linalg.norm(c, axis=1) > t).astype(np.int64)


@register_label_rule("centroid_sum")
def _label_centroid_sum(phi, params, domain):
    return (phi.sum(axis=1) > params.get("threshold", 0.0)).astype(np.int64)


@register_label_rule("spread")
def _label_spread(phi, params, domain):
    pts = _points(phi, params)
    spread = np.linalg.norm(pts - pts.mean(axis=1, keepdims=True), axis=2).mean(axis=1)
    t = params.get("threshold")
    if t is None:
        ref = _sample_points(np.random.default_rng(12345), 20000, params, "in")
        ref = _points(ref, params)
        t = float(np.median(np.linalg.norm(ref - ref.mean(axis=1, keepdims=True), axis=2).mean(axis=1)))
    return (spread > t).astype(np.int64)


@register_label_rule("invariant_regression")
def _label_regression(phi, params, domain):
    # real-valued symmetric target: centroid plus half the spread
    pts = _points(phi, params)
    return pts.mean(axis=(1, 2)) + 0.5 * pts.std(axis=1).mean(axis=1)


def permutation_pointset_task(k_points: int = 4, dims: int = 2, sizes=(2000, 500, 500),
                              seed: int = 0, label_rule: str = "centroid_norm",
                              blocks: tuple[int, ...] | None = None,
                              center_scale: float = 1.0, point_scale: float = 1.0) -> InvariantTaskSpec:
    """Point sets of ``k_points`` points in ``dims`` dimensions; the group
    permutes whole points (S_k, or a product of S_j blocks when ``blocks``
    is given). Labels come from a symmetric statistic of the set."""
    if k_points < 2:
        raise DatasetError("need at least two points")
    if blocks is None:
        kind, gp = "symmetric", {"k": k_points, "dims": dims}
    else:
        if sum(blocks) != k_points:
            raise DatasetError("block sizes must sum to k_points")
        kind, gp = "block_permutation", {"blocks": list(blocks), "dims": dims}
    return InvariantTaskSpec("permutation_pointset", kind, gp, "point_cloud", label_rule,
                             {"k_points": k_points, "dims": dims, "center_scale": center_scale,
                              "point_scale": point_scale},
                             *sizes, seed=seed)


# -- sign task ---------------------------------------------------------------------------


@register_sampler("unit_magnitude")
def _sample_magnitude(rng, n, params, domain):
    lo, hi = params.get("magnitude", (1.0, 1.0))
    return rng.uniform(lo, hi, size=(n, 1)) if hi > lo else np.full((n, 1), float(lo))


@register_label_rule("constant")
def _label_constant(phi, params, domain):
    return np.full(len(phi), params.get("label", 1), dtype=np.int64)


def sign_task(sizes=(50, 0, 0), seed: int = 0, magnitude=(1.0, 1.0)) -> InvariantTaskSpec:
    """C2 acting by x -> -x on scalars; X = +-|Phi| with a constant label."""
    return InvariantTaskSpec("sign", "sign_flip", {"d": 1}, "unit_magnitude", "constant",
                             {"magnitude": list(magnitude), "label": 1}, *sizes, seed=seed)


TASKS = {
    "grid_rotation": grid_rotation_task,
    "permutation_pointset": permutation_pointset_task,
    "sign": sign_task,
}


# -- counterexamples ---------------------------------------------------------------------


def _even_target(x):
    return 1.0 + np.cos(x)


def nonuniform_augmentation_counterexample(epsilon: float, n: int, seed: int = 0,
                                           replicates: int = 0) -> tuple[LabeledDataset, dict]:
    """Sign-asymmetric data with P(X > 0) = 1 - epsilon and an even target.

    The model ``f(x) = 1[x > 0] g(x)`` is exact on positive inputs, so its
    plain absolute-loss risk is about ``epsilon E|g|`` while the C2-augmented
    risk is ``E|g| / 2``. With ``replicates > 0`` the report also holds the
    across-dataset variances of both estimators.
    """
    if not 0.0 < epsilon <= 0.5:
        raise DatasetError("epsilon must lie in (0, 1/2]")
    rng = np.random.default_rng(seed)
    group = build_group("sign_flip", d=1)
    f = lambda X: (X[:, 0] > 0) * _even_target(X[:, 0])

    def draw(m):
        mag = rng.uniform(0.0, np.pi, size=m)
        sign = np.where(rng.random(m) < 1.0 - epsilon, 1.0, -1.0)
        X = (sign * mag)[:, None]
        return LabeledDataset(X, _even_target(X[:, 0]), {"epsilon": epsilon})

    ds = draw(n)
    plain = empirical_risk(f, ds, ABSOLUTE)
    aug = augmented_risk(f, ds, ABSOLUTE, group)
    diff = plain.per_example - aug.per_example
    se = float(np.std(diff, ddof=1) / np.sqrt(n))
    report = {"epsilon": epsilon, "n": n, "plain_risk": plain.value, "plain_stderr": plain.stderr,
              "augmented_risk": aug.value, "augmented_stderr": aug.stderr,
              "gap": plain.value - aug.value, "gap_stderr": se,
              "gap_z": (plain.value - aug.value) / se if se > 0 else float("inf")}
    if replicates:
        reps = np.array([(empirical_risk(f, d, ABSOLUTE).value, augmented_risk(f, d, ABSOLUTE, group).value)
                         for d in (draw(n) for _ in range(replicates))])
        report.update(plain_variance=float(reps[:, 0].var(ddof=1)),
                      augmented_variance=float(reps[:, 1].var(ddof=1)), replicates=replicates)
    return ds, report


def _wrong(output: Fraction, y: int) -> bool:
    return abs(output - y) > Fraction(1, 2)


def zero_one_counterexample(epsilon, class_size: int, seed: int = 0) -> dict:
    """Exact-arithmetic orbit where averaging a [0, 1]-valued classifier
    increases its 0-1 risk.

    On an orbit of ``class_size`` inputs with label y, the model outputs
    ``1/2 + y epsilon`` on all but ``2 epsilon class_size`` inputs and
    ``1 - y`` on the rest. ``seed`` only shuffles which inputs are flipped.
    The loss is ``1[|f(x) - y| > 1/2]``, so an output of exactly 1/2 is
    correct for y = 0 and the pointwise risk is ``2 epsilon``.
    """
    eps = Fraction(str(epsilon)) if isinstance(epsilon, float) else Fraction(epsilon)
    if not 0 < eps < Fraction(1, 4):
        raise DatasetError("epsilon must lie in (0, 1/4)")
    flipped = 2 * eps * class_size
    if flipped < 1:
        raise DatasetError(f"2 * epsilon * class_size = {flipped} < 1: no input can be flipped")
    m = int(flipped)  # floor when the fraction is not integral
    order = np.random.default_rng(seed).permutation(class_size)
    out = {"epsilon": str(eps), "class_size": class_size, "flipped": m, "branches": {}}
    total_point, total_fa = Fraction(0), Fraction(0)
    for y in (0, 1):
        outputs = [Fraction(1 - y) if r < m else Fraction(1, 2) + y * eps for r in order]
        mean = sum(outputs, Fraction(0)) / class_size
        point = Fraction(sum(_wrong(o, y) for o in outputs), class_size)
        fa = Fraction(int(_wrong(mean, y)))
        out["branches"][str(y)] = {"averaged_output": str(mean), "averaged_output_float": float(mean),
                                   "pointwise_risk": float(point), "fa_risk": float(fa),
                                   "pointwise_risk_exact": str(point), "fa_risk_exact": str(fa)}
        total_point += point / 2
        total_fa += fa / 2
    out.update(pointwise_risk=float(total_point), fa_risk=float(total_fa),
               pointwise_risk_exact=str(total_point), fa_risk_exact=str(total_fa),
               fa_worse=bool(total_fa > total_point))
    return out
