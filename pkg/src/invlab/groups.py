"""Finite groups acting linearly on input vectors.

Groups are stored extensionally: an element list, a full composition table,
and one action per element. Actions are signed/scaled index permutations
(``act(g, x)[j] = scale[g, j] * x[perm[g, j]]``) or, for representations
that are not of that form, dense matrices.

Composition follows the left-action convention::

    act(compose(g, h), x) == act(g, act(h, x))
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DENSE_ATOL = 1e-12
EXHAUSTIVE_LIMIT = 64


class GroupError(ValueError):
    """Invalid group definition, unknown element, or dimension mismatch."""


@dataclass(frozen=True)
class OrbitSample:
    representative: np.ndarray
    applied_element: int
    realized_input: np.ndarray


@dataclass(frozen=True, eq=False)
class FiniteGroupAction:
    name: str
    names: tuple[str, ...]
    compose_table: np.ndarray
    inverse_table: np.ndarray
    identity: int
    input_dim: int
    perm: np.ndarray | None = None
    scale: np.ndarray | None = None
    matrices: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for arr in (self.compose_table, self.inverse_table, self.perm, self.scale, self.matrices):
            if arr is not None:
                arr.setflags(write=False)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_permutations(
        cls,
        name: str,
        perms: Sequence[Sequence[int]],
        scales: Sequence[Sequence[float]] | None = None,
        names: Sequence[str] | None = None,
    ) -> "FiniteGroupAction":
        """Build a group from the full list of (signed) index permutations.

        The set must be closed under composition; the composition table is
        recovered by looking up each product.
        """
        perm = np.asarray(perms, dtype=np.int64)
        if perm.ndim != 2 or perm.shape[0] == 0:
            raise GroupError("perms must be a nonempty 2-D array")
        n, d = perm.shape
        scale = np.ones((n, d)) if scales is None else np.asarray(scales, dtype=float)
        if scale.shape != perm.shape:
            raise GroupError("scale shape must match perm shape")
        for p in perm:
            if sorted(p.tolist()) != list(range(d)):
                raise GroupError(f"not a permutation of range({d}): {p.tolist()}")
        keys = _row_keys(perm, scale)
        order = np.argsort(keys)
        sorted_keys = keys[order]
        if np.any(sorted_keys[1:] == sorted_keys[:-1]):
            raise GroupError("duplicate group elements")
        table = np.empty((n, n), dtype=np.int64)
        for g in range(n):
            # act(g, act(h, x))[j] = s_g[j] s_h[p_g[j]] x[p_h[p_g[j]]]
            prods = _row_keys(perm[:, perm[g]], scale[g][None, :] * scale[:, perm[g]])
            pos = np.minimum(np.searchsorted(sorted_keys, prods), n - 1)
            if np.any(sorted_keys[pos] != prods):
                raise GroupError("element set is not closed under composition")
            table[g] = order[pos]
        return cls._from_table(name, table, names, d, perm=perm, scale=scale)

    @classmethod
    def from_matrices(
        cls, name: str, matrices: Sequence[np.ndarray], names: Sequence[str] | None = None
    ) -> "FiniteGroupAction":
        """Build a group from dense representation matrices.

        Signed/scaled permutation matrices are converted to the index form.
        """
        mats = np.asarray(matrices, dtype=float)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise GroupError("matrices must have shape (n, d, d)")
        converted = [_as_signed_perm(m) for m in mats]
        if all(c is not None for c in converted):
            return cls.from_permutations(
                name, [c[0] for c in converted], [c[1] for c in converted], names
            )
        n, d, _ = mats.shape
        table = np.empty((n, n), dtype=np.int64)
        for g in range(n):
            for h in range(n):
                prod = mats[g] @ mats[h]
                hits = np.flatnonzero(
                    np.all(np.abs(mats - prod) <= 1e-9, axis=(1, 2))
                )
                if hits.size != 1:
                    raise GroupError("matrix set is not closed under multiplication")
                table[g, h] = hits[0]
        return cls._from_table(name, table, names, d, matrices=mats)

    @classmethod
    def _from_table(cls, name, table, names, d, **action) -> "FiniteGroupAction":
        n = table.shape[0]
        ident = [e for e in range(n) if np.array_equal(table[e], np.arange(n))
                 and np.array_equal(table[:, e], np.arange(n))]
        if len(ident) != 1:
            raise GroupError("composition table has no unique identity")
        e = ident[0]
        inv = np.empty(n, dtype=np.int64)
        for g in range(n):
            cand = np.flatnonzero(table[g] == e)
            if cand.size != 1 or table[cand[0], g] != e:
                raise GroupError(f"element {g} has no two-sided inverse")
            inv[g] = cand[0]
        if names is None:
            names = [f"g{i}" for i in range(n)]
        names = tuple(str(s) for s in names)
        if len(names) != n or len(set(names)) != n:
            raise GroupError("element names must be unique, one per element")
        return cls(name, names, table, inv, e, d, **action)

    # -- group law ----------------------------------------------------------

    @property
    def order(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return self.order

    @property
    def is_permutation(self) -> bool:
        """True when every element acts by an unscaled index permutation."""
        if "is_perm" not in self._cache:
            self._cache["is_perm"] = self.perm is not None and bool(np.all(self.scale == 1.0))
        return self._cache["is_perm"]

    def element(self, g: int | str) -> int:
        if isinstance(g, (str, np.str_)):
            try:
                return self.names.index(str(g))
            except ValueError:
                raise GroupError(f"unknown element {g!r} in {self.name}") from None
        g = int(g)
        if not 0 <= g < self.order:
            raise GroupError(f"unknown element id {g} in {self.name}")
        return g

    def compose(self, g: int | str, h: int | str) -> int:
        return int(self.compose_table[self.element(g), self.element(h)])

    def inverse(self, g: int | str) -> int:
        return int(self.inverse_table[self.element(g)])

    def check_axioms(self, rng: np.random.Generator | None = None, n_random: int = 1000) -> None:
        """Raise GroupError unless the table and action form a group action.

        Exhaustive for groups of order <= 64, random triples/pairs otherwise.
        """
        n, T = self.order, self.compose_table
        if T.shape != (n, n) or T.min() < 0 or T.max() >= n:
            raise GroupError("composition table is not closed on the element set")
        if n <= EXHAUSTIVE_LIMIT:
            a, b, c = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
            a, b, c = a.ravel(), b.ravel(), c.ravel()
            gh = np.stack(np.meshgrid(np.arange(n), np.arange(n), indexing="ij"), -1).reshape(-1, 2)
        else:
            rng = rng or np.random.default_rng(0)
            a, b, c = rng.integers(n, size=(3, n_random))
            gh = rng.integers(n, size=(n_random, 2))
        if not np.array_equal(T[T[a, b], c], T[a, T[b, c]]):
            raise GroupError("composition is not associative")
        e = self.identity
        if not (np.array_equal(T[e], np.arange(n)) and np.array_equal(T[:, e], np.arange(n))):
            raise GroupError("identity law fails")
        inv = self.inverse_table
        if not (np.all(T[np.arange(n), inv] == e) and np.all(T[inv, np.arange(n)] == e)):
            raise GroupError("inverse table is not a two-sided inverse")
        basis = np.eye(self.input_dim)
        g, h = gh[:, 0], gh[:, 1]
        lhs = self.act(g[:, None], self.act(h[:, None], basis[None]))
        rhs = self.act(T[g, h][:, None], basis[None])
        if not np.allclose(lhs, rhs, atol=DENSE_ATOL, rtol=0):
            raise GroupError("action is not a homomorphism")

    # -- action -------------------------------------------------------------

    def act(self, g, x) -> np.ndarray:
        """Apply element(s) ``g`` to input(s) ``x``.

        ``g`` may be an id, a name, or an integer array broadcastable against
        the leading dimensions of ``x`` (shape ``(..., input_dim)``).
        """
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.input_dim,):
            raise GroupError(f"expected trailing dimension {self.input_dim}, got shape {x.shape}")
        if isinstance(g, (str, np.str_)) or np.ndim(g) == 0:
            g = self.element(g)
        else:
            g = np.asarray(g, dtype=np.int64)
            if g.size and (g.min() < 0 or g.max() >= self.order):
                raise GroupError("element id out of range")
        if self.perm is not None:
            p, s = self.perm[g], self.scale[g]
            lead = np.broadcast_shapes(np.shape(p)[:-1], x.shape[:-1])
            xb = np.broadcast_to(x, lead + (self.input_dim,))
            p = np.broadcast_to(p, lead + (self.input_dim,))
            out = np.take_along_axis(xb, p, axis=-1)
            return out * s if not self.is_permutation else out
        return np.einsum("...ij,...j->...i", self.matrices[g], x)

    def act_all(self, x) -> np.ndarray:
        """Stack ``act(g, x)`` over every element: shape ``(order, *x.shape)``."""
        x = np.asarray(x, dtype=float)
        g = np.arange(self.order).reshape((-1,) + (1,) * (x.ndim - 1))
        return self.act(g, x[None])

    def matrix(self, g) -> np.ndarray:
        """Dense representation matrix of ``g``."""
        return self.act(g, np.eye(self.input_dim)).T

    def averaging_matrix(self) -> np.ndarray:
        """``|G|^-1 sum_g rho_g``; maps x to its orbit mean."""
        if "avg" not in self._cache:
            basis = np.eye(self.input_dim)
            self._cache["avg"] = self.act_all(basis).mean(axis=0).T
        return self._cache["avg"]

    def orbit_mean(self, x) -> np.ndarray:
        """``|G|^-1 sum_g act(g, x)``.

        For unscaled permutations each coordinate becomes the mean over its
        coordinate orbit, summed in sorted order so the result is bitwise
        identical across the orbit of ``x``.
        """
        x = np.asarray(x, dtype=float)
        if not self.is_permutation:
            return x @ self.averaging_matrix().T
        labels = self.coordinate_orbits()
        out = np.empty_like(x)
        for c in range(labels.max() + 1):
            cols = np.flatnonzero(labels == c)
            out[..., cols] = (np.sort(x[..., cols], axis=-1).sum(axis=-1) / cols.size)[..., None]
        return out

    def sample_uniform(self, rng: np.random.Generator, size=None):
        """Draw element id(s) from the uniform (Haar) measure."""
        out = rng.integers(self.order, size=size)
        return int(out) if size is None else out

    def dual_action(self, g, w) -> np.ndarray:
        """Transpose action on weights: ``dual_action(g, w) @ x == w @ act(g, x)``."""
        w = np.asarray(w, dtype=float)
        if w.shape[-1:] != (self.input_dim,):
            raise GroupError(f"expected trailing dimension {self.input_dim}, got shape {w.shape}")
        g = self.element(g)
        if self.perm is not None:
            out = np.empty_like(w)
            out[..., self.perm[g]] = w * self.scale[g]
            return out
        return w @ self.matrices[g]

    # -- orbits -------------------------------------------------------------

    def orbit(self, x) -> list[np.ndarray]:
        """Distinct points of the orbit of ``x``, in element order of first hit."""
        pts = self.act_all(np.asarray(x, dtype=float))
        out: list[np.ndarray] = []
        if self.perm is not None:
            seen = set()
            for p in pts:
                key = (p + 0.0).tobytes()  # + 0.0 folds -0.0 into 0.0
                if key not in seen:
                    seen.add(key)
                    out.append(p)
            return out
        for p in pts:
            if not any(np.all(np.abs(p - q) <= DENSE_ATOL) for q in out):
                out.append(p)
        return out

    def canonical_representative(self, x) -> np.ndarray:
        """Lexicographically minimal point of the orbit (rows if ``x`` is 2-D)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2 and self.order * x.size > 4_000_000:
            step = max(1, 4_000_000 // (self.order * x.shape[1]))
            return np.concatenate([self.canonical_representative(x[i:i + step])
                                   for i in range(0, len(x), step)])
        pts = self.act_all(x)  # (order, ..., d)
        cand = np.ones(pts.shape[:-1], dtype=bool)
        for c in range(self.input_dim):
            vals = np.where(cand, pts[..., c], np.inf)
            cand &= vals == vals.min(axis=0)
        first = np.argmax(cand, axis=0)
        return np.take_along_axis(pts, first[None, ..., None], axis=0)[0]

    def orbit_sample(self, representative, rng: np.random.Generator) -> OrbitSample:
        g = self.sample_uniform(rng)
        phi = np.asarray(representative, dtype=float)
        return OrbitSample(phi, g, self.act(g, phi))

    def coordinate_orbits(self) -> np.ndarray:
        """Label each input coordinate by its orbit under the index permutation.

        Only defined for unscaled permutation actions.
        """
        if not self.is_permutation:
            raise GroupError("coordinate orbits need an unscaled permutation action")
        if "orbits" in self._cache:
            return self._cache["orbits"]
        labels = -np.ones(self.input_dim, dtype=np.int64)
        nxt = 0
        for i in range(self.input_dim):
            if labels[i] < 0:
                labels[np.unique(self.perm[:, i])] = nxt
                nxt += 1
        labels.setflags(write=False)
        self._cache["orbits"] = labels
        return labels

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        if self.perm is not None:
            action = [{"perm": p.tolist(), "scale": s.tolist()} for p, s in zip(self.perm, self.scale)]
        else:
            action = [{"matrix": m.tolist()} for m in self.matrices]
        return {
            "name": self.name,
            "n_elements": self.order,
            "names": list(self.names),
            "compose": self.compose_table.ravel().tolist(),
            "action": action,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FiniteGroupAction":
        try:
            n = int(data["n_elements"])
            table = np.asarray(data["compose"], dtype=np.int64).reshape(n, n)
            action = data["action"]
        except (KeyError, ValueError, TypeError) as exc:
            raise GroupError(f"malformed group definition: {exc}") from None
        if len(action) != n:
            raise GroupError("one action entry per element is required")
        names = data.get("names")
        if all("perm" in a for a in action):
            perm = np.asarray([a["perm"] for a in action], dtype=np.int64)
            scale = np.asarray([a.get("scale", [1.0] * perm.shape[1]) for a in action], dtype=float)
            grp = cls._from_table(data.get("name", "group"), table, names, perm.shape[1],
                                  perm=perm, scale=scale)
        elif all("matrix" in a for a in action):
            mats = np.asarray([a["matrix"] for a in action], dtype=float)
            grp = cls._from_table(data.get("name", "group"), table, names, mats.shape[1],
                                  matrices=mats)
        else:
            raise GroupError("action entries must all be perm/scale or all be matrix")
        grp.check_axioms()
        return grp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FiniteGroupAction":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _row_keys(perm: np.ndarray, scale: np.ndarray) -> np.ndarray:
    # one opaque, totally ordered key per (perm, scale) row
    rows = np.ascontiguousarray(
        np.concatenate([perm.astype(np.int64), scale.astype(float).view(np.int64)], axis=1)
    )
    return rows.view(np.dtype((np.void, rows.dtype.itemsize * rows.shape[1]))).ravel()


def _as_signed_perm(m: np.ndarray):
    # row j has one nonzero at column perm[j]
    nz = m != 0
    if not np.all(nz.sum(axis=1) == 1):
        return None
    p = np.argmax(nz, axis=1)
    if len(set(p.tolist())) != m.shape[0]:
        return None
    return p, m[np.arange(m.shape[0]), p]


# -- standard groups ------------------------------------------------------------


def trivial(d: int) -> FiniteGroupAction:
    return FiniteGroupAction.from_permutations("trivial", [list(range(d))], names=["e"])


def cyclic_shift(n: int, d: int | None = None) -> FiniteGroupAction:
    """C_n acting on R^n (or R^d with d == n) by cyclic shifts of coordinates."""
    d = n if d is None else d
    if d != n:
        raise GroupError("cyclic shift action needs input_dim == n")
    perms = [np.roll(np.arange(n), -k) for k in range(n)]
    return FiniteGroupAction.from_permutations(
        f"C{n}", perms, names=["e"] + [f"s{k}" for k in range(1, n)]
    )


def grid_rotations(p: int) -> FiniteGroupAction:
    """C4 acting on a p x p grid flattened row-major; ``r90`` turns clockwise."""
    if p < 1:
        raise GroupError("grid side must be positive")
    idx = np.arange(p * p).reshape(p, p)
    perms = [np.rot90(idx, -k).ravel() for k in range(4)]
    return FiniteGroupAction.from_permutations(
        f"C4_grid{p}", perms, names=["r0", "r90", "r180", "r270"]
    )


def sign_flip(d: int = 1) -> FiniteGroupAction:
    """C2 acting by x -> -x."""
    ident = list(range(d))
    return FiniteGroupAction.from_permutations(
        f"C2_sign{d}", [ident, ident], [[1.0] * d, [-1.0] * d], names=["e", "neg"]
    )


def swap() -> FiniteGroupAction:
    """S2 exchanging the two coordinates of R^2."""
    return symmetric_group(2)


def _cycle_name(sigma: Sequence[int]) -> str:
    k = len(sigma)
    seen, cycles = set(), []
    for i in range(k):
        if i in seen or sigma[i] == i:
            seen.add(i)
            continue
        cyc, j = [], i
        while j not in seen:
            seen.add(j)
            cyc.append(j + 1)
            j = sigma[j]
        cycles.append("(" + "".join(str(c) for c in cyc) + ")")
    return "".join(cycles) or "e"


def _slot_perm(sigma: Sequence[int], dims: int) -> np.ndarray:
    # point in slot i moves to slot sigma(i): out[sigma(i)] = x[i]
    inv = np.argsort(sigma)
    return (inv[:, None] * dims + np.arange(dims)[None, :]).ravel()


def symmetric_group(k: int, dims: int = 1) -> FiniteGroupAction:
    """S_k permuting k slots of ``dims`` coordinates each.

    Element names use 1-based cycle notation of the slot permutation; the
    permutation sends the point in slot i to slot sigma(i).
    """
    if k < 1:
        raise GroupError("k must be positive")
    sigmas = list(itertools.permutations(range(k)))
    perms = [_slot_perm(s, dims) for s in sigmas]
    return FiniteGroupAction.from_permutations(
        f"S{k}" + (f"x{dims}" if dims > 1 else ""), perms, names=[_cycle_name(s) for s in sigmas]
    )


def block_permutation_group(blocks: Iterable[int], dims: int = 1) -> FiniteGroupAction:
    """Direct product S_{j1} x S_{j2} x ..., each factor permuting its own contiguous slots."""
    blocks = [int(b) for b in blocks]
    if not blocks or min(blocks) < 1:
        raise GroupError("blocks must be positive sizes")
    k = sum(blocks)
    offsets = np.cumsum([0] + blocks[:-1])
    sigmas = []
    for parts in itertools.product(*(itertools.permutations(range(b)) for b in blocks)):
        sigma = np.empty(k, dtype=np.int64)
        for off, part in zip(offsets, parts):
            sigma[off:off + len(part)] = off + np.asarray(part)
        sigmas.append(sigma)
    perms = [_slot_perm(s, dims) for s in sigmas]
    label = "x".join(f"S{b}" for b in blocks)
    return FiniteGroupAction.from_permutations(
        label + (f"_d{dims}" if dims > 1 else ""), perms, names=[_cycle_name(s) for s in sigmas]
    )


BUILDERS = {
    "trivial": trivial,
    "cyclic_shift": cyclic_shift,
    "grid_rotations": grid_rotations,
    "sign_flip": sign_flip,
    "swap": swap,
    "symmetric": symmetric_group,
    "block_permutation": block_permutation_group,
}


def build_group(kind: str, **params) -> FiniteGroupAction:
    """Construct a named group, e.g. ``build_group("symmetric", k=3)``."""
    try:
        builder = BUILDERS[kind]
    except KeyError:
        raise GroupError(f"unknown group {kind!r}; choose from {sorted(BUILDERS)}") from None
    return builder(**params)
