"""Small differentiable predictors: linear models and MLPs with an optional
group-averaging layer, plus reverse-mode gradients and checkpoint files."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .groups import FiniteGroupAction
from .losses import UnsupportedLossError, get_loss, predict_class, predict_classes
from .symmetrization import SymmetrizationMode

__all__ = [
    "Dense", "Activation", "AverageOverGroup", "ModelSpec", "ParamVector", "ModelError",
    "init_params", "forward", "gradient", "value_and_gradient", "predictor",
    "symmetrize_linear_weights", "invariant_projection_residual", "predict_class",
    "predict_classes", "save_checkpoint", "load_checkpoint",
]

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_MAGIC = b"INVLABCK"


class ModelError(ValueError):
    """Incompatible spec, parameters, or inputs."""


@dataclass(frozen=True)
class Dense:
    width: int
    bias: bool = True


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True, eq=False)
class AverageOverGroup:
    """Replace ``h`` (the layers before this one) by its group average
    ``E_g[h(g x)]``, or by a max/min pool over the orbit."""

    group: FiniteGroupAction
    mode: SymmetrizationMode = field(default_factory=SymmetrizationMode.exact)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    input_dim: int
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim < 1:
            raise ModelError("input_dim must be positive")
        layout, offset, width, names = {}, 0, self.input_dim, []
        averaging = [i for i, l in enumerate(self.layers) if isinstance(l, AverageOverGroup)]
        if len(averaging) > 1:
            raise ModelError("at most one averaging layer is allowed")
        for i, layer in enumerate(self.layers):
            names.append(None)
            if isinstance(layer, Dense):
                if layer.width < 1:
                    raise ModelError("dense width must be positive")
                names[-1] = name = f"dense{sum(n is not None for n in names[:-1])}"
                layout[f"{name}.W"] = (offset, (width, layer.width))
                offset += width * layer.width
                if layer.bias:
                    layout[f"{name}.b"] = (offset, (layer.width,))
                    offset += layer.width
                width = layer.width
            elif isinstance(layer, AverageOverGroup):
                if layer.group.input_dim != self.input_dim:
                    raise ModelError("averaging group must act on the model input")
                layer.mode.validate(layer.group)
            elif not isinstance(layer, Activation):
                raise ModelError(f"unknown layer {layer!r}")
        if not any(isinstance(l, Dense) for l in self.layers):
            raise ModelError("a model needs at least one dense layer")
        object.__setattr__(self, "layout", layout)
        object.__setattr__(self, "block_names", tuple(names))
        object.__setattr__(self, "n_params", offset)
        object.__setattr__(self, "output_dim", width)
        object.__setattr__(self, "averaging_index", averaging[0] if averaging else None)

    # -- constructors -------------------------------------------------------

    @classmethod
    def linear(cls, input_dim: int, output_dim: int = 1, bias: bool = False) -> "ModelSpec":
        return cls(input_dim, (Dense(output_dim, bias),))

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], output_dim: int,
            activation: str = "relu", average: AverageOverGroup | None = None,
            averaging_index: int | None = None) -> "ModelSpec":
        """Dense/activation stack; ``average`` is inserted at ``averaging_index``
        (default: just before the final dense layer)."""
        layers: list = []
        for h in hidden:
            layers += [Dense(h), Activation(activation)]
        layers.append(Dense(output_dim))
        if average is not None:
            idx = len(layers) - 1 if averaging_index is None else averaging_index
            if not 0 <= idx <= len(layers):
                raise ModelError("averaging index out of range")
            layers.insert(idx, average)
        return cls(input_dim, tuple(layers))

    # -- views --------------------------------------------------------------

    @property
    def is_linear(self) -> bool:
        core = [l for l in self.layers if not (isinstance(l, Activation) and l.kind == "identity")]
        return len(core) == 1 and isinstance(core[0], Dense)

    @property
    def averaging(self) -> AverageOverGroup | None:
        return None if self.averaging_index is None else self.layers[self.averaging_index]

    def with_mode(self, mode: SymmetrizationMode) -> "ModelSpec":
        """Same parameters, different symmetrization in the averaging layer."""
        if self.averaging is None:
            raise ModelError("spec has no averaging layer")
        layers = list(self.layers)
        layers[self.averaging_index] = AverageOverGroup(self.averaging.group, mode)
        return ModelSpec(self.input_dim, tuple(layers))

    def without_averaging(self) -> "ModelSpec":
        """Same parameters with the averaging layer removed (single-sample model)."""
        return ModelSpec(self.input_dim,
                         tuple(l for l in self.layers if not isinstance(l, AverageOverGroup)))

    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            if isinstance(l, Dense):
                out.append({"type": "dense", "width": l.width, "bias": l.bias})
            elif isinstance(l, Activation):
                out.append({"type": "activation", "kind": l.kind})
            else:
                out.append({"type": "average", "mode": l.mode.to_dict(), "group": l.group.to_dict()})
        return {"input_dim": self.input_dim, "layers": out}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for l in d["layers"]:
            if l["type"] == "dense":
                layers.append(Dense(int(l["width"]), bool(l.get("bias", True))))
            elif l["type"] == "activation":
                layers.append(Activation(l["kind"]))
            elif l["type"] == "average":
                layers.append(AverageOverGroup(FiniteGroupAction.from_dict(l["group"]),
                                               SymmetrizationMode.from_dict(l["mode"])))
            else:
                raise ModelError(f"unknown layer type {l['type']!r}")
        return cls(int(d["input_dim"]), tuple(layers))


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.spec.n_params,):
            raise ModelError(f"expected {self.spec.n_params} parameters, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ModelError("parameters must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def layout(self) -> dict:
        return self.spec.layout

    def __getitem__(self, name: str) -> np.ndarray:
        off, shape = self.spec.layout[name]
        return self.values[off:off + int(np.prod(shape))].reshape(shape)

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.spec)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    v = np.zeros(spec.n_params)
    for name, (off, shape) in spec.layout.items():
        if name.endswith(".W"):
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            v[off:off + shape[0] * shape[1]] = rng.uniform(-a, a, size=shape[0] * shape[1])
    return ParamVector(v, spec)


# -- forward / backward ---------------------------------------------------------------


def _affine_prefix(layers) -> bool:
    return all(isinstance(l, Dense) or (isinstance(l, Activation) and l.kind == "identity")
               for l in layers)


def _run_layers(layers, names, params, h, tape):
    """Apply ``layers`` (dense blocks named by ``names``), recording what the
    backward pass needs on ``tape``."""
    for i, layer in zip(names, layers):
        if isinstance(layer, Dense):
            tape.append(("dense", i, h))
            h = h @ params[f"{i}.W"]
            if layer.bias:
                h = h + params[f"{i}.b"]
        elif layer.kind == "relu":
            tape.append(("relu", i, h > 0))
            h = np.maximum(h, 0.0)
        elif layer.kind == "tanh":
            h = np.tanh(h)
            tape.append(("tanh", i, h))
    return h


def _as_batch(spec: ModelSpec, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    if single:
        X = X[None]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ModelError(f"expected inputs with last dimension {spec.input_dim}, got shape {X.shape}")
    return X, single


def _forward(spec: ModelSpec, params: ParamVector, X: np.ndarray, rng):
    if params.spec.n_params != spec.n_params:
        raise ModelError("parameter vector does not match the spec")
    prefix_tape: list = []
    suffix_tape: list = []
    a = spec.averaging_index
    if a is None:
        return _run_layers(spec.layers, spec.block_names, params, X, prefix_tape), prefix_tape, None, suffix_tape
    avg = spec.layers[a]
    n = X.shape[0]
    if avg.mode.kind == "exact" and _affine_prefix(spec.layers[:a]):
        # h(E_g[g x]) = E_g[h(g x)] for affine h
        h = _run_layers(spec.layers[:a], spec.block_names, params, avg.group.orbit_mean(X), prefix_tape)
        pool = None
    else:
        elements = avg.mode.draw(avg.group, n, rng)
        k = elements.shape[0]
        Xg = avg.group.act(elements, X[None]).reshape(k * n, -1)
        H = _run_layers(spec.layers[:a], spec.block_names, params, Xg, prefix_tape).reshape(k, n, -1)
        if avg.mode.kind == "exact":
            # sorted summation makes the average bitwise constant on orbits
            h = np.sort(H, axis=0).mean(axis=0)
            pool = ("mean", k, None)
        elif avg.mode.kind == "monte_carlo":
            h = H.mean(axis=0)
            pool = ("mean", k, None)
        else:
            pick = H.argmax(axis=0) if avg.mode.kind == "max_pool" else H.argmin(axis=0)
            h = np.take_along_axis(H, pick[None], axis=0)[0]
            pool = ("select", k, pick)
    h = _run_layers(spec.layers[a + 1:], spec.block_names[a + 1:], params, h, suffix_tape)
    return h, prefix_tape, pool, suffix_tape


def _unwind(tape, params, spec, dh, grad):
    for kind, i, saved in reversed(tape):
        if kind == "dense":
            off, shape = spec.layout[f"{i}.W"]
            grad[off:off + shape[0] * shape[1]] += (saved.T @ dh).ravel()
            if f"{i}.b" in spec.layout:
                boff, _ = spec.layout[f"{i}.b"]
                grad[boff:boff + shape[1]] += dh.sum(axis=0)
            dh = dh @ params[f"{i}.W"].T
        elif kind == "relu":
            dh = dh * saved
        else:
            dh = dh * (1.0 - saved * saved)
    return dh


def _backward(spec, params, tapes, d_out) -> np.ndarray:
    prefix_tape, pool, suffix_tape = tapes
    grad = np.zeros(spec.n_params)
    dh = _unwind(suffix_tape, params, spec, d_out, grad)
    if pool is not None:
        how, k, pick = pool
        if how == "mean":
            dh = np.broadcast_to(dh / k, (k,) + dh.shape)
        else:
            full = np.zeros((k,) + dh.shape)
            np.put_along_axis(full, pick[None], dh[None], axis=0)
            dh = full
        dh = dh.reshape(-1, dh.shape[-1])
    _unwind(prefix_tape, params, spec, dh, grad)
    return grad


def forward(spec: ModelSpec, params: ParamVector, x, rng: np.random.Generator | None = None) -> np.ndarray:
    """Model output for one input ``(d,)`` or a batch ``(N, d)``.

    ``rng`` is only consulted by a fresh Monte Carlo averaging layer.
    """
    X, single = _as_batch(spec, x)
    out = _forward(spec, params, X, rng)[0]
    return out[0] if single else out


def predictor(spec: ModelSpec, params: ParamVector, rng: np.random.Generator | None = None):
    """``forward`` as a batch function ``(M, d) -> (M, k)``."""
    return lambda X: forward(spec, params, np.asarray(X, dtype=float).reshape(-1, spec.input_dim), rng)


def value_and_gradient(spec: ModelSpec, params: ParamVector, loss, batch,
                       rng: np.random.Generator | None = None) -> tuple[float, ParamVector]:
    """Mean batch loss and its exact gradient with respect to the parameters."""
    loss = get_loss(loss)
    if not loss.differentiable:
        raise UnsupportedLossError(f"{loss.name} loss has no gradient")
    X, y = (batch.X, batch.y) if hasattr(batch, "X") else batch
    X, _ = _as_batch(spec, X)
    y = np.asarray(y)
    out, *tapes = _forward(spec, params, X, rng)
    per = loss(out, y)
    d_out = loss.grad(out, y).reshape(out.shape) / X.shape[0]
    return float(per.mean()), ParamVector(_backward(spec, params, tapes, d_out), spec)


def gradient(spec: ModelSpec, params: ParamVector, loss, batch,
             rng: np.random.Generator | None = None) -> ParamVector:
    return value_and_gradient(spec, params, loss, batch, rng)[1]


# -- linear symmetrization -------------------------------------------------------------


def _linear_weights(w):
    if isinstance(w, ParamVector):
        if not w.spec.is_linear:
            raise ModelError("weight symmetrization needs a one-layer linear spec")
        name = next(n for n in w.layout if n.endswith(".W"))
        return w, name
    return None, None


def _dual_average(W: np.ndarray, group: FiniteGroupAction) -> np.ndarray:
    """Mean over g of the dual action on the last axis of ``W``."""
    return np.mean([group.dual_action(g, W) for g in range(group.order)], axis=0)


def symmetrize_linear_weights(w, group: FiniteGroupAction):
    """Project linear weights onto the fixed space of the dual action.

    Accepts a ``ParamVector`` of a one-layer linear spec (bias untouched)
    or a raw array whose last axis is the input dimension.
    """
    pv, name = _linear_weights(w)
    if pv is None:
        arr = np.asarray(w, dtype=float)
        if arr.shape[-1] != group.input_dim:
            raise ModelError("weight dimension does not match the group")
        return _dual_average(arr, group)
    W = pv[name]  # (d, out)
    if W.shape[0] != group.input_dim:
        raise ModelError("weight dimension does not match the group")
    values = pv.values.copy()
    off, shape = pv.layout[name]
    values[off:off + W.size] = _dual_average(W.T, group).T.ravel()
    return pv.with_values(values)


def invariant_projection_residual(w, group: FiniteGroupAction) -> float:
    """Euclidean distance from ``w`` to its symmetrization."""
    sym = symmetrize_linear_weights(w, group)
    if isinstance(w, ParamVector):
        return float(np.linalg.norm(w.values - sym.values))
    return float(np.linalg.norm(np.asarray(w, dtype=float) - sym))


# -- checkpoints -----------------------------------------------------------------------


def save_checkpoint(path, spec: ModelSpec, params: ParamVector, seed: int | None = None,
                    training_mode: dict | str | None = None, extra: dict | None = None) -> Path:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE parameters``."""
    header = {"format": "invlab-checkpoint", "version": 1, "spec": spec.to_dict(),
              "seed": seed, "training_mode": training_mode, "n_params": spec.n_params}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(params.values, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> tuple[ModelSpec, ParamVector, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(spec, params, header)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ModelError(f"{path}: {exc.strerror}") from None
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ModelError(f"{path}: not a model checkpoint")
    start = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < start:
        raise ModelError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[len(CHECKPOINT_MAGIC):start])
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise ModelError(f"{path}: corrupt checkpoint header") from exc
    spec = ModelSpec.from_dict(header["spec"])
    block = raw[start + hlen:]
    if len(block) != 8 * spec.n_params:
        raise ModelError(f"{path}: expected {spec.n_params} parameters, found {len(block) / 8:g}")
    return spec, ParamVector(np.frombuffer(block, dtype="<f8"), spec), header
