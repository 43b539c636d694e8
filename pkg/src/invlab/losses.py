"""Per-example losses with gradients with respect to the prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, softmax


class UnsupportedLossError(ValueError):
    """Raised when a gradient is requested for a non-differentiable loss."""


def predict_class(output) -> int:
    """Class index for one output vector.

    Vectors use argmax with lowest-index tie-break; a scalar (or length-1)
    output is a probability thresholded at 0.5, boundary inclusive.
    """
    out = np.atleast_1d(np.asarray(output, dtype=float))
    if out.size == 0:
        raise ValueError("empty output")
    if out.size == 1:
        return int(out[0] >= 0.5)
    return int(np.argmax(out))


def predict_classes(outputs) -> np.ndarray:
    """Vectorized :func:`predict_class` over rows of shape ``(N,)`` or ``(N, k)``."""
    out = np.asarray(outputs, dtype=float)
    if out.ndim == 1 or out.shape[-1] == 1:
        return (out.reshape(out.shape[0], -1)[:, 0] >= 0.5).astype(np.int64)
    return np.argmax(out, axis=-1)


def _scalar(pred: np.ndarray) -> np.ndarray:
    return pred[..., 0] if pred.ndim > 1 and pred.shape[-1] == 1 else pred


@dataclass(frozen=True)
class LossFn:
    """A loss evaluated row-wise: ``pred`` is ``(M,)`` or ``(M, k)``, ``y`` is ``(M,)``."""

    name: str
    convex_in_first_arg: bool
    differentiable: bool

    def __call__(self, pred, y) -> np.ndarray:
        pred = np.asarray(pred, dtype=float)
        y = np.asarray(y)
        if self.name == "squared":
            y = y.astype(float)
            if pred.ndim > y.ndim:
                y = y[..., None]
            diff = pred - y
            return np.sum(diff * diff, axis=-1) if pred.ndim > 1 else diff * diff
        if self.name == "logistic":
            z = _scalar(pred)
            return np.logaddexp(0.0, z) - y * z
        if self.name == "cross_entropy":
            lp = log_softmax(pred, axis=-1)
            return -np.take_along_axis(lp, y.astype(np.int64)[..., None], axis=-1)[..., 0]
        if self.name == "zero_one":
            return (predict_classes(pred) != y).astype(float)
        if self.name == "absolute":
            y = y.astype(float)
            if pred.ndim > y.ndim:
                y = y[..., None]
            diff = np.abs(pred - y)
            return np.sum(diff, axis=-1) if pred.ndim > 1 else diff
        raise ValueError(f"unknown loss {self.name!r}")

    def grad(self, pred, y) -> np.ndarray:
        """Derivative of each example's loss with respect to its prediction."""
        if not self.differentiable:
            raise UnsupportedLossError(f"{self.name} loss has no gradient")
        pred = np.asarray(pred, dtype=float)
        y = np.asarray(y)
        if self.name == "squared":
            y = y.astype(float)
            if pred.ndim > y.ndim:
                y = y[..., None]
            return 2.0 * (pred - y)
        if self.name == "logistic":
            g = expit(_scalar(pred)) - y
            return g.reshape(pred.shape)
        if self.name == "cross_entropy":
            p = softmax(pred, axis=-1)
            p[np.arange(p.shape[0]), y.astype(np.int64)] -= 1.0
            return p
        raise UnsupportedLossError(f"{self.name} loss has no gradient")


SQUARED = LossFn("squared", True, True)
LOGISTIC = LossFn("logistic", True, True)
CROSS_ENTROPY = LossFn("cross_entropy", True, True)
ZERO_ONE = LossFn("zero_one", False, False)
ABSOLUTE = LossFn("absolute", True, False)

LOSSES = {f.name: f for f in (SQUARED, LOGISTIC, CROSS_ENTROPY, ZERO_ONE, ABSOLUTE)}


def get_loss(loss) -> LossFn:
    if isinstance(loss, LossFn):
        return loss
    try:
        return LOSSES[loss]
    except KeyError:
        raise ValueError(f"unknown loss {loss!r}; choose from {sorted(LOSSES)}") from None
