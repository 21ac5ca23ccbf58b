"""Single linear layer backbone with a diagonal-gated LoRA adapter.

Logits are ``z = (W + dW) x`` with ``dW = B diag(lambda * mask) A``. The loss
is mean cross-entropy plus ``gamma * sum_j (||b_j||^2 - 1)^2`` over active
dims. Gradients are derived by hand; :func:`finite_difference_check` verifies
them against central differences.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .adapter import DecoupledAdapter, delta_weight, gated_b
from .linalg import Matrix, ShapeError

Batch = tuple[np.ndarray, np.ndarray]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ToyModel:
    w_base: Matrix

    def __post_init__(self):
        w = np.array(self.w_base, dtype=np.float64, copy=True)
        w.setflags(write=False)
        object.__setattr__(self, "w_base", w)

    @property
    def num_classes(self) -> int:
        return self.w_base.shape[0]

    @property
    def n(self) -> int:
        return self.w_base.shape[1]

    def checksum(self) -> str:
        return hashlib.sha256(self.w_base.tobytes()).hexdigest()


@dataclass
class GradientSet:
    grad_b: Optional[Matrix] = None
    grad_lambda: Optional[np.ndarray] = None
    grad_a: Optional[Matrix] = None


def _check_batch(model: ToyModel, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    x, y = batch
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != model.n:
        raise ShapeError(f"batch features {x.shape} do not match input dim {model.n}")
    if len(y) != len(x):
        raise ShapeError(f"{len(x)} samples but {len(y)} labels")
    if len(y) == 0:
        raise DataError("empty batch")
    if np.any(y < 0) or np.any(y >= model.num_classes):
        raise DataError(f"labels must lie in [0, {model.num_classes})")
    return x, y.astype(np.int64)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(w: Matrix, batch: Batch) -> float:
    x, y = batch
    logp = log_softmax(x @ w.T)
    return float(-logp[np.arange(len(y)), y].mean())


def norm_penalty(ad: DecoupledAdapter) -> float:
    sq = np.sum(ad.b[:, ad.active] ** 2, axis=0)
    return float(np.sum((sq - 1.0) ** 2))


def forward_loss(model: ToyModel, ad: DecoupledAdapter, batch: Batch, gamma: float) -> float:
    x, y = _check_batch(model, batch)
    loss = cross_entropy(model.w_base + delta_weight(ad), (x, y))
    if gamma:
        loss += gamma * norm_penalty(ad)
    return loss


def ce_weight_gradient(w: Matrix, x: np.ndarray, y: np.ndarray) -> Matrix:
    """d(mean CE)/dW for logits x @ W.T."""
    z = x @ w.T
    p = np.exp(log_softmax(z))
    p[np.arange(len(y)), y] -= 1.0
    return p.T @ x / len(y)


def backward(
    model: ToyModel,
    ad: DecoupledAdapter,
    batch: Batch,
    gamma: float,
    wrt: Literal["client", "server", "full"] = "client",
) -> GradientSet:
    """Analytic gradients of :func:`forward_loss`.

    ``client`` fills grad_b and grad_lambda (A frozen); ``server`` fills only
    grad_a (B frozen); ``full`` fills all three.
    """
    x, y = _check_batch(model, batch)
    g = ce_weight_gradient(model.w_base + delta_weight(ad), x, y)
    gate = ad.lam * ad.mask
    out = GradientSet()
    if wrt in ("client", "full"):
        ga_t = g @ ad.a_slice.T                      # m x r
        grad_b = ga_t * gate
        if gamma:
            sq = np.sum(ad.b ** 2, axis=0)
            grad_b += 4.0 * gamma * (sq - 1.0) * ad.b * ad.mask
        out.grad_b = grad_b
        out.grad_lambda = np.einsum("ij,ij->j", ad.b, ga_t) * ad.mask
    if wrt in ("server", "full"):
        out.grad_a = gated_b(ad).T @ g
    if wrt not in ("client", "server", "full"):
        raise ValueError(f"unknown gradient target {wrt!r}")
    return out


def predict_accuracy(model: ToyModel, delta: Matrix, test: Batch) -> float:
    x, y = test
    if len(y) == 0:
        raise DataError("cannot score an empty test set")
    if delta.shape != model.w_base.shape:
        raise ShapeError(f"delta {delta.shape} does not match backbone {model.w_base.shape}")
    pred = np.argmax(np.asarray(x) @ (model.w_base + delta).T, axis=1)
    return float(np.mean(pred == np.asarray(y)))


def finite_difference_check(
    model: ToyModel,
    ad: DecoupledAdapter,
    batch: Batch,
    gamma: float,
    h: float = 1e-6,
) -> dict[str, float]:
    """Largest relative error, per parameter group, of analytic vs central-difference gradients.

    Relative error is ``|analytic - fd| / max(1, |fd|)``. Only active dims are
    perturbed for B and lambda; A is perturbed everywhere.
    """
    grads = backward(model, ad, batch, gamma, wrt="full")
    errors = {}

    def loss_with(**kw) -> float:
        probe = DecoupledAdapter(
            a_slice=kw.get("a_slice", ad.a_slice), b=kw.get("b", ad.b),
            lam=kw.get("lam", ad.lam), mask=ad.mask,
        )
        return forward_loss(model, probe, batch, gamma)

    def sweep(name: str, value: np.ndarray, analytic: np.ndarray, index_ok) -> float:
        worst = 0.0
        for idx in np.ndindex(value.shape):
            if not index_ok(idx):
                continue
            plus, minus = value.copy(), value.copy()
            plus[idx] += h
            minus[idx] -= h
            fd = (loss_with(**{name: plus}) - loss_with(**{name: minus})) / (2 * h)
            worst = max(worst, abs(analytic[idx] - fd) / max(1.0, abs(fd)))
        return worst

    errors["b"] = sweep("b", ad.b, grads.grad_b, lambda idx: ad.mask[idx[1]] == 1)
    errors["lambda"] = sweep("lam", ad.lam, grads.grad_lambda, lambda idx: ad.mask[idx[0]] == 1)
    errors["a"] = sweep("a_slice", ad.a_slice, grads.grad_a, lambda idx: True)
    return errors


def sgd_step(ad: DecoupledAdapter, grads: GradientSet, lr: float) -> None:
    """In-place SGD update of whichever parameters have gradients."""
    if grads.grad_b is not None:
        ad.b -= lr * grads.grad_b
    if grads.grad_lambda is not None:
        ad.lam -= lr * grads.grad_lambda
    if grads.grad_a is not None:
        ad.a_slice = ad.a_slice - lr * grads.grad_a
