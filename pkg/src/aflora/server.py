"""Server side of a round: zero-padding harmonization, rank-aware aggregation of
the merged B uploads, public-split tuning of the shared A, and fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .adapter import DecoupledAdapter, LoraHyper
from .client import ClientUpdate, minibatches
from .data import Dataset
from .linalg import Matrix, ShapeError, matmul, random_rows, zero_pad_cols
from .model import ToyModel, backward


class AggregationError(ValueError):
    pass


@dataclass
class GlobalState:
    a_global: Matrix
    b_global: Matrix
    hyper: LoraHyper
    round: int = 0
    server_lr: float = 0.1
    server_epochs: int = 1
    batch_size: int = 32

    @classmethod
    def initial(cls, hyper: LoraHyper, rng: np.random.Generator, **kw) -> "GlobalState":
        return cls(
            a_global=random_rows(rng, hyper.r_max, hyper.n, hyper.C),
            b_global=np.zeros((hyper.m, hyper.r_max)),
            hyper=hyper,
            **kw,
        )


def harmonize(update: ClientUpdate, r_max: int) -> Matrix:
    if len(update.mask) > r_max:
        raise ShapeError(f"client {update.client_id} mask of length {len(update.mask)} exceeds r_max={r_max}")
    return zero_pad_cols(update.b_merged, r_max, update.mask)


def rank_aware_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Product of a log(1 + rank) share and a data share, renormalized to sum to one."""
    if not updates:
        raise AggregationError("no updates to weight")
    ranks = np.array([u.r_eff for u in updates], dtype=np.float64)
    counts = np.array([u.data_count for u in updates], dtype=np.float64)
    log_r = np.log1p(ranks)
    if log_r.sum() <= 0 or counts.sum() <= 0:
        raise AggregationError("every client has zero rank or zero data")
    raw = (log_r / log_r.sum()) * (counts / counts.sum())
    if raw.sum() <= 0:
        raise AggregationError("all aggregation weights are zero")
    return raw / raw.sum()


def aggregate_b(updates: Sequence[ClientUpdate], r_max: int,
                weights: Optional[np.ndarray] = None) -> Matrix:
    if weights is None:
        weights = rank_aware_weights(updates)
    out = np.zeros((updates[0].b_merged.shape[0], r_max))
    for p, u in zip(weights, updates):
        out += p * harmonize(u, r_max)
    return out


def server_finetune_a(state: GlobalState, public: Dataset, model: ToyModel,
                      rng: np.random.Generator) -> Matrix:
    """Tune A on the public split with B frozen; returns the tuned copy."""
    a = state.a_global.copy()
    if len(public) == 0 or state.server_epochs == 0 or not np.any(state.b_global):
        return a
    ad = DecoupledAdapter(a_slice=a, b=state.b_global, lam=np.ones(state.hyper.r_max))
    x, y = public.x, public.y
    for _ in range(state.server_epochs):
        for idx in minibatches(len(y), state.batch_size, rng):
            # gamma only touches B, so plain cross-entropy drives A
            grads = backward(model, ad, (x[idx], y[idx]), 0.0, wrt="server")
            ad.a_slice = ad.a_slice - state.server_lr * grads.grad_a
    return ad.a_slice


def fuse_a(a_old: Matrix, a_ft: Matrix, alpha: float) -> Matrix:
    if a_old.shape != a_ft.shape:
        raise ShapeError(f"cannot fuse {a_old.shape} with {a_ft.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * a_old + (1.0 - alpha) * a_ft


def broadcast_and_fold(state: GlobalState) -> Matrix:
    return matmul(state.b_global, state.a_global)


def server_round(state: GlobalState, updates: Sequence[ClientUpdate], public: Dataset,
                 model: ToyModel, rng: np.random.Generator) -> tuple[Matrix, np.ndarray]:
    """Aggregate, tune and fuse A, and return (delta W, weights).

    ``model`` is the backbone the clients trained against this round. Mutates
    ``state``: b_global, a_global (fused) and the round counter.
    """
    weights = rank_aware_weights(updates)
    state.b_global = aggregate_b(updates, state.hyper.r_max, weights)
    if state.hyper.alpha < 1.0:
        a_ft = server_finetune_a(state, public, model, rng)
        state.a_global = fuse_a(state.a_global, a_ft, state.hyper.alpha)
    state.round += 1
    return broadcast_and_fold(state), weights
