"""Client side of a round: local B/lambda training on a frozen A-slice, then
diagonal-based rank pruning of the mask for the next round."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adapter import DecoupledAdapter, LoraHyper, init_adapter, merged_upload, truncate_a
from .data import Dataset
from .linalg import Matrix, ShapeError
from .model import ToyModel, backward, sgd_step


@dataclass
class ClientState:
    id: int
    shard: Dataset
    r_initial: int
    hyper: LoraHyper
    local_epochs: int = 1
    lr: float = 0.1
    batch_size: int = 32
    keep_one: bool = True
    prune: bool = True
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 1 <= self.r_initial <= self.hyper.r_max:
            raise ValueError(f"client {self.id}: rank cap {self.r_initial} outside [1, {self.hyper.r_max}]")
        if self.mask is None:
            self.mask = np.ones(self.r_initial, dtype=np.int64)

    @property
    def r_eff(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    b_merged: Matrix
    mask: np.ndarray
    data_count: int

    def __post_init__(self):
        if self.b_merged.shape[1] != int(np.sum(self.mask)):
            raise ShapeError(
                f"client {self.client_id}: {self.b_merged.shape[1]} uploaded columns "
                f"but {int(np.sum(self.mask))} active mask entries"
            )

    @property
    def r_eff(self) -> int:
        return self.b_merged.shape[1]


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_train(
    state: ClientState, a_global: Matrix, model: ToyModel, rng: np.random.Generator
) -> DecoupledAdapter:
    """Fresh adapter on the first ``r_initial`` rows of A, trained with minibatch SGD."""
    if a_global.shape[0] < state.r_initial:
        raise ShapeError(f"global A has {a_global.shape[0]} rows, client needs {state.r_initial}")
    ad = init_adapter(truncate_a(a_global, state.r_initial), model.num_classes,
                      state.mask, state.hyper.lambda_init)
    if ad.r_eff == 0:
        return ad
    x, y = state.shard.x, state.shard.y
    for _ in range(state.local_epochs):
        for idx in minibatches(len(y), state.batch_size, rng):
            grads = backward(model, ad, (x[idx], y[idx]), state.hyper.gamma, wrt="client")
            sgd_step(ad, grads, state.lr)
    return ad


def make_update(state: ClientState, ad: DecoupledAdapter) -> ClientUpdate:
    b_merged, mask = merged_upload(ad)
    return ClientUpdate(client_id=state.id, b_merged=b_merged, mask=mask, data_count=len(state.shard))


def prune_mask(
    mask: np.ndarray, lambda_sq: np.ndarray, beta: float, keep_one: bool = True
) -> np.ndarray:
    """Next-round mask: drop active dims whose squared gate falls below beta * std.

    ``lambda_sq`` holds the squared gates of the active dims, in index order.
    The standard deviation is the population one over active dims. With
    ``keep_one`` the dim with the largest squared gate always survives.
    """
    mask = np.asarray(mask, dtype=np.int64)
    active = np.flatnonzero(mask)
    lambda_sq = np.asarray(lambda_sq, dtype=np.float64)
    if len(active) == 0:
        return mask.copy()
    if lambda_sq.shape != (len(active),):
        raise ShapeError(f"{len(lambda_sq)} gate values for {len(active)} active dims")
    threshold = prune_threshold(lambda_sq, beta)
    keep = lambda_sq >= threshold
    if keep_one and not keep.any():
        keep[int(np.argmax(lambda_sq))] = True
    out = mask.copy()
    out[active[~keep]] = 0
    return out


def ddr_prune(state: ClientState, lambda_sq: np.ndarray) -> np.ndarray:
    """Pruned mask for ``state`` given the squared gates of its active dims."""
    return prune_mask(state.mask, lambda_sq, state.hyper.beta, state.keep_one)


def prune_threshold(lambda_sq: np.ndarray, beta: float) -> float:
    return beta * float(np.std(np.asarray(lambda_sq, dtype=np.float64)))


def local_round(
    state: ClientState, a_global: Matrix, model: ToyModel, rng: np.random.Generator
) -> Optional[ClientUpdate]:
    """Train, package the upload, and prune ``state.mask`` for the next round.

    Returns ``None`` for an empty shard; such a client sits the round out.
    """
    update, _ = run_client(state, a_global, model, rng)
    return update


def run_client(
    state: ClientState, a_global: Matrix, model: ToyModel, rng: np.random.Generator
) -> tuple[Optional[ClientUpdate], Optional[DecoupledAdapter]]:
    if len(state.shard) == 0:
        return None, None
    ad = local_train(state, a_global, model, rng)
    update = make_update(state, ad)
    if state.prune:
        state.mask = ddr_prune(state, ad.lam[ad.active] ** 2)
    return update, ad


def local_train_full(
    a: Matrix, b: Matrix, shard: Dataset, model: ToyModel, epochs: int, lr: float,
    batch_size: int, rng: np.random.Generator,
) -> tuple[Matrix, Matrix]:
    """Plain LoRA local training (A and B both trainable, no gate, no norm penalty).

    Shared local trainer of the baseline methods. Returns the trained (A, B).
    """
    ad = DecoupledAdapter(a_slice=a.copy(), b=b.copy(), lam=np.ones(a.shape[0]))
    x, y = shard.x, shard.y
    for _ in range(epochs):
        for idx in minibatches(len(y), batch_size, rng):
            grads = backward(model, ad, (x[idx], y[idx]), 0.0, wrt="full")
            grads.grad_lambda = None
            sgd_step(ad, grads, lr)
    return ad.a_slice, ad.b
