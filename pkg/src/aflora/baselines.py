"""Reference aggregation rules for plain (A, B) LoRA updates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linalg import Matrix, ShapeError, frobenius_norm, matmul, svd


class HeterogeneityError(ValueError):
    """Raised when an aggregation rule that needs a shared rank sees mixed ranks."""


@dataclass(frozen=True)
class HomAdapterUpdate:
    a: Matrix  # r x n
    b: Matrix  # m x r
    data_count: int

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def product(self) -> Matrix:
        return matmul(self.b, self.a)


def data_weights(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if len(counts) == 0 or counts.sum() <= 0:
        raise ValueError("need at least one client with data")
    return counts / counts.sum()


def classic_aggregate(updates: Sequence[HomAdapterUpdate]) -> tuple[Matrix, Matrix]:
    """FedAvg of A and B separately; returns (A, B)."""
    ranks = {u.rank for u in updates}
    if len(ranks) != 1:
        raise HeterogeneityError(f"classic aggregation needs one shared rank, got {sorted(ranks)}")
    p = data_weights([u.data_count for u in updates])
    a = sum(w * u.a for w, u in zip(p, updates))
    b = sum(w * u.b for w, u in zip(p, updates))
    return a, b


def ideal_aggregate(updates: Sequence[tuple[Matrix, int]],
                    weights: Optional[Sequence[float]] = None) -> Matrix:
    """Weighted mean of the full products; data-proportional unless ``weights`` is given."""
    if not updates:
        raise ValueError("no updates")
    shapes = {dw.shape for dw, _ in updates}
    if len(shapes) != 1:
        raise ShapeError(f"updates have mixed shapes {sorted(shapes)}")
    p = data_weights([c for _, c in updates]) if weights is None else np.asarray(weights)
    out = np.zeros(updates[0][0].shape)
    for w, (dw, _) in zip(p, updates):
        out += w * dw
    return out


def flora_stack(updates: Sequence[HomAdapterUpdate]) -> tuple[Matrix, Matrix]:
    """Stacked (B, A) with sqrt(p) on each factor, so B @ A carries weight p per client."""
    p = data_weights([u.data_count for u in updates])
    b = np.hstack([np.sqrt(w) * u.b for w, u in zip(p, updates)])
    a = np.vstack([np.sqrt(w) * u.a for w, u in zip(p, updates)])
    return b, a


def flora_aggregate(updates: Sequence[HomAdapterUpdate]) -> Matrix:
    b, a = flora_stack(updates)
    return matmul(b, a)


def flora_comm_params(updates: Sequence[HomAdapterUpdate]) -> int:
    return sum(u.rank * (u.b.shape[0] + u.a.shape[1]) for u in updates)


def truncated_factors(w: Matrix, rank: int) -> tuple[Matrix, Matrix]:
    """Best rank-``rank`` factors of ``w``: (A = V_r^T, B = U_r diag(sigma_r))."""
    if not 0 <= rank <= min(w.shape):
        raise ShapeError(f"rank {rank} exceeds min{w.shape}")
    res = svd(w)
    return res.v[:, :rank].T.copy(), res.u[:, :rank] * res.sigma[:rank]


def flexlora_aggregate(updates: Sequence[HomAdapterUpdate],
                       target_ranks: Sequence[int]) -> list[tuple[Matrix, Matrix]]:
    """Aggregate full products, then hand each client an SVD truncation at its rank."""
    w = ideal_aggregate([(u.product(), u.data_count) for u in updates])
    res = svd(w)
    out = []
    for r in target_ranks:
        if not 0 <= r <= min(w.shape):
            raise ShapeError(f"target rank {r} exceeds min{w.shape}")
        out.append((res.v[:, :r].T.copy(), res.u[:, :r] * res.sigma[:r]))
    return out


def pad_pair(u: HomAdapterUpdate, r_max: int) -> tuple[Matrix, Matrix]:
    m, n = u.b.shape[0], u.a.shape[1]
    a = np.zeros((r_max, n))
    b = np.zeros((m, r_max))
    a[:u.rank] = u.a
    b[:, :u.rank] = u.b
    return a, b


def hetlora_aggregate(updates: Sequence[HomAdapterUpdate]) -> tuple[Matrix, Matrix]:
    """Zero-pad every pair to the largest rank and average A and B separately."""
    r_max = max(u.rank for u in updates)
    p = data_weights([u.data_count for u in updates])
    padded = [pad_pair(u, r_max) for u in updates]
    a = sum(w * pa for w, (pa, _) in zip(p, padded))
    b = sum(w * pb for w, (_, pb) in zip(p, padded))
    return a, b


def interference_gap(updates: Sequence[HomAdapterUpdate]) -> float:
    """Frobenius distance between the product of averages and the average of products.

    Returns NaN when ranks differ, where the classic product is undefined.
    """
    if len({u.rank for u in updates}) != 1:
        return float("nan")
    a, b = classic_aggregate(updates)
    ideal = ideal_aggregate([(u.product(), u.data_count) for u in updates])
    return frobenius_norm(matmul(b, a) - ideal)
