"""Diagonal-gated LoRA adapter: delta W = B diag(lambda) A with a binary rank mask."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import Matrix, ShapeError, matmul


@dataclass(frozen=True)
class LoraHyper:
    m: int
    n: int
    r_max: int
    C: float = 1.0
    beta: float = 0.5
    gamma: float = 0.01
    alpha: float = 0.5
    lambda_init: float = 1.0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"dimensions must be positive, got m={self.m}, n={self.n}")
        if not 1 <= self.r_max <= min(self.m, self.n):
            raise ValueError(f"r_max={self.r_max} must lie in [1, min(m, n)={min(self.m, self.n)}]")
        if self.C <= 0 or self.beta <= 0 or self.lambda_init <= 0:
            raise ValueError("C, beta and lambda_init must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class DecoupledAdapter:
    """Per-client adapter state.

    ``a_slice`` is frozen on the client; ``b`` and ``lam`` are trainable.
    Columns of ``b`` at masked-out positions are kept in storage as zeros so
    that indices stay stable across rounds.
    """

    a_slice: Matrix
    b: Matrix
    lam: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        r = self.a_slice.shape[0]
        if self.mask is None:
            self.mask = np.ones(r, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.int64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.b.shape[1] != r or self.lam.shape != (r,) or self.mask.shape != (r,):
            raise ShapeError(
                f"inconsistent adapter: a_slice {self.a_slice.shape}, b {self.b.shape}, "
                f"lambda {self.lam.shape}, mask {self.mask.shape}"
            )
        if np.any((self.mask != 0) & (self.mask != 1)):
            raise ValueError("mask entries must be 0 or 1")

    @property
    def rank(self) -> int:
        return self.a_slice.shape[0]

    @property
    def r_eff(self) -> int:
        return int(self.mask.sum())

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def copy(self) -> "DecoupledAdapter":
        return replace(self, a_slice=self.a_slice.copy(), b=self.b.copy(),
                       lam=self.lam.copy(), mask=self.mask.copy())

    def row_norm_error(self, C: float) -> float:
        """Largest deviation of an A-row norm from ``C``."""
        return float(np.max(np.abs(np.linalg.norm(self.a_slice, axis=1) - C), initial=0.0))


def init_adapter(a_slice: Matrix, m: int, mask, lambda_init: float) -> DecoupledAdapter:
    """Fresh round-start adapter: B = 0 and lambda = lambda_init on active dims."""
    mask = np.asarray(mask, dtype=np.int64)
    r = a_slice.shape[0]
    return DecoupledAdapter(
        a_slice=a_slice,
        b=np.zeros((m, r)),
        lam=lambda_init * mask.astype(np.float64),
        mask=mask,
    )


def truncate_a(a_global: Matrix, r1: int) -> Matrix:
    if not 1 <= r1 <= a_global.shape[0]:
        raise ShapeError(f"cannot take {r1} rows of a {a_global.shape} global A")
    return a_global[:r1].copy()


def gated_b(ad: DecoupledAdapter) -> Matrix:
    """B diag(lambda * mask), i.e. B with the gate folded in and pruned dims zeroed."""
    return ad.b * (ad.lam * ad.mask)


def delta_weight(ad: DecoupledAdapter) -> Matrix:
    return matmul(gated_b(ad), ad.a_slice)


def merged_upload(ad: DecoupledAdapter) -> tuple[Matrix, np.ndarray]:
    idx = ad.active
    return ad.b[:, idx] * ad.lam[idx], ad.mask.copy()


def dimension_information(ad: DecoupledAdapter, j: int, C: float) -> float:
    """C^2 * lambda_j^2, the energy of rank-1 component j under exact norm constraints."""
    if not 0 <= j < ad.rank or ad.mask[j] == 0:
        raise ValueError(f"dimension {j} is not active")
    return float(C * C * ad.lam[j] ** 2)
