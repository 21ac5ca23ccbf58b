"""Small dense linear algebra on float64 numpy arrays.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64. The
functions here never modify their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

Matrix = np.ndarray

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NumericalError(ArithmeticError):
    """Raised when an iterative routine fails to converge or produces non-finite values."""


@dataclass(frozen=True)
class SvdResult:
    u: Matrix       # m x r, orthonormal columns
    sigma: np.ndarray  # length r, non-increasing, >= 0
    v: Matrix       # n x r, orthonormal columns

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.v.T


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def zero_pad_cols(a: Matrix, target_cols: int, placement: Sequence[int]) -> Matrix:
    """Scatter the columns of ``a`` into a wider zero matrix.

    Column ``j`` of the result receives the next unused column of ``a`` when
    ``placement[j] == 1`` and is zero otherwise; columns past the end of
    ``placement`` are zero.
    """
    mask = np.asarray(placement, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if mask.ndim != 1 or np.any((mask != 0) & (mask != 1)):
        raise ShapeError(f"placement must be a binary vector, got {placement!r}")
    if len(mask) > target_cols:
        raise ShapeError(f"placement of length {len(mask)} exceeds target width {target_cols}")
    if int(mask.sum()) != a.shape[1]:
        raise ShapeError(
            f"placement has {int(mask.sum())} active slots but matrix {a.shape} has {a.shape[1]} columns"
        )
    out = np.zeros((a.shape[0], target_cols), dtype=np.float64)
    out[:, np.flatnonzero(mask)] = a
    return out


def _complete_columns(q: Matrix, keep: np.ndarray) -> Matrix:
    """Replace the columns of ``q`` not flagged in ``keep`` by an orthonormal completion."""
    m, r = q.shape
    basis = [q[:, j] for j in range(r) if keep[j]]
    out = q.copy()
    candidates = iter(np.eye(m))
    for j in range(r):
        if keep[j]:
            continue
        while True:
            e = next(candidates).copy()
            # two passes of Gram-Schmidt for stability
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e /= nrm
                break
        out[:, j] = e
        basis.append(e)
    return out


def _jacobi_tall(a: Matrix) -> SvdResult:
    """One-sided (Hestenes) Jacobi SVD for ``a`` with rows >= cols."""
    w = a.copy()
    n = w.shape[1]
    v = np.eye(n)
    # columns at or below this norm are rounding noise: never rotated, reported as sigma = 0
    noise = max(a.shape) * np.finfo(np.float64).eps * np.sqrt(np.sum(a * a))
    noise2 = noise * noise
    for _ in range(JACOBI_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                wi, wj = w[:, i], w[:, j]
                alpha = wi @ wi
                beta = wj @ wj
                gamma = wi @ wj
                if min(alpha, beta) <= noise2 or abs(gamma) <= JACOBI_TOL * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta
                else:
                    t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                w[:, i], w[:, j] = c * wi - s * wj, s * wi + c * wj
                vi, vj = v[:, i].copy(), v[:, j].copy()
                v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps")

    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    keep = sigma > max(noise, 1e-300)
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / sigma[keep]
    if not keep.all():
        sigma = np.where(keep, sigma, 0.0)
        u = _complete_columns(u, keep)
    return SvdResult(u=u, sigma=sigma, v=v)


def svd(a: Matrix) -> SvdResult:
    """Thin SVD with r = min(rows, cols); trailing singular values may be zero."""
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("svd input contains NaN or Inf")
    a = np.asarray(a, dtype=np.float64)
    # rescale by a power of two (exact) so squared column norms neither underflow nor overflow
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    shift = int(np.frexp(peak)[1]) if peak > 0 else 0
    scaled = np.ldexp(a, -shift)
    if a.shape[0] >= a.shape[1]:
        res = _jacobi_tall(scaled)
        return SvdResult(u=res.u, sigma=np.ldexp(res.sigma, shift), v=res.v)
    res = _jacobi_tall(scaled.T)
    return SvdResult(u=res.v, sigma=np.ldexp(res.sigma, shift), v=res.u)


def normalized_rows(a: Matrix, norm: float) -> Matrix:
    nrm = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(nrm == 0):
        raise NumericalError("cannot normalize a zero row")
    return a / nrm * norm


def random_rows(rng: np.random.Generator, rows: int, cols: int, norm: float) -> Matrix:
    """Gaussian matrix whose rows are rescaled to the given l2 norm."""
    return normalized_rows(rng.standard_normal((rows, cols)), norm)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``.

    Streams are derived with ``SeedSequence`` so that e.g. the stream for
    (seed, round, client) does not depend on how many other streams exist.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=tuple(keys))))
