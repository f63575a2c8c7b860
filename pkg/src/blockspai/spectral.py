"""Power-iteration based spectral estimates for symmetric and general matrices.

All routines share one engine: symmetric power iteration with a residual
certificate.  For a symmetric operator M the Rayleigh quotient theta of the
current iterate satisfies  |theta - lambda| <= ||M v - theta v||  for some
eigenvalue lambda, so iterating until the residual falls below rtol*theta
certifies the returned value to that accuracy without knowing eigenvalue gaps.

The smallest eigenvalue of a positive semidefinite W is obtained by running
the same engine on (shift*I - W) with shift just above the largest eigenvalue,
which keeps the per-iteration cost at one sparse matvec and avoids linear
solves entirely.  Start vectors are seeded, so every estimate is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .blocksparse import BlockSparseMatrix
from .errors import DimensionMismatchError, ValidationError

DEFAULT_SEED = 20260815


@dataclass(frozen=True)
class PowerResult:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


@dataclass(frozen=True)
class SingularInterval:
    """Estimated enclosure [a, b] of the singular values of a symmetric PSD matrix."""

    a: float
    b: float
    kappa_defined: bool = True
    converged_largest: bool = True
    converged_smallest: bool = True
    iterations_largest: int = 0
    iterations_smallest: int = 0
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if not (0.0 <= self.a <= self.b):
            raise ValidationError(
                f"singular interval must satisfy 0 <= a <= b, got [{self.a}, {self.b}]"
            )

    @property
    def kappa(self) -> float:
        if not self.kappa_defined:
            return float("nan")
        if self.a == 0.0:
            return float("inf")
        return self.b / self.a

    def widened(self, margin: float) -> "SingularInterval":
        """Relative widening on both ends; enclosure survives estimation error."""
        if margin < 0:
            raise ValidationError("widening margin must be nonnegative")
        return replace(self, a=self.a * (1.0 - margin), b=self.b * (1.0 + margin))

    def shifted(self, mu: float) -> "SingularInterval":
        """Exact interval for W + mu*I given the interval for a symmetric PSD W."""
        if mu < 0:
            raise ValidationError("shift must be nonnegative")
        return replace(self, a=self.a + mu, b=self.b + mu)

    def as_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "kappa": self.kappa,
            "kappa_defined": self.kappa_defined,
            "converged_largest": self.converged_largest,
            "converged_smallest": self.converged_smallest,
            "iterations_largest": self.iterations_largest,
            "iterations_smallest": self.iterations_smallest,
            "seed": self.seed,
        }


def seeded_unit_vector(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    rtol: float = 1e-6,
    max_iter: int = 20000,
    seed: int = DEFAULT_SEED,
    start: np.ndarray | None = None,
) -> PowerResult:
    """Largest eigenvalue of a symmetric PSD operator given through its matvec.

    Stops once ||M v - theta v|| <= rtol * theta; the certificate bounds the
    distance from theta to the spectrum by the same quantity.  ``start`` warm
    starts the iteration (callers measuring a slowly changing operator reuse
    the previous eigenvector and converge in a handful of steps).
    """
    if dim <= 0:
        raise ValidationError("operator dimension must be positive")
    if start is not None and start.shape == (dim,) and np.linalg.norm(start) > 0:
        v = start / np.linalg.norm(start)
    else:
        v = seeded_unit_vector(dim, seed)
    theta = 0.0
    for k in range(1, max_iter + 1):
        w = matvec(v)
        theta = float(v @ w)
        resid = float(np.linalg.norm(w - theta * v))
        if resid <= rtol * abs(theta):
            return PowerResult(theta, v, True, k)
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            # v is in the null space; for PSD operators theta = 0 is exact.
            return PowerResult(0.0, v, True, k)
        v = w / norm_w
    return PowerResult(theta, v, False, max_iter)


def _as_csr(A) -> sp.csr_matrix:
    return A.csr if isinstance(A, BlockSparseMatrix) else sp.csr_matrix(A)


def _check_symmetry(csr: sp.csr_matrix) -> None:
    scale = np.abs(csr.data).max() if csr.nnz else 0.0
    if scale == 0.0:
        return
    asym = sp.csr_matrix(csr - csr.T)
    worst = np.abs(asym.data).max() if asym.nnz else 0.0
    if worst > 1e-8 * scale:
        raise ValidationError(
            f"matrix is not symmetric: max |W - W^T| = {worst:.3e} "
            f"exceeds 1e-8 * max|W| = {1e-8 * scale:.3e}"
        )


def _extreme_eigs_from_matvec(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float,
    max_iter: int,
    seed: int,
) -> SingularInterval:
    top = power_iteration(matvec, dim, rtol=tol, max_iter=max_iter, seed=seed)
    b = max(top.value, 0.0)
    if b == 0.0:
        return SingularInterval(
            0.0, 0.0, kappa_defined=False,
            converged_largest=top.converged, converged_smallest=True,
            iterations_largest=top.iterations, iterations_smallest=0, seed=seed,
        )
    # Shift slightly above b so the shifted operator stays PSD even when the
    # top estimate is a hair low; the shift cancels exactly in a = shift - theta.
    shift = b * (1.0 + 10.0 * tol)
    bottom = power_iteration(
        lambda v: shift * v - matvec(v), dim, rtol=tol, max_iter=max_iter, seed=seed + 1
    )
    a = min(max(shift - bottom.value, 0.0), b)
    return SingularInterval(
        a, b,
        converged_largest=top.converged, converged_smallest=bottom.converged,
        iterations_largest=top.iterations, iterations_smallest=bottom.iterations,
        seed=seed,
    )


def extreme_singular_values(
    W: BlockSparseMatrix,
    tol: float = 1e-6,
    max_iter: int = 20000,
    seed: int = DEFAULT_SEED,
) -> SingularInterval:
    """Smallest and largest singular values of a symmetric PSD matrix.

    b comes from power iteration on W, a from power iteration on (shift*I - W);
    for symmetric PSD input singular values and eigenvalues coincide.  Each leg
    reports whether it met the residual tolerance within max_iter.
    """
    csr = _as_csr(W)
    if csr.shape[0] != csr.shape[1]:
        raise DimensionMismatchError("extreme_singular_values", csr.shape, csr.shape[::-1])
    _check_symmetry(csr)
    return _extreme_eigs_from_matvec(lambda v: csr @ v, csr.shape[0], tol, max_iter, seed)


def extreme_eigs_of_gram_factor(
    F,
    shift: float = 0.0,
    tol: float = 1e-6,
    max_iter: int = 20000,
    seed: int = DEFAULT_SEED,
) -> SingularInterval:
    """Extreme eigenvalues of F^T F + shift*I without forming the product.

    Same algorithm as extreme_singular_values, but each matvec costs
    O(nnz(F)) instead of O(nnz(F^T F)); the factored form is what Gramians
    naturally provide.
    """
    if shift < 0:
        raise ValidationError("shift must be nonnegative")
    csr = _as_csr(F)
    csc = csr.T.tocsr()
    return _extreme_eigs_from_matvec(
        lambda v: csc @ (csr @ v) + shift * v, csr.shape[1], tol, max_iter, seed
    )


def spectral_norm(
    A,
    rtol: float = 1e-6,
    max_iter: int = 20000,
    seed: int = DEFAULT_SEED,
) -> float:
    """Largest singular value of a general matrix via power iteration on A^T A."""
    csr = _as_csr(A)
    if csr.nnz == 0:
        return 0.0
    csc = csr.T.tocsr()
    res = power_iteration(
        lambda v: csc @ (csr @ v), csr.shape[1], rtol=rtol, max_iter=max_iter, seed=seed
    )
    return float(np.sqrt(max(res.value, 0.0)))


def power_norm(
    A,
    s: int,
    rtol: float = 1e-6,
    max_iter: int = 20000,
    seed: int = DEFAULT_SEED,
) -> float:
    """Spectral norm of A^s for square A, applying A repeatedly (A^s never formed)."""
    if s < 0:
        raise ValidationError("power must be nonnegative")
    csr = _as_csr(A)
    if csr.shape[0] != csr.shape[1]:
        raise DimensionMismatchError("power_norm", csr.shape, csr.shape[::-1])
    if s == 0:
        return 1.0
    csc = csr.T.tocsr()

    def matvec(v):
        for _ in range(s):
            v = csr @ v
        for _ in range(s):
            v = csc @ v
        return v

    res = power_iteration(matvec, csr.shape[1], rtol=rtol, max_iter=max_iter, seed=seed)
    return float(np.sqrt(max(res.value, 0.0)))


def two_norm_error(A: BlockSparseMatrix, B: BlockSparseMatrix) -> float:
    """Spectral norm of A - B via power iteration on (A-B)^T (A-B), rtol 1e-6."""
    ca, cb = _as_csr(A), _as_csr(B)
    if ca.shape != cb.shape:
        raise DimensionMismatchError("two_norm_error", ca.shape, cb.shape)
    diff = sp.csr_matrix(ca - cb)
    diff.eliminate_zeros()
    return spectral_norm(diff, rtol=1e-6)
