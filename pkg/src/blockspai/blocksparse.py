"""Block-sparse matrices, boolean block patterns, and the kernels built on them.

Storage design
--------------
A BlockSparseMatrix is a scalar-level CSR matrix plus the two block-size
vectors that partition its rows and columns.  The block map required by the
rest of the package (which blocks exist, what a given block holds) is derived
from the CSR structure on demand; CSR keeps the heavy kernels (multiply, add,
transpose, threshold) on scipy's C paths and makes the scalar and block views
of the same matrix trivially consistent.  Iteration order over blocks is
(block-row, block-col), i.e. block-compressed-sparse-row order.

Blocks whose Frobenius norm falls below ``PRUNE_TOL`` (1e-300, far below any
meaningful magnitude) are treated as structural zeros and removed whenever a
matrix is constructed, so "stored block" always means "block with content".
The norm test is evaluated in a scale-safe way because a naive sum of squares
underflows for entries around 1e-200 that are still legitimate content.

Kernel policy
-------------
scipy's general sparse-times-sparse multiply is roughly 80x slower per flop
than dense BLAS on this class of problems.  When both operands are dense enough
that the flop estimate favors it, and every shape involved fits under a size
cap, ``spgemm`` runs the product through dense BLAS and re-wraps the result;
the outcome is identical up to floating-point summation order.  Set the
environment variable ``BLOCKSPAI_KERNELS=sparse`` (or use ``kernel_policy``)
to force pure sparse execution, e.g. when timing the sparse algorithm itself.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError, ValidationError

PRUNE_TOL = 1e-300

# Dense-path tuning: largest number of entries any dense intermediate may have,
# and the flop advantage sparse code must beat to stay sparse.  The speedup is
# the measured per-flop throughput gap on this class of problems (~50 Gflop/s
# for BLAS dgemm vs ~0.6 Gflop/s for scipy's general csr product).
DENSE_CAP = 25_000_000
DENSE_SPEEDUP = 80.0

_POLICY_ENV = "BLOCKSPAI_KERNELS"
_policy_override: list[str] = []


@contextmanager
def kernel_policy(policy: str):
    """Force the multiply kernel choice ('auto', 'sparse', or 'dense') in a scope."""
    if policy not in ("auto", "sparse", "dense"):
        raise ValidationError(f"unknown kernel policy {policy!r}")
    _policy_override.append(policy)
    try:
        yield
    finally:
        _policy_override.pop()


def _effective_policy() -> str:
    if _policy_override:
        return _policy_override[-1]
    return os.environ.get(_POLICY_ENV, "auto")


def _offsets(sizes: tuple[int, ...]) -> np.ndarray:
    off = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=off[1:])
    return off


def _block_of(offsets: np.ndarray, scalar_idx: np.ndarray) -> np.ndarray:
    # offsets[b] <= idx < offsets[b+1]  =>  block b
    return np.searchsorted(offsets, scalar_idx, side="right") - 1


def _canonical_csr(matrix: sp.spmatrix, shape: tuple[int, int]) -> sp.csr_matrix:
    csr = sp.csr_matrix(matrix, shape=shape, dtype=np.float64, copy=True)
    csr.sum_duplicates()
    csr.eliminate_zeros()
    csr.sort_indices()
    return csr


def _prune_weak_blocks(
    csr: sp.csr_matrix, row_off: np.ndarray, col_off: np.ndarray, n_bcols: int
) -> sp.csr_matrix:
    """Drop every block whose scale-safe Frobenius norm is below PRUNE_TOL."""
    if csr.nnz == 0:
        return csr
    rows = np.repeat(np.arange(csr.shape[0], dtype=np.int64), np.diff(csr.indptr))
    brow = _block_of(row_off, rows)
    bcol = _block_of(col_off, csr.indices.astype(np.int64))
    keys = brow * n_bcols + bcol
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    starts = np.flatnonzero(np.diff(sorted_keys)) + 1
    starts = np.concatenate(([0], starts))
    absdata = np.abs(csr.data)[order]
    group_max = np.maximum.reduceat(absdata, starts)
    # Frobenius norm per block as max * sqrt(sum((x/max)^2)); immune to underflow.
    per_item_max = np.repeat(group_max, np.diff(np.concatenate((starts, [len(keys)]))))
    scaled = np.divide(absdata, per_item_max, out=np.zeros_like(absdata), where=per_item_max > 0)
    group_sq = np.add.reduceat(scaled * scaled, starts)
    group_fro = group_max * np.sqrt(group_sq)
    weak = group_fro < PRUNE_TOL
    if not weak.any():
        return csr
    keep_sorted = ~np.repeat(weak, np.diff(np.concatenate((starts, [len(keys)]))))
    keep = np.empty(len(keys), dtype=bool)
    keep[order] = keep_sorted
    out = sp.csr_matrix(
        (csr.data[keep], (rows[keep], csr.indices[keep])), shape=csr.shape
    )
    out.sort_indices()
    return out


@dataclass(frozen=True, eq=False)
class BlockSparseMatrix:
    """Real block matrix stored by nonzero blocks over a fixed block grid.

    ``csr`` is the canonical scalar-level view (sorted, duplicate-free, weak
    blocks pruned).  Do not mutate it; every operation returns a new matrix.
    """

    row_block_sizes: tuple[int, ...]
    col_block_sizes: tuple[int, ...]
    csr: sp.csr_matrix
    row_offsets: np.ndarray = field(repr=False, compare=False, default=None)
    col_offsets: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if any(s <= 0 for s in self.row_block_sizes) or any(
            s <= 0 for s in self.col_block_sizes
        ):
            raise ValidationError("block sizes must be positive")
        object.__setattr__(self, "row_offsets", _offsets(self.row_block_sizes))
        object.__setattr__(self, "col_offsets", _offsets(self.col_block_sizes))
        expected = (int(self.row_offsets[-1]), int(self.col_offsets[-1]))
        if self.csr.shape != expected:
            raise DimensionMismatchError(
                "BlockSparseMatrix", self.csr.shape, expected, "scalar shape vs block sizes"
            )

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_csr(
        cls,
        matrix: sp.spmatrix,
        row_block_sizes: Sequence[int],
        col_block_sizes: Sequence[int],
    ) -> "BlockSparseMatrix":
        rbs = tuple(int(s) for s in row_block_sizes)
        cbs = tuple(int(s) for s in col_block_sizes)
        shape = (int(sum(rbs)), int(sum(cbs)))
        csr = _canonical_csr(matrix, shape)
        csr = _prune_weak_blocks(csr, _offsets(rbs), _offsets(cbs), len(cbs))
        return cls(rbs, cbs, csr)

    @classmethod
    def from_dense(
        cls,
        dense: np.ndarray,
        row_block_sizes: Sequence[int],
        col_block_sizes: Sequence[int],
    ) -> "BlockSparseMatrix":
        return cls.from_csr(sp.csr_matrix(np.asarray(dense, dtype=np.float64)),
                            row_block_sizes, col_block_sizes)

    @classmethod
    def from_blocks(
        cls,
        row_block_sizes: Sequence[int],
        col_block_sizes: Sequence[int],
        blocks: Mapping[tuple[int, int], np.ndarray],
    ) -> "BlockSparseMatrix":
        rbs = tuple(int(s) for s in row_block_sizes)
        cbs = tuple(int(s) for s in col_block_sizes)
        row_off = _offsets(rbs)
        col_off = _offsets(cbs)
        rows, cols, data = [], [], []
        for (i, j), blk in blocks.items():
            if not (0 <= i < len(rbs) and 0 <= j < len(cbs)):
                raise ValidationError(f"block index ({i}, {j}) outside the block grid")
            blk = np.asarray(blk, dtype=np.float64)
            if blk.shape != (rbs[i], cbs[j]):
                raise DimensionMismatchError(
                    "from_blocks", blk.shape, (rbs[i], cbs[j]), f"block ({i}, {j})"
                )
            r, c = np.nonzero(blk)
            rows.append(r + row_off[i])
            cols.append(c + col_off[j])
            data.append(blk[r, c])
        if rows:
            coo = sp.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(int(row_off[-1]), int(col_off[-1])),
            )
        else:
            coo = sp.coo_matrix((int(row_off[-1]), int(col_off[-1])))
        return cls.from_csr(coo, rbs, cbs)

    @classmethod
    def identity(cls, block_sizes: Sequence[int]) -> "BlockSparseMatrix":
        bs = tuple(int(s) for s in block_sizes)
        return cls(bs, bs, _canonical_csr(sp.eye(sum(bs), format="csr"), (sum(bs), sum(bs))))

    @classmethod
    def zeros(
        cls, row_block_sizes: Sequence[int], col_block_sizes: Sequence[int]
    ) -> "BlockSparseMatrix":
        rbs = tuple(int(s) for s in row_block_sizes)
        cbs = tuple(int(s) for s in col_block_sizes)
        return cls(rbs, cbs, sp.csr_matrix((sum(rbs), sum(cbs))))

    # -- views -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def block_grid(self) -> tuple[int, int]:
        return (len(self.row_block_sizes), len(self.col_block_sizes))

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    def block_keys(self) -> list[tuple[int, int]]:
        """Indices of stored blocks in (block-row, block-col) order."""
        if self.csr.nnz == 0:
            return []
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.csr.indptr))
        brow = _block_of(self.row_offsets, rows)
        bcol = _block_of(self.col_offsets, self.csr.indices.astype(np.int64))
        keys = np.unique(brow * len(self.col_block_sizes) + bcol)
        nc = len(self.col_block_sizes)
        return [(int(k // nc), int(k % nc)) for k in keys]

    def n_blocks(self) -> int:
        if self.csr.nnz == 0:
            return 0
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.csr.indptr))
        brow = _block_of(self.row_offsets, rows)
        bcol = _block_of(self.col_offsets, self.csr.indices.astype(np.int64))
        return int(np.unique(brow * len(self.col_block_sizes) + bcol).size)

    def block(self, i: int, j: int) -> np.ndarray:
        """Dense copy of block (i, j); zeros if the block is not stored."""
        r0, r1 = self.row_offsets[i], self.row_offsets[i + 1]
        c0, c1 = self.col_offsets[j], self.col_offsets[j + 1]
        return self.csr[r0:r1, c0:c1].toarray()

    def blocks(self) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
        for key in self.block_keys():
            yield key, self.block(*key)

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def scale(self, alpha: float) -> "BlockSparseMatrix":
        return BlockSparseMatrix.from_csr(self.csr * float(alpha),
                                          self.row_block_sizes, self.col_block_sizes)


@dataclass(frozen=True, eq=False)
class PatternMatrix:
    """Boolean sparse matrix over a square block grid, with set semantics.

    Entries are kept as parallel sorted index arrays; ``entries`` materializes
    the frozenset view (fine at analysis scale, avoid for huge bands).
    """

    dimension: int
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.dimension <= 0:
            raise ValidationError("pattern dimension must be positive")
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        if rows.shape != cols.shape:
            raise ValidationError("row/col index arrays must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.dimension:
                raise ValidationError("pattern row index out of range")
            if cols.min() < 0 or cols.max() >= self.dimension:
                raise ValidationError("pattern col index out of range")
        keys = rows * self.dimension + cols
        keys = np.unique(keys)  # sort + dedupe: set semantics
        object.__setattr__(self, "rows", keys // self.dimension)
        object.__setattr__(self, "cols", keys % self.dimension)

    # -- constructors -----------------------------------------------------

    @classmethod
    def from_pairs(cls, dimension: int, pairs) -> "PatternMatrix":
        pairs = list(pairs)
        if pairs:
            arr = np.asarray(pairs, dtype=np.int64)
            return cls(dimension, arr[:, 0], arr[:, 1])
        return cls(dimension, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

    @classmethod
    def empty(cls, dimension: int) -> "PatternMatrix":
        return cls.from_pairs(dimension, [])

    @classmethod
    def identity(cls, dimension: int) -> "PatternMatrix":
        idx = np.arange(dimension, dtype=np.int64)
        return cls(dimension, idx, idx)

    @classmethod
    def full(cls, dimension: int) -> "PatternMatrix":
        i = np.repeat(np.arange(dimension, dtype=np.int64), dimension)
        j = np.tile(np.arange(dimension, dtype=np.int64), dimension)
        return cls(dimension, i, j)

    @classmethod
    def from_sparse(cls, matrix: sp.spmatrix) -> "PatternMatrix":
        if matrix.shape[0] != matrix.shape[1]:
            raise ValidationError("pattern source must be square")
        coo = sp.coo_matrix(matrix)
        mask = coo.data != 0
        return cls(matrix.shape[0], coo.row[mask].astype(np.int64),
                   coo.col[mask].astype(np.int64))

    # -- views and set algebra ---------------------------------------------

    @property
    def entries(self) -> frozenset:
        return frozenset(zip(self.rows.tolist(), self.cols.tolist()))

    def __len__(self) -> int:
        return int(self.rows.size)

    def _keys(self) -> np.ndarray:
        return self.rows * self.dimension + self.cols

    def __contains__(self, pair) -> bool:
        i, j = pair
        key = np.int64(i) * self.dimension + np.int64(j)
        pos = np.searchsorted(self._keys(), key)
        keys = self._keys()
        return bool(pos < keys.size and keys[pos] == key)

    def issubset(self, other: "PatternMatrix") -> bool:
        if self.dimension != other.dimension:
            raise DimensionMismatchError("issubset", (self.dimension,), (other.dimension,))
        return bool(np.isin(self._keys(), other._keys(), assume_unique=True).all())

    __le__ = issubset

    def equals(self, other: "PatternMatrix") -> bool:
        return (
            self.dimension == other.dimension
            and self.rows.size == other.rows.size
            and bool(np.array_equal(self._keys(), other._keys()))
        )

    def union(self, other: "PatternMatrix") -> "PatternMatrix":
        if self.dimension != other.dimension:
            raise DimensionMismatchError("union", (self.dimension,), (other.dimension,))
        return PatternMatrix(
            self.dimension,
            np.concatenate((self.rows, other.rows)),
            np.concatenate((self.cols, other.cols)),
        )

    __or__ = union

    def transpose(self) -> "PatternMatrix":
        return PatternMatrix(self.dimension, self.cols.copy(), self.rows.copy())

    def symmetrized(self) -> "PatternMatrix":
        return self.union(self.transpose())

    def to_csr(self) -> sp.csr_matrix:
        out = sp.csr_matrix(
            (np.ones(self.rows.size), (self.rows, self.cols)),
            shape=(self.dimension, self.dimension),
        )
        out.sort_indices()
        return out

    def in_degrees(self) -> np.ndarray:
        """Number of entries per row (signals a node must receive)."""
        return np.bincount(self.rows, minlength=self.dimension)


# -- kernels ---------------------------------------------------------------


def _sparse_flops(a: sp.csr_matrix, b: sp.csr_matrix) -> float:
    col_nnz_a = np.bincount(a.indices, minlength=a.shape[1]).astype(np.float64)
    row_nnz_b = np.diff(b.indptr).astype(np.float64)
    return 2.0 * float(col_nnz_a @ row_nnz_b)


def _dense_product_wins(a: sp.csr_matrix, b: sp.csr_matrix) -> bool:
    m, k = a.shape
    n = b.shape[1]
    if max(m * k, k * n, m * n) > DENSE_CAP:
        return False
    dense_flops = 2.0 * m * k * n
    return _sparse_flops(a, b) > dense_flops / DENSE_SPEEDUP


def spgemm(A: BlockSparseMatrix, B: BlockSparseMatrix) -> BlockSparseMatrix:
    """Exact block-sparse product A @ B, pruned of structurally zero blocks."""
    if A.col_block_sizes != B.row_block_sizes:
        raise DimensionMismatchError(
            "spgemm", A.shape, B.shape,
            f"column blocks {A.col_block_sizes[:4]}... vs row blocks {B.row_block_sizes[:4]}...",
        )
    policy = _effective_policy()
    use_dense = policy == "dense" or (policy == "auto" and _dense_product_wins(A.csr, B.csr))
    if use_dense:
        product = sp.csr_matrix(A.csr.toarray() @ B.csr.toarray())
    else:
        product = A.csr @ B.csr
    return BlockSparseMatrix.from_csr(product, A.row_block_sizes, B.col_block_sizes)


def sp_add(
    A: BlockSparseMatrix, B: BlockSparseMatrix, alpha: float = 1.0, beta: float = 1.0
) -> BlockSparseMatrix:
    """alpha*A + beta*B with union sparsity, pruned."""
    if (
        A.row_block_sizes != B.row_block_sizes
        or A.col_block_sizes != B.col_block_sizes
    ):
        raise DimensionMismatchError("sp_add", A.shape, B.shape, "block-size vectors differ")
    return BlockSparseMatrix.from_csr(
        float(alpha) * A.csr + float(beta) * B.csr, A.row_block_sizes, A.col_block_sizes
    )


def transpose(A: BlockSparseMatrix) -> BlockSparseMatrix:
    out = A.csr.transpose().tocsr()
    out.sort_indices()
    return BlockSparseMatrix(A.col_block_sizes, A.row_block_sizes, out)


def binarize(A: BlockSparseMatrix) -> PatternMatrix:
    """Block-level sparsity pattern: (i, j) present iff block (i, j) has content."""
    n_brows, n_bcols = A.block_grid
    if n_brows != n_bcols:
        raise ValidationError("binarize needs a square block grid")
    if A.csr.nnz == 0:
        return PatternMatrix.empty(n_brows)
    rows = np.repeat(np.arange(A.shape[0], dtype=np.int64), np.diff(A.csr.indptr))
    brow = _block_of(A.row_offsets, rows)
    bcol = _block_of(A.col_offsets, A.csr.indices.astype(np.int64))
    return PatternMatrix(n_brows, brow, bcol)


def pattern_product(P1: PatternMatrix, P2: PatternMatrix) -> PatternMatrix:
    """Boolean matrix product of two patterns."""
    if P1.dimension != P2.dimension:
        raise DimensionMismatchError("pattern_product", (P1.dimension,), (P2.dimension,))
    prod = P1.to_csr() @ P2.to_csr()  # float counts; exact well below 2**53 paths
    return PatternMatrix.from_sparse(prod)


def pattern_power_sum(P: PatternMatrix, s: int) -> PatternMatrix:
    """T(I + P + P^2 + ... + P^s) by breadth-first reachability.

    Never materializes scalar powers: each step extends the frontier one hop
    and stops early once no new pairs appear.  Monotone in s.
    """
    if s < 0:
        raise ValidationError("power sum order must be nonnegative")
    n = P.dimension
    reach = sp.eye(n, format="csr", dtype=np.int8)
    frontier = reach
    adj = P.to_csr().astype(np.int8)
    for _ in range(s):
        nxt = frontier @ adj
        nxt = (nxt != 0).astype(np.int8)
        new = nxt - nxt.multiply(reach)
        new.eliminate_zeros()
        if new.nnz == 0:
            break
        reach = reach + new
        frontier = new
    return PatternMatrix.from_sparse(reach)


def mask_pattern(Z: BlockSparseMatrix, P: PatternMatrix) -> BlockSparseMatrix:
    """Keep only the blocks of Z whose indices appear in P (pattern masking)."""
    n_brows, n_bcols = Z.block_grid
    if n_brows != P.dimension or n_bcols != P.dimension:
        raise DimensionMismatchError(
            "mask_pattern", Z.block_grid, (P.dimension, P.dimension)
        )
    if Z.csr.nnz == 0 or len(P) == 0:
        return BlockSparseMatrix.zeros(Z.row_block_sizes, Z.col_block_sizes)
    rows = np.repeat(np.arange(Z.shape[0], dtype=np.int64), np.diff(Z.csr.indptr))
    brow = _block_of(Z.row_offsets, rows)
    bcol = _block_of(Z.col_offsets, Z.csr.indices.astype(np.int64))
    keys = brow * P.dimension + bcol
    pkeys = P._keys()
    pos = np.searchsorted(pkeys, keys)
    pos[pos == pkeys.size] = 0
    keep = pkeys[pos] == keys
    if keep.all():
        return Z
    kept = sp.csr_matrix(
        (Z.csr.data[keep], (rows[keep], Z.csr.indices[keep])), shape=Z.shape
    )
    return BlockSparseMatrix.from_csr(kept, Z.row_block_sizes, Z.col_block_sizes)


def drop_small(Z: BlockSparseMatrix, phi: float) -> BlockSparseMatrix:
    """Zero every entry with |z| <= phi; entries above the threshold are untouched."""
    if phi < 0:
        raise ValidationError("dropping parameter must be nonnegative")
    if Z.csr.nnz == 0 or phi == 0.0:
        return Z
    keep = np.abs(Z.csr.data) > phi
    if keep.all():
        return Z
    rows = np.repeat(np.arange(Z.shape[0], dtype=np.int64), np.diff(Z.csr.indptr))
    kept = sp.csr_matrix(
        (Z.csr.data[keep], (rows[keep], Z.csr.indices[keep])), shape=Z.shape
    )
    return BlockSparseMatrix.from_csr(kept, Z.row_block_sizes, Z.col_block_sizes)
