"""Interconnected linear systems, window lifting, and finite-time Gramians.

A system is a directed graph of N identical-dimension subsystems: each node i
carries local state/input/output maps, each edge (i, j) a nonzero coupling
block acting on neighbor state.  Lifting over a window of p steps produces

  outputs(k-p..k) = O x(k-p) + G inputs(k-p..k) + noise
  x(k)            = A^p x(k-p) + R inputs(k-p..k)

in two index orderings: time-major (natural for simulation) and
subsystem-major (natural for distributed estimation).  The subsystem-major
matrices are obtained from the time-major ones by row/column permutations
that are stored as index maps, never as dense matrices.

Window convention: the lifted input stacks p+1 steps u(k-p)..u(k), but the
state reached at k depends on u(k-p)..u(k-1) only, so the controllability
matrix's last block column is identically zero: R = [A^(p-1)B, ..., AB, B, 0].
This is the unique arrangement under which both identities above hold, and
the trajectory tests pin it.  Consequently the controllability Gramian
R R^T sums A^i B B^T (A^T)^i for i = 0..p-1 (one term fewer than the
observability sum, which runs i = 0..p because outputs include step k).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .blocksparse import BlockSparseMatrix, PatternMatrix, binarize, spgemm, transpose
from .errors import DimensionMismatchError, ValidationError
from .spectral import power_norm, spectral_norm

DESK_SCALE_LIMIT = 5000


@dataclass(frozen=True, eq=False)
class InterconnectedSystem:
    """N coupled subsystems with uniform local dimensions n (state), m (input), r (output)."""

    N: int
    n: int
    m: int
    r: int
    edges: dict
    diag: list
    B: list
    C: list
    D: list

    def __post_init__(self):
        if min(self.N, self.n, self.m, self.r) <= 0:
            raise ValidationError("N, n, m, r must all be positive")
        for name, mats, shape in (
            ("diag", self.diag, (self.n, self.n)),
            ("B", self.B, (self.n, self.m)),
            ("C", self.C, (self.r, self.n)),
            ("D", self.D, (self.r, self.m)),
        ):
            if len(mats) != self.N:
                raise ValidationError(f"{name} must hold one block per subsystem")
            for i, M in enumerate(mats):
                arr = np.asarray(M, dtype=np.float64)
                if arr.shape != shape:
                    raise DimensionMismatchError(name, arr.shape, shape, f"subsystem {i}")
                mats[i] = arr
        cleaned = {}
        for (i, j), blk in self.edges.items():
            if not (0 <= i < self.N and 0 <= j < self.N):
                raise ValidationError(f"edge ({i}, {j}) outside node range")
            if i == j:
                raise ValidationError(
                    f"edge ({i}, {j}) is a self loop; diagonal blocks go in 'diag'"
                )
            arr = np.asarray(blk, dtype=np.float64)
            if arr.shape != (self.n, self.n):
                raise DimensionMismatchError("edges", arr.shape, (self.n, self.n),
                                             f"edge ({i}, {j})")
            if not np.any(arr):
                raise ValidationError(f"edge ({i}, {j}) carries an all-zero coupling block")
            cleaned[(int(i), int(j))] = arr
        object.__setattr__(self, "edges", cleaned)

    @property
    def state_dim(self) -> int:
        return self.N * self.n

    def neighbor_sets(self) -> list:
        """In-neighbors per node: j in M_i iff the edge (i, j) exists."""
        sets = [set() for _ in range(self.N)]
        for (i, j) in self.edges:
            sets[i].add(j)
        return sets

    def interconnection_pattern(self) -> PatternMatrix:
        pairs = [(i, i) for i in range(self.N) if np.any(self.diag[i])]
        pairs.extend(self.edges.keys())
        return PatternMatrix.from_pairs(self.N, pairs)

    # -- JSON schema: {N, n, m, r, edges: [{i, j, A_ij}], diag, B, C, D} ----

    def to_json_dict(self) -> dict:
        return {
            "N": self.N, "n": self.n, "m": self.m, "r": self.r,
            "edges": [
                {"i": i, "j": j, "A_ij": self.edges[(i, j)].ravel().tolist()}
                for (i, j) in sorted(self.edges)
            ],
            "diag": [M.ravel().tolist() for M in self.diag],
            "B": [M.ravel().tolist() for M in self.B],
            "C": [M.ravel().tolist() for M in self.C],
            "D": [M.ravel().tolist() for M in self.D],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "InterconnectedSystem":
        try:
            N, n, m, r = (int(doc[k]) for k in ("N", "n", "m", "r"))
            rows = {"diag": (n, n), "B": (n, m), "C": (r, n), "D": (r, m)}
            mats = {
                key: [np.asarray(M, dtype=np.float64).reshape(shape) for M in doc[key]]
                for key, shape in rows.items()
            }
            edges = {
                (int(e["i"]), int(e["j"])): np.asarray(e["A_ij"], dtype=np.float64).reshape(n, n)
                for e in doc["edges"]
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed system description: {exc}") from exc
        return cls(N=N, n=n, m=m, r=r, edges=edges,
                   diag=mats["diag"], B=mats["B"], C=mats["C"], D=mats["D"])


def assemble_global(system: InterconnectedSystem):
    """Global (A, B, C, D): A couples along the graph, the rest are block diagonal."""
    N, n, m, r = system.N, system.n, system.m, system.r
    a_blocks = {(i, i): system.diag[i] for i in range(N) if np.any(system.diag[i])}
    a_blocks.update({key: blk for key, blk in system.edges.items()})
    A = BlockSparseMatrix.from_blocks([n] * N, [n] * N, a_blocks)
    B = BlockSparseMatrix.from_blocks(
        [n] * N, [m] * N, {(i, i): system.B[i] for i in range(N)}
    )
    C = BlockSparseMatrix.from_blocks(
        [r] * N, [n] * N, {(i, i): system.C[i] for i in range(N)}
    )
    D = BlockSparseMatrix.from_blocks(
        [r] * N, [m] * N, {(i, i): system.D[i] for i in range(N)}
    )
    return A, B, C, D


def group_index_map(N: int, p: int, width: int) -> np.ndarray:
    """Index map from time-major stacking to subsystem-major stacking.

    Time-major position t*(N*width) + i*width + q (step t, subsystem i,
    component q) maps to subsystem-major position i*((p+1)*width) + t*width + q.
    """
    idx = np.arange((p + 1) * N * width, dtype=np.int64)
    t = idx // (N * width)
    rem = idx % (N * width)
    i = rem // width
    q = rem % width
    return i * ((p + 1) * width) + t * width + q


def _permute_rows(csr: sp.csr_matrix, row_map: np.ndarray) -> sp.csr_matrix:
    coo = csr.tocoo()
    out = sp.csr_matrix((coo.data, (row_map[coo.row], coo.col)), shape=csr.shape)
    out.sort_indices()
    return out


def _permute_cols(csr: sp.csr_matrix, col_map: np.ndarray) -> sp.csr_matrix:
    coo = csr.tocoo()
    out = sp.csr_matrix((coo.data, (coo.row, col_map[coo.col])), shape=csr.shape)
    out.sort_indices()
    return out


@dataclass(frozen=True, eq=False)
class LiftedModel:
    """Window-p lifting of a system in both index orderings.

    Time-major: observability_matrix (maps x(k-p) to stacked outputs),
    response_matrix (lower block triangular input-to-output map),
    controllability_matrix (maps stacked inputs to x(k)).  Subsystem-major
    counterparts carry the 'grouped_' prefix and are exact permutations of
    the former; output_permutation/input_permutation are the index maps.
    """

    p: int
    subsystem_count: int
    state_width: int
    input_width: int
    output_width: int
    state_matrix: BlockSparseMatrix
    input_matrix: BlockSparseMatrix
    output_matrix: BlockSparseMatrix
    feedthrough_matrix: BlockSparseMatrix
    observability_matrix: BlockSparseMatrix
    response_matrix: BlockSparseMatrix
    controllability_matrix: BlockSparseMatrix
    grouped_observability: BlockSparseMatrix
    grouped_response: BlockSparseMatrix
    grouped_controllability: BlockSparseMatrix
    transition_power: BlockSparseMatrix
    output_permutation: np.ndarray = field(repr=False)
    input_permutation: np.ndarray = field(repr=False)
    truncation_limit: Optional[int] = None
    truncation_residual_bound: Optional[float] = None


def lift(system: InterconnectedSystem, p: int) -> LiftedModel:
    """Build the window-p lifted matrices and their subsystem-major groupings."""
    if p < 1:
        raise ValidationError("lifting window p must be at least 1")
    N, n, m, r = system.N, system.n, system.m, system.r
    A, B, C, D = assemble_global(system)

    # Output rows C A^t and Markov parameters C A^t B, t = 0..p.
    CA = [C]
    for _ in range(p):
        CA.append(spgemm(CA[-1], A))
    CAB = [spgemm(M, B) for M in CA[:p]]
    AB = [B]
    for _ in range(p - 1):
        AB.append(spgemm(A, AB[-1]))
    A_pow = A
    for _ in range(p - 1):
        A_pow = spgemm(A_pow, A)

    obs_csr = sp.vstack([M.csr for M in CA], format="csr")
    observability = BlockSparseMatrix.from_csr(obs_csr, [r] * (N * (p + 1)), [n] * N)

    blocks = [[None] * (p + 1) for _ in range(p + 1)]
    for t in range(p + 1):
        # The diagonal block is always placed (even with zero nnz) so bmat can
        # infer the shape of rows/columns whose Markov parameters vanish.
        blocks[t][t] = D.csr
        for l in range(t):
            blk = CAB[t - l - 1].csr
            blocks[t][l] = blk if blk.nnz else None
    resp_csr = sp.bmat(blocks, format="csr")
    response = BlockSparseMatrix.from_csr(resp_csr, [r] * (N * (p + 1)), [m] * (N * (p + 1)))

    ctrl_csr = sp.hstack(
        [M.csr for M in reversed(AB)] + [sp.csr_matrix((N * n, N * m))], format="csr"
    )
    controllability = BlockSparseMatrix.from_csr(ctrl_csr, [n] * N, [m] * (N * (p + 1)))

    out_map = group_index_map(N, p, r)
    in_map = group_index_map(N, p, m)
    for name, perm in (("output", out_map), ("input", in_map)):
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValidationError(f"{name} permutation is not a bijection")

    grouped_obs = BlockSparseMatrix.from_csr(
        _permute_rows(observability.csr, out_map), [(p + 1) * r] * N, [n] * N
    )
    grouped_resp = BlockSparseMatrix.from_csr(
        _permute_cols(_permute_rows(response.csr, out_map), in_map),
        [(p + 1) * r] * N, [(p + 1) * m] * N,
    )
    grouped_ctrl = BlockSparseMatrix.from_csr(
        _permute_cols(controllability.csr, in_map), [n] * N, [(p + 1) * m] * N
    )

    model = LiftedModel(
        p=p, subsystem_count=N, state_width=n, input_width=m, output_width=r,
        state_matrix=A, input_matrix=B, output_matrix=C, feedthrough_matrix=D,
        observability_matrix=observability, response_matrix=response,
        controllability_matrix=controllability,
        grouped_observability=grouped_obs, grouped_response=grouped_resp,
        grouped_controllability=grouped_ctrl,
        transition_power=A_pow,
        output_permutation=out_map, input_permutation=in_map,
    )
    _verify_grouping(model)
    return model


def _verify_grouping(model: LiftedModel) -> None:
    """The grouped matrices must be exact permutations of the time-major ones."""
    for time_major, grouped, rmap, cmap in (
        (model.observability_matrix, model.grouped_observability,
         model.output_permutation, None),
        (model.response_matrix, model.grouped_response,
         model.output_permutation, model.input_permutation),
        (model.controllability_matrix, model.grouped_controllability,
         None, model.input_permutation),
    ):
        csr = time_major.csr
        if rmap is not None:
            csr = _permute_rows(csr, rmap)
        if cmap is not None:
            csr = _permute_cols(csr, cmap)
        if (csr != grouped.csr).nnz != 0:
            raise ValidationError("grouped lifted matrix does not match its permutation")


@dataclass(frozen=True, eq=False)
class Gramian:
    matrix: BlockSparseMatrix
    p: int
    mu: float
    kind: str


def _accumulate_gramian(
    A: BlockSparseMatrix, G0: BlockSparseMatrix, terms: int, reverse: bool
) -> BlockSparseMatrix:
    # Horner form: M <- A^T M A + G0 keeps intermediates as sparse as A's powers.
    At = transpose(A)
    M = G0
    left, right = (A, At) if reverse else (At, A)
    for _ in range(terms):
        M = spgemm(left, spgemm(M, right))
        M = BlockSparseMatrix.from_csr(
            M.csr + G0.csr, M.row_block_sizes, M.col_block_sizes
        )
    sym = (M.csr + M.csr.T) * 0.5
    return BlockSparseMatrix.from_csr(sym, M.row_block_sizes, M.col_block_sizes)


def _with_shift(M: BlockSparseMatrix, mu: float) -> BlockSparseMatrix:
    if mu == 0.0:
        return M
    return BlockSparseMatrix.from_csr(
        M.csr + mu * sp.eye(M.shape[0], format="csr"), M.row_block_sizes, M.col_block_sizes
    )


def obs_gramian(lifted: LiftedModel, mu: float = 0.0) -> Gramian:
    """Observability Gramian sum_{i=0}^{p} (A^T)^i C^T C A^i, plus mu*I if requested."""
    if mu < 0:
        raise ValidationError("regularization parameter mu must be nonnegative")
    terms = lifted.p
    if lifted.truncation_limit is not None:
        terms = min(lifted.truncation_limit, terms)
    C = lifted.output_matrix
    G0 = spgemm(transpose(C), C)
    W = _with_shift(_accumulate_gramian(lifted.state_matrix, G0, terms, reverse=False), mu)
    return Gramian(matrix=W, p=lifted.p, mu=mu, kind="observability")


def ctrl_gramian(lifted: LiftedModel, mu: float = 0.0) -> Gramian:
    """Controllability Gramian sum_{i=0}^{p-1} A^i B B^T (A^T)^i, plus mu*I."""
    if mu < 0:
        raise ValidationError("regularization parameter mu must be nonnegative")
    terms = lifted.p - 1
    if lifted.truncation_limit is not None:
        terms = min(lifted.truncation_limit, terms)
    B = lifted.input_matrix
    G0 = spgemm(B, transpose(B))
    Q = _with_shift(_accumulate_gramian(lifted.state_matrix, G0, terms, reverse=True), mu)
    return Gramian(matrix=Q, p=lifted.p, mu=mu, kind="controllability")


def truncate_stable_powers(lifted: LiftedModel, s: int, eta: float) -> LiftedModel:
    """Limit the Gramian sums to powers A^0..A^s, valid when ||A^s|| <= eta.

    Returns a copy of the model carrying the truncation order and the bound
    sum_{i>s} ||A^i||^2 ||C||^2 on the neglected observability terms.
    """
    if s < 1:
        raise ValidationError("truncation order s must be at least 1")
    if eta <= 0:
        raise ValidationError("stability threshold eta must be positive")
    norm_s = power_norm(lifted.state_matrix, s)
    if norm_s > eta:
        raise ValidationError(
            f"||A^{s}|| = {norm_s:.6e} exceeds eta = {eta:.6e}; "
            "the truncated Gramian is only valid for stable dynamics"
        )
    c_norm = spectral_norm(lifted.output_matrix)
    residual = sum(
        power_norm(lifted.state_matrix, i) ** 2 for i in range(s + 1, lifted.p + 1)
    ) * c_norm ** 2
    return dataclasses.replace(
        lifted, truncation_limit=s, truncation_residual_bound=float(residual)
    )


def _index_search(system: InterconnectedSystem, p_max: int, observability: bool):
    if p_max < 1:
        raise ValidationError("p_max must be at least 1")
    if system.state_dim > DESK_SCALE_LIMIT:
        raise ValidationError(
            f"rank sweep is dense and limited to state dimension {DESK_SCALE_LIMIT}"
        )
    A, B, C, _ = assemble_global(system)
    Ad = A.to_dense()
    target = system.state_dim
    if observability:
        rows = [C.to_dense()]
        for nu in range(1, p_max + 1):
            rows.append(rows[-1] @ Ad)
            stacked = np.vstack(rows)
            if _qr_rank(stacked) == target:
                return nu
    else:
        cols = [B.to_dense()]
        for theta in range(1, p_max + 1):
            cols.append(Ad @ cols[-1])
            # R_theta = [A^(theta-1) B, ..., B, 0]; the zero column cannot change rank.
            stacked = np.hstack(cols[:theta])
            if _qr_rank(stacked) == target:
                return theta
    return None


def _qr_rank(M: np.ndarray) -> int:
    if min(M.shape) == 0 or not np.any(M):
        return 0
    R = scipy.linalg.qr(M, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    sigma_max = np.linalg.norm(M, 2)
    return int(np.count_nonzero(diag > 1e-10 * sigma_max))


def observability_index(system: InterconnectedSystem, p_max: int):
    """Smallest window nu <= p_max whose observability matrix has full column rank."""
    return _index_search(system, p_max, observability=True)


def controllability_index(system: InterconnectedSystem, p_max: int):
    """Smallest window theta <= p_max whose controllability matrix has full row rank."""
    return _index_search(system, p_max, observability=False)


@dataclass(frozen=True, eq=False)
class LiftedSignal:
    """Subsystem-major stacked window signal: per node, p+1 steps of width values."""

    values: np.ndarray
    subsystem_count: int
    window: int
    width: int

    def __post_init__(self):
        expected = self.subsystem_count * (self.window + 1) * self.width
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.size != expected:
            raise DimensionMismatchError("LiftedSignal", (vals.size,), (expected,))
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_time_major(
        cls, values: np.ndarray, subsystem_count: int, window: int, width: int
    ) -> "LiftedSignal":
        values = np.asarray(values, dtype=np.float64).ravel()
        gmap = group_index_map(subsystem_count, window, width)
        grouped = np.empty_like(values)
        grouped[gmap] = values
        return cls(grouped, subsystem_count, window, width)

    def time_major(self) -> np.ndarray:
        gmap = group_index_map(self.subsystem_count, self.window, self.width)
        return self.values[gmap]

    def segment(self, i: int) -> np.ndarray:
        """The stacked window of subsystem i (steps k-p..k, oldest first)."""
        w = (self.window + 1) * self.width
        if not (0 <= i < self.subsystem_count):
            raise ValidationError(f"subsystem index {i} out of range")
        return self.values[i * w:(i + 1) * w]


def simulate(
    system: InterconnectedSystem,
    x0: np.ndarray,
    inputs: np.ndarray,
    noise_std: float = 0.0,
    seed: int = 0,
):
    """Roll the global dynamics forward; returns (states, outputs).

    ``inputs`` has one row per step including the final one (outputs at the
    last step need its input through the feedthrough term); states has the
    same number of rows, outputs likewise.  Optional i.i.d. Gaussian noise is
    added to every output sample.
    """
    A, B, C, D = assemble_global(system)
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    if x0.size != system.state_dim:
        raise DimensionMismatchError("simulate", (x0.size,), (system.state_dim,))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != system.N * system.m:
        raise DimensionMismatchError(
            "simulate", inputs.shape, (inputs.shape[0], system.N * system.m)
        )
    steps = inputs.shape[0]
    states = np.empty((steps, system.state_dim))
    outputs = np.empty((steps, system.N * system.r))
    rng = np.random.default_rng(seed)
    x = x0
    for k in range(steps):
        states[k] = x
        outputs[k] = C.csr @ x + D.csr @ inputs[k]
        if k + 1 < steps:
            x = A.csr @ x + B.csr @ inputs[k]
    if noise_std > 0:
        outputs += rng.normal(0.0, noise_std, size=outputs.shape)
    return states, outputs


def window_signals(lifted: LiftedModel, states, outputs, inputs, k: int) -> dict:
    """Grouped window signals ending at step k of a simulated trajectory."""
    p = lifted.p
    if k < p:
        raise ValidationError(f"window end k = {k} is shorter than the lifting window {p}")
    N, m, r = lifted.subsystem_count, lifted.input_width, lifted.output_width
    y_time = np.concatenate([outputs[t] for t in range(k - p, k + 1)])
    u_time = np.concatenate([inputs[t] for t in range(k - p, k + 1)])
    return {
        "outputs": LiftedSignal.from_time_major(y_time, N, p, r),
        "inputs": LiftedSignal.from_time_major(u_time, N, p, m),
        "x_start": np.asarray(states[k - p], dtype=np.float64),
        "x_end": np.asarray(states[k], dtype=np.float64),
    }
