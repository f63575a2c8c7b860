"""Distributed window estimators, control solves, and their pattern predictions.

A sparse approximate inverse X of the observability Gramian turns the
centralized window estimate x_hat = W^{-1} O^T (Y - G U) into a pair of gain
matrices L = X O^T and Q = L G acting on subsystem-major lifted signals.  Row
block i of (L, Q) is subsystem i's estimator: it combines the lifted outputs
and inputs of its neighbor sets, which are exactly the nonzero block columns.
The sparser X is, the fewer neighbors each node must hear from.

``local_estimate`` evaluates one node's combination through a counting
``SignalProvider``, so tests can assert that the estimator reads precisely
the neighbor signals and nothing else.  ``centralized_estimate`` is the dense
Cholesky oracle the distributed path is compared against.

The pattern predictions mirror the constructions at boolean granularity:
reachability unions of the interconnection pattern predict the supports of
the lifted observability map, the Gramian, and the gains before anything
numeric is assembled.  For systems with positive blocks no cancellation can
occur and the predictions are exact; for signed systems they are supersets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.linalg

from .blocksparse import (
    BlockSparseMatrix,
    PatternMatrix,
    binarize,
    pattern_power_sum,
    pattern_product,
    spgemm,
    transpose,
)
from .errors import (
    DimensionMismatchError,
    MissingSignalError,
    SingularMatrixError,
    ValidationError,
)
from .mmio import read_block_matrix, write_block_matrix
from .spai import ApproxInverse
from .statespace import DESK_SCALE_LIMIT, Gramian, LiftedModel, LiftedSignal


# ---------------------------------------------------------------------------
# estimator gains


@dataclass(frozen=True, eq=False)
class DistributedEstimator:
    """Gain pair (L, Q): x_hat_i = sum_j L_ij Y_j - sum_j Q_ij U_j.

    Blocks are state_width x (p+1)*output_width for L and
    state_width x (p+1)*input_width for Q; the neighbor sets are the nonzero
    block columns of each row and double as the communication lists.
    """

    L: BlockSparseMatrix
    Q: BlockSparseMatrix
    p: int
    subsystem_count: int
    state_width: int
    output_width: int
    input_width: int

    def __post_init__(self):
        N, p = self.subsystem_count, self.p
        expected_rows = tuple([self.state_width] * N)
        if self.L.row_block_sizes != expected_rows or self.Q.row_block_sizes != expected_rows:
            raise ValidationError("gain row blocks must be one state block per subsystem")
        if self.L.col_block_sizes != tuple([(p + 1) * self.output_width] * N):
            raise ValidationError("L column blocks must hold one lifted output per subsystem")
        if self.Q.col_block_sizes != tuple([(p + 1) * self.input_width] * N):
            raise ValidationError("Q column blocks must hold one lifted input per subsystem")
        ml = [frozenset() for _ in range(N)]
        mq = [frozenset() for _ in range(N)]
        for keys, sets in ((self.L.block_keys(), ml), (self.Q.block_keys(), mq)):
            by_row: dict[int, set] = {}
            for i, j in keys:
                by_row.setdefault(i, set()).add(j)
            for i, cols in by_row.items():
                sets[i] = frozenset(cols)
        object.__setattr__(self, "_ml", tuple(ml))
        object.__setattr__(self, "_mq", tuple(mq))

    def output_neighbors(self, i: int) -> frozenset:
        return self._ml[i]

    def input_neighbors(self, i: int) -> frozenset:
        return self._mq[i]


def build_estimator(
    X: ApproxInverse | BlockSparseMatrix, lifted: LiftedModel
) -> DistributedEstimator:
    """Gains L = X O^T and Q = L G from an approximate Gramian inverse.

    X substitutes for W^{-1} in the centralized estimate; O and G are the
    subsystem-major lifted maps, so the gain blocks line up with per-node
    lifted signals.
    """
    matrix = X.matrix if isinstance(X, ApproxInverse) else X
    N, n = lifted.subsystem_count, lifted.state_width
    if matrix.shape != (N * n, N * n):
        raise DimensionMismatchError(
            "build_estimator", matrix.shape, (N * n, N * n),
            detail="inverse must act on the stacked state",
        )
    L = spgemm(matrix, transpose(lifted.grouped_observability))
    Q = spgemm(L, lifted.grouped_response)
    return DistributedEstimator(
        L=L,
        Q=Q,
        p=lifted.p,
        subsystem_count=N,
        state_width=n,
        output_width=lifted.output_width,
        input_width=lifted.input_width,
    )


class SignalProvider:
    """Lifted window signals served per subsystem, with access accounting.

    ``output_fetches``/``input_fetches`` count actual data reads; availability
    checks are free.  The counters make the communication claim testable: a
    local estimate must fetch exactly its neighbor sets.
    """

    def __init__(
        self,
        outputs: Mapping[int, np.ndarray],
        inputs: Mapping[int, np.ndarray],
    ):
        self._outputs = {int(k): np.asarray(v, dtype=np.float64).ravel()
                         for k, v in outputs.items()}
        self._inputs = {int(k): np.asarray(v, dtype=np.float64).ravel()
                        for k, v in inputs.items()}
        self.output_fetches = 0
        self.input_fetches = 0

    @classmethod
    def from_signals(cls, outputs: LiftedSignal, inputs: LiftedSignal) -> "SignalProvider":
        return cls(
            {i: outputs.segment(i) for i in range(outputs.subsystem_count)},
            {i: inputs.segment(i) for i in range(inputs.subsystem_count)},
        )

    def has_output(self, j: int) -> bool:
        return j in self._outputs

    def has_input(self, j: int) -> bool:
        return j in self._inputs

    def output(self, j: int) -> np.ndarray:
        self.output_fetches += 1
        return self._outputs[j]

    def input(self, j: int) -> np.ndarray:
        self.input_fetches += 1
        return self._inputs[j]


def local_estimate(
    est: DistributedEstimator, i: int, signals: SignalProvider
) -> np.ndarray:
    """Subsystem i's window-start state estimate from neighbor signals only."""
    if not (0 <= i < est.subsystem_count):
        raise ValidationError(f"subsystem index {i} out of range")
    needed_out = sorted(est.output_neighbors(i))
    needed_in = sorted(est.input_neighbors(i))
    missing_out = [j for j in needed_out if not signals.has_output(j)]
    missing_in = [j for j in needed_in if not signals.has_input(j)]
    if missing_out or missing_in:
        raise MissingSignalError(i, missing_out, missing_in)
    x = np.zeros(est.state_width)
    for j in needed_out:
        x += est.L.block(i, j) @ signals.output(j)
    for j in needed_in:
        x -= est.Q.block(i, j) @ signals.input(j)
    return x


def distributed_estimate(est: DistributedEstimator, signals: SignalProvider) -> np.ndarray:
    """All local estimates stacked into the global state vector."""
    return np.concatenate(
        [local_estimate(est, i, signals) for i in range(est.subsystem_count)]
    )


# ---------------------------------------------------------------------------
# dense oracles and control solves


def _dense_spd_solve(matrix: BlockSparseMatrix, rhs: np.ndarray, context: str) -> np.ndarray:
    dim = matrix.shape[0]
    if dim > DESK_SCALE_LIMIT:
        raise ValidationError(
            f"{context} is a dense desk-scale oracle, limited to dimension "
            f"{DESK_SCALE_LIMIT}; use an approximate inverse instead"
        )
    try:
        factor = scipy.linalg.cho_factor(matrix.to_dense())
    except scipy.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            f"{context}: matrix is not positive definite; regularize with mu > 0"
        ) from exc
    return scipy.linalg.cho_solve(factor, rhs)


def _grouped_values(signal, expected: int, what: str) -> np.ndarray:
    values = signal.values if isinstance(signal, LiftedSignal) else np.asarray(
        signal, dtype=np.float64
    ).ravel()
    if values.size != expected:
        raise DimensionMismatchError("centralized_estimate", (values.size,), (expected,),
                                     detail=what)
    return values


def centralized_estimate(
    lifted: LiftedModel,
    gramian: Gramian,
    outputs,
    inputs,
) -> np.ndarray:
    """Dense-oracle window estimate W^{-1} O^T (Y - G U), subsystem-major signals."""
    N, p = lifted.subsystem_count, lifted.p
    y = _grouped_values(outputs, N * (p + 1) * lifted.output_width, "lifted outputs")
    u = _grouped_values(inputs, N * (p + 1) * lifted.input_width, "lifted inputs")
    residual = y - lifted.grouped_response.csr @ u
    rhs = lifted.grouped_observability.csr.T @ residual
    return _dense_spd_solve(gramian.matrix, rhs, "centralized estimate")


def least_norm_control(
    lifted: LiftedModel,
    gramian: Gramian,
    x_target: np.ndarray,
    x_start: np.ndarray,
    inverse: ApproxInverse | BlockSparseMatrix | None = None,
) -> np.ndarray:
    """Minimum-norm lifted input steering x_start to x_target over the window.

    Returns the time-major stacked input R^T Q^{-1} (x_target - A^p x_start);
    its final step is zero because an input at the window end cannot move the
    state inside the window.  ``inverse`` substitutes an approximate Gramian
    inverse for the dense solve; the control residual then degrades by at
    most the inverse's residual norm times the norm of the state gap.
    """
    x_target = np.asarray(x_target, dtype=np.float64).ravel()
    x_start = np.asarray(x_start, dtype=np.float64).ravel()
    dim = lifted.subsystem_count * lifted.state_width
    if x_target.size != dim or x_start.size != dim:
        raise DimensionMismatchError(
            "least_norm_control", (x_target.size, x_start.size), (dim, dim)
        )
    gap = x_target - lifted.transition_power.csr @ x_start
    if inverse is not None:
        matrix = inverse.matrix if isinstance(inverse, ApproxInverse) else inverse
        z = matrix.csr @ gap
    else:
        z = _dense_spd_solve(gramian.matrix, gap, "least-norm control")
    return lifted.controllability_matrix.csr.T @ z


def impulse_response_solve(
    lifted: LiftedModel,
    y_desired,
    inverse: ApproxInverse | BlockSparseMatrix | None = None,
) -> np.ndarray:
    """Least-squares lifted input reproducing a desired lifted output.

    Solves (G^T G)^{-1} G^T y for the time-major response map G; G has full
    column rank only when the feedthrough does, since the window's final
    input reaches nothing but the final output.  ``inverse`` substitutes an
    approximate inverse of G^T G.
    """
    y = (
        y_desired.time_major()
        if isinstance(y_desired, LiftedSignal)
        else np.asarray(y_desired, dtype=np.float64).ravel()
    )
    G = lifted.response_matrix
    if y.size != G.shape[0]:
        raise DimensionMismatchError("impulse_response_solve", (y.size,), (G.shape[0],))
    rhs = G.csr.T @ y
    if inverse is not None:
        matrix = inverse.matrix if isinstance(inverse, ApproxInverse) else inverse
        return matrix.csr @ rhs
    normal = spgemm(transpose(G), G)
    try:
        return _dense_spd_solve(normal, rhs, "impulse response solve")
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            "impulse response solve: the response map is column rank deficient; "
            "a full column rank feedthrough is required"
        ) from exc


# ---------------------------------------------------------------------------
# pattern predictions


def predict_obs_pattern(interconnection: PatternMatrix, p: int) -> PatternMatrix:
    """Block support of the lifted observability map: paths of length <= p."""
    return pattern_power_sum(interconnection, p)


def predict_gramian_pattern(interconnection: PatternMatrix, p: int) -> PatternMatrix:
    """Block support of the window Gramian: union of (A^i)^T A^i supports."""
    if p < 0:
        raise ValidationError("window length must be nonnegative")
    acc = PatternMatrix.identity(interconnection.dimension)
    power = PatternMatrix.identity(interconnection.dimension)
    for _ in range(p):
        power = pattern_product(power, interconnection)
        acc = acc | pattern_product(power.transpose(), power)
    return acc


def predict_estimator_patterns(
    interconnection: PatternMatrix, p: int, s: int
) -> tuple[PatternMatrix, PatternMatrix]:
    """Predicted communication patterns of the gains (L, Q).

    The inverse approximant lives on reach-s paths of the Gramian pattern;
    multiplying by the transposed observability support gives L, and pushing
    L through the response support (paths up to p-1, plus the feedthrough
    diagonal) gives Q.
    """
    if s < 0:
        raise ValidationError("inverse pattern order must be nonnegative")
    obs = predict_obs_pattern(interconnection, p)
    gram = predict_gramian_pattern(interconnection, p)
    inverse_support = pattern_power_sum(gram, s)
    l_bar = pattern_product(inverse_support, obs.transpose())
    response_support = pattern_power_sum(interconnection, max(p - 1, 0))
    q_bar = pattern_product(l_bar, response_support)
    return l_bar, q_bar


@dataclass(frozen=True)
class CommunicationGraph:
    """Who listens to whom: adjacency of the L and Q gains, with degrees."""

    l_bar: PatternMatrix
    q_bar: PatternMatrix

    @classmethod
    def from_estimator(cls, est: DistributedEstimator) -> "CommunicationGraph":
        return cls(l_bar=binarize(est.L), q_bar=binarize(est.Q))

    def degree_summary(self) -> dict:
        ld = self.l_bar.in_degrees()
        qd = self.q_bar.in_degrees()
        return {
            "output_links": {"max": int(ld.max(initial=0)), "mean": float(ld.mean())},
            "input_links": {"max": int(qd.max(initial=0)), "mean": float(qd.mean())},
        }

    def to_csv(self, path) -> None:
        lines = ["i,j,role"]
        for role, pattern in (("L", self.l_bar), ("Q", self.q_bar)):
            for i, j in sorted(zip(pattern.rows.tolist(), pattern.cols.tolist())):
                lines.append(f"{i},{j},{role}")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# persistence


def save_estimator(est: DistributedEstimator, directory, stem: str = "estimator",
                   extra_meta: dict | None = None) -> dict:
    """Write the gains as Matrix Market pairs plus a shared dimension header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": est.state_width,
        "m": est.input_width,
        "r": est.output_width,
        "p": est.p,
        "N": est.subsystem_count,
    }
    if extra_meta:
        meta.update(extra_meta)
    paths = {
        "L": directory / f"{stem}_L.mtx",
        "Q": directory / f"{stem}_Q.mtx",
    }
    write_block_matrix(paths["L"], est.L, meta=meta)
    write_block_matrix(paths["Q"], est.Q, meta=meta)
    return {k: str(v) for k, v in paths.items()}


def load_estimator(directory, stem: str = "estimator") -> DistributedEstimator:
    directory = Path(directory)
    L, meta_l = read_block_matrix(directory / f"{stem}_L.mtx")
    Q, meta_q = read_block_matrix(directory / f"{stem}_Q.mtx")
    if meta_l != meta_q:
        raise ValidationError("estimator gain files disagree on their dimensions")
    return DistributedEstimator(
        L=L,
        Q=Q,
        p=int(meta_l["p"]),
        subsystem_count=int(meta_l["N"]),
        state_width=int(meta_l["n"]),
        output_width=int(meta_l["r"]),
        input_width=int(meta_l["m"]),
    )
