"""Approximate-inverse construction against dense oracles."""

import math

import numpy as np
import pytest

from blockspai.blocksparse import (
    BlockSparseMatrix,
    PatternMatrix,
    binarize,
    spgemm,
)
from blockspai.errors import SingularMatrixError, ValidationError
from blockspai.spai import (
    ApproxInverse,
    FrobeniusInverse,
    NewtonSchulzConfig,
    NewtonSchulzInverse,
    banded_pattern,
    error_bound,
    frobenius_spai,
    initial_guess,
    newton_schulz,
    predict_pattern_neumann,
    regularize_and_invert,
)
from blockspai.spectral import SingularInterval, two_norm_error
from blockspai.statespace import Gramian
from util import corpus_spectrum, spd_with_spectrum


# ---------------------------------------------------------------------------
# bound and seed


def test_error_bound_examples():
    assert error_bound(3.0, 3) == pytest.approx(0.8**8, rel=1e-12)
    assert error_bound(1.0, 5) == 0.0
    assert error_bound(float("inf"), 4) == 1.0
    # log-space evaluation survives depths where 0.6**(2**k) underflows the
    # naive power
    assert error_bound(2.0, 30) == 0.0
    ratio = (1.5**2 - 1) / (1.5**2 + 1)
    assert error_bound(1.5, 3) == pytest.approx(ratio**8, rel=1e-12)


def test_error_bound_rejects_bad_arguments():
    with pytest.raises(ValidationError):
        error_bound(0.5, 2)
    with pytest.raises(ValidationError):
        error_bound(2.0, -1)


def test_error_bound_monotone_in_k():
    values = [error_bound(10.0, k) for k in range(8)]
    assert all(values[i + 1] < values[i] for i in range(7))


def test_initial_guess_scales_matrix():
    W = BlockSparseMatrix.from_dense(np.diag([1.0, 2.0]), [1, 1], [1, 1])
    X0 = initial_guess(W, SingularInterval(1.0, 2.0))
    np.testing.assert_allclose(X0.to_dense(), np.diag([0.4, 0.8]), atol=1e-15)
    with pytest.raises(ValidationError):
        initial_guess(W, SingularInterval(0.0, 0.0))


# ---------------------------------------------------------------------------
# configuration contract


def test_config_requires_explicit_sparsification():
    with pytest.raises(ValidationError, match="declare a sparsification"):
        NewtonSchulzConfig()
    NewtonSchulzConfig(dense=True)
    NewtonSchulzConfig(phi=1e-8)
    NewtonSchulzConfig(pattern=PatternMatrix.identity(3))


def test_config_rejects_contradictions_and_bad_values():
    with pytest.raises(ValidationError):
        NewtonSchulzConfig(dense=True, phi=1e-8)
    with pytest.raises(ValidationError):
        NewtonSchulzConfig(dense=True, tol=0.0)
    with pytest.raises(ValidationError):
        NewtonSchulzConfig(dense=True, max_iter=0)
    with pytest.raises(ValidationError):
        NewtonSchulzConfig(dense=True, divergence_factor=1.0)
    with pytest.raises(ValidationError):
        NewtonSchulzConfig(phi=-1e-8)


# ---------------------------------------------------------------------------
# dense-mode Newton-Schulz


def test_identity_converges_immediately_with_exact_interval():
    W = BlockSparseMatrix.identity([2, 1])
    cfg = NewtonSchulzConfig(dense=True, interval_widening=0.0)
    result = newton_schulz(W, cfg, interval=SingularInterval(1.0, 1.0))
    assert result.report.status == "converged"
    assert result.report.iterations[0].k == 0
    assert result.report.iterations[0].epsilon == 0.0
    assert len(result.report.iterations) == 1
    np.testing.assert_allclose(result.matrix.to_dense(), np.eye(3), atol=1e-15)


def test_diagonal_converges_within_six_iterations():
    W = BlockSparseMatrix.from_dense(np.diag([1.0, 2.0]), [1, 1], [1, 1])
    cfg = NewtonSchulzConfig(dense=True, tol=1e-12, interval_widening=0.0)
    result = newton_schulz(W, cfg, interval=SingularInterval(1.0, 2.0))
    assert result.report.status == "converged"
    assert result.report.iterations[-1].k <= 6
    np.testing.assert_allclose(
        result.matrix.to_dense(), np.diag([1.0, 0.5]), rtol=1e-11, atol=1e-13
    )


def test_dense_matches_inverse_and_respects_bound():
    rng = np.random.default_rng(7)
    for kappa in (3.0, 30.0, 100.0):
        W, dense = spd_with_spectrum(rng, corpus_spectrum(rng, 40, kappa), block_size=2)
        cfg = NewtonSchulzConfig(dense=True, tol=5e-9)
        result = newton_schulz(W, cfg)
        assert result.report.status == "converged"
        oracle = np.linalg.inv(dense)
        err = np.linalg.norm(result.matrix.to_dense() - oracle, 2)
        assert err / np.linalg.norm(oracle, 2) <= 1e-8
        records = result.report.iterations
        for rec in records:
            assert rec.epsilon <= rec.bound * (1.0 + 1e-6)
        for prev, nxt in zip(records, records[1:]):
            assert nxt.epsilon <= prev.epsilon**2 + 1e-10


def test_report_records_are_monotone_artifacts():
    rng = np.random.default_rng(3)
    W, _ = spd_with_spectrum(rng, corpus_spectrum(rng, 20, 10.0))
    result = newton_schulz(W, NewtonSchulzConfig(dense=True, tol=5e-9))
    records = result.report.iterations
    assert [rec.k for rec in records] == list(range(len(records)))
    seconds = [rec.seconds for rec in records]
    assert all(b >= a for a, b in zip(seconds, seconds[1:]))
    assert result.report.kappa_used == pytest.approx(
        result.report.widened_interval.kappa, rel=1e-12
    )
    assert result.report.final_epsilon <= 5e-9


def test_non_positive_definite_matrix_points_at_regularization():
    W = BlockSparseMatrix.from_dense(np.diag([1.0, 0.0]), [1, 1], [1, 1])
    with pytest.raises(SingularMatrixError, match="[Rr]egulariz"):
        newton_schulz(W, NewtonSchulzConfig(dense=True))


def test_divergence_detector_stops_after_two_consecutive_growths():
    rng = np.random.default_rng(11)
    W, _ = spd_with_spectrum(rng, corpus_spectrum(rng, 12, 4.0))
    # A grossly wrong interval scales X0 so far off that the residual squares
    # upward; the detector must stop the run, not loop to max_iter.
    bogus = SingularInterval(1e-3, 2e-3)
    cfg = NewtonSchulzConfig(dense=True, max_iter=40)
    result = newton_schulz(W, cfg, interval=bogus)
    assert result.report.status == "diverged"
    assert len(result.report.iterations) < 40
    eps = [rec.epsilon for rec in result.report.iterations]
    assert eps[-1] > 1.5 * eps[-2]
    assert eps[-2] > 1.5 * eps[-3]


# ---------------------------------------------------------------------------
# sparsified runs


def test_masked_iterates_stay_inside_symmetrized_pattern():
    dim = 24
    dense = np.diag(np.full(dim, 2.0)) + np.diag(np.full(dim - 1, 0.5), 1) + np.diag(
        np.full(dim - 1, 0.5), -1
    )
    W = BlockSparseMatrix.from_dense(dense, [3] * 8, [3] * 8)
    pattern = predict_pattern_neumann(W, 1)
    assert len(pattern) < 64  # the mask actually constrains something
    allowed = pattern.symmetrized()
    for budget in (1, 2, 4):
        cfg = NewtonSchulzConfig(pattern=pattern, tol=1e-14, max_iter=budget)
        result = newton_schulz(W, cfg)
        assert binarize(result.matrix) <= allowed


def test_drop_threshold_perturbs_iterate_weakly():
    rng = np.random.default_rng(9)
    W, _ = spd_with_spectrum(rng, corpus_spectrum(rng, 24, 8.0), block_size=3)
    pattern = PatternMatrix.full(8)
    base = newton_schulz(W, NewtonSchulzConfig(pattern=pattern, tol=1e-9, max_iter=20))
    dropped = newton_schulz(
        W, NewtonSchulzConfig(pattern=pattern, phi=1e-8, tol=1e-9, max_iter=20)
    )
    assert base.report.status == "converged"
    assert dropped.report.status == "converged"
    assert two_norm_error(base.matrix, dropped.matrix) <= 1e-6


def test_sparse_residual_measurement_tracks_dense():
    rng = np.random.default_rng(13)
    W, dense = spd_with_spectrum(rng, corpus_spectrum(rng, 18, 6.0), block_size=3)
    cfg_sparse = NewtonSchulzConfig(pattern=PatternMatrix.full(6), tol=1e-9, max_iter=3)
    cfg_dense = NewtonSchulzConfig(dense=True, tol=1e-9, max_iter=3)
    sparse_run = newton_schulz(W, cfg_sparse)
    dense_run = newton_schulz(W, cfg_dense)
    for a, b in zip(sparse_run.report.iterations, dense_run.report.iterations):
        assert a.epsilon == pytest.approx(b.epsilon, rel=1e-4)


# ---------------------------------------------------------------------------
# regularization


def test_huge_shift_conditions_the_problem():
    rng = np.random.default_rng(17)
    matrix, _ = spd_with_spectrum(rng, [1.0, 1.4, 2.0])
    W = Gramian(matrix=matrix, p=2, mu=0.0, kind="observability")
    cfg = NewtonSchulzConfig(dense=True, tol=1e-6)
    result = regularize_and_invert(W, 1e6, cfg, interval=SingularInterval(1.0, 2.0))
    assert result.report.status == "converged"
    assert result.report.iterations[-1].k <= 2
    assert result.report.kappa_unregularized == pytest.approx(2.0)
    shifted_kappa = (2.0 + 1e6) / (1.0 + 1e6)
    assert shifted_kappa <= 1.001
    assert result.report.interval.kappa == pytest.approx(shifted_kappa, rel=1e-12)
    oracle = np.linalg.inv(matrix.to_dense() + 1e6 * np.eye(3))
    np.testing.assert_allclose(result.matrix.to_dense(), oracle, rtol=1e-5, atol=1e-12)


def test_zero_shift_is_plain_newton_schulz():
    rng = np.random.default_rng(19)
    matrix, _ = spd_with_spectrum(rng, corpus_spectrum(rng, 12, 5.0))
    W = Gramian(matrix=matrix, p=2, mu=0.0, kind="observability")
    cfg = NewtonSchulzConfig(dense=True, tol=5e-9)
    plain = newton_schulz(W, cfg)
    shifted = regularize_and_invert(W, 0.0, cfg)
    assert shifted.report.final_epsilon == pytest.approx(plain.report.final_epsilon)
    np.testing.assert_allclose(
        shifted.matrix.to_dense(), plain.matrix.to_dense(), rtol=1e-12, atol=1e-15
    )
    with pytest.raises(ValidationError):
        regularize_and_invert(W, -1.0, cfg)


def test_singular_gramian_inverts_after_shift():
    matrix = BlockSparseMatrix.from_dense(np.diag([0.0, 1.0]), [1, 1], [1, 1])
    W = Gramian(matrix=matrix, p=1, mu=0.0, kind="controllability")
    cfg = NewtonSchulzConfig(dense=True, tol=1e-10)
    result = regularize_and_invert(W, 0.5, cfg, interval=SingularInterval(0.0, 1.0))
    assert result.report.status == "converged"
    assert math.isinf(result.report.kappa_unregularized)
    oracle = np.linalg.inv(np.diag([0.5, 1.5]))
    np.testing.assert_allclose(result.matrix.to_dense(), oracle, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# patterns


def test_banded_pattern_examples():
    assert banded_pattern(4, 0).equals(PatternMatrix.identity(4))
    assert banded_pattern(4, 99).equals(PatternMatrix.full(4))
    tri = banded_pattern(4, 1)
    assert (0, 1) in tri and (1, 0) in tri and (0, 2) not in tri
    # scalar band 2 over blocks of 3 keeps only immediate block neighbors
    blocky = banded_pattern(3, 2, block_size=3)
    assert (0, 1) in blocky and (0, 2) not in blocky
    with pytest.raises(ValidationError):
        banded_pattern(0, 1)
    with pytest.raises(ValidationError):
        banded_pattern(4, -1)


def test_neumann_pattern_examples():
    rng = np.random.default_rng(23)
    W, _ = spd_with_spectrum(rng, [1.0, 2.0, 3.0])
    assert predict_pattern_neumann(W, 0).equals(PatternMatrix.identity(3))
    diag = BlockSparseMatrix.from_dense(np.diag([1.0, 2.0, 3.0]), [1] * 3, [1] * 3)
    assert predict_pattern_neumann(diag, 5).equals(PatternMatrix.identity(3))
    tridiag = BlockSparseMatrix.from_dense(
        np.diag([2.0] * 5)
        + np.diag([1.0] * 4, 1)
        + np.diag([1.0] * 4, -1),
        [1] * 5,
        [1] * 5,
    )
    predicted = predict_pattern_neumann(tridiag, 2)
    assert predicted.equals(banded_pattern(5, 2))


# ---------------------------------------------------------------------------
# Frobenius construction


def test_frobenius_diagonal_pattern_analytic_value():
    W = BlockSparseMatrix.from_dense(np.array([[2.0, 1.0], [1.0, 2.0]]), [1, 1], [1, 1])
    result = frobenius_spai(W, PatternMatrix.identity(2))
    np.testing.assert_allclose(result.matrix.to_dense(), np.diag([0.4, 0.4]), atol=1e-14)
    assert result.method == "frobenius"
    assert result.report.column_objectives == pytest.approx([math.sqrt(0.2)] * 2)
    assert result.report.objective == pytest.approx(math.sqrt(0.4))
    assert result.report.empty_columns == ()


def test_frobenius_full_pattern_recovers_inverse():
    rng = np.random.default_rng(29)
    W, dense = spd_with_spectrum(rng, corpus_spectrum(rng, 18, 9.0), block_size=3)
    result = frobenius_spai(W, PatternMatrix.full(6))
    oracle = np.linalg.inv(dense)
    err = np.linalg.norm(result.matrix.to_dense() - oracle, 2)
    assert err / np.linalg.norm(oracle, 2) <= 1e-10
    assert result.report.objective <= 1e-10


def test_frobenius_objective_monotone_under_nesting():
    rng = np.random.default_rng(31)
    W, _ = spd_with_spectrum(rng, corpus_spectrum(rng, 18, 9.0), block_size=3)
    nested = [PatternMatrix.identity(6), banded_pattern(6, 1), banded_pattern(6, 3),
              PatternMatrix.full(6)]
    objectives = [frobenius_spai(W, P).report.objective for P in nested]
    for small, big in zip(objectives[1:], objectives):
        assert small <= big + 1e-12


def test_frobenius_flags_empty_columns_and_rejects_empty_diagonal():
    rng = np.random.default_rng(37)
    W, _ = spd_with_spectrum(rng, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], block_size=2)
    lone = PatternMatrix.from_pairs(3, [(0, 0)])
    result = frobenius_spai(W, lone)
    assert result.report.empty_columns == (2, 3, 4, 5)
    dense_X = result.matrix.to_dense()
    assert np.all(dense_X[:, 2:] == 0.0)
    off_diag = PatternMatrix.from_pairs(3, [(0, 1), (1, 2)])
    with pytest.raises(ValidationError, match="diagonal"):
        frobenius_spai(W, off_diag)


def test_frobenius_parallel_columns_match_serial():
    rng = np.random.default_rng(41)
    W, _ = spd_with_spectrum(rng, corpus_spectrum(rng, 24, 6.0), block_size=2)
    pattern = banded_pattern(12, 3, block_size=2)
    serial = frobenius_spai(W, pattern, workers=1)
    parallel = frobenius_spai(W, pattern, workers=4)
    np.testing.assert_allclose(
        parallel.matrix.to_dense(), serial.matrix.to_dense(), rtol=0, atol=0
    )
    assert parallel.report.objective == serial.report.objective


# ---------------------------------------------------------------------------
# report artifacts and wrappers


def test_report_csv_round_trip(tmp_path):
    rng = np.random.default_rng(43)
    W, _ = spd_with_spectrum(rng, corpus_spectrum(rng, 12, 5.0))
    result = newton_schulz(W, NewtonSchulzConfig(dense=True, tol=5e-9))
    path = tmp_path / "history.csv"
    result.report.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "k,epsilon,bound,nnz_blocks,seconds"
    assert len(lines) == len(result.report.iterations) + 1
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[1]) == pytest.approx(result.report.iterations[0].epsilon)
    summary = result.report.to_json_dict()
    assert summary["status"] == "converged"
    assert summary["widened_interval"]["kappa"] == pytest.approx(result.report.kappa_used)


def test_estimator_wrappers():
    rng = np.random.default_rng(47)
    W, dense = spd_with_spectrum(rng, corpus_spectrum(rng, 12, 5.0), block_size=2)
    ns = NewtonSchulzInverse(dense=True, tol=5e-9).fit(W)
    oracle = np.linalg.inv(dense)
    np.testing.assert_allclose(ns.inverse_.to_dense(), oracle, rtol=1e-6, atol=1e-8)
    assert ns.report_.status == "converged"
    assert NewtonSchulzInverse().get_params()["max_iter"] == 60
    fro = FrobeniusInverse(pattern=PatternMatrix.full(6)).fit(W)
    np.testing.assert_allclose(fro.inverse_.to_dense(), oracle, rtol=1e-6, atol=1e-8)
    with pytest.raises(ValidationError):
        FrobeniusInverse().fit(W)


def test_result_type_carries_method_and_matrix():
    rng = np.random.default_rng(53)
    W, _ = spd_with_spectrum(rng, [1.0, 2.0])
    result = newton_schulz(W, NewtonSchulzConfig(dense=True))
    assert isinstance(result, ApproxInverse)
    assert result.method == "newton-schulz"
    assert spgemm(W, result.matrix).shape == (2, 2)
