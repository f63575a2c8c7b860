"""Distributed estimation and control against centralized dense oracles."""

import numpy as np
import pytest

from blockspai.blocksparse import (
    BlockSparseMatrix,
    PatternMatrix,
    binarize,
    pattern_power_sum,
)
from blockspai.errors import (
    MissingSignalError,
    SingularMatrixError,
    ValidationError,
)
from blockspai.estimator import (
    CommunicationGraph,
    DistributedEstimator,
    SignalProvider,
    build_estimator,
    centralized_estimate,
    distributed_estimate,
    impulse_response_solve,
    least_norm_control,
    load_estimator,
    local_estimate,
    predict_estimator_patterns,
    predict_gramian_pattern,
    predict_obs_pattern,
    save_estimator,
)
from blockspai.spai import NewtonSchulzConfig, newton_schulz
from blockspai.statespace import (
    InterconnectedSystem,
    LiftedSignal,
    ctrl_gramian,
    lift,
    obs_gramian,
    observability_index,
    simulate,
    window_signals,
)
from util import make_random_system


def dense_inverse_as_blocks(gram):
    inv = np.linalg.inv(gram.matrix.to_dense())
    sizes = gram.matrix.row_block_sizes
    return BlockSparseMatrix.from_dense(inv, sizes, sizes)


def windowed(system, lifted, steps=None, seed=0, noise_std=0.0):
    rng = np.random.default_rng(seed)
    steps = steps or lifted.p + 1
    x0 = rng.standard_normal(system.state_dim)
    inputs = rng.standard_normal((steps, system.N * system.m))
    states, outputs = simulate(system, x0, inputs, noise_std=noise_std, seed=seed + 1)
    return window_signals(lifted, states, outputs, inputs, steps - 1)


# ---------------------------------------------------------------------------
# gain construction


def test_identity_readout_gains():
    # A = 0 and C = I make the observability Gramian the identity, so the
    # exact gains read the window-start output directly and ignore inputs.
    n = 2
    system = InterconnectedSystem(
        N=2, n=n, m=1, r=n, edges={},
        diag=[np.zeros((n, n))] * 2,
        B=[np.zeros((n, 1))] * 2,
        C=[np.eye(n)] * 2,
        D=[np.zeros((n, 1))] * 2,
    )
    lifted = lift(system, 1)
    gram = obs_gramian(lifted)
    np.testing.assert_allclose(gram.matrix.to_dense(), np.eye(2 * n), atol=1e-15)
    est = build_estimator(BlockSparseMatrix.identity([n, n]), lifted)
    expected_block = np.hstack([np.eye(n), np.zeros((n, n))])
    for i in range(2):
        np.testing.assert_allclose(est.L.block(i, i), expected_block, atol=1e-15)
    assert est.Q.nnz == 0
    assert est.output_neighbors(0) == frozenset({0})
    assert est.input_neighbors(0) == frozenset()


def test_single_subsystem_gain_is_pseudo_inverse():
    rng = np.random.default_rng(2)
    system = make_random_system(rng, N=1, n=3, m=1, r=2, edge_prob=0.0)
    lifted = lift(system, 3)
    gram = obs_gramian(lifted)
    est = build_estimator(dense_inverse_as_blocks(gram), lifted)
    O = lifted.grouped_observability.to_dense()
    np.testing.assert_allclose(est.L.to_dense(), np.linalg.pinv(O), atol=1e-10)


def test_build_estimator_rejects_wrong_inverse_shape():
    rng = np.random.default_rng(3)
    system = make_random_system(rng, N=3, n=2)
    lifted = lift(system, 2)
    with pytest.raises(Exception, match="build_estimator"):
        build_estimator(BlockSparseMatrix.identity([2, 2]), lifted)


def test_neighbor_sets_match_block_support():
    rng = np.random.default_rng(5)
    system = make_random_system(rng, N=6, n=2, r=2, edge_prob=0.35)
    lifted = lift(system, 2)
    gram = obs_gramian(lifted, mu=1e-3)
    est = build_estimator(dense_inverse_as_blocks(gram), lifted)
    for i in range(6):
        assert est.output_neighbors(i) == {j for (r, j) in est.L.block_keys() if r == i}
        assert est.input_neighbors(i) == {j for (r, j) in est.Q.block_keys() if r == i}
    graph = CommunicationGraph.from_estimator(est)
    assert graph.l_bar.equals(binarize(est.L))
    degs = graph.degree_summary()
    assert degs["output_links"]["max"] == int(graph.l_bar.in_degrees().max())


# ---------------------------------------------------------------------------
# local vs centralized estimates


def test_local_estimates_match_centralized_with_exact_inverse():
    rng = np.random.default_rng(7)
    system = make_random_system(rng, N=6, n=2, m=1, r=2, edge_prob=0.4)
    lifted = lift(system, 3)
    gram = obs_gramian(lifted, mu=1e-6)
    est = build_estimator(dense_inverse_as_blocks(gram), lifted)
    window = windowed(system, lifted, steps=6, noise_std=0.01)
    provider = SignalProvider.from_signals(window["outputs"], window["inputs"])
    stacked = distributed_estimate(est, provider)
    central = centralized_estimate(lifted, gram, window["outputs"], window["inputs"])
    assert np.linalg.norm(stacked - central) <= 1e-10 * max(np.linalg.norm(central), 1.0)


def test_noise_free_recovery_of_window_start_state():
    rng = np.random.default_rng(9)
    system = make_random_system(rng, N=5, n=2, m=1, r=2, edge_prob=0.4)
    nu = observability_index(system, 6)
    assert nu is not None
    lifted = lift(system, max(nu, 1))
    gram = obs_gramian(lifted)
    est = build_estimator(dense_inverse_as_blocks(gram), lifted)
    window = windowed(system, lifted, steps=lifted.p + 2)
    provider = SignalProvider.from_signals(window["outputs"], window["inputs"])
    stacked = distributed_estimate(est, provider)
    assert np.linalg.norm(stacked - window["x_start"]) <= 1e-8


def test_local_estimate_zero_signals_and_missing_neighbors():
    rng = np.random.default_rng(11)
    system = make_random_system(rng, N=4, n=2, r=2, edge_prob=0.5)
    lifted = lift(system, 2)
    gram = obs_gramian(lifted, mu=1e-3)
    est = build_estimator(dense_inverse_as_blocks(gram), lifted)
    width_y = (lifted.p + 1) * lifted.output_width
    width_u = (lifted.p + 1) * lifted.input_width
    zeros = SignalProvider(
        {i: np.zeros(width_y) for i in range(4)},
        {i: np.zeros(width_u) for i in range(4)},
    )
    np.testing.assert_array_equal(local_estimate(est, 0, zeros), np.zeros(2))

    i = next(i for i in range(4) if len(est.output_neighbors(i)) > 1)
    dropped = sorted(est.output_neighbors(i))[-1]
    partial = SignalProvider(
        {j: np.zeros(width_y) for j in range(4) if j != dropped},
        {j: np.zeros(width_u) for j in range(4)},
    )
    with pytest.raises(MissingSignalError) as excinfo:
        local_estimate(est, i, partial)
    assert excinfo.value.missing_outputs == [dropped]
    assert str(dropped) in str(excinfo.value)


def test_locality_access_accounting():
    rng = np.random.default_rng(13)
    system = make_random_system(rng, N=6, n=2, r=2, edge_prob=0.3)
    lifted = lift(system, 2)
    gram = obs_gramian(lifted, mu=1e-3)
    inverse = newton_schulz(
        gram.matrix,
        NewtonSchulzConfig(pattern=pattern_power_sum(system.interconnection_pattern(), 2),
                           tol=1e-10, max_iter=8),
    )
    est = build_estimator(inverse, lifted)
    window = windowed(system, lifted, steps=5)
    provider = SignalProvider.from_signals(window["outputs"], window["inputs"])
    for i in range(6):
        before = (provider.output_fetches, provider.input_fetches)
        local_estimate(est, i, provider)
        assert provider.output_fetches - before[0] == len(est.output_neighbors(i))
        assert provider.input_fetches - before[1] == len(est.input_neighbors(i))


def test_approximation_transfer_bound():
    rng = np.random.default_rng(15)
    system = make_random_system(rng, N=6, n=2, m=1, r=2, edge_prob=0.4)
    lifted = lift(system, 3)
    gram = obs_gramian(lifted, mu=1e-3)
    exact = dense_inverse_as_blocks(gram)
    approx = newton_schulz(
        gram.matrix, NewtonSchulzConfig(phi=1e-3, tol=1e-12, max_iter=6)
    )
    window = windowed(system, lifted, steps=6, noise_std=0.05)
    provider_a = SignalProvider.from_signals(window["outputs"], window["inputs"])
    approx_est = distributed_estimate(build_estimator(approx, lifted), provider_a)
    exact_est = centralized_estimate(lifted, gram, window["outputs"], window["inputs"])
    y = window["outputs"].values
    u = window["inputs"].values
    rhs = lifted.grouped_observability.csr.T @ (y - lifted.grouped_response.csr @ u)
    gap = np.linalg.norm(exact.to_dense() - approx.matrix.to_dense(), 2)
    assert np.linalg.norm(approx_est - exact_est) <= gap * np.linalg.norm(rhs) * (1 + 1e-9)


def test_centralized_trivial_and_ridge_limit():
    rng = np.random.default_rng(17)
    system = make_random_system(rng, N=3, n=2, m=1, r=2, edge_prob=0.4)
    lifted = lift(system, 2)
    gram = obs_gramian(lifted, mu=1e-3)
    N, p = 3, 2
    zero_y = np.zeros(N * (p + 1) * lifted.output_width)
    zero_u = np.zeros(N * (p + 1) * lifted.input_width)
    np.testing.assert_array_equal(
        centralized_estimate(lifted, gram, zero_y, zero_u), np.zeros(6)
    )
    window = windowed(system, lifted, steps=4)
    ridge = obs_gramian(lifted, mu=1e12)
    estimate = centralized_estimate(lifted, ridge, window["outputs"], window["inputs"])
    assert np.linalg.norm(estimate) <= 1e-6


def test_centralized_rank_deficient_error_suggests_regularization():
    system = InterconnectedSystem(
        N=2, n=2, m=1, r=1, edges={},
        diag=[0.5 * np.eye(2)] * 2,
        B=[np.zeros((2, 1))] * 2,
        C=[np.zeros((1, 2))] * 2,
        D=[np.zeros((1, 1))] * 2,
    )
    lifted = lift(system, 2)
    gram = obs_gramian(lifted)
    y = np.zeros(2 * 3 * 1)
    u = np.zeros(2 * 3 * 1)
    with pytest.raises(SingularMatrixError, match="mu > 0"):
        centralized_estimate(lifted, gram, y, u)


# ---------------------------------------------------------------------------
# control solves


def controllable_system(rng, N=4, n=2):
    # Full-width B keeps the window controllability Gramian nonsingular at
    # p >= 1 (the controllability index is 1).
    return make_random_system(rng, N=N, n=n, m=n, r=1, edge_prob=0.4)


def test_least_norm_trivial_and_pinv_oracle():
    rng = np.random.default_rng(19)
    system = controllable_system(rng)
    lifted = lift(system, 3)
    qgram = ctrl_gramian(lifted)
    x_start = rng.standard_normal(8)
    fixed_point = lifted.transition_power.csr @ x_start
    u0 = least_norm_control(lifted, qgram, fixed_point, x_start)
    assert np.linalg.norm(u0) <= 1e-12

    x_target = rng.standard_normal(8)
    u = least_norm_control(lifted, qgram, x_target, x_start)
    R = lifted.controllability_matrix.to_dense()
    gap = x_target - fixed_point
    oracle = np.linalg.pinv(R) @ gap
    residual = np.linalg.norm(gap - R @ u)
    oracle_residual = np.linalg.norm(gap - R @ oracle)
    assert residual <= oracle_residual + 1e-8
    assert abs(np.linalg.norm(u) - np.linalg.norm(oracle)) <= 1e-8
    assert residual <= 1e-8


def test_least_norm_with_approximate_inverse_obeys_residual_bound():
    rng = np.random.default_rng(21)
    system = controllable_system(rng)
    lifted = lift(system, 3)
    qgram = ctrl_gramian(lifted, mu=1e-2)
    inverse = newton_schulz(
        qgram.matrix, NewtonSchulzConfig(phi=1e-4, tol=1e-12, max_iter=5)
    )
    x_start = rng.standard_normal(8)
    x_target = rng.standard_normal(8)
    u = least_norm_control(lifted, qgram, x_target, x_start, inverse=inverse)
    gap = x_target - lifted.transition_power.csr @ x_start
    # The control residual inherits the inverse's residual: gap - R R^T X gap
    # = (I - Q X) gap up to the regularization shift.
    Q = qgram.matrix.to_dense()
    X = inverse.matrix.to_dense()
    bound = np.linalg.norm(np.eye(8) - Q @ X, 2) * np.linalg.norm(gap)
    R = lifted.controllability_matrix.to_dense()
    mu_term = qgram.mu * np.linalg.norm(X @ gap)
    assert np.linalg.norm(gap - R @ u) <= bound + mu_term + 1e-10


def test_least_norm_singular_gramian_errors():
    rng = np.random.default_rng(23)
    system = make_random_system(rng, N=3, n=2, m=1, r=1, edge_prob=0.0)
    for i in range(3):
        system.B[i][:] = 0.0
    lifted = lift(system, 2)
    qgram = ctrl_gramian(lifted)
    with pytest.raises(SingularMatrixError, match="mu > 0"):
        least_norm_control(lifted, qgram, np.ones(6), np.zeros(6))


def test_impulse_response_trivials_and_ls_oracle():
    rng = np.random.default_rng(25)
    system = make_random_system(rng, N=3, n=2, m=1, r=2, edge_prob=0.4,
                                full_rank_d=True)
    lifted = lift(system, 2)
    zero = impulse_response_solve(lifted, np.zeros(lifted.response_matrix.shape[0]))
    assert np.linalg.norm(zero) <= 1e-14

    y = rng.standard_normal(lifted.response_matrix.shape[0])
    u = impulse_response_solve(lifted, y)
    G = lifted.response_matrix.to_dense()
    oracle, *_ = np.linalg.lstsq(G, y, rcond=None)
    assert np.linalg.norm(u - oracle) <= 1e-8 * max(np.linalg.norm(oracle), 1.0)


def test_impulse_response_orthonormal_response():
    # B = 0 and orthonormal feedthrough make the response map orthonormal, so
    # the solve reduces to G^T y.
    system = InterconnectedSystem(
        N=2, n=1, m=2, r=2, edges={},
        diag=[np.array([[0.5]])] * 2,
        B=[np.zeros((1, 2))] * 2,
        C=[np.zeros((2, 1))] * 2,
        D=[np.eye(2)] * 2,
    )
    lifted = lift(system, 1)
    rng = np.random.default_rng(27)
    y = rng.standard_normal(lifted.response_matrix.shape[0])
    u = impulse_response_solve(lifted, y)
    np.testing.assert_allclose(u, lifted.response_matrix.csr.T @ y, atol=1e-12)


def test_impulse_response_rank_deficiency_errors():
    rng = np.random.default_rng(29)
    system = make_random_system(rng, N=3, n=2, m=1, r=2, edge_prob=0.3)
    lifted = lift(system, 2)
    with pytest.raises(SingularMatrixError, match="rank deficient"):
        impulse_response_solve(lifted, np.zeros(lifted.response_matrix.shape[0]))


# ---------------------------------------------------------------------------
# pattern predictions


def chain_pattern(N):
    rows, cols = [], []
    for i in range(N - 1):
        rows += [i, i + 1]
        cols += [i + 1, i]
    return PatternMatrix(N, np.array(rows + list(range(N)), dtype=np.int64),
                         np.array(cols + list(range(N)), dtype=np.int64))


def test_pattern_prediction_trivia():
    empty = PatternMatrix.empty(4)
    assert predict_obs_pattern(empty, 3).equals(PatternMatrix.identity(4))
    assert predict_gramian_pattern(PatternMatrix.identity(4), 3).equals(
        PatternMatrix.identity(4)
    )
    l_bar, q_bar = predict_estimator_patterns(empty, 1, 0)
    assert l_bar.equals(PatternMatrix.identity(4))
    assert q_bar.equals(PatternMatrix.identity(4))


def test_chain_predictions():
    chain = chain_pattern(5)
    obs = predict_obs_pattern(chain, 2)
    assert (0, 2) in obs and (0, 3) not in obs
    gram = predict_gramian_pattern(chain, 1)
    # One hop out and one hop back through a shared middle node links nodes
    # two apart, so the window-1 Gramian of a self-looped chain fills the
    # |i - j| <= 2 band (verified against assembled Gramians elsewhere).
    expected = {(i, j) for i in range(5) for j in range(5) if abs(i - j) <= 2}
    assert gram.entries == frozenset(expected)
    l_bar, q_bar = predict_estimator_patterns(chain, 1, 1)
    assert l_bar.transpose().equals(l_bar)
    assert q_bar.transpose().equals(q_bar)


def test_predictions_exact_on_positive_systems():
    rng = np.random.default_rng(31)
    for trial in range(6):
        system = make_random_system(
            rng, N=6, n=2, m=1, r=2, edge_prob=0.3, positive=True
        )
        p = int(rng.integers(1, 4))
        lifted = lift(system, p)
        inter = system.interconnection_pattern()
        assert binarize(lifted.grouped_observability).equals(
            predict_obs_pattern(inter, p)
        )
        gram = obs_gramian(lifted)
        assert binarize(gram.matrix).equals(predict_gramian_pattern(inter, p))


def test_predictions_contain_signed_systems():
    rng = np.random.default_rng(33)
    for trial in range(6):
        system = make_random_system(rng, N=6, n=2, m=1, r=2, edge_prob=0.35)
        p = int(rng.integers(1, 4))
        lifted = lift(system, p)
        inter = system.interconnection_pattern()
        assert binarize(lifted.grouped_observability) <= predict_obs_pattern(inter, p)
        gram = obs_gramian(lifted)
        assert binarize(gram.matrix) <= predict_gramian_pattern(inter, p)


def test_gain_patterns_contained_in_prediction():
    rng = np.random.default_rng(35)
    system = make_random_system(rng, N=7, n=2, m=1, r=2, edge_prob=0.3, positive=True)
    p, s = 2, 2
    lifted = lift(system, p)
    gram = obs_gramian(lifted, mu=1e-3)
    inter = system.interconnection_pattern()
    support = pattern_power_sum(predict_gramian_pattern(inter, p), s)
    inverse = newton_schulz(
        gram.matrix, NewtonSchulzConfig(pattern=support, tol=1e-10, max_iter=6)
    )
    est = build_estimator(inverse, lifted)
    l_pred, q_pred = predict_estimator_patterns(inter, p, s)
    assert binarize(est.L) <= l_pred
    assert binarize(est.Q) <= q_pred


def test_prediction_argument_validation():
    with pytest.raises(ValidationError):
        predict_gramian_pattern(PatternMatrix.identity(3), -1)
    with pytest.raises(ValidationError):
        predict_estimator_patterns(PatternMatrix.identity(3), 1, -1)


# ---------------------------------------------------------------------------
# persistence


def test_estimator_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(37)
    system = make_random_system(rng, N=4, n=2, m=1, r=2, edge_prob=0.4)
    lifted = lift(system, 2)
    gram = obs_gramian(lifted, mu=1e-3)
    est = build_estimator(dense_inverse_as_blocks(gram), lifted)
    save_estimator(est, tmp_path, stem="gains")
    loaded = load_estimator(tmp_path, stem="gains")
    assert loaded.p == est.p and loaded.subsystem_count == est.subsystem_count
    np.testing.assert_allclose(loaded.L.to_dense(), est.L.to_dense(), atol=1e-15)
    np.testing.assert_allclose(loaded.Q.to_dense(), est.Q.to_dense(), atol=1e-15)
    assert [loaded.output_neighbors(i) for i in range(4)] == [
        est.output_neighbors(i) for i in range(4)
    ]

    graph = CommunicationGraph.from_estimator(est)
    csv_path = tmp_path / "links.csv"
    graph.to_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "i,j,role"
    assert len(lines) == 1 + len(graph.l_bar) + len(graph.q_bar)
    i, j, role = lines[1].split(",")
    assert role in {"L", "Q"}
    assert (int(i), int(j)) in graph.l_bar
