import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from chancempc.prediction import (FeedbackGain, GainGridSpec, ModelDimensionError,
                                  RiccatiConvergenceError, SystemModel,
                                  build_gain_library, build_stacked, lq_gain,
                                  sample_grid_values, simulate_trajectory,
                                  state_feedback_block,
                                  state_to_disturbance_feedback)
from tests.conftest import VEHICLE_A, VEHICLE_B


def scalar_model(a=1.0, b=1.0, g=1.0):
    return SystemModel(np.array([[a]]), np.array([[b]]), np.array([[g]]))


def random_stable_system(rng, n_x, n_u, n_w):
    A = rng.normal(size=(n_x, n_x))
    A *= 0.9 / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
    return SystemModel(A, rng.normal(size=(n_x, n_u)), rng.normal(size=(n_x, n_w)))


def simulate_state_feedback(model, L, V, x0, W):
    """Oracle: step-by-step closed loop under u = L x + v."""
    n_u, n_w = model.n_u, model.n_w
    x = np.asarray(x0, float).copy()
    X, U = [x.copy()], []
    N = len(V) // n_u
    for i in range(N):
        u = L @ x + V[i * n_u:(i + 1) * n_u]
        x = model.A @ x + model.B @ u + model.G @ W[i * n_w:(i + 1) * n_w]
        U.append(u)
        X.append(x.copy())
    return np.concatenate(X), np.concatenate(U)


class TestBuildStacked:
    def test_scalar_expansion(self):
        st = build_stacked(scalar_model(a=2.0), 2)
        np.testing.assert_allclose(st.calA, [[1.0], [2.0], [4.0]])
        np.testing.assert_allclose(st.calB, [[0, 0], [1, 0], [2, 1]])
        np.testing.assert_allclose(st.calG, [[0, 0], [1, 0], [2, 1]])

    def test_identity_bottom_block(self):
        model = SystemModel(np.eye(2), np.eye(2), np.eye(2))
        st = build_stacked(model, 1)
        np.testing.assert_allclose(st.calB[2:4], np.eye(2))

    def test_vehicle_dimensions_and_block(self):
        model = SystemModel(VEHICLE_A, VEHICLE_B, VEHICLE_B)
        st = build_stacked(model, 10)
        assert st.calB.shape == (44, 20)
        block = st.calB[8:12, 0:2]          # state block 2, input block 1
        np.testing.assert_allclose(block, VEHICLE_A @ VEHICLE_B)
        assert block[1, 0] == pytest.approx(0.1 * 0.1 + 1.0 * 0.005)

    def test_structure_invariants(self):
        rng = np.random.default_rng(0)
        model = random_stable_system(rng, 3, 2, 1)
        st = build_stacked(model, 4)
        np.testing.assert_allclose(st.calA[:3], np.eye(3))
        assert not st.calB[:3].any() and not st.calG[:3].any()
        for i in range(5):
            for j in range(4):
                if j >= i:
                    assert not st.calB[i * 3:(i + 1) * 3, j * 2:(j + 1) * 2].any()

    def test_shift_property(self):
        rng = np.random.default_rng(1)
        model = random_stable_system(rng, 2, 2, 2)
        big = build_stacked(model, 5)
        small = build_stacked(model, 4)
        np.testing.assert_allclose(big.calB[:5 * 2, :4 * 2], small.calB)
        np.testing.assert_allclose(big.calG[:5 * 2, :4 * 2], small.calG)

    def test_dimension_errors(self):
        with pytest.raises(ModelDimensionError, match="model.B"):
            SystemModel(np.eye(2), np.zeros((3, 1)), np.zeros((2, 1)))
        with pytest.raises(ModelDimensionError, match="model.A"):
            SystemModel(np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 1)))
        with pytest.raises(ModelDimensionError, match="model.G"):
            SystemModel(np.eye(2), np.zeros((2, 1)), np.array([[np.nan], [0.0]]))
        with pytest.raises(ValueError):
            build_stacked(scalar_model(), 0)


class TestLqGain:
    def test_scalar_golden_section(self):
        # P solves P^2 - P - 1 = 0 for the unit scalar problem
        gain = lq_gain(scalar_model(), [1.0], [1.0])
        phi = (1.0 + np.sqrt(5.0)) / 2.0
        assert gain.L[0, 0] == pytest.approx(-(phi / (1.0 + phi)), abs=1e-10)
        assert gain.L[0, 0] == pytest.approx(-0.618034, abs=1e-6)

    def test_zero_state_cost(self):
        model = scalar_model(a=0.5)
        gain = lq_gain(model, [0.0], [1.0])
        assert gain.L[0, 0] == pytest.approx(0.0, abs=1e-10)

    def test_vehicle_sparsity(self):
        model = SystemModel(VEHICLE_A, VEHICLE_B, VEHICLE_B)
        gain = lq_gain(model, [0.0, 0.2, 0.0, 1.0], [0.1, 0.05])
        L = gain.L
        np.testing.assert_allclose(L[0, 2:], 0.0, atol=1e-12)
        np.testing.assert_allclose(L[1, :2], 0.0, atol=1e-12)
        assert np.all(L[0, :2] < 0.0) and np.all(L[1, 2:] < 0.0)

    def test_against_scipy_dare(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            n_x, n_u = rng.integers(2, 5), rng.integers(1, 3)
            model = random_stable_system(rng, n_x, n_u, 1)
            q = rng.uniform(0.1, 2.0, size=n_x)
            r = rng.uniform(0.1, 2.0, size=n_u)
            gain = lq_gain(model, q, r)
            P = solve_discrete_are(model.A, model.B, np.diag(q), np.diag(r))
            L_ref = -np.linalg.solve(np.diag(r) + model.B.T @ P @ model.B,
                                     model.B.T @ P @ model.A)
            np.testing.assert_allclose(gain.L, L_ref, atol=1e-8)

    def test_stabilizes_grid_designs(self):
        model = SystemModel(VEHICLE_A, VEHICLE_B, VEHICLE_B)
        for r in sample_grid_values(GainGridSpec(5, 0.05, 0.3, (0, "r", 0, 1),
                                                 ("r", "r"), seed=3)):
            gain = lq_gain(model, [0.0, r, 0.0, 1.0], [r, r])
            rad = np.max(np.abs(np.linalg.eigvals(model.A + model.B @ gain.L)))
            assert rad < 1.0 - 1e-9

    def test_unstabilizable_raises(self):
        model = SystemModel(np.array([[2.0]]), np.array([[0.0]]),
                            np.array([[1.0]]))
        with pytest.raises(RiccatiConvergenceError):
            lq_gain(model, [1.0], [1.0])

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            lq_gain(scalar_model(), [-1.0], [1.0])
        with pytest.raises(ValueError):
            lq_gain(scalar_model(), [1.0], [0.0])
        with pytest.raises(ModelDimensionError):
            lq_gain(scalar_model(), [1.0, 2.0], [1.0])


class TestDisturbanceFeedback:
    def test_scalar_chain(self):
        st = build_stacked(scalar_model(), 2)
        gain = FeedbackGain(np.array([[-0.5]]), np.eye(1), np.eye(1))
        calM = state_to_disturbance_feedback(st, gain)
        np.testing.assert_allclose(calM, [[0.0, 0.0], [-0.5, 0.0]], atol=1e-14)

    def test_zero_gain_open_loop(self):
        st = build_stacked(scalar_model(), 3)
        gain = FeedbackGain(np.zeros((1, 1)), np.eye(1), np.eye(1))
        assert not state_to_disturbance_feedback(st, gain).any()

    def test_causality_structure(self):
        rng = np.random.default_rng(3)
        model = random_stable_system(rng, 3, 2, 2)
        st = build_stacked(model, 5)
        gain = lq_gain(model, np.ones(3), np.ones(2))
        calM = state_to_disturbance_feedback(st, gain)
        for i in range(5):
            assert not calM[i * 2:(i + 1) * 2, i * 2:].any()

    def test_parameterization_equivalence(self):
        # a state-feedback policy (L, V_sf) and its disturbance-feedback
        # image (M, V_df) produce identical trajectories for every W, with
        # V_df = calL (I - calB calL)^-1 (calA x0 + calB V_sf) + V_sf
        rng = np.random.default_rng(4)
        for _ in range(5):
            n_x = int(rng.integers(2, 6))
            model = random_stable_system(rng, n_x, 2, 2)
            st = build_stacked(model, 6)
            gain = lq_gain(model, rng.uniform(0.1, 1, n_x), rng.uniform(0.1, 1, 2))
            calM = state_to_disturbance_feedback(st, gain)
            calL = state_feedback_block(st, gain)
            x0 = rng.normal(size=n_x)
            V_sf = rng.normal(size=6 * 2)
            closed = np.linalg.solve(np.eye((6 + 1) * n_x) - st.calB @ calL,
                                     st.calA @ x0 + st.calB @ V_sf)
            V_df = calL @ closed + V_sf
            for _ in range(20):
                W = rng.normal(size=6 * 2)
                X_df, U_df = simulate_trajectory(st, calM, V_df, x0, W)
                X_sf, U_sf = simulate_state_feedback(model, gain.L, V_sf, x0, W)
                scale = max(1.0, np.max(np.abs(X_sf)))
                assert np.max(np.abs(X_df - X_sf)) / scale < 1e-8
                assert np.max(np.abs(U_df - U_sf)) / max(1.0, np.max(np.abs(U_sf))) < 1e-8
            # the constructed policy is the lifted state-feedback one
            Y = np.linalg.solve(np.eye((6 + 1) * n_x) - st.calB @ calL, st.calG)
            np.testing.assert_allclose(calM, calL @ Y, atol=1e-10)


class TestSimulateTrajectory:
    def test_zero_disturbance_nominal(self):
        rng = np.random.default_rng(5)
        model = random_stable_system(rng, 2, 1, 1)
        st = build_stacked(model, 4)
        calM = rng.normal(size=(4, 4)) * 0  # arbitrary M is irrelevant at W=0
        V = rng.normal(size=4)
        x0 = rng.normal(size=2)
        X, U = simulate_trajectory(st, calM, V, x0, np.zeros(4))
        np.testing.assert_allclose(X, st.calA @ x0 + st.calB @ V)
        np.testing.assert_allclose(U, V)
        np.testing.assert_allclose(X[:2], x0)

    def test_pure_disturbance(self):
        st = build_stacked(scalar_model(), 3)
        W = np.array([1.0, -2.0, 0.5])
        X, U = simulate_trajectory(st, np.zeros((3, 3)), np.zeros(3),
                                   np.zeros(1), W)
        np.testing.assert_allclose(X, st.calG @ W)
        assert not U.any()

    def test_scalar_hand_recursion(self):
        st = build_stacked(scalar_model(), 2)
        calM = np.array([[0.0, 0.0], [-0.5, 0.0]])
        X, U = simulate_trajectory(st, calM, np.zeros(2), np.zeros(1),
                                   np.array([1.0, 0.0]))
        np.testing.assert_allclose(U, [0.0, -0.5])
        np.testing.assert_allclose(X, [0.0, 1.0, 0.5])

    def test_dimension_mismatch(self):
        st = build_stacked(scalar_model(), 2)
        with pytest.raises(ModelDimensionError):
            simulate_trajectory(st, np.zeros((2, 2)), np.zeros(3), np.zeros(1),
                                np.zeros(2))


class TestGainLibrary:
    def test_grid_size_and_consistency(self):
        model = SystemModel(VEHICLE_A, VEHICLE_B, VEHICLE_B)
        st = build_stacked(model, 4)
        grid = GainGridSpec(2, 0.05, 0.3, (0, "r", 0, 1), ("r", "r"), seed=1)
        assert grid.n_slots == 3 and grid.n_designs == 8
        lib = build_gain_library(model, st, grid, 0.05 * np.eye(2))
        assert len(lib) == 8 == len(lib.calM) == len(lib.feedback_cost)
        calR = np.kron(np.eye(4), 0.05 * np.eye(2))
        for M, cost in zip(lib.calM, lib.feedback_cost):
            assert cost == pytest.approx(np.trace(M.T @ calR @ M))

    def test_sampling_deterministic_and_sorted(self):
        grid = GainGridSpec(5, 0.1, 0.9, ("r",), ("r",), seed=42)
        v1, v2 = sample_grid_values(grid), sample_grid_values(grid)
        np.testing.assert_array_equal(v1, v2)
        assert np.all(np.diff(v1) >= 0.0)
        assert np.all((v1 >= 0.1) & (v1 <= 0.9))

    def test_first_input_block_rows_zero(self):
        model = SystemModel(VEHICLE_A, VEHICLE_B, VEHICLE_B)
        st = build_stacked(model, 5)
        grid = GainGridSpec(2, 0.05, 0.3, (0, "r", 0, 1), ("r", "r"), seed=1)
        lib = build_gain_library(model, st, grid, np.eye(2))
        for M in lib.calM:
            assert not M[:2].any()
