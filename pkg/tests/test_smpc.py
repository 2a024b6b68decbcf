import numpy as np
import pytest

from chancempc.conic_ir import SolveStatus, solve_relaxation
from chancempc.micp import BnBConfig, solve_bnb
from chancempc.prediction import (FeedbackGain, GainGridSpec, GainLibrary,
                                  SystemModel, build_gain_library,
                                  build_stacked)
from chancempc.smpc import (Planner, Polytope, RunRecord, Scenario, StepRecord,
                            Weights, assemble_ocp, expected_cost_terms,
                            monte_carlo, receding_horizon_run, violation_flags)
from tests.conftest import (make_case1_scenario, make_pinned_risk_scenario,
                            make_reduced_case2)


class TestPolytope:
    def test_validation(self):
        with pytest.raises(ValueError, match="nonzero"):
            Polytope(np.array([[0.0, 0.0]]), np.array([1.0]))
        with pytest.raises(ValueError, match="rows"):
            Polytope(np.eye(2), np.array([1.0]))

    def test_membership_semantics(self):
        box = Polytope(np.array([[1.0], [-1.0]]), np.array([1.0, 1.0]))
        assert box.contains(np.array([0.5]))
        assert not box.contains(np.array([1.5]))
        assert box.strictly_inside(np.array([0.0]))
        assert not box.strictly_inside(np.array([1.0]))


class TestExpectedCost:
    def _library_with(self, calM, R, N):
        gain = FeedbackGain(np.zeros((1, 1)), np.eye(1), np.eye(1))
        calR = np.kron(np.eye(N), np.atleast_2d(R))
        return GainLibrary([gain], [np.asarray(calM, float)],
                           [float(np.trace(np.asarray(calM).T @ calR
                                           @ np.asarray(calM)))])

    def test_vanishing_terms(self):
        model = SystemModel(np.eye(1), np.eye(1), np.eye(1))
        st = build_stacked(model, 2)
        lib = self._library_with(np.zeros((2, 2)), 1.0, 2)
        terms = expected_cost_terms(st, lib, np.eye(1), S=np.array([3.0]))
        assert terms.constant == 0.0
        assert not terms.v_linear.any()
        assert terms.delta_linear[0] == 0.0
        np.testing.assert_allclose(terms.gamma_linear, [3.0])

    def test_feedback_trace_term(self):
        model = SystemModel(np.eye(1), np.eye(1), np.eye(1))
        st = build_stacked(model, 2)
        lib = self._library_with([[0.0, 0.0], [1.0, 0.0]], 1.0, 2)
        terms = expected_cost_terms(st, lib, np.eye(1))
        assert terms.delta_linear[0] == pytest.approx(1.0)

    def test_monte_carlo_cross_check(self):
        # analytic E[J] vs the sample mean of S'Gamma + ||MW+V||_R^2 + ||X||_Q^2
        rng = np.random.default_rng(21)
        for trial in range(2):
            n_x, n_u, n_w, N = 2, 2, 2, 3
            A = rng.normal(size=(n_x, n_x)) * 0.4
            model = SystemModel(A, rng.normal(size=(n_x, n_u)),
                                rng.normal(size=(n_x, n_w)))
            st = build_stacked(model, N)
            grid = GainGridSpec(1, 0.5, 0.5, ("r", 1), ("r", 1), seed=trial)
            R = np.diag(rng.uniform(0.1, 1.0, n_u))
            Q = np.diag(rng.uniform(0.0, 1.0, n_x))
            lib = build_gain_library(model, st, grid, R)
            x0 = rng.normal(size=n_x)
            V = rng.normal(size=N * n_u)
            gamma = rng.uniform(0.01, 0.1, size=2)
            S = rng.uniform(0.5, 2.0, size=2)
            terms = expected_cost_terms(st, lib, R, Q, S, x0)
            analytic = (terms.constant + terms.v_linear @ V
                        + V @ terms.v_quadratic @ V + terms.delta_linear[0]
                        + S @ gamma)
            calR = np.kron(np.eye(N), R)
            calQ = np.kron(np.eye(N + 1), Q)
            M = lib.calM[0]
            draws = 100_000
            W = rng.standard_normal((draws, N * n_w))
            U = W @ M.T + V
            X = st.calA @ x0 + st.calB @ V + W @ (st.calG + st.calB @ M).T
            samples = (S @ gamma + np.einsum("ij,jk,ik->i", U, calR, U)
                       + np.einsum("ij,jk,ik->i", X, calQ, X))
            se = samples.std(ddof=1) / np.sqrt(draws)
            assert abs(samples.mean() - analytic) < 3 * se + 1e-9

    def test_weight_validation(self):
        model = SystemModel(np.eye(1), np.eye(1), np.eye(1))
        st = build_stacked(model, 1)
        lib = self._library_with(np.zeros((1, 1)), 1.0, 1)
        with pytest.raises(ValueError):
            expected_cost_terms(st, lib, -np.eye(1))
        with pytest.raises(ValueError, match="x0"):
            expected_cost_terms(st, lib, np.eye(1), Q=np.eye(1))


class TestAssembleOcp:
    def test_case1_structure(self, vehicle_model):
        sc = make_case1_scenario(vehicle_model, n_values=2)
        inst = assemble_ocp(sc, sc.x0)
        N = sc.horizon
        assert inst.manifest["stay_in"] == N * 4
        assert inst.manifest["input"] == N * 4
        assert inst.manifest["terminal"] == 2
        assert inst.manifest["stay_out"] == 0
        assert inst.manifest["budget"] == 1
        assert inst.manifest["onehot"] == 1
        assert len(inst.delta_ids) == 8
        assert len(inst.gamma_in_ids) == N and not inst.gamma_out_ids
        assert inst.program.validate() == []

    def test_case2_structure(self, vehicle_model):
        sc = make_reduced_case2(vehicle_model)
        inst = assemble_ocp(sc, sc.x0)
        N = sc.horizon
        assert inst.manifest["stay_out"] == N * 3
        assert inst.manifest["onehot"] == 1 + N
        assert len(inst.sigma_ids) == N
        assert all(len(g) == 3 for g in inst.sigma_ids)
        assert len(inst.gamma_out_ids) == N
        assert inst.program.validate() == []

    def test_degenerate_single_face(self):
        model = SystemModel(np.array([[1.0]]), np.array([[1.0]]),
                            np.array([[1.0]]))
        sc = Scenario(
            model=model, horizon=1,
            stay_in=Polytope(np.array([[1.0]]), np.array([5.0])),
            target=Polytope(np.array([[1.0]]), np.array([5.0])),
            input_set=Polytope(np.array([[1.0], [-1.0]]), np.array([3.0, 3.0])),
            xi=0.1, gamma_input=0.01, gamma_terminal=0.01,
            weights=Weights(np.eye(1), None, 1.0),
            gain_grid=GainGridSpec(1, 1.0, 1.0, ("r",), ("r",), seed=0),
            x0=np.array([0.0]), formulation="inv", seed=0)
        inst = assemble_ocp(sc, sc.x0)
        assert inst.manifest["stay_in"] == 1
        assert inst.manifest["terminal"] == 1
        assert inst.manifest["input"] == 2
        sol = solve_relaxation(inst.program)
        assert sol.optimal

    def test_budget_row_present_once(self, vehicle_model):
        sc = make_reduced_case2(vehicle_model)
        inst = assemble_ocp(sc, sc.x0)
        assert inst.manifest["budget"] == 1


class TestRecedingHorizon:
    def test_zero_disturbance_nominal_approach(self, vehicle_model):
        sc = make_case1_scenario(vehicle_model, n_values=2)

        class ZeroGen:
            def standard_normal(self, n):
                return np.zeros(n)

        rec = receding_horizon_run(sc, 20, w_generator=ZeroGen())
        assert rec.completed
        flags = violation_flags(sc, rec)
        assert not any(v.any() for v in flags.values())
        # monotone approach toward the target half-spaces
        px = [s[1] for s in rec.states]
        py = [s[3] for s in rec.states]
        assert px[-1] > px[0] and py[-1] > py[0]
        assert px[-1] >= 0.5 - 1e-6 and py[-1] >= 0.55 - 1e-6

    def test_backs_off_boundary(self, vehicle_model):
        # start near the stay-in walls: mid-run clearance beats the start
        sc = make_case1_scenario(vehicle_model, n_values=2)
        rec = receding_horizon_run(sc, 14,
                                   w_generator=np.random.RandomState(3))
        assert rec.completed
        P, p = sc.stay_in.P, sc.stay_in.p
        dist = [float(np.min(p - P @ x)) for x in rec.states]
        assert min(dist[6:]) > dist[0]

    def test_budget_and_integrality_each_instant(self, vehicle_model):
        sc = make_reduced_case2(vehicle_model)
        planner = Planner(sc)
        rng = np.random.RandomState(5)
        x = sc.x0.copy()
        for _ in range(3):
            inst = planner.assemble(x)
            sol, _ = solve_bnb(inst.program)
            assert sol.optimal
            gammas = inst.gamma_values(sol.primal)
            assert gammas.sum() <= sc.xi + 1e-8
            assert np.all(gammas >= 1e-6 - 1e-12)
            deltas = sol.primal[inst.delta_ids]
            assert np.all((deltas < 1e-6) | (deltas > 1 - 1e-6))
            assert int(np.round(deltas).sum()) == 1
            for group in inst.sigma_ids:
                sigmas = np.round(sol.primal[group])
                assert sigmas.sum() == 1
            # end-to-end conservatism at the solved point
            assert min(inst.exact_margins(sol.primal)) >= -1e-7
            u = sol.primal[inst.v_ids[:2]]
            x = sc.model.A @ x + sc.model.B @ u \
                + sc.model.G @ rng.standard_normal(2)

    def test_infeasible_instant_reported(self, vehicle_model):
        sc = make_case1_scenario(vehicle_model, n_values=2)
        # teleport the start far outside the reachable funnel of the target
        bad = Scenario(model=sc.model, horizon=sc.horizon, stay_in=sc.stay_in,
                       target=sc.target, input_set=sc.input_set, xi=sc.xi,
                       gamma_input=sc.gamma_input,
                       gamma_terminal=sc.gamma_terminal, weights=sc.weights,
                       gain_grid=sc.gain_grid,
                       x0=np.array([0.0, -1.29, 0.0, 0.01]),
                       formulation=sc.formulation, seed=sc.seed)
        rec = receding_horizon_run(bad, 3,
                                   w_generator=np.random.RandomState(0))
        if not rec.completed:
            assert rec.infeasible_at == 0
            assert rec.steps == []

    def test_formulation_agreement(self, vehicle_model):
        objs, deltas = {}, {}
        for form in ("inv", "root", "log"):
            sc = make_case1_scenario(vehicle_model, n_values=2,
                                     formulation=form)
            inst = assemble_ocp(sc, sc.x0)
            sol, _ = solve_bnb(inst.program, BnBConfig(relative_gap_tol=1e-9))
            assert sol.optimal
            objs[form] = sol.objective_value
            deltas[form] = inst.delta_index(sol.primal)
        spread = max(objs.values()) - min(objs.values())
        assert spread <= 0.02 * max(abs(v) for v in objs.values())
        assert len(set(deltas.values())) == 1

    def test_first_input_is_nominal(self, vehicle_model):
        sc = make_case1_scenario(vehicle_model, n_values=2)
        planner = Planner(sc)
        for M in planner.library.calM:
            assert not M[:2].any()


class TestMonteCarlo:
    def test_zero_disturbance_scale_no_violations(self):
        # G = 0 removes every stochastic term; inv handles the zero norms
        model = SystemModel(np.array([[1.0]]), np.array([[1.0]]),
                            np.array([[0.0]]))
        sc = Scenario(
            model=model, horizon=2,
            stay_in=Polytope(np.array([[1.0]]), np.array([5.0])),
            target=Polytope(np.array([[1.0]]), np.array([5.0])),
            input_set=Polytope(np.array([[1.0], [-1.0]]), np.array([3.0, 3.0])),
            xi=0.1, gamma_input=0.01, gamma_terminal=0.01,
            weights=Weights(np.eye(1), None, 1.0),
            gain_grid=GainGridSpec(1, 1.0, 1.0, ("r",), ("r",), seed=0),
            x0=np.array([1.0]), formulation="inv", seed=0)
        report = monte_carlo(sc, runs=5, steps=4)
        assert report.empirical_joint_violation == 0.0
        assert all(not v.any() for v in report.per_step_violations.values())

    def test_report_accounting(self, vehicle_model):
        sc = make_case1_scenario(vehicle_model, n_values=2)
        report = monte_carlo(sc, runs=4, steps=3, base_seed=11,
                             keep_trajectories=2)
        assert report.runs == 4 and report.steps == 3
        assert len(report.trajectories) == 2
        assert report.cost_se >= 0.0
        doc = report.to_json()
        assert {"runs", "perStepViolationCounts", "empiricalJointViolation",
                "costSamples"} <= set(doc)
        for counts in doc["perStepViolationCounts"].values():
            assert all(0 <= c <= 4 for c in counts)

    def test_stay_out_violation_semantics(self, vehicle_model):
        sc = make_reduced_case2(vehicle_model)
        inside = np.array([0.0, -0.2, 0.0, 0.3])     # interior of the region
        on_face = np.array([0.0, -0.05, 0.0, 0.3])   # on its boundary
        record = RunRecord(
            steps=[StepRecord(0, sc.x0, np.zeros(2), 0, np.zeros(1), 0.0),
                   StepRecord(1, inside, np.zeros(2), 0, np.zeros(1), 0.0)],
            states=[sc.x0, inside, on_face])
        flags = violation_flags(sc, record)
        assert flags["stay_out"][0]          # strictly inside counts
        assert not flags["stay_out"][1]      # boundary does not

    def test_substream_reproducibility(self, vehicle_model):
        sc = make_case1_scenario(vehicle_model, n_values=2)
        r1 = monte_carlo(sc, runs=3, steps=3, base_seed=42)
        r2 = monte_carlo(sc, runs=3, steps=3, base_seed=42)
        assert r1.cost_mean == r2.cost_mean
        assert r1.empirical_joint_violation == r2.empirical_joint_violation


class TestPinnedRiskScenario:
    def test_optimizer_pins_gamma_at_budget(self):
        sc = make_pinned_risk_scenario(pin=0.05)
        inst = assemble_ocp(sc, sc.x0)
        sol, _ = solve_bnb(inst.program)
        assert sol.optimal
        gamma = inst.gamma_values(sol.primal)
        assert gamma[0] == pytest.approx(0.05, abs=1e-6)
        assert min(inst.exact_margins(sol.primal)) >= -1e-7
