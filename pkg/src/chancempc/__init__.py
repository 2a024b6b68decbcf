"""Chance-constrained stochastic MPC with online risk allocation and
feedback-gain selection, solved as mixed-integer conic programs."""

from .chance import (ChanceConstraintSpec, DisjunctiveNormData, RiskBudget,
                     compute_rk, deterministic_exact, encode_fixed_risk,
                     encode_inv_formulation, encode_log_formulation,
                     encode_root_formulation, risk_budget_constraint,
                     wrap_big_m)
from .conic_ir import (Cone, ConeMembership, ConicProgram, LinExpr, Solution,
                       SolveStatus, add_quadratic_objective_epigraph,
                       solve_relaxation, validate_program, verify_solution)
from .micp import (BnBConfig, BnBStats, exhaustive_search, solve_bnb)
from .prediction import (FeedbackGain, GainGridSpec, GainLibrary, StackedSystem,
                         SystemModel, build_gain_library, build_stacked,
                         lq_gain, simulate_trajectory,
                         state_to_disturbance_feedback)
from .probit_cones import (ApproxParams, GAMMA_MAX, enforce_bound,
                           enforced_table_params, exact_composition, fit_psi,
                           lambert_w0, probit, psi_eval, table_params)
from .scenario_io import (ScenarioError, builtin_scenario_path, load_scenario,
                          parse_scenario, save_scenario, scenario_to_json)
from .smpc import (MonteCarloReport, OCPInstance, Planner, Polytope, RunRecord,
                   Scenario, Weights, assemble_ocp, expected_cost_terms,
                   monte_carlo, receding_horizon_run)

__version__ = "0.1.0"
