"""Full chance-constrained OCP assembly, receding horizon, Monte Carlo.

Puts the pieces together for the path-planning application: stay-in,
input, and terminal chance constraints (plus optional big-M stay-out
disjunctions), one-hot feedback selection, a shared risk budget, and the
expected quadratic cost.  The receding-horizon loop re-solves the OCP at
every instant and applies the first nominal input, which is deterministic
because every disturbance-feedback block has a zero first block row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sciopt

from . import chance
from .chance import (ChanceConstraintSpec, DisjunctiveNormData, RiskBudget,
                     RISK_FLOOR)
from .conic_ir import (ConicProgram, LinExpr, Solution, SolveStatus,
                       add_quadratic_objective_epigraph, solve_relaxation)
from .micp import BnBConfig, exhaustive_search, solve_bnb
from .prediction import (GainGridSpec, GainLibrary, StackedSystem, SystemModel,
                         build_gain_library, build_stacked)
from .probit_cones import GAMMA_MAX, enforced_table_params, probit


@dataclass(frozen=True)
class Polytope:
    """Conjunction of rows ``P x <= p`` (or the disjunction ``P x >= p``
    for stay-out regions; the interpretation belongs to the caller)."""

    P: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        p = np.asarray(self.p, dtype=float).reshape(-1)
        if P.shape[0] != p.size:
            raise ValueError(f"polytope has {P.shape[0]} rows but {p.size} offsets")
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(p)):
            raise ValueError("polytope entries must be finite")
        if np.any(np.all(P == 0.0, axis=1)):
            raise ValueError("polytope rows must be nonzero")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "p", p)

    @property
    def n_faces(self) -> int:
        return self.P.shape[0]

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(self.P @ x <= self.p + tol))

    def strictly_inside(self, x: np.ndarray) -> bool:
        return bool(np.all(self.P @ x < self.p))


@dataclass(frozen=True)
class Weights:
    """Cost weights: per-step input weight R, optional state weight Q,
    and one risk-allocation weight per constraint family."""

    R: np.ndarray
    Q: np.ndarray | None = None
    s_stay_in: float = 1.0
    s_stay_out: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        if self.Q is not None:
            object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))


@dataclass(frozen=True)
class Scenario:
    """Everything needed to pose and simulate one planning problem."""

    model: SystemModel
    horizon: int
    stay_in: Polytope
    target: Polytope
    input_set: Polytope
    xi: float
    gamma_input: float
    gamma_terminal: float
    weights: Weights
    gain_grid: GainGridSpec
    x0: np.ndarray
    formulation: str = "log"
    seed: int = 0
    stay_out: Polytope | None = None

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.xi <= 0.5):
            raise ValueError(f"xi must lie in (0, 0.5], got {self.xi}")
        for name in ("gamma_input", "gamma_terminal"):
            v = getattr(self, name)
            if not (0.0 < v < 0.5):
                raise ValueError(f"{name} must lie in (0, 0.5), got {v}")
        if self.formulation not in GAMMA_MAX:
            raise ValueError(f"formulation must be one of {sorted(GAMMA_MAX)}")
        if self.x0.size != self.model.n_x:
            raise ValueError(
                f"x0 has {self.x0.size} entries, expected {self.model.n_x}")
        n_risk = self.horizon * (2 if self.stay_out is not None else 1)
        if n_risk * RISK_FLOOR > self.xi:
            raise ValueError("risk floors alone exceed the budget xi")

    @property
    def n_risk_families(self) -> int:
        return 2 if self.stay_out is not None else 1


@dataclass
class AuditRow:
    """Enough of one chance row to recompute its exact margin afterwards."""

    family: str
    step: int
    face: int
    direction: str
    f_expr: LinExpr
    rk: np.ndarray
    gamma: tuple          # ("fixed", value) or ("var", id)
    sigma: int | None = None

    def exact_margin(self, primal: np.ndarray, delta_index: int) -> float:
        """Margin of the exact probit constraint at a solved point.

        Rows whose big-M switch is off are vacuously satisfied and report
        +inf.
        """
        if self.sigma is not None and primal[self.sigma] < 0.5:
            return math.inf
        f_val = self.f_expr.value(primal)
        gamma = self.gamma[1] if self.gamma[0] == "fixed" else float(
            primal[self.gamma[1]])
        _, margin = chance.deterministic_exact(
            self.direction, f_val, float(self.rk[delta_index]), gamma)
        return margin


@dataclass
class CostTerms:
    v_quadratic: np.ndarray
    v_linear: np.ndarray
    delta_linear: np.ndarray
    gamma_linear: np.ndarray
    constant: float


def expected_cost_terms(stacked: StackedSystem, library: GainLibrary,
                        R: np.ndarray, Q: np.ndarray | None = None,
                        S: np.ndarray | None = None,
                        x0: np.ndarray | None = None) -> CostTerms:
    """Closed-form expectation of the quadratic cost under standard
    Gaussian disturbances.

    With E[W] = 0 and E[W W'] = I the V block is quadratic with matrix
    ``calR + calB' calQ calB``, each gain contributes the constant
    ``tr((calG + calB M_k)' calQ (...)) + tr(M_k' calR M_k)``, and the
    risk weights pass through linearly.
    """
    R = np.asarray(R, dtype=float)
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) < -1e-12):
        raise ValueError("R must be positive semidefinite")
    calR = np.kron(np.eye(stacked.N), R)
    n_v = stacked.N * stacked.n_u
    gamma_lin = np.asarray(S, dtype=float) if S is not None else np.zeros(0)

    if Q is None or not np.asarray(Q).any():
        delta_lin = np.asarray(library.feedback_cost, dtype=float)
        return CostTerms(calR, np.zeros(n_v), delta_lin, gamma_lin, 0.0)

    Q = np.asarray(Q, dtype=float)
    if np.any(np.linalg.eigvalsh(0.5 * (Q + Q.T)) < -1e-12):
        raise ValueError("Q must be positive semidefinite")
    if x0 is None:
        raise ValueError("x0 is required when Q is nonzero")
    calQ = np.kron(np.eye(stacked.N + 1), Q)
    ax0 = stacked.calA @ np.asarray(x0, dtype=float).reshape(-1)
    v_quad = calR + stacked.calB.T @ calQ @ stacked.calB
    v_lin = 2.0 * (ax0 @ calQ @ stacked.calB)
    constant = float(ax0 @ calQ @ ax0)
    delta_lin = []
    for k, M in enumerate(library.calM):
        closed = stacked.calG + stacked.calB @ M
        delta_lin.append(float(np.trace(closed.T @ calQ @ closed))
                         + library.feedback_cost[k])
    return CostTerms(v_quad, v_lin, np.asarray(delta_lin), gamma_lin, constant)


@dataclass
class OCPInstance:
    program: ConicProgram
    v_ids: list[int]
    gamma_in_ids: list[int]
    gamma_out_ids: list[int]
    delta_ids: list[int]
    sigma_ids: list[list[int]]
    stacked: StackedSystem
    library: GainLibrary
    audit_rows: list[AuditRow]
    manifest: dict[str, int]

    @property
    def risk_ids(self) -> list[int]:
        return self.gamma_in_ids + self.gamma_out_ids

    def delta_index(self, primal: np.ndarray) -> int:
        return int(np.argmax(primal[self.delta_ids]))

    def gamma_values(self, primal: np.ndarray) -> np.ndarray:
        return primal[self.risk_ids] if self.risk_ids else np.zeros(0)

    def exact_margins(self, primal: np.ndarray) -> list[float]:
        k = self.delta_index(primal)
        return [row.exact_margin(primal, k) for row in self.audit_rows]


class Planner:
    """Precomputes the state-independent structure of one scenario.

    The stacked matrices, gain library, per-row stochastic norms, cost
    pieces, and big-M constants do not depend on the current state, so a
    receding-horizon run builds them once and re-assembles only the
    affine parts at each instant.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.stacked = build_stacked(scenario.model, scenario.horizon)
        self.library = build_gain_library(
            scenario.model, self.stacked, scenario.gain_grid, scenario.weights.R)
        self.params = enforced_table_params(scenario.formulation)
        self.gamma_cap = min(GAMMA_MAX[scenario.formulation], scenario.xi)

        N = scenario.horizon
        st, lib = self.stacked, self.library
        self._rows: dict[str, list] = {"stay_in": [], "stay_out": [],
                                       "input": [], "terminal": []}
        for i in range(1, N + 1):
            blk = st.state_block(i)
            for face in range(scenario.stay_in.n_faces):
                row = scenario.stay_in.P[face]
                self._rows["stay_in"].append(self._state_row(i, face, row,
                                             scenario.stay_in.p[face], blk))
        blkN = st.state_block(N)
        for face in range(scenario.target.n_faces):
            row = scenario.target.P[face]
            self._rows["terminal"].append(self._state_row(N, face, row,
                                          scenario.target.p[face], blkN))
        for i in range(N):
            ublk = st.input_block(i)
            for face in range(scenario.input_set.n_faces):
                row = scenario.input_set.P[face]
                rowU = np.zeros(N * st.n_u)
                rowU[ublk] = row
                rk = np.array([np.linalg.norm(rowU @ M) for M in lib.calM])
                self._rows["input"].append(
                    (i, face, rowU, scenario.input_set.p[face], rk))
        if scenario.stay_out is not None:
            widths = self._stay_in_box_widths()
            q_floor = probit(1.0 - RISK_FLOOR)
            for i in range(1, N + 1):
                blk = st.state_block(i)
                for face in range(scenario.stay_out.n_faces):
                    row = scenario.stay_out.P[face]
                    rowA, rowB, rk, p = self._state_row(
                        i, face, row, scenario.stay_out.p[face], blk)[2:]
                    big_m = self._size_big_m(row, scenario.stay_out.p[face],
                                             rk, widths, q_floor)
                    self._rows["stay_out"].append((i, face, rowA, rowB, rk, p, big_m))
            self._u_box = self._input_box()
            self._q_floor = q_floor

        S = np.concatenate([
            np.full(N, scenario.weights.s_stay_in),
            np.full(N, scenario.weights.s_stay_out)
            if scenario.stay_out is not None else np.zeros(0)])
        self._base_cost = expected_cost_terms(
            st, lib, scenario.weights.R, scenario.weights.Q, S, scenario.x0)

    def _state_row(self, step, face, row, p, blk):
        st = self.stacked
        rowA = row @ st.calA[blk]
        rowB = row @ st.calB[blk]
        g0 = row @ st.calG[blk]
        rk = np.array([np.linalg.norm(g0 + rowB @ M) for M in self.library.calM])
        return (step, face, rowA, rowB, rk, float(p))

    def _stay_in_box_widths(self) -> np.ndarray:
        """Axis-aligned extent of the stay-in polytope (inf if unbounded)."""
        poly = self.scenario.stay_in
        n = poly.P.shape[1]
        widths = np.full(n, math.inf)
        for j in range(n):
            if not poly.P[:, j].any():
                continue
            c = np.zeros(n)
            c[j] = 1.0
            lo = sciopt.linprog(c, A_ub=poly.P, b_ub=poly.p,
                                bounds=[(None, None)] * n, method="highs")
            hi = sciopt.linprog(-c, A_ub=poly.P, b_ub=poly.p,
                                bounds=[(None, None)] * n, method="highs")
            if lo.status == 0 and hi.status == 0:
                widths[j] = float(-hi.fun - lo.fun)
        return widths

    def _size_big_m(self, row, p, rk, widths, q_floor) -> float:
        """M large enough that a switched-off row is implied-satisfied.

        Requirement: M >= sup(||c|| q - f) over nominal states confined to
        the stay-in region; built from the box extent under the row, the
        worst stochastic back-off at the risk floor, and the offset,
        inflated by a 1.2 safety factor.  Falls back to 1e6 when the
        stay-in region does not bound the row's coordinates.
        """
        support = np.abs(row) @ np.where(np.isfinite(widths), widths, 0.0)
        if np.any((row != 0.0) & ~np.isfinite(widths)):
            return 1e6
        m = support + float(np.max(rk)) * q_floor + abs(float(p))
        return 1.2 * max(m, 1.0)

    def _input_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-coordinate bounds of the input polytope (outer box)."""
        poly = self.scenario.input_set
        n = poly.P.shape[1]
        lo = np.full(n, -math.inf)
        hi = np.full(n, math.inf)
        for j in range(n):
            c = np.zeros(n)
            c[j] = 1.0
            res = sciopt.linprog(c, A_ub=poly.P, b_ub=poly.p,
                                 bounds=[(None, None)] * n, method="highs")
            if res.status == 0:
                lo[j] = res.fun
            res = sciopt.linprog(-c, A_ub=poly.P, b_ub=poly.p,
                                 bounds=[(None, None)] * n, method="highs")
            if res.status == 0:
                hi[j] = -res.fun
        return lo, hi

    def _reach_boxes(self, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Interval outer bounds of the nominal states x_1..x_N from x.

        Signed interval propagation of ``x+ = A x + B u`` with u confined
        to the input box; an outer bound because the input chance rows only
        shrink the admissible inputs further.
        """
        A, B = self.scenario.model.A, self.scenario.model.B
        Ap, Am = np.maximum(A, 0.0), np.minimum(A, 0.0)
        Bp, Bm = np.maximum(B, 0.0), np.minimum(B, 0.0)
        ulo, uhi = self._u_box
        lo = hi = x.astype(float)
        boxes = []
        for _ in range(self.scenario.horizon):
            lo, hi = (Ap @ lo + Am @ hi + Bp @ ulo + Bm @ uhi,
                      Ap @ hi + Am @ lo + Bp @ uhi + Bm @ ulo)
            boxes.append((lo, hi))
        return boxes

    def _presolve_stay_out(self, x: np.ndarray) -> dict[tuple[int, int], object]:
        """Exact per-instant fixing of avoidance indicators by reachability.

        For each step: a face whose halfspace holds across the whole
        reachable box even under the worst back-off is dominant (enforcing
        it excludes no feasible point), so its sigma is fixed to 1; a face
        whose halfspace cannot be reached at all is fixed to 0.  Contested
        faces keep free binaries with a reach-tightened big-M.  Returns
        {(step, face): 1 | 0 | tightened_M}.
        """
        sc = self.scenario
        out: dict[tuple[int, int], object] = {}
        boxes = self._reach_boxes(x)
        by_step: dict[int, list] = {}
        for (i, face, _rowA, _rowB, rk, p, big_m) in self._rows["stay_out"]:
            by_step.setdefault(i, []).append((face, rk, p, big_m))
        for i, faces in by_step.items():
            lo, hi = boxes[i - 1]
            margins = []
            for (face, rk, p, big_m) in faces:
                row = sc.stay_out.P[face]
                rp, rm = np.maximum(row, 0.0), np.minimum(row, 0.0)
                row_min = float(rp @ lo + rm @ hi)
                row_max = float(rp @ hi + rm @ lo)
                backoff = float(np.max(rk)) * self._q_floor
                margins.append({"face": face, "p": p, "big_m": big_m,
                                "worst_margin": row_min - backoff - p,
                                "reach": row_max - p, "row_min": row_min,
                                "backoff": backoff})
            free = [m for m in margins if m["worst_margin"] >= 0.0]
            if free:
                best = max(free, key=lambda m: m["worst_margin"])["face"]
                for m in margins:
                    out[(i, m["face"])] = 1 if m["face"] == best else 0
                continue
            for m in margins:
                if m["reach"] < 0.0:
                    out[(i, m["face"])] = 0   # unreachable, cannot be active
                else:
                    tight = 1.2 * max(1.0, m["p"] - m["row_min"] + m["backoff"])
                    out[(i, m["face"])] = min(m["big_m"], tight)
        return out

    # ------------------------------------------------------------------

    def assemble(self, x: np.ndarray) -> OCPInstance:
        sc = self.scenario
        st = self.stacked
        N, n_u = sc.horizon, st.n_u
        x = np.asarray(x, dtype=float).reshape(-1)
        prog = ConicProgram()

        v_ids = prog.add_vars(N * n_u, "v")
        gamma_in = [chance.add_risk_variable(prog, self.gamma_cap, f"gamma_in{i}")
                    for i in range(1, N + 1)]
        gamma_out: list[int] = []
        sigma_ids: list[list[int]] = []
        if sc.stay_out is not None:
            gamma_out = [chance.add_risk_variable(prog, self.gamma_cap,
                                                  f"gamma_out{i}")
                         for i in range(1, N + 1)]
        delta_ids = prog.add_vars(len(self.library), "delta", binary=True)
        prog.declare_onehot(delta_ids, label="delta_onehot")
        presolve: dict[tuple[int, int], object] = {}
        if sc.stay_out is not None:
            presolve = self._presolve_stay_out(x)
            for i in range(1, N + 1):
                group = []
                for face in range(sc.stay_out.n_faces):
                    decided = presolve.get((i, face))
                    if decided in (0, 1):
                        group.append(prog.add_var(f"sigma{i}_{face}", lb=decided,
                                                  ub=decided, binary=True))
                    else:
                        group.append(prog.add_var(f"sigma{i}_{face}", binary=True))
                prog.declare_onehot(group, label=f"sigma{i}_onehot")
                sigma_ids.append(group)

        audit: list[AuditRow] = []
        manifest = {"stay_in": 0, "stay_out": 0, "input": 0, "terminal": 0,
                    "budget": 0, "onehot": 1 + len(sigma_ids)}

        def f_state(rowA, rowB, p):
            expr = LinExpr(None, float(rowA @ x - p))
            for vid, coef in zip(v_ids, rowB):
                expr.add_term(vid, float(coef))
            return expr

        psi_cache: dict[int, int] = {}

        def encode_var_risk(spec, data, f_expr, gamma_var, label):
            psi = psi_cache.get(gamma_var)
            psi_cache[gamma_var] = chance.encode_variable_risk(
                prog, sc.formulation, spec, data, f_expr, delta_ids,
                gamma_var, self.params, psi_var=psi, label=label)

        for (i, face, rowA, rowB, rk, p) in self._rows["stay_in"]:
            f_expr = f_state(rowA, rowB, p)
            spec = ChanceConstraintSpec(rowB, p, chance.UPPER_TAIL,
                                        ("variable", gamma_in[i - 1]))
            data = DisjunctiveNormData(np.zeros(0), [], rk)
            encode_var_risk(spec, data, f_expr, gamma_in[i - 1],
                            f"stay_in[{i},{face}]")
            audit.append(AuditRow("stay_in", i, face, chance.UPPER_TAIL,
                                  f_expr, rk, ("var", gamma_in[i - 1])))
            manifest["stay_in"] += 1

        for (i, face, rowA, rowB, rk, p) in self._rows["terminal"]:
            f_expr = f_state(rowA, rowB, p)
            spec = ChanceConstraintSpec(rowB, p, chance.UPPER_TAIL,
                                        ("fixed", sc.gamma_terminal))
            data = DisjunctiveNormData(np.zeros(0), [], rk)
            chance.encode_fixed_risk(prog, spec, data, f_expr, delta_ids,
                                     label=f"terminal[{face}]")
            audit.append(AuditRow("terminal", i, face, chance.UPPER_TAIL,
                                  f_expr, rk, ("fixed", sc.gamma_terminal)))
            manifest["terminal"] += 1

        for (i, face, rowU, p, rk) in self._rows["input"]:
            f_expr = LinExpr(None, -float(p))
            for vid, coef in zip(v_ids, rowU):
                f_expr.add_term(vid, float(coef))
            spec = ChanceConstraintSpec(rowU, p, chance.UPPER_TAIL,
                                        ("fixed", sc.gamma_input))
            data = DisjunctiveNormData(np.zeros(0), [], rk)
            chance.encode_fixed_risk(prog, spec, data, f_expr, delta_ids,
                                     label=f"input[{i},{face}]")
            audit.append(AuditRow("input", i, face, chance.UPPER_TAIL,
                                  f_expr, rk, ("fixed", sc.gamma_input)))
            manifest["input"] += 1

        for (i, face, rowA, rowB, rk, p, big_m) in self._rows["stay_out"]:
            f_expr = f_state(rowA, rowB, p)
            sigma = sigma_ids[i - 1][face]
            decided = presolve.get((i, face))
            if isinstance(decided, float):
                big_m = decided
            audit.append(AuditRow("stay_out", i, face, chance.LOWER_TAIL,
                                  f_expr, rk, ("var", gamma_out[i - 1]), sigma))
            manifest["stay_out"] += 1
            if decided == 0:
                continue   # switched off and vacuous by the big-M sizing
            spec = ChanceConstraintSpec(rowB, p, chance.LOWER_TAIL,
                                        ("variable", gamma_out[i - 1]),
                                        big_m=(big_m, sigma))
            data = DisjunctiveNormData(np.zeros(0), [], rk)
            encode_var_risk(spec, data, f_expr, gamma_out[i - 1],
                            f"stay_out[{i},{face}]")

        budget = RiskBudget(sc.xi, gamma_in + gamma_out)
        chance.risk_budget_constraint(prog, budget)
        manifest["budget"] = 1

        # objective ----------------------------------------------------
        cost = expected_cost_terms(
            st, self.library, sc.weights.R, sc.weights.Q,
            self._base_cost.gamma_linear, x) if sc.weights.Q is not None \
            else self._base_cost
        add_quadratic_objective_epigraph(prog, cost.v_quadratic, v_ids)
        for vid, coef in zip(v_ids, cost.v_linear):
            if coef:
                prog.add_objective_term(vid, float(coef))
        for did, coef in zip(delta_ids, cost.delta_linear):
            prog.add_objective_term(did, float(coef))
        for gid, coef in zip(gamma_in + gamma_out, cost.gamma_linear):
            prog.add_objective_term(gid, float(coef))
        prog.obj_constant += cost.constant

        return OCPInstance(prog, v_ids, gamma_in, gamma_out, delta_ids,
                           sigma_ids, st, self.library, audit, manifest)


def assemble_ocp(scenario: Scenario, state: np.ndarray) -> OCPInstance:
    """One-shot assembly (builds a fresh Planner; loops should hold one)."""
    return Planner(scenario).assemble(state)


# ----------------------------------------------------------------------
# receding horizon and Monte Carlo
# ----------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    x: np.ndarray
    u: np.ndarray
    delta_index: int
    gamma: np.ndarray
    objective: float
    nodes: int = 0


@dataclass
class RunRecord:
    steps: list[StepRecord]
    states: list[np.ndarray]          # x_0 .. x_K (one longer than steps)
    infeasible_at: int | None = None

    @property
    def completed(self) -> bool:
        return self.infeasible_at is None

    def path_length(self) -> float:
        """Sum of realized state displacements (Euclidean, full state)."""
        return float(sum(np.linalg.norm(b - a)
                         for a, b in zip(self.states, self.states[1:])))


def _remap_hint(hint: dict[int, int] | None,
                inst: OCPInstance) -> dict[int, int] | None:
    """Project a previous binary assignment onto a fresh instance's bounds.

    Presolve fixings shift between instants; a one-hot choice that is no
    longer admissible moves to the group's forced member (if fixed) or to
    any still-free member, keeping the hint bound-consistent.
    """
    if hint is None:
        return None
    prog = inst.program
    out = dict(hint)
    groups = [inst.delta_ids] + inst.sigma_ids
    for group in groups:
        chosen = [v for v in group if hint.get(v) == 1]
        forced = [v for v in group if prog.lb[v] == prog.ub[v] == 1.0]
        banned = {v for v in group if prog.ub[v] == 0.0}
        pick = forced[0] if forced else None
        if pick is None and chosen and chosen[0] not in banned:
            pick = chosen[0]
        if pick is None:
            free = [v for v in group if v not in banned]
            if not free:
                return None
            pick = free[0]
        for v in group:
            out[v] = 1 if v == pick else 0
    return out


def receding_horizon_run(scenario: Scenario, steps: int,
                         solver_mode: str = "bnb",
                         w_generator: np.random.RandomState | None = None,
                         planner: Planner | None = None,
                         bnb_config: BnBConfig | None = None) -> RunRecord:
    """Closed-loop run: assemble, solve, apply the first nominal input,
    propagate with a drawn disturbance, repeat.

    An infeasible instant terminates the run with a structured record
    (recovery is out of scope).  The previous instant's binary assignment
    seeds the next branch-and-bound as an incumbent hint.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if solver_mode not in ("bnb", "exhaustive"):
        raise ValueError(f"solver_mode must be 'bnb' or 'exhaustive', got {solver_mode}")
    planner = planner or Planner(scenario)
    rng = w_generator or np.random.RandomState(scenario.seed)
    config = bnb_config or BnBConfig()
    model = scenario.model

    x = scenario.x0.copy()
    records: list[StepRecord] = []
    states = [x.copy()]
    hint: dict[int, int] | None = None
    for step in range(steps):
        inst = planner.assemble(x)
        if solver_mode == "bnb":
            sol, stats = solve_bnb(inst.program, config,
                                   incumbent_hint=_remap_hint(hint, inst))
            nodes = stats.nodes_explored
        else:
            sol, es_stats = exhaustive_search(inst.program)
            nodes = es_stats.solves
        if sol.status is not SolveStatus.OPTIMAL:
            return RunRecord(records, states, infeasible_at=step)
        u = sol.primal[inst.v_ids[:model.n_u]].copy()
        hint = {vid: int(round(sol.primal[vid]))
                for vid in inst.program.binary_marks}
        records.append(StepRecord(step, x.copy(), u, inst.delta_index(sol.primal),
                                  inst.gamma_values(sol.primal),
                                  sol.objective_value, nodes))
        w = rng.standard_normal(model.n_w)
        x = model.A @ x + model.B @ u + model.G @ w
        states.append(x.copy())
    return RunRecord(records, states)


@dataclass
class MonteCarloReport:
    runs: int
    steps: int
    per_step_violations: dict[str, np.ndarray]
    per_family_joint: dict[str, float]
    empirical_joint_violation: float
    cost_mean: float
    cost_se: float
    infeasible_runs: int = 0
    trajectories: list[np.ndarray] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "runs": self.runs,
            "steps": self.steps,
            "perStepViolationCounts": {k: v.tolist()
                                       for k, v in self.per_step_violations.items()},
            "perFamilyJointViolation": dict(self.per_family_joint),
            "empiricalJointViolation": self.empirical_joint_violation,
            "costSamples": {"mean": self.cost_mean, "standardError": self.cost_se},
            "infeasibleRuns": self.infeasible_runs,
        }


def violation_flags(scenario: Scenario, record: RunRecord) -> dict[str, np.ndarray]:
    """Per-step hard-constraint breaches of one realized run.

    Stay-in counts a state with any face row above its offset; stay-out
    counts a state strictly inside the avoid region (every face interior);
    inputs count any box face breached.
    """
    steps = len(record.steps)
    flags = {
        "stay_in": np.zeros(steps, dtype=bool),
        "input": np.zeros(steps, dtype=bool),
    }
    if scenario.stay_out is not None:
        flags["stay_out"] = np.zeros(steps, dtype=bool)
    for t in range(steps):
        x_next = record.states[t + 1]
        flags["stay_in"][t] = not scenario.stay_in.contains(x_next)
        if scenario.stay_out is not None:
            flags["stay_out"][t] = scenario.stay_out.strictly_inside(x_next)
        u = record.steps[t].u
        flags["input"][t] = bool(np.any(scenario.input_set.P @ u
                                        > scenario.input_set.p))
    return flags


def monte_carlo(scenario: Scenario, runs: int, solver_mode: str = "bnb",
                steps: int | None = None, base_seed: int | None = None,
                keep_trajectories: int = 0,
                bnb_config: BnBConfig | None = None) -> MonteCarloReport:
    """Independent closed-loop runs with per-run substream seeds.

    Run ``i`` draws its disturbances from a Mersenne-Twister stream seeded
    ``base_seed + i``.  The cost sample of a run is the realized input
    cost ``sum_t u_t' R u_t``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    steps = steps or scenario.horizon
    base_seed = scenario.seed if base_seed is None else base_seed
    planner = Planner(scenario)
    families = ["stay_in", "input"] + (
        ["stay_out"] if scenario.stay_out is not None else [])
    per_step = {f: np.zeros(steps) for f in families}
    joint = {f: 0 for f in families}
    joint_state = 0
    costs = np.zeros(runs)
    infeasible = 0
    kept: list[np.ndarray] = []
    R = scenario.weights.R

    for i in range(runs):
        rng = np.random.RandomState(base_seed + i)
        record = receding_horizon_run(scenario, steps, solver_mode,
                                      w_generator=rng, planner=planner,
                                      bnb_config=bnb_config)
        if not record.completed:
            infeasible += 1
        flags = violation_flags(scenario, record)
        state_hit = False
        for fam in families:
            arr = flags[fam]
            per_step[fam][:arr.size] += arr
            if arr.any():
                joint[fam] += 1
                if fam != "input":
                    state_hit = True
        joint_state += state_hit
        costs[i] = sum(float(s.u @ R @ s.u) for s in record.steps)
        if len(kept) < keep_trajectories:
            kept.append(np.array(record.states))

    return MonteCarloReport(
        runs=runs,
        steps=steps,
        per_step_violations=per_step,
        per_family_joint={f: joint[f] / runs for f in families},
        empirical_joint_violation=joint_state / runs,
        cost_mean=float(costs.mean()),
        cost_se=float(costs.std(ddof=1) / math.sqrt(runs)) if runs > 1 else 0.0,
        infeasible_runs=infeasible,
        trajectories=kept,
    )
