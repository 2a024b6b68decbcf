"""Mixed-integer conic program IR and the continuous-relaxation solver.

A :class:`ConicProgram` is a bag of scalar variables (some marked binary),
a linear objective, and a list of cone memberships whose rows are affine
expressions over the variables.  The continuous relaxation (binary marks
ignored, bounds kept) is solved with Clarabel, a homogeneous self-dual
interior-point solver that natively supports the nonsymmetric exponential
and power cones.  Rotated second-order cones are lowered to plain
second-order cones before the solve.

Every Optimal solution is re-audited against the memberships before being
returned; a residual above the feasibility contract downgrades the status
to NumericalFailure rather than returning a silently wrong answer.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

try:
    import clarabel
except ImportError as exc:  # pragma: no cover
    raise ImportError("chancempc requires the 'clarabel' solver package") from exc

FEASIBILITY_TOL = 1e-7

_SQRT2 = math.sqrt(2.0)


class Cone(enum.Enum):
    """Cone families accepted by the IR."""

    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"
    RSOC = "rsoc"
    EXP = "exp"
    POW = "pow"


class LinExpr:
    """Sparse affine expression ``sum_i coeff_i * x_i + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict[int, float] | None = None, const: float = 0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def variable(var_id: int, coeff: float = 1.0) -> "LinExpr":
        return LinExpr({var_id: float(coeff)})

    @staticmethod
    def constant(value: float) -> "LinExpr":
        return LinExpr(None, value)

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def add_term(self, var_id: int, coeff: float) -> "LinExpr":
        if coeff != 0.0:
            self.terms[var_id] = self.terms.get(var_id, 0.0) + float(coeff)
        return self

    def __add__(self, other: "LinExpr | float") -> "LinExpr":
        out = self.copy()
        if isinstance(other, LinExpr):
            for vid, c in other.terms.items():
                out.add_term(vid, c)
            out.const += other.const
        else:
            out.const += float(other)
        return out

    __radd__ = __add__

    def __neg__(self) -> "LinExpr":
        return LinExpr({v: -c for v, c in self.terms.items()}, -self.const)

    def __sub__(self, other: "LinExpr | float") -> "LinExpr":
        return self + (-other if isinstance(other, LinExpr) else -float(other))

    def __rsub__(self, other: float) -> "LinExpr":
        return (-self) + float(other)

    def __mul__(self, scalar: float) -> "LinExpr":
        s = float(scalar)
        return LinExpr({v: c * s for v, c in self.terms.items()}, self.const * s)

    __rmul__ = __mul__

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[v] for v, c in self.terms.items())

    def __repr__(self) -> str:
        body = " + ".join(f"{c!r}*x{v}" for v, c in sorted(self.terms.items()))
        return f"LinExpr({body or '0'} + {self.const!r})"


@dataclass
class ConeMembership:
    """Affine rows constrained to lie in one cone instance.

    ZERO/NONNEG accept any number of rows (applied row-wise).  SOC rows are
    ``[t, x...]`` with ``t >= ||x||``; RSOC rows are ``[z, y, t...]`` with
    ``2 z y >= ||t||^2`` and ``z, y >= 0``.  EXP rows ``[z, y, t]`` encode
    ``z >= y e^{t/y}`` (closure), POW rows ``[z, y, t]`` encode
    ``z^eta y^(1-eta) >= |t|`` and are exactly 3-dimensional.
    """

    kind: Cone
    rows: list[LinExpr]
    exponent: float | None = None
    label: str = ""


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class Solution:
    status: SolveStatus
    primal: np.ndarray
    objective_value: float
    iterations: int = 0
    solve_time: float = 0.0
    max_residual: float = 0.0
    diagnostic: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


class ConicProgram:
    """Builder for a mixed-integer conic program.

    Mutable while assembling; freeze() (called implicitly by the solver)
    compiles the structural matrices once so branch-and-bound can re-solve
    under per-node bound overrides without rebuilding.
    """

    def __init__(self):
        self.num_vars = 0
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.binary_marks: set[int] = set()
        self.memberships: list[ConeMembership] = []
        self.onehot_groups: list[list[int]] = []
        self.obj_coeffs: dict[int, float] = {}
        self.obj_constant = 0.0
        self._compiled = None

    # ------------------------------------------------------------------
    # assembly
    # ------------------------------------------------------------------

    def add_var(
        self,
        name: str = "",
        lb: float = -math.inf,
        ub: float = math.inf,
        binary: bool = False,
    ) -> int:
        if binary:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise ValueError(f"variable {name or self.num_vars}: lb {lb} > ub {ub}")
        vid = self.num_vars
        self.num_vars += 1
        self.names.append(name or f"x{vid}")
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        if binary:
            self.binary_marks.add(vid)
        self._compiled = None
        return vid

    def add_vars(self, count: int, prefix: str, **kw) -> list[int]:
        return [self.add_var(f"{prefix}{i}", **kw) for i in range(count)]

    def add_membership(
        self,
        kind: Cone,
        rows: list[LinExpr],
        exponent: float | None = None,
        label: str = "",
    ) -> int:
        if kind is Cone.POW:
            if exponent is None or not (0.0 < exponent < 1.0):
                raise ValueError(f"power cone exponent must lie in (0,1), got {exponent}")
        if kind in (Cone.EXP, Cone.POW) and len(rows) != 3:
            raise ValueError(f"{kind.value} membership must have exactly 3 rows")
        self.memberships.append(ConeMembership(kind, rows, exponent, label))
        self._compiled = None
        return len(self.memberships) - 1

    def add_zero(self, expr: LinExpr, label: str = "") -> int:
        return self.add_membership(Cone.ZERO, [expr], label=label)

    def add_nonneg(self, expr: LinExpr, label: str = "") -> int:
        return self.add_membership(Cone.NONNEG, [expr], label=label)

    def declare_onehot(self, var_ids: list[int], label: str = "") -> None:
        """Record a one-hot binary group and add its sum-to-one row."""
        group = list(var_ids)
        expr = LinExpr({v: 1.0 for v in group}, -1.0)
        self.add_zero(expr, label=label or "onehot")
        self.onehot_groups.append(group)

    def add_objective_term(self, var_id: int, coeff: float) -> None:
        self.obj_coeffs[var_id] = self.obj_coeffs.get(var_id, 0.0) + float(coeff)
        self._compiled = None

    def add_objective_expr(self, expr: LinExpr) -> None:
        for vid, c in expr.terms.items():
            self.add_objective_term(vid, c)
        self.obj_constant += expr.const

    def objective_value(self, x: np.ndarray) -> float:
        return self.obj_constant + sum(c * x[v] for v, c in self.obj_coeffs.items())

    # ------------------------------------------------------------------
    # diagnostics / serialization
    # ------------------------------------------------------------------

    def validate(self) -> list[str]:
        """Structural diagnostics; an empty list means well-formed."""
        return validate_program(self)

    def to_text(self) -> str:
        """Line-oriented dump with shortest round-trip float formatting."""
        lines = [f"VARS {self.num_vars}"]
        for i in range(self.num_vars):
            mark = " BIN" if i in self.binary_marks else ""
            lines.append(f"V {i} {self.names[i]} {self.lb[i]!r} {self.ub[i]!r}{mark}")
        lines.append(f"OBJ {self.obj_constant!r} " + " ".join(
            f"{v}:{self.obj_coeffs[v]!r}" for v in sorted(self.obj_coeffs)))
        for group in self.onehot_groups:
            lines.append("ONEHOT " + " ".join(str(v) for v in group))
        for m in self.memberships:
            head = f"CONE {m.kind.value}"
            if m.exponent is not None:
                head += f":{m.exponent!r}"
            lines.append(head)
            for row in m.rows:
                lines.append("ROW " + f"{row.const!r} " + " ".join(
                    f"{v}:{row.terms[v]!r}" for v in sorted(row.terms)))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ConicProgram":
        prog = ConicProgram()
        current: ConeMembership | None = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            tag, _, rest = line.partition(" ")
            if tag == "VARS":
                continue
            if tag == "V":
                parts = rest.split(" ")
                _, name, lo, hi = parts[0], parts[1], parts[2], parts[3]
                binary = len(parts) > 4 and parts[4] == "BIN"
                prog.add_var(name, float(lo), float(hi), binary=binary)
            elif tag == "OBJ":
                parts = rest.split(" ")
                prog.obj_constant = float(parts[0])
                for item in parts[1:]:
                    if item:
                        v, c = item.split(":")
                        prog.obj_coeffs[int(v)] = float(c)
            elif tag == "ONEHOT":
                prog.onehot_groups.append([int(v) for v in rest.split(" ")])
            elif tag == "CONE":
                kind_s, _, expo = rest.partition(":")
                current = ConeMembership(Cone(kind_s), [], float(expo) if expo else None)
                prog.memberships.append(current)
            elif tag == "ROW":
                parts = rest.split(" ")
                expr = LinExpr(None, float(parts[0]))
                for item in parts[1:]:
                    if item:
                        v, c = item.split(":")
                        expr.add_term(int(v), float(c))
                current.rows.append(expr)
        prog._compiled = None
        return prog

    # ------------------------------------------------------------------
    # compilation
    # ------------------------------------------------------------------

    def freeze(self) -> "_Compiled":
        if self._compiled is None:
            self._compiled = _compile(self)
        return self._compiled


def validate_program(program: ConicProgram) -> list[str]:
    """Flag dangling ids, wrong cone arities, bad binary bounds, and
    declared one-hot groups lacking their sum-to-one row."""
    issues: list[str] = []
    n = program.num_vars
    for mi, m in enumerate(program.memberships):
        for row in m.rows:
            for vid in row.terms:
                if not (0 <= vid < n):
                    issues.append(f"membership {mi}: dangling variable id {vid}")
        if m.kind in (Cone.EXP, Cone.POW) and len(m.rows) != 3:
            issues.append(f"membership {mi}: {m.kind.value} cone must have 3 rows, has {len(m.rows)}")
        if m.kind is Cone.SOC and len(m.rows) < 2:
            issues.append(f"membership {mi}: second-order cone needs >= 2 rows")
        if m.kind is Cone.RSOC and len(m.rows) < 3:
            issues.append(f"membership {mi}: rotated cone needs >= 3 rows")
        if m.kind is Cone.POW and not (0.0 < (m.exponent or 0.0) < 1.0):
            issues.append(f"membership {mi}: power exponent {m.exponent} outside (0,1)")
    for vid in program.obj_coeffs:
        if not (0 <= vid < n):
            issues.append(f"objective: dangling variable id {vid}")
    for vid in program.binary_marks:
        if program.lb[vid] < 0.0 or program.ub[vid] > 1.0:
            issues.append(f"binary variable {vid} has bounds outside [0,1]")
    for gi, group in enumerate(program.onehot_groups):
        if not _has_sum_to_one_row(program, group):
            issues.append(f"one-hot group {gi} missing its sum-to-one convexity row")
        for vid in group:
            if vid not in program.binary_marks:
                issues.append(f"one-hot group {gi}: variable {vid} not marked binary")
    return issues


def _has_sum_to_one_row(program: ConicProgram, group: list[int]) -> bool:
    want = set(group)
    for m in program.memberships:
        if m.kind is not Cone.ZERO:
            continue
        for row in m.rows:
            if set(row.terms) == want and all(
                abs(c - 1.0) < 1e-12 for c in row.terms.values()
            ) and abs(row.const + 1.0) < 1e-12:
                return True
    return False


# ----------------------------------------------------------------------
# quadratic objective epigraph
# ----------------------------------------------------------------------


def add_quadratic_objective_epigraph(
    program: ConicProgram, qmatrix: np.ndarray, var_ids: list[int]
) -> int | None:
    """Add ``v^T Q v`` to the objective through a rotated-cone epigraph.

    Introduces ``s`` with ``||Q_half v||^2 <= 2 s`` and puts ``2 s`` in the
    objective, so at the optimum the contribution equals ``v^T Q v``.
    Returns the epigraph variable id, or None when Q is zero.
    """
    Q = np.asarray(qmatrix, dtype=float)
    if Q.shape != (len(var_ids), len(var_ids)):
        raise ValueError(f"Q shape {Q.shape} does not match {len(var_ids)} variables")
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise ValueError("Q must be symmetric")
    if not Q.any():
        return None
    vals, vecs = np.linalg.eigh(Q)
    scale = max(abs(vals[0]), abs(vals[-1]))
    if vals[0] < -1e-9 * scale:
        raise ValueError(f"Q is indefinite (min eigenvalue {vals[0]:.3e})")
    keep = vals > 1e-14 * scale
    half = (np.sqrt(vals[keep])[:, None] * vecs[:, keep].T)  # half^T half = Q
    s = program.add_var("quad_epi", lb=0.0)
    rows = [LinExpr.variable(s), LinExpr.constant(1.0)]
    for r in range(half.shape[0]):
        expr = LinExpr()
        for c, vid in enumerate(var_ids):
            expr.add_term(vid, half[r, c])
        rows.append(expr)
    program.add_membership(Cone.RSOC, rows, label="quad_objective")
    program.add_objective_term(s, 2.0)
    return s


# ----------------------------------------------------------------------
# Clarabel backend
# ----------------------------------------------------------------------


@dataclass
class _Compiled:
    """Structural (bounds-independent) Clarabel data, built once."""

    A_struct: sparse.csc_matrix
    b_struct: np.ndarray
    cones_struct: list
    q: np.ndarray
    n: int


def _rows_to_triplets(rows, row_offset, data, rills, cols, b, negate=False, scale=None):
    for k, expr in enumerate(rows):
        s = 1.0 if scale is None else scale[k]
        b.append(expr.const * s)
        for vid, c in expr.terms.items():
            data.append(-c * s)
            rills.append(row_offset + k)
            cols.append(vid)
    return row_offset + len(rows)


def _compile(program: ConicProgram) -> _Compiled:
    n = program.num_vars
    data: list[float] = []
    rows_i: list[int] = []
    cols_i: list[int] = []
    b: list[float] = []
    cones: list = []
    offset = 0

    # canonical ordering: Zero rows, Nonnegative rows, then nonlinear blocks
    zero_rows = [r for m in program.memberships if m.kind is Cone.ZERO for r in m.rows]
    nonneg_rows = [r for m in program.memberships if m.kind is Cone.NONNEG for r in m.rows]
    if zero_rows:
        offset = _rows_to_triplets(zero_rows, offset, data, rows_i, cols_i, b)
        cones.append(clarabel.ZeroConeT(len(zero_rows)))
    if nonneg_rows:
        offset = _rows_to_triplets(nonneg_rows, offset, data, rows_i, cols_i, b)
        cones.append(clarabel.NonnegativeConeT(len(nonneg_rows)))

    for m in program.memberships:
        if m.kind is Cone.SOC:
            offset = _rows_to_triplets(m.rows, offset, data, rows_i, cols_i, b)
            cones.append(clarabel.SecondOrderConeT(len(m.rows)))
        elif m.kind is Cone.RSOC:
            # (z, y, t...) with 2zy >= ||t||^2  ->  SOC rows (z+y, z-y, sqrt2*t...)
            z, y = m.rows[0], m.rows[1]
            soc_rows = [z + y, z - y] + [t * _SQRT2 for t in m.rows[2:]]
            offset = _rows_to_triplets(soc_rows, offset, data, rows_i, cols_i, b)
            cones.append(clarabel.SecondOrderConeT(len(soc_rows)))
        elif m.kind is Cone.EXP:
            # spec rows (z, y, t): z >= y e^{t/y}; Clarabel slot order (t, y, z)
            z, y, t = m.rows
            offset = _rows_to_triplets([t, y, z], offset, data, rows_i, cols_i, b)
            cones.append(clarabel.ExponentialConeT())
        elif m.kind is Cone.POW:
            offset = _rows_to_triplets(m.rows, offset, data, rows_i, cols_i, b)
            cones.append(clarabel.PowerConeT(m.exponent))

    A = sparse.csc_matrix(
        (data, (rows_i, cols_i)), shape=(offset, n)
    )
    q = np.zeros(n)
    for vid, c in program.obj_coeffs.items():
        q[vid] = c
    return _Compiled(A, np.asarray(b, dtype=float), cones, q, n)


def _bound_rows(program, overrides):
    """Nonnegative/zero rows for finite variable bounds (identity sparsity)."""
    lo = np.asarray(program.lb, dtype=float)
    hi = np.asarray(program.ub, dtype=float)
    if overrides:
        for vid, (l, u) in overrides.items():
            lo[vid], hi[vid] = max(lo[vid], l), min(hi[vid], u)
    eq_idx = np.flatnonzero(lo == hi)
    lo_idx = np.flatnonzero(np.isfinite(lo) & (lo != hi))
    hi_idx = np.flatnonzero(np.isfinite(hi) & (lo != hi))
    if np.any(lo > hi):
        return None, None, None, None  # infeasible box

    n = program.num_vars
    blocks, bs, cones = [], [], []
    if eq_idx.size:
        # cone slot v - x = 0  (A x + s = b with A row = e_i, b = v)
        blocks.append(sparse.csc_matrix(
            (np.ones(eq_idx.size), (np.arange(eq_idx.size), eq_idx)),
            shape=(eq_idx.size, n)))
        bs.append(lo[eq_idx])
        cones.append(clarabel.ZeroConeT(int(eq_idx.size)))
    rows = []
    vals = []
    rhs = []
    r = 0
    for i in lo_idx:  # x - lo >= 0
        rows.append((r, i, -1.0))
        rhs.append(-lo[i])
        r += 1
    for i in hi_idx:  # hi - x >= 0
        rows.append((r, i, 1.0))
        rhs.append(hi[i])
        r += 1
    if r:
        ri, ci, dv = zip(*[(a, bq, cq) for a, bq, cq in rows])
        blocks.append(sparse.csc_matrix((dv, (ri, ci)), shape=(r, n)))
        bs.append(np.asarray(rhs))
        cones.append(clarabel.NonnegativeConeT(r))
    if not blocks:
        return sparse.csc_matrix((0, n)), np.zeros(0), [], (lo, hi)
    return sparse.vstack(blocks, format="csc"), np.concatenate(bs), cones, (lo, hi)


def solve_relaxation(
    program: ConicProgram,
    bound_overrides: dict[int, tuple[float, float]] | None = None,
    max_iter: int = 200,
) -> Solution:
    """Solve the continuous relaxation (binary marks relaxed to bounds).

    Deterministic for identical inputs.  Optimal solutions are re-checked
    against every membership; residuals above ``FEASIBILITY_TOL`` downgrade
    the status to NumericalFailure with a diagnostic.
    """
    comp = program.freeze()
    t0 = time.perf_counter()
    Ab, bb, cones_b, box = _bound_rows(program, bound_overrides)
    if Ab is None:
        return Solution(SolveStatus.INFEASIBLE, np.zeros(comp.n), math.inf,
                        diagnostic="empty bound box")
    A = sparse.vstack([comp.A_struct, Ab], format="csc") if bb.size else comp.A_struct
    b = np.concatenate([comp.b_struct, bb]) if bb.size else comp.b_struct
    cones = comp.cones_struct + cones_b

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = 1e-9
    settings.tol_gap_rel = 1e-9
    settings.tol_feas = 1e-9
    P = sparse.csc_matrix((comp.n, comp.n))
    solver = clarabel.DefaultSolver(P, comp.q, A, b, cones, settings)
    raw = solver.solve()
    wall = time.perf_counter() - t0

    status_name = str(raw.status)
    x = np.asarray(raw.x, dtype=float)
    if raw.status in (clarabel.SolverStatus.Solved, clarabel.SolverStatus.AlmostSolved):
        obj = program.objective_value(x)
        resid = max(residual_report(program, x, box))
        if resid > FEASIBILITY_TOL:
            return Solution(SolveStatus.NUMERICAL_FAILURE, x, obj, raw.iterations,
                            wall, resid,
                            f"membership residual {resid:.2e} exceeds {FEASIBILITY_TOL}")
        return Solution(SolveStatus.OPTIMAL, x, obj, raw.iterations, wall, resid)
    if raw.status == clarabel.SolverStatus.PrimalInfeasible:
        return Solution(SolveStatus.INFEASIBLE, x, math.inf, raw.iterations, wall)
    if raw.status == clarabel.SolverStatus.DualInfeasible:
        return Solution(SolveStatus.UNBOUNDED, x, -math.inf, raw.iterations, wall)
    return Solution(SolveStatus.NUMERICAL_FAILURE, x, math.nan, raw.iterations, wall,
                    diagnostic=f"solver status {status_name}")


def residual_report(
    program: ConicProgram,
    x: np.ndarray,
    box: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[float]:
    """Constraint violations of a primal point, one entry per membership
    (plus a final entry for the variable box).  Used as the independent
    certificate check on every Optimal solution."""
    out = []
    for m in program.memberships:
        vals = np.array([r.value(x) for r in m.rows])
        if m.kind is Cone.ZERO:
            out.append(float(np.max(np.abs(vals))) if vals.size else 0.0)
        elif m.kind is Cone.NONNEG:
            out.append(float(np.max(-vals)) if vals.size else 0.0)
        elif m.kind is Cone.SOC:
            out.append(float(np.linalg.norm(vals[1:]) - vals[0]))
        elif m.kind is Cone.RSOC:
            z, y, t = vals[0], vals[1], vals[2:]
            v = float(t @ t - 2.0 * z * y)
            out.append(max(v, -z, -y))
        elif m.kind is Cone.EXP:
            z, y, t = vals
            if y > 1e-300:
                out.append(float(y * math.exp(min(t / y, 700.0)) - z))
            else:
                out.append(max(-z, t, -y))
        elif m.kind is Cone.POW:
            z, y, t = vals
            eta = m.exponent
            if z >= 0.0 and y >= 0.0:
                out.append(float(abs(t) - z**eta * y ** (1.0 - eta)))
            else:
                out.append(max(-z, -y))
    if box is not None:
        lo, hi = box
        vio = 0.0
        fin = np.isfinite(lo)
        if fin.any():
            vio = max(vio, float(np.max(lo[fin] - x[fin])))
        fin = np.isfinite(hi)
        if fin.any():
            vio = max(vio, float(np.max(x[fin] - hi[fin])))
        out.append(vio)
    return out or [0.0]


def verify_solution(program: ConicProgram, solution: Solution) -> float:
    """Max membership residual of an Optimal solution (certificate audit)."""
    lo = np.asarray(program.lb, dtype=float)
    hi = np.asarray(program.ub, dtype=float)
    return max(residual_report(program, solution.primal, (lo, hi)))
