"""Chance-constraint reformulations: exact, fixed-risk, and disjunctive conic.

A single linear chance constraint over the stacked trajectory evaluates to
``f(V) + ||c(delta)|| * probit(1 - gamma) <= 0`` (upper tail) or its
mirror for lower tails.  With one-hot gain selection the norm collapses to
the selected ``r_k = ||g0 + g_k||``, and three conic encodings replace the
probit compositions with certified one-sided approximations:

* ``inv``  : rotated-cone product form with a power-cone hypograph,
* ``root`` : rotated-cone square form with a Lambert-W epigraph,
* ``log``  : logarithmic form with exponential-cone hypographs.

Every feasible point of an encoding satisfies the exact probit constraint
(conservatism); ``deterministic_exact`` is the oracle for that property.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .conic_ir import Cone, ConicProgram, LinExpr
from .prediction import GainLibrary, StackedSystem
from .probit_cones import (ApproxParams, encode_log_hypograph, encode_psi_bound,
                           probit)

UPPER_TAIL = "upper"
LOWER_TAIL = "lower"

# Probit blows up as gamma -> 0 and the approximations were fitted above
# 1e-4; the floor keeps variable risks strictly inside certified territory.
RISK_FLOOR = 1e-6


@dataclass(frozen=True)
class ChanceConstraintSpec:
    """One probabilistic row: ``P(H x <=/>= h) >= 1 - gamma``.

    ``risk`` is ``("fixed", value)`` or ``("variable", var_id)``; ``big_m``
    optionally carries ``(M, switch_var_id)`` so the row can be switched
    off when its binary indicator is zero.
    """

    h_row: np.ndarray
    h_const: float
    direction: str = UPPER_TAIL
    risk: tuple = ("fixed", 0.01)
    big_m: tuple | None = None

    def __post_init__(self):
        if self.direction not in (UPPER_TAIL, LOWER_TAIL):
            raise ValueError(f"direction must be upper or lower, got {self.direction}")
        mode, val = self.risk
        if mode == "fixed" and not (0.0 < val < 0.5):
            raise ValueError(f"fixed risk must lie in (0, 0.5), got {val}")
        if self.big_m is not None and self.big_m[0] <= 0.0:
            raise ValueError("big-M constant must be positive")
        object.__setattr__(self, "h_row", np.asarray(self.h_row, dtype=float))


@dataclass(frozen=True)
class DisjunctiveNormData:
    """Per-gain stochastic row norms ``r_k = ||g0 + g_k||``."""

    g0: np.ndarray
    gk: list[np.ndarray]
    rk: np.ndarray


@dataclass(frozen=True)
class RiskBudget:
    """Total risk cap shared by a set of risk variables."""

    xi: float
    var_ids: list[int]

    def __post_init__(self):
        if not (0.0 < self.xi <= 0.5):
            raise ValueError(f"risk budget must lie in (0, 0.5], got {self.xi}")


def deterministic_exact(direction: str, f_value: float, c_norm: float,
                        gamma: float) -> tuple[bool, float]:
    """Exact deterministic margin of one chance constraint.

    Upper tail: margin = -(f + ||c|| probit(1-g)); lower tail mirrors the
    sign of f.  The constraint holds iff margin >= 0.  This is the
    conservatism oracle the conic encodings are audited against.
    """
    if not (0.0 < gamma < 0.5):
        raise ValueError(f"gamma must lie in (0, 0.5), got {gamma}")
    q = probit(1.0 - gamma)
    if direction == UPPER_TAIL:
        margin = -(f_value + c_norm * q)
    elif direction == LOWER_TAIL:
        margin = -(c_norm * q - f_value)
    else:
        raise ValueError(f"unknown direction {direction}")
    return margin >= 0.0, margin


def compute_rk(h_row: np.ndarray, stacked: StackedSystem,
               library: GainLibrary, over: str = "states") -> DisjunctiveNormData:
    """Stochastic norms of one constraint row for every library gain.

    ``over="states"`` treats the row as acting on stacked X, giving
    ``g0 = H calG`` and ``g_k = H calB calM_k``.  ``over="inputs"`` treats
    it as acting on stacked U, where the open-loop part vanishes and
    ``g_k = H calM_k``.
    """
    h = np.asarray(h_row, dtype=float).reshape(-1)
    if over == "states":
        if h.size != (stacked.N + 1) * stacked.n_x:
            raise ValueError(
                f"state row has {h.size} entries, expected {(stacked.N + 1) * stacked.n_x}")
        g0 = h @ stacked.calG
        hB = h @ stacked.calB
        gk = [hB @ M for M in library.calM]
    elif over == "inputs":
        if h.size != stacked.N * stacked.n_u:
            raise ValueError(
                f"input row has {h.size} entries, expected {stacked.N * stacked.n_u}")
        g0 = np.zeros(stacked.N * stacked.n_w)
        gk = [h @ M for M in library.calM]
    else:
        raise ValueError(f"over must be 'states' or 'inputs', got {over!r}")
    rk = np.array([np.linalg.norm(g0 + g) for g in gk])
    return DisjunctiveNormData(g0, gk, rk)


def wrap_big_m(spec: ChanceConstraintSpec, m_value: float,
               switch_var: int) -> ChanceConstraintSpec:
    """Attach a big-M switch: with sigma = 1 the row is active, with
    sigma = 0 it gains slack M and is implied-satisfied."""
    if m_value <= 0.0:
        raise ValueError(f"big-M constant must be positive, got {m_value}")
    return replace(spec, big_m=(float(m_value), int(switch_var)))


def _effective_f(spec: ChanceConstraintSpec, f_expr: LinExpr) -> LinExpr:
    """Normalize to the upper-tail convention and apply big-M slack.

    Lower tails negate f (their deterministic form is the upper-tail form
    of -f); an attached switch subtracts ``M (1 - sigma)``.
    """
    eff = f_expr.copy() if spec.direction == UPPER_TAIL else -f_expr
    if spec.big_m is not None:
        m_val, sigma = spec.big_m
        eff = eff - m_val + LinExpr.variable(sigma, m_val)
    return eff


def encode_fixed_risk(program: ConicProgram, spec: ChanceConstraintSpec,
                      data: DisjunctiveNormData, f_expr: LinExpr,
                      delta_vars: list[int], label: str = "") -> int:
    """Exact linear encoding for a fixed risk level.

    The probit factor is a constant, so
    ``f + sum_k delta_k r_k probit(1-g) <= 0`` is affine in (V, delta).
    """
    mode, gamma = spec.risk
    if mode != "fixed":
        raise ValueError("encode_fixed_risk requires a fixed risk mode")
    q = probit(1.0 - gamma)
    eff = _effective_f(spec, f_expr)
    row = -eff
    for k, d in enumerate(delta_vars):
        row.add_term(d, -float(data.rk[k]) * q)
    return program.add_nonneg(row, label=label or "fixed_risk")


def _delta_weighted(delta_vars: list[int], weights: np.ndarray) -> LinExpr:
    expr = LinExpr()
    for d, w in zip(delta_vars, weights):
        expr.add_term(d, float(w))
    return expr


def encode_inv_formulation(program: ConicProgram, spec: ChanceConstraintSpec,
                           data: DisjunctiveNormData, f_expr: LinExpr,
                           delta_vars: list[int], gamma_var: int,
                           params: ApproxParams, psi_var: int | None = None,
                           label: str = "") -> int:
    """Inverse-probit encoding: rotated cone + power-cone hypograph.

    Feasible points satisfy ``(sum_k delta_k sqrt(r_k))^2 <= -f * t`` with
    ``0 <= t <= Psi_inv(gamma) <= 1/probit(1-gamma)``, which for one-hot
    delta implies the exact constraint.  Returns the t variable id.
    """
    tag = label or "inv"
    if params.kind != "inv":
        raise ValueError("inv formulation needs inv-family parameters")
    eff = _effective_f(spec, f_expr)
    if psi_var is None:
        psi_var = encode_psi_bound(program, params, gamma_var, label=tag)
        program.add_nonneg(LinExpr.variable(psi_var), label=tag + "/t>=0")
    t = LinExpr.variable(psi_var)
    norm_term = _delta_weighted(delta_vars, 2.0 * np.sqrt(data.rk))
    program.add_membership(
        Cone.SOC, [t - eff, -t - eff, norm_term], label=tag + "/soc")
    return psi_var


def encode_root_formulation(program: ConicProgram, spec: ChanceConstraintSpec,
                            data: DisjunctiveNormData, f_expr: LinExpr,
                            delta_vars: list[int], gamma_var: int,
                            params: ApproxParams, psi_var: int | None = None,
                            label: str = "") -> int:
    """Root-probit encoding: rotated cone + Lambert-W epigraph.

    Uses ``t^2 <= -f * sum_k delta_k / r_k`` with ``t >= Psi_root(gamma)``.
    Degenerate norms: when every r_k is zero the stochastic part vanishes
    and the row reduces to ``f <= 0``; mixed zero/nonzero norms route to
    the inverse formulation, whose sqrt weights accept zeros.
    """
    tag = label or "root"
    if params.kind != "root":
        raise ValueError("root formulation needs root-family parameters")
    if np.all(data.rk <= 0.0):
        program.add_nonneg(-_effective_f(spec, f_expr), label=tag + "/deterministic")
        return psi_var if psi_var is not None else -1
    if np.any(data.rk <= 0.0):
        from .probit_cones import enforced_table_params
        return encode_inv_formulation(
            program, spec, data, f_expr, delta_vars, gamma_var,
            enforced_table_params("inv"), psi_var=None, label=tag + "/inv_fallback")
    eff = _effective_f(spec, f_expr)
    if psi_var is None:
        psi_var = encode_psi_bound(program, params, gamma_var, label=tag)
    inv_term = _delta_weighted(delta_vars, 1.0 / data.rk)
    program.add_membership(
        Cone.SOC,
        [-eff + inv_term, -eff - inv_term, LinExpr.variable(psi_var, 2.0)],
        label=tag + "/soc")
    return psi_var


def encode_log_formulation(program: ConicProgram, spec: ChanceConstraintSpec,
                           data: DisjunctiveNormData, f_expr: LinExpr,
                           delta_vars: list[int], gamma_var: int,
                           params: ApproxParams, psi_var: int | None = None,
                           label: str = "") -> int:
    """Logarithm-probit encoding with exponential cones.

    Encodes ``sum_k delta_k log(r_k) + t <= y`` with ``y <= log(-f)`` and
    ``t >= Psi_log(gamma)``.  Every r_k must be positive.
    """
    tag = label or "log"
    if params.kind != "log":
        raise ValueError("log formulation needs log-family parameters")
    if np.any(data.rk <= 0.0):
        raise ValueError("log formulation inapplicable with zero r_k; "
                         "choose inv or root")
    eff = _effective_f(spec, f_expr)
    if psi_var is None:
        psi_var = encode_psi_bound(program, params, gamma_var, label=tag)
    y = program.add_var(tag + "_y")
    encode_log_hypograph(program, -eff, y, label=tag + "/logf")
    row = LinExpr.variable(y) - LinExpr.variable(psi_var)
    for d, r in zip(delta_vars, data.rk):
        row.add_term(d, -math.log(float(r)))
    program.add_nonneg(row, label=tag + "/combine")
    return psi_var


_ENCODERS = {
    "inv": encode_inv_formulation,
    "root": encode_root_formulation,
    "log": encode_log_formulation,
}


def encode_variable_risk(program: ConicProgram, formulation: str,
                         spec: ChanceConstraintSpec, data: DisjunctiveNormData,
                         f_expr: LinExpr, delta_vars: list[int],
                         gamma_var: int, params: ApproxParams,
                         psi_var: int | None = None, label: str = "") -> int:
    """Dispatch to the chosen disjunctive encoding."""
    try:
        enc = _ENCODERS[formulation]
    except KeyError:
        raise ValueError(f"unknown formulation {formulation!r}") from None
    return enc(program, spec, data, f_expr, delta_vars, gamma_var, params,
               psi_var=psi_var, label=label)


def risk_budget_constraint(program: ConicProgram, budget: RiskBudget,
                           label: str = "") -> None:
    """Add ``0 <= sum(gamma) <= xi`` over the budget's risk variables.

    Per-variable floors and interval caps are expected to live on the
    variable bounds themselves.
    """
    total = LinExpr({v: 1.0 for v in budget.var_ids})
    program.add_nonneg(LinExpr.constant(budget.xi) - total,
                       label=(label or "risk_budget") + "/cap")
    program.add_nonneg(total, label=(label or "risk_budget") + "/floor")


def add_risk_variable(program: ConicProgram, cap: float, name: str = "gamma") -> int:
    """Fresh risk-allocation variable with the standard floor and a cap."""
    return program.add_var(name, lb=RISK_FLOOR, ub=cap)
