"""Gaussian quantile machinery and its cone-representable approximations.

Provides the probit oracle, the principal-branch Lambert W function, the
three approximation families used to replace probit compositions inside
conic programs, least-squares refitting with one-sided enforcement, and
the raw cone-membership encodings (power hypograph, Lambert-W hypograph,
logarithm hypograph).

The three families, each certified on a bounded risk interval:

* ``inv``  : concave lower bound of ``1 / probit(1-g)``   on (0, 0.078]
* ``root`` : convex upper bound of ``sqrt(probit(1-g))``  on (0, 0.239]
* ``log``  : convex upper bound of ``log(probit(1-g))``   on (0, 0.158]

``inv`` uses a fractional power ``beta * g**alpha + lam * g (+ phi)``;
``root``/``log`` use ``beta * W0(alpha g) + lam * g + phi + rho * log g``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, special

from .conic_ir import Cone, ConicProgram, LinExpr

GAMMA_MAX = {"inv": 0.078, "root": 0.239, "log": 0.158}

# Default floor used for bound-direction enforcement grids.  Risk variables
# downstream are floored at 1e-6, so conservatism must be certified there.
ENFORCE_FLOOR = 1e-6


@dataclass(frozen=True)
class ApproxParams:
    """Coefficients of one approximation family on (0, interval_max]."""

    kind: str
    alpha: float
    beta: float
    lam: float
    phi: float = 0.0
    rho: float = 0.0
    interval_max: float = 0.0

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "beta": self.beta,
            "lambda": self.lam,
            "phi": self.phi,
            "rho": self.rho,
            "intervalMax": self.interval_max,
        }

    @staticmethod
    def from_json(obj: dict) -> "ApproxParams":
        return ApproxParams(
            kind=obj["kind"],
            alpha=float(obj["alpha"]),
            beta=float(obj["beta"]),
            lam=float(obj["lambda"]),
            phi=float(obj.get("phi", 0.0)),
            rho=float(obj.get("rho", 0.0)),
            interval_max=float(obj["intervalMax"]),
        )


# Published coefficients.  The inv row is stored with the coefficient and
# exponent roles swapped relative to the printed table: evaluated as
# printed, the curve misses the target by an order of magnitude, while the
# swapped reading lands within 1e-3 and on the conservative side.
_TABLE = {
    "inv": ApproxParams("inv", alpha=0.1012, beta=0.6406, lam=2.6874,
                        interval_max=GAMMA_MAX["inv"]),
    "root": ApproxParams("root", alpha=2.7465e3, beta=-0.0992, lam=-1.3059,
                         phi=1.5798, rho=-0.0435, interval_max=GAMMA_MAX["root"]),
    "log": ApproxParams("log", alpha=3.6416e2, beta=-0.1261, lam=-2.8898,
                        phi=0.7186, rho=-0.0651, interval_max=GAMMA_MAX["log"]),
}


def table_params(kind: str) -> ApproxParams:
    """Shipped coefficients for one family (no one-sided enforcement)."""
    if kind not in _TABLE:
        raise ValueError(f"unknown approximation kind {kind!r}")
    return _TABLE[kind]


# ----------------------------------------------------------------------
# scalar special functions
# ----------------------------------------------------------------------

# Piecewise rational inverse-normal-CDF coefficients (Acklam).
_PA = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
       1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_PB = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
       6.680131188771972e+01, -1.328068155288572e+01)
_PC = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
       -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_PD = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
       3.754408661907416e+00)
_P_LOW = 0.02425

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def std_normal_cdf(x):
    """Standard Gaussian CDF via the complementary error function."""
    x = np.asarray(x, dtype=float)
    out = 0.5 * special.erfc(-x / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


def probit(p):
    """Inverse CDF of the standard Gaussian on (0, 1).

    Piecewise rational approximation polished with one Newton step against
    the complementary error function; absolute error below 1e-12.  The
    upper tail is evaluated through the lower one (1 - p is exact there),
    avoiding cancellation in the polish step.  Accepts scalars or arrays.
    """
    arr = np.asarray(p, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(~((arr > 0.0) & (arr < 1.0))):
        raise ValueError("probit argument must lie strictly inside (0, 1)")

    flip = arr > 0.5
    q_all = np.where(flip, 1.0 - arr, arr)

    x = np.empty_like(q_all)
    low = q_all < _P_LOW
    mid = ~low
    if np.any(low):
        q = np.sqrt(-2.0 * np.log(q_all[low]))
        x[low] = ((((((_PC[0] * q + _PC[1]) * q + _PC[2]) * q + _PC[3]) * q
                    + _PC[4]) * q + _PC[5])
                  / ((((_PD[0] * q + _PD[1]) * q + _PD[2]) * q + _PD[3]) * q + 1.0))
    if np.any(mid):
        q = q_all[mid] - 0.5
        r = q * q
        x[mid] = ((((((_PA[0] * r + _PA[1]) * r + _PA[2]) * r + _PA[3]) * r
                    + _PA[4]) * r + _PA[5]) * q
                  / (((((_PB[0] * r + _PB[1]) * r + _PB[2]) * r + _PB[3]) * r
                      + _PB[4]) * r + 1.0))

    # Newton polish: x -= (Phi(x) - q) / phi(x); x <= 0 here so the CDF is
    # the well-conditioned half of erfc
    err = 0.5 * special.erfc(-x / math.sqrt(2.0)) - q_all
    x -= err * _SQRT_2PI * np.exp(0.5 * x * x)
    x = np.where(flip, -x, x)
    return float(x[0]) if scalar else x


def lambert_w0(z):
    """Principal branch of the Lambert W function for z >= 0.

    Initial guess log1p(z), refined by Halley iterations until the defining
    residual ``w e^w - z`` drops below 1e-14 * max(1, z).
    """
    arr = np.asarray(z, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr).astype(float)
    if np.any(arr < 0.0):
        raise ValueError("lambert_w0 requires z >= 0 (principal branch only)")

    w = np.log1p(arr)
    tol = 1e-14 * np.maximum(1.0, arr)
    for _ in range(64):
        ew = np.exp(w)
        f = w * ew - arr
        if np.all(np.abs(f) <= tol):
            break
        denom = ew * (w + 1.0) - (w + 2.0) * f / (2.0 * w + 2.0)
        w = w - f / denom
    return float(w[0]) if scalar else w


# ----------------------------------------------------------------------
# approximation evaluation and fitting
# ----------------------------------------------------------------------


def _exact_composition(kind: str, gamma):
    q = probit(1.0 - np.asarray(gamma, dtype=float))
    if kind == "inv":
        return 1.0 / q
    if kind == "root":
        return np.sqrt(q)
    if kind == "log":
        return np.log(q)
    raise ValueError(f"unknown approximation kind {kind!r}")


def exact_composition(kind: str, gamma):
    """The probit composition each family approximates."""
    out = _exact_composition(kind, gamma)
    return float(out) if np.ndim(gamma) == 0 else out


def psi_eval(params: ApproxParams, gamma):
    """Evaluate one approximation family on (0, interval_max]."""
    arr = np.asarray(gamma, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(arr <= 0.0) or np.any(arr > params.interval_max + 1e-15):
        raise ValueError(
            f"gamma outside the certified interval (0, {params.interval_max}]")
    if params.kind == "inv":
        out = params.beta * arr**params.alpha + params.lam * arr + params.phi
    else:
        out = (params.beta * lambert_w0(params.alpha * arr)
               + params.lam * arr + params.phi + params.rho * np.log(arr))
    return float(out[0]) if scalar else out


class ApproximationFitError(RuntimeError):
    """Raised when no member of a family fits the target interval."""


@dataclass(frozen=True)
class FitResult:
    params: ApproxParams
    max_abs_residual: float
    enforcement_shift: float


def _basis(kind: str, alpha: float, g: np.ndarray) -> np.ndarray:
    if kind == "inv":
        return np.column_stack([g**alpha, g, np.ones_like(g)])
    return np.column_stack([lambert_w0(alpha * g), g, np.ones_like(g), np.log(g)])


def _fit_at_alpha(kind, alpha, g, target):
    X = _basis(kind, alpha, g)
    if kind == "inv":
        lo = np.array([0.0, -np.inf, -np.inf])  # beta >= 0 keeps concavity
        hi = np.array([np.inf, np.inf, np.inf])
    else:
        lo = np.array([-np.inf, -np.inf, -np.inf, -np.inf])
        hi = np.array([0.0, np.inf, np.inf, 0.0])  # beta, rho <= 0 keep convexity
    res = optimize.lsq_linear(X, target, bounds=(lo, hi))
    return res.cost, res.x


def fit_psi(kind: str, interval: tuple[float, float] | None = None,
            grid_size: int = 400) -> FitResult:
    """Least-squares fit of one family on a log-spaced grid, then a
    one-sided shift of the additive constant so the bound direction holds
    with a small safety pad on a dense refinement grid.

    Raises :class:`ApproximationFitError` when the best member still
    misses the target by more than 0.05 anywhere on the grid.
    """
    cap = GAMMA_MAX[kind]
    if interval is None:
        interval = (1e-4, cap)
    lo, hi = interval
    if not (0.0 < lo < hi <= cap + 1e-15):
        raise ValueError(f"interval {interval} outside the {kind} convexity interval")
    if grid_size < 50:
        raise ValueError("grid_size must be at least 50")

    g = np.geomspace(lo, hi, grid_size)
    target = _exact_composition(kind, g)

    if kind == "inv":
        search = np.linspace(0.02, 0.98, 49)
    else:
        search = np.geomspace(1.0, 1e5, 61)
    best = min((( _fit_at_alpha(kind, a, g, target)[0], a) for a in search))
    a0 = best[1]

    def loss(a):
        return _fit_at_alpha(kind, a, g, target)[0]

    if kind == "inv":
        bracket = (max(0.01, a0 * 0.7), min(0.99, a0 * 1.3))
    else:
        bracket = (a0 * 0.3, a0 * 3.0)
    opt = optimize.minimize_scalar(loss, bounds=bracket, method="bounded")
    alpha = float(opt.x)
    _, coef = _fit_at_alpha(kind, alpha, g, target)

    if kind == "inv":
        params = ApproxParams(kind, alpha, float(coef[0]), float(coef[1]),
                              phi=float(coef[2]), interval_max=hi)
    else:
        params = ApproxParams(kind, alpha, float(coef[0]), float(coef[1]),
                              phi=float(coef[2]), rho=float(coef[3]),
                              interval_max=hi)

    params, shift = enforce_bound(params, lo=lo)
    dense = np.geomspace(lo, hi, 20_000)
    resid = float(np.max(np.abs(psi_eval(params, dense)
                                - _exact_composition(kind, dense))))
    if resid > 0.05:
        raise ApproximationFitError(
            f"{kind} approximation family inadequate on {interval}: "
            f"max residual {resid:.3g}")
    return FitResult(params, resid, shift)


def enforce_bound(params: ApproxParams, lo: float = ENFORCE_FLOOR,
                  grid_size: int = 40_000, pad: float = 2e-10
                  ) -> tuple[ApproxParams, float]:
    """Shift the additive constant so the bound direction holds exactly.

    ``inv`` must stay below its target, ``root``/``log`` above.  The shift
    equals the worst signed violation on a dense log grid plus a small pad
    covering interpolation error between grid nodes.  Returns the adjusted
    parameters and the applied shift (0 when the direction already held).
    """
    g = np.geomspace(lo, params.interval_max, grid_size)
    resid = psi_eval(params, g) - _exact_composition(params.kind, g)
    # half-pad hysteresis keeps re-enforcement a no-op on enforced curves
    if params.kind == "inv":
        worst = float(np.max(resid))   # must be <= 0
        shift = -(worst + pad) if worst > -0.5 * pad else 0.0
    else:
        worst = float(np.min(resid))   # must be >= 0
        shift = -(worst - pad) if worst < 0.5 * pad else 0.0
    if shift == 0.0:
        return params, 0.0
    return replace(params, phi=params.phi + shift), shift


@functools.lru_cache(maxsize=None)
def enforced_table_params(kind: str) -> ApproxParams:
    """Shipped coefficients with the one-sided enforcement shift applied.

    This is the form consumed by constraint encoders: the shift converts a
    close two-sided fit into a certified conservative bound.
    """
    params, _ = enforce_bound(table_params(kind))
    return params


# ----------------------------------------------------------------------
# cone-membership encodings
# ----------------------------------------------------------------------


def encode_power_hypograph(program: ConicProgram, gamma_var: int, s_var: int,
                           exponent: float, label: str = "") -> list[int]:
    """Add memberships enforcing ``s <= gamma**exponent`` with gamma >= 0.

    Extreme exponents are numerically hostile to interior-point solvers,
    so small ones are reached by chaining cones with exponent
    ``exponent**(1/k) >= 0.3``; monotone concave powers compose exactly.
    """
    if not (0.0 < exponent < 1.0):
        raise ValueError(f"power hypograph exponent must lie in (0,1), got {exponent}")
    stages = 1
    while exponent ** (1.0 / stages) < 0.3:
        stages += 1
    a = exponent ** (1.0 / stages)
    tag = label or "power_hypograph"
    indices = []
    head = gamma_var
    for s in range(stages):
        tail = s_var if s == stages - 1 else program.add_var(f"{tag}_c{s}", lb=0.0)
        indices.append(program.add_membership(
            Cone.POW,
            [LinExpr.variable(head), LinExpr.constant(1.0), LinExpr.variable(tail)],
            exponent=a,
            label=tag if stages == 1 else f"{tag}/{s}",
        ))
        head = tail
    return indices


def encode_w0_hypograph(program: ConicProgram, z_expr: LinExpr | int,
                        y_var: int, label: str = "") -> list[int]:
    """Add memberships so feasible (z, y) satisfy ``0 <= y <= W0(z)``.

    Uses the exponential-cone / rotated-cone pair: ``(z, y, t) in Kexp``
    with ``t >= y**2`` collapses to ``z >= y e^y`` at the tight point.
    """
    if isinstance(z_expr, int):
        z_expr = LinExpr.variable(z_expr)
    t = program.add_var((label or "w0") + "_t", lb=0.0)
    i1 = program.add_membership(
        Cone.EXP,
        [z_expr, LinExpr.variable(y_var), LinExpr.variable(t)],
        label=(label or "w0_hypograph") + "/exp",
    )
    i2 = program.add_membership(
        Cone.RSOC,
        [LinExpr.constant(0.5), LinExpr.variable(t), LinExpr.variable(y_var)],
        label=(label or "w0_hypograph") + "/rsoc",
    )
    program.add_nonneg(LinExpr.variable(y_var), label=(label or "w0") + "/y>=0")
    return [i1, i2]


def encode_log_hypograph(program: ConicProgram, z_expr: LinExpr | int,
                         t_var: int, label: str = "") -> list[int]:
    """Add the membership enforcing ``t <= log(z)`` (hence z >= 0)."""
    if isinstance(z_expr, int):
        z_expr = LinExpr.variable(z_expr)
    idx = program.add_membership(
        Cone.EXP,
        [z_expr, LinExpr.constant(1.0), LinExpr.variable(t_var)],
        label=label or "log_hypograph",
    )
    return [idx]


def encode_psi_bound(program: ConicProgram, params: ApproxParams,
                     gamma_var: int, label: str = "") -> int:
    """Bind a fresh scalar ``t`` to the approximation at ``gamma``.

    For ``inv`` the feasible set is the hypograph ``t <= Psi(gamma)``; for
    ``root``/``log`` it is the epigraph ``t >= Psi(gamma)``.  Returns the
    variable id of ``t``.
    """
    tag = label or f"psi_{params.kind}"
    t = program.add_var(tag + "_t")
    if params.kind == "inv":
        if params.beta < 0:
            raise ValueError("inv approximation needs beta >= 0 for concavity")
        s = program.add_var(tag + "_pow", lb=0.0)
        encode_power_hypograph(program, gamma_var, s, params.alpha, label=tag)
        # t <= beta*s + lam*gamma + phi
        program.add_nonneg(
            LinExpr({s: params.beta, gamma_var: params.lam}, params.phi)
            - LinExpr.variable(t),
            label=tag + "/combine",
        )
    else:
        if params.beta > 0 or params.rho > 0:
            raise ValueError(f"{params.kind} approximation needs beta, rho <= 0")
        w = program.add_var(tag + "_w", lb=0.0)
        encode_w0_hypograph(
            program, LinExpr.variable(gamma_var, params.alpha), w, label=tag)
        m = program.add_var(tag + "_logg")
        encode_log_hypograph(program, LinExpr.variable(gamma_var), m, label=tag)
        # t >= beta*w + lam*gamma + phi + rho*m   (beta, rho <= 0 make this
        # the epigraph of Psi once w, m sit on their hypograph boundaries)
        program.add_nonneg(
            LinExpr.variable(t)
            - LinExpr({w: params.beta, gamma_var: params.lam, m: params.rho},
                      params.phi),
            label=tag + "/combine",
        )
    return t
