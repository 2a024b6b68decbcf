"""Horizon-stacked dynamics, LQ gain design, and disturbance feedback.

Builds the block matrices that map initial state, nominal inputs, and
disturbance realizations to the stacked state trajectory; designs a
library of state-feedback gains on a grid of LQ weights; and converts
each gain into its causal disturbance-feedback block, which is the object
the optimizer selects among.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class ModelDimensionError(ValueError):
    """A system matrix has inconsistent or non-finite entries."""


class RiccatiConvergenceError(RuntimeError):
    """The Riccati fixed point failed to converge (unstabilizable or
    ill-conditioned design)."""


@dataclass(frozen=True)
class SystemModel:
    """Linear discrete-time system ``x+ = A x + B u + G w``."""

    A: np.ndarray
    B: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "G"):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.ndim != 2:
                raise ModelDimensionError(f"model.{name} must be a matrix")
            if not np.all(np.isfinite(mat)):
                raise ModelDimensionError(f"model.{name} contains non-finite entries")
            object.__setattr__(self, name, mat)
        n = self.A.shape[0]
        if self.A.shape[1] != n:
            raise ModelDimensionError(f"model.A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ModelDimensionError(
                f"model.B has {self.B.shape[0]} rows, expected {n}")
        if self.G.shape[0] != n:
            raise ModelDimensionError(
                f"model.G has {self.G.shape[0]} rows, expected {n}")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.G.shape[1]


@dataclass(frozen=True)
class StackedSystem:
    """Horizon-lifted matrices of the prediction ``X = calA x0 + calB U + calG W``.

    ``calA`` stacks powers of A with the identity on top; ``calB`` and
    ``calG`` are block lower-triangular with a zero first block row.
    """

    calA: np.ndarray
    calB: np.ndarray
    calG: np.ndarray
    N: int
    n_x: int
    n_u: int
    n_w: int

    def state_block(self, i: int) -> slice:
        """Row slice of stacked X picking predicted state ``x_i``."""
        return slice(i * self.n_x, (i + 1) * self.n_x)

    def input_block(self, i: int) -> slice:
        """Row slice of stacked U picking input ``u_i``."""
        return slice(i * self.n_u, (i + 1) * self.n_u)


def build_stacked(model: SystemModel, N: int) -> StackedSystem:
    """Stack the dynamics over an N-step horizon.

    Block (i, j) of calB equals ``A**(i-1-j) @ B`` for i > j and zero
    otherwise; calG is identical with G in place of B.
    """
    if N < 1:
        raise ValueError(f"horizon must be >= 1, got {N}")
    n_x, n_u, n_w = model.n_x, model.n_u, model.n_w

    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(model.A @ powers[-1])

    calA = np.vstack(powers)
    calB = np.zeros(((N + 1) * n_x, N * n_u))
    calG = np.zeros(((N + 1) * n_x, N * n_w))
    for i in range(1, N + 1):
        for j in range(i):
            blk = powers[i - 1 - j]
            calB[i * n_x:(i + 1) * n_x, j * n_u:(j + 1) * n_u] = blk @ model.B
            calG[i * n_x:(i + 1) * n_x, j * n_w:(j + 1) * n_w] = blk @ model.G
    return StackedSystem(calA, calB, calG, N, n_x, n_u, n_w)


@dataclass(frozen=True)
class FeedbackGain:
    """Time-invariant per-step gain, used as ``u = L x``."""

    L: np.ndarray
    Q_F: np.ndarray
    R_F: np.ndarray


def lq_gain(model: SystemModel, qf_diag, rf_diag,
            tol: float = 1e-12, max_iter: int = 100_000) -> FeedbackGain:
    """Infinite-horizon discrete LQ gain by Riccati fixed-point iteration.

    Returns L in the convention ``u = L x`` with
    ``L = -(R + B'PB)^{-1} B'PA``, so stabilizing designs come out with
    negative-pull entries.  Iterates the Riccati difference equation until
    the Frobenius increment of the value matrix drops below ``tol``.
    """
    Q = np.diag(np.asarray(qf_diag, dtype=float))
    R = np.diag(np.asarray(rf_diag, dtype=float))
    if Q.shape[0] != model.n_x:
        raise ModelDimensionError(
            f"Q_F has {Q.shape[0]} weights, expected {model.n_x}")
    if R.shape[0] != model.n_u:
        raise ModelDimensionError(
            f"R_F has {R.shape[0]} weights, expected {model.n_u}")
    if np.any(np.diag(Q) < 0.0):
        raise ValueError("Q_F must be positive semidefinite")
    if np.any(np.diag(R) <= 0.0):
        raise ValueError("R_F must be positive definite")

    A, B = model.A, model.B
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e100:
            raise RiccatiConvergenceError(
                "Riccati iteration diverged: unstabilizable or "
                "ill-conditioned design")
        if np.linalg.norm(P_next - P, "fro") <= tol:
            P = P_next
            break
        P = P_next
    else:
        raise RiccatiConvergenceError(
            "Riccati iteration did not converge: unstabilizable or "
            "ill-conditioned design")
    BtP = B.T @ P
    L = -np.linalg.solve(R + BtP @ B, BtP @ A)
    return FeedbackGain(L, Q, R)


def state_feedback_block(stacked: StackedSystem, gain: FeedbackGain) -> np.ndarray:
    """Block-diagonal lift of one per-step gain over the horizon.

    Maps stacked states (N+1 blocks) to stacked inputs (N blocks); the
    last state block gets no gain, keeping the block lower-triangular
    structure that makes ``calB @ calL`` nilpotent.
    """
    N, n_x, n_u = stacked.N, stacked.n_x, stacked.n_u
    calL = np.zeros((N * n_u, (N + 1) * n_x))
    for i in range(N):
        calL[i * n_u:(i + 1) * n_u, i * n_x:(i + 1) * n_x] = gain.L
    return calL


def state_to_disturbance_feedback(stacked: StackedSystem,
                                  gain: FeedbackGain) -> np.ndarray:
    """Disturbance-feedback block ``calM = calL (I - calB calL)^{-1} calG``.

    The inverse always exists because ``calB @ calL`` is strictly block
    lower-triangular (nilpotent); it is applied by forward block
    substitution rather than generic inversion.
    """
    calL = state_feedback_block(stacked, gain)
    Z = stacked.calB @ calL                      # strictly block lower-triangular
    n_x = stacked.n_x
    Y = stacked.calG.copy()                      # solves (I - Z) Y = calG
    for i in range(1, stacked.N + 1):
        rows = slice(i * n_x, (i + 1) * n_x)
        Y[rows] += Z[rows, :i * n_x] @ Y[:i * n_x]
    calM = calL @ Y
    # clean sub-epsilon fill so causality is structurally exact
    n_u, n_w = stacked.n_u, stacked.n_w
    for i in range(stacked.N):
        calM[i * n_u:(i + 1) * n_u, i * n_w:] = 0.0
    return calM


def simulate_trajectory(stacked: StackedSystem, calM: np.ndarray,
                        V: np.ndarray, x0: np.ndarray, W: np.ndarray
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Stacked trajectory under disturbance feedback.

    Returns ``(X, U)`` with ``U = calM W + V`` and
    ``X = calA x0 + calB V + (calG + calB calM) W``; X starts at x0 exactly.
    """
    V = np.asarray(V, dtype=float).reshape(-1)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    W = np.asarray(W, dtype=float).reshape(-1)
    if V.size != stacked.N * stacked.n_u:
        raise ModelDimensionError(f"V has {V.size} entries, expected {stacked.N * stacked.n_u}")
    if x0.size != stacked.n_x:
        raise ModelDimensionError(f"x0 has {x0.size} entries, expected {stacked.n_x}")
    if W.size != stacked.N * stacked.n_w:
        raise ModelDimensionError(f"W has {W.size} entries, expected {stacked.N * stacked.n_w}")
    U = calM @ W + V
    X = stacked.calA @ x0 + stacked.calB @ V + (stacked.calG + stacked.calB @ calM) @ W
    return X, U


# ----------------------------------------------------------------------
# gain library
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GainGridSpec:
    """Grid of LQ designs: diag templates with ``"r"`` marking sampled slots.

    ``count`` values are drawn uniformly from [r_min, r_max] (sorted
    ascending for reproducible indexing) and every slot independently
    takes each sampled value, giving ``count ** n_slots`` designs.
    """

    count: int
    r_min: float
    r_max: float
    qf_template: tuple
    rf_template: tuple
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("gain grid count must be >= 1")
        if not (0 <= self.r_min <= self.r_max):
            raise ValueError("gain grid requires 0 <= r_min <= r_max")
        object.__setattr__(self, "qf_template", tuple(self.qf_template))
        object.__setattr__(self, "rf_template", tuple(self.rf_template))

    @property
    def n_slots(self) -> int:
        return sum(1 for v in self.qf_template + self.rf_template if v == "r")

    @property
    def n_designs(self) -> int:
        return self.count ** self.n_slots


@dataclass
class GainLibrary:
    """Precomputed feedback laws and their disturbance-feedback blocks."""

    gains: list[FeedbackGain]
    calM: list[np.ndarray]
    feedback_cost: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.gains)


def _fill_template(template, slot_values, cursor):
    out = []
    for v in template:
        if v == "r":
            out.append(slot_values[cursor])
            cursor += 1
        else:
            out.append(float(v))
    return out, cursor


def sample_grid_values(grid: GainGridSpec) -> np.ndarray:
    """The sorted uniform draws shared by every slot of the grid."""
    rng = np.random.RandomState(grid.seed)
    return np.sort(rng.uniform(grid.r_min, grid.r_max, size=grid.count))


def build_gain_library(model: SystemModel, stacked: StackedSystem,
                       grid: GainGridSpec, R_step: np.ndarray) -> GainLibrary:
    """Design every grid combination and precompute calM and its cost.

    ``feedback_cost[k] = trace(calM_k' calR calM_k)`` with
    ``calR = I_N (x) R_step``, the constant the selected gain contributes
    to the expected input cost.
    """
    values = sample_grid_values(grid)
    calR = np.kron(np.eye(stacked.N), np.asarray(R_step, dtype=float))
    gains, mats, costs = [], [], []
    for combo in itertools.product(values, repeat=grid.n_slots):
        qf, cursor = _fill_template(grid.qf_template, combo, 0)
        rf, _ = _fill_template(grid.rf_template, combo, cursor)
        gain = lq_gain(model, qf, rf)
        calM = state_to_disturbance_feedback(stacked, gain)
        gains.append(gain)
        mats.append(calM)
        costs.append(float(np.trace(calM.T @ calR @ calM)))
    return GainLibrary(gains, mats, costs)
