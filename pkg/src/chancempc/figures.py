"""Matplotlib rendering for the CLI report path.

Figures are written next to the delimited output: planned/realized paths
over the scenario regions, Monte Carlo trajectory fans, and approximation
audit curves.  When the scenario's constrained coordinates are not a 2-D
position pair the trajectory plots fall back to state time series.
"""

from __future__ import annotations

import itertools
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .smpc import Polytope, Scenario


def position_dims(scenario: Scenario) -> list[int]:
    """State coordinates the stay-in region actually constrains."""
    return [j for j in range(scenario.model.n_x)
            if scenario.stay_in.P[:, j].any()]


def polygon_vertices(poly: Polytope, dims: list[int]) -> np.ndarray:
    """Vertices of a 2-D polytope projection, ordered by angle.

    Intersects every face pair restricted to ``dims`` and keeps points
    satisfying all faces; assumes the region is bounded in those dims.
    """
    P = poly.P[:, dims]
    p = poly.p
    pts = []
    for i, j in itertools.combinations(range(P.shape[0]), 2):
        A = np.array([P[i], P[j]])
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        v = np.linalg.solve(A, np.array([p[i], p[j]]))
        if np.all(P @ v <= p + 1e-9):
            pts.append(v)
    if not pts:
        return np.zeros((0, 2))
    pts = np.unique(np.round(np.array(pts), 12), axis=0)
    center = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0]))
    return pts[order]


def _draw_regions(ax, scenario: Scenario, dims: list[int]) -> None:
    for poly, color, name in ((scenario.stay_in, "#d9ead3", "stay-in"),
                              (scenario.target, "#38761d", "target")):
        verts = polygon_vertices(poly, dims)
        if len(verts):
            ax.fill(verts[:, 0], verts[:, 1], color=color, alpha=0.6,
                    label=name, zorder=0)
    if scenario.stay_out is not None:
        verts = polygon_vertices(scenario.stay_out, dims)
        if len(verts):
            ax.fill(verts[:, 0], verts[:, 1], color="#cc0000", alpha=0.55,
                    label="stay-out", zorder=1)


def plot_trajectories(scenario: Scenario, trajectories: list[np.ndarray],
                      path: str | Path, title: str = "") -> Path:
    """Render realized trajectories (each an array of stacked states)."""
    path = Path(path)
    dims = position_dims(scenario)
    fig, ax = plt.subplots(figsize=(7, 5))
    if len(dims) == 2:
        _draw_regions(ax, scenario, dims)
        for k, states in enumerate(trajectories):
            xs, ys = states[:, dims[0]], states[:, dims[1]]
            ax.plot(xs, ys, "-", lw=0.9, alpha=0.8 if len(trajectories) < 5 else 0.25,
                    color="#1a3c6e", zorder=2)
            if k == 0:
                ax.plot(xs[0], ys[0], "ko", ms=5, zorder=3)
        ax.set_xlabel(f"x[{dims[0]}]")
        ax.set_ylabel(f"x[{dims[1]}]")
        ax.legend(loc="best", fontsize=8)
    else:
        for states in trajectories:
            for j in range(states.shape[1]):
                ax.plot(states[:, j], lw=0.8, alpha=0.5)
        ax.set_xlabel("step")
        ax.set_ylabel("state")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_approximation_audit(gamma: np.ndarray, psi: np.ndarray,
                             exact: np.ndarray, kind: str,
                             path: str | Path) -> Path:
    """Approximation vs exact composition, plus the signed residual."""
    path = Path(path)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                   height_ratios=[2, 1])
    ax1.semilogx(gamma, exact, "-", color="#333333", label="exact composition")
    ax1.semilogx(gamma, psi, "--", color="#cc4400", label=f"psi_{kind}")
    ax1.set_ylabel("value")
    ax1.legend(fontsize=8)
    ax2.semilogx(gamma, psi - exact, "-", color="#1a3c6e")
    ax2.axhline(0.0, color="k", lw=0.6)
    ax2.set_xlabel("risk level")
    ax2.set_ylabel("signed residual")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
