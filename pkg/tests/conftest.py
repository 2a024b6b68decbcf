import json

import numpy as np
import pytest

from chancempc.prediction import GainGridSpec, SystemModel
from chancempc.smpc import Polytope, Scenario, Weights

VEHICLE_A = np.array([[1.0, 0.0, 0.0, 0.0],
                      [0.1, 1.0, 0.0, 0.0],
                      [0.0, 0.0, 1.0, 0.0],
                      [0.0, 0.0, 0.1, 1.0]])
VEHICLE_B = np.array([[0.1, 0.0],
                      [0.005, 0.0],
                      [0.0, 0.1],
                      [0.0, 0.005]])


@pytest.fixture(scope="session")
def vehicle_model():
    return SystemModel(VEHICLE_A, VEHICLE_B, VEHICLE_B.copy())


def make_case1_scenario(model, n_values=3, formulation="log", seed=3,
                        s_weight=2.0):
    """Case-1 style scenario (no obstacle) at a configurable grid size."""
    stay_in = Polytope(
        np.array([[0, 1, 0, 0], [0, -1, 0, 0], [0, 0, 0, 1], [0, 0, 0, -1.0]]),
        np.array([3.0, 1.3, 1.2, 0.0]))
    target = Polytope(np.array([[0, -1, 0, 0], [0, 0, 0, -1.0]]),
                      np.array([-0.5, -0.55]))
    input_set = Polytope(
        np.array([[1, 0], [-1, 0], [0, 1], [0, -1.0]]),
        np.array([5.0, 5.0, 5.0, 5.0]))
    grid = GainGridSpec(n_values, 0.05, 0.3, (0, "r", 0, 1), ("r", "r"),
                        seed=seed)
    return Scenario(model=model, horizon=10, stay_in=stay_in, target=target,
                    input_set=input_set, xi=0.15, gamma_input=0.01,
                    gamma_terminal=0.01,
                    weights=Weights(0.05 * np.eye(2), None, s_weight),
                    gain_grid=grid, x0=np.array([0.0, -1.18, 0.0, 0.16]),
                    formulation=formulation, seed=seed)


def make_reduced_case2(model, s_weight=1.0, formulation="inv", seed=3):
    """Obstacle scenario at acceptance scale: N_F = 8, N = 5, N_O = 3."""
    stay_in = Polytope(
        np.array([[0, 1, 0, 0], [0, -1, 0, 0], [0, 0, 0, 1], [0, 0, 0, -1.0]]),
        np.array([3.0, 0.9, 1.2, 0.6]))
    stay_out = Polytope(
        np.array([[0, 1, 0, 0], [0, -1, 0, 0], [0, 0, 0, -1.0]]),
        np.array([-0.05, 0.35, 0.05]))
    target = Polytope(np.array([[0, -1, 0, 0], [0, 0, 0, -1.0]]),
                      np.array([-0.2, 0.5]))
    input_set = Polytope(
        np.array([[1, 0], [-1, 0], [0, 1], [0, -1.0]]),
        np.array([5.0, 5.0, 5.0, 5.0]))
    grid = GainGridSpec(2, 0.1, 0.15, (0, "r", 0, 1), ("r", "r"), seed=seed)
    return Scenario(model=model, horizon=5, stay_in=stay_in, target=target,
                    input_set=input_set, xi=0.15, gamma_input=0.01,
                    gamma_terminal=0.01,
                    weights=Weights(0.05 * np.eye(2), None, s_weight, s_weight),
                    gain_grid=grid, x0=np.array([1.0, -0.55, 0.0, 0.0]),
                    formulation=formulation, seed=seed, stay_out=stay_out)


def make_pinned_risk_scenario(pin=0.05, formulation="log"):
    """Single-constraint scalar scenario whose optimal risk sits at ``pin``.

    The state cost pulls x toward the origin while the stay-in face floors
    it at 2 plus the back-off, so the solved risk hits the budget cap.
    """
    model = SystemModel(np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    stay_in = Polytope(np.array([[-1.0]]), np.array([-2.0]))   # x >= 2
    target = Polytope(np.array([[1.0]]), np.array([100.0]))
    input_set = Polytope(np.array([[1.0], [-1.0]]), np.array([10.0, 10.0]))
    grid = GainGridSpec(1, 1.0, 1.0, ("r",), ("r",), seed=0)
    return Scenario(model=model, horizon=1, stay_in=stay_in, target=target,
                    input_set=input_set, xi=pin, gamma_input=0.01,
                    gamma_terminal=0.01,
                    weights=Weights(np.array([[0.01]]), np.array([[1.0]]),
                                    1e-4),
                    gain_grid=grid, x0=np.array([3.0]),
                    formulation=formulation, seed=0)


def make_tiny_scenario_doc():
    """Minimal valid scenario document for IO/CLI tests (N_F = 1, N = 3)."""
    return {
        "version": 1,
        "model": {
            "A": [[1.0, 0.0], [0.1, 1.0]],
            "B": [[0.1], [0.005]],
            "G": [[0.1], [0.005]],
        },
        "horizon": 3,
        "stayIn": {"P": [[0.0, 1.0], [0.0, -1.0]], "p": [2.0, 2.0]},
        "target": {"P": [[0.0, 1.0], [0.0, -1.0]], "p": [2.0, 2.0]},
        "inputSet": {"P": [[1.0], [-1.0]], "p": [5.0, 5.0]},
        "xi": 0.1,
        "fixedRisks": {"input": 0.01, "terminal": 0.01},
        "weights": {"R": [[0.05]], "riskWeightStayIn": 1.0},
        "gainGrid": {"count": 1, "rMin": 0.2, "rMax": 0.2,
                     "qfDiag": [0, "r"], "rfDiag": ["r"], "seed": 0},
        "x0": [0.0, 0.0],
        "formulation": "log",
        "seed": 7,
    }


@pytest.fixture
def tiny_scenario_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(make_tiny_scenario_doc(), indent=2) + "\n")
    return path
