"""Scenario JSON ingestion and emission.

The file format mirrors :class:`~chancempc.smpc.Scenario` field for field,
with matrices as row-major nested arrays and a version tag.  Validation is
strict: unknown fields are rejected and every error names the offending
field path (``model.A``, ``weights.R``...).  ``save_scenario`` emits a
canonical form (sorted keys, two-space indent) so load/save round-trips
are byte-identical.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .prediction import GainGridSpec, SystemModel
from .smpc import Polytope, Scenario, Weights

SCHEMA_VERSION = 1

_TOP_KEYS = {"version", "model", "horizon", "stayIn", "stayOut", "target",
             "inputSet", "xi", "fixedRisks", "weights", "gainGrid", "x0",
             "formulation", "seed"}
_REQUIRED = _TOP_KEYS - {"stayOut"}


class ScenarioError(ValueError):
    """Scenario file failed validation; ``path`` names the field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _expect_keys(obj: dict, path: str, required: set, allowed: set) -> None:
    if not isinstance(obj, dict):
        raise ScenarioError(path, f"expected an object, got {type(obj).__name__}")
    unknown = set(obj) - allowed
    if unknown:
        raise ScenarioError(path, f"unknown fields {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ScenarioError(path, f"missing required fields {sorted(missing)}")


def _number(obj, path: str) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ScenarioError(path, f"expected a number, got {type(obj).__name__}")
    if not np.isfinite(obj):
        raise ScenarioError(path, "value must be finite")
    return float(obj)


def _integer(obj, path: str) -> int:
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise ScenarioError(path, f"expected an integer, got {type(obj).__name__}")
    return obj


def _vector(obj, path: str, size: int | None = None) -> np.ndarray:
    if not isinstance(obj, list):
        raise ScenarioError(path, "expected an array of numbers")
    vec = np.array([_number(v, f"{path}[{i}]") for i, v in enumerate(obj)])
    if size is not None and vec.size != size:
        raise ScenarioError(path, f"expected {size} entries, got {vec.size}")
    return vec


def _matrix(obj, path: str, rows: int | None = None,
            cols: int | None = None) -> np.ndarray:
    if not isinstance(obj, list) or not obj or not all(
            isinstance(r, list) for r in obj):
        raise ScenarioError(path, "expected a nested array (matrix)")
    width = len(obj[0])
    data = []
    for i, r in enumerate(obj):
        if len(r) != width:
            raise ScenarioError(path, f"ragged rows (row {i} has {len(r)} entries)")
        data.append([_number(v, f"{path}[{i}][{j}]") for j, v in enumerate(r)])
    mat = np.array(data)
    if rows is not None and mat.shape[0] != rows:
        raise ScenarioError(path, f"expected {rows} rows, got {mat.shape[0]}")
    if cols is not None and mat.shape[1] != cols:
        raise ScenarioError(path, f"expected {cols} columns, got {mat.shape[1]}")
    return mat


def _polytope(obj, path: str, dim: int) -> Polytope:
    _expect_keys(obj, path, {"P", "p"}, {"P", "p"})
    P = _matrix(obj["P"], f"{path}.P", cols=dim)
    p = _vector(obj["p"], f"{path}.p", size=P.shape[0])
    try:
        return Polytope(P, p)
    except ValueError as exc:
        raise ScenarioError(path, str(exc)) from None


def parse_scenario(doc: dict, source: str = "scenario") -> Scenario:
    """Validate a decoded JSON document into a Scenario."""
    _expect_keys(doc, source, _REQUIRED, _TOP_KEYS)
    version = _integer(doc["version"], "version")
    if version != SCHEMA_VERSION:
        raise ScenarioError("version", f"unsupported version {version}")

    _expect_keys(doc["model"], "model", {"A", "B", "G"}, {"A", "B", "G"})
    A = _matrix(doc["model"]["A"], "model.A")
    n_x = A.shape[0]
    if A.shape[1] != n_x:
        raise ScenarioError("model.A", f"must be square, got {A.shape[0]}x{A.shape[1]}")
    B = _matrix(doc["model"]["B"], "model.B", rows=n_x)
    G = _matrix(doc["model"]["G"], "model.G", rows=n_x)
    model = SystemModel(A, B, G)

    horizon = _integer(doc["horizon"], "horizon")
    if horizon < 1:
        raise ScenarioError("horizon", "must be >= 1")

    stay_in = _polytope(doc["stayIn"], "stayIn", n_x)
    target = _polytope(doc["target"], "target", n_x)
    input_set = _polytope(doc["inputSet"], "inputSet", model.n_u)
    stay_out = (_polytope(doc["stayOut"], "stayOut", n_x)
                if "stayOut" in doc else None)

    xi = _number(doc["xi"], "xi")
    fr = doc["fixedRisks"]
    _expect_keys(fr, "fixedRisks", {"input", "terminal"}, {"input", "terminal"})
    g_in = _number(fr["input"], "fixedRisks.input")
    g_term = _number(fr["terminal"], "fixedRisks.terminal")

    w = doc["weights"]
    _expect_keys(w, "weights", {"R", "riskWeightStayIn"},
                 {"R", "Q", "riskWeightStayIn", "riskWeightStayOut"})
    R = _matrix(w["R"], "weights.R", rows=model.n_u, cols=model.n_u)
    Q = (_matrix(w["Q"], "weights.Q", rows=n_x, cols=n_x)
         if "Q" in w and w["Q"] is not None else None)
    weights = Weights(R, Q, _number(w["riskWeightStayIn"], "weights.riskWeightStayIn"),
                      _number(w.get("riskWeightStayOut", 1.0),
                              "weights.riskWeightStayOut"))

    gg = doc["gainGrid"]
    _expect_keys(gg, "gainGrid", {"count", "rMin", "rMax", "qfDiag", "rfDiag"},
                 {"count", "rMin", "rMax", "qfDiag", "rfDiag", "seed"})
    seed = _integer(doc["seed"], "seed")

    def template(obj, path, size):
        if not isinstance(obj, list) or len(obj) != size:
            raise ScenarioError(path, f"expected {size} diagonal entries")
        out = []
        for i, v in enumerate(obj):
            if v == "r":
                out.append("r")
            else:
                out.append(_number(v, f"{path}[{i}]"))
        return tuple(out)

    try:
        grid = GainGridSpec(
            count=_integer(gg["count"], "gainGrid.count"),
            r_min=_number(gg["rMin"], "gainGrid.rMin"),
            r_max=_number(gg["rMax"], "gainGrid.rMax"),
            qf_template=template(gg["qfDiag"], "gainGrid.qfDiag", n_x),
            rf_template=template(gg["rfDiag"], "gainGrid.rfDiag", model.n_u),
            seed=_integer(gg.get("seed", seed), "gainGrid.seed"),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError("gainGrid", str(exc)) from None

    x0 = _vector(doc["x0"], "x0", size=n_x)
    formulation = doc["formulation"]
    if formulation not in ("inv", "root", "log"):
        raise ScenarioError("formulation", f"must be inv, root, or log, got {formulation!r}")

    try:
        return Scenario(model=model, horizon=horizon, stay_in=stay_in,
                        target=target, input_set=input_set, xi=xi,
                        gamma_input=g_in, gamma_terminal=g_term,
                        weights=weights, gain_grid=grid, x0=x0,
                        formulation=formulation, seed=seed, stay_out=stay_out)
    except ValueError as exc:
        raise ScenarioError(source, str(exc)) from None


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(str(path), f"cannot read file: {exc}") from None
    if not text.strip():
        raise ScenarioError(str(path), "empty file (expected a scenario object)")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(str(path), f"invalid JSON: {exc}") from None
    return parse_scenario(doc, source=str(path))


def _mat_list(mat: np.ndarray) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(mat)]


def scenario_to_json(scenario: Scenario) -> dict:
    doc = {
        "version": SCHEMA_VERSION,
        "model": {
            "A": _mat_list(scenario.model.A),
            "B": _mat_list(scenario.model.B),
            "G": _mat_list(scenario.model.G),
        },
        "horizon": scenario.horizon,
        "stayIn": {"P": _mat_list(scenario.stay_in.P),
                   "p": [float(v) for v in scenario.stay_in.p]},
        "target": {"P": _mat_list(scenario.target.P),
                   "p": [float(v) for v in scenario.target.p]},
        "inputSet": {"P": _mat_list(scenario.input_set.P),
                     "p": [float(v) for v in scenario.input_set.p]},
        "xi": scenario.xi,
        "fixedRisks": {"input": scenario.gamma_input,
                       "terminal": scenario.gamma_terminal},
        "weights": {
            "R": _mat_list(scenario.weights.R),
            "riskWeightStayIn": scenario.weights.s_stay_in,
            "riskWeightStayOut": scenario.weights.s_stay_out,
        },
        "gainGrid": {
            "count": scenario.gain_grid.count,
            "rMin": scenario.gain_grid.r_min,
            "rMax": scenario.gain_grid.r_max,
            "qfDiag": list(scenario.gain_grid.qf_template),
            "rfDiag": list(scenario.gain_grid.rf_template),
            "seed": scenario.gain_grid.seed,
        },
        "x0": [float(v) for v in scenario.x0],
        "formulation": scenario.formulation,
        "seed": scenario.seed,
    }
    if scenario.weights.Q is not None:
        doc["weights"]["Q"] = _mat_list(scenario.weights.Q)
    if scenario.stay_out is not None:
        doc["stayOut"] = {"P": _mat_list(scenario.stay_out.P),
                          "p": [float(v) for v in scenario.stay_out.p]}
    return doc


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    """Write the canonical JSON form (stable key order and indentation)."""
    Path(path).write_text(
        json.dumps(scenario_to_json(scenario), indent=2, sort_keys=True) + "\n")


def builtin_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (``case1``, ``case2``)."""
    base = resources.files("chancempc") / "scenarios" / f"{name}.json"
    return Path(str(base))
