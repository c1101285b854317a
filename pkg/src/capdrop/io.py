"""Scenario files (JSON) and run records (CSV)."""

from __future__ import annotations

import csv
import json
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from .harness import RunRecord
from .model import CellParams, ModelError, Network, RampParams, Scenario

CELL_FIELDS = ("v", "w", "x_jam", "x_hi", "x_lo", "beta")


class ScenarioError(ValueError):
    """Malformed scenario document; the message names the field."""


def bundled(name: str) -> Path:
    """Path of a scenario shipped with the package (``three_cell`` ...)."""
    stem = name[:-5] if name.endswith(".json") else name
    return Path(str(resources.files("capdrop") / "scenarios" / f"{stem}.json"))


def _number(value, where: str) -> float:
    if isinstance(value, bool):
        raise ScenarioError(f"{where}: expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            pass
    raise ScenarioError(f"{where}: expected a number, got {value!r}")


def _series(value, K: int, where: str) -> np.ndarray:
    if isinstance(value, list):
        if len(value) != K:
            raise ScenarioError(f"{where}: expected {K} values, got {len(value)}")
        return np.array([_number(v, f"{where}[{k}]") for k, v in enumerate(value)])
    return np.full(K, _number(value, where))


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ScenarioError(f"{where}{key}: missing required field")
    return doc[key]


def parse_scenario(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("document root must be an object")
    h = _number(_require(doc, "h", ""), "h")
    K = _require(doc, "K", "")
    if not isinstance(K, int) or isinstance(K, bool) or K < 1:
        raise ScenarioError(f"K: expected a positive integer, got {K!r}")
    defaults = doc.get("cell_defaults", {})
    raw_cells = _require(doc, "cells", "")
    if not isinstance(raw_cells, list) or not raw_cells:
        raise ScenarioError("cells: expected a non-empty list")
    cells = []
    for i, raw in enumerate(raw_cells):
        merged = {**defaults, **raw}
        where = f"cells[{i}]."
        vals = {f: _number(_require(merged, f, where), where + f)
                for f in CELL_FIELDS}
        cells.append(CellParams(**vals))
    n = len(cells)
    raw_ramps = doc.get("ramps", [{}] * n)
    if not isinstance(raw_ramps, list) or len(raw_ramps) != n:
        raise ScenarioError(f"ramps: expected a list of {n} entries")
    ramps = []
    for i, raw in enumerate(raw_ramps):
        present = raw.get("present", False)
        if not isinstance(present, bool):
            raise ScenarioError(f"ramps[{i}].present: expected a boolean")
        c = _number(raw.get("c", 0.0), f"ramps[{i}].c") if present else 0.0
        ramps.append(RampParams(c=c, present=present))
    net = Network(tuple(cells), tuple(ramps), h)
    lambda0 = _series(doc.get("lambda0", 0.0), K, "lambda0")
    raw_lam = doc.get("lambda", [0.0] * n)
    if not isinstance(raw_lam, list) or len(raw_lam) != n:
        raise ScenarioError(f"lambda: expected a list of {n} series")
    lam = np.column_stack([_series(v, K, f"lambda[{i}]")
                           for i, v in enumerate(raw_lam)])
    x0 = [_number(v, f"x0[{i}]") for i, v in enumerate(_require(doc, "x0", ""))]
    r0 = [_number(v, f"r0[{i}]") for i, v in enumerate(doc.get("r0", [0.0] * n))]
    sigma0 = doc.get("sigma0")
    try:
        return Scenario(net, K, lambda0, lam, x0, r0,
                        None if sigma0 is None else np.array(sigma0),
                        name=str(doc.get("name", "")),
                        controllers=dict(doc.get("controllers", {})))
    except ModelError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return parse_scenario(doc)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def _compact(series: np.ndarray):
    if np.all(series == series[0]):
        return float(series[0])
    return [float(v) for v in series]


def scenario_to_dict(sc: Scenario) -> dict:
    net = sc.network
    doc = {"name": sc.name, "h": net.h, "K": sc.K}
    doc["cells"] = [{f: float(getattr(c, f)) for f in CELL_FIELDS}
                    for c in net.cells]
    doc["ramps"] = [{"present": r.present, "c": float(r.c)} for r in net.ramps]
    doc["lambda0"] = _compact(sc.lambda0)
    doc["lambda"] = [_compact(sc.lam[:, i]) for i in range(net.n)]
    doc["x0"] = [float(v) for v in sc.x0]
    doc["r0"] = [float(v) for v in sc.r0]
    if sc.sigma0 is not None:
        doc["sigma0"] = [int(v) for v in sc.sigma0]
    if sc.controllers:
        doc["controllers"] = sc.controllers
    return doc


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2) + "\n"


def write_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(sc))


def _fmt(v) -> str:
    return f"{float(v):.9g}"


def record_header(n: int, n_ramps: int) -> list[str]:
    cols = ["k"]
    for prefix in ("x", "r", "sigma", "phi"):
        cols += [f"{prefix}_{i}" for i in range(1, n + 1)]
    cols += [f"u_{i}" for i in range(1, n_ramps + 1)]
    return cols + ["exit_flow", "cumulative_exits"]


def write_record(record: RunRecord, path) -> None:
    """One row per timestep: state at ``k``, flows and rates applied at ``k``."""
    n = record.x.shape[1]
    n_ramps = record.u.shape[1]
    cum = record.cumulative
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(record_header(n, n_ramps))
        for k in range(record.steps):
            row = [str(k)]
            row += [_fmt(v) for v in record.x[k]]
            row += [_fmt(v) for v in record.r[k]]
            row += [str(int(v)) for v in record.sigma[k]]
            row += [_fmt(v) for v in record.phi[k]]
            row += [_fmt(v) for v in record.u[k]]
            row += [_fmt(record.exits[k]), _fmt(cum[k])]
            out.writerow(row)


def write_solves(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["step", "wall_time", "nodes", "objective", "status"])
        for s in record.solves:
            out.writerow([s.step, _fmt(s.wall_time), s.nodes, _fmt(s.objective),
                          s.status])


def read_record_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = np.array(body, dtype=float).reshape(len(body), len(header))
    return {name: cols[:, j] for j, name in enumerate(header)}


def summary(record: RunRecord) -> dict:
    return {
        "scenario": record.scenario,
        "controller": record.controller,
        "steps": record.steps,
        "cumulative_exits": record.total_exits,
        "solves": len(record.solves),
        "solve_time": record.solve_time,
        "warnings": sum(s.warning for s in record.solves),
        "aborted": record.aborted,
    }
