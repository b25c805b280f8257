"""Scenario configuration: JSON with a versioned schema.

A scenario holds the plant, cost, risk constraints, horizon, initial
condition, tightening settings, simulation settings and a table of named
tube gains. Gains (and the system gain ``K``) are either an explicit
``l x n`` matrix, the string ``"riccati"`` for the LQR gain of the cost, or
``{"riccati": {"Q": ..., "R": ...}}`` for the LQR gain of other weights.
"""

from __future__ import annotations

import contextlib
import copy
import json
import re
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import matrix_kernels as mk
from .errors import ConfigError, DimensionMismatch
from .model import LinearStochasticSystem, QuadCost, RiskConstraints
from .risk import RiskKind, RiskSpec

SCHEMA_VERSION = 1

_matrix = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}
_vector = {"type": "array", "items": {"type": "number"}}
_gain = {
    "oneOf": [
        {"const": "riccati"},
        _matrix,
        {"type": "object", "required": ["riccati"], "additionalProperties": False,
         "properties": {"riccati": {"type": "object", "required": ["Q", "R"], "additionalProperties": False,
                                    "properties": {"Q": _matrix, "R": _matrix}}}},
    ]
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "system", "cost", "constraints", "horizon"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "system": {
            "type": "object", "required": ["A", "B", "Sigma_W"], "additionalProperties": False,
            "properties": {"A": _matrix, "B": _matrix, "Sigma_W": _matrix, "mu_W": _vector, "K": _gain,
                           "noise": {"enum": ["gaussian", "uniform"]}},
        },
        "cost": {"type": "object", "required": ["Q", "R"], "additionalProperties": False,
                 "properties": {"Q": _matrix, "R": _matrix}},
        "constraints": {
            "type": "object", "required": ["risk"], "additionalProperties": False,
            "properties": {
                "risk": {"type": "object", "required": ["kind"], "additionalProperties": False,
                         "properties": {"kind": {"enum": ["e", "expectation", "var", "cvar", "evar"]},
                                        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}},
                "state": {"type": "array", "items": {
                    "type": "object", "required": ["c", "p"], "additionalProperties": False,
                    "properties": {"c": _vector, "p": {"type": "number"}}}},
                "input": {"type": "array", "items": {
                    "type": "object", "required": ["d", "q"], "additionalProperties": False,
                    "properties": {"d": _vector, "q": {"type": "number"}}}},
                "box": {"type": "object", "additionalProperties": False,
                        "properties": {"lower": _vector, "upper": _vector}},
            },
        },
        "horizon": {"type": "integer", "minimum": 1},
        "initial": {"type": "object", "additionalProperties": False,
                    "properties": {"mu_X0": _vector, "Sigma_X0": _matrix}},
        "tightening": {"type": "object", "additionalProperties": False,
                       "properties": {"mode": {"enum": ["gaussian", "mc", "user"]},
                                      "paths": {"type": "integer", "minimum": 1},
                                      "seed": {"type": "integer", "minimum": 0},
                                      "schedule_file": {"type": "string"}}},
        "sim": {"type": "object", "additionalProperties": False,
                "properties": {"paths": {"type": "integer", "minimum": 1},
                               "steps": {"type": "integer", "minimum": 1},
                               "perf_steps": {"type": "integer", "minimum": 1},
                               "risk_steps": {"type": "integer", "minimum": 0},
                               "bootstrap": {"type": "integer", "minimum": 0},
                               "seed": {"type": "integer", "minimum": 0},
                               "exact_cost": {"type": "boolean"}}},
        "gains": {"type": "object", "additionalProperties": _gain},
    },
}

DEFAULTS: dict[str, Any] = {
    "name": "scenario",
    "initial": {},
    "tightening": {"mode": "gaussian", "paths": 100_000, "seed": 7},
    "sim": {"paths": 15_000, "steps": 50, "perf_steps": 1000, "risk_steps": 50, "bootstrap": 200, "seed": 0,
            "exact_cost": False},
    "gains": {},
}


@contextlib.contextmanager
def _invalid(block: str):
    # Model constructors reject bad data with ValueError; in a scenario that is a config error.
    try:
        yield
    except DimensionMismatch:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid {block} block: {exc}") from None


def _locate(text: str | None, path: list) -> str:
    """Best-effort line number of the innermost key of ``path`` in ``text``."""
    if not text:
        return ""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return ""
    needle = json.dumps(keys[-1]) + ":"
    for lineno, line in enumerate(text.splitlines(), 1):
        if needle in line.replace(" :", ":"):
            return f" (line {lineno})"
    return ""


@dataclass
class ScenarioConfig:
    """Validated scenario; ``to_dict`` / ``from_dict`` round-trip exactly."""

    schema_version: int
    name: str
    system: dict
    cost: dict
    constraints: dict
    horizon: int
    initial: dict
    tightening: dict
    sim: dict
    gains: dict

    # -- parsing --------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict, text: str | None = None) -> "ScenarioConfig":
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
        if errors:
            msgs = []
            for e in errors:
                where = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path)
                msgs.append(f"{where}{_locate(text, list(e.absolute_path))}: {e.message}")
            raise ConfigError("invalid config:\n  " + "\n  ".join(msgs))
        full = copy.deepcopy(data)
        for key, val in DEFAULTS.items():
            if isinstance(val, dict):
                full[key] = {**val, **full.get(key, {})}
            else:
                full.setdefault(key, val)
        full["system"].setdefault("K", "riccati")
        full["system"].setdefault("noise", "gaussian")
        full["constraints"].setdefault("state", [])
        full["constraints"].setdefault("input", [])
        full["constraints"]["risk"].setdefault("alpha", 0.4)
        cfg = cls(**full)
        cfg.check_dimensions(text)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data, text)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cls.from_json(text)
        sf = cfg.tightening.get("schedule_file")
        if sf and not Path(sf).is_absolute():
            cfg.tightening["schedule_file"] = str(Path(path).parent / sf)
        return cfg

    @classmethod
    def builtin(cls, name: str = "dcdc") -> "ScenarioConfig":
        text = resources.files("riskmpc.scenarios").joinpath(f"{name}.json").read_text()
        return cls.from_json(text)

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    # -- checks ---------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.system["A"])

    @property
    def l(self) -> int:
        return len(self.system["B"][0])

    def check_dimensions(self, text: str | None = None) -> None:
        n = self.n
        l = len(self.system["B"][0]) if self.system["B"] else 0

        def fail(where, msg):
            loc = _locate(text, re.findall(r"[.](\w+)", where))
            raise ConfigError(f"{where}{loc}: {msg}")

        def mat(value, rows, cols, where):
            try:
                arr = np.array(value, dtype=float) if value is not None else None
            except ValueError:
                arr = None
            if arr is None or arr.ndim != 2 or arr.shape != (rows, cols):
                got = "ragged" if arr is None or arr.ndim != 2 else f"{arr.shape[0]}x{arr.shape[1]}"
                fail(where, f"expected {rows}x{cols}, got {got}")

        def vec(value, size, where):
            if len(value) != size:
                fail(where, f"expected length {size}, got {len(value)}")

        mat(self.system["A"], n, n, "$.system.A")
        mat(self.system["B"], n, l, "$.system.B")
        mat(self.system["Sigma_W"], n, n, "$.system.Sigma_W")
        mat(self.cost["Q"], n, n, "$.cost.Q")
        mat(self.cost["R"], l, l, "$.cost.R")
        if "mu_W" in self.system:
            vec(self.system["mu_W"], n, "$.system.mu_W")
        for label, g in [("$.system.K", self.system["K"])] + [(f"$.gains.{k}", v) for k, v in self.gains.items()]:
            if isinstance(g, list):
                mat(g, l, n, label)
            elif isinstance(g, dict):
                mat(g["riccati"]["Q"], n, n, label + ".riccati.Q")
                mat(g["riccati"]["R"], l, l, label + ".riccati.R")
        for i, row in enumerate(self.constraints["state"]):
            vec(row["c"], n, f"$.constraints.state[{i}].c")
        for i, row in enumerate(self.constraints["input"]):
            vec(row["d"], l, f"$.constraints.input[{i}].d")
        for side in ("lower", "upper"):
            if side in self.constraints.get("box", {}):
                vec(self.constraints["box"][side], l, f"$.constraints.box.{side}")
        if "mu_X0" in self.initial:
            vec(self.initial["mu_X0"], n, "$.initial.mu_X0")
        if "Sigma_X0" in self.initial:
            mat(self.initial["Sigma_X0"], n, n, "$.initial.Sigma_X0")
        if self.tightening["mode"] == "user" and not self.tightening.get("schedule_file"):
            fail("$.tightening.mode", "mode 'user' needs schedule_file")

    # -- model objects --------------------------------------------------
    def gain(self, spec) -> np.ndarray:
        A = np.array(self.system["A"], dtype=float)
        B = np.array(self.system["B"], dtype=float)
        if spec == "riccati":
            return mk.solve_dare(A, B, np.array(self.cost["Q"], float), np.array(self.cost["R"], float))[1]
        if isinstance(spec, dict):
            w = spec["riccati"]
            return mk.solve_dare(A, B, np.array(w["Q"], float), np.array(w["R"], float))[1]
        return np.array(spec, dtype=float)

    def named_gain(self, label: str | None) -> np.ndarray:
        if label is None or label == "K":
            return self.gain(self.system["K"])
        if label not in self.gains:
            raise ConfigError(f"unknown gain label {label!r}; known: {', '.join(['K', *self.gains]) }")
        return self.gain(self.gains[label])

    def system_model(self, gain_label: str | None = None) -> LinearStochasticSystem:
        K = self.named_gain(gain_label)
        with _invalid("system"):
            return LinearStochasticSystem(np.array(self.system["A"], float), np.array(self.system["B"], float),
                                          np.array(self.system["Sigma_W"], float), K,
                                          np.array(self.system["mu_W"], float) if "mu_W" in self.system else None)

    def cost_model(self) -> QuadCost:
        with _invalid("cost"):
            return QuadCost(np.array(self.cost["Q"], float), np.array(self.cost["R"], float))

    def risk_spec(self, kind: str | None = None) -> RiskSpec:
        r = self.constraints["risk"]
        return RiskSpec(RiskKind.parse(kind or r["kind"]), float(r["alpha"]))

    def constraint_model(self, kind: str | None = None) -> RiskConstraints:
        n, l = self.n, self.l
        st, inp = self.constraints["state"], self.constraints["input"]
        box = self.constraints.get("box", {})
        with _invalid("constraints"):
            return RiskConstraints(
                np.array([r["c"] for r in st], float).reshape(len(st), n), [r["p"] for r in st],
                np.array([r["d"] for r in inp], float).reshape(len(inp), l), [r["q"] for r in inp],
                self.risk_spec(kind), box.get("lower"), box.get("upper"))

    def initial_moments(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        mu = np.array(self.initial.get("mu_X0", [0.0] * n), float)
        S = np.array(self.initial.get("Sigma_X0", np.zeros((n, n))), float)
        return mu, S
