"""JSON run configuration for the command line.

All rates and frequencies are in units of the cavity decay rate ``kappa`` and
times in ``1/kappa``.  Complex numbers may be written as ``[re, im]``, as a
plain number or as a string such as ``"-0.29+0.25i"``.
"""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .channel import NoiseConfig
from .cqed import PhysicalParams
from .mcwf import IntegratorConfig
from .protocol import QubitInput

MODES = ("protocol", "physical", "env-check", "pulse-design", "oracle-compare")

DEFAULT_PHYSICAL_CASES = [
    {"name": "ideal", "kappa_loss": 0.0, "Gamma": 0.0, "rabi_scale": 1.0},
    {"name": "loss1", "kappa_loss": 1.0, "Gamma": 0.0, "rabi_scale": 1.0},
    {"name": "loss10", "kappa_loss": 10.0, "Gamma": 0.0, "rabi_scale": 1.0},
    {"name": "spont_rabi_error", "kappa_loss": 1.0, "Gamma": 1.0, "rabi_scale": 1.1},
]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


@dataclass
class RunConfig:
    mode: str
    seed: int
    qubit: QubitInput
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    physical: PhysicalParams = field(default_factory=PhysicalParams)
    integrator: IntegratorConfig = field(default_factory=lambda: IntegratorConfig(dt=1e-3, sample_stride=100))
    pulse_file: str | None = None
    gate_time: float = 30.0
    n_runs: int = 100
    max_rounds: int = 100
    out: str = "out"
    physical_cases: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_PHYSICAL_CASES))
    jump_cases: list = field(default_factory=lambda: [1.0, 10.0])
    env_models: list | None = None
    oracle: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def parse_complex(value: Any) -> complex:
    if isinstance(value, bool):
        raise ValueError(f"not a complex number: {value!r}")
    if isinstance(value, (int, float)):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, str):
        return complex(value.replace(" ", "").replace("i", "j"))
    raise ValueError(f"not a complex number: {value!r}")


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def apply_override(doc: dict, assignment: str) -> None:
    """Set ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not an object")
    node[parts[-1]] = value


def _qubit(d: dict) -> QubitInput:
    if "c0_over_sqrt2" in d or "c1_over_sqrt2" in d:
        c0 = parse_complex(d["c0_over_sqrt2"]) * math.sqrt(2)
        c1 = parse_complex(d["c1_over_sqrt2"]) * math.sqrt(2)
    else:
        c0, c1 = parse_complex(d["c0"]), parse_complex(d["c1"])
    return QubitInput.normalized(c0, c1, tol=1e-3)


def _physical(d: dict) -> PhysicalParams:
    known = {"g", "kappa", "kappa_loss_1", "kappa_loss_2", "Gamma", "Delta", "delta"}
    unknown = set(d) - known - {"kappa_loss"}
    if unknown:
        raise KeyError(sorted(unknown)[0])
    kw = {k: float(v) for k, v in d.items() if k in known}
    if "kappa_loss" in d:
        kw.setdefault("kappa_loss_1", float(d["kappa_loss"]))
        kw.setdefault("kappa_loss_2", float(d["kappa_loss"]))
    return PhysicalParams(**kw)


def build(doc: dict, text: str | None = None, source: str | None = None) -> RunConfig:
    """Validate a parsed document; errors name the offending line when known."""

    def fail(key, msg):
        raise ConfigError(msg, _line_of(text, key), source)

    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", 1, source)
    mode = doc.get("mode")
    if mode not in MODES:
        fail("mode", f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    if "seed" not in doc:
        raise ConfigError("an explicit integer 'seed' is required", None, source)
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        fail("seed", f"seed must be a non-negative integer, got {seed!r}")

    try:
        qubit = _qubit(doc.get("qubit", {"c0": 1, "c1": 0}))
    except (KeyError, ValueError, TypeError) as exc:
        fail("qubit", f"invalid qubit: {exc}")
    try:
        noise = NoiseConfig.from_dict(doc.get("noise", {}))
    except (KeyError, ValueError, TypeError) as exc:
        key = "p_nojump" if "p_nojump" in str(exc) else "noise"
        fail(key, f"invalid noise config: {exc}")
    try:
        physical = _physical(doc.get("physical", {}))
    except KeyError as exc:
        fail(exc.args[0], f"unknown physical parameter {exc.args[0]!r}")
    except (ValueError, TypeError) as exc:
        fail("physical", f"invalid physical parameters: {exc}")
    integ = doc.get("integrator", {})
    try:
        integrator = IntegratorConfig(dt=float(integ.get("dt", 1e-3)),
                                      sample_stride=int(integ.get("sample_stride", 100)),
                                      norm_bisection_tol=float(integ.get("norm_bisection_tol", 1e-6)))
    except (ValueError, TypeError) as exc:
        fail("integrator", f"invalid integrator settings: {exc}")

    def positive_int(key, default):
        v = doc.get(key, default)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            fail(key, f"{key} must be a positive integer, got {v!r}")
        return v

    default_runs = {"protocol": 1000, "physical": 4, "env-check": 20, "oracle-compare": 5000}.get(mode, 1)
    gate_time = doc.get("gate_time", 30.0)
    if not isinstance(gate_time, (int, float)) or gate_time <= 0:
        fail("gate_time", f"gate_time must be positive, got {gate_time!r}")
    cases = doc.get("physical_cases", copy.deepcopy(DEFAULT_PHYSICAL_CASES))
    for c in cases:
        if not isinstance(c, dict) or "name" not in c:
            fail("physical_cases", "each physical case needs a 'name'")
    return RunConfig(
        mode=mode, seed=seed, qubit=qubit, noise=noise, physical=physical, integrator=integrator,
        pulse_file=doc.get("pulse_file"), gate_time=float(gate_time),
        n_runs=positive_int("n_runs", default_runs), max_rounds=positive_int("max_rounds", 5 if mode == "physical" else 100),
        out=str(doc.get("out", "out")), physical_cases=cases, jump_cases=list(doc.get("jump_cases", [1.0, 10.0])),
        env_models=doc.get("env_models"), oracle=dict(doc.get("oracle", {})), raw=doc,
    )


def load(path: str | Path | None, overrides=(), mode: str | None = None) -> RunConfig:
    text = None
    source = None
    doc: dict = {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", None, source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", exc.lineno, source)
    if mode is not None:
        if "mode" in doc and doc["mode"] != mode:
            raise ConfigError(f"config is for mode {doc['mode']!r}, not {mode!r}", _line_of(text, "mode"), source)
        doc["mode"] = mode
    for ov in overrides:
        apply_override(doc, ov)
    return build(doc, text, source)
