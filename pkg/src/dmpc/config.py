"""YAML run configuration.

A config either lists ``agents``/``couplings`` explicitly or names a
``preset`` (see :data:`dmpc.models.PRESETS`) whose output is merged under
the explicit keys. Sections::

    preset: water_tanks
    preset_params: {n: 5}
    horizon: {T: 10.0, N: 21}
    simulation: {dt: 1.0, steps: 20, substeps: 10}
    controller: distributed          # or central
    admm: {q_max: 20, eps: 1e-3, rho0: 1.0, adapt: false, gamma_min: 0.5,
           gamma_max: 2.0, eps0: 1e-8, rho_min: 1e-4, rho_max: 1e6, norm: l2}
    approximation: {cost: false, dynamics: false, constraints: false}
    solver: {max_grad_iters: 10, integrator: rk4, ...}
    agents: [...]
    couplings: [...]
    events: [...]
    network: {coordinator: "127.0.0.1:7000", timeout: 10.0}
    seed: 0
"""

from __future__ import annotations

import copy
import inspect
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .admm import AdmmConfig, NeighborApproxFlags
from .model import ModelError, ProblemDescription
from .models import PRESETS, build_problem
from .simulator import Event
from .solver import SolverConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


ADMM_KEYS = {"q_max": "q_max", "eps": "eps", "rho0": "rho0", "adapt": "adapt_penalty",
             "adapt_penalty": "adapt_penalty", "gamma_min": "gamma_min", "gamma_max": "gamma_max",
             "eps0": "eps0", "rho_min": "rho_min", "rho_max": "rho_max", "norm": "norm"}
SOLVER_KEYS = {f.name for f in fields(SolverConfig)}
TOP_KEYS = {"preset", "preset_params", "horizon", "simulation", "controller", "admm", "approximation",
            "solver", "agents", "couplings", "events", "network", "seed", "agent_overrides"}


@dataclass
class NetworkConfig:
    coordinator: str = "127.0.0.1:0"
    host: str = "127.0.0.1"
    timeout: float = 10.0
    register_timeout: float = 60.0
    idle_timeout: float = 120.0


@dataclass
class RunConfig:
    problem: ProblemDescription
    agents: list
    couplings: list
    dt: float
    steps: int
    substeps: int = 10
    controller: str = "distributed"
    admm: AdmmConfig = AdmmConfig()
    solver: SolverConfig = SolverConfig()
    events: list = field(default_factory=list)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    seed: int = 0
    agent_admm: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML error: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def expand_preset(data: dict) -> dict:
    """Merge the named preset's output under the explicit config keys."""
    name = data.get("preset")
    if name is None:
        return copy.deepcopy(data)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    fn = PRESETS[name]
    params = dict(data.get("preset_params") or {})
    if "seed" in data and "seed" in inspect.signature(fn).parameters:
        params.setdefault("seed", data["seed"])
    try:
        base = fn(**params)
    except TypeError as exc:
        raise ConfigError(f"preset {name!r}: {exc}") from exc
    return _deep_merge(base, {k: v for k, v in data.items() if k not in ("preset", "preset_params")})


def set_override(data: dict, dotted: str, value):
    """``set_override(d, "admm.q_max", 5)``."""
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a section")
    cur[keys[-1]] = value


def _admm(sec: dict, flags: NeighborApproxFlags, problems: list) -> Optional[AdmmConfig]:
    kw = {}
    for k, v in (sec or {}).items():
        if k not in ADMM_KEYS:
            problems.append(f"admm: unknown key {k!r}")
            continue
        kw[ADMM_KEYS[k]] = v
    for k in ("eps", "rho0", "gamma_min", "gamma_max", "eps0", "rho_min", "rho_max"):
        if k in kw:
            try:
                kw[k] = float(kw[k])
            except (TypeError, ValueError):
                problems.append(f"admm.{k}: not a number: {kw[k]!r}")
    try:
        return AdmmConfig(flags=flags, **kw)
    except (TypeError, ValueError) as exc:
        problems.append(f"admm: {exc}")
        return None


def parse_config(data: dict) -> RunConfig:
    """Validate a config mapping; collects every problem before raising."""
    data = expand_preset(data)
    problems = []
    for k in data:
        if k not in TOP_KEYS:
            problems.append(f"unknown top-level key {k!r}")
    hz = data.get("horizon") or {}
    sim = data.get("simulation") or {}
    T, N = hz.get("T"), hz.get("N")
    if not isinstance(T, (int, float)) or T <= 0:
        problems.append(f"horizon.T must be a positive number, got {T!r}")
    if not isinstance(N, int) or N < 2:
        problems.append(f"horizon.N must be an integer >= 2, got {N!r}")
    dt = sim.get("dt", 0.1)
    steps = sim.get("steps", 10)
    if not isinstance(dt, (int, float)) or dt <= 0 or (isinstance(T, (int, float)) and dt > T):
        problems.append(f"simulation.dt must satisfy 0 < dt <= T, got {dt!r}")
    if not isinstance(steps, int) or steps < 0:
        problems.append(f"simulation.steps must be a non-negative integer, got {steps!r}")
    controller = data.get("controller", "distributed")
    if controller not in ("central", "distributed"):
        problems.append(f"controller must be 'central' or 'distributed', got {controller!r}")
    ap = data.get("approximation") or {}
    unknown = set(ap) - {"cost", "dynamics", "constraints"}
    if unknown:
        problems.append(f"approximation: unknown keys {sorted(unknown)}")
    flags = NeighborApproxFlags(bool(ap.get("cost", False)), bool(ap.get("dynamics", False)),
                                bool(ap.get("constraints", False)))
    admm = _admm(data.get("admm"), flags, problems)
    sv = data.get("solver") or {}
    bad = set(sv) - SOLVER_KEYS
    if bad:
        problems.append(f"solver: unknown keys {sorted(bad)}")
    solver = None
    try:
        solver = SolverConfig(**{k: v for k, v in sv.items() if k in SOLVER_KEYS})
    except (TypeError, ValueError) as exc:
        problems.append(f"solver: {exc}")
    agents = data.get("agents") or []
    couplings = data.get("couplings") or []
    if not agents:
        problems.append("no agents defined")
    events = []
    for k, e in enumerate(data.get("events") or []):
        try:
            events.append(Event.from_dict(e))
        except (KeyError, TypeError, ValueError, ModelError) as exc:
            problems.append(f"events[{k}]: {exc}")
    net = data.get("network") or {}
    try:
        network = NetworkConfig(**net)
    except TypeError as exc:
        problems.append(f"network: {exc}")
        network = NetworkConfig()
    agent_admm = {}
    for k, sec in (data.get("agent_overrides") or {}).items():
        cfg = _admm(_deep_merge(data.get("admm") or {}, sec or {}), flags, problems)
        agent_admm[int(k)] = cfg
    problem = None
    if not problems:
        try:
            problem = build_problem(agents, couplings, float(T), int(N))
        except (ModelError, KeyError, TypeError, ValueError) as exc:
            problems.append(f"problem: {exc}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(problem=problem, agents=agents, couplings=couplings, dt=float(dt), steps=int(steps),
                     substeps=int(sim.get("substeps", 10)), controller=controller, admm=admm, solver=solver,
                     events=events, network=network, seed=int(data.get("seed", 0)), agent_admm=agent_admm,
                     raw=data)


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    data = load_yaml(path)
    for k, v in (overrides or {}).items():
        set_override(data, k, v)
    return parse_config(data)
