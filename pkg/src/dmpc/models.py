"""Built-in agent and coupling models with analytic Jacobians, the registry
that builds them from config entries, and the example scenarios as presets.

Agent entries look like::

    {"id": 1, "model": "van_der_pol", "params": {...}, "x0": [...],
     "x_des": [...], "P": [...], "Q": [...], "R": [...],
     "u_min": [...], "u_max": [...]}

Coupling entries are ``{"from": j, "to": i, "model": key, "params": {...}}``
and mean that agent ``j``'s variables enter agent ``i``'s dynamics.
Omitted fields fall back to the model's defaults.
"""

from __future__ import annotations

import copy
import math
from typing import Callable

import numpy as np

from .model import (AgentModel, BoundKernel, CouplingModel, Kernel, ModelError,
                    ProblemDescription, QuadraticCost, require_valid)


def _lead(*arrays):
    shape = arrays[0].shape[:-1]
    for a in arrays[1:]:
        if a.shape[:-1] != shape:
            return np.broadcast_shapes(*(b.shape[:-1] for b in arrays))
    return shape


# ---------------------------------------------------------------- agent kernels

class IntegratorDynamics(Kernel):
    name = "integrator"

    def __init__(self, n=1):
        self.arg_dims = (n, n)
        self.out_dim = n

    def __call__(self, args, p, t):
        return args[1] + 0.0 * args[0]

    def jacobian(self, args, p, t):
        x, u = args
        lead = _lead(x, u)
        n = self.out_dim
        return [np.zeros(lead + (n, n)), np.broadcast_to(np.eye(n), lead + (n, n)).copy()]


class DoubleIntegratorDynamics(Kernel):
    """``x = (p, v)``, ``p' = v``, ``v' = u``."""

    name = "double_integrator"
    arg_dims = (2, 1)
    out_dim = 2

    def __call__(self, args, p, t):
        x, u = args
        lead = _lead(x, u)
        out = np.empty(lead + (2,))
        out[..., 0] = x[..., 1]
        out[..., 1] = u[..., 0]
        return out

    def jacobian(self, args, p, t):
        x, u = args
        lead = _lead(x, u)
        jx = np.zeros(lead + (2, 2))
        jx[..., 0, 1] = 1.0
        ju = np.zeros(lead + (2, 1))
        ju[..., 1, 0] = 1.0
        return [jx, ju]


class SpringMassDynamics(Kernel):
    """Planar point mass ``x = (p_x, v_x, p_y, v_y)`` accelerated by
    ``u = (u_x, u_y)``."""

    name = "spring_mass"
    arg_dims = (4, 2)
    out_dim = 4

    def __call__(self, args, p, t):
        x, u = args
        lead = _lead(x, u)
        out = np.empty(lead + (4,))
        out[..., 0] = x[..., 1]
        out[..., 1] = u[..., 0]
        out[..., 2] = x[..., 3]
        out[..., 3] = u[..., 1]
        return out

    def jacobian(self, args, p, t):
        x, u = args
        lead = _lead(x, u)
        jx = np.zeros(lead + (4, 4))
        jx[..., 0, 1] = 1.0
        jx[..., 2, 3] = 1.0
        ju = np.zeros(lead + (4, 2))
        ju[..., 1, 0] = 1.0
        ju[..., 3, 1] = 1.0
        return [jx, ju]


class SmartGridDynamics(Kernel):
    """Swing dynamics of the phase shift ``x = (phi, phi_dot)``.

    params: ``(I, Omega, kappa, P_source)``.
    """

    name = "smart_grid"
    arg_dims = (2, 1)
    out_dim = 2

    def __call__(self, args, p, t):
        x, u = args
        I, Om, kap, Ps = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
        lead = _lead(x, u)
        out = np.empty(lead + (2,))
        out[..., 0] = x[..., 1]
        out[..., 1] = (u[..., 0] + Ps - kap * Om ** 2) / (I * Om) - 2.0 * kap / I * x[..., 1]
        return out

    def jacobian(self, args, p, t):
        x, u = args
        I, Om, kap = p[..., 0], p[..., 1], p[..., 2]
        lead = _lead(x, u)
        jx = np.zeros(lead + (2, 2))
        jx[..., 0, 1] = 1.0
        jx[..., 1, 1] = -2.0 * kap / I
        ju = np.zeros(lead + (2, 1))
        ju[..., 1, 0] = 1.0 / (I * Om)
        return [jx, ju]


class WaterTankDynamics(Kernel):
    """Tank height ``h' = (u - d) / A``; params ``(A, d)``."""

    name = "water_tank"
    arg_dims = (1, 1)
    out_dim = 1

    def __call__(self, args, p, t):
        x, u = args
        A, d = p[..., 0:1], p[..., 1:2]
        return (u - d) / A + 0.0 * x

    def jacobian(self, args, p, t):
        x, u = args
        A = p[..., 0]
        lead = _lead(x, u)
        ju = np.zeros(lead + (1, 1))
        ju[..., 0, 0] = 1.0 / A
        return [np.zeros(lead + (1, 1)), ju]


class VanDerPolDynamics(Kernel):
    """``x = (p, p_dot)``; ``p'' = a1 (1 - p^2) m - p + u`` with ``m = 1`` in
    the default form and ``m = p_dot`` in the classical oscillator.

    params: ``(alpha1, classical)``.
    """

    name = "van_der_pol"
    arg_dims = (2, 1)
    out_dim = 2

    def __call__(self, args, p, t):
        x, u = args
        a1, classical = p[..., 0], p[..., 1]
        pos, vel = x[..., 0], x[..., 1]
        damp = np.where(classical > 0.5, vel, 1.0)
        lead = _lead(x, u)
        out = np.empty(lead + (2,))
        out[..., 0] = vel
        out[..., 1] = a1 * (1.0 - pos ** 2) * damp - pos + u[..., 0]
        return out

    def jacobian(self, args, p, t):
        x, u = args
        a1, classical = p[..., 0], p[..., 1]
        pos, vel = x[..., 0], x[..., 1]
        cl = classical > 0.5
        damp = np.where(cl, vel, 1.0)
        lead = _lead(x, u)
        jx = np.zeros(lead + (2, 2))
        jx[..., 0, 1] = 1.0
        jx[..., 1, 0] = -2.0 * a1 * pos * damp - 1.0
        jx[..., 1, 1] = np.where(cl, a1 * (1.0 - pos ** 2), 0.0)
        ju = np.zeros(lead + (2, 1))
        ju[..., 1, 0] = 1.0
        return [jx, ju]


class StateUpperBound(Kernel):
    """Inequality ``x_c - x_max <= 0`` for every state component ``c``;
    params hold ``x_max`` per component."""

    def __init__(self, n_x, n_u):
        self.name = f"state_upper_bound{n_x}"
        self.arg_dims = (n_x, n_u)
        self.out_dim = n_x

    def __call__(self, args, p, t):
        return args[0] - p

    def jacobian(self, args, p, t):
        x, u = args
        lead = _lead(x, u)
        n_x, n_u = self.arg_dims
        return [np.broadcast_to(np.eye(n_x), lead + (n_x, n_x)).copy(), np.zeros(lead + (n_x, n_u))]


# -------------------------------------------------------------- coupling kernels

class SpringCoupling(Kernel):
    """Force of a spring relaxed at ``delta0`` between masses ``i`` and ``j``.

    ``params = (c/m, delta0, eps_reg)``; the distance is regularised as
    ``sqrt(dx^2 + dy^2 + eps^2)`` so coincident masses stay finite.
    """

    name = "spring"
    arg_dims = (4, 2, 4, 2)
    out_dim = 4

    def __call__(self, args, p, t):
        xi, _, xj, _ = args
        k, d0, eps = p[..., 0], p[..., 1], p[..., 2]
        dx = xj[..., 0] - xi[..., 0]
        dy = xj[..., 2] - xi[..., 2]
        D = np.sqrt(dx * dx + dy * dy + eps * eps)
        s = k * (1.0 - d0 / D)
        out = np.zeros(_lead(xi, xj) + xi.shape[-1:])
        out[..., 1] = s * dx
        out[..., 3] = s * dy
        return out

    def jacobian(self, args, p, t):
        xi, ui, xj, uj = args
        k, d0, eps = p[..., 0], p[..., 1], p[..., 2]
        dx = xj[..., 0] - xi[..., 0]
        dy = xj[..., 2] - xi[..., 2]
        D = np.sqrt(dx * dx + dy * dy + eps * eps)
        s = k * (1.0 - d0 / D)
        c = k * d0 / D ** 3
        fx_dx = s + c * dx * dx
        fx_dy = c * dx * dy
        fy_dy = s + c * dy * dy
        lead = _lead(xi, xj)
        jj = np.zeros(lead + (4, 4))
        jj[..., 1, 0] = fx_dx
        jj[..., 1, 2] = fx_dy
        jj[..., 3, 0] = fx_dy
        jj[..., 3, 2] = fy_dy
        return [-jj, np.zeros(lead + (4, 2)), jj, np.zeros(lead + (4, 2))]


class PowerLineCoupling(Kernel):
    """Power transfer between generators:
    ``phi_i'' += sign * P_max / (I Omega) * sin(phi_j - phi_i)``.

    ``params = (P_max, I, Omega, sign)``; ``sign = -1`` reproduces the
    published swing equation.
    """

    name = "power_line"
    arg_dims = (2, 1, 2, 1)
    out_dim = 2

    def __call__(self, args, p, t):
        xi, _, xj, _ = args
        pm, I, Om, sg = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
        out = np.zeros(_lead(xi, xj) + xi.shape[-1:])
        out[..., 1] = sg * pm / (I * Om) * np.sin(xj[..., 0] - xi[..., 0])
        return out

    def jacobian(self, args, p, t):
        xi, _, xj, _ = args
        pm, I, Om, sg = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
        g = sg * pm / (I * Om) * np.cos(xj[..., 0] - xi[..., 0])
        lead = _lead(xi, xj)
        ji = np.zeros(lead + (2, 2))
        jj = np.zeros(lead + (2, 2))
        ji[..., 1, 0] = -g
        jj[..., 1, 0] = g
        return [ji, np.zeros(lead + (2, 1)), jj, np.zeros(lead + (2, 1))]


def pipe_flow(dh, g=9.81):
    """Unregularised Torricelli flow term ``sign(dh) sqrt(2 g |dh|)``."""
    return np.sign(dh) * np.sqrt(2.0 * g * np.abs(dh))


def pipe_flow_regularized(dh, g=9.81, eps=1e-6):
    """Smooth odd replacement ``dh sqrt(2 g) / sqrt(|dh| + eps)``."""
    return dh * math.sqrt(2.0 * g) / np.sqrt(np.abs(dh) + eps)


class PipeCoupling(Kernel):
    """Flow from tank ``j`` into tank ``i``; ``params = (a, A, g, eps_reg)``."""

    name = "pipe"
    arg_dims = (1, 1, 1, 1)
    out_dim = 1

    def __call__(self, args, p, t):
        xi, _, xj, _ = args
        a, A, g, eps = p[..., 0:1], p[..., 1:2], p[..., 2:3], p[..., 3:4]
        dh = xj - xi
        return a / A * dh * np.sqrt(2.0 * g) / np.sqrt(np.abs(dh) + eps)

    def jacobian(self, args, p, t):
        xi, _, xj, _ = args
        a, A, g, eps = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
        dh = xj[..., 0] - xi[..., 0]
        ad = np.abs(dh)
        d = a / A * np.sqrt(2.0 * g) * (0.5 * ad + eps) / (ad + eps) ** 1.5
        lead = _lead(xi, xj)
        ji = np.zeros(lead + (1, 1))
        ji[..., 0, 0] = -d
        return [ji, np.zeros(lead + (1, 1)), -ji, np.zeros(lead + (1, 1))]


class LinearCoupling(Kernel):
    """``alpha * (x_j - x_i)`` on the components selected by ``mask``
    (e.g. the Van der Pol position coupling feeding the acceleration)."""

    def __init__(self, name, n_x, n_u, rows):
        # rows: list of (out_row, state_col) pairs
        self.name = name
        self.arg_dims = (n_x, n_u, n_x, n_u)
        self.out_dim = n_x
        self._rows = list(rows)

    def __call__(self, args, p, t):
        xi, _, xj, _ = args
        alpha = p[..., 0]
        out = np.zeros(_lead(xi, xj) + xi.shape[-1:])
        for r, c in self._rows:
            out[..., r] = alpha * (xj[..., c] - xi[..., c])
        return out

    def jacobian(self, args, p, t):
        xi, ui, xj, uj = args
        alpha = p[..., 0]
        n_x, n_u = self.arg_dims[:2]
        lead = _lead(xi, xj)
        jj = np.zeros(lead + (n_x, n_x))
        for r, c in self._rows:
            jj[..., r, c] = alpha
        return [-jj, np.zeros(lead + (n_x, n_u)), jj, np.zeros(lead + (n_x, n_u))]


# kernel singletons: instances sharing a kernel object are evaluated together
DOUBLE_INTEGRATOR = DoubleIntegratorDynamics()
INTEGRATOR = IntegratorDynamics(1)
SPRING_MASS = SpringMassDynamics()
SMART_GRID = SmartGridDynamics()
WATER_TANK = WaterTankDynamics()
VAN_DER_POL = VanDerPolDynamics()
SPRING = SpringCoupling()
POWER_LINE = PowerLineCoupling()
PIPE = PipeCoupling()
VDP_COUPLING = LinearCoupling("vdp_coupling", 2, 1, [(1, 0)])
TANK_LIMIT = StateUpperBound(1, 1)


# ---------------------------------------------------------------- registry

def _arr(v, n, default):
    if v is None:
        v = default
    arr = np.atleast_1d(np.asarray(v, dtype=float)).ravel()
    if arr.shape[0] == 1 and n > 1:
        arr = np.repeat(arr, n)
    return arr


AGENT_DEFAULTS = {
    "integrator": dict(n_x=1, n_u=1, params={}, P=[0.0], Q=[1.0], R=[1.0]),
    "double_integrator": dict(n_x=2, n_u=1, params={}, P=[1.0, 1.0], Q=[1.0, 1.0], R=[0.1]),
    "spring_mass": dict(n_x=4, n_u=2, params={}, P=[1, 1, 1, 1], Q=[5, 2, 5, 2], R=[0.01, 0.01]),
    "smart_grid": dict(n_x=2, n_u=1, params=dict(I=1.0, Omega=1.0, kappa=1e-3, P_source=0.0),
                       P=[0.0, 0.1], Q=[0.0, 1.0], R=[0.01]),
    "water_tank": dict(n_x=1, n_u=1, params=dict(A=0.1, d=0.0, h_max=3.0), P=[0.0], Q=[0.0], R=[0.0]),
    "van_der_pol": dict(n_x=2, n_u=1, params=dict(alpha1=1.0, classical_vdp=False),
                        P=[1.0, 1.0], Q=[1.0, 1.0], R=[0.1]),
}

COUPLING_DEFAULTS = {
    "spring": dict(c=0.5, m=7.5, delta0=1.0, eps_reg=1e-6),
    "power_line": dict(P_max=0.1, I=1.0, Omega=1.0, sign=-1.0),
    "pipe": dict(a=0.005, A=0.1, g=9.81, eps_reg=1e-6),
    "vdp_coupling": dict(alpha2=1.0),
}

_AGENT_BUILDERS: dict[str, Callable] = {}
_COUPLING_BUILDERS: dict[str, Callable] = {}


def register_agent_model(key: str, builder: Callable, defaults: dict):
    """Register ``builder(params) -> (dynamics BoundKernel, eq, ineq)`` under
    ``key``; ``defaults`` needs ``n_x``, ``n_u``, ``params`` and P/Q/R."""
    AGENT_DEFAULTS[key] = defaults
    _AGENT_BUILDERS[key] = builder


def register_coupling_model(key: str, builder: Callable, defaults: dict):
    """Register ``builder(params, owner_spec, neighbor_spec) -> (dyn, eq, ineq)``."""
    COUPLING_DEFAULTS[key] = defaults
    _COUPLING_BUILDERS[key] = builder


def _agent_kernels(key, prm):
    if key == "integrator":
        return BoundKernel(INTEGRATOR), None, None
    if key == "double_integrator":
        return BoundKernel(DOUBLE_INTEGRATOR), None, None
    if key == "spring_mass":
        return BoundKernel(SPRING_MASS), None, None
    if key == "smart_grid":
        p = np.array([prm["I"], prm["Omega"], prm["kappa"], prm["P_source"]], dtype=float)
        return BoundKernel(SMART_GRID, p), None, None
    if key == "water_tank":
        dyn = BoundKernel(WATER_TANK, np.array([prm["A"], prm["d"]], dtype=float))
        h_max = prm.get("h_max")
        ineq = None if h_max is None else BoundKernel(TANK_LIMIT, np.array([h_max], dtype=float))
        return dyn, None, ineq
    if key == "van_der_pol":
        p = np.array([prm["alpha1"], 1.0 if prm["classical_vdp"] else 0.0])
        return BoundKernel(VAN_DER_POL, p), None, None
    if key in _AGENT_BUILDERS:
        return _AGENT_BUILDERS[key](prm)
    raise ModelError(f"unknown agent model {key!r}")


def make_agent(spec: dict) -> AgentModel:
    """Build an :class:`AgentModel` from a config entry."""
    key = spec.get("model")
    if key not in AGENT_DEFAULTS:
        raise ModelError(f"unknown agent model {key!r}")
    d = AGENT_DEFAULTS[key]
    prm = dict(d["params"])
    prm.update(spec.get("params") or {})
    n_x, n_u = int(d["n_x"]), int(d["n_u"])
    dyn, eq, ineq = _agent_kernels(key, prm)
    x0 = _arr(spec.get("x0"), n_x, np.zeros(n_x))
    x_des = _arr(spec.get("x_des"), n_x, np.zeros(n_x))
    cost = QuadraticCost(_arr(spec.get("P"), n_x, d["P"]), _arr(spec.get("Q"), n_x, d["Q"]),
                         _arr(spec.get("R"), n_u, d["R"]), x_des)
    u_min = _arr(spec.get("u_min"), n_u, -np.inf * np.ones(n_u))
    u_max = _arr(spec.get("u_max"), n_u, np.inf * np.ones(n_u))
    return AgentModel(id=int(spec["id"]), n_x=n_x, n_u=n_u, dynamics=dyn, cost=cost, x0=x0,
                      u_min=u_min, u_max=u_max, x_des=x_des, eq=eq, ineq=ineq,
                      spec=copy.deepcopy(spec))


def make_coupling(spec: dict, agents=None) -> CouplingModel:
    """Build a :class:`CouplingModel` from ``{"from": j, "to": i, ...}``."""
    key = spec.get("model")
    if key not in COUPLING_DEFAULTS:
        raise ModelError(f"unknown coupling model {key!r}")
    prm = dict(COUPLING_DEFAULTS[key])
    prm.update(spec.get("params") or {})
    owner, neighbor = int(spec["to"]), int(spec["from"])
    eq = ineq = None
    if key == "spring":
        dyn = BoundKernel(SPRING, np.array([prm["c"] / prm["m"], prm["delta0"], prm["eps_reg"]]))
    elif key == "power_line":
        dyn = BoundKernel(POWER_LINE, np.array([prm["P_max"], prm["I"], prm["Omega"], prm["sign"]]))
    elif key == "pipe":
        dyn = BoundKernel(PIPE, np.array([prm["a"], prm["A"], prm["g"], prm["eps_reg"]]))
    elif key == "vdp_coupling":
        dyn = BoundKernel(VDP_COUPLING, np.array([prm["alpha2"]]))
    else:
        owner_spec = agents.get(owner) if agents else None
        neighbor_spec = agents.get(neighbor) if agents else None
        dyn, eq, ineq = _COUPLING_BUILDERS[key](prm, owner_spec, neighbor_spec)
    clean = {k: v for k, v in spec.items() if k != "bidirectional"}
    return CouplingModel(owner=owner, neighbor=neighbor, dynamics=dyn, eq=eq, ineq=ineq, spec=clean)


def expand_couplings(entries) -> list[dict]:
    """Expand ``bidirectional: true`` entries into two directed entries."""
    out = []
    for e in entries or []:
        e = dict(e)
        bidi = e.pop("bidirectional", False)
        out.append(e)
        if bidi:
            rev = dict(e)
            rev["from"], rev["to"] = e["to"], e["from"]
            out.append(rev)
    return out


def build_problem(agent_specs, coupling_specs, T: float, N: int) -> ProblemDescription:
    agents = {}
    for s in agent_specs:
        a = make_agent(s)
        if a.id in agents:
            raise ModelError(f"duplicate agent id {a.id}")
        agents[a.id] = a
    couplings = {}
    for s in expand_couplings(coupling_specs):
        c = make_coupling(s, agents)
        couplings[(c.owner, c.neighbor)] = c
    return require_valid(ProblemDescription(agents=agents, couplings=couplings, T=float(T), N=int(N)))


# ---------------------------------------------------------------- presets

def spring_mass(rows: int = 4, cols: int = 4, *, T: float = 1.0, N: int = 11, offset: float = 0.3,
                u_bound: float = 10.0, c: float = 0.5, m: float = 7.5, delta0: float = 1.0,
                seed: int = 0) -> dict:
    """Grid of masses joined by springs to their 4-neighbors.

    Desired positions sit on a grid of spacing ``delta0`` (relaxed springs);
    initial positions are displaced by a seeded uniform offset in
    ``[-offset, offset]`` per axis.
    """
    rng = np.random.default_rng(seed)
    agents, couplings = [], []

    def aid(r, q):
        return r * cols + q + 1

    for r in range(rows):
        for q in range(cols):
            px, py = q * delta0, r * delta0
            dx, dy = rng.uniform(-offset, offset, size=2)
            agents.append({
                "id": aid(r, q), "model": "spring_mass",
                "x0": [px + dx, 0.0, py + dy, 0.0], "x_des": [px, 0.0, py, 0.0],
                "u_min": [-u_bound, -u_bound], "u_max": [u_bound, u_bound],
            })
            prm = {"c": c, "m": m, "delta0": delta0}
            if q + 1 < cols:
                couplings.append({"from": aid(r, q + 1), "to": aid(r, q), "model": "spring",
                                  "params": prm, "bidirectional": True})
            if r + 1 < rows:
                couplings.append({"from": aid(r + 1, q), "to": aid(r, q), "model": "spring",
                                  "params": prm, "bidirectional": True})
    return {"horizon": {"T": T, "N": N}, "agents": agents, "couplings": couplings}


def smart_grid(*, T: float = 15.0, N: int = 21, P_sink: float = -0.02, plug_time: float = 20.0,
               u_bound: float = 1.0) -> dict:
    """Power plant (id 1) feeding sink 1 (id 2); sink 2 (id 3) is plugged to
    sink 1 at ``plug_time``.

    With the line term as written the zero-angle equilibrium is open-loop
    unstable; receding-horizon LQ on the linearization only stabilizes it
    for horizons of about 10 s and more, hence the long default ``T``.
    """

    def sink(i):
        return {"id": i, "model": "smart_grid", "params": {"P_source": P_sink},
                "x0": [0.0, 0.0], "x_des": [0.0, 0.0], "u_min": [0.0], "u_max": [0.0]}

    plant = {"id": 1, "model": "smart_grid", "params": {"P_source": 0.0},
             "x0": [0.0, 0.0], "x_des": [0.0, 0.0], "u_min": [-u_bound], "u_max": [u_bound]}
    return {
        "horizon": {"T": T, "N": N},
        "agents": [plant, sink(2)],
        "couplings": [{"from": 2, "to": 1, "model": "power_line", "bidirectional": True}],
        "events": [{"time": plug_time, "action": "add", "agent": sink(3),
                    "couplings": [{"from": 3, "to": 2, "model": "power_line", "bidirectional": True}]}],
    }


def water_tanks(n: int = 5, *, T: float = 10.0, N: int = 21, h0=None, d_last: float = 0.01,
                h_des: float = 3.0, h_max: float = 3.0, u_max: float = 0.1, eps_reg: float = 0.03) -> dict:
    """Chain of ``n`` tanks joined by pipes; only tank 1 is actuated and only
    the last tank is disturbed and has a desired height.

    The heights start 0.2 m apart, roughly the head that carries the
    outflow ``d_last`` through each pipe. ``eps_reg`` is coarse on purpose:
    near equal heights the pipe term has slope ``~1/sqrt(eps_reg)``, and
    explicit RK4 on the default grid is only stable for ``eps_reg >~ 0.025``.
    """
    if h0 is None:
        h0 = [2.0 + 0.2 * (n - 1 - k) for k in range(n)]
    agents = []
    for i in range(1, n + 1):
        first, last = i == 1, i == n
        agents.append({
            "id": i, "model": "water_tank",
            "params": {"A": 0.1, "d": d_last if last else 0.0, "h_max": h_max},
            "x0": [h0[i - 1]], "x_des": [h_des if last else 0.0],
            "P": [1.0 if last else 0.0], "Q": [1.0 if last else 0.0], "R": [0.1 if first else 0.0],
            "u_min": [0.0], "u_max": [u_max if first else 0.0],
        })
    couplings = [{"from": i + 1, "to": i, "model": "pipe", "params": {"eps_reg": eps_reg},
                  "bidirectional": True} for i in range(1, n)]
    return {"horizon": {"T": T, "N": N}, "agents": agents, "couplings": couplings}


def van_der_pol(n: int = 3, *, T: float = 2.0, N: int = 21, classical: bool = False,
                u_bound: float = 10.0, x0=None) -> dict:
    """Chain of ``n`` coupled Van der Pol oscillators."""
    if x0 is None:
        x0 = [[1.0 - 0.5 * k, 0.0] for k in range(n)]
    agents = [{"id": i + 1, "model": "van_der_pol", "params": {"classical_vdp": classical},
               "x0": list(x0[i]), "x_des": [0.0, 0.0], "u_min": [-u_bound], "u_max": [u_bound]}
              for i in range(n)]
    couplings = [{"from": i + 1, "to": i, "model": "vdp_coupling", "bidirectional": True}
                 for i in range(1, n)]
    return {"horizon": {"T": T, "N": N}, "agents": agents, "couplings": couplings}


def double_integrator(*, T: float = 2.0, N: int = 21, x0=(1.0, 0.0), u_bound: float = float("inf")) -> dict:
    """A single isolated double integrator."""
    agent = {"id": 1, "model": "double_integrator", "x0": list(x0), "x_des": [0.0, 0.0],
             "u_min": [-u_bound], "u_max": [u_bound]}
    return {"horizon": {"T": T, "N": N}, "agents": [agent], "couplings": []}


PRESETS = {
    "spring_mass": spring_mass,
    "smart_grid": smart_grid,
    "water_tanks": water_tanks,
    "van_der_pol": van_der_pol,
    "double_integrator": double_integrator,
}
