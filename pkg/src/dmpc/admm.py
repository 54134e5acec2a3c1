"""One agent's share of the distributed ADMM iteration.

Consistency constraints are organised in *slots*. A slot is one consensus
variable ``z`` with an owner (the agent whose original variable it is) and
holders (agents that keep a local copy of it):

* ``("x", o)`` / ``("u", o)``: state / control of agent ``o``;
* ``("v", o, h)``: the external influence ``v_oh`` of agent ``o``, held only
  by neighbor ``h`` (used with neighbor-dynamics approximation).

Every agent keeps ``y`` (its actual or copied value), ``mu`` and ``rho`` for
each slot it takes part in. The owner additionally caches the holders'
copies, multipliers and penalties it needs for the coupling update.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .central import Layout, TermCollector, add_agent_cost, agent_cost
from .model import ModelError, ProblemDescription, identity_kernel
from .ocp import OcpInstance, Penalty, TermSet
from .solver import SolverConfig, augmented_lagrangian
from .trajectory import shift_values, trapezoid_weights, write_csv


@dataclass(frozen=True)
class NeighborApproxFlags:
    approx_cost: bool = False
    approx_dynamics: bool = False
    approx_constraints: bool = False

    @property
    def any(self) -> bool:
        return self.approx_cost or self.approx_dynamics or self.approx_constraints

    @classmethod
    def full(cls) -> "NeighborApproxFlags":
        return cls(True, True, True)


@dataclass(frozen=True)
class AdmmConfig:
    q_max: int = 20
    eps: float = 1e-3
    rho0: float = 1.0
    adapt_penalty: bool = False
    gamma_min: float = 0.5
    gamma_max: float = 2.0
    eps0: float = 1e-8
    rho_min: float = 1e-4
    rho_max: float = 1e6
    norm: str = "l2"
    flags: NeighborApproxFlags = NeighborApproxFlags()

    def __post_init__(self):
        if self.q_max < 1:
            raise ValueError("q_max must be >= 1")
        if not self.eps >= 0:
            raise ValueError("eps must be >= 0")
        if not (0 < self.rho_min <= self.rho0 <= self.rho_max):
            raise ValueError("need 0 < rho_min <= rho0 <= rho_max")
        if not (0 < self.gamma_min <= 1.0 <= self.gamma_max):
            raise ValueError("need 0 < gamma_min <= 1 <= gamma_max")
        if self.norm not in ("l2", "sup"):
            raise ValueError("norm must be 'l2' or 'sup'")


# ---------------------------------------------------------------- closed-form steps

def coupling_update(own, mu, rho, copies=()):
    """Coupling variable of one slot.

    ``z = (own - mu/rho + sum_h (copy_h - mu_h/rho_h)) / (1 + #copies)``
    where ``copies`` is a sequence of ``(copy, mu_h, rho_h)``.
    """
    acc = np.asarray(own, dtype=float) - np.asarray(mu, dtype=float) / rho
    for y, m, r in copies:
        acc = acc + (np.asarray(y, dtype=float) - np.asarray(m, dtype=float) / r)
    return acc / (1.0 + len(copies))


def multiplier_update(mu, rho, z, actual):
    """``mu + rho (z - actual)``."""
    return mu + rho * (z - actual)


def adapt_penalty(rho_prev, r, s, gamma_min, gamma_max, eps0, rho_min=1e-4, rho_max=1e6):
    """Residual balancing, element-wise and per time step: where
    ``|s| > eps0`` the penalty is scaled by ``clamp(|r|/|s|, gamma_min,
    gamma_max)``, elsewhere it is kept; the result is clamped to
    ``[rho_min, rho_max]``."""
    r, s = np.abs(r), np.abs(s)
    big = s > eps0
    gamma = np.ones(np.broadcast_shapes(r.shape, s.shape))
    gamma[big] = np.clip(r[big] / s[big], gamma_min, gamma_max)
    return np.clip(gamma * rho_prev, rho_min, rho_max)


def _sq_integral(d, w):
    return float(w @ (d * d).reshape(d.shape[0], -1).sum(axis=1))


def diff_norm(pairs, T, kind="l2"):
    total = 0.0
    for a, b in pairs:
        d = a - b
        if kind == "l2":
            total += _sq_integral(d, trapezoid_weights(T, a.shape[0]))
        elif d.size:
            total = max(total, float(np.max(np.abs(d))))
    return math.sqrt(total) if kind == "l2" else total


def local_convergence(z, z_prev, mu, mu_prev, eps, T=None, kind="l2") -> bool:
    """``|[z - z_prev; mu - mu_prev]| <= eps``. Arguments may be
    Trajectories or lists of grid arrays (then ``T`` is required)."""
    if math.isinf(eps):
        return True
    from .trajectory import Trajectory, stacked_diff_norm
    if isinstance(z, Trajectory):
        return stacked_diff_norm([(z, z_prev), (mu, mu_prev)], kind) <= eps
    pairs = list(zip(z, z_prev)) + list(zip(mu, mu_prev))
    return diff_norm(pairs, T, kind) <= eps


def external_influence(problem: ProblemDescription, i, x_i, u_i, copies: dict, exclude):
    """``v_i,exclude = sum_{s in sending(i) - {exclude}} f_is(x_i, u_i, xbar_s, ubar_s)``
    on the grid; ``copies[s] = (xbar_s, ubar_s)``."""
    x_i = np.asarray(x_i, dtype=float)
    out = np.zeros_like(x_i)
    for s in problem.sending(i):
        if s == exclude:
            continue
        c = problem.coupling(i, s)
        if c is None or c.dynamics is None:
            continue
        xs, us = copies[s]
        out = out + c.dynamics(x_i, u_i, xs, us)
    return out


# ---------------------------------------------------------------- local OCP

@dataclass
class SlotSpec:
    key: tuple
    owner: int
    dim: int
    holders: tuple   # only meaningful for original slots
    is_copy: bool
    penalty: Penalty = None


def copy_set(problem: ProblemDescription, i, flags: NeighborApproxFlags) -> list:
    """Agents whose variables agent ``i`` keeps local copies of."""
    return problem.neighbors(i) if flags.any else problem.sending(i)


def holders_of(problem: ProblemDescription, o, flags: NeighborApproxFlags) -> list:
    """Agents holding a copy of agent ``o``'s state/control."""
    return problem.neighbors(o) if flags.any else problem.receiving(o)


def build_local_ocp(problem: ProblemDescription, i, flags: NeighborApproxFlags = NeighborApproxFlags(),
                    states: Optional[dict] = None, degrees: Optional[dict] = None):
    """Agent ``i``'s decoupled local OCP.

    ``degrees`` overrides neighbor counts used for cost weights, for agents
    that only know a local view of the network.

    Returns ``(instance, layout, slots)``; every slot's penalty is attached
    to the instance and reads its ``z``, ``mu``, ``rho`` arrays from the
    :class:`Penalty` object, which the caller fills before solving.
    """
    if i not in problem.agents:
        raise ModelError(f"unknown agent {i}")
    a = problem.agents[i]
    N = problem.N
    S = problem.sending(i)
    C = copy_set(problem, i, flags)
    nbrs = problem.neighbors(i)
    dyn_approx = flags.approx_dynamics
    states = states or {}

    lay = Layout()
    lay.add_state(("x", i), a.n_x)
    if dyn_approx:
        for j in C:
            lay.add_state(("x", j), problem.agents[j].n_x)
    lay.add_control(("u", i), a.n_u)
    for j in C:
        aj = problem.agents[j]
        lay.add_control(("u", j), aj.n_u)
        if dyn_approx:
            lay.add_control(("v", j), aj.n_x)
        else:
            lay.add_control(("x", j), aj.n_x)
    n_v = lay.n_v
    xi, ui = lay.idx(("x", i)), lay.idx(("u", i))

    dyn = TermSet(n_v, lay.n_x)
    dyn.add(a.dynamics, [xi, ui], xi)
    for j in S:
        c = problem.coupling(i, j)
        if c.dynamics is not None:
            dyn.add(c.dynamics, [xi, ui, lay.idx(("x", j)), lay.idx(("u", j))], xi)
    if dyn_approx:
        for j in C:
            aj = problem.agents[j]
            xj, uj = lay.idx(("x", j)), lay.idx(("u", j))
            dyn.add(aj.dynamics, [xj, uj], xj)
            c = problem.coupling(j, i)
            if c is not None and c.dynamics is not None:
                dyn.add(c.dynamics, [xj, uj, xi, ui], xj)
            dyn.add(identity_kernel(aj.n_x), [lay.idx(("v", j))], xj)

    eqc, inc = TermCollector(), TermCollector()
    eqc.add(a.eq, [xi, ui])
    inc.add(a.ineq, [xi, ui])
    for j in S:
        c = problem.coupling(i, j)
        args = [xi, ui, lay.idx(("x", j)), lay.idx(("u", j))]
        eqc.add(c.eq, args)
        inc.add(c.ineq, args)
    if flags.approx_constraints:
        for j in C:
            aj = problem.agents[j]
            xj, uj = lay.idx(("x", j)), lay.idx(("u", j))
            eqc.add(aj.eq, [xj, uj])
            inc.add(aj.ineq, [xj, uj])
            c = problem.coupling(j, i)
            if c is not None:
                eqc.add(c.eq, [xj, uj, xi, ui])
                inc.add(c.ineq, [xj, uj, xi, ui])

    x0 = [np.asarray(states.get(i, a.x0), dtype=float)]
    if dyn_approx:
        x0 += [np.asarray(states.get(j, problem.agents[j].x0), dtype=float) for j in C]
    lo = np.full(lay.n_u, -np.inf)
    hi = np.full(lay.n_u, np.inf)
    lo[lay.uidx(("u", i))], hi[lay.uidx(("u", i))] = a.u_min, a.u_max
    for j in C:
        aj = problem.agents[j]
        lo[lay.uidx(("u", j))], hi[lay.uidx(("u", j))] = aj.u_min, aj.u_max
    inst = OcpInstance(lay.n_x, lay.n_u, problem.T, N, np.concatenate(x0), lo, hi, dyn)

    if flags.approx_cost:
        add_agent_cost(inst, xi, ui, a, 1.0 / (1 + len(nbrs)))
        for j in C:
            deg = (degrees or {}).get(j, len(problem.neighbors(j)))
            eta_j = 1.0 / (1 + deg)
            add_agent_cost(inst, lay.idx(("x", j)), lay.idx(("u", j)), problem.agents[j], eta_j)
    else:
        add_agent_cost(inst, xi, ui, a)
    inst.set_constraints(eqc.build(n_v), inc.build(n_v))

    slots = []
    hold = tuple(holders_of(problem, i, flags))
    if not dyn_approx:
        slots.append(SlotSpec(("x", i), i, a.n_x, hold, False, Penalty(("x", i), a.n_x, N, sel=xi)))
    slots.append(SlotSpec(("u", i), i, a.n_u, hold, False, Penalty(("u", i), a.n_u, N, sel=ui)))
    if dyn_approx:
        for j in nbrs:
            ts = TermSet(n_v, a.n_x)
            for s in S:
                if s == j:
                    continue
                c = problem.coupling(i, s)
                if c.dynamics is not None:
                    ts.add(c.dynamics, [xi, ui, lay.idx(("x", s)), lay.idx(("u", s))], np.arange(a.n_x))
            slots.append(SlotSpec(("v", i, j), i, a.n_x, (j,), False, Penalty(("v", i, j), a.n_x, N, terms=ts)))
    for j in C:
        aj = problem.agents[j]
        slots.append(SlotSpec(("u", j), j, aj.n_u, (), True, Penalty(("u", j), aj.n_u, N, sel=lay.idx(("u", j)))))
        if dyn_approx:
            slots.append(SlotSpec(("v", j, i), j, aj.n_x, (), True,
                                  Penalty(("v", j, i), aj.n_x, N, sel=lay.idx(("v", j)))))
        else:
            slots.append(SlotSpec(("x", j), j, aj.n_x, (), True,
                                  Penalty(("x", j), aj.n_x, N, sel=lay.idx(("x", j)))))
    inst.penalties = [s.penalty for s in slots]
    inst.check()
    return inst, lay, slots


# ---------------------------------------------------------------- agent state

class SlotState:
    """Numerical data of one slot at one agent."""

    __slots__ = ("spec", "y", "z", "z_prev", "mu", "mu_prev", "rho", "holder_y", "holder_mu", "holder_rho",
                 "z_fresh", "r_norm", "s_norm")

    def __init__(self, spec: SlotSpec, z0, rho0):
        self.spec = spec
        self.y = z0.copy()
        self.z = z0.copy()
        self.z_prev = z0.copy()
        self.mu = np.zeros_like(z0)
        self.mu_prev = np.zeros_like(z0)
        self.rho = np.full_like(z0, rho0)
        self.holder_y: dict = {}
        self.holder_mu: dict = {h: np.zeros_like(z0) for h in spec.holders}
        self.holder_rho: dict = {h: np.full_like(z0, rho0) for h in spec.holders}
        self.z_fresh = False
        self.r_norm = 0.0
        self.s_norm = 0.0


@dataclass
class IterationRecord:
    q: int
    local_cost: float
    residual: float
    r_norm: float
    s_norm: float
    rho_min: float
    rho_max: float
    solver_iters: int
    solve_time: float
    converged: bool


class AdmmAgent:
    """ADMM state and computations of one agent (no communication)."""

    def __init__(self, problem: ProblemDescription, agent_id: int, config: AdmmConfig = AdmmConfig(),
                 solver: SolverConfig = SolverConfig(max_grad_iters=10), states: Optional[dict] = None,
                 degrees: Optional[dict] = None):
        self.id = agent_id
        self.degrees = dict(degrees or {})
        self.cfg = config
        self.solver = solver
        self.problem = None
        self.slots: dict = {}
        self._warm_u = None
        self._al = None
        self._alpha = None
        self.states = dict(states or {})
        self.x = None
        self.u = None
        self.q = 0
        self.history: list[IterationRecord] = []
        self.last_solve_time = 0.0
        self.last_solver_iters = 0
        self.last_stalled = False
        self.local_cost = math.nan
        self.rebuilds = 0
        self.rebuild(problem)

    # -- structure
    @property
    def agent(self):
        return self.problem.agents[self.id]

    def _initial_guess(self, key):
        N = self.problem.N
        kind, o = key[0], key[1]
        ao = self.problem.agents[o]
        if kind == "x":
            x0 = np.asarray(self.states.get(o, ao.x0), dtype=float)
            return np.tile(x0, (N, 1))
        if kind == "u":
            return np.tile(np.clip(np.zeros(ao.n_u), ao.u_min, ao.u_max), (N, 1))
        return np.zeros((N, ao.n_x))

    def rebuild(self, problem: ProblemDescription, degrees: Optional[dict] = None):
        """(Re)generate the local OCP, keeping data of surviving slots and
        control blocks."""
        if degrees is not None:
            self.degrees = dict(degrees)
        inst, lay, specs = build_local_ocp(problem, self.id, self.cfg.flags, self.states, self.degrees)
        old_slots, old_lay, old_u = self.slots, getattr(self, "layout", None), self._warm_u
        self.problem, self.inst, self.layout = problem, inst, lay
        slots = {}
        for spec in specs:
            if spec.key in old_slots:
                st = old_slots[spec.key]
                st.spec = spec
                st.holder_mu = {h: st.holder_mu.get(h, np.zeros_like(st.z)) for h in spec.holders}
                st.holder_rho = {h: st.holder_rho.get(h, np.full_like(st.z, self.cfg.rho0)) for h in spec.holders}
                st.holder_y = {h: v for h, v in st.holder_y.items() if h in spec.holders}
            else:
                st = SlotState(spec, self._initial_guess(spec.key), self.cfg.rho0)
            slots[spec.key] = st
        self.slots = slots
        u = np.zeros((problem.N, lay.n_u))
        for key in lay.controls():
            idx = lay.uidx(key)
            if old_lay is not None and old_u is not None and key in old_lay and not old_lay.is_state(key):
                u[:, idx] = old_u[:, old_lay.uidx(key)]
            else:
                u[:, idx] = self._initial_guess(key)
        self._warm_u = np.clip(u, inst.u_min, inst.u_max)
        self._al = None
        if old_lay is not None:
            self.rebuilds += 1

    def set_states(self, states: dict):
        """Current measured states of this agent and (as needed) its neighbors."""
        self.states.update({k: np.asarray(v, dtype=float) for k, v in states.items()})
        parts = [self.states.get(self.id, self.agent.x0)]
        for key in self.layout.states()[1:]:
            j = key[1]
            parts.append(self.states.get(j, self.problem.agents[j].x0))
        self.inst.x0 = np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def orig_slots(self):
        return [s for s in self.slots.values() if not s.spec.is_copy]

    def copy_slots(self):
        return [s for s in self.slots.values() if s.spec.is_copy]

    def num_decision_variables(self) -> int:
        return self.inst.n_u * self.problem.N

    # -- round control
    def begin_round(self):
        self.q = 0
        self.history = []

    def shift(self, dt: float):
        """Warm start for the next sampling instant."""
        T = self.problem.T
        if self._warm_u is not None:
            self._warm_u = shift_values(self._warm_u, T, dt)
        if self._al is not None:
            self._al.nu = shift_values(self._al.nu, T, dt)
            self._al.c = shift_values(self._al.c, T, dt)
        for st in self.slots.values():
            st.z = shift_values(st.z, T, dt)
            st.z_prev = st.z.copy()
            st.mu = shift_values(st.mu, T, dt)
            st.mu_prev = st.mu.copy()
            st.y = shift_values(st.y, T, dt)
            st.holder_mu = {h: shift_values(m, T, dt) for h, m in st.holder_mu.items()}
            st.holder_y = {}

    # -- step 1
    def step1(self):
        self.q += 1
        for st in self.slots.values():
            p = st.spec.penalty
            p.z, p.mu, p.rho = st.z, st.mu, st.rho
        t0 = time.perf_counter()
        res = augmented_lagrangian(self.inst, self.solver, self._warm_u, self._al, self._alpha)
        self.last_solve_time = time.perf_counter() - t0
        self._warm_u, self._al, self._alpha = res.u, res.al, res.diagnostics.alpha
        self.last_solver_iters = res.diagnostics.grad_iters
        self.last_stalled = res.diagnostics.stalled
        self.x, self.u = res.x, res.u
        V = np.concatenate([res.x, res.u], axis=1)
        for st in self.slots.values():
            st.y = st.spec.penalty.output(V, self.inst.times)
        xi = res.x[:, self.layout.xidx(("x", self.id))]
        ui = res.u[:, self.layout.uidx(("u", self.id))]
        self.local_cost = agent_cost(self.agent, xi, ui, self.problem.T)
        for st in self.orig_slots():
            st.holder_y = {}
        for st in self.copy_slots():
            st.z_fresh = False

    @property
    def x_own(self):
        return self.x[:, self.layout.xidx(("x", self.id))]

    @property
    def u_own(self):
        return self.u[:, self.layout.uidx(("u", self.id))]

    def copy_of(self, j):
        """Local copies ``(xbar_ji, ubar_ji, vbar_ji or None)`` of neighbor ``j``."""
        lay = self.layout
        key = ("x", j)
        xb = self.x[:, lay.xidx(key)] if lay.is_state(key) else self.u[:, lay.uidx(key)]
        ub = self.u[:, lay.uidx(("u", j))]
        vb = self.u[:, lay.uidx(("v", j))] if ("v", j) in lay else None
        return xb, ub, vb

    # -- step 2: outgoing copies, grouped by owner
    def outgoing_copies(self) -> dict:
        out: dict = {}
        for st in self.copy_slots():
            out.setdefault(st.spec.owner, {})[st.spec.key] = st.y
        return out

    def receive_copies(self, holder, blocks: dict):
        for key, y in blocks.items():
            st = self.slots.get(key)
            if st is None or st.spec.is_copy or holder not in st.spec.holders:
                raise ModelError(f"agent {self.id}: unexpected copy {key} from {holder}")
            st.holder_y[holder] = y

    def missing_copies(self) -> list:
        return [(st.spec.key, h) for st in self.orig_slots() for h in st.spec.holders if h not in st.holder_y]

    # -- step 3
    def step3(self):
        missing = self.missing_copies()
        if missing:
            raise ModelError(f"agent {self.id}: step 3 without copies {missing}")
        for st in self.orig_slots():
            st.z_prev = st.z
            copies = [(st.holder_y[h], st.holder_mu[h], st.holder_rho[h]) for h in st.spec.holders]
            st.z = coupling_update(st.y, st.mu, st.rho, copies)

    # -- step 4: outgoing coupling variables, grouped by holder
    def outgoing_z(self) -> dict:
        out: dict = {}
        for st in self.orig_slots():
            for h in st.spec.holders:
                out.setdefault(h, {})[st.spec.key] = st.z
        return out

    def receive_z(self, owner, blocks: dict):
        for key, z in blocks.items():
            st = self.slots.get(key)
            if st is None or not st.spec.is_copy or st.spec.owner != owner:
                raise ModelError(f"agent {self.id}: unexpected coupling variable {key} from {owner}")
            st.z_prev = st.z
            st.z = np.asarray(z, dtype=float)
            st.z_fresh = True

    def missing_z(self) -> list:
        return [st.spec.key for st in self.copy_slots() if not st.z_fresh]

    # -- step 5
    def step5(self):
        missing = self.missing_z()
        if missing:
            raise ModelError(f"agent {self.id}: step 5 without coupling variables {missing}")
        cfg = self.cfg
        adapt = cfg.adapt_penalty and self.q >= 2
        r2 = s2 = 0.0
        w = trapezoid_weights(self.problem.T, self.problem.N)
        for st in self.slots.values():
            st.mu_prev = st.mu
            st.mu = multiplier_update(st.mu, st.rho, st.z, st.y)
            r = st.y - st.z
            s = st.rho * (st.z - st.z_prev)
            r2 += _sq_integral(r, w)
            s2 += _sq_integral(s, w)
            if adapt:
                st.rho = adapt_penalty(st.rho, r, s, cfg.gamma_min, cfg.gamma_max, cfg.eps0,
                                       cfg.rho_min, cfg.rho_max)
        self._r_norm, self._s_norm = math.sqrt(r2), math.sqrt(s2)

    # -- step 6: outgoing multipliers and penalties of copy slots, grouped by owner
    def outgoing_multipliers(self) -> dict:
        out: dict = {}
        for st in self.copy_slots():
            out.setdefault(st.spec.owner, {})[st.spec.key] = (st.mu, st.rho)
        return out

    def receive_multipliers(self, holder, blocks: dict):
        for key, (mu, rho) in blocks.items():
            st = self.slots.get(key)
            if st is None or st.spec.is_copy or holder not in st.spec.holders:
                raise ModelError(f"agent {self.id}: unexpected multipliers {key} from {holder}")
            st.holder_mu[holder] = np.asarray(mu, dtype=float)
            st.holder_rho[holder] = np.asarray(rho, dtype=float)

    # -- step 7
    def convergence_measure(self) -> float:
        orig = self.orig_slots()
        pairs = [(st.z, st.z_prev) for st in orig] + [(st.mu, st.mu_prev) for st in self.slots.values()]
        return diff_norm(pairs, self.problem.T, self.cfg.norm)

    def converged(self, eps: Optional[float] = None) -> bool:
        eps = self.cfg.eps if eps is None else eps
        if math.isinf(eps):
            ok = True
        else:
            ok = self.convergence_measure() <= eps
        self._record(ok)
        return ok

    def _record(self, ok):
        res2 = 0.0
        w = trapezoid_weights(self.problem.T, self.problem.N)
        rmin, rmax = math.inf, -math.inf
        for st in self.slots.values():
            d = st.y - st.z
            res2 += _sq_integral(d, w)
            if st.rho.size:
                rmin = min(rmin, float(st.rho.min()))
                rmax = max(rmax, float(st.rho.max()))
        self.history.append(IterationRecord(self.q, self.local_cost, math.sqrt(res2),
                                            getattr(self, "_r_norm", 0.0), getattr(self, "_s_norm", 0.0),
                                            rmin, rmax, self.last_solver_iters, self.last_solve_time, ok))

    def write_diagnostics(self, path, rows: Optional[list] = None):
        rows = self.history if rows is None else rows
        cols = {k: np.array([getattr(r, k) for r in rows], dtype=float)
                for k in ("local_cost", "residual", "r_norm", "s_norm", "rho_min", "rho_max",
                          "solver_iters", "solve_time", "converged")}
        return write_csv(path, [r.q for r in rows], cols, index_name="q")


def run_admm_direct(agents: dict, q_max: Optional[int] = None, eps: Optional[float] = None) -> int:
    """Run one ADMM round by calling the agents directly (no transport).

    Returns the number of iterations used. Handy for tests; the networked
    path goes through the coordinator and produces the same iterates.
    """
    order = sorted(agents)
    first = agents[order[0]]
    q_max = first.cfg.q_max if q_max is None else q_max
    for a in agents.values():
        a.begin_round()
    for q in range(1, q_max + 1):
        for i in order:
            agents[i].step1()
        for i in order:
            for owner, blocks in agents[i].outgoing_copies().items():
                agents[owner].receive_copies(i, blocks)
        for i in order:
            agents[i].step3()
        for i in order:
            for holder, blocks in agents[i].outgoing_z().items():
                agents[holder].receive_z(i, blocks)
        for i in order:
            agents[i].step5()
        for i in order:
            for owner, blocks in agents[i].outgoing_multipliers().items():
                agents[owner].receive_multipliers(i, blocks)
        flags = [agents[i].converged(eps) for i in order]
        if all(flags):
            return q
    return q_max
