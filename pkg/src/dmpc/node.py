"""Message-driven agent process.

An :class:`AgentNode` owns one :class:`~dmpc.admm.AdmmAgent` and reacts to
coordinator triggers and neighbor data. It only ever knows its own model,
its direct neighbors' models and the couplings it takes part in; the
coordinator tells it about neighbors joining or leaving.

Triggers that need data from neighbors (steps 3 and 5, and the start of a
new round, which needs the last multipliers) are held back until that
data has arrived, so the node is insensitive to the interleaving of
coordinator and neighbor messages.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from typing import Optional

import numpy as np

from .admm import AdmmAgent, AdmmConfig
from .comm.inprocess import ReceiveTimeout
from .comm.wire import (Ack, ConvergenceFlag, CouplingVars, Deregister, LocalCopies, Message, MultiplierVals,
                        PlantState, Register, Shutdown, Solution, TriggerStep, key_name, name_key)
from .models import build_problem
from .solver import SolverConfig
from .trajectory import Trajectory

log = logging.getLogger(__name__)

COORDINATOR = "coordinator"
DIAG_COLUMNS = ("q", "local_cost", "residual", "r_norm", "s_norm", "rho_min", "rho_max",
                "solver_iters", "solve_time", "converged")


class NodeError(Exception):
    pass


def registration_summary(spec: dict, couplings: list, degree: int = 0, address: Optional[str] = None) -> str:
    return json.dumps({"agent": spec, "couplings": couplings, "degree": int(degree), "address": address},
                      sort_keys=True)


class AgentNode:
    def __init__(self, spec: dict, couplings: list, T: float, N: int, endpoint,
                 admm: AdmmConfig = AdmmConfig(), solver: SolverConfig = SolverConfig(max_grad_iters=10),
                 coordinator=COORDINATOR, address: Optional[str] = None):
        self.id = int(spec["id"])
        self.spec = spec
        self.T, self.N = float(T), int(N)
        self.endpoint = endpoint
        self.admm_cfg = admm
        self.solver_cfg = solver
        self.coordinator = coordinator
        self.address = address
        # local view: neighbor specs/degrees and couplings incident to self
        self.neighbor_specs: dict = {}
        self.degrees: dict = {}
        self.couplings = {(int(c["to"]), int(c["from"])): c for c in couplings
                          if self.id in (int(c["to"]), int(c["from"]))}
        self.agent: Optional[AdmmAgent] = None
        self.dirty = True
        self.t_prev: Optional[float] = None
        self.epoch = 0
        self.running = True
        self._blocked: deque = deque()
        self._copies: dict = {}
        self._z: dict = {}
        self._mu: dict = {}
        self._expect_mu: tuple = (0, ())
        self.received = 0

    # -- registration
    def register(self):
        decl = [c for c in self.couplings.values()]
        self.endpoint.send(self.coordinator, Register(self.id, registration_summary(
            self.spec, decl, 0, self.address)))

    def _local_couplings(self):
        known = set(self.neighbor_specs) | {self.id}
        return [c for (i, j), c in sorted(self.couplings.items()) if i in known and j in known]

    def local_problem(self):
        specs = [self.spec] + [self.neighbor_specs[j] for j in sorted(self.neighbor_specs)]
        return build_problem(specs, self._local_couplings(), self.T, self.N)

    def _on_register(self, msg: Register):
        info = json.loads(msg.summary)
        j = int(msg.agent_id)
        if j == self.id:
            return
        self.neighbor_specs[j] = info["agent"]
        self.degrees[j] = int(info.get("degree", 0))
        for c in info.get("couplings", []):
            key = (int(c["to"]), int(c["from"]))
            if self.id in key and j in key:
                self.couplings[key] = c
        addr = info.get("address")
        if addr and hasattr(self.endpoint, "set_address"):
            self.endpoint.set_address(j, addr)
        self.dirty = True

    def _on_deregister(self, msg: Deregister):
        j = int(msg.agent_id)
        self.neighbor_specs.pop(j, None)
        self.degrees.pop(j, None)
        self.couplings = {k: c for k, c in self.couplings.items() if j not in k}
        for buf in (self._copies, self._z, self._mu):
            for key in [k for k in buf if k[1] == j]:
                del buf[key]
        if hasattr(self.endpoint, "drop"):
            self.endpoint.drop(j)
        self.dirty = True

    # -- message dispatch
    def handle(self, msg: Message):
        self.received += 1
        if isinstance(msg, LocalCopies):
            self._copies[(msg.q, msg.sender)] = msg
        elif isinstance(msg, CouplingVars):
            self._z[(msg.q, msg.sender)] = msg
        elif isinstance(msg, MultiplierVals):
            self._mu[(msg.q, msg.sender)] = msg
        elif isinstance(msg, Register):
            self._on_register(msg)
        elif isinstance(msg, Deregister):
            self._on_deregister(msg)
        elif isinstance(msg, Shutdown):
            self.running = False
            return
        elif isinstance(msg, (TriggerStep, PlantState)):
            self._blocked.append(msg)
        else:
            raise NodeError(f"agent {self.id}: unexpected {type(msg).__name__}")
        self._drain()

    def _drain(self):
        while self._blocked and self._ready(self._blocked[0]):
            msg = self._blocked.popleft()
            if isinstance(msg, PlantState):
                self._start_round(msg)
            else:
                self._step(msg)

    # -- prerequisites
    def _holders(self):
        hs = set()
        for st in self.agent.orig_slots():
            hs.update(st.spec.holders)
        return sorted(hs)

    def _owners(self):
        return sorted({st.spec.owner for st in self.agent.copy_slots()})

    def _mu_ready(self):
        q, holders = self._expect_mu
        return all((q, h) in self._mu for h in holders if h in self.neighbor_specs)

    def _ready(self, msg) -> bool:
        if isinstance(msg, PlantState):
            return self.agent is None or self._mu_ready()
        if msg.step == 3:
            return self._mu_ready() and all((msg.q, h) in self._copies for h in self._holders())
        if msg.step == 5:
            return all((msg.q, o) in self._z for o in self._owners())
        return True

    def _apply_mu(self):
        q, holders = self._expect_mu
        for h in holders:
            m = self._mu.pop((q, h), None)
            if m is None:
                continue
            blocks = {}
            for name, tr in m.blocks.items():
                kind, _, rest = name.partition(":")
                blocks.setdefault(name_key(rest), {})[kind] = tr.values
            self.agent.receive_multipliers(h, {k: (v["mu"], v["rho"]) for k, v in blocks.items()})
        self._expect_mu = (0, ())

    # -- round start
    def _start_round(self, msg: PlantState):
        states = {int(k): np.asarray(v, dtype=float) for k, v in msg.states.items()}
        if self.agent is None:
            self.agent = AdmmAgent(self.local_problem(), self.id, self.admm_cfg, self.solver_cfg,
                                   states=states, degrees=self.degrees)
            self.dirty = False
        else:
            self._apply_mu()
            if self.t_prev is not None and msg.t > self.t_prev:
                self.agent.shift(msg.t - self.t_prev)
            if self.dirty:
                self.agent.states.update(states)
                self.agent.rebuild(self.local_problem(), self.degrees)
                self.dirty = False
        self._copies.clear()
        self._z.clear()
        self._mu.clear()
        self.t_prev = msg.t
        self.agent.set_states(states)
        self.agent.begin_round()
        self._ack(0, 0)

    def _ack(self, q, step):
        self.endpoint.send(self.coordinator, Ack(self.id, self.epoch, q, step))

    # -- ADMM steps
    def _traj(self, values):
        return Trajectory(self.T, values)

    def _step(self, msg: TriggerStep):
        a = self.agent
        if a is None:
            raise NodeError(f"agent {self.id}: step trigger before the first plant state")
        self.epoch = msg.epoch
        q, step = msg.q, msg.step
        expected_q = a.q + 1 if step == 1 else a.q
        if step in range(1, 8) and q != expected_q:
            raise NodeError(f"agent {self.id}: trigger for q={q} step {step} while at q={a.q}")
        if step == 1:
            a.step1()
        elif step == 2:
            for owner, blocks in a.outgoing_copies().items():
                ub = blocks[("u", owner)]
                xb = blocks.get(("x", owner))
                vb = blocks.get(("v", owner, self.id))
                self.endpoint.send(owner, LocalCopies(self.id, owner, q, self._traj(ub),
                                                      None if xb is None else self._traj(xb),
                                                      None if vb is None else self._traj(vb)))
        elif step == 3:
            self._apply_mu()
            for h in self._holders():
                m = self._copies.pop((q, h))
                blocks = {("u", self.id): m.ubar.values}
                if m.xbar is not None:
                    blocks[("x", self.id)] = m.xbar.values
                if m.vbar is not None:
                    blocks[("v", self.id, h)] = m.vbar.values
                a.receive_copies(h, blocks)
            a.step3()
        elif step == 4:
            for holder, blocks in a.outgoing_z().items():
                self.endpoint.send(holder, CouplingVars(self.id, holder, q,
                                                        {key_name(k): self._traj(z) for k, z in blocks.items()}))
        elif step == 5:
            for o in self._owners():
                m = self._z.pop((q, o))
                a.receive_z(o, {name_key(n): tr.values for n, tr in m.blocks.items()})
            a.step5()
        elif step == 6:
            for owner, blocks in a.outgoing_multipliers().items():
                out = {}
                for k, (mu, rho) in blocks.items():
                    out["mu:" + key_name(k)] = self._traj(mu)
                    out["rho:" + key_name(k)] = self._traj(rho)
                self.endpoint.send(owner, MultiplierVals(self.id, owner, q, out))
            self._expect_mu = (q, tuple(self._holders()))
        elif step == 7:
            ok = a.converged()
            self.endpoint.send(self.coordinator, ConvergenceFlag(self.id, q, ok))
            return
        elif step == 8:
            self.endpoint.send(self.coordinator, self.solution())
            return
        else:
            raise NodeError(f"agent {self.id}: unknown step {step}")
        self._ack(q, step)

    def diagnostics_matrix(self) -> np.ndarray:
        rows = [[float(getattr(r, c)) for c in DIAG_COLUMNS] for r in self.agent.history]
        return np.array(rows, dtype=float).reshape(len(rows), len(DIAG_COLUMNS))

    def solution(self) -> Solution:
        a = self.agent
        hist = a.history
        solve_time = sum(r.solve_time for r in hist)
        iters = sum(int(r.solver_iters) for r in hist)
        cost = a.local_cost if math.isfinite(a.local_cost) else 0.0
        return Solution(self.id, a.q, self._traj(a.x_own), self._traj(a.u_own), cost, solve_time, iters,
                        bool(a.last_stalled), a.rebuilds, self.diagnostics_matrix())

    # -- standalone loop (TCP)
    def serve(self, idle_timeout: Optional[float] = None):
        """Register, then process messages until Shutdown."""
        self.register()
        while self.running:
            try:
                msg = self.endpoint.recv(timeout=idle_timeout)
            except ReceiveTimeout:
                raise NodeError(f"agent {self.id}: no message from the network for {idle_timeout} s") from None
            self.handle(msg)
