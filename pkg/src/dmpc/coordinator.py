"""Barrier synchronisation of the ADMM rounds and plug-and-play bookkeeping.

Per round the coordinator sends every agent its measured state (step 0),
then for each iteration triggers the six ADMM steps one at a time, each
time waiting for every agent's acknowledgement, collects the convergence
flags (step 7) and stops as soon as all agents report convergence or
``q_max`` is reached. Finally it asks every agent for its solution
(step 8).
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .comm.inprocess import CommError, ReceiveTimeout
from .comm.wire import (Ack, ConvergenceFlag, Deregister, PlantState, Register, Shutdown, Solution,
                        TriggerStep)
from .model import ModelError
from .node import DIAG_COLUMNS, registration_summary
from .trajectory import write_csv

log = logging.getLogger(__name__)


class RegistryError(ModelError):
    pass


class RoundError(RuntimeError):
    def __init__(self, message, agents=(), step=None, q=None):
        super().__init__(message)
        self.agents = tuple(agents)
        self.step = step
        self.q = q


@dataclass
class AgentRecord:
    id: int
    spec: dict
    couplings: list
    address: Optional[str] = None
    version: int = 0


class AgentRegistry:
    """Registered agents, the couplings between them and a topology epoch."""

    def __init__(self):
        self.records: dict = {}
        self.couplings: dict = {}     # (to, from) -> spec
        self.epoch = 0

    @property
    def ids(self) -> list:
        return sorted(self.records)

    def neighbors(self, i) -> list:
        out = set()
        for (a, b) in self.couplings:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return sorted(out)

    def degree(self, i) -> int:
        return len(self.neighbors(i))

    def _check_new(self, rec: AgentRecord, known):
        if rec.id in self.records:
            raise RegistryError(f"agent {rec.id} is already registered")
        for c in rec.couplings:
            ends = {int(c["to"]), int(c["from"])}
            if rec.id not in ends:
                raise RegistryError(f"agent {rec.id} declares coupling {c['from']}->{c['to']} not involving it")
            if not ends <= known:
                raise RegistryError(f"coupling {c['from']}->{c['to']} refers to an unregistered agent")

    def add(self, rec: AgentRecord) -> list:
        """Register one agent; returns its neighbors. Bumps the epoch."""
        self._check_new(rec, set(self.records) | {rec.id})
        self.records[rec.id] = rec
        for c in rec.couplings:
            self.couplings[(int(c["to"]), int(c["from"]))] = c
        self.epoch += 1
        return self.neighbors(rec.id)

    def add_many(self, recs: list):
        """Register a batch whose couplings may refer to each other."""
        known = set(self.records) | {r.id for r in recs}
        if len(known) != len(self.records) + len(recs):
            raise RegistryError("duplicate agent ids in batch")
        for r in recs:
            self._check_new(r, known)
        for r in recs:
            self.records[r.id] = r
            for c in r.couplings:
                self.couplings[(int(c["to"]), int(c["from"]))] = c
        self.epoch += 1

    def remove(self, i) -> list:
        """Remove an agent and its couplings; returns its former neighbors."""
        if i not in self.records:
            raise RegistryError(f"agent {i} is not registered")
        nbrs = self.neighbors(i)
        del self.records[i]
        self.couplings = {k: c for k, c in self.couplings.items() if i not in k}
        for r in self.records.values():
            r.couplings = [c for c in r.couplings if i not in (int(c["to"]), int(c["from"]))]
        self.epoch += 1
        return nbrs

    def incident(self, i) -> list:
        return [c for k, c in sorted(self.couplings.items()) if i in k]

    def check(self):
        for (a, b) in self.couplings:
            if a not in self.records or b not in self.records:
                raise RegistryError(f"coupling {b}->{a} references an unregistered agent")

    def snapshot(self):
        """Registry content without the epoch (for comparisons)."""
        return ({i: (r.spec, sorted(json.dumps(c, sort_keys=True) for c in r.couplings))
                 for i, r in self.records.items()},
                {k: json.dumps(c, sort_keys=True) for k, c in self.couplings.items()})


@dataclass
class RoundResult:
    iterations: int
    converged: bool
    solutions: dict
    flags: list = field(default_factory=list)      # per q: {id: bool}
    wall_time: float = 0.0
    epoch: int = 0


class Coordinator:
    def __init__(self, endpoint, q_max: int = 20, timeout: float = 10.0, plug_and_play: bool = False):
        self.endpoint = endpoint
        self.q_max = int(q_max)
        self.timeout = float(timeout)
        self.plug_and_play = plug_and_play
        self.registry = AgentRegistry()
        self.sent = Counter()
        self.received = Counter()
        self.trace: list = []          # ("trigger", q, step) / ("ack", id, q, step)
        self.keep_trace = False
        self.rebuild_log: list = []    # (epoch, event, agent, notified ids)
        self.rows: list = []
        self._pending_reg: dict = {}
        self._inbox: list = []

    # -- messaging
    def _send(self, dest, msg):
        try:
            self.endpoint.send(dest, msg)
        except CommError as exc:
            raise RoundError(f"delivery to agent {dest} failed: {exc}", agents=(dest,)) from exc
        self.sent[type(msg).__name__] += 1

    def _recv(self, deadline):
        if self._inbox:
            return self._inbox.pop(0)
        remaining = max(0.0, deadline - time.monotonic())
        msg = self.endpoint.recv(timeout=remaining)
        self.received[type(msg).__name__] += 1
        return msg

    def _collect(self, kind, ids, match, what):
        """Wait for one ``kind`` message per id in ``ids`` satisfying ``match``."""
        got = {}
        deadline = time.monotonic() + self.timeout
        while len(got) < len(ids):
            try:
                msg = self._recv(deadline)
            except ReceiveTimeout:
                missing = sorted(set(ids) - set(got))
                raise RoundError(f"timeout waiting for {what} from agents {missing}", agents=missing) from None
            if isinstance(msg, Register):
                self._pending_reg[msg.agent_id] = msg
                continue
            aid = getattr(msg, "agent_id", None)
            if isinstance(msg, kind) and aid in ids and match(msg):
                got[aid] = msg
                if self.keep_trace and isinstance(msg, Ack):
                    self.trace.append(("ack", aid, msg.q, msg.step))
            else:
                log.debug("ignoring unexpected %s while waiting for %s", msg, what)
        return got

    def _broadcast(self, ids, msg):
        if self.keep_trace and isinstance(msg, TriggerStep):
            self.trace.append(("trigger", msg.q, msg.step))
        for i in ids:
            self._send(i, msg)

    # -- registration / plug-and-play
    def wait_registration(self, ids, timeout: Optional[float] = None) -> dict:
        need = set(ids) - set(self._pending_reg)
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        deferred = []
        while need:
            try:
                msg = self._recv(deadline)
            except ReceiveTimeout:
                self._inbox = deferred + self._inbox
                raise RoundError(f"agents {sorted(need)} did not register", agents=sorted(need)) from None
            if isinstance(msg, Register):
                self._pending_reg[msg.agent_id] = msg
                need.discard(msg.agent_id)
            else:
                deferred.append(msg)
        self._inbox = deferred + self._inbox
        return {i: self._pending_reg.pop(i) for i in ids}

    def _record(self, msg: Register) -> AgentRecord:
        info = json.loads(msg.summary)
        rec = AgentRecord(int(msg.agent_id), info["agent"], list(info.get("couplings", [])), info.get("address"))
        if rec.address and hasattr(self.endpoint, "set_address"):
            self.endpoint.set_address(rec.id, rec.address)
        return rec

    def _summary(self, i) -> str:
        r = self.registry.records[i]
        return registration_summary(r.spec, self.registry.incident(i), self.registry.degree(i), r.address)

    def _introduce(self, a, b):
        """Tell ``a`` about ``b``."""
        self._send(a, Register(b, self._summary(b)))

    def admit(self, ids, timeout: Optional[float] = None) -> int:
        """Initial registration of a batch of agents; every agent is told
        about its neighbors. Returns the new epoch."""
        regs = self.wait_registration(ids, timeout)
        self.registry.add_many([self._record(regs[i]) for i in sorted(regs)])
        for i in sorted(regs):
            for j in self.registry.neighbors(i):
                self._introduce(i, j)
        self.rebuild_log.append((self.registry.epoch, "admit", None, tuple(sorted(regs))))
        return self.registry.epoch

    def plug_in(self, agent_id, timeout: Optional[float] = None) -> int:
        """Admit one agent at a round boundary; only its direct neighbors are
        notified. Returns the new epoch."""
        reg = self.wait_registration([agent_id], timeout)[agent_id]
        nbrs = self.registry.add(self._record(reg))
        for j in nbrs:
            self._introduce(j, agent_id)
        for j in nbrs:
            self._introduce(agent_id, j)
        self.rebuild_log.append((self.registry.epoch, "plug_in", agent_id, tuple(nbrs)))
        return self.registry.epoch

    def plug_out(self, agent_id, notify_removed: bool = True) -> int:
        nbrs = self.registry.remove(agent_id)
        for j in nbrs:
            self._send(j, Deregister(agent_id))
        if notify_removed:
            try:
                self.endpoint.send(agent_id, Shutdown())
            except CommError:
                pass
        if hasattr(self.endpoint, "drop"):
            self.endpoint.drop(agent_id)
        self.rebuild_log.append((self.registry.epoch, "plug_out", agent_id, tuple(nbrs)))
        return self.registry.epoch

    # -- rounds
    def run_round(self, t: float, states: dict, q_max: Optional[int] = None) -> RoundResult:
        """One MPC step. In plug-and-play mode agents that time out are
        removed and the round is restarted once without them."""
        try:
            return self._round(t, states, q_max)
        except RoundError as exc:
            if not self.plug_and_play or not exc.agents:
                raise
            log.warning("removing unresponsive agents %s: %s", exc.agents, exc)
            for a in exc.agents:
                if a in self.registry.records:
                    self.plug_out(a, notify_removed=False)
            self._inbox.clear()
            return self._round(t, states, q_max)

    def _round(self, t, states, q_max=None) -> RoundResult:
        q_max = self.q_max if q_max is None else int(q_max)
        ids = self.registry.ids
        epoch = self.registry.epoch
        t0 = time.perf_counter()
        for i in ids:
            local = {j: np.asarray(states[j], dtype=float) for j in [i] + self.registry.neighbors(i)}
            self._send(i, PlantState(float(t), local))
        self._collect(Ack, ids, lambda m: m.step == 0, "round start acks")
        flags = []
        q = 0
        converged = False
        for q in range(1, q_max + 1):
            for step in range(1, 7):
                self._broadcast(ids, TriggerStep(epoch, q, step))
                self._collect(Ack, ids, lambda m, q=q, s=step: m.q == q and m.step == s,
                              f"acks of step {step} (q={q})")
            self._broadcast(ids, TriggerStep(epoch, q, 7))
            got = self._collect(ConvergenceFlag, ids, lambda m, q=q: m.q == q, f"convergence flags (q={q})")
            fl = {i: bool(got[i].converged) for i in ids}
            flags.append(fl)
            if all(fl.values()):
                converged = True
                break
        self._broadcast(ids, TriggerStep(epoch, q, 8))
        sols = self._collect(Solution, ids, lambda m: True, "solutions")
        wall = time.perf_counter() - t0
        res = RoundResult(q, converged, sols, flags, wall, epoch)
        self._log_row(t, res)
        return res

    def _log_row(self, t, res: RoundResult):
        row = {"epoch": res.epoch, "iterations": res.iterations, "converged": float(res.converged),
               "wall_time": res.wall_time}
        for i, s in res.solutions.items():
            n = max(s.diagnostics.shape[0], 1)
            row[f"time_avg_{i}"] = s.solve_time / n
            times = s.diagnostics[:, DIAG_COLUMNS.index("solve_time")] if s.diagnostics.shape[0] else np.zeros(1)
            row[f"time_min_{i}"] = float(times.min())
            row[f"time_max_{i}"] = float(times.max())
            row[f"flag_{i}"] = float(res.flags[-1][i]) if res.flags else math.nan
        self.rows.append((t, row))

    def write_log(self, path):
        """Per-round log; the measured times go to a ``_timing`` sibling."""
        path = Path(path)
        keys = []
        for _, row in self.rows:
            keys += [k for k in row if k not in keys]
        cols = {k: np.array([row.get(k, math.nan) for _, row in self.rows], dtype=float) for k in keys}
        times = [t for t, _ in self.rows]
        timed = [k for k in keys if "time" in k]
        write_csv(path.with_name(path.stem + "_timing" + path.suffix), times, {k: cols[k] for k in timed})
        return write_csv(path, times, {k: v for k, v in cols.items() if k not in timed})

    def shutdown(self):
        for i in self.registry.ids:
            try:
                self.endpoint.send(i, Shutdown())
            except CommError:
                pass
