"""Distributed controllers: a coordinator plus one :class:`AgentNode` per
agent, talking either in-process or over loopback/remote TCP."""

from __future__ import annotations

import logging
import threading
from typing import Optional

from .admm import AdmmConfig
from .central import StepResult
from .comm.inprocess import InProcessNetwork
from .comm.tcp import TcpEndpoint
from .coordinator import Coordinator, RoundResult
from .model import ProblemDescription
from .node import COORDINATOR, AgentNode, NodeError
from .solver import SolverConfig

log = logging.getLogger(__name__)


def incident_coupling_specs(problem: ProblemDescription, i) -> list:
    return [c.spec for key, c in sorted(problem.couplings.items()) if i in key]


def round_to_step(res: RoundResult) -> StepResult:
    sols = res.solutions
    return StepResult(
        x={i: s.x.values for i, s in sols.items()},
        u={i: s.u.values for i, s in sols.items()},
        iterations=res.iterations,
        converged=res.converged,
        wall_time=res.wall_time,
        agent_times={i: s.solve_time for i, s in sols.items()},
        solver_iters={i: s.solver_iters for i, s in sols.items()},
        stalled={i: s.stalled for i, s in sols.items()},
        local_costs={i: s.local_cost for i, s in sols.items()},
        diagnostics={i: s.diagnostics for i, s in sols.items()},
        rebuilds={i: s.rebuilds for i, s in sols.items()},
        flags=res.flags,
        epoch=res.epoch,
    )


class _Distributed:
    kind = "distributed"

    def __init__(self, problem: ProblemDescription, admm: AdmmConfig, solver: SolverConfig,
                 agent_admm: Optional[dict] = None):
        self.problem = problem
        self.admm = admm
        self.solver = solver
        self.agent_admm = dict(agent_admm or {})
        self.nodes: dict = {}

    def _cfg(self, i) -> AdmmConfig:
        return self.agent_admm.get(i, self.admm)

    def shift(self, dt: float):
        """Agents shift their warm starts themselves when the next plant
        state arrives."""

    def solve(self, states: dict, t: float = 0.0) -> StepResult:
        return round_to_step(self.coordinator.run_round(t, states))

    @property
    def rebuild_log(self):
        return self.coordinator.rebuild_log


class InProcessController(_Distributed):
    """All agents and the coordinator in one thread, deterministic."""

    kind = "distributed-inproc"

    def __init__(self, problem: ProblemDescription, admm: AdmmConfig = AdmmConfig(),
                 solver: SolverConfig = SolverConfig(max_grad_iters=10), timeout: float = 10.0,
                 agent_admm: Optional[dict] = None, keep_trace: bool = False):
        super().__init__(problem, admm, solver, agent_admm)
        self.network = InProcessNetwork()
        self.network.keep_log = keep_trace
        self.coordinator = Coordinator(self.network.endpoint(COORDINATOR), admm.q_max, timeout)
        self.coordinator.keep_trace = keep_trace
        for i in problem.ids:
            self._spawn(problem.agents[i].spec, incident_coupling_specs(problem, i))
        self.coordinator.admit(problem.ids)
        self.network.pump()

    def _spawn(self, spec, couplings):
        i = int(spec["id"])
        ep = self.network.endpoint(i)
        node = AgentNode(spec, couplings, self.problem.T, self.problem.N, ep, self._cfg(i), self.solver)
        self.network.set_handler(i, node.handle)
        self.nodes[i] = node
        node.register()

    def add_agent(self, spec: dict, couplings: list, problem: ProblemDescription):
        self.problem = problem
        self._spawn(spec, couplings)
        self.coordinator.plug_in(int(spec["id"]))
        self.network.pump()

    def remove_agent(self, agent_id, problem: ProblemDescription):
        self.problem = problem
        self.coordinator.plug_out(agent_id)
        self.network.pump()
        self.network.remove(agent_id)
        self.nodes.pop(agent_id, None)

    def close(self):
        self.coordinator.shutdown()
        self.network.pump()


class TcpController(_Distributed):
    """Coordinator on a TCP endpoint. With ``spawn_agents`` every agent runs
    in a thread of this process with its own TCP endpoint; otherwise the
    agents are external processes that connect and register."""

    kind = "distributed-tcp"

    def __init__(self, problem: ProblemDescription, admm: AdmmConfig = AdmmConfig(),
                 solver: SolverConfig = SolverConfig(max_grad_iters=10), timeout: float = 10.0,
                 host: str = "127.0.0.1", port: int = 0, spawn_agents: bool = True,
                 agent_admm: Optional[dict] = None, register_timeout: Optional[float] = None,
                 plug_and_play: bool = False):
        super().__init__(problem, admm, solver, agent_admm)
        self.host = host
        self.spawn_agents = spawn_agents
        self.endpoint = TcpEndpoint(COORDINATOR, host, port)
        self.coordinator = Coordinator(self.endpoint, admm.q_max, timeout, plug_and_play)
        self.register_timeout = register_timeout
        self.threads: dict = {}
        self.errors: dict = {}
        if spawn_agents:
            for i in problem.ids:
                self._spawn(problem.agents[i].spec, incident_coupling_specs(problem, i))
        self.coordinator.admit(problem.ids, register_timeout)

    @property
    def address(self) -> str:
        return self.endpoint.address_str

    def _spawn(self, spec, couplings):
        i = int(spec["id"])
        ep = TcpEndpoint(i, self.host, 0)
        ep.set_address(COORDINATOR, self.endpoint.address)
        node = AgentNode(spec, couplings, self.problem.T, self.problem.N, ep, self._cfg(i), self.solver,
                         address=ep.address_str)
        self.nodes[i] = node

        def run():
            try:
                node.serve()
            except Exception as exc:  # surfaced through the coordinator's timeout
                log.error("agent %s failed: %s", i, exc)
                self.errors[i] = exc
            finally:
                ep.close()

        th = threading.Thread(target=run, name=f"agent-{i}", daemon=True)
        th.start()
        self.threads[i] = th

    def add_agent(self, spec: dict, couplings: list, problem: ProblemDescription):
        self.problem = problem
        if self.spawn_agents:
            self._spawn(spec, couplings)
        self.coordinator.plug_in(int(spec["id"]), self.register_timeout)

    def remove_agent(self, agent_id, problem: ProblemDescription):
        self.problem = problem
        self.coordinator.plug_out(agent_id)
        th = self.threads.pop(agent_id, None)
        if th is not None:
            th.join(timeout=5.0)
        self.nodes.pop(agent_id, None)

    def close(self):
        self.coordinator.shutdown()
        for th in self.threads.values():
            th.join(timeout=5.0)
        self.endpoint.close()


def run_agent(spec: dict, couplings: list, T: float, N: int, coordinator_addr, admm: AdmmConfig,
              solver: SolverConfig, host: str = "127.0.0.1", port: int = 0,
              idle_timeout: Optional[float] = 60.0) -> AgentNode:
    """Standalone agent process body: connect, register, serve until shutdown."""
    ep = TcpEndpoint(int(spec["id"]), host, port)
    try:
        ep.set_address(COORDINATOR, coordinator_addr)
        node = AgentNode(spec, couplings, T, N, ep, admm, solver, address=ep.address_str)
        node.serve(idle_timeout)
        return node
    finally:
        ep.close()


__all__ = ["InProcessController", "TcpController", "run_agent", "round_to_step", "incident_coupling_specs",
           "NodeError"]
