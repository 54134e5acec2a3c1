"""Distributed model predictive control of neighbor-affine multi-agent
systems with ADMM, a gradient-based local OCP solver, in-process and TCP
communication, and plug-and-play agents."""

from .admm import AdmmAgent, AdmmConfig, NeighborApproxFlags
from .central import CentralController, global_cost
from .distributed import InProcessController, TcpController
from .model import AgentModel, CouplingModel, ModelError, ProblemDescription, QuadraticCost
from .simulator import mpc_loop
from .solver import SolverConfig
from .trajectory import Trajectory

__version__ = "0.1.0"
