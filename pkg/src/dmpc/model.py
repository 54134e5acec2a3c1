"""Multi-agent problem description: agents, neighbor-affine couplings, costs,
constraints and the coupling graph.

Model functions are *kernels*: vectorised maps that take each argument as an
array ``(..., d_a)`` plus a parameter array ``(..., n_p)`` and return
``(..., out_dim)``. Leading axes are free so one call can cover a whole time
grid, all RK stages, or a group of agents sharing the same model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np


class ModelError(ValueError):
    pass


class Kernel:
    """Base class for batched vector functions with analytic Jacobians."""

    name = "kernel"
    arg_dims: tuple = ()
    out_dim: int = 0

    def __call__(self, args: Sequence[np.ndarray], p: np.ndarray, t) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, args: Sequence[np.ndarray], p: np.ndarray, t) -> list:
        """One array ``(..., out_dim, d_a)`` per argument."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name}, args={self.arg_dims}, out={self.out_dim})"


class IdentityKernel(Kernel):
    """``y = a`` for a single argument; used for selections and pass-through
    terms such as the external-influence input of approximated dynamics."""

    def __init__(self, dim: int):
        self.name = f"identity{dim}"
        self.arg_dims = (dim,)
        self.out_dim = dim
        self._eye = np.eye(dim)

    def __call__(self, args, p, t):
        return args[0]

    def jacobian(self, args, p, t):
        shape = args[0].shape[:-1] + (self.out_dim, self.out_dim)
        return [np.broadcast_to(self._eye, shape)]


_IDENTITY_CACHE: dict[int, IdentityKernel] = {}


def identity_kernel(dim: int) -> IdentityKernel:
    if dim not in _IDENTITY_CACHE:
        _IDENTITY_CACHE[dim] = IdentityKernel(dim)
    return _IDENTITY_CACHE[dim]


class CallbackKernel(Kernel):
    """Adapter for user-registered pointwise callbacks.

    ``fn(*args, t)`` maps 1-D arguments to a 1-D output and ``jac(*args, t)``
    returns the list of per-argument Jacobians. Evaluation loops over the
    leading axes, so this is much slower than a native kernel.
    """

    def __init__(self, name: str, arg_dims, out_dim: int, fn: Callable, jac: Callable):
        self.name = name
        self.arg_dims = tuple(arg_dims)
        self.out_dim = out_dim
        self._fn = fn
        self._jac = jac

    def _lead(self, args):
        return np.broadcast_shapes(*(a.shape[:-1] for a in args))

    def __call__(self, args, p, t):
        lead = self._lead(args)
        flat = [np.broadcast_to(a, lead + a.shape[-1:]).reshape(-1, a.shape[-1]) for a in args]
        tt = np.broadcast_to(np.asarray(t, dtype=float), lead).ravel()
        out = np.array([np.asarray(self._fn(*(a[k] for a in flat), tt[k]), dtype=float)
                        for k in range(tt.size)])
        return out.reshape(lead + (self.out_dim,))

    def jacobian(self, args, p, t):
        lead = self._lead(args)
        flat = [np.broadcast_to(a, lead + a.shape[-1:]).reshape(-1, a.shape[-1]) for a in args]
        tt = np.broadcast_to(np.asarray(t, dtype=float), lead).ravel()
        per_point = [self._jac(*(a[k] for a in flat), tt[k]) for k in range(tt.size)]
        jacs = []
        for a_idx, d in enumerate(self.arg_dims):
            arr = np.array([np.asarray(pp[a_idx], dtype=float) for pp in per_point])
            jacs.append(arr.reshape(lead + (self.out_dim, d)))
        return jacs


@dataclass(frozen=True)
class BoundKernel:
    """A kernel together with the parameter vector of one model instance."""

    kernel: Kernel
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __call__(self, *args, t=0.0):
        args = [np.asarray(a, dtype=float) for a in args]
        return self.kernel(args, self.params, t)

    def jacobian(self, *args, t=0.0):
        args = [np.asarray(a, dtype=float) for a in args]
        return self.kernel.jacobian(args, self.params, t)

    @property
    def out_dim(self) -> int:
        return self.kernel.out_dim


class QuadraticCost:
    """``l = 1/2 |x - x_des|_Q^2 + 1/2 |u|_R^2`` and
    ``V = 1/2 |x(T) - x_des|_P^2`` with diagonal weights."""

    def __init__(self, P, Q, R, x_des):
        self.P = np.asarray(P, dtype=float).ravel()
        self.Q = np.asarray(Q, dtype=float).ravel()
        self.R = np.asarray(R, dtype=float).ravel()
        self.x_des = np.asarray(x_des, dtype=float).ravel()
        n_x = self.x_des.shape[0]
        if self.P.shape[0] != n_x or self.Q.shape[0] != n_x:
            raise ModelError(f"P/Q length must equal n_x={n_x}, got {self.P.shape[0]}/{self.Q.shape[0]}")

    @property
    def n_x(self):
        return self.x_des.shape[0]

    @property
    def n_u(self):
        return self.R.shape[0]

    def running(self, x, u, t=0.0):
        dx = x - self.x_des
        return 0.5 * (dx * dx) @ self.Q + 0.5 * (u * u) @ self.R

    def running_grad(self, x, u, t=0.0):
        return self.Q * (x - self.x_des), self.R * u

    def terminal(self, x, t=0.0):
        dx = x - self.x_des
        return 0.5 * (dx * dx) @ self.P

    def terminal_grad(self, x, t=0.0):
        return self.P * (x - self.x_des)


def default_quadratic_cost(P, Q, R, x_des) -> QuadraticCost:
    return QuadraticCost(P, Q, R, x_des)


@dataclass(frozen=True)
class AgentModel:
    id: int
    n_x: int
    n_u: int
    dynamics: BoundKernel
    cost: object
    x0: np.ndarray
    u_min: np.ndarray
    u_max: np.ndarray
    x_des: Optional[np.ndarray] = None
    eq: Optional[BoundKernel] = None
    ineq: Optional[BoundKernel] = None
    spec: Optional[dict] = None

    def with_x0(self, x0) -> "AgentModel":
        return dataclasses.replace(self, x0=np.asarray(x0, dtype=float).ravel())


@dataclass(frozen=True)
class CouplingModel:
    """Coupling of neighbor ``neighbor``'s variables into agent ``owner``'s
    dynamics (``f_ij`` with ``i = owner``, ``j = neighbor``) and optional
    coupling constraints. Kernel arguments are ``(x_i, u_i, x_j, u_j)``."""

    owner: int
    neighbor: int
    dynamics: Optional[BoundKernel] = None
    eq: Optional[BoundKernel] = None
    ineq: Optional[BoundKernel] = None
    spec: Optional[dict] = None

    @property
    def edge(self) -> tuple[int, int]:
        return (self.neighbor, self.owner)


@dataclass(frozen=True)
class CouplingGraph:
    """Directed graph; edge ``(j, i)`` means agent ``j`` enters agent ``i``'s
    dynamics or constraints."""

    vertices: frozenset
    edges: frozenset

    def _check(self, i):
        if i not in self.vertices:
            raise ModelError(f"unknown agent id {i}")

    def sending_neighbors(self, i) -> set:
        self._check(i)
        return {j for (j, k) in self.edges if k == i}

    def receiving_neighbors(self, i) -> set:
        self._check(i)
        return {k for (j, k) in self.edges if j == i}

    def neighbors(self, i) -> set:
        return self.sending_neighbors(i) | self.receiving_neighbors(i)


def sending_neighbors(graph: CouplingGraph, i) -> set:
    return graph.sending_neighbors(i)


def receiving_neighbors(graph: CouplingGraph, i) -> set:
    return graph.receiving_neighbors(i)


@dataclass(frozen=True)
class ProblemDescription:
    """The single description both controller types are generated from.

    Immutable: plug-and-play changes produce a new version via
    :meth:`with_agent` / :meth:`without_agent`.
    """

    agents: Mapping[int, AgentModel]
    couplings: Mapping[tuple, CouplingModel]
    T: float
    N: int
    version: int = 0

    @property
    def graph(self) -> CouplingGraph:
        return CouplingGraph(frozenset(self.agents), frozenset(c.edge for c in self.couplings.values()))

    @property
    def ids(self) -> list:
        return sorted(self.agents)

    def sending(self, i) -> list:
        return sorted(j for (o, j) in self.couplings if o == i)

    def receiving(self, i) -> list:
        return sorted(o for (o, j) in self.couplings if j == i)

    def neighbors(self, i) -> list:
        return sorted(set(self.sending(i)) | set(self.receiving(i)))

    def coupling(self, owner, neighbor) -> Optional[CouplingModel]:
        return self.couplings.get((owner, neighbor))

    def with_agent(self, agent: AgentModel, couplings: Sequence[CouplingModel] = ()) -> "ProblemDescription":
        if agent.id in self.agents:
            raise ModelError(f"duplicate agent id {agent.id}")
        agents = dict(self.agents)
        agents[agent.id] = agent
        new = dict(self.couplings)
        for c in couplings:
            for end in (c.owner, c.neighbor):
                if end not in agents:
                    raise ModelError(f"coupling {c.neighbor}->{c.owner} references unknown agent {end}")
            new[(c.owner, c.neighbor)] = c
        return dataclasses.replace(self, agents=agents, couplings=new, version=self.version + 1)

    def without_agent(self, agent_id) -> "ProblemDescription":
        if agent_id not in self.agents:
            raise ModelError(f"unknown agent id {agent_id}")
        agents = {k: v for k, v in self.agents.items() if k != agent_id}
        couplings = {k: c for k, c in self.couplings.items() if agent_id not in k}
        return dataclasses.replace(self, agents=agents, couplings=couplings, version=self.version + 1)

    def with_initial_states(self, states: Mapping[int, np.ndarray]) -> "ProblemDescription":
        agents = {k: (a.with_x0(states[k]) if k in states else a) for k, a in self.agents.items()}
        return dataclasses.replace(self, agents=agents)


def _diag_ok(arr, n, name, owner, out):
    if arr is None:
        return
    arr = np.asarray(arr, dtype=float).ravel()
    if arr.shape[0] != n:
        out.append(f"agent {owner}: {name} has length {arr.shape[0]}, expected {n}")
    elif np.any(arr < 0):
        bad = [k for k in range(n) if arr[k] < 0]
        out.append(f"agent {owner}: {name} not positive semi-definite (components {bad})")


def _kernel_dims_ok(bk, expected_args, label, out, out_dim=None):
    if bk is None:
        return
    k = bk.kernel
    if tuple(k.arg_dims) != tuple(expected_args):
        out.append(f"{label}: argument dimensions {tuple(k.arg_dims)} != expected {tuple(expected_args)}")
    if out_dim is not None and k.out_dim != out_dim:
        out.append(f"{label}: output dimension {k.out_dim} != expected {out_dim}")


def validate(problem: ProblemDescription) -> list[str]:
    """Check every invariant of the description and return all violations
    (empty list means ok). Never raises on malformed input."""
    out: list[str] = []
    try:
        if not (problem.T > 0):
            out.append(f"horizon T must be positive, got {problem.T}")
        if not (int(problem.N) >= 2):
            out.append(f"discretization N must be >= 2, got {problem.N}")
    except Exception as exc:  # noqa: BLE001 - report, never abort
        out.append(f"horizon/grid unreadable: {exc}")

    for key, a in dict(problem.agents).items():
        try:
            if key != a.id:
                out.append(f"agent stored under id {key} reports id {a.id}")
            n_x, n_u = a.n_x, a.n_u
            for name, arr, n in (("x0", a.x0, n_x), ("u_min", a.u_min, n_u), ("u_max", a.u_max, n_u),
                                 ("x_des", a.x_des, n_x)):
                if arr is None:
                    continue
                arr = np.asarray(arr, dtype=float).ravel()
                if arr.shape[0] != n:
                    out.append(f"agent {a.id}: {name} has length {arr.shape[0]}, expected {n}")
            if a.x0 is not None and not np.all(np.isfinite(a.x0)):
                out.append(f"agent {a.id}: x0 not finite")
            umin = np.asarray(a.u_min, dtype=float).ravel()
            umax = np.asarray(a.u_max, dtype=float).ravel()
            if umin.shape == umax.shape:
                for c in np.nonzero(umin > umax)[0]:
                    out.append(f"agent {a.id}: u_min[{c}]={umin[c]} > u_max[{c}]={umax[c]}")
            if isinstance(a.cost, QuadraticCost):
                _diag_ok(a.cost.P, n_x, "P", a.id, out)
                _diag_ok(a.cost.Q, n_x, "Q", a.id, out)
                _diag_ok(a.cost.R, n_u, "R", a.id, out)
            _kernel_dims_ok(a.dynamics, (n_x, n_u), f"agent {a.id} dynamics", out, n_x)
            _kernel_dims_ok(a.eq, (n_x, n_u), f"agent {a.id} equality constraint", out)
            _kernel_dims_ok(a.ineq, (n_x, n_u), f"agent {a.id} inequality constraint", out)
        except Exception as exc:  # noqa: BLE001
            out.append(f"agent {key}: malformed ({exc})")

    for key, c in dict(problem.couplings).items():
        try:
            i, j = c.owner, c.neighbor
            if key != (i, j):
                out.append(f"coupling stored under {key} describes ({i}, {j})")
            if i == j:
                out.append(f"coupling {j}->{i} is a self-edge")
            missing = [e for e in (i, j) if e not in problem.agents]
            if missing:
                out.append(f"coupling {j}->{i} references unregistered agent(s) {missing}")
                continue
            ai, aj = problem.agents[i], problem.agents[j]
            dims = (ai.n_x, ai.n_u, aj.n_x, aj.n_u)
            _kernel_dims_ok(c.dynamics, dims, f"coupling {j}->{i} dynamics", out, ai.n_x)
            _kernel_dims_ok(c.eq, dims, f"coupling {j}->{i} equality constraint", out)
            _kernel_dims_ok(c.ineq, dims, f"coupling {j}->{i} inequality constraint", out)
        except Exception as exc:  # noqa: BLE001
            out.append(f"coupling {key}: malformed ({exc})")
    return out


def require_valid(problem: ProblemDescription) -> ProblemDescription:
    problems = validate(problem)
    if problems:
        raise ModelError("invalid problem description:\n  " + "\n  ".join(problems))
    return problem
