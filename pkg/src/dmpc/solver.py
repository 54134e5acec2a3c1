"""Local OCP solver: augmented Lagrangian outer loop around a projected
gradient method.

The gradient is the exact gradient of the *discretised* cost (trapezoidal
running cost on the grid plus terminal cost, states from a fixed-step
explicit Runge-Kutta scheme with piecewise-linear controls), obtained by
reverse sweeping the integrator. Line search candidates are integrated
together in one batched forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .ocp import AugLagState, OcpInstance, constraint_violation
from .trajectory import Trajectory

TABLEAUS = {
    "rk4": (np.array([[0.0, 0.0, 0.0, 0.0], [0.5, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]),
            np.array([1.0, 2.0, 2.0, 1.0]) / 6.0,
            np.array([0.0, 0.5, 0.5, 1.0])),
    "heun": (np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0.5, 0.5]), np.array([0.0, 1.0])),
    "euler": (np.array([[0.0]]), np.array([1.0]), np.array([0.0])),
}


class SolverError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class IntegrationError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    max_grad_iters: int = 20
    max_outer_iters: int = 1
    grad_tol: float = 1e-6
    constraint_tol: float = 1e-4
    alpha0: float = 1.0
    beta: float = 0.5
    armijo: float = 1e-4
    alpha_min: float = 1e-12
    alpha_max: float = 1e6
    c0: float = 10.0
    c_growth: float = 10.0
    c_theta: float = 0.5
    c_max: float = 1e6
    integrator: str = "rk4"
    n_candidates: int = 4

    def __post_init__(self):
        for name in ("max_grad_iters", "max_outer_iters", "grad_tol", "constraint_tol", "alpha0", "beta",
                     "armijo", "alpha_min", "alpha_max", "c0", "c_growth", "c_theta", "c_max", "n_candidates"):
            if not getattr(self, name) > 0:
                raise ValueError(f"solver setting {name} must be positive, got {getattr(self, name)}")
        if not self.beta < 1.0:
            raise ValueError(f"backtracking factor beta must be < 1, got {self.beta}")
        if self.alpha_min > self.alpha_max:
            raise ValueError("alpha_min must not exceed alpha_max")
        if self.integrator not in TABLEAUS:
            raise ValueError(f"unknown integrator {self.integrator!r}; choose from {sorted(TABLEAUS)}")

    def updated(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


@dataclass
class SolverDiagnostics:
    grad_iters: int = 0
    outer_iters: int = 0
    cost: float = math.nan
    grad_norm: float = math.nan
    alpha: float = math.nan
    stalled: bool = False
    constraint_violation: float = 0.0
    cost_history: list = field(default_factory=list)


@dataclass
class SolveResult:
    x: np.ndarray
    u: np.ndarray
    cost: float
    al: Optional[AugLagState]
    diagnostics: SolverDiagnostics


def project_controls(u, u_min, u_max):
    """Pointwise clamp into ``[u_min, u_max]``; keeps the input type."""
    if isinstance(u, Trajectory):
        return Trajectory(u.T, np.minimum(np.maximum(u.values, u_min), u_max))
    return np.minimum(np.maximum(u, u_min), u_max)


# ---------------------------------------------------------------- integration

def _as_vfun(f, n_x):
    if isinstance(f, OcpInstance):
        return lambda v, t: f.dynamics.eval(v, t)
    return lambda v, t: f(v[..., :n_x], v[..., n_x:], t)


def _stage_controls(U, c):
    # U: (B, N, n_u) -> (B, N-1, S, n_u), linear interpolation at stage times
    c = c[None, None, :, None]
    return (1.0 - c) * U[:, :-1, None, :] + c * U[:, 1:, None, :]


def rk_forward(fv: Callable, x0, U, T: float, integrator: str = "rk4"):
    """Integrate a batch of control grids ``U`` ``(B, N, n_u)`` from ``x0``.

    Returns the state grids ``(B, N, n_x)`` and the stacked stage points
    ``(B, N-1, S, n_x + n_u)`` needed by the reverse sweep.
    """
    A, b, c = TABLEAUS[integrator]
    B, N, n_u = U.shape
    x0 = np.asarray(x0, dtype=float)
    n_x = x0.shape[-1]
    S = b.shape[0]
    h = T / (N - 1)
    X = np.empty((B, N, n_x))
    X[:, 0] = x0
    Vst = np.empty((B, N - 1, S, n_x + n_u))
    Vst[..., n_x:] = _stage_controls(U, c)
    K = np.empty((S, B, n_x))
    x = X[:, 0]
    stage_t = np.arange(N - 1)[:, None] * h + c[None, :] * h
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N - 1):
            for s in range(S):
                xs = x
                for r in range(s):
                    if A[s, r] != 0.0:
                        xs = xs + (h * A[s, r]) * K[r]
                Vst[:, k, s, :n_x] = xs
                K[s] = fv(Vst[:, k, s], stage_t[k, s])
            incr = b[0] * K[0]
            for s in range(1, S):
                incr = incr + b[s] * K[s]
            x = x + h * incr
            X[:, k + 1] = x
    return X, Vst


def forward_integrate(f, x0, u_traj, integrator: str = "rk4") -> Trajectory:
    """Fixed-step explicit integration of ``x' = f(x, u, t)`` on the grid of
    ``u_traj`` with controls interpolated linearly at stage times.

    ``f`` is an :class:`OcpInstance` or a vectorised callable
    ``f(x, u, t)``.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x0)):
        raise IntegrationError("initial state is not finite")
    U = u_traj.values[None]
    X, _ = rk_forward(_as_vfun(f, x0.shape[0]), x0, U, u_traj.T, integrator)
    bad = ~np.all(np.isfinite(X[0]), axis=1)
    if bad.any():
        k = int(np.argmax(bad))
        raise IntegrationError(f"state became non-finite at grid step {k} (t={k * u_traj.dt:g})")
    return Trajectory(u_traj.T, X[0])


# ---------------------------------------------------------------- cost & gradient

def _grid_cost(inst: OcpInstance, X, U, al):
    V = np.concatenate([X, U], axis=-1)
    with np.errstate(over="ignore", invalid="ignore"):
        J = inst.running(V, al) @ inst.weights + inst.terminal(V[..., -1, :])
    return np.where(np.isfinite(J), J, np.inf)


def cost(inst: OcpInstance, u, al: Optional[AugLagState] = None, integrator: str = "rk4") -> float:
    """Discretised augmented cost of the control grid ``u`` ``(N, n_u)``."""
    U = np.asarray(u, dtype=float)[None]
    X, _ = rk_forward(_as_vfun(inst, inst.n_x), inst.x0, U, inst.T, integrator)
    return float(_grid_cost(inst, X, U, al)[0])


def cost_gradient(inst: OcpInstance, X, U, Vst, al=None, integrator: str = "rk4"):
    """Exact gradient ``dJ/du`` ``(N, n_u)`` of the discretised cost at a
    single forward solution; also returns the discrete costates."""
    A, b, c = TABLEAUS[integrator]
    N, n_x = X.shape
    S = b.shape[0]
    h = inst.T / (N - 1)
    V = np.concatenate([X, U], axis=-1)
    lg = inst.running_grad(V, al) * inst.weights[:, None]
    lg[-1] += inst.terminal_grad(V[-1])
    stage_t = np.arange(N - 1)[:, None] * h + c[None, :] * h
    Jst = inst.dynamics.jac(Vst, stage_t)  # (N-1, S, n_x, n_v)
    lam = lg[-1, :n_x].copy()
    lams = np.empty((N, n_x))
    lams[-1] = lam
    gu = lg[:, n_x:].copy()
    zeta = np.empty((S, inst.n_v))
    hb = h * b
    hA = h * A
    wl = 1.0 - c
    for k in range(N - 2, -1, -1):
        for s in range(S - 1, -1, -1):
            theta = hb[s] * lam
            for r in range(s + 1, S):
                if hA[r, s] != 0.0:
                    theta = theta + hA[r, s] * zeta[r, :n_x]
            zeta[s] = theta @ Jst[k, s]
        zu = zeta[:, n_x:]
        lam = lam + zeta[:, :n_x].sum(axis=0) + lg[k, :n_x]
        lams[k] = lam
        gu[k] += wl @ zu
        gu[k + 1] += c @ zu
    return gu, lams


# ---------------------------------------------------------------- Hamiltonian

def _al_point(inst, nu, c):
    if nu is None or inst.n_con == 0:
        return None
    nu = np.asarray(nu, dtype=float)
    c = np.ones_like(nu) if c is None else np.asarray(c, dtype=float)
    return AugLagState(nu, c, inst.n_eq)


def hamiltonian(inst: OcpInstance, x, u, lam, nu=None, c=None, t=0.0):
    """``H = l + lam^T f + nu^T g + 1/2 |g|_c^2`` at one point (penalty data
    interpolated at ``t``)."""
    v = inst.stack(np.asarray(x, float), np.asarray(u, float))
    al = _al_point(inst, nu, c)
    pp = inst.pen_params_at(t) if inst.penalties else None
    l = inst.running(v, al, pen_params=pp, t=t)
    return float(l + np.dot(lam, inst.dynamics.eval(v, t)))


def hamiltonian_grad(inst: OcpInstance, x, u, lam, nu=None, c=None, t=0.0):
    """``(dH/dx, dH/du)`` at one point."""
    v = inst.stack(np.asarray(x, float), np.asarray(u, float))
    al = _al_point(inst, nu, c)
    pp = inst.pen_params_at(t) if inst.penalties else None
    g = inst.running_grad(v, al, pen_params=pp, t=t) + inst.dynamics.vjp(v, np.asarray(lam, float), t)
    return g[:inst.n_x], g[inst.n_x:]


def backward_adjoint(inst: OcpInstance, x_traj: Trajectory, u_traj: Trajectory,
                     al: Optional[AugLagState] = None, integrator: str = "rk4") -> Trajectory:
    """Integrate ``lam' = -dH/dx`` backwards from ``lam(T) = dV/dx(x(T))``
    with the fixed-step scheme; ``x`` and ``u`` are interpolated linearly at
    the stage times."""
    A, b, c = TABLEAUS[integrator]
    N, n_x = x_traj.values.shape
    if u_traj.values.shape[0] != N:
        raise SolverError("x and u must share the grid")
    h = x_traj.T / (N - 1)
    Xv, Uv = x_traj.values, u_traj.values
    V = np.concatenate([Xv, Uv], axis=1)
    lam = inst.terminal_grad(V[-1])[:n_x]
    out = np.empty((N, n_x))
    out[-1] = lam
    S = b.shape[0]
    K = np.empty((S, n_x))
    for k in range(N - 1, 0, -1):
        for s in range(S):
            ls = lam.copy()
            for r in range(s):
                if A[s, r] != 0.0:
                    ls = ls + h * A[s, r] * K[r]
            # reversed time: tau = t_k - c_s h
            fr = 1.0 - c[s]
            v = V[k - 1] * (1.0 - fr) + V[k] * fr
            t = (k - c[s]) * h
            al_t = inst.al_at(al, t) if al is not None else None
            pp = inst.pen_params_at(t) if inst.penalties else None
            hx = inst.running_grad(v, al_t, pen_params=pp, t=t) + inst.dynamics.vjp(v, ls, t)
            K[s] = hx[:n_x]
        lam = lam + h * (b @ K)
        if not np.all(np.isfinite(lam)):
            raise SolverError(f"costate became non-finite at grid step {k - 1}",
                              {"step": k - 1, "x": Xv[k - 1], "u": Uv[k - 1]})
        out[k - 1] = lam
    return Trajectory(x_traj.T, out)


# ---------------------------------------------------------------- projected gradient

def _wdot(w, a, b):
    return float(np.sum(w[:, None] * a * b))


def projected_gradient(inst: OcpInstance, cfg: SolverConfig, u0=None, al: Optional[AugLagState] = None,
                       alpha: Optional[float] = None) -> SolveResult:
    """Array-level projected gradient loop (see :func:`projected_gradient_solve`)."""
    N, n_u = inst.N, inst.n_u
    lo, hi = inst.u_min, inst.u_max
    if u0 is None:
        u = project_controls(np.zeros((N, n_u)), lo, hi)
    else:
        u0 = np.asarray(u0.values if isinstance(u0, Trajectory) else u0, dtype=float)
        if u0.shape != (N, n_u):
            raise SolverError(f"warm start shape {u0.shape} != {(N, n_u)}")
        u = project_controls(u0, lo, hi)
    fv = _as_vfun(inst, inst.n_x)
    X, Vst = rk_forward(fv, inst.x0, u[None], inst.T, cfg.integrator)
    J = float(_grid_cost(inst, X, u[None], al)[0])
    diag = SolverDiagnostics(cost=J)
    if not math.isfinite(J):
        raise SolverError("initial forward pass is not finite", {"u": u, "x": X[0]})
    X, Vst = X[0], Vst[0]
    w = inst.weights
    alpha = cfg.alpha0 if alpha is None or not math.isfinite(alpha) else alpha
    factors = cfg.beta ** np.arange(-1, cfg.n_candidates - 1, dtype=float)
    u_prev = d_prev = None
    diag.cost_history.append(J)
    gnorm = math.nan
    for it in range(cfg.max_grad_iters):
        g, _ = cost_gradient(inst, X, u, Vst, al, cfg.integrator)
        d = g / w[:, None]
        pg = project_controls(u - d, lo, hi) - u
        gnorm = math.sqrt(_wdot(w, pg, pg))
        if gnorm == 0.0:
            break
        if u_prev is not None:
            s, y = u - u_prev, d - d_prev
            sy = _wdot(w, s, y)
            if sy > 0.0:
                alpha = _wdot(w, s, s) / sy
        alpha = min(max(alpha, cfg.alpha_min), cfg.alpha_max)
        trial = alpha * factors
        accepted = None
        while accepted is None:
            Uc = project_controls(u[None] - trial[:, None, None] * d[None], lo, hi)
            Xc, Vc = rk_forward(fv, inst.x0, Uc, inst.T, cfg.integrator)
            Jc = _grid_cost(inst, Xc, Uc, al)
            slope = np.sum(g[None] * (Uc - u[None]), axis=(1, 2))
            ok = np.isfinite(Jc) & (Jc <= J + cfg.armijo * slope) & (slope < 0.0)
            if ok.any():
                idx = np.flatnonzero(ok)
                accepted = int(idx[np.argmin(Jc[idx])])
                break
            if trial[-1] < cfg.alpha_min:
                break
            trial = trial[-1] * cfg.beta ** np.arange(1, cfg.n_candidates + 1, dtype=float)
        if accepted is None:
            diag.stalled = True
            break
        u_prev, d_prev = u, d
        J_old = J
        u, X, Vst, J = Uc[accepted], Xc[accepted], Vc[accepted], float(Jc[accepted])
        alpha = float(trial[accepted])
        diag.grad_iters = it + 1
        diag.cost_history.append(J)
        if (J_old - J) <= cfg.grad_tol * max(abs(J_old), 1e-300):
            break
    diag.cost = J
    diag.grad_norm = gnorm
    diag.alpha = alpha
    return SolveResult(X, u, J, al, diag)


def projected_gradient_solve(inst: OcpInstance, config: SolverConfig, warm_start=None,
                             al: Optional[AugLagState] = None):
    """Minimise the augmented cost over the box-constrained controls.

    Returns ``(x_traj, u_traj, cost, diagnostics)``. The returned state is
    always the forward integration of the returned controls.
    """
    res = projected_gradient(inst, config, warm_start, al)
    return Trajectory(inst.T, res.x), Trajectory(inst.T, res.u), res.cost, res.diagnostics


def augmented_lagrangian(inst: OcpInstance, cfg: SolverConfig, u0=None, al: Optional[AugLagState] = None,
                         alpha: Optional[float] = None) -> SolveResult:
    """Array-level augmented Lagrangian loop (see :func:`augmented_lagrangian_solve`)."""
    n_con = inst.n_con
    if n_con and al is None:
        al = AugLagState.initial(inst.N, inst.n_eq, inst.n_ineq, cfg.c0)
    total = SolverDiagnostics()
    prev_viol = None
    res = None
    u = u0
    for outer in range(cfg.max_outer_iters):
        res = projected_gradient(inst, cfg, u, al if n_con else None, alpha)
        u, alpha = res.u, res.diagnostics.alpha
        total.grad_iters += res.diagnostics.grad_iters
        total.cost_history.extend(res.diagnostics.cost_history)
        total.stalled = total.stalled or res.diagnostics.stalled
        total.outer_iters = outer + 1
        if not n_con:
            break
        V = np.concatenate([res.x, res.u], axis=1)
        g = inst.constraints(V, inst.times)
        viol = constraint_violation(g, inst.n_eq)
        ne = al.n_eq
        nu = al.nu.copy()
        nu[:, :ne] += al.c[:, :ne] * g[:, :ne]
        nu[:, ne:] = np.maximum(0.0, nu[:, ne:] + al.c[:, ne:] * g[:, ne:])
        c = al.c.copy()
        if prev_viol is not None:
            grow = (viol > cfg.c_theta * prev_viol) & (viol > cfg.constraint_tol)
            c[grow] = np.minimum(c[grow] * cfg.c_growth, cfg.c_max)
        al = AugLagState(nu, c, ne, al.outer + 1)
        prev_viol = viol
        total.constraint_violation = float(viol.max()) if viol.size else 0.0
        if total.constraint_violation <= cfg.constraint_tol:
            break
    d = res.diagnostics
    total.cost, total.grad_norm, total.alpha = d.cost, d.grad_norm, d.alpha
    return SolveResult(res.x, res.u, res.cost, al, total)


def augmented_lagrangian_solve(inst: OcpInstance, config: SolverConfig, warm=None):
    """Outer multiplier/penalty loop around :func:`projected_gradient_solve`.

    ``warm`` may be ``None``, a control grid/Trajectory, or a
    ``(u, AugLagState)`` pair. Returns ``(x, u, nu, c, diagnostics)`` with
    ``nu`` and ``c`` as Trajectories (``None`` without constraints).
    """
    u0, al = warm, None
    if isinstance(warm, tuple):
        u0, al = warm
    res = augmented_lagrangian(inst, config, u0, al)
    nu = c = None
    if res.al is not None and inst.n_con:
        nu, c = Trajectory(inst.T, res.al.nu), Trajectory(inst.T, res.al.c)
    return Trajectory(inst.T, res.x), Trajectory(inst.T, res.u), nu, c, res.diagnostics
