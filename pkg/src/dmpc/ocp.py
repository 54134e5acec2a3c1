"""Optimal control problem instances in a form the gradient solver can
evaluate in batch.

Everything is expressed over the stacked pointwise vector ``v = [x | u]``
(length ``n_v = n_x + n_u``). Dynamics, consensus outputs and constraints are
:class:`TermSet` objects: sums of kernel terms whose arguments are gathered
from ``v`` by index arrays and whose outputs are scattered into the result.
Terms sharing a kernel object are evaluated in one vectorised call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .model import BoundKernel, ModelError
from .trajectory import trapezoid_weights


class _Group:
    __slots__ = ("kernel", "P", "G", "slices", "O", "scale", "S", "Gs", "Jmap", "M", "o", "D")


class TermSet:
    """Sum of kernel terms mapping ``v`` (``n_in``) to ``n_out`` outputs."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self._terms = []
        self._groups: Optional[list] = None

    def __len__(self):
        return len(self._terms)

    def add(self, kernel, args: Sequence, out, scale: float = 1.0, params=None):
        """Add ``scale * kernel(v[args[0]], v[args[1]], ...)`` to outputs
        ``out``. ``kernel`` is a :class:`BoundKernel` or a bare kernel with
        ``params``."""
        if isinstance(kernel, BoundKernel):
            params = kernel.params
            kernel = kernel.kernel
        params = np.zeros(0) if params is None else np.asarray(params, dtype=float).ravel()
        args = [np.asarray(a, dtype=int).ravel() for a in args]
        out = np.asarray(out, dtype=int).ravel()
        if len(args) != len(kernel.arg_dims):
            raise ModelError(f"{kernel.name}: expected {len(kernel.arg_dims)} arguments, got {len(args)}")
        for a, d in zip(args, kernel.arg_dims):
            if a.shape[0] != d:
                raise ModelError(f"{kernel.name}: argument of length {a.shape[0]}, expected {d}")
            if a.size and (a.min() < 0 or a.max() >= self.n_in):
                raise ModelError(f"{kernel.name}: argument index out of range")
        if out.shape[0] != kernel.out_dim:
            raise ModelError(f"{kernel.name}: output of length {out.shape[0]}, expected {kernel.out_dim}")
        if out.size and (out.min() < 0 or out.max() >= self.n_out):
            raise ModelError(f"{kernel.name}: output index out of range")
        self._terms.append((kernel, params, args, out, float(scale)))
        self._groups = None

    def _build(self):
        by_kernel: dict = {}
        order = []
        for t in self._terms:
            key = (id(t[0]), t[1].shape[0])
            if key not in by_kernel:
                by_kernel[key] = []
                order.append(key)
            by_kernel[key].append(t)
        groups = []
        for key in order:
            terms = by_kernel[key]
            g = _Group()
            g.kernel = terms[0][0]
            g.M = len(terms)
            g.o = g.kernel.out_dim
            g.P = np.array([t[1] for t in terms]).reshape(g.M, -1)
            g.G = np.array([np.concatenate(t[2]) if t[2] else np.zeros(0, int) for t in terms], dtype=int)
            g.D = g.G.shape[1]
            ends = np.cumsum(g.kernel.arg_dims)
            g.slices = [slice(int(e - d), int(e)) for e, d in zip(ends, g.kernel.arg_dims)]
            g.O = np.array([t[3] for t in terms], dtype=int)
            g.scale = np.array([t[4] for t in terms])
            S = np.zeros((g.M * g.o, self.n_out))
            Gs = np.zeros((g.M * g.D, self.n_in))
            rows, cols, vals = [], [], []
            for m in range(g.M):
                for r in range(g.o):
                    S[m * g.o + r, g.O[m, r]] += g.scale[m]
                for d in range(g.D):
                    Gs[m * g.D + d, g.G[m, d]] += 1.0
                base = m * g.o * g.D
                for r in range(g.o):
                    for d in range(g.D):
                        rows.append(base + r * g.D + d)
                        cols.append(g.O[m, r] * self.n_in + g.G[m, d])
                        vals.append(g.scale[m])
            g.S = S
            g.Gs = Gs
            g.Jmap = sparse.csr_matrix((vals, (cols, rows)), shape=(self.n_out * self.n_in, g.M * g.o * g.D))
            groups.append(g)
        self._groups = groups

    @property
    def groups(self):
        if self._groups is None:
            self._build()
        return self._groups

    @staticmethod
    def _tt(t):
        if np.ndim(t) == 0:
            return t
        return np.asarray(t)[..., None]

    @staticmethod
    def _args(g, v):
        a = v[..., g.G]
        return [a[..., sl] for sl in g.slices]

    def eval(self, v, t=0.0) -> np.ndarray:
        lead = v.shape[:-1]
        out = None
        tt = self._tt(t)
        for g in self.groups:
            y = g.kernel(self._args(g, v), g.P, tt)
            if y.shape != lead + (g.M, g.o):
                y = np.broadcast_to(y, lead + (g.M, g.o))
            r = y.reshape(lead + (g.M * g.o,)) @ g.S
            out = r if out is None else out + r
        if out is None:
            out = np.zeros(lead + (self.n_out,))
        return out

    def _jac_blocks(self, g, v, t, lead):
        J = g.kernel.jacobian(self._args(g, v), g.P, self._tt(t))
        J = [j if j.shape[:-1] == lead + (g.M, g.o) else np.broadcast_to(j, lead + (g.M, g.o, j.shape[-1]))
             for j in J]
        return np.concatenate(J, axis=-1) if len(J) > 1 else J[0]

    def jac(self, v, t=0.0) -> np.ndarray:
        """Dense Jacobian ``(..., n_out, n_in)``."""
        lead = v.shape[:-1]
        B = int(np.prod(lead)) if lead else 1
        flat = np.zeros((self.n_out * self.n_in, B))
        for g in self.groups:
            Jc = self._jac_blocks(g, v, t, lead).reshape(B, g.M * g.o * g.D)
            flat += g.Jmap @ Jc.T
        return flat.T.reshape(lead + (self.n_out, self.n_in))

    def vjp(self, v, w, t=0.0) -> np.ndarray:
        """``w^T d(out)/dv`` for every leading index."""
        lead = v.shape[:-1]
        res = np.zeros(lead + (self.n_in,))
        for g in self.groups:
            wg = w[..., g.O] * g.scale[:, None]
            Jc = self._jac_blocks(g, v, t, lead)
            gd = np.einsum("...mo,...mod->...md", wg, Jc)
            res += gd.reshape(lead + (g.M * g.D,)) @ g.Gs
        return res


class Penalty:
    """Consensus term ``mu^T (z - y) + rho/2 |z - y|^2`` on an output ``y(v)``.

    ``y`` is either a direct selection ``v[sel]`` or a :class:`TermSet`.
    ``z``, ``mu`` and ``rho`` are grid arrays ``(N, n_out)`` owned by the
    caller and replaced between solves.
    """

    def __init__(self, name, n_out: int, N: int, sel=None, terms: Optional[TermSet] = None, scale: float = 1.0):
        if (sel is None) == (terms is None):
            raise ModelError("penalty needs exactly one of sel / terms")
        self.name = name
        self.n_out = int(n_out)
        self.sel = None if sel is None else np.asarray(sel, dtype=int).ravel()
        if self.sel is not None and np.unique(self.sel).size != self.sel.size:
            raise ModelError("penalty selection indices must be distinct")
        self.terms = terms
        self.scale = float(scale)
        self.z = np.zeros((N, n_out))
        self.mu = np.zeros((N, n_out))
        self.rho = np.ones((N, n_out))

    def output(self, v, t=0.0):
        if self.sel is not None:
            return v[..., self.sel]
        return self.terms.eval(v, t)

    def value(self, y, z=None, mu=None, rho=None):
        z = self.z if z is None else z
        mu = self.mu if mu is None else mu
        rho = self.rho if rho is None else rho
        r = z - y
        return self.scale * np.sum(mu * r + 0.5 * rho * r * r, axis=-1)

    def dvalue(self, y, z=None, mu=None, rho=None):
        z = self.z if z is None else z
        mu = self.mu if mu is None else mu
        rho = self.rho if rho is None else rho
        return -self.scale * (mu + rho * (z - y))

    def vjp(self, v, w, t=0.0):
        if self.sel is not None:
            res = np.zeros(v.shape)
            res[..., self.sel] = w
            return res
        return self.terms.vjp(v, w, t)


@dataclass
class AugLagState:
    """Multipliers ``nu`` and penalties ``c`` per grid point for the
    equality (first ``n_eq`` columns) and inequality constraints."""

    nu: np.ndarray
    c: np.ndarray
    n_eq: int
    outer: int = 0

    @classmethod
    def initial(cls, N: int, n_eq: int, n_in: int, c0: float) -> "AugLagState":
        n = n_eq + n_in
        return cls(np.zeros((N, n)), np.full((N, n), float(c0)), n_eq)

    def copy(self) -> "AugLagState":
        return AugLagState(self.nu.copy(), self.c.copy(), self.n_eq, self.outer)


def al_value(g, nu, c, n_eq):
    """Augmented Lagrangian terms for stacked constraint values ``g``:
    ``nu g + c/2 g^2`` for equalities, the max-form PHR term for
    inequalities. Summed over the last axis."""
    ge, gi = g[..., :n_eq], g[..., n_eq:]
    ne, ni = nu[..., :n_eq], nu[..., n_eq:]
    ce, ci = c[..., :n_eq], c[..., n_eq:]
    val = np.sum(ne * ge + 0.5 * ce * ge * ge, axis=-1)
    if gi.shape[-1]:
        val = val + np.sum((np.maximum(0.0, ni + ci * gi) ** 2 - ni * ni) / (2.0 * ci), axis=-1)
    return val


def al_dvalue(g, nu, c, n_eq):
    d = np.empty(np.broadcast_shapes(g.shape, nu.shape))
    d[..., :n_eq] = nu[..., :n_eq] + c[..., :n_eq] * g[..., :n_eq]
    d[..., n_eq:] = np.maximum(0.0, nu[..., n_eq:] + c[..., n_eq:] * g[..., n_eq:])
    return d


def constraint_violation(g, n_eq):
    """Pointwise violation: ``|g|`` for equalities, ``max(0, h)`` for
    inequalities."""
    v = np.abs(g)
    v[..., n_eq:] = np.maximum(0.0, g[..., n_eq:])
    return v


class OcpInstance:
    """One fixed-horizon OCP on the uniform grid.

    Running cost on the grid::

        l(v_k) = 1/2 sum W (v_k - ref)^2 + sum_penalties phi(y(v_k))
                 + AL terms on the stacked constraints [g; h](v_k)

    integrated with trapezoid weights, plus the terminal cost
    ``1/2 sum Wf (v_{N-1} - ref_f)^2`` (usually only on the state block).
    """

    def __init__(self, n_x: int, n_u: int, T: float, N: int, x0, u_min=None, u_max=None,
                 dynamics: Optional[TermSet] = None):
        self.n_x, self.n_u = int(n_x), int(n_u)
        self.n_v = self.n_x + self.n_u
        self.T, self.N = float(T), int(N)
        self.x0 = np.asarray(x0, dtype=float).ravel()
        self.u_min = np.full(self.n_u, -np.inf) if u_min is None else np.asarray(u_min, dtype=float).ravel()
        self.u_max = np.full(self.n_u, np.inf) if u_max is None else np.asarray(u_max, dtype=float).ravel()
        self.dynamics = dynamics if dynamics is not None else TermSet(self.n_v, self.n_x)
        self.W = np.zeros(self.n_v)
        self.ref = np.zeros(self.n_v)
        self.Wf = np.zeros(self.n_v)
        self.ref_f = np.zeros(self.n_v)
        self.penalties: list[Penalty] = []
        self.eq = TermSet(self.n_v, 0)
        self.ineq = TermSet(self.n_v, 0)
        self.weights = trapezoid_weights(self.T, self.N)
        self.times = np.linspace(0.0, self.T, self.N)

    # -- construction helpers
    def add_quadratic(self, idx, W, ref, Wf=None):
        idx = np.asarray(idx, dtype=int)
        self.W[idx] += np.asarray(W, dtype=float)
        self.ref[idx] = np.asarray(ref, dtype=float)
        if Wf is not None:
            self.Wf[idx] += np.asarray(Wf, dtype=float)
            self.ref_f[idx] = np.asarray(ref, dtype=float)

    def set_constraints(self, eq: Optional[TermSet], ineq: Optional[TermSet]):
        self.eq = eq if eq is not None else TermSet(self.n_v, 0)
        self.ineq = ineq if ineq is not None else TermSet(self.n_v, 0)

    @property
    def n_eq(self):
        return self.eq.n_out

    @property
    def n_ineq(self):
        return self.ineq.n_out

    @property
    def n_con(self):
        return self.eq.n_out + self.ineq.n_out

    def check(self):
        if not np.all(np.isfinite(self.x0)) or self.x0.shape[0] != self.n_x:
            raise ModelError("x0 must be finite with length n_x")
        if self.u_min.shape[0] != self.n_u or self.u_max.shape[0] != self.n_u:
            raise ModelError("bounds must have length n_u")
        if np.any(self.u_min > self.u_max):
            raise ModelError("u_min > u_max")
        if self.dynamics.n_in != self.n_v or self.dynamics.n_out != self.n_x:
            raise ModelError("dynamics term set has wrong dimensions")

    # -- pointwise functions
    def stack(self, x, u):
        return np.concatenate([np.broadcast_to(x, np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + x.shape[-1:]),
                               np.broadcast_to(u, np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + u.shape[-1:])],
                              axis=-1)

    def f(self, x, u, t=0.0):
        return self.dynamics.eval(self.stack(x, u), t)

    def f_jac(self, x, u, t=0.0):
        J = self.dynamics.jac(self.stack(x, u), t)
        return J[..., :self.n_x], J[..., self.n_x:]

    def constraints(self, v, t=0.0):
        """Stacked ``[g; h]`` at points ``v``."""
        parts = []
        if self.n_eq:
            parts.append(self.eq.eval(v, t))
        if self.n_ineq:
            parts.append(self.ineq.eval(v, t))
        if not parts:
            return np.zeros(v.shape[:-1] + (0,))
        return np.concatenate(parts, axis=-1) if len(parts) > 1 else parts[0]

    def constraints_vjp(self, v, w, t=0.0):
        res = np.zeros(v.shape)
        if self.n_eq:
            res += self.eq.vjp(v, w[..., :self.n_eq], t)
        if self.n_ineq:
            res += self.ineq.vjp(v, w[..., self.n_eq:], t)
        return res

    def running(self, v, al: Optional[AugLagState] = None, pen_params=None, t=None):
        """Running cost at grid-aligned points ``v`` of shape ``(..., N, n_v)``
        (or any shape if ``pen_params``/``al`` are given pointwise)."""
        t = self.times if t is None else t
        d = v - self.ref
        val = 0.5 * np.sum(self.W * d * d, axis=-1)
        for k, p in enumerate(self.penalties):
            y = p.output(v, t)
            if pen_params is None:
                val = val + p.value(y)
            else:
                val = val + p.value(y, *pen_params[k])
        if al is not None and self.n_con:
            val = val + al_value(self.constraints(v, t), al.nu, al.c, al.n_eq)
        return val

    def running_grad(self, v, al: Optional[AugLagState] = None, pen_params=None, t=None):
        t = self.times if t is None else t
        grad = self.W * (v - self.ref)
        for k, p in enumerate(self.penalties):
            y = p.output(v, t)
            w = p.dvalue(y) if pen_params is None else p.dvalue(y, *pen_params[k])
            grad = grad + p.vjp(v, w, t)
        if al is not None and self.n_con:
            g = self.constraints(v, t)
            grad = grad + self.constraints_vjp(v, al_dvalue(g, al.nu, al.c, al.n_eq), t)
        return grad

    def terminal(self, v_last):
        d = v_last - self.ref_f
        return 0.5 * np.sum(self.Wf * d * d, axis=-1)

    def terminal_grad(self, v_last):
        return self.Wf * (v_last - self.ref_f)

    def pen_params_at(self, t):
        """Penalty data linearly interpolated at time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        pos = t / (self.T / (self.N - 1))
        idx = np.clip(np.floor(pos).astype(int), 0, self.N - 2)
        fr = (pos - idx)[..., None]
        out = []
        for p in self.penalties:
            out.append(tuple(a[idx] * (1 - fr) + a[idx + 1] * fr for a in (p.z, p.mu, p.rho)))
        return out

    def al_at(self, al: Optional[AugLagState], t):
        if al is None:
            return None
        t = np.asarray(t, dtype=float)
        pos = t / (self.T / (self.N - 1))
        idx = np.clip(np.floor(pos).astype(int), 0, self.N - 2)
        fr = (pos - idx)[..., None]
        return AugLagState(al.nu[idx] * (1 - fr) + al.nu[idx + 1] * fr,
                           al.c[idx] * (1 - fr) + al.c[idx + 1] * fr, al.n_eq, al.outer)
