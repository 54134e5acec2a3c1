import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmpc import models
from dmpc.admm import (AdmmAgent, AdmmConfig, NeighborApproxFlags, adapt_penalty, build_local_ocp,
                       coupling_update, external_influence, local_convergence, multiplier_update,
                       run_admm_direct)
from dmpc.distributed import InProcessController
from dmpc.model import ModelError
from dmpc.solver import SolverConfig
from dmpc.trajectory import Trajectory


def chain(preset, n, **kw):
    d = getattr(models, preset)(n, **kw)
    return models.build_problem(d["agents"], d["couplings"], d["horizon"]["T"], d["horizon"]["N"])


def di_problem():
    d = models.double_integrator()
    return models.build_problem(d["agents"], d["couplings"], 2.0, 21)


# -- closed-form coupling update

def test_coupling_update_no_holders():
    z = coupling_update(np.array([1.0, 2.0]), np.zeros(2), 1.0)
    assert np.array_equal(z, [1.0, 2.0])


def test_coupling_update_equal_copy():
    own = np.array([0.3, -1.7])
    z = coupling_update(own, np.zeros(2), 1.0, [(own.copy(), np.zeros(2), 1.0)])
    assert np.array_equal(z, own)


def test_coupling_update_mean():
    assert coupling_update(np.array([0.0]), np.zeros(1), 1.0, [(np.array([2.0]), np.zeros(1), 1.0)])[0] == 1.0


def test_coupling_update_with_multipliers():
    # (1 - 2/4 + (3 - 1/2)) / 2 = 1.5
    z = coupling_update(np.array([1.0]), np.array([2.0]), 4.0, [(np.array([3.0]), np.array([1.0]), 2.0)])
    assert z[0] == 1.5


# -- multiplier update

def test_multiplier_fixed_point():
    mu = np.array([0.4, -2.0])
    assert np.array_equal(multiplier_update(mu, 3.0, np.array([1.0, 2.0]), np.array([1.0, 2.0])), mu)


def test_multiplier_scalar():
    assert multiplier_update(0.0, 2.0, 1.0, 0.0) == 2.0


def test_multiplier_sign():
    assert multiplier_update(0.5, 1.0, 0.0, 1.0) < 0.5


# -- penalty adaption

def test_adapt_small_s_keeps_rho():
    rho = adapt_penalty(np.array([3.0]), np.array([5.0]), np.array([1e-9]), 0.1, 10.0, 1e-8)
    assert rho[0] == 3.0


def test_adapt_doubles():
    assert adapt_penalty(np.array([1.5]), np.array([2.0]), np.array([1.0]), 0.1, 10.0, 1e-8)[0] == 3.0


def test_adapt_clamps_gamma():
    assert adapt_penalty(np.array([1.0]), np.array([100.0]), np.array([1.0]), 0.1, 10.0, 1e-8)[0] == 10.0
    assert adapt_penalty(np.array([1.0]), np.array([0.001]), np.array([1.0]), 0.1, 10.0, 1e-8)[0] == 0.1


def test_adapt_clamps_rho():
    assert adapt_penalty(np.array([5.0]), np.array([2.0]), np.array([1.0]), 0.5, 2.0, 1e-8, rho_max=8.0)[0] == 8.0


grid = arrays(np.float64, (7, 3), elements=st.floats(-1e3, 1e3, allow_nan=False))
pos = arrays(np.float64, (7, 3), elements=st.floats(1e-3, 1e3))


@settings(max_examples=200, deadline=None)
@given(pos, grid, grid)
def test_adapt_elementwise_law(rho, r, s):
    gmin, gmax, eps0 = 0.5, 2.0, 1e-2
    out = adapt_penalty(rho, r, s, gmin, gmax, eps0, rho_min=1e-6, rho_max=1e9)
    big = np.abs(s) > eps0
    expect = np.where(big, np.clip(np.abs(r) / np.where(big, np.abs(s), 1.0), gmin, gmax) * rho, rho)
    assert np.array_equal(out, expect)


@settings(max_examples=100, deadline=None)
@given(pos, pos, arrays(np.float64, (7, 3), elements=st.floats(0.1, 10.0)))
def test_penalty_balance(rho, r, dz):
    # unclamped gamma: ratios stay far inside the bounds
    s = rho * dz
    out = adapt_penalty(rho, r, s, 1e-12, 1e12, 1e-8, rho_min=1e-300, rho_max=1e300)
    assert np.allclose(out * dz, np.abs(r), rtol=1e-12, atol=1e-300)


# -- convergence test

def test_convergence_zero_updates():
    z = np.zeros((5, 2))
    assert local_convergence([z], [z], [z], [z], 0.0, T=1.0)


def test_convergence_constant_shift():
    eps = 1e-2
    z = np.zeros((11, 1))
    assert not local_convergence([z + 2 * eps], [z], [z], [z], eps, T=1.0)
    tz = Trajectory(1.0, z)
    assert not local_convergence(Trajectory(1.0, z + 2 * eps), tz, tz, tz, eps)


def test_convergence_infinite_eps():
    z = np.zeros((3, 1))
    assert local_convergence([z + 1e9], [z], [z], [z], math.inf, T=1.0)


# -- external influence

def test_external_influence_single_sender_is_zero():
    prob = chain("van_der_pol", 2)
    x = np.ones((prob.N, 2))
    u = np.zeros((prob.N, 1))
    v = external_influence(prob, 1, x, u, {2: (x, u)}, exclude=2)
    assert np.array_equal(v, np.zeros_like(x))


def test_external_influence_linear_couplings():
    prob = chain("van_der_pol", 3)
    N = prob.N
    x2 = np.zeros((N, 2))
    u = np.zeros((N, 1))
    x1 = np.column_stack([np.linspace(0, 1, N), np.zeros(N)])
    x3 = np.column_stack([np.linspace(2, 5, N), np.zeros(N)])
    v = external_influence(prob, 2, x2, u, {1: (x1, u), 3: (x3, u)}, exclude=1)
    # the coupling adds the neighbor's first state to the second state derivative
    assert np.array_equal(v[:, 1], x3[:, 0])
    assert np.array_equal(v[:, 0], np.zeros(N))


def test_external_influence_water_tanks():
    prob = chain("water_tanks", 3, eps_reg=1e-12)
    N = prob.N
    h = lambda c: np.full((N, 1), c)
    u = np.zeros((N, 1))
    v = external_influence(prob, 2, h(2.0), u, {1: (h(2.5), u), 3: (h(1.0), u)}, exclude=1)
    a, A = 0.005, 0.1
    # Torricelli flow from tank 2 down into tank 3 leaves tank 2
    expect = -a / A * np.sqrt(2 * 9.81 * 1.0)
    assert np.allclose(v[:, 0], expect, rtol=1e-6)


# -- local OCP structure

def test_decision_variable_counts():
    prob = chain("van_der_pol", 2)
    N = prob.N
    a = AdmmAgent(prob, 1)
    # own control plus neighbor state and control copies
    assert a.num_decision_variables() == (1 + 2 + 1) * N
    b = AdmmAgent(prob, 1, AdmmConfig(flags=NeighborApproxFlags.full()))
    # own control plus neighbor control and external influence
    assert b.num_decision_variables() == (1 + 1 + 2) * N
    assert b.inst.n_x == 4


def test_eta_with_two_neighbors():
    prob = chain("van_der_pol", 3)
    inst, lay, _ = build_local_ocp(prob, 2, NeighborApproxFlags(approx_cost=True))
    Q = prob.agents[2].cost.Q
    assert np.allclose(inst.W[lay.idx(("x", 2))], Q / 3.0)
    assert np.allclose(inst.W[lay.idx(("x", 1))], prob.agents[1].cost.Q / 2.0)


def test_isolated_agent_proximal_term():
    prob = di_problem()
    a = AdmmAgent(prob, 1, AdmmConfig(rho0=2.0))
    assert set(a.slots) == {("x", 1), ("u", 1)}
    pen = a.slots[("u", 1)].spec.penalty
    y = np.ones((prob.N, 1))
    pen.z, pen.mu, pen.rho = y + 0.5, np.zeros_like(y), np.full_like(y, 2.0)
    # mu = 0: the term is rho/2 |z - y|^2, zero at the centre
    assert np.allclose(pen.value(y), 0.25)
    assert np.allclose(pen.value(pen.z), 0.0)


def test_step3_requires_copies():
    prob = chain("van_der_pol", 2)
    a = AdmmAgent(prob, 1, solver=SolverConfig(max_grad_iters=2))
    a.begin_round()
    a.step1()
    with pytest.raises(ModelError):
        a.step3()
    with pytest.raises(ModelError):
        a.step5()


def test_unexpected_copy_rejected():
    prob = chain("van_der_pol", 2)
    a = AdmmAgent(prob, 1)
    with pytest.raises(ModelError):
        a.receive_copies(5, {("u", 1): np.zeros((prob.N, 1))})


# -- iteration semantics

def test_fixed_point_keeps_multipliers():
    prob = di_problem()
    a = AdmmAgent(prob, 1, AdmmConfig(q_max=30, eps=0.0), SolverConfig(max_grad_iters=100, grad_tol=1e-14))
    run_admm_direct({1: a}, q_max=30)
    st = a.slots[("u", 1)]
    for s in a.slots.values():
        s.y = s.z.copy()
        s.z_prev = s.z.copy()
    mu, rho = st.mu.copy(), st.rho.copy()
    a.step5()
    assert np.array_equal(st.mu, mu)
    assert np.array_equal(st.rho, rho)
    assert a.converged(0.0)


def test_eps_infinite_stops_after_one():
    prob = chain("van_der_pol", 2)
    agents = {i: AdmmAgent(prob, i, AdmmConfig(q_max=8, eps=math.inf)) for i in prob.ids}
    assert run_admm_direct(agents) == 1


def test_eps_zero_runs_q_max():
    prob = chain("van_der_pol", 2)
    agents = {i: AdmmAgent(prob, i, AdmmConfig(q_max=6, eps=0.0)) for i in prob.ids}
    assert run_admm_direct(agents) == 6


def test_one_stubborn_agent_forces_q_max():
    prob = chain("van_der_pol", 3)
    loose = AdmmConfig(q_max=7, eps=math.inf)
    ctl = InProcessController(prob, loose, SolverConfig(max_grad_iters=5),
                              agent_admm={2: AdmmConfig(q_max=7, eps=0.0)})
    res = ctl.solve({i: prob.agents[i].x0 for i in prob.ids})
    assert res.iterations == 7
    assert not res.converged
    assert [f[2] for f in res.flags] == [False] * 7
    assert all(f[1] and f[3] for f in res.flags)
    ctl.close()


def test_adaption_off_on_first_iteration():
    prob = chain("van_der_pol", 2)
    agents = {i: AdmmAgent(prob, i, AdmmConfig(q_max=1, eps=0.0, rho0=1.0)) for i in prob.ids}
    run_admm_direct(agents)
    for a in agents.values():
        for s in a.slots.values():
            assert np.all(s.rho == 1.0)


def test_copies_approach_neighbor_trajectory():
    prob = chain("water_tanks", 2)
    agents = {i: AdmmAgent(prob, i, AdmmConfig(q_max=40, eps=0.0), SolverConfig(max_grad_iters=20))
              for i in prob.ids}
    res = []
    for a in agents.values():
        a.begin_round()
    for q in (5, 40):
        run_admm_direct(agents, q_max=q)
        res.append(max(a.history[-1].residual for a in agents.values()))
    assert res[1] < res[0]
