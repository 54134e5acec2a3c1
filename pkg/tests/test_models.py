import numpy as np
import pytest

from dmpc import models
from dmpc.central import build_central_ocp, global_cost
from dmpc.model import ModelError, validate
from dmpc.solver import _as_vfun, cost, cost_gradient, hamiltonian, hamiltonian_grad, rk_forward

POINTS = 100


def fd_jacobians(bk, args, h=1e-6):
    out = []
    for a_idx, a in enumerate(args):
        cols = []
        for c in range(a.shape[0]):
            lo = [x.copy() for x in args]
            hi = [x.copy() for x in args]
            lo[a_idx][c] -= h
            hi[a_idx][c] += h
            cols.append((bk(*hi) - bk(*lo)) / (2 * h))
        out.append(np.array(cols).T.reshape(bk.out_dim, a.shape[0]))
    return out


def rel_err(a, b):
    scale = max(np.max(np.abs(b)), 1e-6)
    return np.max(np.abs(a - b)) / scale


def agent(model, **spec):
    return models.make_agent({"id": 1, "model": model, **spec})


def coupling(model, **params):
    return models.make_coupling({"from": 2, "to": 1, "model": model, "params": params})


AGENT_KERNELS = {
    "integrator": lambda: agent("integrator").dynamics,
    "double_integrator": lambda: agent("double_integrator").dynamics,
    "spring_mass": lambda: agent("spring_mass").dynamics,
    "smart_grid": lambda: agent("smart_grid", params={"P_source": -0.3}).dynamics,
    "water_tank": lambda: agent("water_tank", params={"d": 0.01}).dynamics,
    "water_tank_limit": lambda: agent("water_tank").ineq,
    "van_der_pol": lambda: agent("van_der_pol").dynamics,
    "van_der_pol_classical": lambda: agent("van_der_pol", params={"classical_vdp": True}).dynamics,
}


@pytest.mark.parametrize("name", sorted(AGENT_KERNELS))
def test_agent_kernel_jacobians(name):
    bk = AGENT_KERNELS[name]()
    rng = np.random.default_rng(1)
    for _ in range(POINTS):
        args = [rng.uniform(-2, 2, size=d) for d in bk.kernel.arg_dims]
        for j, f in zip(bk.jacobian(*args), fd_jacobians(bk, args)):
            assert rel_err(j, f) <= 1e-5


def coupling_args(name, rng):
    if name == "pipe":
        # keep clear of the regularised zero crossing of the head difference
        while True:
            hi, hj = rng.uniform(0.5, 3.0, size=2)
            if abs(hi - hj) > 1e-2:
                return [np.array([hi]), np.zeros(1), np.array([hj]), np.zeros(1)]
    if name == "spring":
        # keep clear of coincident masses
        while True:
            xi, xj = rng.uniform(-2, 2, size=4), rng.uniform(-2, 2, size=4)
            if np.hypot(xi[0] - xj[0], xi[2] - xj[2]) > 0.1:
                return [xi, rng.normal(size=2), xj, rng.normal(size=2)]
    dims = {"power_line": (2, 1), "vdp_coupling": (2, 1)}[name]
    return [rng.uniform(-3, 3, size=dims[0]), rng.normal(size=dims[1]),
            rng.uniform(-3, 3, size=dims[0]), rng.normal(size=dims[1])]


@pytest.mark.parametrize("name", ["spring", "power_line", "pipe", "vdp_coupling"])
def test_coupling_kernel_jacobians(name):
    bk = coupling(name).dynamics
    rng = np.random.default_rng(2)
    for _ in range(POINTS):
        args = coupling_args(name, rng)
        for j, f in zip(bk.jacobian(*args), fd_jacobians(bk, args)):
            assert rel_err(j, f) <= 1e-5


def preset_problem(name, **kw):
    small = {"spring_mass": dict(rows=2, cols=2), "water_tanks": dict(n=3), "van_der_pol": dict(n=3)}
    d = models.PRESETS[name](**{**small.get(name, {}), **kw})
    if name == "smart_grid":
        d["agents"].append(d["events"][0]["agent"])
        d["couplings"] += d["events"][0]["couplings"]
    return models.build_problem(d["agents"], d["couplings"], d["horizon"]["T"], d["horizon"]["N"])


def random_state(name, inst, rng):
    while True:
        x = rng.uniform(-1, 1, size=inst.n_x)
        if name == "water_tanks":
            x = rng.uniform(0.5, 3.0, size=inst.n_x)
            if np.min(np.abs(np.diff(x))) > 1e-2:
                return x
        elif name == "spring_mass":
            # 2x2 grid of unit spacing plus noise
            pos = x.reshape(-1, 4)[:, [0, 2]] * 0.3 + np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
            x.reshape(-1, 4)[:, [0, 2]] = pos
            d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
            if np.min(d[np.triu_indices(len(pos), 1)]) > 0.1:
                return x
        else:
            return x


@pytest.mark.parametrize("name", sorted(models.PRESETS))
def test_hamiltonian_gradients(name):
    inst, _ = build_central_ocp(preset_problem(name))
    rng = np.random.default_rng(4)
    h = 1e-6
    for _ in range(POINTS):
        x = random_state(name, inst, rng)
        u = rng.uniform(-0.5, 0.5, size=inst.n_u)
        lam = rng.normal(size=inst.n_x)
        t = rng.uniform(0, inst.T)
        gx, gu = hamiltonian_grad(inst, x, u, lam, t=t)
        fx = np.array([(hamiltonian(inst, x + h * e, u, lam, t=t) - hamiltonian(inst, x - h * e, u, lam, t=t))
                       / (2 * h) for e in np.eye(inst.n_x)])
        fu = np.array([(hamiltonian(inst, x, u + h * e, lam, t=t) - hamiltonian(inst, x, u - h * e, lam, t=t))
                       / (2 * h) for e in np.eye(inst.n_u)])
        assert rel_err(gx, fx) <= 1e-4
        assert rel_err(gu, fu) <= 1e-4


@pytest.mark.parametrize("name", sorted(models.PRESETS))
def test_total_cost_gradient(name):
    prob = preset_problem(name)
    inst, _ = build_central_ocp(prob)
    rng = np.random.default_rng(5)
    inst.x0 = random_state(name, inst, rng)
    u = np.clip(rng.uniform(-0.2, 0.2, size=(inst.N, inst.n_u)), inst.u_min, inst.u_max)
    X, Vst = rk_forward(_as_vfun(inst, inst.n_x), inst.x0, u[None], inst.T)
    g, _ = cost_gradient(inst, X[0], u, Vst[0])
    h = 1e-6
    fd = np.zeros_like(u)
    for k in range(inst.N):
        for c in range(inst.n_u):
            e = np.zeros_like(u)
            e[k, c] = h
            fd[k, c] = (cost(inst, u + e) - cost(inst, u - e)) / (2 * h)
    assert rel_err(g, fd) <= 1e-4


# -- model descriptions

def test_smart_grid_equilibrium():
    # the printed coupling sign: a sink leads its supplier by asin((kappa - P)/P_max)
    bk = agent("smart_grid", params={"P_source": -0.02}).dynamics
    line = coupling("power_line").dynamics
    delta = np.arcsin(0.021 / 0.1)
    xi, xj = np.array([delta, 0.0]), np.array([0.0, 0.0])
    acc = bk(xi, np.zeros(1))[1] + line(xi, np.zeros(1), xj, np.zeros(1))[1]
    assert abs(acc) < 1e-15


def test_van_der_pol_forms():
    x, u = np.array([2.0, 3.0]), np.array([0.5])
    assert agent("van_der_pol").dynamics(x, u)[1] == pytest.approx(1.0 * (1 - 4) * 1.0 - 2 + 0.5)
    classical = agent("van_der_pol", params={"classical_vdp": True}).dynamics
    assert classical(x, u)[1] == pytest.approx((1 - 4) * 3.0 - 2 + 0.5)


def test_pipe_regularisation_close_to_torricelli():
    dh = np.array([0.5, -1.0, 2.0])
    assert np.allclose(models.pipe_flow_regularized(dh), models.pipe_flow(dh), rtol=1e-5)
    assert models.pipe_flow_regularized(np.array([0.0]))[0] == 0.0


def test_bidirectional_expansion():
    out = models.expand_couplings([{"from": 1, "to": 2, "model": "pipe", "bidirectional": True}])
    assert [(c["from"], c["to"]) for c in out] == [(1, 2), (2, 1)]


def test_build_problem_errors():
    a = {"id": 1, "model": "integrator"}
    with pytest.raises(ModelError):
        models.build_problem([a, dict(a)], [], 1.0, 5)
    with pytest.raises(ModelError):
        models.build_problem([{"id": 1, "model": "nope"}], [], 1.0, 5)
    with pytest.raises(ModelError):
        models.build_problem([a], [{"from": 7, "to": 1, "model": "pipe"}], 1.0, 5)


def test_neighbor_sets():
    prob = preset_problem("water_tanks")
    assert prob.sending(2) == [1, 3]
    assert prob.receiving(1) == [2]
    assert prob.neighbors(3) == [2]


def test_plug_in_and_out_descriptions():
    prob = preset_problem("van_der_pol")
    smaller = prob.without_agent(3)
    assert smaller.ids == [1, 2]
    assert (2, 3) not in smaller.couplings and (3, 2) not in smaller.couplings
    spec = prob.agents[3].spec
    back = smaller.with_agent(models.make_agent(spec), [prob.couplings[(2, 3)], prob.couplings[(3, 2)]])
    assert back.ids == prob.ids
    assert validate(back) == []


def test_global_cost_is_sum():
    prob = preset_problem("van_der_pol")
    rng = np.random.default_rng(0)
    xs = {i: rng.normal(size=(prob.N, 2)) for i in prob.ids}
    us = {i: rng.normal(size=(prob.N, 1)) for i in prob.ids}
    single = [global_cost(prob.without_agent(j).without_agent(k), {i: xs[i]}, {i: us[i]})
              for i, j, k in [(1, 2, 3), (2, 1, 3), (3, 1, 2)]]
    assert global_cost(prob, xs, us) == pytest.approx(sum(single))


# -- composed right-hand side against hand-written plant equations

def composed_rhs(prob, states, controls):
    from dmpc.simulator import PlantModel
    return PlantModel(prob).rhs(states, controls)


def test_neighbor_affine_water_tanks():
    # a vanishing regularization recovers the plain Torricelli flow
    prob = preset_problem("water_tanks", eps_reg=1e-12)
    h = {1: np.array([2.0]), 2: np.array([2.5]), 3: np.array([1.0])}
    u = {1: np.array([0.05]), 2: np.zeros(1), 3: np.zeros(1)}
    A, a, g, d = 0.1, 0.005, 9.81, {1: 0.0, 2: 0.0, 3: 0.01}

    def flow(hi, hj):
        return a / A * np.sign(hj - hi) * np.sqrt(2 * g * abs(hj - hi))

    expect = {1: (0.05 - d[1]) / A + flow(2.0, 2.5),
              2: -d[2] / A + flow(2.5, 2.0) + flow(2.5, 1.0),
              3: -d[3] / A + flow(1.0, 2.5)}
    got = composed_rhs(prob, h, u)
    for i in prob.ids:
        assert got[i][0] == pytest.approx(expect[i], rel=1e-5)


def test_neighbor_affine_van_der_pol():
    prob = preset_problem("van_der_pol")
    x = {1: np.array([0.3, -0.2]), 2: np.array([-1.1, 0.4]), 3: np.array([0.7, 0.9])}
    u = {1: np.array([0.1]), 2: np.array([-0.3]), 3: np.zeros(1)}
    nbrs = {1: [2], 2: [1, 3], 3: [2]}
    got = composed_rhs(prob, x, u)
    for i in prob.ids:
        p, v = x[i]
        acc = (1 - p * p) - p + u[i][0] + sum(x[j][0] - p for j in nbrs[i])
        assert np.allclose(got[i], [v, acc], rtol=1e-14, atol=1e-15)


def test_neighbor_affine_smart_grid():
    prob = preset_problem("smart_grid")
    x = {1: np.array([0.1, 0.01]), 2: np.array([-0.2, 0.02]), 3: np.array([0.4, -0.03])}
    u = {1: np.array([0.05]), 2: np.zeros(1), 3: np.zeros(1)}
    Ps = {1: 0.0, 2: -0.02, 3: -0.02}
    nbrs = {1: [2], 2: [1, 3], 3: [2]}
    got = composed_rhs(prob, x, u)
    for i in prob.ids:
        phi, w = x[i]
        acc = (u[i][0] + Ps[i] - 1e-3) - 2e-3 * w - sum(0.1 * np.sin(x[j][0] - phi) for j in nbrs[i])
        assert np.allclose(got[i], [w, acc], rtol=1e-14, atol=1e-15)


def test_van_der_pol_printed_at_rest():
    assert agent("van_der_pol").dynamics(np.zeros(2), np.zeros(1))[1] == 1.0
