"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
that is printed (with ``-s``) and repeated in the terminal summary."""

import dataclasses
import math
import time
from collections import Counter
from pathlib import Path

import numpy as np
from hypothesis import given, settings

import conftest
from dmpc import models
from dmpc.admm import (AdmmAgent, AdmmConfig, NeighborApproxFlags, adapt_penalty, coupling_update,
                       multiplier_update, run_admm_direct)
from dmpc.central import CentralController, global_cost
from dmpc.comm import wire
from dmpc.config import load_config
from dmpc.comm.wire import (FrameDecoder, IncompleteFrame, LengthMismatchError, TruncatedFrameError,
                            UnknownTagError, decode, encode)
from dmpc.distributed import InProcessController, TcpController
from dmpc.node import DIAG_COLUMNS
from dmpc.simulator import mpc_loop
from dmpc.solver import SolverConfig

from strategies import messages


def report(n, ok, detail):
    line = f"C{n} {'PASS' if ok else 'FAIL'}: {detail}"
    conftest.ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def build(d, T=None, N=None):
    return models.build_problem(d["agents"], d["couplings"], T or d["horizon"]["T"], N or d["horizon"]["N"])


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def x0(prob):
    return {i: prob.agents[i].x0 for i in prob.ids}


def test_c1_isolated_agent_matches_central():
    t0 = time.perf_counter()
    prob = build(models.double_integrator())
    sv = SolverConfig(max_grad_iters=100)
    c = CentralController(prob, sv).solve(x0(prob))
    ctl = InProcessController(prob, AdmmConfig(q_max=50, eps=0.0), sv)
    d = ctl.solve(x0(prob))
    ctl.close()
    Jc, Jd = global_cost(prob, c.x, c.u), global_cost(prob, d.x, d.u)
    gap = abs(Jd - Jc) / Jc
    wall = time.perf_counter() - t0
    report(1, gap <= 1e-3 and wall <= 10.0, f"relative cost gap {gap:.2e} (<= 1e-3), {wall:.1f} s (<= 10 s)")


def _mean_local_solve_time(rows, cols, cfg):
    d = models.spring_mass(rows, cols)
    prob = build(d)
    ctl = InProcessController(prob, cfg.admm, cfg.solver)
    res = ctl.solve(x0(prob))
    ctl.close()
    k = DIAG_COLUMNS.index("solve_time")
    return float(np.mean(np.concatenate([np.asarray(v)[:, k] for v in res.diagnostics.values()])))


def test_c2_spring_mass_cost_and_scaling():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "spring_mass.yaml")
    prob = cfg.problem
    # both controllers come from the same config, as with `dmpc compare`
    central = mpc_loop(prob, CentralController(prob, cfg.solver), cfg.steps, cfg.dt, substeps=cfg.substeps)
    ctl = InProcessController(prob, cfg.admm, cfg.solver)
    dist = mpc_loop(prob, ctl, cfg.steps, cfg.dt, substeps=cfg.substeps)
    ctl.close()
    Jc = np.array([r.global_cost for r in central.records])
    Jd = np.array([r.global_cost for r in dist.records])
    gap = float(np.max(np.abs(Jd - Jc) / Jc))
    small, large = _mean_local_solve_time(3, 3, cfg), _mean_local_solve_time(6, 6, cfg)
    ratio = large / small
    wall = time.perf_counter() - t0
    ok = gap <= 0.05 and ratio <= 2.0 and wall <= 300.0
    report(2, ok, f"max relative cost gap over {len(Jc)} steps {gap:.3f} (<= 0.05), mean local solve time "
                  f"6x6/3x3 {large * 1e3:.1f}/{small * 1e3:.1f} ms = {ratio:.2f} (<= 2), {wall:.1f} s (<= 300 s)")


def test_c3_neighbor_approximation_water_tanks():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "water_tanks.yaml")
    prob = cfg.problem
    iters = {}
    for name, flags in (("with", NeighborApproxFlags.full()), ("without", NeighborApproxFlags())):
        ctl = InProcessController(prob, dataclasses.replace(cfg.admm, flags=flags), cfg.solver)
        res = ctl.solve(x0(prob))
        ctl.close()
        iters[name] = (res.iterations, res.converged)
    wall = time.perf_counter() - t0
    (qa, ca), (qn, cn) = iters["with"], iters["without"]
    ok = ca and qa < 150 and cn and 3 * qa <= qn and wall <= 300.0
    report(3, ok, f"iterations with approximation {qa} (converged {ca}, < 150), without {qn} "
                  f"(converged {cn}), ratio {qn / qa:.2f} (>= 3), {wall:.1f} s (<= 300 s)")


def test_c4_penalty_adaption_exact():
    rng = np.random.default_rng(4)
    gmin, gmax, eps0 = 0.5, 2.0, 1e-3
    ok = True
    n_checked = 0
    for _ in range(200):
        rho = rng.uniform(0.1, 10.0, size=(21, 3))
        r = rng.normal(size=(21, 3)) * rng.choice([1e-4, 1.0, 10.0], size=(21, 3))
        s = rng.normal(size=(21, 3)) * rng.choice([1e-5, 1e-3, 1.0], size=(21, 3))
        out = adapt_penalty(rho, r, s, gmin, gmax, eps0, rho_min=0.0, rho_max=math.inf)
        big = np.abs(s) > eps0
        with np.errstate(divide="ignore"):
            expect = np.where(big, np.clip(np.abs(r) / np.abs(s), gmin, gmax) * rho, rho)
        ok &= bool(np.array_equal(out, expect))
        n_checked += rho.size
    report(4, ok, f"{n_checked} entries equal the element-wise law exactly")


def test_c5_analytic_updates():
    checks = [
        coupling_update(np.array([0.0]), np.zeros(1), 1.0, [(np.array([2.0]), np.zeros(1), 1.0)])[0] == 1.0,
        coupling_update(np.array([1.0]), np.array([2.0]), 4.0, [(np.array([3.0]), np.array([1.0]), 2.0)])[0] == 1.5,
        coupling_update(np.array([0.3]), np.zeros(1), 1.0, [(np.array([0.3]), np.zeros(1), 1.0)])[0] == 0.3,
        coupling_update(np.array([6.0]), np.zeros(1), 1.0,
                        [(np.array([0.0]), np.zeros(1), 1.0), (np.array([3.0]), np.zeros(1), 1.0)])[0] == 3.0,
        multiplier_update(0.0, 2.0, 1.0, 0.0) == 2.0,
        multiplier_update(1.0, 0.5, 3.0, 1.0) == 2.0,
        multiplier_update(0.4, 3.0, 1.0, 1.0) == 0.4,
    ]
    report(5, all(checks), f"{sum(checks)}/{len(checks)} hand-computed step3/step5 values exact")


def test_c6_gradient_suite():
    import test_models as tm
    failures = []
    for name in sorted(tm.AGENT_KERNELS):
        try:
            tm.test_agent_kernel_jacobians(name)
        except AssertionError:
            failures.append(f"kernel {name}")
    for name in ["spring", "power_line", "pipe", "vdp_coupling"]:
        try:
            tm.test_coupling_kernel_jacobians(name)
        except AssertionError:
            failures.append(f"coupling {name}")
    for name in sorted(models.PRESETS):
        for fn in (tm.test_hamiltonian_gradients, tm.test_total_cost_gradient):
            try:
                fn(name)
            except AssertionError:
                failures.append(f"{fn.__name__} {name}")
    report(6, not failures, "all Hamiltonian/cost/Jacobian gradients within 1e-4 of central differences"
           if not failures else f"failed: {failures}")


TIME_COL = DIAG_COLUMNS.index("solve_time")


def test_c7_transport_transparency():
    t0 = time.perf_counter()
    prob = build(models.van_der_pol(3))
    admm, sv = AdmmConfig(q_max=5, eps=0.0), SolverConfig(max_grad_iters=10)
    logs = []
    for ctl in (InProcessController(prob, admm, sv), TcpController(prob, admm, sv)):
        logs.append(mpc_loop(prob, ctl, 20, 0.1, substeps=5))
        ctl.close()
    a, b = logs
    diff = 0.0
    for ra, rb in zip(a.records, b.records):
        for i in prob.ids:
            diff = max(diff, float(np.max(np.abs(ra.states[i] - rb.states[i]))),
                       float(np.max(np.abs(ra.controls[i] - rb.controls[i]))))
            da, db = (np.delete(r.diagnostics[i], TIME_COL, axis=1) for r in (ra, rb))
            diff = max(diff, float(np.max(np.abs(da - db))))
        diff = max(diff, abs(ra.global_cost - rb.global_cost))
    wall = time.perf_counter() - t0
    ok = len(a) == len(b) == 20 and diff <= 1e-12 and wall <= 120.0
    report(7, ok, f"max in-process vs TCP difference {diff:.1e} over {len(a)} steps, {wall:.1f} s (<= 120 s)")


def test_c8_smart_grid_plug_in():
    t0 = time.perf_counter()
    cfg = load_config(CONFIGS / "smart_grid.yaml")
    prob = cfg.problem
    ctl = InProcessController(prob, cfg.admm, cfg.solver)
    log = mpc_loop(prob, ctl, cfg.steps, cfg.dt, cfg.events, cfg.substeps)
    rebuilds = list(ctl.rebuild_log)
    ctl.close()
    wall = time.perf_counter() - t0
    t_event = cfg.events[0].time
    decay = {}
    for i in log.agent_ids():
        ts, xs = log.state_history(i)
        post = np.abs(xs[ts >= t_event - 1e-9, 1])
        decay[i] = float(post[-1] / post.max()) if post.max() > 0 else 0.0
    plug_ins = [e for e in rebuilds if e[1] == "plug_in"]
    local = plug_ins == [(plug_ins[0][0], "plug_in", 3, (2,))] if plug_ins else False
    ok = all(v < 0.1 for v in decay.values()) and local and wall <= 300.0
    shown = ", ".join(f"{i}: {v:.3f}" for i, v in sorted(decay.items()))
    report(8, ok, f"final/peak |frequency| after plug-in {{{shown}}} (< 0.1), plug-in notified only "
                  f"agent 2: {local}, {wall:.1f} s (<= 300 s)")


KINDS = Counter()


@settings(max_examples=1100, deadline=None)
@given(messages)
def _round_trip(msg):
    out, rest = decode(encode(msg))
    assert rest == b"" and out == msg
    KINDS[type(msg).__name__] += 1


def test_c9_wire_round_trip():
    KINDS.clear()
    _round_trip()
    n = sum(KINDS.values())
    frame = encode(wire.Ack(1, 2, 3, 4))
    errors = []
    try:
        decode(frame[:-3])
    except IncompleteFrame:
        errors.append("partial")
    try:
        decode(frame[:-3], final=True)
    except TruncatedFrameError:
        errors.append("truncated")
    bad = bytearray(frame)
    bad[4] = 200
    try:
        decode(bytes(bad))
    except UnknownTagError:
        errors.append("tag")
    bad = bytearray(frame)
    bad[3] = 12
    try:
        decode(bytes(bad))
    except LengthMismatchError:
        errors.append("length")
    dec = FrameDecoder()
    dec.feed(frame[:9])
    try:
        dec.close()
    except TruncatedFrameError:
        errors.append("stream")
    ok = n >= 1000 and len(KINDS) == 11 and len(errors) == 5
    report(9, ok, f"{n} random messages over {len(KINDS)} kinds round-trip; error cases {errors}")


def test_c10_convergence_semantics():
    prob = build(models.van_der_pol(3))
    sv = SolverConfig(max_grad_iters=5)

    def direct(eps, q_max):
        agents = {i: AdmmAgent(prob, i, AdmmConfig(q_max=q_max, eps=eps), sv) for i in prob.ids}
        return run_admm_direct(agents)

    one = direct(math.inf, 8)
    full = direct(0.0, 6)
    ctl = InProcessController(prob, AdmmConfig(q_max=7, eps=math.inf), sv,
                              agent_admm={2: AdmmConfig(q_max=7, eps=0.0)})
    res = ctl.solve(x0(prob))
    ctl.close()
    stubborn = res.iterations
    ok = one == 1 and full == 6 and stubborn == 7 and not res.converged
    report(10, ok, f"eps=inf -> {one} iteration, eps=0 -> {full}/6, one non-converging agent -> {stubborn}/7")
