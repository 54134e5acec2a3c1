
import numpy as np
import pytest

from dmpc import models
from dmpc.admm import AdmmConfig
from dmpc.coordinator import AgentRecord, AgentRegistry, RegistryError, RoundError
from dmpc.distributed import InProcessController, incident_coupling_specs
from dmpc.solver import SolverConfig

FAST = SolverConfig(max_grad_iters=3)


def vdp(n):
    d = models.van_der_pol(n)
    return models.build_problem(d["agents"], d["couplings"], d["horizon"]["T"], d["horizon"]["N"])


def x0(prob):
    return {i: prob.agents[i].x0 for i in prob.ids}


def test_barrier_trace():
    prob = vdp(3)
    ctl = InProcessController(prob, AdmmConfig(q_max=3, eps=0.0), FAST, keep_trace=True)
    ctl.solve(x0(prob))
    trace = ctl.coordinator.trace
    triggers = [k for k, e in enumerate(trace) if e[0] == "trigger"]
    # every step of every iteration is triggered once, in order
    assert [trace[k][1:] for k in triggers] == [(q, s) for q in (1, 2, 3) for s in range(1, 8)] + [(3, 8)]
    for a, b in zip(triggers, triggers[1:]):
        _, q, s = trace[a]
        if s == 7:
            continue
        acks = [e for e in trace[a + 1:b]]
        # all agents acknowledge before the next step is released
        assert sorted(e[1] for e in acks) == prob.ids
        assert all(e[0] == "ack" and e[2:] == (q, s) for e in acks)
    ctl.close()


def test_round_messages_counted():
    prob = vdp(2)
    ctl = InProcessController(prob, AdmmConfig(q_max=2, eps=0.0), FAST)
    res = ctl.solve(x0(prob))
    sent = ctl.coordinator.sent
    assert res.iterations == 2
    assert sent["TriggerStep"] == len(prob.ids) * (2 * 7 + 1)
    assert sent["PlantState"] == len(prob.ids)
    ctl.close()


def test_plug_in_out_locality():
    prob = vdp(4)
    ctl = InProcessController(prob, AdmmConfig(q_max=2, eps=0.0), FAST)
    ctl.solve(x0(prob))
    spec = prob.agents[4].spec
    cps = incident_coupling_specs(prob, 4)
    smaller = prob.without_agent(4)
    ctl.remove_agent(4, smaller)
    ctl.solve(x0(smaller))
    ctl.add_agent(spec, cps, prob)
    res = ctl.solve(x0(prob))
    events = [(e[1], e[2], e[3]) for e in ctl.rebuild_log]
    assert events == [("admit", None, (1, 2, 3, 4)), ("plug_out", 4, (3,)), ("plug_in", 4, (3,))]
    # only the direct neighbor rebuilt its local problem
    assert res.rebuilds[1] == res.rebuilds[2]
    assert res.rebuilds[3] > res.rebuilds[2]
    assert set(res.x) == {1, 2, 3, 4}
    ctl.close()


def record(i, *links):
    return AgentRecord(i, {"id": i}, [{"from": j, "to": i} for j in links] + [{"from": i, "to": j} for j in links])


def test_registry_add_remove_inverse():
    reg = AgentRegistry()
    reg.add_many([record(1, 2), record(2, 1)])
    before = reg.snapshot()
    epoch = reg.epoch
    assert reg.add(record(3, 2)) == [2]
    assert reg.neighbors(2) == [1, 3]
    assert reg.remove(3) == [2]
    assert reg.snapshot() == before
    assert reg.epoch == epoch + 2


def test_registry_rejects_bad_records():
    reg = AgentRegistry()
    reg.add(record(1))
    with pytest.raises(RegistryError):
        reg.add(record(1))
    with pytest.raises(RegistryError):
        reg.add(record(2, 9))
    with pytest.raises(RegistryError):
        reg.add(AgentRecord(3, {}, [{"from": 1, "to": 2}]))
    with pytest.raises(RegistryError):
        reg.remove(7)


def silence(ctl, i):
    ctl.network.set_handler(i, lambda msg: None)


def test_unresponsive_agent_raises_round_error():
    prob = vdp(3)
    ctl = InProcessController(prob, AdmmConfig(q_max=2, eps=0.0), FAST)
    silence(ctl, 3)
    with pytest.raises(RoundError) as info:
        ctl.solve(x0(prob))
    assert info.value.agents == (3,)


def test_plug_and_play_drops_unresponsive_agent():
    prob = vdp(3)
    ctl = InProcessController(prob, AdmmConfig(q_max=2, eps=0.0), FAST)
    ctl.coordinator.plug_and_play = True
    ctl.solve(x0(prob))
    silence(ctl, 3)
    res = ctl.solve(x0(prob))
    assert set(res.x) == {1, 2}
    assert ctl.rebuild_log[-1][1:] == ("plug_out", 3, (2,))
    assert 3 not in ctl.coordinator.registry.records
    assert np.all(np.isfinite(res.u[2]))
