"""Hypothesis strategies for wire messages."""

import numpy as np
from hypothesis import strategies as st

from dmpc.comm import wire
from dmpc.trajectory import Trajectory

u32 = st.integers(0, 2 ** 32 - 1)
small = st.integers(0, 1000)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
horizon = st.floats(1e-3, 1e3, allow_nan=False)


@st.composite
def trajectories(draw, max_n=6, max_dim=4):
    n = draw(st.integers(2, max_n))
    d = draw(st.integers(1, max_dim))
    vals = draw(st.lists(finite, min_size=n * d, max_size=n * d))
    return Trajectory(draw(horizon), np.array(vals).reshape(n, d))


names = st.builds(lambda k, a, b: wire.key_name((k, a) if b is None else (k, a, b)),
                  st.sampled_from(["x", "u", "v"]), small, st.none() | small)
blocks = st.dictionaries(names, trajectories(), max_size=4)


@st.composite
def matrices(draw):
    r = draw(st.integers(0, 4))
    c = draw(st.integers(0, 5))
    vals = draw(st.lists(finite, min_size=r * c, max_size=r * c))
    return np.array(vals, dtype=float).reshape(r, c)


@st.composite
def vectors(draw):
    n = draw(st.integers(0, 5))
    return np.array(draw(st.lists(finite, min_size=n, max_size=n)), dtype=float)


messages = st.one_of(
    st.builds(wire.Register, u32, st.text(max_size=40)),
    st.builds(wire.Deregister, u32),
    st.builds(wire.TriggerStep, u32, u32, u32),
    st.builds(wire.Ack, u32, u32, u32, u32),
    st.builds(wire.LocalCopies, u32, u32, u32, trajectories(), st.none() | trajectories(),
              st.none() | trajectories()),
    st.builds(wire.CouplingVars, u32, u32, u32, blocks),
    st.builds(wire.MultiplierVals, u32, u32, u32, blocks),
    st.builds(wire.ConvergenceFlag, u32, u32, st.booleans()),
    st.builds(wire.Shutdown),
    st.builds(wire.PlantState, finite, st.dictionaries(u32, vectors(), max_size=3)),
    st.builds(wire.Solution, u32, u32, trajectories(), trajectories(), finite, finite, u32, st.booleans(),
              u32, matrices()),
)
