"""Binary wire format.

Every frame is ``u32 payload_length | u8 tag | payload``. Integers are
unsigned 32-bit big-endian; floats are IEEE-754 binary64 little-endian.
A trajectory is ``f64 T | u32 N | u32 dim | N*dim f64`` (row-major); a
string is ``u32 byte_length | utf-8 bytes``; a matrix is ``u32 rows |
u32 cols | rows*cols f64``. Optional fields are preceded by a ``u8``
presence byte, booleans are a single ``u8`` (0 or 1).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from ..trajectory import Trajectory, TrajectoryError

MAX_PAYLOAD = 2 ** 32 - 1
HEADER = struct.Struct(">IB")


class WireError(Exception):
    """Base class for framing/decoding errors."""


class IncompleteFrame(WireError):
    """Not enough bytes yet for a whole frame; read more and retry."""


class UnknownTagError(WireError):
    pass


class LengthMismatchError(WireError):
    """The payload does not match its declared length or internal counts."""


class TruncatedFrameError(WireError):
    """The stream ended in the middle of a frame."""


class EncodeError(WireError):
    pass


def _eq(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a), np.asarray(b)
        return a.shape == b.shape and np.array_equal(a, b)
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_eq(a[k], b[k]) for k in a)
    return a == b


class Message:
    tag = 0

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return all(_eq(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = None


@dataclass(eq=False)
class Register(Message):
    agent_id: int
    summary: str
    tag = 1


@dataclass(eq=False)
class Deregister(Message):
    agent_id: int
    tag = 2


@dataclass(eq=False)
class TriggerStep(Message):
    """``step`` 0 starts a round, 1..6 are the ADMM steps, 7 asks for the
    convergence flag and 8 for the round's solution."""

    epoch: int
    q: int
    step: int
    tag = 3


@dataclass(eq=False)
class Ack(Message):
    agent_id: int
    epoch: int
    q: int
    step: int
    tag = 4


@dataclass(eq=False)
class LocalCopies(Message):
    sender: int
    receiver: int
    q: int
    ubar: Trajectory
    xbar: Optional[Trajectory] = None
    vbar: Optional[Trajectory] = None
    tag = 5


@dataclass(eq=False)
class CouplingVars(Message):
    sender: int
    receiver: int
    q: int
    blocks: dict = field(default_factory=dict)
    tag = 6


@dataclass(eq=False)
class MultiplierVals(Message):
    sender: int
    receiver: int
    q: int
    blocks: dict = field(default_factory=dict)
    tag = 7


@dataclass(eq=False)
class ConvergenceFlag(Message):
    agent_id: int
    q: int
    converged: bool
    tag = 8


@dataclass(eq=False)
class Shutdown(Message):
    tag = 9


@dataclass(eq=False)
class PlantState(Message):
    """Measured states at sampling time ``t`` (own and neighbors')."""

    t: float
    states: dict = field(default_factory=dict)
    tag = 10


@dataclass(eq=False)
class Solution(Message):
    agent_id: int
    q: int
    x: Trajectory
    u: Trajectory
    local_cost: float
    solve_time: float
    solver_iters: int
    stalled: bool
    rebuilds: int
    diagnostics: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    tag = 11


MESSAGE_TYPES = {cls.tag: cls for cls in (Register, Deregister, TriggerStep, Ack, LocalCopies, CouplingVars,
                                           MultiplierVals, ConvergenceFlag, Shutdown, PlantState, Solution)}


# ---------------------------------------------------------------- encoding

class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", int(v)))

    def u32(self, v):
        v = int(v)
        if not 0 <= v <= 0xFFFFFFFF:
            raise EncodeError(f"integer {v} does not fit in u32")
        self.parts.append(struct.pack(">I", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", float(v)))

    def string(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def traj(self, t: Trajectory):
        vals = np.ascontiguousarray(t.values, dtype="<f8")
        self.f64(t.T)
        self.u32(vals.shape[0])
        self.u32(vals.shape[1])
        self.parts.append(vals.tobytes())

    def opt_traj(self, t):
        self.u8(t is not None)
        if t is not None:
            self.traj(t)

    def matrix(self, m):
        m = np.asarray(m, dtype="<f8")
        if m.ndim != 2:
            raise EncodeError(f"expected a 2-D matrix, got shape {m.shape}")
        m = np.ascontiguousarray(m)
        self.u32(m.shape[0])
        self.u32(m.shape[1])
        self.parts.append(m.tobytes())

    def vector(self, v):
        v = np.ascontiguousarray(np.asarray(v, dtype="<f8").ravel())
        self.u32(v.shape[0])
        self.parts.append(v.tobytes())

    def blocks(self, d):
        self.u32(len(d))
        for name in d:
            self.string(name)
            self.traj(d[name])

    def bytes(self):
        return b"".join(self.parts)


def _payload(msg: Message) -> bytes:
    w = _Writer()
    if isinstance(msg, Register):
        w.u32(msg.agent_id)
        w.string(msg.summary)
    elif isinstance(msg, Deregister):
        w.u32(msg.agent_id)
    elif isinstance(msg, TriggerStep):
        w.u32(msg.epoch), w.u32(msg.q), w.u32(msg.step)
    elif isinstance(msg, Ack):
        w.u32(msg.agent_id), w.u32(msg.epoch), w.u32(msg.q), w.u32(msg.step)
    elif isinstance(msg, LocalCopies):
        w.u32(msg.sender), w.u32(msg.receiver), w.u32(msg.q)
        w.traj(msg.ubar)
        w.opt_traj(msg.xbar)
        w.opt_traj(msg.vbar)
    elif isinstance(msg, (CouplingVars, MultiplierVals)):
        w.u32(msg.sender), w.u32(msg.receiver), w.u32(msg.q)
        w.blocks(msg.blocks)
    elif isinstance(msg, ConvergenceFlag):
        w.u32(msg.agent_id), w.u32(msg.q), w.u8(bool(msg.converged))
    elif isinstance(msg, Shutdown):
        pass
    elif isinstance(msg, PlantState):
        w.f64(msg.t)
        w.u32(len(msg.states))
        for k in msg.states:
            w.u32(k)
            w.vector(msg.states[k])
    elif isinstance(msg, Solution):
        w.u32(msg.agent_id), w.u32(msg.q)
        w.traj(msg.x), w.traj(msg.u)
        w.f64(msg.local_cost), w.f64(msg.solve_time)
        w.u32(msg.solver_iters), w.u8(bool(msg.stalled)), w.u32(msg.rebuilds)
        w.matrix(msg.diagnostics)
    else:
        raise EncodeError(f"cannot encode {type(msg).__name__}")
    return w.bytes()


def encode(msg: Message) -> bytes:
    payload = _payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise EncodeError(f"payload of {len(payload)} bytes exceeds the u32 length field")
    return HEADER.pack(len(payload), msg.tag) + payload


# ---------------------------------------------------------------- decoding

class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def _take(self, n):
        if self.pos + n > len(self.buf):
            raise LengthMismatchError(f"payload too short: need {n} bytes at offset {self.pos}, "
                                      f"payload has {len(self.buf)}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u8(self):
        return self._take(1)[0]

    def bool(self):
        v = self.u8()
        if v > 1:
            raise LengthMismatchError(f"boolean byte {v} is not 0/1")
        return bool(v)

    def u32(self):
        return struct.unpack(">I", self._take(4))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def string(self):
        n = self.u32()
        try:
            return bytes(self._take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LengthMismatchError(f"invalid utf-8 string: {exc}") from None

    def _floats(self, count):
        raw = self._take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def traj(self):
        T = self.f64()
        N = self.u32()
        dim = self.u32()
        if N * dim * 8 > len(self.buf) - self.pos:
            raise LengthMismatchError(f"trajectory declares {N}x{dim} values, payload too short")
        vals = self._floats(N * dim).reshape(N, dim)
        try:
            return Trajectory(T, vals)
        except TrajectoryError as exc:
            raise LengthMismatchError(f"invalid trajectory block: {exc}") from None

    def opt_traj(self):
        return self.traj() if self.bool() else None

    def matrix(self):
        r, c = self.u32(), self.u32()
        if r * c * 8 > len(self.buf) - self.pos:
            raise LengthMismatchError(f"matrix declares {r}x{c} values, payload too short")
        return self._floats(r * c).reshape(r, c)

    def vector(self):
        n = self.u32()
        if n * 8 > len(self.buf) - self.pos:
            raise LengthMismatchError(f"vector declares {n} values, payload too short")
        return self._floats(n)

    def blocks(self):
        n = self.u32()
        out = {}
        for _ in range(n):
            name = self.string()
            out[name] = self.traj()
        return out


def _decode_payload(tag, payload: memoryview) -> Message:
    r = _Reader(payload)
    if tag == Register.tag:
        msg = Register(r.u32(), r.string())
    elif tag == Deregister.tag:
        msg = Deregister(r.u32())
    elif tag == TriggerStep.tag:
        msg = TriggerStep(r.u32(), r.u32(), r.u32())
    elif tag == Ack.tag:
        msg = Ack(r.u32(), r.u32(), r.u32(), r.u32())
    elif tag == LocalCopies.tag:
        s, d, q = r.u32(), r.u32(), r.u32()
        msg = LocalCopies(s, d, q, r.traj(), r.opt_traj(), r.opt_traj())
    elif tag in (CouplingVars.tag, MultiplierVals.tag):
        s, d, q = r.u32(), r.u32(), r.u32()
        msg = MESSAGE_TYPES[tag](s, d, q, r.blocks())
    elif tag == ConvergenceFlag.tag:
        msg = ConvergenceFlag(r.u32(), r.u32(), r.bool())
    elif tag == Shutdown.tag:
        msg = Shutdown()
    elif tag == PlantState.tag:
        t = r.f64()
        n = r.u32()
        states = {}
        for _ in range(n):
            k = r.u32()
            states[k] = r.vector()
        msg = PlantState(t, states)
    elif tag == Solution.tag:
        aid, q = r.u32(), r.u32()
        x, u = r.traj(), r.traj()
        msg = Solution(aid, q, x, u, r.f64(), r.f64(), r.u32(), r.bool(), r.u32(), r.matrix())
    else:
        raise UnknownTagError(f"unknown message tag {tag}")
    if r.pos != len(payload):
        raise LengthMismatchError(f"{type(msg).__name__}: declared payload of {len(payload)} bytes, "
                                  f"decoded {r.pos}")
    return msg


def decode(data, final: bool = False):
    """Decode the first frame of ``data``.

    Returns ``(message, remainder)``. Raises :class:`IncompleteFrame` if
    ``data`` holds only part of a frame, or :class:`TruncatedFrameError`
    instead when ``final`` says no more bytes will come.
    """
    buf = memoryview(data) if not isinstance(data, memoryview) else data
    if len(buf) < HEADER.size:
        if final and len(buf) > 0:
            raise TruncatedFrameError(f"stream ended inside a frame header ({len(buf)} bytes)")
        raise IncompleteFrame("need more bytes for the frame header")
    length, tag = HEADER.unpack_from(buf, 0)
    if tag not in MESSAGE_TYPES:
        raise UnknownTagError(f"unknown message tag {tag}")
    end = HEADER.size + length
    if len(buf) < end:
        if final:
            raise TruncatedFrameError(f"stream ended after {len(buf)} of {end} frame bytes")
        raise IncompleteFrame(f"need {end - len(buf)} more bytes")
    msg = _decode_payload(tag, buf[HEADER.size:end])
    return msg, bytes(buf[end:])


class FrameDecoder:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while True:
            try:
                msg, _ = decode(self._buf)
            except IncompleteFrame:
                break
            length = HEADER.unpack_from(self._buf, 0)[0]
            del self._buf[:HEADER.size + length]
            out.append(msg)
        return out

    def close(self):
        """Signal end of stream; raises if a partial frame is pending."""
        if self._buf:
            n = len(self._buf)
            self._buf.clear()
            raise TruncatedFrameError(f"stream ended with {n} bytes of an incomplete frame")


def key_name(key: tuple) -> str:
    """Slot key such as ``("v", 1, 2)`` as a block name ``"v:1:2"``."""
    return ":".join(str(k) for k in key)


def name_key(name: str) -> tuple:
    parts = name.split(":")
    return (parts[0],) + tuple(int(p) for p in parts[1:])
