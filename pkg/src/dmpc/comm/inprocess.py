"""In-process message exchange.

Messages are handed over as immutable snapshots (arrays copied and marked
read-only) without serialization. Delivery order is FIFO per
sender/receiver pair; in fact all messages to one endpoint share a single
FIFO queue.

Everything runs in one thread: endpoints with a handler are driven by
:meth:`InProcessNetwork.pump`, which the blocking :meth:`recv` of a
handler-less endpoint (the coordinator) calls while it waits.
"""

from __future__ import annotations

import dataclasses
from collections import Counter, deque
from typing import Callable, Optional

import numpy as np

from ..trajectory import Trajectory
from .wire import Message


class CommError(Exception):
    pass


class DeliveryError(CommError):
    """Destination is not (or no longer) registered."""


class ReceiveTimeout(CommError, TimeoutError):
    """Nothing arrived in time (or, in-process, nothing can arrive)."""


def _freeze(value):
    if isinstance(value, Trajectory):
        vals = value.values.copy()
        vals.setflags(write=False)
        t = Trajectory.__new__(Trajectory)
        t.T, t.values = value.T, vals
        return t
    if isinstance(value, np.ndarray):
        out = value.copy()
        out.setflags(write=False)
        return out
    if isinstance(value, dict):
        return {k: _freeze(v) for k, v in value.items()}
    return value


def snapshot(msg: Message) -> Message:
    """Copy of ``msg`` whose arrays cannot be modified by the receiver."""
    changes = {f.name: _freeze(getattr(msg, f.name)) for f in dataclasses.fields(msg)}
    return dataclasses.replace(msg, **changes)


class InProcessNetwork:
    def __init__(self):
        self._queues: dict = {}
        self._handlers: dict = {}
        self.sent = Counter()
        self.log: list = []     # (src, dest, message) in send order
        self.keep_log = False

    def endpoint(self, name, handler: Optional[Callable] = None) -> "InProcessEndpoint":
        if name in self._queues:
            raise CommError(f"endpoint {name!r} already registered")
        self._queues[name] = deque()
        if handler is not None:
            self._handlers[name] = handler
        return InProcessEndpoint(self, name)

    def set_handler(self, name, handler: Callable):
        self._handlers[name] = handler

    def remove(self, name):
        self._queues.pop(name, None)
        self._handlers.pop(name, None)

    def registered(self, name) -> bool:
        return name in self._queues

    def send(self, src, dest, msg: Message):
        q = self._queues.get(dest)
        if q is None:
            raise DeliveryError(f"cannot deliver {type(msg).__name__} from {src!r}: "
                                f"endpoint {dest!r} is not registered")
        msg = snapshot(msg)
        q.append(msg)
        self.sent[type(msg).__name__] += 1
        if self.keep_log:
            self.log.append((src, dest, msg))

    def pop(self, name):
        q = self._queues.get(name)
        return q.popleft() if q else None

    def pending(self, name) -> int:
        q = self._queues.get(name)
        return len(q) if q else 0

    def pump(self) -> int:
        """Deliver queued messages to handler endpoints (in sorted name
        order) until all their queues are empty. Returns the count."""
        n = 0
        while True:
            progressed = False
            for name in sorted(self._handlers, key=str):
                handler = self._handlers.get(name)
                q = self._queues.get(name)
                while handler is not None and q:
                    handler(q.popleft())
                    n += 1
                    progressed = True
            if not progressed:
                return n


class InProcessEndpoint:
    def __init__(self, network: InProcessNetwork, name):
        self.network = network
        self.name = name

    def send(self, dest, msg: Message):
        self.network.send(self.name, dest, msg)

    def recv(self, timeout: Optional[float] = None) -> Message:
        net = self.network
        while True:
            msg = net.pop(self.name)
            if msg is not None:
                return msg
            if net.pump() == 0 and net.pending(self.name) == 0:
                raise ReceiveTimeout(f"{self.name!r}: no message pending and no endpoint can make progress")

    def close(self):
        self.network.remove(self.name)
