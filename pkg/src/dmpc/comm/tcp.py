"""TCP transport with the binary framing of :mod:`dmpc.comm.wire`.

Each endpoint listens on its own socket and opens one outgoing connection
per destination on first use. Incoming bytes are decoded by one reader
thread per accepted connection into a FIFO inbox. Connections are never
re-established: a peer that disappears shows up as a receive timeout at
the coordinator, and a stream cut inside a frame is recorded as a
:class:`TruncatedFrameError` without delivering anything partial.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
from typing import Optional

from .inprocess import CommError, DeliveryError, ReceiveTimeout
from .wire import FrameDecoder, Message, WireError, encode

log = logging.getLogger(__name__)


class ConnectionFailed(DeliveryError):
    pass


def parse_address(addr) -> tuple[str, int]:
    if isinstance(addr, (tuple, list)):
        return str(addr[0]), int(addr[1])
    host, _, port = str(addr).rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


class TcpEndpoint:
    def __init__(self, name, host: str = "127.0.0.1", port: int = 0, connect_timeout: float = 5.0):
        self.name = name
        self.connect_timeout = connect_timeout
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()[:2]
        self._inbox: queue.Queue = queue.Queue()
        self._book: dict = {}
        self._out: dict = {}
        self._out_lock = threading.Lock()
        self._send_locks: dict = {}
        self._readers: list = []
        self._incoming: list = []
        self._closed = threading.Event()
        self.errors: list = []
        self._acceptor = threading.Thread(target=self._accept_loop, name=f"accept-{name}", daemon=True)
        self._acceptor.start()

    @property
    def address_str(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    def set_address(self, name, addr):
        self._book[name] = parse_address(addr)

    def addresses(self) -> dict:
        return dict(self._book)

    # -- receiving
    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._server.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._incoming.append(conn)
            t = threading.Thread(target=self._read_loop, args=(conn,), name=f"read-{self.name}", daemon=True)
            t.start()
            self._readers.append(t)

    def _read_loop(self, conn: socket.socket):
        dec = FrameDecoder()
        try:
            while True:
                try:
                    data = conn.recv(1 << 16)
                except OSError:
                    data = b""
                if not data:
                    dec.close()
                    return
                for msg in dec.feed(data):
                    self._inbox.put(msg)
        except WireError as exc:
            if not self._closed.is_set():
                log.warning("%s: dropped connection: %s", self.name, exc)
            self.errors.append(exc)
        finally:
            conn.close()

    def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ReceiveTimeout(f"{self.name!r}: nothing received within {timeout} s") from None

    # -- sending
    def _connection(self, dest) -> socket.socket:
        with self._out_lock:
            sock = self._out.get(dest)
            if sock is not None:
                return sock
            addr = self._book.get(dest)
            if addr is None:
                raise DeliveryError(f"{self.name!r}: no address known for {dest!r}")
            try:
                sock = socket.create_connection(addr, timeout=self.connect_timeout)
            except OSError as exc:
                raise ConnectionFailed(f"{self.name!r}: cannot connect to {dest!r} at {addr}: {exc}") from exc
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._out[dest] = sock
            self._send_locks[dest] = threading.Lock()
            return sock

    def send(self, dest, msg: Message):
        self.send_bytes(dest, encode(msg))

    def send_bytes(self, dest, data: bytes):
        sock = self._connection(dest)
        try:
            with self._send_locks[dest]:
                sock.sendall(data)
        except OSError as exc:
            self.drop(dest)
            raise ConnectionFailed(f"{self.name!r}: sending to {dest!r} failed: {exc}") from exc

    def drop(self, dest):
        """Forget the outgoing connection to ``dest``."""
        with self._out_lock:
            sock = self._out.pop(dest, None)
            self._send_locks.pop(dest, None)
        self._book.pop(dest, None)
        if sock is not None:
            sock.close()

    def close(self):
        self._closed.set()
        try:
            self._server.close()
        except OSError:
            pass
        with self._out_lock:
            for sock in self._out.values():
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                sock.close()
            self._out.clear()
        for conn in self._incoming:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


__all__ = ["TcpEndpoint", "ConnectionFailed", "parse_address", "CommError", "DeliveryError", "ReceiveTimeout"]
