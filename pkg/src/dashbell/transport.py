"""Transports binding clients to the server core.

Three bindings share the message semantics:

* InProcNetwork: everything stays in one thread; delivery is a scheduler
  callback. This is the reference transport for deterministic runs.
* SocketHarness: real TCP over loopback, still driven by a scripted clock.
  Reader threads only move bytes into per-endpoint inboxes; every decode
  and dispatch happens on the runner thread at a quiescence barrier, so a
  scenario replays identically to the in-process binding.
* LiveRuntime: real TCP and real time for the serve/edge commands. Reader
  threads dispatch directly under one big lock.

The invariant that makes the first two byte-identical: a message is handed
to the scheduler at its virtual send instant, shaped by the (shared) link
policy, and dispatched at the resulting virtual instant in both bindings.
The socket binding freezes virtual time while anything is in flight, so
wall-clock transit never shows up in a scenario's timeline.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
from collections import deque
from typing import Any, Callable, Optional

from . import protocol
from .devices import ImpairmentPolicy

log = logging.getLogger(__name__)

STALL_DEADLINE_S = 2.0


class TransportStall(RuntimeError):
    """The socket harness waited too long for in-flight traffic to land."""


class TransitGauge:
    """Counts messages emitted but not yet enqueued at their destination."""

    def __init__(self) -> None:
        self._n = 0
        self._cond = threading.Condition()

    def inc(self) -> None:
        with self._cond:
            self._n += 1

    def dec(self) -> None:
        with self._cond:
            self._n -= 1
            if self._n <= 0:
                self._cond.notify_all()

    def wait_zero(self, timeout: float) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._n == 0, timeout)


class LinkShaper:
    """Applies one direction's drop/delay policy at virtual send time.

    Delivery instants are monotone per direction (a slow frame holds back
    the ones behind it), which is how a byte stream actually behaves.
    """

    def __init__(self, scheduler, policy: Optional[ImpairmentPolicy]):
        self.scheduler = scheduler
        self.policy = policy
        self._last_at = 0

    def send(self, transmit: Callable[[], None]) -> bool:
        now = self.scheduler.clock.now_ms()
        delay = 0
        if self.policy is not None:
            deliver, delay = self.policy.decide()
            if not deliver:
                return False
        at = max(now + delay, self._last_at)
        self._last_at = at
        self.scheduler.call_at(at, transmit)
        return True


def _roundtrip(message: dict[str, Any]) -> dict[str, Any]:
    """Force every in-process message through the real wire encoding."""
    decoded = protocol.decode_frame(protocol.encode_frame(message))
    assert decoded is not None
    return decoded[0]


class InProcChannel:
    """Client side of one in-process connection; EdgeCore-compatible.

    Deliveries carry the connection generation they were sent under, so a
    frame delayed across a disconnect/reconnect dies with its session
    exactly as it would on a real socket.
    """

    def __init__(self, network: "InProcNetwork", port_kind: str, handler,
                 policy: Optional[ImpairmentPolicy] = None):
        self.network = network
        self.port_kind = port_kind
        self.handler = handler
        self.policy = policy
        self.conn_id = next(network.ids)
        self.up = False
        self._gen = 0
        self._to_server = LinkShaper(network.scheduler, policy)
        self._to_client = LinkShaper(network.scheduler, policy)

    def connect(self) -> bool:
        if self.up:
            return True
        self.network.scheduler.call_later(0, self._establish)
        return True

    def _establish(self) -> None:
        if self.up:
            return
        self.up = True
        self._gen += 1
        self._to_server = LinkShaper(self.network.scheduler, self.policy)
        self._to_client = LinkShaper(self.network.scheduler, self.policy)
        self.network.core.on_connect(
            self.conn_id, self.port_kind, self._deliver_to_client, self._server_closed)
        self.handler.on_channel_up()

    def send(self, message: dict[str, Any]) -> bool:
        if not self.up:
            return False
        wire = _roundtrip(message)
        gen = self._gen
        return self._to_server.send(lambda: self._deliver_to_server(wire, gen))

    def _deliver_to_server(self, message: dict[str, Any], gen: int) -> None:
        if self.up and gen == self._gen:
            self.network.core.on_message(self.conn_id, message)

    def _deliver_to_client(self, message: dict[str, Any]) -> None:
        wire = _roundtrip(message)
        gen = self._gen
        self._to_client.send(lambda: self._dispatch_to_client(wire, gen))

    def _dispatch_to_client(self, message: dict[str, Any], gen: int) -> None:
        if self.up and gen == self._gen:
            self.handler.on_server_message(message)

    def close(self) -> None:
        if not self.up:
            return
        self.up = False
        self.network.core.on_disconnect(self.conn_id)
        self.handler.on_channel_down()

    def _server_closed(self) -> None:
        if not self.up:
            return
        self.up = False
        self.network.core.on_disconnect(self.conn_id)
        self.network.scheduler.call_later(0, self.handler.on_channel_down)


class InProcNetwork:
    def __init__(self, core, scheduler):
        self.core = core
        self.scheduler = scheduler
        self.ids = itertools.count(1)

    def open_channel(self, port_kind: str, handler,
                     policy: Optional[ImpairmentPolicy] = None) -> InProcChannel:
        return InProcChannel(self, port_kind, handler, policy)

    def idle_hook(self) -> bool:
        return False


# -- socket plumbing shared by the harness and the live runtime ---------------


def _read_loop(sock: socket.socket, on_message: Callable[[dict], None],
               on_protocol_error: Callable[[protocol.ProtocolError], None],
               on_eof: Callable[[], None]) -> None:
    decoder = protocol.FrameDecoder()
    try:
        while True:
            data = sock.recv(65536)
            if not data:
                break
            try:
                for message in decoder.feed(data):
                    on_message(message)
            except protocol.ProtocolError as exc:
                on_protocol_error(exc)
                break
    except OSError:
        pass
    on_eof()


def _send_frame(sock: socket.socket, message: dict[str, Any]) -> bool:
    try:
        sock.sendall(protocol.encode_frame(message))
        return True
    except OSError:
        return False


def _close_socket(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


class _Inbox:
    """FIFO of ("message"|"protocol_error"|"disconnect", payload) events."""

    def __init__(self) -> None:
        self._items: deque = deque()
        self._lock = threading.Lock()

    def put(self, kind: str, payload: Any) -> None:
        with self._lock:
            self._items.append((kind, payload))

    def pop(self):
        with self._lock:
            return self._items.popleft() if self._items else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


class _SocketEndpoint:
    """One connection's server-facing half inside the harness."""

    def __init__(self, harness: "SocketHarness", conn_id: int, sock: socket.socket,
                 side: str, handler=None, policy: Optional[ImpairmentPolicy] = None,
                 port_kind: str = ""):
        self.harness = harness
        self.conn_id = conn_id
        self.sock = sock
        self.side = side  # "server" or "client"
        self.handler = handler
        self.port_kind = port_kind
        self.inbox = _Inbox()
        self.up = True
        self.shaper = LinkShaper(harness.scheduler, policy)
        self._eof_sent = False
        self._reader = threading.Thread(target=self._run_reader, daemon=True)

    def start_reader(self) -> None:
        self._reader.start()

    def _run_reader(self) -> None:
        def on_message(message: dict) -> None:
            # Enqueue before releasing the gauge: once the count hits zero
            # the runner trusts the inboxes to be complete.
            self.inbox.put("message", message)
            self.harness.gauge.dec()

        def on_protocol_error(exc: protocol.ProtocolError) -> None:
            # Decode failures are not paired with a tracked send (the count
            # was consumed by whatever bytes did arrive), so this event
            # carries its own in-flight token until the runner drains it.
            self.inbox.put("protocol_error", exc)

        def on_eof() -> None:
            if not self._eof_sent:
                self._eof_sent = True
                self.inbox.put("disconnect", None)

        _read_loop(self.sock, on_message, on_protocol_error, on_eof)

    # runner thread only
    def transmit(self, message: dict[str, Any]) -> None:
        if not self.up:
            return
        self.harness.gauge.inc()
        if not _send_frame(self.sock, message):
            self.harness.gauge.dec()

    def send_shaped(self, message: dict[str, Any]) -> bool:
        if not self.up:
            return False
        return self.shaper.send(lambda: self.transmit(message))

    def close(self) -> None:
        if not self.up:
            return
        self.up = False
        _close_socket(self.sock)


class SocketHarness:
    """Scripted-clock scenario runs over real loopback sockets.

    The runner thread owns the core, the scheduler, and every dispatch.
    Reader threads never touch core state; they enqueue. idle_hook drains
    the inboxes in endpoint-creation order whenever the current virtual
    instant has no due timers, waiting out any in-flight traffic so the
    clock cannot outrun the wire.
    """

    def __init__(self, core, scheduler, host: str = "127.0.0.1"):
        self.core = core
        self.scheduler = scheduler
        self.host = host
        self.ids = itertools.count(1)
        self.gauge = TransitGauge()
        self.endpoints: list[_SocketEndpoint] = []
        self._listeners: list[socket.socket] = []
        self._accepted: deque = deque()
        self._accept_cond = threading.Condition()
        self.ports: dict[str, int] = {}

    # -- listeners -------------------------------------------------------------

    def listen(self, port_kinds: tuple[str, ...] = ("edge", "owner", "bridge")) -> None:
        for kind in port_kinds:
            lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            lsock.bind((self.host, 0))
            lsock.listen(8)
            self.ports[kind] = lsock.getsockname()[1]
            self._listeners.append(lsock)
            threading.Thread(target=self._accept_loop, args=(lsock, kind), daemon=True).start()

    def _accept_loop(self, lsock: socket.socket, kind: str) -> None:
        while True:
            try:
                sock, _ = lsock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._accept_cond:
                self._accepted.append((kind, sock))
                self._accept_cond.notify_all()

    def close(self) -> None:
        for lsock in self._listeners:
            _close_socket(lsock)
        for endpoint in self.endpoints:
            endpoint.close()

    # -- client channels ---------------------------------------------------------

    def open_channel(self, port_kind: str, handler,
                     policy: Optional[ImpairmentPolicy] = None) -> "SocketChannel":
        return SocketChannel(self, port_kind, handler, policy)

    def _connect_pair(self, port_kind: str) -> tuple[socket.socket, socket.socket]:
        """Synchronous connect: returns (client socket, accepted server socket).

        Only the runner thread connects, one connection at a time, so the
        accepted socket is unambiguously ours.
        """
        csock = socket.create_connection((self.host, self.ports[port_kind]), timeout=STALL_DEADLINE_S)
        csock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._accept_cond:
            if not self._accept_cond.wait_for(lambda: len(self._accepted) > 0, STALL_DEADLINE_S):
                _close_socket(csock)
                raise TransportStall("accept did not complete")
            kind, ssock = self._accepted.popleft()
        if kind != port_kind:
            _close_socket(csock)
            _close_socket(ssock)
            raise TransportStall(f"crossed accept: wanted {port_kind}, got {kind}")
        return csock, ssock

    # -- the quiescence barrier -----------------------------------------------------

    def idle_hook(self) -> bool:
        did_work = False
        while True:
            if not self.gauge.wait_zero(STALL_DEADLINE_S):
                raise TransportStall("in-flight traffic never landed")
            dispatched = self._drain_once()
            did_work = did_work or dispatched
            if not dispatched and self.gauge.wait_zero(0):
                return did_work

    def _drain_once(self) -> bool:
        dispatched = False
        for endpoint in list(self.endpoints):
            while True:
                item = endpoint.inbox.pop()
                if item is None:
                    break
                dispatched = True
                self._dispatch(endpoint, *item)
        return dispatched

    def _dispatch(self, endpoint: _SocketEndpoint, kind: str, payload: Any) -> None:
        # Disconnects are usually mirrored synchronously by whichever side
        # closed (see SocketChannel); an EOF-driven event that arrives later
        # must be a no-op, hence the up guards.
        if endpoint.side == "server":
            if kind == "message":
                self.core.on_message(endpoint.conn_id, payload)
            elif kind == "protocol_error":
                self.core.on_protocol_error(endpoint.conn_id, payload)
            elif kind == "disconnect":
                if endpoint.up:
                    endpoint.up = False
                    self.core.on_disconnect(endpoint.conn_id)
        else:
            if kind == "message":
                endpoint.handler.on_server_message(payload)
            elif kind == "disconnect":
                if endpoint.up:
                    endpoint.up = False
                    endpoint.handler.on_channel_down()


class SocketChannel:
    """Client side of one harness connection; EdgeCore-compatible."""

    def __init__(self, harness: SocketHarness, port_kind: str, handler,
                 policy: Optional[ImpairmentPolicy] = None):
        self.harness = harness
        self.port_kind = port_kind
        self.handler = handler
        self.policy = policy
        self.client_end: _SocketEndpoint | None = None
        self.server_end: _SocketEndpoint | None = None

    @property
    def up(self) -> bool:
        return self.client_end is not None and self.client_end.up

    def connect(self) -> bool:
        if self.up:
            return True
        try:
            csock, ssock = self.harness._connect_pair(self.port_kind)
        except (OSError, TransportStall):
            return False
        conn_id = next(self.harness.ids)
        self.client_end = _SocketEndpoint(
            self.harness, conn_id, csock, "client", handler=self.handler, policy=self.policy)
        self.server_end = _SocketEndpoint(
            self.harness, conn_id, ssock, "server", policy=self.policy, port_kind=self.port_kind)
        # Creation order fixes drain order; the server half goes first so a
        # request dispatches before the reply that answers it.
        self.harness.endpoints.append(self.server_end)
        self.harness.endpoints.append(self.client_end)
        self.harness.core.on_connect(
            conn_id, self.port_kind, self.server_end.send_shaped, self._closed_by_server)
        self.client_end.start_reader()
        self.server_end.start_reader()
        self.handler.on_channel_up()
        return True

    def send(self, message: dict[str, Any]) -> bool:
        if self.client_end is None:
            return False
        return self.client_end.send_shaped(message)

    def close(self) -> None:
        """Client hangup, mirrored to the core at this same virtual instant.

        Waiting for the FIN to surface through a reader thread would let the
        scripted clock run ahead of the disconnect; both transports must
        observe it at the instant it happened.
        """
        if self.client_end is None or not self.client_end.up:
            return
        self.client_end.up = False
        self.client_end.close()
        self.handler.on_channel_down()
        if self.server_end is not None and self.server_end.up:
            self.server_end.up = False
            self.server_end.close()
            self.harness.core.on_disconnect(self.server_end.conn_id)

    def _closed_by_server(self) -> None:
        if self.server_end is not None:
            self.server_end.up = False
            self.server_end.close()
            self.harness.core.on_disconnect(self.server_end.conn_id)
        if self.client_end is not None and self.client_end.up:
            self.client_end.up = False
            self.client_end.close()
            self.harness.scheduler.call_later(0, self.handler.on_channel_down)


# -- live runtime -----------------------------------------------------------------


class LiveRuntime:
    """Real sockets, real time: dispatches into the core under one lock.

    Suitable for the long-running serve command; scenario work should use
    the deterministic bindings above.
    """

    def __init__(self, core, lock: threading.Lock, host: str,
                 ports: dict[str, int]):
        self.core = core
        self.lock = lock
        self.host = host
        self.ports = ports
        self.ids = itertools.count(1)
        self._listeners: list[socket.socket] = []
        self._conn_socks: dict[int, socket.socket] = {}

    def start(self) -> None:
        for kind, port in self.ports.items():
            lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            lsock.bind((self.host, port))
            lsock.listen(16)
            self._listeners.append(lsock)
            threading.Thread(target=self._accept_loop, args=(lsock, kind), daemon=True).start()

    def stop(self) -> None:
        for lsock in self._listeners:
            _close_socket(lsock)
        for sock in list(self._conn_socks.values()):
            _close_socket(sock)

    def _accept_loop(self, lsock: socket.socket, kind: str) -> None:
        while True:
            try:
                sock, peer = lsock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn_id = next(self.ids)
            log.info("accepted %s connection %d from %s", kind, conn_id, peer)
            self._conn_socks[conn_id] = sock
            with self.lock:
                self.core.on_connect(
                    conn_id, kind,
                    lambda message, s=sock: _send_frame(s, message),
                    lambda s=sock: _close_socket(s))
            threading.Thread(target=self._serve_conn, args=(conn_id, sock), daemon=True).start()

    def _serve_conn(self, conn_id: int, sock: socket.socket) -> None:
        def on_message(message: dict) -> None:
            with self.lock:
                self.core.on_message(conn_id, message)

        def on_protocol_error(exc: protocol.ProtocolError) -> None:
            with self.lock:
                self.core.on_protocol_error(conn_id, exc)

        def on_eof() -> None:
            self._conn_socks.pop(conn_id, None)
            with self.lock:
                self.core.on_disconnect(conn_id)

        _read_loop(sock, on_message, on_protocol_error, on_eof)


class LiveClientChannel:
    """Blocking-socket client channel for the live edge process."""

    def __init__(self, host: str, port: int, handler, lock: threading.Lock):
        self.host = host
        self.port = port
        self.handler = handler
        self.lock = lock
        self._sock: socket.socket | None = None
        self.up = False

    def connect(self) -> bool:
        if self.up:
            return True
        try:
            sock = socket.create_connection((self.host, self.port), timeout=5.0)
        except OSError:
            return False
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self.up = True
        threading.Thread(target=self._run_reader, args=(sock,), daemon=True).start()
        self.handler.on_channel_up()
        return True

    def _run_reader(self, sock: socket.socket) -> None:
        def on_message(message: dict) -> None:
            with self.lock:
                self.handler.on_server_message(message)

        def on_protocol_error(exc: protocol.ProtocolError) -> None:
            log.warning("protocol error from server: %s", exc)
            _close_socket(sock)

        def on_eof() -> None:
            if self._sock is sock and self.up:
                self.up = False
                self._sock = None
                with self.lock:
                    self.handler.on_channel_down()

        _read_loop(sock, on_message, on_protocol_error, on_eof)

    def send(self, message: dict[str, Any]) -> bool:
        sock = self._sock
        if sock is None or not self.up:
            return False
        return _send_frame(sock, message)

    def close(self) -> None:
        sock, self._sock = self._sock, None
        self.up = False
        if sock is not None:
            _close_socket(sock)
