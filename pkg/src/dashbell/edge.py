"""Edge controller: the in-home coordinator between button, peripherals,
and the coordination server.

The core is a single-threaded state machine driven by one logical event
loop: probe intake, server channel callbacks, and timer callbacks all run
on the owning loop. Nothing here blocks longer than one frame encode; the
channel implementation owns the actual I/O.

Press handling order is fixed: buzzer rings, the camera grabs a frame, the
entry uploads. A dead camera degrades the upload (picture omitted, fault
flagged) instead of aborting it. Uploads made while the server is
unreachable wait in a bounded drop-oldest queue and are flushed on
reconnect; the server deduplicates by press id, so a reconnect flush
delivers each press at most once.
"""

from __future__ import annotations

import base64
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol

from . import protocol
from .devices import CaptureFailure

log = logging.getLogger(__name__)

PERIPHERALS = ("buzzer", "camera", "servo", "edge")


@dataclass(frozen=True)
class ButtonProbe:
    """One captured announcement packet from a WiFi button."""

    mac: str
    at: int  # ms since epoch


@dataclass(frozen=True)
class ButtonEvent:
    """A debounced press: one per probe burst, stamped at the first probe."""

    press_id: int
    mac: str
    pressed_at: int


@dataclass(frozen=True)
class PeripheralAction:
    at: int
    peripheral: str
    action: str


class PeripheralLog:
    """Append-only action trail for the edge's peripherals.

    `on_append`, when set, observes each accepted action; the live edge
    uses it to echo hardware activity to the operator.
    """

    def __init__(self) -> None:
        self._entries: list[PeripheralAction] = []
        self.on_append: Callable[[PeripheralAction], None] | None = None

    def append(self, at: int, peripheral: str, action: str) -> None:
        if peripheral not in PERIPHERALS:
            raise ValueError(f"unknown peripheral {peripheral!r}")
        if self._entries and at < self._entries[-1].at:
            raise ValueError("peripheral log timestamps must be non-decreasing")
        entry = PeripheralAction(at, peripheral, action)
        self._entries.append(entry)
        if self.on_append is not None:
            self.on_append(entry)

    def entries(self) -> tuple[PeripheralAction, ...]:
        return tuple(self._entries)

    def count(self, peripheral: str, action: str) -> int:
        return sum(1 for e in self._entries if e.peripheral == peripheral and e.action == action)


class PressDebouncer:
    """Collapse probe bursts into one ButtonEvent per press.

    A burst is a maximal run of probes from one allow-listed MAC whose
    consecutive gaps are below the window; the event carries the burst's
    first timestamp. Probes from unlisted MACs are counted and dropped.
    """

    def __init__(self, allowed_macs: Iterable[str], window_ms: int):
        if window_ms <= 0:
            raise ValueError("debounce window must be > 0")
        self.allowed = frozenset(m.lower() for m in allowed_macs)
        self.window_ms = window_ms
        self.unknown_probes = 0
        self._last_probe_at: dict[str, int] = {}
        self._press_counter = 0

    def feed(self, probe: ButtonProbe) -> ButtonEvent | None:
        mac = probe.mac.lower()
        if mac not in self.allowed:
            self.unknown_probes += 1
            return None
        last = self._last_probe_at.get(mac)
        self._last_probe_at[mac] = probe.at
        if last is not None and probe.at - last < self.window_ms:
            return None
        self._press_counter += 1
        return ButtonEvent(press_id=self._press_counter, mac=mac, pressed_at=probe.at)


def detect_presses(probes: Iterable[ButtonProbe], allowed_macs: Iterable[str],
                   window_ms: int) -> list[ButtonEvent]:
    """Run the streaming debouncer over a whole time-ordered probe list."""
    debouncer = PressDebouncer(allowed_macs, window_ms)
    events = []
    for probe in probes:
        event = debouncer.feed(probe)
        if event is not None:
            events.append(event)
    return events


@dataclass
class EdgeConfig:
    server_host: str = "127.0.0.1"
    server_port: int = protocol.DEFAULT_EDGE_PORT
    token: str = ""
    button_macs: tuple[str, ...] = ("aa:bb:cc:dd:ee:01",)
    debounce_ms: int = 5000
    heartbeat_ms: int = 1000
    queue_capacity: int = 32
    servo_dwell_ms: int = 5000
    reconnect_ms: int = 1000
    control_port: int = 7011


class EdgeChannel(Protocol):
    up: bool

    def connect(self) -> bool: ...
    def send(self, message: dict) -> bool: ...
    def close(self) -> None: ...


class EdgeCore:
    """State machine for one edge process; owns the peripheral log.

    The channel implementation reports in via on_channel_up/on_channel_down/
    on_server_message; everything runs on the owning event loop.
    """

    def __init__(self, config: EdgeConfig, rack, clock, scheduler):
        self.config = config
        self.rack = rack
        self.clock = clock
        self.scheduler = scheduler
        self.channel: EdgeChannel | None = None

        self.plog = PeripheralLog()
        self.debouncer = PressDebouncer(config.button_macs, config.debounce_ms)
        self.pending_uploads: OrderedDict[int, dict] = OrderedDict()
        self.entry_ids: dict[int, int] = {}  # press_id -> server entry_id
        self.known_entries: set[int] = set()
        self.actuated: set[int] = set()

        self.hanged = False
        self.link_blocked = False
        self.auth_failed = False
        self.authed = False
        self._frozen_inbox: list[dict] = []
        self._seq_out = 0
        self._seq_in = protocol.SeqTracker()

        self.counters = {
            "uploads_dropped": 0,
            "duplicate_actuate": 0,
            "unknown_actuate": 0,
            "heartbeats_sent": 0,
        }

    # -- lifecycle ------------------------------------------------------------

    def attach_channel(self, channel: EdgeChannel) -> None:
        self.channel = channel

    def start(self) -> None:
        self._try_connect()
        self.scheduler.call_later(self.config.heartbeat_ms, self._heartbeat_tick)

    def _try_connect(self) -> None:
        if self.hanged or self.link_blocked or self.auth_failed:
            return
        if self.channel is None or self.channel.up:
            return
        if not self.channel.connect():
            self.scheduler.call_later(self.config.reconnect_ms, self._try_connect)

    def hang(self) -> None:
        """Freeze the edge process: no probes, no heartbeats, link left open."""
        self.hanged = True

    def unhang(self) -> None:
        """Resume, first working through whatever piled up in the socket.

        A frozen process never read its connection; the bytes waited in the
        kernel buffer. Replaying the held frames in order preserves that.
        """
        self.hanged = False
        held, self._frozen_inbox = self._frozen_inbox, []
        for message in held:
            self.on_server_message(message)
        self._try_connect()

    def block_link(self) -> None:
        """Scenario-level link kill: drop the channel and stop reconnecting."""
        self.link_blocked = True
        if self.channel is not None and self.channel.up:
            self.channel.close()

    def unblock_link(self) -> None:
        self.link_blocked = False
        self._try_connect()

    # -- press pipeline ---------------------------------------------------------

    def on_probe(self, probe: ButtonProbe) -> None:
        if self.hanged:
            return
        event = self.debouncer.feed(probe)
        if event is not None:
            self.run_press_pipeline(event)

    def run_press_pipeline(self, event: ButtonEvent) -> None:
        """Buzzer, then camera, then upload; degrade on camera failure."""
        now = self.clock.now_ms()
        self.plog.append(now, "buzzer", "ring")
        camera_fault = False
        image_b64 = None
        try:
            image = self.rack.capture(event.press_id)
            self.plog.append(now, "camera", "capture")
            image_b64 = base64.b64encode(image).decode("ascii")
        except CaptureFailure:
            camera_fault = True
            self.plog.append(now, "camera", "capture-failed")
            log.warning("camera capture failed for press %d", event.press_id)
        body = {
            "type": "entry_upload",
            "press_id": event.press_id,
            "timestamp": event.pressed_at,
            "camera_fault": camera_fault,
        }
        if image_b64 is not None:
            body["image_b64"] = image_b64
        self._queue_upload(event.press_id, body)

    def _queue_upload(self, press_id: int, body: dict) -> None:
        if len(self.pending_uploads) >= self.config.queue_capacity:
            dropped_id, _ = self.pending_uploads.popitem(last=False)
            self.counters["uploads_dropped"] += 1
            log.warning("upload queue full; dropped oldest queued press %d", dropped_id)
        self.pending_uploads[press_id] = body
        if self.authed:
            self._send(dict(body))

    # -- server channel ---------------------------------------------------------

    def _send(self, message: dict) -> bool:
        if self.channel is None or not self.channel.up:
            return False
        self._seq_out += 1
        message["seq"] = self._seq_out
        return self.channel.send(message)

    def on_channel_up(self) -> None:
        self._seq_out = 0
        self._seq_in = protocol.SeqTracker()
        self.authed = False
        self._send({"type": "hello", "role": "edge", "token": self.config.token})

    def on_channel_down(self) -> None:
        self.authed = False
        self._frozen_inbox.clear()
        if not (self.hanged or self.link_blocked or self.auth_failed):
            self.scheduler.call_later(self.config.reconnect_ms, self._try_connect)

    def on_server_message(self, message: dict) -> None:
        if self.hanged:
            self._frozen_inbox.append(message)
            return
        try:
            self._seq_in.accept(message["seq"])
        except protocol.BadSequence as exc:
            log.warning("server stream sequence error: %s", exc)
            if self.channel is not None:
                self.channel.close()
            return
        mtype = message["type"]
        if mtype == "hello_ack":
            self.authed = True
            for body in list(self.pending_uploads.values()):
                self._send(dict(body))
        elif mtype == "entry_ack":
            press_id, entry_id = message["press_id"], message["entry_id"]
            self.entry_ids[press_id] = entry_id
            self.known_entries.add(entry_id)
            self.pending_uploads.pop(press_id, None)
        elif mtype == "actuate":
            self.apply_decision(message["entry_id"], message["verdict"])
        elif mtype == "error":
            log.warning("server error: %s %s", message.get("code"), message.get("text"))
            if message.get("code") == "auth-failure":
                self.auth_failed = True
        else:
            log.warning("unexpected server message type %r", mtype)

    # -- actuation ---------------------------------------------------------------

    def apply_decision(self, entry_id: int, verdict: str) -> None:
        """Open the door on grant; denied leaves the peripherals untouched.

        At most one actuation per entry, no matter how many times the
        verdict is delivered.
        """
        now = self.clock.now_ms()
        if entry_id not in self.known_entries:
            self.counters["unknown_actuate"] += 1
            log.warning("actuate for unknown entry %d ignored", entry_id)
            return
        if entry_id in self.actuated:
            self.counters["duplicate_actuate"] += 1
            return
        self.actuated.add(entry_id)
        if verdict == "granted":
            self.plog.append(now, "servo", "open")
            self.scheduler.call_later(self.config.servo_dwell_ms, self._servo_close)
        else:
            self.plog.append(now, "edge", "decision-denied")

    def _servo_close(self) -> None:
        self.plog.append(self.clock.now_ms(), "servo", "close")

    # -- heartbeats ----------------------------------------------------------------

    def _component_status(self, component: str) -> str:
        if component == "edge":
            return "ok"
        return "ok" if self.rack.alive(component) else "failed"

    def _heartbeat_tick(self) -> None:
        self.scheduler.call_later(self.config.heartbeat_ms, self._heartbeat_tick)
        if self.hanged:
            return
        self.emit_heartbeats()

    def emit_heartbeats(self) -> None:
        """One self-status heartbeat per component {edge, camera, buzzer, servo}."""
        if not self.authed:
            return
        for component in protocol.HEARTBEAT_COMPONENTS:
            status = self._component_status(component)
            body = {"type": "heartbeat", "component": component, "status": status}
            if status == "failed":
                body["detail"] = f"{component} self-check failed"
            if self._send(body):
                self.counters["heartbeats_sent"] += 1
