"""Deterministic scenario runs: server, edge, devices, and a scripted owner
in one scripted-clock process.

The runner builds the whole deployment, schedules the scenario's events,
drives the scheduler to the horizon, and renders a line-oriented report.
The report is a pure function of (scenario, seed): it contains virtual
timestamps and counters only, never wall-clock values, transport names, or
filesystem paths, so the in-process and socket bindings must produce the
same bytes for the same scenario.

The owner in these runs is a probe: it connects on the owner port, records
everything pushed at it, applies the scenario's decide directives (looking
entry ordinals up through history queries, the same way a real client
would), and feeds the scenario's settings changes through settings_update.
"""

from __future__ import annotations

from collections import deque
from typing import Any

from . import protocol, transport
from .clock import Scheduler, ScriptedClock
from .devices import DeviceRack, ImpairmentPolicy, Scenario
from .edge import ButtonProbe, EdgeConfig, EdgeCore
from .faults import FaultMonitor
from .server import ServerCore
from .store import OwnerSettings, Store, replay

TRANSPORTS = ("in-process", "sockets")
DECIDE_RETRY_MS = 500
SIM_TOKEN = "a" * 64


class OwnerProbe:
    """Scripted owner client: records pushes, executes decide directives."""

    def __init__(self, clock, scheduler):
        self.clock = clock
        self.scheduler = scheduler
        self.channel = None
        self.authed = False
        self.settings: dict[str, Any] | None = None
        self.events: list[str] = []
        self.pending: deque[dict[str, Any]] = deque()
        self.history_requests = 0
        self._seq_out = 0
        self._seq_in = protocol.SeqTracker()
        self._poll_scheduled = False

    def attach_channel(self, channel) -> None:
        self.channel = channel

    def start(self) -> None:
        self.channel.connect()

    # -- channel callbacks ------------------------------------------------------

    def on_channel_up(self) -> None:
        self._seq_out = 0
        self._seq_in = protocol.SeqTracker()
        self.authed = False
        self._send({"type": "hello", "role": "owner", "token": SIM_TOKEN})

    def on_channel_down(self) -> None:
        self.authed = False

    def on_server_message(self, message: dict[str, Any]) -> None:
        self._seq_in.accept(message["seq"])
        now = self.clock.now_ms()
        mtype = message["type"]
        if mtype == "hello_ack":
            self.authed = True
            self.settings = message["settings"]
            if self.pending:
                self._poll_history()
        elif mtype == "notify":
            entry = message["entry"]
            self.events.append(
                f"owner_event at={now} kind=notify entry={entry['entry_id']}"
                f" replay={int(message['replay'])}")
        elif mtype == "decision_ack":
            self.events.append(
                f"owner_event at={now} kind=decision_ack entry={message['entry_id']}"
                f" verdict={message['verdict']}")
        elif mtype == "settings_ack":
            self.settings = message["settings"]
            self.events.append(
                f"owner_event at={now} kind=settings_ack {_settings_tokens(message['settings'])}")
        elif mtype == "fault_report":
            self.events.append(
                f"owner_event at={now} kind=fault component={message['component']}")
        elif mtype == "history_response":
            self._resolve(message["entries"])
        elif mtype == "error":
            self.events.append(f"owner_event at={now} kind=error code={message['code']}")

    # -- scenario directives --------------------------------------------------------

    def request_decision(self, ordinal: int, verdict: str) -> None:
        self.pending.append({"ordinal": ordinal, "verdict": verdict})
        if self.authed:
            self._poll_history()

    def push_settings(self, changes: dict[str, Any]) -> None:
        base = dict(self.settings) if self.settings else OwnerSettings().to_wire()
        base.update(changes)
        base["alert_channels"] = sorted(set(base["alert_channels"]))
        self._send({"type": "settings_update", "settings": base})

    # -- decision resolution -----------------------------------------------------------

    def _poll_history(self) -> None:
        if not self.pending or not self.authed:
            return
        self.history_requests += 1
        self._send({
            "type": "history_request",
            "from_ms": 0,
            "to_ms": self.clock.now_ms(),
            "limit": 100000,
        })

    def _resolve(self, entries_newest_first: list[dict[str, Any]]) -> None:
        if not self.pending:
            return
        by_creation = sorted(entries_newest_first, key=lambda e: e["entry_id"])
        head = self.pending[0]
        if head["ordinal"] > len(by_creation):
            self._schedule_retry()
            return
        target = by_creation[head["ordinal"] - 1]
        self.pending.popleft()
        self._send({
            "type": "decision",
            "entry_id": target["entry_id"],
            "verdict": head["verdict"],
        })
        if self.pending:
            self._poll_history()

    def _schedule_retry(self) -> None:
        if self._poll_scheduled:
            return
        self._poll_scheduled = True

        def retry() -> None:
            self._poll_scheduled = False
            self._poll_history()

        self.scheduler.call_later(DECIDE_RETRY_MS, retry)

    # -- plumbing -------------------------------------------------------------------------

    def _send(self, body: dict[str, Any]) -> None:
        if self.channel is None or not self.channel.up:
            return
        self._seq_out += 1
        body["seq"] = self._seq_out
        self.channel.send(body)


def _settings_tokens(settings: dict[str, Any]) -> str:
    channels = ",".join(sorted(settings["alert_channels"])) or "-"
    return (f"service={int(settings['service_enabled'])}"
            f" dnd={int(settings['do_not_disturb'])} channels={channels}")


class ScenarioRunner:
    """One deployment, one scenario, one transport binding."""

    def __init__(self, scenario: Scenario, data_dir: str, mode: str = "in-process",
                 heartbeat_ms: int = 1000, drain_ms: int = 8000):
        if mode not in TRANSPORTS:
            raise ValueError(f"unknown transport mode {mode!r}")
        self.scenario = scenario
        self.mode = mode
        self.horizon = scenario.horizon(drain_ms)

        self.clock = ScriptedClock(0)
        self.scheduler = Scheduler(self.clock)
        self.store = Store(data_dir)
        self.monitor = FaultMonitor(heartbeat_interval_ms=heartbeat_ms)
        self.core = ServerCore(self.store, self.monitor, self.clock, SIM_TOKEN)
        self.rack = DeviceRack(seed=scenario.seed)
        # The simulated home has two provisioned buttons; scenarios name the
        # second one explicitly when they want cross-button interleavings.
        self.edge_config = EdgeConfig(
            token=SIM_TOKEN, heartbeat_ms=heartbeat_ms,
            button_macs=("aa:bb:cc:dd:ee:01", "aa:bb:cc:dd:ee:02"))
        self.edge = EdgeCore(self.edge_config, self.rack, self.clock, self.scheduler)
        self.probe = OwnerProbe(self.clock, self.scheduler)
        self.policy = ImpairmentPolicy(seed_key=f"{scenario.seed}:edge-link")

        if mode == "in-process":
            self.net = transport.InProcNetwork(self.core, self.scheduler)
        else:
            self.net = transport.SocketHarness(self.core, self.scheduler)
            self.net.listen()
        self.edge.attach_channel(self.net.open_channel("edge", self.edge, self.policy))
        self.probe.attach_channel(self.net.open_channel("owner", self.probe))

    # -- event wiring ----------------------------------------------------------------

    def _schedule_events(self) -> None:
        for event in self.scenario.events:
            self.scheduler.call_at(event.at, self._apply_event, event)

    def _apply_event(self, event) -> None:
        verb, args = event.verb, event.args
        if verb == "press":
            mac = args[0] or self.edge_config.button_macs[0]
            for at in self.rack.button_press(mac, event.at):
                self.scheduler.call_at(at, self.edge.on_probe, ButtonProbe(mac, at))
        elif verb == "kill":
            self._set_killed(args[0], True)
        elif verb == "revive":
            self._set_killed(args[0], False)
        elif verb == "net":
            param, value = args
            if param == "drop_rate":
                self.policy.set_policy(drop_rate=value)
            else:
                self.policy.set_policy(delay_ms=value)
        elif verb == "settings":
            self.probe.push_settings(args[0])
        elif verb == "decide":
            self.probe.request_decision(*args)

    def _set_killed(self, component: str, killed: bool) -> None:
        if component == "edge":
            self.edge.hang() if killed else self.edge.unhang()
        elif component == "edge_channel":
            self.edge.block_link() if killed else self.edge.unblock_link()
        else:
            self.rack.kill(component) if killed else self.rack.revive(component)

    def _tick_loop(self) -> None:
        self.core.on_tick()
        if self.clock.now_ms() < self.horizon:
            self.scheduler.call_later(self.monitor.interval_ms, self._tick_loop)

    # -- running ----------------------------------------------------------------------

    def run(self) -> str:
        self._schedule_events()
        self.scheduler.call_later(self.monitor.interval_ms, self._tick_loop)
        self.edge.start()
        self.probe.start()
        try:
            self.scheduler.run_until(self.horizon, self.net.idle_hook)
        finally:
            if self.mode == "sockets":
                self.net.close()
        report = self.render_report()
        self.store.close()
        return report

    # -- report ------------------------------------------------------------------------

    def _check_invariants(self) -> list[str]:
        """Re-derive the safety claims from the persisted log, not from the
        in-memory state that produced it."""
        lines = []
        violations = []

        with open(self.store._path("entries.log"), "rb") as fh:
            disk = replay(fh.read())
        tri_state_ok = disk.bad_offset is None and not disk.warnings
        for rec in disk.entries.values():
            if rec.access_granted not in (None, "yes", "no"):
                tri_state_ok = False
        lines.append(f"invariant name=tri_state status={'ok' if tri_state_ok else 'violated'}")
        if not tri_state_ok:
            violations.append("tri_state")

        granted = sum(1 for rec in disk.entries.values() if rec.access_granted == "yes")
        opens = self.edge.plog.count("servo", "open")
        closes = self.edge.plog.count("servo", "close")
        safety_ok = opens <= granted and closes <= opens
        lines.append(
            f"invariant name=actuation_safety status={'ok' if safety_ok else 'violated'}")
        if not safety_ok:
            violations.append("actuation_safety")

        if opens == granted:
            parity = "ok"
        else:
            parity = f"deficit={granted - opens}"
        lines.append(f"invariant name=servo_grant_parity status={parity}")

        self._violations = violations
        return lines

    def render_report(self) -> str:
        lines = [
            "report_version 1",
            f"scenario {self.scenario.name}",
            f"seed {self.scenario.seed}",
            f"horizon_ms {self.horizon}",
        ]
        entries = [self.store.entries[eid] for eid in sorted(self.store.entries)]
        granted = sum(1 for r in entries if r.access_granted == "yes")
        denied = sum(1 for r in entries if r.access_granted == "no")
        pending = sum(1 for r in entries if r.access_granted is None)
        lines.append(
            f"entries total={len(entries)} granted={granted} denied={denied} pending={pending}")
        for rec in entries:
            access = rec.access_granted if rec.access_granted is not None else "null"
            decided_at = rec.decided_at if rec.decided_at is not None else "-"
            image = rec.image_url if rec.image_url is not None else "-"
            lines.append(
                f"entry id={rec.entry_id} press={rec.press_id} pressed_at={rec.pressed_at}"
                f" received_at={rec.received_at} camera_fault={int(rec.camera_fault)}"
                f" access={access} decided_at={decided_at} image={image}")

        for action in self.edge.plog.entries():
            lines.append(
                f"peripheral at={action.at} device={action.peripheral} action={action.action}")
        lines.extend(self.probe.events)

        for channel in ("email", "text"):
            for rec in self.store.read_outbox(channel):
                lines.append(
                    f"outbox channel={channel} entry={rec['entry_id']} at={rec['written_at']}")

        c = self.core.counters
        unresolved = len(self.probe.pending)
        lines.append(
            f"decisions applied={c['decisions_applied']} granted={c['decisions_granted']}"
            f" denied={c['decisions_denied']} rejected={c['decisions_rejected']}"
            f" unresolved={unresolved}")
        lines.append(
            f"notify pushed={c['notify_pushed']} replayed={c['notify_replayed']}"
            f" missed={c['notify_missed']} suppressed_dnd={c['notify_suppressed_dnd']}"
            f" suppressed_disabled={c['notify_suppressed_disabled']}")
        lines.append(
            f"uploads accepted={c['uploads']} deduped={c['uploads_deduped']}"
            f" dropped_by_queue={self.edge.counters['uploads_dropped']}")
        ec = self.edge.counters
        lines.append(
            f"edge heartbeats_sent={ec['heartbeats_sent']}"
            f" duplicate_actuate={ec['duplicate_actuate']}"
            f" unknown_actuate={ec['unknown_actuate']}"
            f" unknown_probes={self.edge.debouncer.unknown_probes}")
        lines.append(
            f"server faults_reported={c['faults_reported']} errors_sent={c['errors_sent']}"
            f" history_requests={self.probe.history_requests}")
        lines.append(f"impairment dropped={self.policy.dropped}")

        health = self.monitor.diagnose(self.clock.now_ms())
        for status in health.statuses:
            lines.append(f"health component={status.component} state={status.state}")
        for item in health.diagnosis:
            lines.append(f"diagnosis component={item['component']} failed_at={item['failed_at']}")

        lines.extend(self._check_invariants())
        if self._violations:
            lines.append(f"exit status=violation invariant={self._violations[0]}")
        else:
            lines.append("exit status=ok")
        return "\n".join(lines) + "\n"

    @property
    def violations(self) -> list[str]:
        return getattr(self, "_violations", [])


def run_scenario(scenario: Scenario, data_dir: str, mode: str = "in-process",
                 heartbeat_ms: int = 1000, drain_ms: int = 8000) -> tuple[str, list[str]]:
    runner = ScenarioRunner(scenario, data_dir, mode, heartbeat_ms, drain_ms)
    report = runner.run()
    return report, runner.violations
