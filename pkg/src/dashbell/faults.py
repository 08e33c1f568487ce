"""Per-component liveness tracking and fault diagnosis.

Two kinds of components are watched:

* heartbeat-tracked (edge, camera, buzzer, servo, store): liveness decays
  with silence. With heartbeat interval I, a component is ok while its last
  report is at most 2I old, suspected up to 4I, failed beyond that; a
  self-reported failure beats the timeout and marks it failed immediately.
* event-driven (edge_channel, owner_channel): liveness follows connect and
  disconnect events; silence on an idle TCP link is not a fault.

Diagnosis collapses cascades to the root cause: while the edge channel is
down, no new information about the devices behind it can arrive, so their
staleness is evaluated as of the moment the link was lost and they are
reported unreachable rather than failed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

OK = "ok"
SUSPECTED = "suspected"
FAILED = "failed"
UNREACHABLE = "unreachable"

HEARTBEAT_KIND = "heartbeat"
EVENT_KIND = "event"

EDGE_PERIPHERALS = ("edge", "camera", "buzzer", "servo")
KNOWN_COMPONENTS = EDGE_PERIPHERALS + ("store", "edge_channel", "owner_channel")


@dataclass
class ComponentStatus:
    component: str
    state: str
    last_seen: int
    detail: str = ""

    def to_wire(self) -> dict[str, Any]:
        return {
            "component": self.component,
            "state": self.state,
            "last_seen": self.last_seen,
            "detail": self.detail,
        }


@dataclass
class HealthReport:
    generated_at: int
    statuses: list[ComponentStatus]
    diagnosis: list[dict[str, Any]]  # failed components, most recent first

    def to_wire(self) -> dict[str, Any]:
        return {
            "generated_at": self.generated_at,
            "statuses": [s.to_wire() for s in self.statuses],
            "diagnosis": self.diagnosis,
        }


@dataclass
class _Tracked:
    kind: str
    last_seen: int
    detail: str = ""
    self_failed: bool = False
    event_state: str = OK  # event-driven components only
    reported_state: str = OK  # last state surfaced through a transition
    failed_at: int | None = None


class FaultMonitor:
    """Owned by the server process; observe() calls are serialized by it.

    on_failure fires once per ok/suspected -> failed transition and is how
    fault_report pushes reach owner channels.
    """

    def __init__(self, heartbeat_interval_ms: int = 1000,
                 suspect_factor: int = 2, fail_factor: int = 4,
                 on_failure: Callable[[str, str, int], None] | None = None):
        if heartbeat_interval_ms <= 0:
            raise ValueError("heartbeat interval must be > 0")
        self.interval_ms = heartbeat_interval_ms
        self.suspect_ms = suspect_factor * heartbeat_interval_ms
        self.fail_ms = fail_factor * heartbeat_interval_ms
        self.on_failure = on_failure
        self._components: dict[str, _Tracked] = {}
        self.unknown_component_count = 0
        self.missed_push_count = 0

    # -- observation ----------------------------------------------------------

    def register(self, component: str, now: int, kind: str = HEARTBEAT_KIND) -> None:
        if component not in self._components:
            self._components[component] = _Tracked(kind=kind, last_seen=now)

    def observe_heartbeat(self, component: str, status: str, detail: str, now: int) -> None:
        """Apply one heartbeat; a failed self-status beats any timeout."""
        tracked = self._components.get(component)
        if tracked is None:
            if component not in KNOWN_COMPONENTS:
                self.unknown_component_count += 1
                return
            tracked = _Tracked(kind=HEARTBEAT_KIND, last_seen=now)
            self._components[component] = tracked
        tracked.last_seen = now
        tracked.self_failed = status == "failed"
        tracked.detail = detail if status == "failed" else ""
        self._evaluate(component, now)

    def observe_channel(self, component: str, state: str, detail: str, now: int) -> None:
        """Connect/disconnect events take effect immediately."""
        tracked = self._components.get(component)
        if tracked is None:
            tracked = _Tracked(kind=EVENT_KIND, last_seen=now)
            self._components[component] = tracked
        tracked.last_seen = now
        tracked.event_state = state
        tracked.detail = detail
        self._evaluate(component, now)
        if component == "edge_channel":
            # Peripheral staleness freezes with the link; on reconnect each
            # device gets a fresh reporting window instead of an instant
            # timeout for the silence the dead link imposed.
            for peripheral in EDGE_PERIPHERALS:
                peer = self._components.get(peripheral)
                if peer is None:
                    continue
                if state == OK:
                    peer.last_seen = max(peer.last_seen, now)
                self._evaluate(peripheral, now)

    def tick(self, now: int) -> None:
        """Re-evaluate silently decaying components; fires transitions."""
        for component in list(self._components):
            self._evaluate(component, now)

    # -- state evaluation -----------------------------------------------------

    def _edge_link_down_since(self) -> int | None:
        """Instant the edge link stopped carrying reports, if it has.

        A never-connected link counts as down from boot: silence before the
        first connect is expected, not evidence of device failure.
        """
        link = self._components.get("edge_channel")
        if link is not None and link.event_state != OK:
            return link.last_seen
        return None

    def _explained_by_root(self, component: str) -> str | None:
        """Name the upstream root cause masking this component, if any.

        Only a dead edge channel masks: no information can flow over it, so
        peripheral staleness behind it is not an independent fault. A hung
        edge process does NOT mask its devices; their shared silence is a
        real correlated failure and every one of them is reported.
        """
        if component in EDGE_PERIPHERALS and self._edge_link_down_since() is not None:
            return "edge_channel"
        return None

    def _state_of(self, component: str, tracked: _Tracked, now: int) -> str:
        if tracked.kind == EVENT_KIND:
            return tracked.event_state
        if tracked.self_failed:
            return FAILED
        effective_now = now
        if component in EDGE_PERIPHERALS:
            down_since = self._edge_link_down_since()
            if down_since is not None:
                # No information flows over a dead link; staleness is
                # judged as of the moment the link was lost.
                effective_now = min(now, down_since)
        age = effective_now - tracked.last_seen
        if age <= self.suspect_ms:
            return OK
        if age <= self.fail_ms:
            return SUSPECTED
        return FAILED

    def _evaluate(self, component: str, now: int) -> None:
        tracked = self._components[component]
        state = self._state_of(component, tracked, now)
        if state == tracked.reported_state:
            return
        previous = tracked.reported_state
        tracked.reported_state = state
        if state == FAILED:
            tracked.failed_at = now
            if self.on_failure is not None and self._explained_by_root(component) is None:
                self.on_failure(component, tracked.detail or f"no report for over {self.fail_ms} ms", now)
        elif previous == FAILED:
            tracked.failed_at = None

    # -- diagnosis ------------------------------------------------------------

    def _failed_since(self, tracked: _Tracked) -> int:
        """When the component crossed into failed, by threshold arithmetic."""
        if tracked.failed_at is not None:
            return tracked.failed_at
        if tracked.kind == EVENT_KIND or tracked.self_failed:
            return tracked.last_seen
        return tracked.last_seen + self.fail_ms

    def diagnose(self, now: int) -> HealthReport:
        """Health snapshot with root-cause collapse.

        Read-only: states are computed from the current observations without
        mutating tracker state, so it is safe to call concurrently with
        observation. While the edge channel is down, devices behind it are
        shown unreachable-via-edge and kept out of the diagnosis list; the
        channel itself is the reported fault.
        """
        statuses: list[ComponentStatus] = []
        failed: list[tuple[int, str, str]] = []
        for component in sorted(self._components):
            tracked = self._components[component]
            state = self._state_of(component, tracked, now)
            detail = tracked.detail
            root = self._explained_by_root(component)
            if root is not None:
                state = UNREACHABLE
                detail = "unreachable-via-edge"
            statuses.append(ComponentStatus(component, state, tracked.last_seen, detail))
            if state == FAILED:
                failed.append((self._failed_since(tracked), component, detail))
        failed.sort(key=lambda item: (-item[0], item[1]))
        diagnosis = [
            {"component": component, "failed_at": failed_at,
             "cause": detail or "missed heartbeats beyond the failure threshold"}
            for failed_at, component, detail in failed
        ]
        return HealthReport(generated_at=now, statuses=statuses, diagnosis=diagnosis)
