"""Server core behavior through its transport-facing entry points.

Every test drives a ServerCore with hand-rolled fake connections, which
keeps the full matrix reachable: auth outcomes, breach closures, the
notification fan-out, decision life cycle, and actuation replay.
"""

import base64

import pytest

from dashbell import faults, protocol
from dashbell.clock import ScriptedClock
from dashbell.faults import FaultMonitor
from dashbell.server import ServerCore
from dashbell.store import Store

from conftest import TOKEN


class FakeConn:
    def __init__(self, bench, conn_id, port_kind):
        self.bench = bench
        self.conn_id = conn_id
        self.port_kind = port_kind
        self.received = []
        self.closed = False
        self._seq = 0
        bench.core.on_connect(conn_id, port_kind, self.received.append, self._closed_by_server)

    def _closed_by_server(self):
        self.closed = True
        self.bench.core.on_disconnect(self.conn_id)

    def send(self, body):
        self._seq += 1
        self.bench.core.on_message(self.conn_id, {**body, "seq": self._seq})

    def send_raw(self, body):
        self.bench.core.on_message(self.conn_id, body)

    def hello(self, role, token=TOKEN):
        self.send({"type": "hello", "role": role, "token": token})
        return self

    def of(self, mtype):
        return [m for m in self.received if m["type"] == mtype]

    def last(self):
        return self.received[-1]


class ServerBench:
    def __init__(self, tmp_path, token=TOKEN):
        self.clock = ScriptedClock(0)
        self.store = Store(str(tmp_path / "data"), fsync=False)
        self.monitor = FaultMonitor(heartbeat_interval_ms=1000)
        self.core = ServerCore(self.store, self.monitor, self.clock, token)
        self._next_conn = 0

    def connect(self, port_kind):
        self._next_conn += 1
        return FakeConn(self, self._next_conn, port_kind)

    def edge(self):
        return self.connect("edge").hello("edge")

    def owner(self):
        return self.connect("owner").hello("owner")

    def upload(self, edge_conn, press_id, at, camera_fault=False):
        self.clock.set_now(at)
        body = {"type": "entry_upload", "press_id": press_id,
                "timestamp": max(0, at - 40), "camera_fault": camera_fault}
        if not camera_fault:
            body["image_b64"] = base64.b64encode(f"img-{press_id}".encode()).decode()
        edge_conn.send(body)
        return edge_conn.of("entry_ack")[-1]["entry_id"]


@pytest.fixture
def bench(tmp_path):
    b = ServerBench(tmp_path)
    yield b
    b.store.close()


# --- hello and auth ----------------------------------------------------------

def test_owner_hello_ack_carries_the_settings_snapshot(bench):
    owner = bench.owner()
    ack = owner.of("hello_ack")[0]
    assert ack["role"] == "owner"
    assert ack["settings"] == {"service_enabled": True, "do_not_disturb": False,
                               "alert_channels": ["ringer"]}
    assert ack["seq"] == 1


def test_edge_hello_ack_has_no_settings(bench):
    edge = bench.edge()
    assert "settings" not in edge.of("hello_ack")[0]


def test_wrong_token_gets_one_error_then_close(bench):
    conn = bench.connect("owner")
    conn.hello("owner", token="f" * 64)
    assert conn.closed is True
    assert [m["type"] for m in conn.received] == ["error"]
    assert conn.received[0]["code"] == "auth-failure"


def test_role_not_admitted_on_port_is_a_breach(bench):
    conn = bench.connect("edge")
    conn.hello("owner")
    assert conn.closed is True
    assert conn.received[0]["code"] == "role-violation"


def test_bridge_port_admits_owner_and_bridge_roles(bench):
    for role in ("owner", "bridge"):
        conn = bench.connect("bridge").hello(role)
        assert conn.of("hello_ack")[0]["role"] == role
        assert conn.closed is False


def test_second_hello_is_a_breach(bench):
    owner = bench.owner()
    owner.send({"type": "hello", "role": "owner", "token": TOKEN})
    assert owner.closed is True
    assert owner.last()["code"] == "role-violation"


def test_message_before_hello_is_a_breach(bench):
    conn = bench.connect("owner")
    conn.send({"type": "history_request", "from_ms": 0, "to_ms": 10, "limit": 1})
    assert conn.closed is True


@pytest.mark.parametrize("role,mtype,body", [
    ("owner", "entry_upload", {"press_id": 1, "timestamp": 0, "camera_fault": True}),
    ("owner", "heartbeat", {"component": "camera", "status": "ok"}),
    ("edge", "decision", {"entry_id": 1, "verdict": "granted"}),
    ("edge", "settings_update", {"settings": {"service_enabled": True,
                                              "do_not_disturb": False,
                                              "alert_channels": ["ringer"]}}),
    ("edge", "history_request", {"from_ms": 0, "to_ms": 10, "limit": 1}),
])
def test_messages_outside_the_role_matrix_close_the_connection(bench, role, mtype, body):
    conn = bench.edge() if role == "edge" else bench.owner()
    conn.send({"type": mtype, **body})
    assert conn.closed is True
    assert conn.last()["code"] == "role-violation"


def test_malformed_message_closes_the_connection(bench):
    owner = bench.owner()
    owner.send({"type": "decision", "entry_id": 1})  # verdict missing
    assert owner.closed is True
    assert owner.last()["code"] == "malformed-payload"


def test_unknown_type_closes_the_connection(bench):
    owner = bench.owner()
    owner.send({"type": "telepathy"})
    assert owner.closed is True
    assert owner.last()["code"] == "unknown-message"


def test_seq_regression_closes_but_gaps_are_legal(bench):
    owner = bench.owner()
    owner.send_raw({"type": "history_request", "from_ms": 0, "to_ms": 10,
                    "limit": 1, "seq": 9})
    assert owner.closed is False
    assert len(owner.of("history_response")) == 1
    owner.send_raw({"type": "history_request", "from_ms": 0, "to_ms": 10,
                    "limit": 1, "seq": 3})
    assert owner.closed is True
    assert owner.last()["code"] == "bad-sequence"


def test_transport_decode_failure_is_a_breach(bench):
    owner = bench.owner()
    bench.core.on_protocol_error(owner.conn_id, protocol.FrameTooLarge("frame of 20000000 bytes"))
    assert owner.closed is True
    assert owner.last()["code"] == "frame-too-large"


# --- uploads --------------------------------------------------------------------

def test_upload_persists_entry_and_acks(bench):
    edge = bench.edge()
    entry_id = bench.upload(edge, press_id=5, at=2000)
    rec = bench.store.entries[entry_id]
    assert rec.access_granted is None
    assert rec.received_at == 2000 and rec.pressed_at == 1960
    assert open(bench.store.image_path(entry_id), "rb").read() == b"img-5"
    assert bench.core.counters["uploads"] == 1


def test_duplicate_press_id_is_reacked_not_restored(bench):
    edge = bench.edge()
    owner = bench.owner()
    first = bench.upload(edge, press_id=5, at=2000)
    again = bench.upload(edge, press_id=5, at=3000)
    assert first == again
    assert len(bench.store.entries) == 1
    assert bench.core.counters["uploads_deduped"] == 1
    assert len(owner.of("notify")) == 1  # dedup does not re-notify


def test_invalid_base64_image_is_a_breach(bench):
    edge = bench.edge()
    edge.send({"type": "entry_upload", "press_id": 1, "timestamp": 0,
               "camera_fault": False, "image_b64": "@@@not-base64@@@"})
    assert edge.closed is True


def test_camera_fault_upload_stores_no_image(bench):
    edge = bench.edge()
    entry_id = bench.upload(edge, press_id=1, at=1000, camera_fault=True)
    rec = bench.store.entries[entry_id]
    assert rec.camera_fault is True and rec.image_url is None


# --- notification fan-out ----------------------------------------------------------

def set_settings(bench, conn, **kw):
    settings = {"service_enabled": True, "do_not_disturb": False,
                "alert_channels": ["ringer"], **kw}
    conn.send({"type": "settings_update", "settings": settings})


def test_connected_owner_gets_a_live_push(bench):
    edge, owner = bench.edge(), bench.owner()
    entry_id = bench.upload(edge, press_id=1, at=1000)
    notes = owner.of("notify")
    assert len(notes) == 1
    assert notes[0]["replay"] is False
    assert notes[0]["entry"]["entry_id"] == entry_id
    assert notes[0]["entry"]["access_granted"] is None
    assert bench.core.counters["notify_pushed"] == 1


def test_push_reaches_every_connected_owner(bench):
    edge = bench.edge()
    owners = [bench.owner(), bench.owner(), bench.connect("bridge").hello("bridge")]
    bench.upload(edge, press_id=1, at=1000)
    assert all(len(o.of("notify")) == 1 for o in owners)
    assert bench.core.counters["notify_pushed"] == 1  # one entry, one fan-out


def test_dnd_suppresses_push_but_not_outbox(bench):
    edge, owner = bench.edge(), bench.owner()
    set_settings(bench, owner, do_not_disturb=True,
                 alert_channels=["ringer", "email", "text"])
    bench.upload(edge, press_id=1, at=1000)
    assert owner.of("notify") == []
    assert bench.core.counters["notify_suppressed_dnd"] == 1
    assert len(bench.store.read_outbox("email")) == 1
    assert len(bench.store.read_outbox("text")) == 1
    assert "entry 1" in bench.store.read_outbox("email")[0]["rendered_text"]
    assert 1 in bench.store.entries  # still lands in history


def test_disabled_service_suppresses_everything(bench):
    edge, owner = bench.edge(), bench.owner()
    set_settings(bench, owner, service_enabled=False,
                 alert_channels=["ringer", "email", "text"])
    bench.upload(edge, press_id=1, at=1000)
    assert owner.of("notify") == []
    assert bench.store.read_outbox("email") == []
    assert bench.core.counters["notify_suppressed_disabled"] == 1
    assert 1 in bench.store.entries


def test_missed_push_is_replayed_when_an_owner_connects(bench):
    edge = bench.edge()
    bench.upload(edge, press_id=1, at=1000)
    bench.upload(edge, press_id=2, at=7000)
    assert bench.core.counters["notify_missed"] == 2
    owner = bench.owner()
    owner.send({"type": "decision", "entry_id": 1, "verdict": "denied"})
    late = bench.owner()
    replays = late.of("notify")
    assert [n["entry"]["entry_id"] for n in replays] == [2]  # decided ones stay quiet
    assert all(n["replay"] is True for n in replays)
    assert bench.core.counters["notify_replayed"] >= 1


# --- decisions -----------------------------------------------------------------------

def test_granted_decision_updates_store_and_broadcasts(bench):
    edge, owner, second = bench.edge(), bench.owner(), bench.owner()
    entry_id = bench.upload(edge, press_id=1, at=1000)
    bench.clock.set_now(4000)
    owner.send({"type": "decision", "entry_id": entry_id, "verdict": "granted"})
    rec = bench.store.entries[entry_id]
    assert rec.access_granted == "yes" and rec.decided_at == 4000
    for conn in (owner, second):
        ack = conn.of("decision_ack")[0]
        assert ack["verdict"] == "granted" and ack["decided_at"] == 4000
    actuate = edge.of("actuate")[0]
    assert actuate == {"type": "actuate", "entry_id": entry_id,
                       "verdict": "granted", "seq": actuate["seq"]}
    assert bench.core.counters["decisions_granted"] == 1


def test_denied_decision_records_no(bench):
    edge, owner = bench.edge(), bench.owner()
    entry_id = bench.upload(edge, press_id=1, at=1000)
    owner.send({"type": "decision", "entry_id": entry_id, "verdict": "denied"})
    assert bench.store.entries[entry_id].access_granted == "no"
    assert edge.of("actuate")[0]["verdict"] == "denied"


def test_second_decision_is_rejected_and_the_conn_survives(bench):
    edge, owner = bench.edge(), bench.owner()
    entry_id = bench.upload(edge, press_id=1, at=1000)
    owner.send({"type": "decision", "entry_id": entry_id, "verdict": "granted"})
    owner.send({"type": "decision", "entry_id": entry_id, "verdict": "denied"})
    errors = owner.of("error")
    assert errors[0]["code"] == "already-decided" and errors[0]["entry_id"] == entry_id
    assert owner.closed is False
    assert bench.store.entries[entry_id].access_granted == "yes"
    assert bench.core.counters["decisions_rejected"] == 1
    owner.send({"type": "history_request", "from_ms": 0, "to_ms": 9000, "limit": 5})
    assert len(owner.of("history_response")) == 1  # still serving


def test_decision_for_missing_entry_is_rejected_softly(bench):
    owner = bench.owner()
    owner.send({"type": "decision", "entry_id": 41, "verdict": "granted"})
    assert owner.of("error")[0]["code"] == "no-such-entry"
    assert owner.closed is False


def test_decision_without_edge_is_actuated_at_next_edge_hello(bench):
    edge, owner = bench.edge(), bench.owner()
    a = bench.upload(edge, press_id=1, at=1000)
    b = bench.upload(edge, press_id=2, at=7000)
    c = bench.upload(edge, press_id=3, at=14000)
    edge._closed_by_server()  # edge drops before any verdict
    bench.clock.set_now(20_000)
    owner.send({"type": "decision", "entry_id": b, "verdict": "granted"})
    bench.clock.set_now(21_000)
    owner.send({"type": "decision", "entry_id": a, "verdict": "denied"})

    fresh = bench.edge()
    actuates = fresh.of("actuate")
    assert [(m["entry_id"], m["verdict"]) for m in actuates] == [
        (b, "granted"), (a, "denied")]  # decided_at order, undecided c absent
    assert c not in [m["entry_id"] for m in actuates]


def test_every_edge_session_replays_all_decided_entries(bench):
    edge, owner = bench.edge(), bench.owner()
    entry_id = bench.upload(edge, press_id=1, at=1000)
    owner.send({"type": "decision", "entry_id": entry_id, "verdict": "granted"})
    assert len(edge.of("actuate")) == 1
    edge._closed_by_server()
    again = bench.edge()
    assert len(again.of("actuate")) == 1  # the edge's actuated set dedups


# --- settings and history ---------------------------------------------------------

def test_settings_update_is_acked_broadcast_and_durable(bench, tmp_path):
    owner, second = bench.owner(), bench.owner()
    set_settings(bench, owner, do_not_disturb=True, alert_channels=["email"])
    for conn in (owner, second):
        ack = conn.of("settings_ack")[0]
        assert ack["settings"]["do_not_disturb"] is True
        assert ack["settings"]["alert_channels"] == ["email"]
    bench.store.close()
    reopened = Store(str(tmp_path / "data"), fsync=False)
    assert reopened.settings.do_not_disturb is True
    assert reopened.settings.alert_channels == ("email",)
    reopened.close()
    bench.store = reopened  # keep the fixture teardown happy


def test_history_respects_range_and_limit_newest_first(bench):
    edge, owner = bench.edge(), bench.owner()
    ids = [bench.upload(edge, press_id=i, at=i * 1000) for i in range(1, 6)]
    owner.send({"type": "history_request", "from_ms": 2000, "to_ms": 4000, "limit": 2})
    got = owner.of("history_response")[0]["entries"]
    assert [e["entry_id"] for e in got] == [ids[3], ids[2]]


# --- faults surfaced to owners ------------------------------------------------------

def test_self_reported_component_failure_is_pushed_to_owners(bench):
    edge, owner = bench.edge(), bench.owner()
    bench.clock.set_now(5000)
    edge.send({"type": "heartbeat", "component": "camera", "status": "failed",
               "detail": "lens stuck"})
    report = owner.of("fault_report")[0]
    assert report["component"] == "camera" and report["state"] == "failed"
    assert report["detail"] == "lens stuck" and report["at"] == 5000
    assert bench.core.counters["faults_reported"] == 1
    health = bench.core.health()
    assert {"component": "camera", "failed_at": 5000, "cause": "lens stuck"} \
        in health["diagnosis"]


def test_edge_disconnect_trips_the_channel_monitor(bench):
    edge = bench.edge()
    bench.clock.set_now(3000)
    edge._closed_by_server()
    statuses = {s["component"]: s["state"] for s in bench.core.health()["statuses"]}
    assert statuses["edge_channel"] == "failed"
    assert statuses["camera"] == "unreachable"


def test_storage_trouble_answers_softly_and_flags_the_store(bench, monkeypatch):
    from dashbell.store import StorageError

    edge = bench.edge()

    def broken(*args, **kwargs):
        raise StorageError("disk full")

    monkeypatch.setattr(bench.store, "create_entry", broken)
    edge.send({"type": "entry_upload", "press_id": 1, "timestamp": 0,
               "camera_fault": True})
    assert edge.of("error")[0]["code"] == "storage-error"
    assert edge.closed is False
    statuses = {s["component"]: s["state"] for s in bench.core.health()["statuses"]}
    assert statuses["store"] == "failed"

    monkeypatch.undo()
    bench.upload(edge, press_id=2, at=1000)
    statuses = {s["component"]: s["state"] for s in bench.core.health()["statuses"]}
    assert statuses["store"] == "ok"
