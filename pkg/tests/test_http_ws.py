"""HTTP image/health endpoints and the WebSocket owner bridge.

The bridge's RFC 6455 framing is hand-rolled, so the client side here is
the independently developed `websockets` package: if the two disagree
about masking, fragmentation, or close handshakes, these tests stall or
explode rather than quietly passing.
"""

import json
import threading
import urllib.error
import urllib.request

import pytest
from PIL import Image
from websockets.sync.client import connect as ws_connect
from websockets.exceptions import ConnectionClosed

from dashbell.clock import ScriptedClock
from dashbell.devices import parse_pgm, render_image
from dashbell.faults import FaultMonitor
from dashbell.httpserve import HttpFrontend
from dashbell.server import ServerCore
from dashbell.store import Store
from dashbell.wsbridge import WsBridge

from conftest import TOKEN

import io


class LiveStack:
    def __init__(self, tmp_path):
        self.clock = ScriptedClock(0)
        self.lock = threading.Lock()
        self.store = Store(str(tmp_path / "data"), fsync=False)
        self.monitor = FaultMonitor(heartbeat_interval_ms=1000)
        self.core = ServerCore(self.store, self.monitor, self.clock, TOKEN)
        self.http = HttpFrontend(self.store, self._health, host="127.0.0.1", port=0)
        self.http.start()
        self.bridge = WsBridge(self.core, self.lock, host="127.0.0.1", port=0)
        self.bridge.start()

    def _health(self):
        with self.lock:
            return self.core.health()

    def url(self, path):
        return f"http://127.0.0.1:{self.http.port}{path}"

    def ws_url(self):
        return f"ws://127.0.0.1:{self.bridge.port}/"

    def stop(self):
        self.bridge.stop()
        self.http.stop()
        self.store.close()


class DirectEdge:
    """An edge connection attached straight to the core, lock held per call."""

    def __init__(self, stack, conn_id=901):
        self.stack = stack
        self.conn_id = conn_id
        self.received = []
        self._seq = 0
        with stack.lock:
            stack.core.on_connect(conn_id, "edge", self.received.append, lambda: None)
        self.send({"type": "hello", "role": "edge", "token": TOKEN})

    def send(self, body):
        self._seq += 1
        with self.stack.lock:
            self.stack.core.on_message(self.conn_id, {**body, "seq": self._seq})


@pytest.fixture
def stack(tmp_path):
    s = LiveStack(tmp_path)
    yield s
    s.stop()


def fetch(url):
    with urllib.request.urlopen(url, timeout=5) as resp:
        return resp.status, resp.headers.get("Content-Type"), resp.read()


# --- HTTP ---------------------------------------------------------------------

def test_pgm_endpoint_returns_the_stored_bytes_verbatim(stack):
    pgm = render_image(press_id=1, seed=7)
    stack.store.create_entry(press_id=1, received_at=0, pressed_at=0,
                             camera_fault=False, image=pgm)
    status, ctype, body = fetch(stack.url("/images/1.pgm"))
    assert status == 200
    assert ctype == "image/x-portable-graymap"
    assert body == pgm


def test_png_alias_preserves_every_pixel(stack):
    pgm = render_image(press_id=3, seed=7)
    stack.store.create_entry(press_id=3, received_at=0, pressed_at=0,
                             camera_fault=False, image=pgm)
    status, ctype, body = fetch(stack.url("/images/1.png"))
    assert status == 200 and ctype == "image/png"
    img = Image.open(io.BytesIO(body))
    width, height, pixels = parse_pgm(pgm)
    assert img.mode == "L" and img.size == (width, height)
    assert img.tobytes() == pixels


def test_missing_image_is_a_json_404(stack):
    with pytest.raises(urllib.error.HTTPError) as err:
        fetch(stack.url("/images/9.pgm"))
    assert err.value.code == 404
    assert json.loads(err.value.read())["error"] == "no image for entry 9"


@pytest.mark.parametrize("path", ["/images/x.png", "/images/1.gif", "/", "/entries"])
def test_unroutable_paths_are_404(stack, path):
    with pytest.raises(urllib.error.HTTPError) as err:
        fetch(stack.url(path))
    assert err.value.code == 404


def test_query_strings_are_ignored_for_routing(stack):
    pgm = render_image(press_id=1, seed=7)
    stack.store.create_entry(press_id=1, received_at=0, pressed_at=0,
                             camera_fault=False, image=pgm)
    status, _, body = fetch(stack.url("/images/1.pgm?cache=no"))
    assert status == 200 and body == pgm


def test_healthz_reports_component_statuses(stack):
    status, ctype, body = fetch(stack.url("/healthz"))
    assert status == 200 and ctype == "application/json"
    health = json.loads(body)
    names = {s["component"] for s in health["statuses"]}
    assert {"edge", "camera", "buzzer", "servo", "edge_channel"} <= names
    assert health["diagnosis"] == []


# --- WebSocket bridge -------------------------------------------------------------

def ws_recv_json(ws, timeout=5):
    return json.loads(ws.recv(timeout=timeout))


def test_full_hello_frame_authenticates(stack):
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(json.dumps({"type": "hello", "seq": 1, "role": "owner", "token": TOKEN}))
        ack = ws_recv_json(ws)
        assert ack["type"] == "hello_ack" and ack["role"] == "owner"
        assert ack["settings"]["service_enabled"] is True


def test_bare_token_first_frame_is_expanded_into_a_hello(stack):
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ack = ws_recv_json(ws)
        assert ack["type"] == "hello_ack" and ack["role"] == "bridge"


def test_wrong_token_gets_error_frame_then_close(stack):
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send("d" * 64)
        err = ws_recv_json(ws)
        assert err["type"] == "error" and err["code"] == "auth-failure"
        with pytest.raises(ConnectionClosed):
            ws.recv(timeout=5)


def test_garbage_frame_after_auth_is_a_breach(stack):
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ws_recv_json(ws)
        ws.send("{this is not json")
        err = ws_recv_json(ws)
        assert err["type"] == "error"
        with pytest.raises(ConnectionClosed):
            ws.recv(timeout=5)


def test_upload_push_arrives_as_one_json_text_frame(stack):
    edge = DirectEdge(stack)
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ws_recv_json(ws)
        edge.send({"type": "entry_upload", "press_id": 1, "timestamp": 100,
                   "camera_fault": True})
        note = ws_recv_json(ws)
        assert note["type"] == "notify" and note["replay"] is False
        assert note["entry"]["entry_id"] == 1
        assert note["entry"]["camera_fault"] is True


def test_decision_round_trip_over_the_bridge(stack):
    edge = DirectEdge(stack)
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ws_recv_json(ws)
        edge.send({"type": "entry_upload", "press_id": 1, "timestamp": 100,
                   "camera_fault": True})
        ws_recv_json(ws)  # the notify
        ws.send(json.dumps({"type": "decision", "seq": 2, "entry_id": 1,
                            "verdict": "granted"}))
        ack = ws_recv_json(ws)
        assert ack["type"] == "decision_ack" and ack["verdict"] == "granted"
    with stack.lock:
        assert stack.store.entries[1].access_granted == "yes"
    actuates = [m for m in edge.received if m["type"] == "actuate"]
    assert [(m["entry_id"], m["verdict"]) for m in actuates] == [(1, "granted")]


def test_connecting_owner_replays_pending_entries(stack):
    edge = DirectEdge(stack)
    edge.send({"type": "entry_upload", "press_id": 1, "timestamp": 100,
               "camera_fault": True})
    edge.send({"type": "entry_upload", "press_id": 2, "timestamp": 9000,
               "camera_fault": True})
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ws_recv_json(ws)
        ws.send(json.dumps({"type": "decision", "seq": 2, "entry_id": 1,
                            "verdict": "denied"}))
        replays = [ws_recv_json(ws) for _ in range(2)]
        assert [m["type"] for m in replays] == ["notify", "notify"]
        assert all(m["replay"] is True for m in replays)

    # A second console connecting later sees only what is still pending.
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ws_recv_json(ws)
        note = ws_recv_json(ws)
        assert note["entry"]["entry_id"] == 2 and note["replay"] is True


def test_history_request_over_the_bridge(stack):
    edge = DirectEdge(stack)
    edge.send({"type": "entry_upload", "press_id": 1, "timestamp": 100,
               "camera_fault": True})
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ws_recv_json(ws)
        ws_recv_json(ws)  # replayed notify
        ws.send(json.dumps({"type": "history_request", "seq": 2, "from_ms": 0,
                            "to_ms": 10_000, "limit": 10}))
        resp = ws_recv_json(ws)
        assert resp["type"] == "history_response"
        assert [e["entry_id"] for e in resp["entries"]] == [1]


def test_library_level_ping_pong_round_trip(stack):
    with ws_connect(stack.ws_url(), open_timeout=5) as ws:
        ws.send(TOKEN)
        ws_recv_json(ws)
        waiter = ws.ping()
        assert waiter.wait(5)
