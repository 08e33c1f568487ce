"""Operator command line: serve, edge, simulate, inject, history, decide.

Exit codes are uniform across subcommands: 0 success, 1 usage or parse
error, 2 runtime failure (unreachable server, rejected decision, violated
invariant). Every error path prints exactly one line to stderr shaped

    dashbell: <code>: <detail>

so wrapping scripts can match on the code token without scraping prose.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import sys
import tempfile
import threading
import time

from . import protocol
from .clock import RealtimeClock, Scheduler
from .config import ENV_TOKEN, ConfigError, load_edge_config, load_server_config
from .devices import (RACK_COMPONENTS, DeviceRack, ImpairmentPolicy,
                      ScenarioError, load_scenario)
from .edge import ButtonProbe, EdgeCore
from .faults import FaultMonitor
from .httpserve import HttpFrontend
from .server import ServerCore
from .simulate import run_scenario
from .store import Store
from .transport import LinkShaper, LiveClientChannel, LiveRuntime
from .wsbridge import WsBridge

log = logging.getLogger(__name__)


class CliError(Exception):
    def __init__(self, code: str, text: str, exit_code: int = 2):
        super().__init__(text)
        self.code = code
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    """argparse, but usage problems follow the house exit-code contract."""

    def error(self, message: str):
        raise CliError("usage-error", message, exit_code=1)


def _fail_line(err: CliError) -> str:
    return f"dashbell: {err.code}: {err}"


def _resolve_token(explicit: str | None) -> str:
    token = explicit or os.environ.get(ENV_TOKEN, "")
    if not token:
        raise CliError(
            "config-error", f"no token given (use --token or {ENV_TOKEN})", exit_code=1)
    return token


def _parse_hostport(text: str, default_port: int) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    try:
        return host, int(port)
    except ValueError:
        raise CliError("usage-error", f"bad host:port {text!r}", exit_code=1) from None


class _LockedScheduler:
    """Scheduler facade that runs every callback under the process lock.

    The live commands have reader threads, control threads, and the timer
    thread all touching one core; routing timer callbacks through the same
    lock keeps the single-event-loop assumption true in realtime mode.
    """

    def __init__(self, scheduler: Scheduler, lock: threading.Lock):
        self._scheduler = scheduler
        self._lock = lock
        self.clock = scheduler.clock

    def _wrap(self, fn, args):
        def locked():
            with self._lock:
                fn(*args)
        return locked

    def call_at(self, when_ms: int, fn, *args):
        return self._scheduler.call_at(when_ms, self._wrap(fn, args))

    def call_later(self, delay_ms: int, fn, *args):
        return self._scheduler.call_later(delay_ms, self._wrap(fn, args))


class _ShapedChannel:
    """Edge channel wrapper applying a live-adjustable impairment policy."""

    def __init__(self, inner, shaper: LinkShaper):
        self._inner = inner
        self._shaper = shaper

    @property
    def up(self) -> bool:
        return self._inner.up

    def connect(self) -> bool:
        return self._inner.connect()

    def send(self, message: dict) -> bool:
        return self._shaper.send(lambda: self._inner.send(message))

    def close(self) -> None:
        self._inner.close()


# -- serve ----------------------------------------------------------------------


def cmd_serve(args) -> int:
    cfg = load_server_config(args.config)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    token = args.token or os.environ.get(ENV_TOKEN, "") or cfg.token
    if not token:
        token = protocol.generate_token()
        print(f"token={token}")
    if not protocol.token_valid(token):
        raise CliError(
            "config-error", "token must be 64 lowercase hex characters", exit_code=1)

    clock = RealtimeClock()
    scheduler = Scheduler(clock)
    store = Store(cfg.data_dir)
    monitor = FaultMonitor(heartbeat_interval_ms=cfg.heartbeat_ms)
    core = ServerCore(store, monitor, clock, token)
    lock = threading.Lock()

    runtime = LiveRuntime(core, lock, cfg.host,
                          {"edge": cfg.edge_port, "owner": cfg.owner_port})
    bridge = WsBridge(core, lock, cfg.host, cfg.bridge_port)

    def health() -> dict:
        with lock:
            return core.health()

    frontend = HttpFrontend(store, health, cfg.host, cfg.http_port)

    def tick() -> None:
        with lock:
            core.on_tick()
        scheduler.call_later(cfg.heartbeat_ms, tick)

    scheduler.start()
    runtime.start()
    bridge.start()
    frontend.start()
    scheduler.call_later(cfg.heartbeat_ms, tick)
    print(f"listening edge={cfg.edge_port} owner={cfg.owner_port}"
          f" bridge={bridge.port} http={frontend.port} data={cfg.data_dir}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        frontend.stop()
        bridge.stop()
        runtime.stop()
        scheduler.stop()
        store.close()
    return 0


# -- edge -----------------------------------------------------------------------


def cmd_edge(args) -> int:
    cfg = load_edge_config(args.config)
    if args.server:
        cfg.server_host, cfg.server_port = _parse_hostport(args.server, cfg.server_port)
    if args.control_port is not None:
        cfg.control_port = args.control_port
    cfg.token = _resolve_token(args.token or cfg.token)

    clock = RealtimeClock()
    scheduler = Scheduler(clock)
    lock = threading.Lock()
    locked = _LockedScheduler(scheduler, lock)
    rack = DeviceRack(seed=args.seed)
    edge = EdgeCore(cfg, rack, clock, locked)
    edge.plog.on_append = lambda act: print(
        f"peripheral at={act.at} device={act.peripheral} action={act.action}", flush=True)
    policy = ImpairmentPolicy(seed_key=f"{args.seed}:live")
    channel = _ShapedChannel(
        LiveClientChannel(cfg.server_host, cfg.server_port, edge, lock),
        LinkShaper(locked, policy))
    edge.attach_channel(channel)

    def handle(line: str) -> str:
        words = line.split()
        if not words:
            return "error: empty command"
        verb, rest = words[0], words[1:]
        with lock:
            if verb in ("kill", "revive"):
                if len(rest) != 1:
                    return f"error: {verb} expects a component"
                component = rest[0]
                killed = verb == "kill"
                if component in RACK_COMPONENTS:
                    rack.kill(component) if killed else rack.revive(component)
                elif component == "edge":
                    edge.hang() if killed else edge.unhang()
                elif component == "edge_channel":
                    edge.block_link() if killed else edge.unblock_link()
                else:
                    return f"error: unknown component {component}"
                return f"ok {verb} {component}"
            if verb == "press":
                if len(rest) > 1:
                    return "error: press takes at most one MAC"
                mac = rest[0].lower() if rest else cfg.button_macs[0]
                probes = rack.button_press(mac, clock.now_ms())
                for at in probes:
                    locked.call_at(at, edge.on_probe, ButtonProbe(mac, at))
                return f"ok press {mac} probes={len(probes)}"
            if verb == "net":
                if len(rest) != 2 or rest[0] not in ("drop_rate", "delay_ms"):
                    return "error: net expects drop_rate <0..1> or delay_ms <n>"
                try:
                    if rest[0] == "drop_rate":
                        policy.set_policy(drop_rate=float(rest[1]))
                    else:
                        policy.set_policy(delay_ms=int(rest[1]))
                except ValueError as exc:
                    return f"error: {exc}"
                return f"ok net {rest[0]} {rest[1]}"
        return f"error: unknown command {verb}"

    def serve_control(sock: socket.socket) -> None:
        with sock, sock.makefile("rw", encoding="utf-8", newline="\n") as fh:
            for raw in fh:
                fh.write(handle(raw.strip()) + "\n")
                fh.flush()

    def control_loop(lsock: socket.socket) -> None:
        while True:
            try:
                sock, _ = lsock.accept()
            except OSError:
                return
            threading.Thread(target=serve_control, args=(sock,), daemon=True).start()

    lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    lsock.bind(("127.0.0.1", cfg.control_port))
    lsock.listen(4)
    threading.Thread(target=control_loop, args=(lsock,), daemon=True).start()

    scheduler.start()
    with lock:
        edge.start()
    print(f"edge server={cfg.server_host}:{cfg.server_port}"
          f" control={lsock.getsockname()[1]} macs={','.join(cfg.button_macs)}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        lsock.close()
        channel.close()
        scheduler.stop()
    return 0


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        raise CliError("scenario-parse-error", str(exc), exit_code=1) from exc
    except OSError as exc:
        raise CliError("io-error", str(exc), exit_code=1) from exc

    mode = "sockets" if args.sockets else "in-process"
    if args.data_dir:
        report, violations = run_scenario(scenario, args.data_dir, mode)
    else:
        with tempfile.TemporaryDirectory(prefix="dashbell-sim-") as tmp:
            report, violations = run_scenario(scenario, tmp, mode)
    sys.stdout.write(report)
    if violations:
        raise CliError("invariant-violation", violations[0])
    return 0


# -- inject ---------------------------------------------------------------------


def cmd_inject(args) -> int:
    line = " ".join(args.words)
    try:
        with socket.create_connection((args.host, args.port), timeout=5.0) as sock:
            sock.sendall((line + "\n").encode("utf-8"))
            with sock.makefile("r", encoding="utf-8") as fh:
                reply = fh.readline().strip()
    except OSError as exc:
        raise CliError("unreachable", f"{args.host}:{args.port}: {exc}") from exc
    print(reply)
    if not reply.startswith("ok"):
        raise CliError("inject-rejected", reply)
    return 0


# -- owner-channel queries --------------------------------------------------------


class _OwnerSession:
    """Short-lived blocking owner connection for one-shot queries."""

    def __init__(self, host: str, port: int, token: str, timeout: float = 5.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise CliError("unreachable", f"{host}:{port}: {exc}") from exc
        self._sock.settimeout(timeout)
        self._decoder = protocol.FrameDecoder()
        self._seq_out = 0
        self.send({"type": "hello", "role": "owner", "token": token})
        self.wait(lambda m: m["type"] == "hello_ack")

    def send(self, body: dict) -> None:
        self._seq_out += 1
        body["seq"] = self._seq_out
        try:
            self._sock.sendall(protocol.encode_frame(body))
        except OSError as exc:
            raise CliError("unreachable", str(exc)) from exc

    def wait(self, match) -> dict:
        """Next message satisfying ``match``; pushes in between are skipped.

        Server errors surface as CliError unless the caller's predicate
        claims them (decide wants already-decided as a result, not a crash).
        """
        while True:
            try:
                chunk = self._sock.recv(65536)
            except OSError as exc:
                raise CliError("unreachable", str(exc)) from exc
            if not chunk:
                raise CliError("connection-closed", "server closed the connection")
            try:
                messages = self._decoder.feed(chunk)
            except protocol.ProtocolError as exc:
                raise CliError("protocol-error", str(exc)) from exc
            for message in messages:
                if match(message):
                    return message
                if message["type"] == "error":
                    raise CliError(message["code"], message["text"])

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def cmd_decide(args) -> int:
    host, port = _parse_hostport(args.server, protocol.DEFAULT_OWNER_PORT)
    token = _resolve_token(args.token)
    verdict = "granted" if args.verdict == "grant" else "denied"
    session = _OwnerSession(host, port, token)
    try:
        session.send({"type": "decision", "entry_id": args.entry_id, "verdict": verdict})
        reply = session.wait(
            lambda m: (m["type"] == "decision_ack" and m["entry_id"] == args.entry_id)
            or m["type"] == "error")
    finally:
        session.close()
    if reply["type"] == "error":
        raise CliError(reply["code"], reply["text"])
    access = "yes" if reply["verdict"] == "granted" else "no"
    print(f"entry_id={reply['entry_id']} access_granted={access}"
          f" decided_at={reply['decided_at']}")
    return 0


def cmd_history(args) -> int:
    host, port = _parse_hostport(args.server, protocol.DEFAULT_OWNER_PORT)
    token = _resolve_token(args.token)
    to_ms = args.to_ms if args.to_ms is not None else int(time.time() * 1000)
    session = _OwnerSession(host, port, token)
    try:
        session.send({
            "type": "history_request",
            "from_ms": args.from_ms,
            "to_ms": to_ms,
            "limit": args.limit,
        })
        reply = session.wait(lambda m: m["type"] == "history_response")
    finally:
        session.close()
    print(render_history_table(reply["entries"]))
    return 0


def render_history_table(entries: list[dict]) -> str:
    header = ("id", "time", "decision", "camera_fault", "image")
    rows = [header]
    for entry in entries:
        access = entry.get("access_granted")
        rows.append((
            str(entry["entry_id"]),
            str(entry["received_at"]),
            "pending" if access is None else access,
            "yes" if entry["camera_fault"] else "no",
            entry.get("image_url") or "-",
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    out = []
    for row in rows:
        out.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return "\n".join(out)


# -- wiring ----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dashbell", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("serve", help="run the doorbell server")
    p.add_argument("--config", help="INI config file with a [server] section")
    p.add_argument("--data-dir", help="override the data directory")
    p.add_argument("--token", help="shared secret (64 hex chars); generated if absent")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("edge", help="run a live edge process")
    p.add_argument("--config", help="INI config file with an [edge] section")
    p.add_argument("--server", help="server host:port")
    p.add_argument("--token", help=f"shared secret (or {ENV_TOKEN})")
    p.add_argument("--control-port", type=int, help="fault-injection port")
    p.add_argument("--seed", type=int, default=0, help="device simulator seed")
    p.set_defaults(func=cmd_edge)

    p = sub.add_parser("simulate", help="run a scripted scenario")
    p.add_argument("scenario", help="scenario file path")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--in-process", action="store_true",
                       help="in-process channels (default)")
    group.add_argument("--sockets", action="store_true", help="real loopback sockets")
    p.add_argument("--data-dir", help="persist the run's store here instead of a temp dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inject", help="send a control command to a live edge")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7011)
    p.add_argument("words", nargs="+", metavar="command",
                   help="kill <c> | revive <c> | press [mac] | net <param> <value>")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("history", help="list entries from a running server")
    p.add_argument("--from", dest="from_ms", type=int, default=0)
    p.add_argument("--to", dest="to_ms", type=int, default=None)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--server", default="127.0.0.1:7002", help="owner port host:port")
    p.add_argument("--token", help=f"shared secret (or {ENV_TOKEN})")
    p.set_defaults(func=cmd_history)

    p = sub.add_parser("decide", help="grant or deny a pending entry")
    p.add_argument("entry_id", type=int)
    p.add_argument("verdict", choices=("grant", "deny"))
    p.add_argument("--server", default="127.0.0.1:7002", help="owner port host:port")
    p.add_argument("--token", help=f"shared secret (or {ENV_TOKEN})")
    p.set_defaults(func=cmd_decide)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DASHBELL_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as err:
        print(_fail_line(err), file=sys.stderr)
        return err.exit_code
    except ConfigError as err:
        print(f"dashbell: config-error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
