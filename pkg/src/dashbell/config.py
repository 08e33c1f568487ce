"""INI configuration for the long-running commands.

Two sections, [server] and [edge], both optional; anything missing falls
back to a default. The shared token may also come from the DASHBELL_TOKEN
environment variable, which wins over the file so demo configs can be
committed without a usable secret in them.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from . import protocol
from .edge import EdgeConfig

ENV_TOKEN = "DASHBELL_TOKEN"


class ConfigError(Exception):
    pass


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    edge_port: int = protocol.DEFAULT_EDGE_PORT
    owner_port: int = protocol.DEFAULT_OWNER_PORT
    bridge_port: int = protocol.DEFAULT_BRIDGE_PORT
    http_port: int = protocol.DEFAULT_HTTP_PORT
    token: str = ""
    data_dir: str = "./data"
    heartbeat_ms: int = 1000


def _load(path: str | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path is not None:
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
    return parser


def _token(section, fallback: str) -> str:
    env = os.environ.get(ENV_TOKEN)
    if env:
        return env
    return section.get("token", fallback)


def load_server_config(path: str | None) -> ServerConfig:
    parser = _load(path)
    section = parser["server"] if parser.has_section("server") else parser["DEFAULT"]
    defaults = ServerConfig()
    try:
        return ServerConfig(
            host=section.get("host", defaults.host),
            edge_port=section.getint("edge_port", defaults.edge_port),
            owner_port=section.getint("owner_port", defaults.owner_port),
            bridge_port=section.getint("bridge_port", defaults.bridge_port),
            http_port=section.getint("http_port", defaults.http_port),
            token=_token(section, defaults.token),
            data_dir=section.get("data_dir", defaults.data_dir),
            heartbeat_ms=section.getint("heartbeat_ms", defaults.heartbeat_ms),
        )
    except ValueError as exc:
        raise ConfigError(f"bad [server] value: {exc}") from exc


def load_edge_config(path: str | None) -> EdgeConfig:
    parser = _load(path)
    section = parser["edge"] if parser.has_section("edge") else parser["DEFAULT"]
    defaults = EdgeConfig()
    try:
        macs = section.get("button_macs", ",".join(defaults.button_macs))
        return EdgeConfig(
            server_host=section.get("server_host", defaults.server_host),
            server_port=section.getint("server_port", defaults.server_port),
            token=_token(section, defaults.token),
            button_macs=tuple(m.strip().lower() for m in macs.split(",") if m.strip()),
            debounce_ms=section.getint("debounce_ms", defaults.debounce_ms),
            heartbeat_ms=section.getint("heartbeat_ms", defaults.heartbeat_ms),
            queue_capacity=section.getint("queue_capacity", defaults.queue_capacity),
            servo_dwell_ms=section.getint("servo_dwell_ms", defaults.servo_dwell_ms),
            reconnect_ms=section.getint("reconnect_ms", defaults.reconnect_ms),
            control_port=section.getint("control_port", defaults.control_port),
        )
    except ValueError as exc:
        raise ConfigError(f"bad [edge] value: {exc}") from exc
