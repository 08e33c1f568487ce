"""Durable append-only persistence with crash recovery by log replay.

Data directory layout:

    entries.log         visitor entries + decisions (binary records, below)
    settings.log        owner settings history, last write wins
    outbox/email.jsonl  simulated email deliveries, one JSON object per line
    outbox/text.jsonl   simulated text-message deliveries
    images/<id>.pgm     visitor pictures, byte-identical to the upload

Log record framing mirrors the wire frame with an integrity tail:

    4-byte big-endian body length | body (UTF-8 JSON) | 4-byte big-endian CRC32(body)

Body: {"kind": ..., "written_at": ms, ...kind fields}. Records are strictly
append-ordered. Recovery scans from the start and stops at the first bad
record (truncated tail or checksum mismatch), keeping everything before it;
every record that was flushed before an acknowledgment survives a crash.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Any

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
_CRC = struct.Struct(">I")
MAX_RECORD_BYTES = 16 * 1024 * 1024

RECORD_KINDS = ("entry_created", "entry_decided", "settings_changed")


@dataclass(frozen=True)
class OwnerSettings:
    service_enabled: bool = True
    do_not_disturb: bool = False
    alert_channels: tuple[str, ...] = ("ringer",)

    def to_wire(self) -> dict[str, Any]:
        return {
            "service_enabled": self.service_enabled,
            "do_not_disturb": self.do_not_disturb,
            "alert_channels": sorted(self.alert_channels),
        }

    @classmethod
    def from_wire(cls, data: dict[str, Any]) -> "OwnerSettings":
        return cls(
            service_enabled=bool(data["service_enabled"]),
            do_not_disturb=bool(data["do_not_disturb"]),
            alert_channels=tuple(sorted(set(data["alert_channels"]))),
        )


@dataclass
class EntryRecord:
    """One visitor request: the tri-state access row.

    access_granted starts as None (pending) and transitions at most once,
    to "yes" or "no"; decided_at is set exactly when it does.
    """

    entry_id: int
    press_id: int
    received_at: int
    pressed_at: int
    camera_fault: bool
    image_url: str | None = None
    access_granted: str | None = None  # None | "yes" | "no"
    decided_at: int | None = None

    def decided(self) -> bool:
        return self.access_granted is not None

    def to_wire(self) -> dict[str, Any]:
        wire: dict[str, Any] = {
            "entry_id": self.entry_id,
            "received_at": self.received_at,
            "pressed_at": self.pressed_at,
            "camera_fault": self.camera_fault,
            "access_granted": self.access_granted,
        }
        if self.image_url is not None:
            wire["image_url"] = self.image_url
        if self.decided_at is not None:
            wire["decided_at"] = self.decided_at
        return wire


def encode_record(body: dict[str, Any]) -> bytes:
    payload = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(payload) > MAX_RECORD_BYTES:
        raise ValueError(f"record body {len(payload)} bytes exceeds cap")
    return _LEN.pack(len(payload)) + payload + _CRC.pack(zlib.crc32(payload))


def scan_records(data: bytes) -> tuple[list[dict[str, Any]], int | None]:
    """Decode every intact record from the head of a log byte string.

    Returns (records, bad_offset); bad_offset is None for a cleanly-ended
    log, otherwise the byte offset of the first record that failed (torn
    tail or corruption). Everything before it is kept.
    """
    records: list[dict[str, Any]] = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + _LEN.size > n:
            return records, pos
        (length,) = _LEN.unpack_from(data, pos)
        if length == 0 or length > MAX_RECORD_BYTES:
            return records, pos
        end = pos + _LEN.size + length + _CRC.size
        if end > n:
            return records, pos
        payload = data[pos + _LEN.size : pos + _LEN.size + length]
        (crc,) = _CRC.unpack_from(data, pos + _LEN.size + length)
        if zlib.crc32(payload) != crc:
            return records, pos
        try:
            body = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return records, pos
        if not isinstance(body, dict):
            return records, pos
        records.append(body)
        pos = end
    return records, None


@dataclass
class ReplayResult:
    entries: dict[int, EntryRecord] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)
    settings: OwnerSettings = field(default_factory=OwnerSettings)
    warnings: list[str] = field(default_factory=list)
    bad_offset: int | None = None
    trailing_bytes: int = 0
    record_count: int = 0

    @property
    def next_entry_id(self) -> int:
        return (max(self.entries) if self.entries else 0) + 1

    def press_index(self) -> dict[int, int]:
        return {rec.press_id: rec.entry_id for rec in self.entries.values()}


def replay(entries_log: bytes, settings_log: bytes = b"") -> ReplayResult:
    """Deterministic state reconstruction from raw log bytes.

    A decision for an unknown entry is skipped with a warning; a second
    decision for one entry keeps the first and warns (the tri-state field
    transitions at most once). The last intact settings record wins.
    """
    result = ReplayResult()
    records, bad_offset = scan_records(entries_log)
    result.bad_offset = bad_offset
    if bad_offset is not None:
        result.trailing_bytes = len(entries_log) - bad_offset
        log.warning("entries log: stopped at bad record, offset %d (%d bytes dropped)",
                    bad_offset, result.trailing_bytes)
    result.record_count = len(records)

    for body in records:
        kind = body.get("kind")
        if kind == "entry_created":
            try:
                rec = EntryRecord(
                    entry_id=int(body["entry_id"]),
                    press_id=int(body["press_id"]),
                    received_at=int(body["received_at"]),
                    pressed_at=int(body["pressed_at"]),
                    camera_fault=bool(body["camera_fault"]),
                    image_url=body.get("image_url"),
                )
            except (KeyError, TypeError, ValueError):
                result.warnings.append(f"malformed entry_created record skipped: {body!r}")
                continue
            if rec.entry_id in result.entries:
                result.warnings.append(f"duplicate entry_created for id {rec.entry_id} skipped")
                continue
            result.entries[rec.entry_id] = rec
            result.order.append(rec.entry_id)
        elif kind == "entry_decided":
            entry_id = body.get("entry_id")
            rec = result.entries.get(entry_id)
            if rec is None:
                result.warnings.append(f"entry_decided for unknown id {entry_id!r} skipped")
                continue
            if rec.decided():
                result.warnings.append(f"duplicate entry_decided for id {entry_id} skipped (first kept)")
                continue
            verdict = body.get("access_granted")
            if verdict not in ("yes", "no"):
                result.warnings.append(f"entry_decided for id {entry_id} has bad verdict {verdict!r}, skipped")
                continue
            rec.access_granted = verdict
            rec.decided_at = int(body.get("decided_at", 0))
        elif kind == "settings_changed":
            result.warnings.append("settings_changed record in entries log skipped")
        else:
            result.warnings.append(f"unknown record kind {kind!r} skipped")

    settings_records, s_bad = scan_records(settings_log)
    if s_bad is not None:
        log.warning("settings log: stopped at bad record, offset %d", s_bad)
    for body in settings_records:
        if body.get("kind") != "settings_changed":
            continue
        try:
            result.settings = OwnerSettings.from_wire(body["settings"])
        except (KeyError, TypeError):
            result.warnings.append("malformed settings_changed record skipped")
    return result


class StorageError(Exception):
    """Durable write failed; the server must refuse the operation."""


class Store:
    """Single-writer durable store for one deployment's data directory.

    Every append is flushed (and fsynced unless disabled) before it returns,
    so the caller may acknowledge over the network as soon as append comes
    back. Readers work on the in-memory index rebuilt at open time; recovery
    runs before any connection is accepted.
    """

    def __init__(self, data_dir: str, fsync: bool = True):
        self.data_dir = data_dir
        self.fsync = fsync
        os.makedirs(data_dir, exist_ok=True)
        os.makedirs(os.path.join(data_dir, "outbox"), exist_ok=True)
        os.makedirs(os.path.join(data_dir, "images"), exist_ok=True)

        self.recovery = self._recover()
        self.entries: dict[int, EntryRecord] = self.recovery.entries
        self.order: list[int] = self.recovery.order
        self.settings: OwnerSettings = self.recovery.settings
        self.press_index: dict[int, int] = self.recovery.press_index()
        self._next_entry_id = self.recovery.next_entry_id

        self._entries_fh = open(self._path("entries.log"), "ab")
        self._settings_fh = open(self._path("settings.log"), "ab")
        self._outbox_fhs: dict[str, Any] = {}

    def _path(self, *parts: str) -> str:
        return os.path.join(self.data_dir, *parts)

    def _recover(self) -> ReplayResult:
        entries_log = self._read_file("entries.log")
        settings_log = self._read_file("settings.log")
        result = replay(entries_log, settings_log)
        if result.bad_offset is not None:
            # Drop the torn tail so the next append continues a clean log.
            with open(self._path("entries.log"), "r+b") as fh:
                fh.truncate(result.bad_offset)
        for warning in result.warnings:
            log.warning("recovery: %s", warning)
        return result

    def _read_file(self, name: str) -> bytes:
        try:
            with open(self._path(name), "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            return b""

    def close(self) -> None:
        self._entries_fh.close()
        self._settings_fh.close()
        for fh in self._outbox_fhs.values():
            fh.close()
        self._outbox_fhs.clear()

    def _append(self, fh, body: dict[str, Any]) -> None:
        try:
            fh.write(encode_record(body))
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StorageError(str(exc)) from exc

    # -- entries --------------------------------------------------------------

    def next_entry_id(self) -> int:
        return self._next_entry_id

    def create_entry(self, press_id: int, received_at: int, pressed_at: int,
                     camera_fault: bool, image: bytes | None) -> EntryRecord:
        """Persist a new entry (access tri-state starts at null).

        The image file, when present, is written before the log record so a
        recovered record's URL always resolves.
        """
        entry_id = self._next_entry_id
        image_url = None
        if image is not None:
            with open(self._path("images", f"{entry_id}.pgm"), "wb") as fh:
                fh.write(image)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            image_url = f"/images/{entry_id}.pgm"
        rec = EntryRecord(
            entry_id=entry_id,
            press_id=press_id,
            received_at=received_at,
            pressed_at=pressed_at,
            camera_fault=camera_fault,
            image_url=image_url,
        )
        body = {
            "kind": "entry_created",
            "written_at": received_at,
            "entry_id": rec.entry_id,
            "press_id": rec.press_id,
            "received_at": rec.received_at,
            "pressed_at": rec.pressed_at,
            "camera_fault": rec.camera_fault,
        }
        if image_url is not None:
            body["image_url"] = image_url
        self._append(self._entries_fh, body)
        self._next_entry_id += 1
        self.entries[entry_id] = rec
        self.order.append(entry_id)
        self.press_index[press_id] = entry_id
        return rec

    def decide_entry(self, entry_id: int, verdict: str, decided_at: int) -> EntryRecord:
        """Record the single allowed null -> yes/no transition."""
        rec = self.entries[entry_id]
        if rec.decided():
            raise ValueError(f"entry {entry_id} already decided")
        if verdict not in ("yes", "no"):
            raise ValueError(f"bad verdict {verdict!r}")
        self._append(self._entries_fh, {
            "kind": "entry_decided",
            "written_at": decided_at,
            "entry_id": entry_id,
            "access_granted": verdict,
            "decided_at": decided_at,
        })
        rec.access_granted = verdict
        rec.decided_at = decided_at
        return rec

    def history(self, from_ms: int, to_ms: int, limit: int) -> list[EntryRecord]:
        """Entries received in [from_ms, to_ms], newest first, at most limit."""
        out = [self.entries[eid] for eid in reversed(self.order)
               if from_ms <= self.entries[eid].received_at <= to_ms]
        return out[:limit]

    def image_path(self, entry_id: int) -> str:
        return self._path("images", f"{entry_id}.pgm")

    # -- settings -------------------------------------------------------------

    def change_settings(self, settings: OwnerSettings, written_at: int) -> None:
        self._append(self._settings_fh, {
            "kind": "settings_changed",
            "written_at": written_at,
            "settings": settings.to_wire(),
        })
        self.settings = settings

    # -- outbox ---------------------------------------------------------------

    def outbox_append(self, channel: str, entry_id: int, written_at: int, rendered_text: str) -> None:
        if channel not in ("email", "text"):
            raise ValueError(f"bad outbox channel {channel!r}")
        fh = self._outbox_fhs.get(channel)
        if fh is None:
            fh = open(self._path("outbox", f"{channel}.jsonl"), "a", encoding="utf-8")
            self._outbox_fhs[channel] = fh
        line = json.dumps({
            "channel": channel,
            "entry_id": entry_id,
            "written_at": written_at,
            "rendered_text": rendered_text,
        }, sort_keys=True, separators=(",", ":"))
        try:
            fh.write(line + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StorageError(str(exc)) from exc

    def read_outbox(self, channel: str) -> list[dict[str, Any]]:
        path = self._path("outbox", f"{channel}.jsonl")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return [json.loads(line) for line in fh if line.strip()]
        except FileNotFoundError:
            return []
