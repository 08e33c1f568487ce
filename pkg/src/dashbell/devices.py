"""Deterministic device simulators and the scenario file parser.

The dash button, camera, buzzer, and servo are passive state machines: the
owning event loop drives them, they never spawn work of their own. All
randomness flows from a single scenario seed, so a scripted run is a pure
function of (scenario file, seed).

Scenario files are line-oriented: one `<ms> <verb> <args>` event per line,
`#` comments, blank lines ignored, and an optional `seed <n>` header
directive. Event times are strictly increasing. Grammar:

    seed <n>
    <ms> press [<mac>]
    <ms> kill <component>          button|camera|buzzer|servo|edge|edge_channel
    <ms> revive <component>
    <ms> net <param> <value>       drop_rate <0..1> | delay_ms <n>
    <ms> settings <k>=<v> ...      service=on|off dnd=on|off channels=a,b
    <ms> decide <ordinal> grant|deny
    <ms> end
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

PGM_MAGIC = b"P5"
IMAGE_SIZE = 64

RACK_COMPONENTS = ("button", "camera", "buzzer", "servo")
SCENARIO_COMPONENTS = RACK_COMPONENTS + ("edge", "edge_channel")

PROBES_MIN, PROBES_MAX = 2, 5
PROBE_GAP_MIN_MS, PROBE_GAP_MAX_MS = 300, 900


class CaptureFailure(Exception):
    """Camera is killed; no frame available."""


class ScenarioError(Exception):
    def __init__(self, line_no: int, text: str):
        super().__init__(f"line {line_no}: {text}")
        self.line_no = line_no


def encode_pgm(width: int, height: int, pixels: bytes) -> bytes:
    if len(pixels) != width * height:
        raise ValueError(f"expected {width * height} pixels, got {len(pixels)}")
    return b"P5\n%d %d\n255\n" % (width, height) + pixels


def parse_pgm(data: bytes) -> tuple[int, int, bytes]:
    """Parse a binary PGM (P5, maxval 255) into (width, height, pixels)."""
    if not data.startswith(PGM_MAGIC):
        raise ValueError("not a P5 PGM")
    pos = len(PGM_MAGIC)
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pixels = data[pos : pos + width * height]
    if len(pixels) != width * height:
        raise ValueError("truncated PGM pixel data")
    return width, height, pixels


def render_image(press_id: int, seed: int, size: int = IMAGE_SIZE) -> bytes:
    """Deterministic grayscale frame for one press: same inputs, same bytes.

    The press id and seed both shift every pixel, so distinct presses give
    distinct images.
    """
    pixels = bytearray(size * size)
    base = (31 * press_id + 17 * seed) & 0xFF
    for y in range(size):
        row = (base + 13 * y) & 0xFF
        for x in range(size):
            pixels[y * size + x] = (row + 7 * x) & 0xFF
    return encode_pgm(size, size, bytes(pixels))


class DeviceRack:
    """The edge's attached hardware: button, camera, buzzer, servo.

    kill()/revive() model component failure; a killed component produces
    nothing (silence is the failure mode) until revived.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._alive = {c: True for c in RACK_COMPONENTS}

    def alive(self, component: str) -> bool:
        return self._alive[component]

    def kill(self, component: str) -> None:
        self._alive[component] = False

    def revive(self, component: str) -> None:
        self._alive[component] = True

    def button_press(self, mac: str, at_ms: int) -> list[int]:
        """Probe burst for one physical press: timestamps of each probe.

        A real dash button announces itself with several packets; the burst
        size and spacing are drawn from the seed so identical scenarios give
        identical bursts. All probes land inside one debounce window.
        """
        if not self._alive["button"]:
            return []
        rng = random.Random(f"{self.seed}:button:{mac}:{at_ms}")
        count = rng.randint(PROBES_MIN, PROBES_MAX)
        times = [at_ms]
        for _ in range(count - 1):
            times.append(times[-1] + rng.randint(PROBE_GAP_MIN_MS, PROBE_GAP_MAX_MS))
        return times

    def capture(self, press_id: int) -> bytes:
        if not self._alive["camera"]:
            raise CaptureFailure(f"camera killed (press {press_id})")
        return render_image(press_id, self.seed)


@dataclass
class ImpairmentPolicy:
    """Seeded loss/latency for one channel direction.

    While drop_rate > 0 exactly one RNG sample is drawn per frame, so an
    independent replay of the same seeded RNG predicts the delivered count
    exactly. drop_rate 0 and delay 0 restore full transparency.
    """

    seed_key: str
    drop_rate: float = 0.0
    delay_ms: int = 0
    dropped: int = 0
    _rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = random.Random(self.seed_key)

    def set_policy(self, drop_rate: float | None = None, delay_ms: int | None = None) -> None:
        if drop_rate is not None:
            if not 0.0 <= drop_rate <= 1.0:
                raise ValueError("drop_rate must be within [0, 1]")
            self.drop_rate = drop_rate
        if delay_ms is not None:
            if delay_ms < 0:
                raise ValueError("delay_ms must be >= 0")
            self.delay_ms = delay_ms

    def decide(self) -> tuple[bool, int]:
        """(deliver?, delay_ms) for the next frame."""
        if self.drop_rate > 0 and self._rng.random() < self.drop_rate:
            self.dropped += 1
            return False, 0
        return True, self.delay_ms


@dataclass(frozen=True)
class ScenarioEvent:
    at: int
    verb: str
    args: tuple


@dataclass
class Scenario:
    seed: int
    events: list[ScenarioEvent]
    end_ms: int | None
    name: str = "scenario"

    def horizon(self, default_drain_ms: int = 8000) -> int:
        if self.end_ms is not None:
            return self.end_ms
        last = max((e.at for e in self.events), default=0)
        return last + default_drain_ms


def _parse_mac(text: str) -> str:
    parts = text.lower().split(":")
    if len(parts) != 6 or not all(len(p) == 2 and all(c in "0123456789abcdef" for c in p) for p in parts):
        raise ValueError(f"bad MAC {text!r}")
    return ":".join(parts)


def _parse_settings_args(args: list[str], line_no: int) -> dict:
    out: dict = {}
    for item in args:
        key, sep, value = item.partition("=")
        if not sep:
            raise ScenarioError(line_no, f"settings expects k=v pairs, got {item!r}")
        if key == "service":
            out["service_enabled"] = _onoff(value, line_no)
        elif key == "dnd":
            out["do_not_disturb"] = _onoff(value, line_no)
        elif key == "channels":
            channels = [c for c in value.split(",") if c]
            for c in channels:
                if c not in ("email", "text", "ringer"):
                    raise ScenarioError(line_no, f"unknown alert channel {c!r}")
            out["alert_channels"] = channels
        else:
            raise ScenarioError(line_no, f"unknown settings key {key!r}")
    if not out:
        raise ScenarioError(line_no, "settings event needs at least one k=v pair")
    return out


def _onoff(value: str, line_no: int) -> bool:
    if value == "on":
        return True
    if value == "off":
        return False
    raise ScenarioError(line_no, f"expected on/off, got {value!r}")


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    seed = 0
    events: list[ScenarioEvent] = []
    end_ms: int | None = None
    last_at = -1
    kill_state: dict[str, bool] = {}

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0] == "seed":
            if events or end_ms is not None:
                raise ScenarioError(line_no, "seed directive must precede events")
            if len(words) != 2:
                raise ScenarioError(line_no, "seed expects one integer")
            try:
                seed = int(words[1])
            except ValueError:
                raise ScenarioError(line_no, f"bad seed {words[1]!r}") from None
            continue

        try:
            at = int(words[0])
        except ValueError:
            raise ScenarioError(line_no, f"expected event time in ms, got {words[0]!r}") from None
        if at < 0:
            raise ScenarioError(line_no, "event time must be >= 0")
        if at <= last_at:
            raise ScenarioError(line_no, f"event times must be strictly increasing ({at} after {last_at})")
        if end_ms is not None:
            raise ScenarioError(line_no, "no events allowed after end")
        last_at = at

        verb, args = words[1] if len(words) > 1 else "", words[2:]
        if verb == "press":
            if len(args) > 1:
                raise ScenarioError(line_no, "press takes at most one MAC")
            mac = None
            if args:
                try:
                    mac = _parse_mac(args[0])
                except ValueError as exc:
                    raise ScenarioError(line_no, str(exc)) from None
            events.append(ScenarioEvent(at, "press", (mac,)))
        elif verb in ("kill", "revive"):
            if len(args) != 1 or args[0] not in SCENARIO_COMPONENTS:
                raise ScenarioError(line_no, f"{verb} expects one of {', '.join(SCENARIO_COMPONENTS)}")
            component = args[0]
            killed = kill_state.get(component, False)
            if verb == "kill" and killed:
                raise ScenarioError(line_no, f"{component} is already killed")
            if verb == "revive" and not killed:
                raise ScenarioError(line_no, f"{component} is not killed")
            kill_state[component] = verb == "kill"
            events.append(ScenarioEvent(at, verb, (component,)))
        elif verb == "net":
            if len(args) != 2 or args[0] not in ("drop_rate", "delay_ms"):
                raise ScenarioError(line_no, "net expects drop_rate <0..1> or delay_ms <n>")
            try:
                value = float(args[1]) if args[0] == "drop_rate" else int(args[1])
            except ValueError:
                raise ScenarioError(line_no, f"bad net value {args[1]!r}") from None
            if args[0] == "drop_rate" and not 0.0 <= value <= 1.0:
                raise ScenarioError(line_no, "drop_rate must be within [0, 1]")
            if args[0] == "delay_ms" and value < 0:
                raise ScenarioError(line_no, "delay_ms must be >= 0")
            events.append(ScenarioEvent(at, "net", (args[0], value)))
        elif verb == "settings":
            events.append(ScenarioEvent(at, "settings", (_parse_settings_args(args, line_no),)))
        elif verb == "decide":
            if len(args) != 2 or args[1] not in ("grant", "deny"):
                raise ScenarioError(line_no, "decide expects <ordinal> grant|deny")
            try:
                ordinal = int(args[0])
            except ValueError:
                raise ScenarioError(line_no, f"bad ordinal {args[0]!r}") from None
            if ordinal < 1:
                raise ScenarioError(line_no, "ordinal is 1-based")
            verdict = "granted" if args[1] == "grant" else "denied"
            events.append(ScenarioEvent(at, "decide", (ordinal, verdict)))
        elif verb == "end":
            if args:
                raise ScenarioError(line_no, "end takes no arguments")
            end_ms = at
        else:
            raise ScenarioError(line_no, f"unknown verb {verb!r}")

    return Scenario(seed=seed, events=events, end_ms=end_ms, name=name)


def load_scenario(path: str) -> Scenario:
    import os
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    base = os.path.basename(path)
    return parse_scenario(text, name=base.rsplit(".", 1)[0])
