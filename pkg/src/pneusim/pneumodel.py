"""Fixed-timestep physics of the actuation hardware.

The plant is two diaphragm air pumps (one inflates, one deflates), four
solenoid valves acting as pneumatic relays, three servo arms, and three
inflatable bladders. Dynamics are deliberately simple linear ramps:

* an inflatable with an open inflate path and the inflate pump running
  fills at ``pump_flow_rate / 60 / inflatable_volume`` per second
  (about 0.2 s from empty to full with the defaults);
* an open deflate path with the deflate pump running drains at
  ``1 / deflate_full_time`` per second (1 s from full to empty — the
  measured asymmetry, slower than the symmetric-pump assumption);
* each servo slews toward its target at a fixed angular rate
  (60 degrees in 0.9 s with the defaults);
* bladder pressure is ``max_pressure * fill``, a linear map that puts
  the device's four stiffness presets 16 / 8 / 1.6 / 0 PSI at fills
  1.0 / 0.5 / 0.1 / 0.0.

Integration is explicit Euler, which is exact between clamps for these
ramps; the timestep is capped at 0.01 s.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

from .protocol import BatchCommand, ServoCommand

DEFAULT_PUMP_FLOW_RATE = 2.5  # liters / minute
DEFAULT_INFLATABLE_VOLUME = 0.008334  # liters
DEFAULT_DEFLATE_FULL_TIME = 1.0  # seconds, full -> empty
DEFAULT_STALL_PRESSURE = -55.0  # kPa; stored for reference, not simulated
DEFAULT_MAX_PRESSURE = 16.0  # PSI at fill fraction 1.0
DEFAULT_SERVO_RATE = 60.0 / 0.9  # degrees / second
MAX_TIMESTEP = 0.01  # seconds
NUM_INFLATABLES = 3
NUM_SERVOS = 3

_ROLE_RE = re.compile(r"^(gate:[123]|selector)$")


class DeviceError(ValueError):
    """Base class for device-level command/stepping failures."""

    reason = "device_error"


class UnknownServoPinError(DeviceError):
    reason = "unknown_servo_pin"


class InvalidTimestepError(DeviceError):
    reason = "invalid_timestep"


class OutOfRangeFillError(DeviceError):
    reason = "fill_out_of_range"


def _clamp(value: float, lo: float, hi: float) -> float:
    return lo if value < lo else hi if value > hi else value


@dataclass(frozen=True)
class ManifoldTopology:
    """Routing of the two pumps through the four valves to the bladders.

    Each valve plays one role, named by a string:

    * ``"gate:N"`` — the valve connects bladder N to the shared manifold
      when energized and seals it when off;
    * ``"selector"`` — the valve connects the manifold to the inflate
      pump when off (0) and to the deflate pump when on (1).

    The default wiring gates bladders 1-3 with valves 1-3 and uses valve 4
    as the inflate/deflate selector. A routing with no selector connects
    both pumps to the manifold at once, which allows (and flags) opposed
    simultaneous flows.
    """

    inflate_pump_pin: int = 5
    deflate_pump_pin: int = 6
    valve_pins: tuple[int, ...] = (1, 2, 3, 4)
    valve_routing: tuple[str, ...] = ("gate:1", "gate:2", "gate:3", "selector")

    def __post_init__(self) -> None:
        object.__setattr__(self, "valve_pins", tuple(self.valve_pins))
        object.__setattr__(self, "valve_routing", tuple(self.valve_routing))
        if len(self.valve_pins) != 4:
            raise ValueError(f"expected exactly 4 valve pins, got {len(self.valve_pins)}")
        if len(self.valve_routing) != len(self.valve_pins):
            raise ValueError("valve_routing must assign one role per valve")
        for role in self.valve_routing:
            if not _ROLE_RE.match(role):
                raise ValueError(f"bad valve role {role!r}; expected 'gate:1..3' or 'selector'")
        pins = (self.inflate_pump_pin, self.deflate_pump_pin, *self.valve_pins)
        if len(set(pins)) != len(pins):
            raise ValueError(f"actuator pins must be distinct, got {pins}")
        for pin in pins:
            if not 0 <= pin <= 99:
                raise ValueError(f"pin {pin} outside [0, 99]")

    def gate_pins(self, inflatable: int) -> tuple[int, ...]:
        """Pins of every valve gating the given bladder (1-based)."""
        role = f"gate:{inflatable}"
        return tuple(p for p, r in zip(self.valve_pins, self.valve_routing) if r == role)

    @property
    def selector_pins(self) -> tuple[int, ...]:
        return tuple(p for p, r in zip(self.valve_pins, self.valve_routing) if r == "selector")

    @property
    def actuator_pins(self) -> tuple[int, ...]:
        return tuple(sorted((self.inflate_pump_pin, self.deflate_pump_pin, *self.valve_pins)))

    def to_dict(self) -> dict:
        return {
            "inflate_pump_pin": self.inflate_pump_pin,
            "deflate_pump_pin": self.deflate_pump_pin,
            "valve_pins": list(self.valve_pins),
            "valve_routing": list(self.valve_routing),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ManifoldTopology":
        known = {f: data[f] for f in (
            "inflate_pump_pin", "deflate_pump_pin", "valve_pins", "valve_routing"
        ) if f in data}
        return cls(**known)


@dataclass(frozen=True)
class PneumaticConfig:
    """Plant constants plus pin assignments, loadable from a config file.

    Units: ``pump_flow_rate`` liters/minute, ``inflatable_volume`` liters,
    ``deflate_full_time`` seconds, ``pump_stall_pressure`` kilopascals,
    ``max_pressure`` PSI, ``servo_rate`` degrees/second.
    """

    pump_flow_rate: float = DEFAULT_PUMP_FLOW_RATE
    inflatable_volume: float = DEFAULT_INFLATABLE_VOLUME
    deflate_full_time: float = DEFAULT_DEFLATE_FULL_TIME
    pump_stall_pressure: float = DEFAULT_STALL_PRESSURE
    max_pressure: float = DEFAULT_MAX_PRESSURE
    servo_rate: float = DEFAULT_SERVO_RATE
    servo_pins: tuple[int, ...] = (10, 11, 12)
    manifold: ManifoldTopology = field(default_factory=ManifoldTopology)

    def __post_init__(self) -> None:
        object.__setattr__(self, "servo_pins", tuple(self.servo_pins))
        for name in ("pump_flow_rate", "inflatable_volume", "deflate_full_time",
                     "max_pressure", "servo_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.servo_pins) != NUM_SERVOS:
            raise ValueError(f"expected {NUM_SERVOS} servo pins, got {len(self.servo_pins)}")
        overlap = set(self.servo_pins) & set(self.manifold.actuator_pins)
        if overlap or len(set(self.servo_pins)) != NUM_SERVOS:
            raise ValueError(f"servo pins {self.servo_pins} collide with other assignments")

    @property
    def fill_rate(self) -> float:
        """Fill fraction gained per second while inflating."""
        return self.pump_flow_rate / 60.0 / self.inflatable_volume

    @property
    def drain_rate(self) -> float:
        """Fill fraction lost per second while deflating."""
        return 1.0 / self.deflate_full_time

    @property
    def full_inflate_time(self) -> float:
        """Closed-form empty-to-full time, volume / (flow/60)."""
        return self.inflatable_volume / (self.pump_flow_rate / 60.0)

    def to_dict(self) -> dict:
        return {
            "pump_flow_rate": self.pump_flow_rate,
            "inflatable_volume": self.inflatable_volume,
            "deflate_full_time": self.deflate_full_time,
            "pump_stall_pressure": self.pump_stall_pressure,
            "max_pressure": self.max_pressure,
            "servo_rate": self.servo_rate,
            "servo_pins": list(self.servo_pins),
            "manifold": self.manifold.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PneumaticConfig":
        kwargs = {f: data[f] for f in (
            "pump_flow_rate", "inflatable_volume", "deflate_full_time",
            "pump_stall_pressure", "max_pressure", "servo_rate", "servo_pins",
        ) if f in data}
        if "manifold" in data:
            kwargs["manifold"] = ManifoldTopology.from_dict(data["manifold"])
        return cls(**kwargs)


def pressure_of(fill: float, max_pressure: float = DEFAULT_MAX_PRESSURE) -> float:
    """Bladder pressure in PSI for a fill fraction; linear, zero at empty."""
    if not 0.0 <= fill <= 1.0:
        raise OutOfRangeFillError(f"fill fraction {fill} outside [0, 1]")
    return max_pressure * fill


@dataclass
class ServoModel:
    """One servo arm: current angle slews toward target at a fixed rate."""

    angular_rate: float = DEFAULT_SERVO_RATE
    angle: float = 0.0
    target: float = 0.0

    def __post_init__(self) -> None:
        if self.angular_rate <= 0:
            raise ValueError("angular_rate must be positive")
        if not 0.0 <= self.angle <= 180.0 or not 0.0 <= self.target <= 180.0:
            raise ValueError("servo angles must stay within [0, 180]")


@dataclass
class InflatableState:
    fill: float = 0.0
    pressure: float = 0.0


def open_paths(pins: Mapping[int, int], manifold: ManifoldTopology) -> list[tuple[bool, bool]]:
    """Valve-level (inflate_open, deflate_open) per bladder, pumps ignored.

    A bladder with no gate valve is permanently connected; with no selector
    valve both manifold sides are live at once.
    """
    selector = manifold.selector_pins
    inflate_live = all(pins.get(p, 0) == 0 for p in selector)
    deflate_live = all(pins.get(p, 0) == 1 for p in selector)
    paths = []
    for i in range(1, NUM_INFLATABLES + 1):
        connected = all(pins.get(p, 0) == 1 for p in manifold.gate_pins(i))
        paths.append((connected and inflate_live, connected and deflate_live))
    return paths


def flows(pins: Mapping[int, int], manifold: ManifoldTopology) -> list[tuple[bool, bool]]:
    """(inflating, deflating) per bladder: open path AND its pump running."""
    pump_in = pins.get(manifold.inflate_pump_pin, 0) == 1
    pump_out = pins.get(manifold.deflate_pump_pin, 0) == 1
    return [(inf and pump_in, def_ and pump_out) for inf, def_ in open_paths(pins, manifold)]


class DeviceState:
    """Full emulated hardware state advanced on a single logical timeline.

    The value is owned by one stepping context; it may be handed between
    threads but is not safe for unsynchronized shared mutation.
    """

    def __init__(self, config: PneumaticConfig | None = None):
        self.config = config or PneumaticConfig()
        self.clock = 0.0
        self.pins: dict[int, int] = {}
        self.servos = [ServoModel(angular_rate=self.config.servo_rate) for _ in range(NUM_SERVOS)]
        self.inflatables = [InflatableState() for _ in range(NUM_INFLATABLES)]

    def apply_batch(self, cmd: BatchCommand) -> None:
        """Set digital pins from a batch; later duplicates override earlier.

        Pins outside the actuator map are stored but have no physical
        effect. Nothing moves until :meth:`step`.
        """
        for pin, state in cmd.entries:
            self.pins[pin] = state

    def apply_servo(self, cmd: ServoCommand) -> None:
        """Retarget the servo wired to the command's pin; angle is unchanged."""
        try:
            channel = self.config.servo_pins.index(cmd.pin)
        except ValueError:
            raise UnknownServoPinError(
                f"pin {cmd.pin:02d} is not one of the servo pins {self.config.servo_pins}"
            ) from None
        self.servos[channel].target = float(cmd.angle)

    def step(self, dt: float) -> list[str]:
        """Advance the plant by dt seconds; returns warning annotations.

        Opposed simultaneous flows into one bladder integrate at the net
        rate and are flagged, since no sane command sequence produces them.
        """
        if not 0.0 < dt <= MAX_TIMESTEP + 1e-12:
            raise InvalidTimestepError(f"dt must be in (0, {MAX_TIMESTEP}], got {dt}")
        events: list[str] = []
        cfg = self.config
        for i, (inflating, deflating) in enumerate(flows(self.pins, cfg.manifold)):
            rate = 0.0
            if inflating:
                rate += cfg.fill_rate
            if deflating:
                rate -= cfg.drain_rate
            if inflating and deflating:
                events.append(f"inflate_deflate_conflict:{i + 1}")
            bladder = self.inflatables[i]
            bladder.fill = _clamp(bladder.fill + rate * dt, 0.0, 1.0)
            bladder.pressure = pressure_of(bladder.fill, cfg.max_pressure)
        for servo in self.servos:
            delta = _clamp(servo.target - servo.angle, -servo.angular_rate * dt,
                           servo.angular_rate * dt)
            servo.angle += delta
        self.clock += dt
        return events

    # Convenience views used by telemetry and tests.
    def fills(self) -> tuple[float, ...]:
        return tuple(b.fill for b in self.inflatables)

    def pressures(self) -> tuple[float, ...]:
        return tuple(b.pressure for b in self.inflatables)

    def servo_angles(self) -> tuple[float, ...]:
        return tuple(s.angle for s in self.servos)

    def servo_targets(self) -> tuple[float, ...]:
        return tuple(s.target for s in self.servos)

    def pin_map(self) -> tuple[tuple[int, int], ...]:
        """All actuator pins (always present) plus any other stored pins."""
        merged = {p: 0 for p in self.config.manifold.actuator_pins}
        merged.update(self.pins)
        return tuple(sorted(merged.items()))


def apply_batch(state: DeviceState, cmd: BatchCommand) -> DeviceState:
    state.apply_batch(cmd)
    return state


def apply_servo(state: DeviceState, cmd: ServoCommand) -> DeviceState:
    state.apply_servo(cmd)
    return state


def step(state: DeviceState, dt: float) -> DeviceState:
    state.step(dt)
    return state
