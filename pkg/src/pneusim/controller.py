"""Host-side closed-loop policy: hand pose + scene state -> wire commands.

Per control period the controller

* tracks which objects sit inside the ready radius, parks their servo at
  the ready angle and opens their bladder's gate valve;
* grabs the closest object within trigger range (interaction radius plus
  delta distance, ties broken by lowest id), drives its servo to the
  grasp angle and starts inflation according to the object's mode;
* on withdrawal sends the bitwise complement of the inflation batch,
  which swaps the manifold to the deflate pump and drains the bladder,
  and returns the servo to the ready angle.

Gate valves are deliberately commanded on ready entry/exit rather than
inside inflation batches: a gate bit inside the batch would be flipped by
the release inversion, sealing the bladder instead of deflating it.

The device has no pressure sensor, so the controller integrates its own
open-loop fill estimate from the durations it has commanded; timed pump
pulses (variable inflation, deflate-to-empty) are scheduled against that
estimate. While hand tracking is lost all outputs freeze.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

from . import pneumodel
from .pneumodel import ManifoldTopology, PneumaticConfig
from .protocol import MAX_ANGLE, BatchCommand, ServoCommand, encode_batch
from .telemetry import EventRecord

INFLATE = "inflate"
DEFLATE = "deflate"
HOLD = "hold"

_EPS = 1e-9

Command = Union[BatchCommand, ServoCommand]


class ControllerError(ValueError):
    reason = "controller_error"


class DuplicateObjectIdError(ControllerError):
    reason = "duplicate_object_id"


class LevelOutOfRangeError(ControllerError):
    reason = "level_out_of_range"


@dataclass(frozen=True)
class Binary:
    """Full inflation on grab, full deflation on release."""


@dataclass(frozen=True)
class Variable:
    """Timed-pulse inflation to a designer-set level in [0, 1]."""

    level: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.level <= 1.0:
            raise LevelOutOfRangeError(f"inflation level {self.level} outside [0, 1]")


@dataclass(frozen=True)
class Squeeze:
    """Fill follows the index finger curl: open hand = full, closed = empty."""

    open_distance: float
    closed_distance: float

    def __post_init__(self) -> None:
        if not self.open_distance > self.closed_distance > 0:
            raise ValueError("squeeze needs open_distance > closed_distance > 0")


InflationMode = Union[Binary, Variable, Squeeze]


@dataclass
class VirtualObject:
    """A scene object bound to one servo arm and one bladder channel."""

    id: str
    position: tuple[float, float, float]
    interaction_radius: float
    interaction_name: str = ""
    servo_channel: int = 1
    inflatable_channel: int = 1
    mode: InflationMode = field(default_factory=Binary)
    pluckable: bool = False

    def __post_init__(self) -> None:
        self.position = tuple(float(c) for c in self.position)
        if self.interaction_radius <= 0:
            raise ValueError("interaction_radius must be positive")
        for name in ("servo_channel", "inflatable_channel"):
            if getattr(self, name) not in (1, 2, 3):
                raise ValueError(f"{name} must be 1, 2 or 3")


@dataclass(frozen=True)
class HandPose:
    """Timestamped hand position plus the finger-curl squeeze signal."""

    time: float
    position: tuple[float, float, float]
    index_tip_knuckle_distance: float = 0.10
    tracked: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        if self.index_tip_knuckle_distance < 0:
            raise ValueError("tip-to-knuckle distance cannot be negative")


@dataclass(frozen=True)
class ControllerConfig:
    """Tunables of the policy loop; distances in meters, angles in degrees."""

    delta_distance: float = 0.01
    ready_radius: float = 0.10
    ready_angle: int = 0
    grasp_angle: int = 60
    full_inflate_time: float = 0.2
    full_deflate_time: float = 1.0
    deadband: float = 0.05
    control_period: float = 0.01

    def __post_init__(self) -> None:
        if not 0 < self.delta_distance < self.ready_radius:
            raise ValueError("need 0 < delta_distance < ready_radius")
        for name in ("ready_angle", "grasp_angle"):
            if not 0 <= getattr(self, name) <= MAX_ANGLE:
                raise ValueError(f"{name} must be within [0, {MAX_ANGLE}]")
        for name in ("full_inflate_time", "full_deflate_time", "control_period"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.deadband < 1:
            raise ValueError("deadband must be within [0, 1)")

    def to_dict(self) -> dict:
        return {
            "delta_distance": self.delta_distance,
            "ready_radius": self.ready_radius,
            "ready_angle": self.ready_angle,
            "grasp_angle": self.grasp_angle,
            "full_inflate_time": self.full_inflate_time,
            "full_deflate_time": self.full_deflate_time,
            "deadband": self.deadband,
            "control_period": self.control_period,
        }

    @classmethod
    def from_dict(cls, data) -> "ControllerConfig":
        known = {f: data[f] for f in (
            "delta_distance", "ready_radius", "ready_angle", "grasp_angle",
            "full_inflate_time", "full_deflate_time", "deadband", "control_period",
        ) if f in data}
        return cls(**known)


@dataclass
class Pulse:
    """A scheduled pump stop on one bladder channel."""

    channel: int
    end_time: float
    pump_pin: int
    kind: str  # "inflate_stop" | "deflate_stop"


@dataclass
class ControllerState:
    """Mutable loop state; owned by one Controller instance."""

    ready: dict[int, set[str]] = field(default_factory=lambda: {1: set(), 2: set(), 3: set()})
    grabbed: str | None = None
    grabbed_servo_channel: int = 0
    grabbed_inflatable_channel: int = 0
    pin_cache: dict[int, int] = field(default_factory=dict)
    servo_cache: dict[int, int] = field(default_factory=dict)
    fill_estimates: dict[int, float] = field(default_factory=lambda: {1: 0.0, 2: 0.0, 3: 0.0})
    pending_pulses: dict[int, Pulse] = field(default_factory=dict)
    inflation_batches: dict[str, BatchCommand] = field(default_factory=dict)
    commanded_levels: dict[str, float] = field(default_factory=dict)
    pump_intent: dict[int, str] = field(default_factory=lambda: {1: HOLD, 2: HOLD, 3: HOLD})
    last_now: float | None = None
    pluck_pending: bool = False
    pluck_return: tuple[int, int, float] | None = None  # (servo channel, angle, at time)


def distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def inflate_batch(manifold: ManifoldTopology) -> BatchCommand:
    """Selector to the inflate pump, inflate pump on, deflate pump off."""
    entries = [(p, 0) for p in manifold.selector_pins]
    entries += [(manifold.inflate_pump_pin, 1), (manifold.deflate_pump_pin, 0)]
    return BatchCommand(tuple(entries))


def invert_batch(cmd: BatchCommand) -> BatchCommand:
    """Bitwise complement of every state; same pins, same order."""
    return BatchCommand(tuple((pin, 1 - state) for pin, state in cmd.entries))


def deflate_batch(manifold: ManifoldTopology) -> BatchCommand:
    return invert_batch(inflate_batch(manifold))


def hold_batch(manifold: ManifoldTopology) -> BatchCommand:
    return BatchCommand(((manifold.inflate_pump_pin, 0), (manifold.deflate_pump_pin, 0)))


def squeeze_target(hand: HandPose, mode: Squeeze) -> float:
    """Target fill from finger curl: 1 - clamp((open - d) / (open - closed))."""
    span = mode.open_distance - mode.closed_distance
    curl = (mode.open_distance - hand.index_tip_knuckle_distance) / span
    curl = min(1.0, max(0.0, curl))
    return 1.0 - curl


def track_to_target(current_fill_estimate: float, target: float, deadband: float = 0.05) -> str:
    """Pump intent keeping the estimate within a deadband of the target.

    The tiny epsilon keeps the boundary decision stable against float
    noise in the accumulated estimate.
    """
    if target - current_fill_estimate > deadband + _EPS:
        return INFLATE
    if current_fill_estimate - target > deadband + _EPS:
        return DEFLATE
    return HOLD


def plan_variable_inflation(
    level: float,
    config: ControllerConfig,
    now: float,
    manifold: ManifoldTopology | None = None,
) -> tuple[BatchCommand | None, float]:
    """Plan a timed inflation pulse from empty to the requested level.

    Returns the inflate batch (None for a zero-duration pulse) and the
    time at which the stop batch is due.
    """
    if not 0.0 <= level <= 1.0:
        raise LevelOutOfRangeError(f"inflation level {level} outside [0, 1]")
    duration = level * config.full_inflate_time
    if duration <= _EPS:
        return None, now
    return inflate_batch(manifold or ManifoldTopology()), now + duration


def pluck_nudge(
    servo_channel: int,
    config: ControllerConfig,
    servo_pins: Sequence[int] = (10, 11, 12),
) -> ServoCommand:
    """One-shot 2-degree press past the grasp angle, clamped to the limit."""
    angle = min(config.grasp_angle + 2, MAX_ANGLE)
    return ServoCommand(servo_pins[servo_channel - 1], angle)


class Controller:
    """One policy loop instance; call :meth:`update` once per control period."""

    def __init__(self, config: ControllerConfig | None = None,
                 device: PneumaticConfig | None = None):
        self.config = config or ControllerConfig()
        self.device = device or PneumaticConfig()
        self.manifold = self.device.manifold
        self.state = ControllerState()
        self._events: list[EventRecord] = []

    # -- public surface ----------------------------------------------------

    def update(self, hand: HandPose, objects: Sequence[VirtualObject], now: float) -> list[Command]:
        """Advance the loop one period; returns the commands to transmit.

        Deterministic: identical (state, hand, objects, now) inputs produce
        identical command lists. Consecutive updates with unchanged intent
        emit nothing.
        """
        st = self.state
        ids = [o.id for o in objects]
        if len(set(ids)) != len(ids):
            raise DuplicateObjectIdError(f"object ids must be distinct, got {sorted(ids)}")
        if st.last_now is not None and now < st.last_now - _EPS:
            raise ValueError(f"time went backwards: {now} < {st.last_now}")

        elapsed = 0.0 if st.last_now is None else max(0.0, now - st.last_now)
        self._integrate_estimates(elapsed)
        st.last_now = now

        cmds: list[Command] = []
        if not hand.tracked:
            # Tracking dropout: freeze every output, including pulse stops.
            return cmds

        by_id = {o.id: o for o in objects}
        dist = {o.id: distance(hand.position, o.position) for o in objects}

        self._fire_due_pulses(now, objects, dist, cmds)
        self._service_pluck_return(now, cmds)
        self._update_ready_sets(now, objects, dist, cmds)

        candidates = [
            o for o in objects
            if dist[o.id] <= o.interaction_radius + self.config.delta_distance
        ]
        target = min(candidates, key=lambda o: (dist[o.id], o.id)) if candidates else None
        if st.grabbed is not None and (target is None or target.id != st.grabbed):
            self._release(by_id.get(st.grabbed), now, objects, dist, cmds)
        if target is not None and st.grabbed is None:
            self._grab(target, now, cmds)

        if st.grabbed is not None:
            obj = by_id[st.grabbed]
            if isinstance(obj.mode, Squeeze):
                fill_target = squeeze_target(hand, obj.mode)
                intent = track_to_target(
                    st.fill_estimates[obj.inflatable_channel], fill_target, self.config.deadband)
                self._set_pump_intent(obj, intent, now, cmds)
            elif isinstance(obj.mode, Variable) and \
                    st.commanded_levels.get(obj.id) != obj.mode.level:
                self._correct_level(obj, now, cmds)

        if st.pluck_pending:
            st.pluck_pending = False
            if st.grabbed is not None and by_id[st.grabbed].pluckable:
                obj = by_id[st.grabbed]
                nudge = pluck_nudge(obj.servo_channel, self.config, self.device.servo_pins)
                self._emit_servo(obj.servo_channel, nudge.angle, cmds)
                st.pluck_return = (
                    obj.servo_channel, self.config.grasp_angle, now + self.config.control_period)
                self._event(now, "pluck", obj.id, obj.servo_channel, str(nudge.angle))
        return cmds

    def request_pluck(self) -> None:
        """Queue a pluck nudge; ignored unless a pluckable object is grabbed."""
        self.state.pluck_pending = True

    def drain_events(self) -> list[EventRecord]:
        events, self._events = self._events, []
        return events

    # -- internals -----------------------------------------------------------

    def _event(self, now: float, kind: str, object_id: str = "", channel: int = 0,
               detail: str = "") -> None:
        self._events.append(EventRecord(now, kind, object_id, channel, detail))

    def _integrate_estimates(self, elapsed: float) -> None:
        if elapsed <= 0.0:
            return
        st = self.state
        for ch, (inflating, deflating) in enumerate(
                pneumodel.flows(st.pin_cache, self.manifold), start=1):
            est = st.fill_estimates[ch]
            if inflating:
                est += elapsed / self.config.full_inflate_time
            if deflating:
                est -= elapsed / self.config.full_deflate_time
            st.fill_estimates[ch] = min(1.0, max(0.0, est))

    def _emit_batch(self, batch: BatchCommand, cmds: list[Command]) -> bool:
        """Send the full batch unless every pin already sits at its value."""
        st = self.state
        if all(st.pin_cache.get(p, 0) == s for p, s in batch.entries):
            return False
        cmds.append(batch)
        for p, s in batch.entries:
            st.pin_cache[p] = s
        return True

    def _emit_servo(self, channel: int, angle: int, cmds: list[Command]) -> bool:
        st = self.state
        if st.servo_cache.get(channel) == angle:
            return False
        cmds.append(ServoCommand(self.device.servo_pins[channel - 1], angle))
        st.servo_cache[channel] = angle
        return True

    def _gate_entries(self, channel: int, open_: bool) -> list[tuple[int, int]]:
        return [(p, 1 if open_ else 0) for p in self.manifold.gate_pins(channel)]

    def _channel_in_use(self, channel: int, objects, dist) -> bool:
        """A gate stays open while its channel serves a ready or grabbed object."""
        st = self.state
        if st.grabbed is not None and st.grabbed_inflatable_channel == channel:
            return True
        return any(
            o.inflatable_channel == channel and dist[o.id] <= self.config.ready_radius
            for o in objects
        )

    def _fire_due_pulses(self, now, objects, dist, cmds) -> None:
        st = self.state
        for ch in sorted(st.pending_pulses):
            pulse = st.pending_pulses[ch]
            if now < pulse.end_time - _EPS:
                continue
            entries = [(pulse.pump_pin, 0)]
            if not self._channel_in_use(ch, objects, dist):
                entries += self._gate_entries(ch, open_=False)
            self._emit_batch(BatchCommand(tuple(entries)), cmds)
            self._event(now, "pulse_end", "", ch, pulse.kind)
            del st.pending_pulses[ch]
            st.pump_intent[ch] = HOLD

    def _service_pluck_return(self, now, cmds) -> None:
        st = self.state
        if st.pluck_return is not None and now >= st.pluck_return[2] - _EPS:
            channel, angle, _ = st.pluck_return
            self._emit_servo(channel, angle, cmds)
            st.pluck_return = None

    def _update_ready_sets(self, now, objects, dist, cmds) -> None:
        st = self.state
        for obj in sorted(objects, key=lambda o: o.id):
            in_ready = dist[obj.id] <= self.config.ready_radius
            was_ready = obj.id in st.ready[obj.servo_channel]
            if in_ready and not was_ready:
                st.ready[obj.servo_channel].add(obj.id)
                gates = self._gate_entries(obj.inflatable_channel, open_=True)
                if gates:
                    self._emit_batch(BatchCommand(tuple(gates)), cmds)
                self._emit_servo(obj.servo_channel, self.config.ready_angle, cmds)
                self._event(now, "ready_entered", obj.id, obj.servo_channel)
            elif not in_ready and was_ready:
                st.ready[obj.servo_channel].discard(obj.id)
                ch = obj.inflatable_channel
                # Keep the gate open while a drain is still scheduled.
                if ch not in st.pending_pulses and not self._channel_in_use(ch, objects, dist):
                    gates = self._gate_entries(ch, open_=False)
                    if gates:
                        self._emit_batch(BatchCommand(tuple(gates)), cmds)

    def _grab(self, obj: VirtualObject, now, cmds) -> None:
        st = self.state
        st.grabbed = obj.id
        st.grabbed_servo_channel = obj.servo_channel
        st.grabbed_inflatable_channel = obj.inflatable_channel
        ch = obj.inflatable_channel
        self._emit_servo(obj.servo_channel, self.config.grasp_angle, cmds)

        level = 1.0
        if isinstance(obj.mode, Variable):
            level = obj.mode.level
        planned: BatchCommand | None = None
        if level > _EPS:
            planned = inflate_batch(self.manifold)
            st.inflation_batches[obj.id] = planned
        st.commanded_levels[obj.id] = level
        self._event(now, "grabbed", obj.id, obj.servo_channel,
                    encode_batch(planned) if planned else "")

        if isinstance(obj.mode, Squeeze):
            return  # the tracking loop takes over from this same update
        delta = level - st.fill_estimates[ch]
        if delta > _EPS and planned is not None:
            self._emit_batch(planned, cmds)
            st.pending_pulses[ch] = Pulse(
                ch, now + delta * self.config.full_inflate_time,
                self.manifold.inflate_pump_pin, "inflate_stop")
            self._event(now, "inflate_start", obj.id, ch, _mode_name(obj.mode))

    def _release(self, obj, now, objects, dist, cmds) -> None:
        st = self.state
        object_id = st.grabbed
        servo_ch = st.grabbed_servo_channel
        ch = st.grabbed_inflatable_channel
        st.grabbed = None
        batch = st.inflation_batches.pop(object_id, None)
        inverted = invert_batch(batch) if batch is not None else None
        self._event(now, "released", object_id, servo_ch,
                    encode_batch(inverted) if inverted else "")
        if inverted is not None:
            self._emit_batch(inverted, cmds)
            st.pending_pulses[ch] = Pulse(
                ch, now + st.fill_estimates[ch] * self.config.full_deflate_time,
                self.manifold.deflate_pump_pin, "deflate_stop")
            st.pump_intent[ch] = DEFLATE
            mode = _mode_name(obj.mode) if obj is not None else ""
            self._event(now, "deflate_start", object_id, ch, mode)
        self._emit_servo(servo_ch, self.config.ready_angle, cmds)
        st.commanded_levels.pop(object_id, None)

    def _correct_level(self, obj: VirtualObject, now, cmds) -> None:
        """Chase a changed variable level with a timed correction pulse."""
        st = self.state
        ch = obj.inflatable_channel
        level = obj.mode.level
        delta = level - st.fill_estimates[ch]
        if delta > _EPS:
            self._emit_batch(inflate_batch(self.manifold), cmds)
            st.pending_pulses[ch] = Pulse(
                ch, now + delta * self.config.full_inflate_time,
                self.manifold.inflate_pump_pin, "inflate_stop")
            self._event(now, "inflate_start", obj.id, ch, _mode_name(obj.mode))
        elif delta < -_EPS:
            self._emit_batch(deflate_batch(self.manifold), cmds)
            st.pending_pulses[ch] = Pulse(
                ch, now + (-delta) * self.config.full_deflate_time,
                self.manifold.deflate_pump_pin, "deflate_stop")
            self._event(now, "deflate_start", obj.id, ch, _mode_name(obj.mode))
        if obj.id not in st.inflation_batches and level > _EPS:
            st.inflation_batches[obj.id] = inflate_batch(self.manifold)
        st.commanded_levels[obj.id] = level

    def _set_pump_intent(self, obj: VirtualObject, intent: str, now, cmds) -> None:
        st = self.state
        ch = obj.inflatable_channel
        current = st.pump_intent[ch]
        if intent == current:
            return
        if intent == INFLATE:
            self._emit_batch(inflate_batch(self.manifold), cmds)
            self._event(now, "inflate_start", obj.id, ch, _mode_name(obj.mode))
        elif intent == DEFLATE:
            self._emit_batch(deflate_batch(self.manifold), cmds)
            self._event(now, "deflate_start", obj.id, ch, _mode_name(obj.mode))
        else:
            self._emit_batch(hold_batch(self.manifold), cmds)
            kind = "inflate_stop" if current == INFLATE else "deflate_stop"
            self._event(now, kind, obj.id, ch, _mode_name(obj.mode))
        st.pump_intent[ch] = intent


def _mode_name(mode: InflationMode) -> str:
    return f"mode={type(mode).__name__.lower()}"
