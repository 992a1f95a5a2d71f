"""Deterministic scenario player: scripted hand trajectories vs the emulator.

A scenario bundles a scene (objects bound to actuation channels), a
keyframed hand trajectory, optional scripted actions (pluck nudges,
inflation-level changes) and the events it is expected to produce. The
runner interpolates the hand linearly between keyframes, runs the
controller once per control period, advances the firmware physics in
lock-step, and returns the full telemetry trace plus the event log.

Built-in scenarios cover the device's demo minigames: four spheres of
graded stiffness, squeeze-driven inflation, shape sorting across the
three channels, an overhand and an underhand throw, and a garden of
pluckable, shape-changing produce. Object spacing is a plausible
reconstruction, not a measured layout.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

from .controller import (
    Binary,
    Controller,
    ControllerConfig,
    HandPose,
    InflationMode,
    Squeeze,
    Variable,
    VirtualObject,
)
from .firmware import DeviceService, HttpClient, LocalClient
from .pneumodel import PneumaticConfig
from .protocol import BatchCommand, encode_batch, encode_servo
from .telemetry import EventRecord, TelemetrySample


class ScenarioInvalidError(ValueError):
    """The scenario definition violates its own schema."""


@dataclass(frozen=True)
class ScenarioAction:
    """A scripted trigger the hand trajectory alone cannot express."""

    time: float
    kind: str  # "pluck" | "set_level"
    object_id: str = ""
    level: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("pluck", "set_level"):
            raise ScenarioInvalidError(f"unknown action kind {self.kind!r}")


@dataclass(frozen=True)
class ExpectedEvent:
    """An event kind that must occur inside a time window."""

    kind: str
    t_min: float
    t_max: float
    object_id: str = ""  # empty matches any object

    def matches(self, event: EventRecord) -> bool:
        return (
            event.kind == self.kind
            and (not self.object_id or event.object_id == self.object_id)
            and self.t_min - 1e-9 <= event.time <= self.t_max + 1e-9
        )


@dataclass
class Scenario:
    name: str
    objects: list[VirtualObject]
    trajectory: list[HandPose]
    duration: float
    controller_config: ControllerConfig = field(default_factory=ControllerConfig)
    expected_events: list[ExpectedEvent] = field(default_factory=list)
    actions: list[ScenarioAction] = field(default_factory=list)

    def validate(self) -> None:
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ScenarioInvalidError(f"duplicate object ids in {self.name!r}")
        times = [p.time for p in self.trajectory]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ScenarioInvalidError(f"trajectory keyframes out of order in {self.name!r}")
        if self.trajectory and self.duration < times[-1]:
            raise ScenarioInvalidError(
                f"duration {self.duration} ends before the last keyframe ({times[-1]})")
        if self.duration < 0:
            raise ScenarioInvalidError("duration cannot be negative")


@dataclass
class ScenarioResult:
    scenario_name: str
    samples: list[TelemetrySample]
    events: list[EventRecord]
    commands: list[tuple[float, str]]
    missing_expected: list[ExpectedEvent]

    @property
    def matched(self) -> bool:
        return not self.missing_expected

    def events_of(self, kind: str) -> list[EventRecord]:
        return [e for e in self.events if e.kind == kind]


def interpolate_pose(trajectory: Sequence[HandPose], t: float) -> HandPose:
    """Linear interpolation between keyframes; clamped at both ends.

    The tracked flag is carried from the segment's start keyframe.
    """
    if not trajectory:
        return HandPose(time=t, position=(0.0, 0.0, 0.0))
    if t <= trajectory[0].time:
        return replace(trajectory[0], time=t)
    if t >= trajectory[-1].time:
        return replace(trajectory[-1], time=t)
    for before, after in zip(trajectory, trajectory[1:]):
        if before.time <= t <= after.time:
            span = after.time - before.time
            frac = 0.0 if span <= 0 else (t - before.time) / span
            position = tuple(
                a + (b - a) * frac for a, b in zip(before.position, after.position))
            dist = (before.index_tip_knuckle_distance
                    + (after.index_tip_knuckle_distance - before.index_tip_knuckle_distance) * frac)
            return HandPose(t, position, dist, before.tracked)
    return replace(trajectory[-1], time=t)


def make_client(endpoint) -> Union[LocalClient, HttpClient]:
    if isinstance(endpoint, (LocalClient, HttpClient)):
        return endpoint
    if isinstance(endpoint, DeviceService):
        return LocalClient(endpoint)
    if isinstance(endpoint, str):
        return HttpClient(endpoint)
    raise TypeError(f"cannot build a firmware client from {type(endpoint).__name__}")


def run_scenario(
    scenario: Scenario,
    endpoint,
    device_config: PneumaticConfig | None = None,
) -> ScenarioResult:
    """Drive the scenario against a firmware endpoint in lock-step.

    ``endpoint`` may be a DeviceService (in-process, fully deterministic,
    sampled every physics substep), an existing client, or a base URL.
    """
    scenario.validate()
    client = make_client(endpoint)
    if isinstance(client, LocalClient):
        device_config = client.service.config
    device_config = device_config or PneumaticConfig()

    objects = copy.deepcopy(scenario.objects)
    by_id = {o.id: o for o in objects}
    cc = scenario.controller_config
    ctrl = Controller(cc, device_config)

    samples: list[TelemetrySample] = []
    events: list[EventRecord] = []
    commands: list[tuple[float, str]] = []
    pending = sorted(scenario.actions, key=lambda a: (a.time, a.kind, a.object_id))
    prev_sample = client.telemetry()

    steps = int(round(scenario.duration / cc.control_period))
    for i in range(steps):
        now = i * cc.control_period
        pose = interpolate_pose(scenario.trajectory, now)
        while pending and pending[0].time <= now + 1e-9:
            action = pending.pop(0)
            if action.kind == "pluck":
                ctrl.request_pluck()
            else:
                obj = by_id.get(action.object_id)
                if obj is None:
                    raise ScenarioInvalidError(
                        f"action targets unknown object {action.object_id!r}")
                obj.mode = Variable(action.level)
        for cmd in ctrl.update(pose, objects, now):
            encoded = encode_batch(cmd) if isinstance(cmd, BatchCommand) else encode_servo(cmd)
            commands.append((now, encoded))
            status, body = client.send(encoded)
            if status != 200:
                raise RuntimeError(f"firmware rejected {encoded!r}: {body}")
        new_events = ctrl.drain_events()
        events.extend(new_events)

        step_samples = client.step(cc.control_period)
        for sample in step_samples:
            for ch in range(3):
                arrived = (prev_sample.servo_angles[ch] != prev_sample.servo_targets[ch]
                           and sample.servo_angles[ch] == sample.servo_targets[ch])
                if arrived:
                    events.append(EventRecord(
                        sample.time, "servo_arrived", "", ch + 1,
                        f"{sample.servo_angles[ch]:g}"))
            for warning in sample.events:
                events.append(EventRecord(sample.time, "warning", "", 0, warning))
            prev_sample = sample
        if step_samples and new_events:
            step_samples[0] = step_samples[0].annotated(e.label() for e in new_events)
        samples.extend(step_samples)

    missing = [exp for exp in scenario.expected_events
               if not any(exp.matches(e) for e in events)]
    return ScenarioResult(scenario.name, samples, events, commands, missing)


# -- built-in scenarios ------------------------------------------------------

_TABLE_Y = 0.80
_TABLE_Z = 0.40
_HOVER = 0.30  # approach height above an object; outside the ready radius


def _approach_block(x: float, t0: float, dwell_until: float, t_out: float) -> list[HandPose]:
    """Hover above (x, table), descend to the object center, dwell, retreat."""
    return [
        HandPose(t0, (x, _TABLE_Y + _HOVER, _TABLE_Z)),
        HandPose(t0 + 1.0, (x, _TABLE_Y, _TABLE_Z)),
        HandPose(dwell_until, (x, _TABLE_Y, _TABLE_Z)),
        HandPose(t_out, (x, _TABLE_Y + _HOVER, _TABLE_Z)),
    ]


def variable_stiffness_scenario() -> Scenario:
    """Four identical spheres at graded inflation levels 1.0/0.5/0.1/0.0."""
    levels = [("ball_max", 1.0, 1), ("ball_medium", 0.5, 2),
              ("ball_low", 0.1, 3), ("ball_min", 0.0, 1)]
    xs = [-0.30, -0.10, 0.10, 0.30]
    objects = [
        VirtualObject(
            id=name, interaction_name=f"sphere level {level:g}",
            position=(x, _TABLE_Y, _TABLE_Z), interaction_radius=0.035,
            servo_channel=ch, inflatable_channel=ch, mode=Variable(level))
        for (name, level, ch), x in zip(levels, xs)
    ]
    trajectory: list[HandPose] = []
    expected: list[ExpectedEvent] = []
    for k, ((name, level, _ch), x) in enumerate(zip(levels, xs)):
        t0 = 3.5 * k
        trajectory += _approach_block(x, t0, t0 + 2.2, t0 + 3.2)
        expected.append(ExpectedEvent("ready_entered", t0 + 0.6, t0 + 0.8, name))
        expected.append(ExpectedEvent("grabbed", t0 + 0.8, t0 + 1.0, name))
        expected.append(ExpectedEvent("released", t0 + 2.3, t0 + 2.6, name))
        if level > 0:
            expected.append(ExpectedEvent("inflate_start", t0 + 0.8, t0 + 1.0, name))
    return Scenario("variable_stiffness", objects, trajectory, 14.0,
                    expected_events=expected)


def squeeze_scenario() -> Scenario:
    """One sphere whose fill follows the finger curl; never released."""
    ball = VirtualObject(
        id="ball_squeeze", interaction_name="squeeze ball",
        position=(0.0, _TABLE_Y, _TABLE_Z), interaction_radius=0.035,
        servo_channel=1, inflatable_channel=1,
        mode=Squeeze(open_distance=0.10, closed_distance=0.02))
    center = (0.0, _TABLE_Y, _TABLE_Z)
    trajectory = [
        HandPose(0.0, (0.0, _TABLE_Y + _HOVER, _TABLE_Z), 0.10),
        HandPose(1.0, center, 0.10),
        HandPose(2.0, center, 0.10),
        HandPose(2.5, center, 0.02),   # full curl
        HandPose(4.5, center, 0.02),
        HandPose(5.0, center, 0.10),   # reopen the hand
        HandPose(6.5, center, 0.10),
    ]
    expected = [
        ExpectedEvent("grabbed", 0.8, 1.0, "ball_squeeze"),
        ExpectedEvent("inflate_start", 0.8, 1.0, "ball_squeeze"),
        ExpectedEvent("deflate_start", 2.0, 2.6, "ball_squeeze"),
        ExpectedEvent("inflate_start", 4.5, 5.3, "ball_squeeze"),
    ]
    return Scenario("squeeze", [ball], trajectory, 6.5, expected_events=expected)


def sorting_scenario() -> Scenario:
    """Cylinder, cube and sphere sorted one after another on three channels."""
    shapes = [("cylinder", 0.030, 1, -0.20), ("cube", 0.035, 2, 0.0),
              ("sphere", 0.032, 3, 0.20)]
    objects = [
        VirtualObject(id=name, interaction_name=name,
                      position=(x, _TABLE_Y, _TABLE_Z), interaction_radius=r,
                      servo_channel=ch, inflatable_channel=ch)
        for name, r, ch, x in shapes
    ]
    trajectory: list[HandPose] = []
    expected: list[ExpectedEvent] = []
    for k, (name, _r, _ch, x) in enumerate(shapes):
        t0 = 3.5 * k
        trajectory += _approach_block(x, t0, t0 + 2.2, t0 + 3.2)
        expected.append(ExpectedEvent("grabbed", t0 + 0.8, t0 + 1.0, name))
        expected.append(ExpectedEvent("released", t0 + 2.3, t0 + 2.6, name))
    return Scenario("sorting", objects, trajectory, 10.5, expected_events=expected)


def _throw_scenario(name: str, fling_to: tuple[float, float, float]) -> Scenario:
    ball = VirtualObject(
        id="cue_ball", interaction_name="cue ball",
        position=(0.0, _TABLE_Y, _TABLE_Z), interaction_radius=0.035,
        servo_channel=1, inflatable_channel=1)
    center = (0.0, _TABLE_Y, _TABLE_Z)
    trajectory = [
        HandPose(0.0, (0.0, _TABLE_Y + _HOVER, _TABLE_Z)),
        HandPose(1.0, center),
        HandPose(2.0, center),
        HandPose(2.25, fling_to),  # the throw: a fast retreat
        HandPose(4.0, fling_to),
    ]
    expected = [
        ExpectedEvent("grabbed", 0.8, 1.0, "cue_ball"),
        ExpectedEvent("inflate_start", 0.8, 1.0, "cue_ball"),
        ExpectedEvent("released", 2.0, 2.1, "cue_ball"),
        ExpectedEvent("deflate_start", 2.0, 2.1, "cue_ball"),
        ExpectedEvent("pulse_end", 2.9, 3.2),
    ]
    return Scenario(name, [ball], trajectory, 4.0, expected_events=expected)


def overhand_throw_scenario() -> Scenario:
    return _throw_scenario("overhand_throw", (0.0, _TABLE_Y + 0.30, _TABLE_Z + 0.50))


def underhand_throw_scenario() -> Scenario:
    return _throw_scenario("underhand_throw", (0.50, _TABLE_Y - 0.10, _TABLE_Z + 0.40))


def magic_garden_scenario() -> Scenario:
    """Pluckable produce that changes shape between two inflation levels."""
    tomato = VirtualObject(
        id="tomato", interaction_name="tomato",
        position=(-0.15, _TABLE_Y + 0.10, _TABLE_Z), interaction_radius=0.033,
        servo_channel=1, inflatable_channel=1, mode=Variable(1.0), pluckable=True)
    chili = VirtualObject(
        id="chili", interaction_name="chili",
        position=(0.15, _TABLE_Y + 0.10, _TABLE_Z), interaction_radius=0.028,
        servo_channel=2, inflatable_channel=2, mode=Variable(0.4), pluckable=True)
    y = _TABLE_Y + 0.10
    trajectory = [
        HandPose(0.0, (-0.15, y + _HOVER, _TABLE_Z)),
        HandPose(1.0, (-0.15, y, _TABLE_Z)),
        HandPose(4.5, (-0.15, y, _TABLE_Z)),
        HandPose(5.5, (-0.15, y + _HOVER, _TABLE_Z)),
        HandPose(6.0, (0.15, y + _HOVER, _TABLE_Z)),
        HandPose(7.0, (0.15, y, _TABLE_Z)),
        HandPose(9.0, (0.15, y, _TABLE_Z)),
        HandPose(9.5, (0.15, y + _HOVER, _TABLE_Z)),
        HandPose(10.0, (0.15, y + _HOVER, _TABLE_Z)),
    ]
    actions = [
        ScenarioAction(2.0, "pluck"),
        ScenarioAction(3.0, "set_level", "tomato", 0.35),  # shrink: normal -> skinny
        ScenarioAction(8.0, "pluck"),
        ScenarioAction(8.5, "set_level", "chili", 1.0),    # grow: skinny -> normal
    ]
    expected = [
        ExpectedEvent("grabbed", 0.8, 1.0, "tomato"),
        ExpectedEvent("pluck", 2.0, 2.1, "tomato"),
        ExpectedEvent("deflate_start", 3.0, 3.1, "tomato"),
        ExpectedEvent("released", 4.6, 4.8, "tomato"),
        ExpectedEvent("grabbed", 6.8, 7.0, "chili"),
        ExpectedEvent("pluck", 8.0, 8.1, "chili"),
        ExpectedEvent("inflate_start", 8.5, 8.6, "chili"),
        ExpectedEvent("released", 9.0, 9.3, "chili"),
    ]
    return Scenario("magic_garden", [tomato, chili], trajectory, 10.0,
                    expected_events=expected, actions=actions)


def builtin_scenarios() -> list[Scenario]:
    return [
        variable_stiffness_scenario(),
        squeeze_scenario(),
        sorting_scenario(),
        overhand_throw_scenario(),
        underhand_throw_scenario(),
        magic_garden_scenario(),
    ]


BUILTIN_NAMES = tuple(s.name for s in builtin_scenarios())


def builtin_scenario(name: str) -> Scenario:
    for scenario in builtin_scenarios():
        if scenario.name == name:
            return scenario
    raise ScenarioInvalidError(
        f"unknown built-in scenario {name!r}; available: {', '.join(BUILTIN_NAMES)}")


# -- scenario file format -----------------------------------------------------

def _mode_to_dict(mode: InflationMode) -> dict:
    if isinstance(mode, Binary):
        return {"kind": "binary"}
    if isinstance(mode, Variable):
        return {"kind": "variable", "level": mode.level}
    return {"kind": "squeeze", "open_distance": mode.open_distance,
            "closed_distance": mode.closed_distance}


def _mode_from_dict(data: dict) -> InflationMode:
    kind = data.get("kind")
    if kind == "binary":
        return Binary()
    if kind == "variable":
        return Variable(data["level"])
    if kind == "squeeze":
        return Squeeze(data["open_distance"], data["closed_distance"])
    raise ScenarioInvalidError(f"unknown inflation mode {kind!r}")


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "name": scenario.name,
        "duration": scenario.duration,
        "controller": scenario.controller_config.to_dict(),
        "objects": [
            {
                "id": o.id,
                "interaction_name": o.interaction_name,
                "position": list(o.position),
                "interaction_radius": o.interaction_radius,
                "servo_channel": o.servo_channel,
                "inflatable_channel": o.inflatable_channel,
                "mode": _mode_to_dict(o.mode),
                "pluckable": o.pluckable,
            }
            for o in scenario.objects
        ],
        "trajectory": [
            {
                "time": p.time,
                "position": list(p.position),
                "squeeze_distance": p.index_tip_knuckle_distance,
                "tracked": p.tracked,
            }
            for p in scenario.trajectory
        ],
        "expected_events": [
            {"kind": e.kind, "t_min": e.t_min, "t_max": e.t_max, "object": e.object_id}
            for e in scenario.expected_events
        ],
        "actions": [
            {"time": a.time, "kind": a.kind, "object": a.object_id, "level": a.level}
            for a in scenario.actions
        ],
    }


def scenario_from_dict(data: dict) -> Scenario:
    try:
        scenario = Scenario(
            name=data["name"],
            objects=[
                VirtualObject(
                    id=o["id"],
                    interaction_name=o.get("interaction_name", ""),
                    position=tuple(o["position"]),
                    interaction_radius=o["interaction_radius"],
                    servo_channel=o.get("servo_channel", 1),
                    inflatable_channel=o.get("inflatable_channel", 1),
                    mode=_mode_from_dict(o.get("mode", {"kind": "binary"})),
                    pluckable=o.get("pluckable", False),
                )
                for o in data.get("objects", [])
            ],
            trajectory=[
                HandPose(
                    time=p["time"],
                    position=tuple(p["position"]),
                    index_tip_knuckle_distance=p.get("squeeze_distance", 0.10),
                    tracked=p.get("tracked", True),
                )
                for p in data.get("trajectory", [])
            ],
            duration=data["duration"],
            controller_config=ControllerConfig.from_dict(data.get("controller", {})),
            expected_events=[
                ExpectedEvent(e["kind"], e["t_min"], e["t_max"], e.get("object", ""))
                for e in data.get("expected_events", [])
            ],
            actions=[
                ScenarioAction(a["time"], a["kind"], a.get("object", ""), a.get("level", 0.0))
                for a in data.get("actions", [])
            ],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioInvalidError):
            raise
        raise ScenarioInvalidError(f"bad scenario document: {exc}") from exc
    scenario.validate()
    return scenario


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioInvalidError(f"scenario file is not valid JSON: {exc}") from exc
    return scenario_from_dict(data)


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2)
        fh.write("\n")
