"""Telemetry samples, event records, and the trace CSV schema.

One :class:`TelemetrySample` is emitted per physics step; the scenario
player and the verification tool both speak this schema, so the column
order below is frozen and covered by a golden-file test:

    time, fill_1..3, pressure_1..3, servo_angle_1..3, servo_target_1..3,
    pin_<id> for each pin column (two-digit, ascending), events

Events in the trace CSV are compact ``kind:object:channel`` annotations;
the richer per-event log (with details such as the exact batch strings)
is written to a separate events CSV: time, kind, object, channel, detail.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

EVENT_KINDS = frozenset({
    "ready_entered", "grabbed", "released",
    "inflate_start", "inflate_stop", "deflate_start", "deflate_stop",
    "servo_arrived", "pulse_end", "pluck", "warning",
})

_FLOAT_FMT = "{:.6f}"


@dataclass(frozen=True)
class TelemetrySample:
    """One row of the emitted trace."""

    time: float
    fills: tuple[float, ...]
    pressures: tuple[float, ...]
    servo_angles: tuple[float, ...]
    servo_targets: tuple[float, ...]
    pins: tuple[tuple[int, int], ...]  # (pin id, state), ascending pin id
    events: tuple[str, ...] = ()

    def annotated(self, labels: Iterable[str]) -> "TelemetrySample":
        extra = tuple(labels)
        return replace(self, events=self.events + extra) if extra else self

    def pin_value(self, pin: int) -> int:
        for p, state in self.pins:
            if p == pin:
                return state
        return 0


@dataclass(frozen=True)
class EventRecord:
    """One entry of the scenario event log; times are non-decreasing."""

    time: float
    kind: str
    object_id: str = ""
    channel: int = 0
    detail: str = ""

    def label(self) -> str:
        return f"{self.kind}:{self.object_id}:{self.channel}"


def trace_columns(pin_ids: Sequence[int]) -> list[str]:
    columns = ["time"]
    columns += [f"fill_{i}" for i in (1, 2, 3)]
    columns += [f"pressure_{i}" for i in (1, 2, 3)]
    columns += [f"servo_angle_{i}" for i in (1, 2, 3)]
    columns += [f"servo_target_{i}" for i in (1, 2, 3)]
    columns += [f"pin_{p:02d}" for p in pin_ids]
    columns.append("events")
    return columns


def write_trace(out, samples: Sequence[TelemetrySample]) -> None:
    """Write samples as CSV to a file-like object or path.

    The pin columns come from the first sample; every sample in one trace
    carries the same pin set by construction.
    """
    if isinstance(out, (str, bytes)):
        with open(out, "w", newline="") as fh:
            write_trace(fh, samples)
        return
    pin_ids = [p for p, _ in samples[0].pins] if samples else []
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(trace_columns(pin_ids))
    for s in samples:
        row = [_FLOAT_FMT.format(s.time)]
        for group in (s.fills, s.pressures, s.servo_angles, s.servo_targets):
            row += [_FLOAT_FMT.format(v) for v in group]
        row += [str(state) for _, state in s.pins]
        row.append(";".join(s.events))
        writer.writerow(row)


def trace_to_string(samples: Sequence[TelemetrySample]) -> str:
    buf = io.StringIO()
    write_trace(buf, samples)
    return buf.getvalue()


def read_trace(path) -> list[TelemetrySample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        pin_ids = [int(c.split("_", 1)[1]) for c in header if c.startswith("pin_")]
        samples = []
        for row in reader:
            values = dict(zip(header, row))
            samples.append(TelemetrySample(
                time=float(values["time"]),
                fills=tuple(float(values[f"fill_{i}"]) for i in (1, 2, 3)),
                pressures=tuple(float(values[f"pressure_{i}"]) for i in (1, 2, 3)),
                servo_angles=tuple(float(values[f"servo_angle_{i}"]) for i in (1, 2, 3)),
                servo_targets=tuple(float(values[f"servo_target_{i}"]) for i in (1, 2, 3)),
                pins=tuple((p, int(values[f"pin_{p:02d}"])) for p in pin_ids),
                events=tuple(e for e in values["events"].split(";") if e),
            ))
    return samples


def write_events(out, events: Sequence[EventRecord]) -> None:
    if isinstance(out, (str, bytes)):
        with open(out, "w", newline="") as fh:
            write_events(fh, events)
        return
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["time", "kind", "object", "channel", "detail"])
    for e in events:
        writer.writerow([_FLOAT_FMT.format(e.time), e.kind, e.object_id, str(e.channel), e.detail])


def events_to_string(events: Sequence[EventRecord]) -> str:
    buf = io.StringIO()
    write_events(buf, events)
    return buf.getvalue()


def read_events(path) -> list[EventRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EventRecord(
                time=float(row["time"]),
                kind=row["kind"],
                object_id=row["object"],
                channel=int(row["channel"]),
                detail=row["detail"],
            )
            for row in reader
        ]
