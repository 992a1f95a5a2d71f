"""CLI harness: serve the emulator, replay scenarios, benchmark, verify.

Exit code contract (CI-friendly): 0 pass, 1 expectation miss or trace
violation, 2 configuration/usage error, 3 network error.

The latency benchmark mirrors the measurement methodology used on the
physical device: sequential single-client requests, 10,000 by default,
wall-clock round-trip each. Loopback numbers say nothing about radio
conditions, so reports always label the transport and print the physical
device's wifi figures as a reference upper bound only.
"""

from __future__ import annotations

import http.client
import json
import math
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import urlsplit

import click

from .controller import ControllerConfig
from .firmware import ClockMode, EndpointUnreachableError, is_loopback, serve
from .pneumodel import DEFAULT_MAX_PRESSURE, DEFAULT_SERVO_RATE, PneumaticConfig
from .scenesim import (
    BUILTIN_NAMES,
    ScenarioInvalidError,
    builtin_scenario,
    load_scenario,
    run_scenario,
)
from .telemetry import EventRecord, TelemetrySample, read_events, read_trace, write_events, write_trace

EXIT_OK = 0
EXIT_EXPECTATION = 1
EXIT_CONFIG = 2
EXIT_NETWORK = 3

# Round-trip statistics measured on the physical device over wifi
# (10,000 sequential requests per endpoint). Loopback runs cannot
# reproduce radio transit; these are reference upper bounds only.
DEVICE_WIFI_REFERENCE = {
    "setBatch": {"mean": 0.019, "std_dev": 0.033},
    "setServo": {"mean": 0.023, "std_dev": 0.088},
}

BENCH_QUERIES = {
    "setBatch": "/setBatch?pin=1918&state=10",
    "setServo": "/setServo?pin=10&state=60",
}


@dataclass(frozen=True)
class LatencyStats:
    endpoint: str
    n: int
    mean: float
    std_dev: float
    p50: float
    p95: float
    p99: float
    transport: str  # "loopback" | "remote"

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValueError("latency stats need at least one sample")
        if self.std_dev < 0 or not self.p50 <= self.p95 <= self.p99:
            raise ValueError("inconsistent latency statistics")


def percentile(sorted_samples, q: float) -> float:
    """Linearly interpolated percentile of pre-sorted samples, q in [0, 100]."""
    if not sorted_samples:
        raise ValueError("no samples")
    if len(sorted_samples) == 1:
        return sorted_samples[0]
    rank = (len(sorted_samples) - 1) * q / 100.0
    lo = math.floor(rank)
    hi = math.ceil(rank)
    if lo == hi:
        return sorted_samples[lo]
    return sorted_samples[lo] + (sorted_samples[hi] - sorted_samples[lo]) * (rank - lo)


def run_latency_benchmark(endpoint: str, n: int, kind: str = "setBatch") -> tuple[LatencyStats, list[float]]:
    """Issue n sequential requests and time each wall-clock round trip."""
    if n <= 0:
        raise ValueError("n must be at least 1")
    if kind not in BENCH_QUERIES:
        raise ValueError(f"kind must be one of {sorted(BENCH_QUERIES)}")
    parts = urlsplit(endpoint)
    host = parts.hostname or "127.0.0.1"
    port = parts.port or 80
    query = BENCH_QUERIES[kind]
    samples: list[float] = []
    try:
        conn = http.client.HTTPConnection(host, port, timeout=10)
        for _ in range(n):
            t0 = time.perf_counter()
            conn.request("GET", query)
            resp = conn.getresponse()
            resp.read()
            samples.append(time.perf_counter() - t0)
            if resp.status != 200:
                raise RuntimeError(f"benchmark request failed with HTTP {resp.status}")
        conn.close()
    except (ConnectionError, OSError) as exc:
        raise EndpointUnreachableError(f"cannot reach {endpoint}") from exc
    ordered = sorted(samples)
    stats = LatencyStats(
        endpoint=kind,
        n=n,
        mean=statistics.fmean(samples),
        std_dev=statistics.pstdev(samples),
        p50=percentile(ordered, 50),
        p95=percentile(ordered, 95),
        p99=percentile(ordered, 99),
        transport="loopback" if is_loopback(endpoint) else "remote",
    )
    return stats, samples


def verify_trace(
    samples: list[TelemetrySample],
    events: list[EventRecord] | None = None,
    max_pressure: float = DEFAULT_MAX_PRESSURE,
    servo_rate: float = DEFAULT_SERVO_RATE,
) -> list[str]:
    """Re-check the recorded trace against the model invariants.

    Covers fill/pressure/angle bounds, the servo rate bound, clock
    monotonicity, single presentation, and grab/release causality
    (squeeze-mode deflations are exempt from the released-first rule).
    """
    violations: list[str] = []
    tol = 1e-4
    prev: TelemetrySample | None = None
    for idx, s in enumerate(samples):
        for ch in range(3):
            if not -tol <= s.fills[ch] <= 1.0 + tol:
                violations.append(f"row {idx}: fill_{ch + 1} {s.fills[ch]} outside [0, 1]")
            expected = max_pressure * s.fills[ch]
            if abs(s.pressures[ch] - expected) > max_pressure * tol:
                violations.append(
                    f"row {idx}: pressure_{ch + 1} {s.pressures[ch]} is not "
                    f"{max_pressure:g} x fill")
            if not -tol <= s.servo_angles[ch] <= 180.0 + tol:
                violations.append(f"row {idx}: servo_angle_{ch + 1} outside [0, 180]")
        if prev is not None:
            dt = s.time - prev.time
            if dt <= 0:
                violations.append(f"row {idx}: time did not increase ({prev.time} -> {s.time})")
            else:
                for ch in range(3):
                    moved = abs(s.servo_angles[ch] - prev.servo_angles[ch])
                    if moved > servo_rate * dt + tol:
                        violations.append(
                            f"row {idx}: servo_{ch + 1} moved {moved:.4f} deg in {dt:.4f}s, "
                            f"over the {servo_rate:g} deg/s bound")
        prev = s

    if events:
        grabbed: set[str] = set()
        seen_grab: set[str] = set()
        seen_release: set[str] = set()
        last_time = None
        for e in events:
            if last_time is not None and e.time < last_time - 1e-9:
                violations.append(f"event log: time went backwards at {e.time}")
            last_time = e.time
            if e.kind == "grabbed":
                grabbed.add(e.object_id)
                seen_grab.add(e.object_id)
                if len(grabbed) > 1:
                    violations.append(
                        f"event log: {sorted(grabbed)} grabbed simultaneously at t={e.time}")
            elif e.kind == "released":
                grabbed.discard(e.object_id)
                seen_release.add(e.object_id)
            elif e.kind == "inflate_start" and e.object_id:
                if e.object_id not in seen_grab:
                    violations.append(
                        f"event log: inflate_start for {e.object_id} before any grab")
            elif e.kind == "deflate_start" and e.object_id:
                if "squeeze" in e.detail:
                    continue
                if e.object_id not in seen_release and e.object_id not in seen_grab:
                    violations.append(
                        f"event log: deflate_start for {e.object_id} before any interaction")
    return violations


def _load_device_config(path: str | None) -> PneumaticConfig:
    if path is None:
        return PneumaticConfig()
    data = json.loads(Path(path).read_text())
    return PneumaticConfig.from_dict(data.get("pneumatics", data))


def _load_controller_config(path: str | None) -> ControllerConfig | None:
    if path is None:
        return None
    data = json.loads(Path(path).read_text())
    if "controller" in data:
        return ControllerConfig.from_dict(data["controller"])
    return None


@click.group()
def main() -> None:
    """Emulator harness for the pneumatic haptic device twin."""


@main.command("serve")
@click.option("--port", type=int, default=8341, envvar="PNEUSIM_PORT", show_default=True)
@click.option("--clock", "clock_spec", default="realtime", show_default=True,
              envvar="PNEUSIM_CLOCK", help="realtime, manual, or xN (accelerated).")
@click.option("--config", "config_path", type=str, default=None, envvar="PNEUSIM_CONFIG",
              help="JSON config file with plant constants and pin assignments.")
def cmd_serve(port: int, clock_spec: str, config_path: str | None) -> None:
    """Run the firmware emulator until interrupted."""
    try:
        clock = ClockMode.parse(clock_spec)
        config = _load_device_config(config_path)
    except (ValueError, OSError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        server = serve(config, clock, port)
    except OSError as exc:
        click.echo(f"cannot bind port {port}: {exc}", err=True)
        sys.exit(EXIT_NETWORK)
    m = config.manifold
    click.echo(f"listening on {server.base_url} (clock: {clock_spec})")
    click.echo(f"pin map: servos={list(config.servo_pins)} valves={list(m.valve_pins)} "
               f"inflate_pump={m.inflate_pump_pin} deflate_pump={m.deflate_pump_pin}")
    click.echo(f"valve roles: {list(m.valve_routing)}")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        log = server.shutdown()
        click.echo(f"served {len(log)} commands")


@main.command("run")
@click.argument("scenario")
@click.option("--endpoint", default=None, envvar="PNEUSIM_ENDPOINT",
              help="Base URL of a running manual-clock firmware; default is in-process.")
@click.option("--output", "output_prefix", default=None,
              help="Prefix for <prefix>.csv and <prefix>.events.csv [default: scenario name].")
@click.option("--config", "config_path", type=str, default=None, envvar="PNEUSIM_CONFIG")
@click.option("--dt", type=float, default=0.005, show_default=True,
              help="Physics substep for the in-process firmware.")
def cmd_run(scenario: str, endpoint: str | None, output_prefix: str | None,
            config_path: str | None, dt: float) -> None:
    """Replay SCENARIO (a built-in name or a JSON file) and write its trace."""
    try:
        device_config = _load_device_config(config_path)
        if scenario in BUILTIN_NAMES:
            scen = builtin_scenario(scenario)
        else:
            scen = load_scenario(scenario)
        controller_config = _load_controller_config(config_path)
        if controller_config is not None:
            scen.controller_config = controller_config
    except FileNotFoundError as exc:
        click.echo(f"cannot read {exc.filename}: no such file", err=True)
        sys.exit(EXIT_CONFIG)
    except (ScenarioInvalidError, ValueError) as exc:
        click.echo(f"invalid scenario or configuration: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    if endpoint is None:
        from .firmware import DeviceService
        target = DeviceService(device_config, ClockMode.manual(), physics_dt=dt)
    else:
        target = endpoint
    try:
        result = run_scenario(scen, target, device_config)
    except EndpointUnreachableError as exc:
        click.echo(f"network error: {exc}", err=True)
        sys.exit(EXIT_NETWORK)
    except RuntimeError as exc:
        # e.g. pointed at a realtime-clock server, which rejects /step
        click.echo(f"firmware refused the lock-step run: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    prefix = output_prefix or scen.name
    trace_path = f"{prefix}.csv"
    events_path = f"{prefix}.events.csv"
    write_trace(trace_path, result.samples)
    write_events(events_path, result.events)
    click.echo(f"wrote {trace_path} ({len(result.samples)} rows) and "
               f"{events_path} ({len(result.events)} events)")
    if result.missing_expected:
        for exp in result.missing_expected:
            target_id = exp.object_id or "<any>"
            click.echo(f"missing expected event: {exp.kind} for {target_id} "
                       f"in [{exp.t_min:g}, {exp.t_max:g}]", err=True)
        sys.exit(EXIT_EXPECTATION)
    click.echo("all expected events matched")
    sys.exit(EXIT_OK)


@main.command("bench")
@click.option("--endpoint", required=True, envvar="PNEUSIM_ENDPOINT",
              help="Base URL of a running realtime firmware.")
@click.option("--n", type=click.IntRange(min=1), default=10000, show_default=True)
@click.option("--kind", type=click.Choice(sorted(BENCH_QUERIES)), default="setBatch",
              show_default=True)
@click.option("--output", "output_path", default="latency_samples.csv", show_default=True)
def cmd_bench(endpoint: str, n: int, kind: str, output_path: str) -> None:
    """Measure sequential request round-trip latency against ENDPOINT."""
    try:
        stats, samples = run_latency_benchmark(endpoint, n, kind)
    except EndpointUnreachableError as exc:
        click.echo(f"network error: {exc}", err=True)
        sys.exit(EXIT_NETWORK)
    with open(output_path, "w") as fh:
        fh.write("index,seconds\n")
        for i, s in enumerate(samples):
            fh.write(f"{i},{s:.9f}\n")
    ref = DEVICE_WIFI_REFERENCE[kind]
    click.echo(f"{kind}: n={stats.n} transport={stats.transport}")
    click.echo(f"  mean={stats.mean * 1000:.3f} ms  std_dev={stats.std_dev * 1000:.3f} ms")
    click.echo(f"  p50={stats.p50 * 1000:.3f} ms  p95={stats.p95 * 1000:.3f} ms  "
               f"p99={stats.p99 * 1000:.3f} ms")
    click.echo(f"  reference only: physical device over wifi measured "
               f"mean={ref['mean'] * 1000:.0f} ms std_dev={ref['std_dev'] * 1000:.0f} ms "
               f"(radio transit is not reproducible on {stats.transport})")
    click.echo(f"  raw samples written to {output_path}")


@main.command("verify")
@click.argument("trace", type=click.Path(exists=True))
@click.option("--events", "events_path", type=click.Path(exists=True), default=None)
@click.option("--max-pressure", type=float, default=DEFAULT_MAX_PRESSURE, show_default=True)
@click.option("--servo-rate", type=float, default=DEFAULT_SERVO_RATE, show_default=True)
def cmd_verify(trace: str, events_path: str | None, max_pressure: float,
               servo_rate: float) -> None:
    """Re-check every model invariant over a recorded trace."""
    samples = read_trace(trace)
    events = read_events(events_path) if events_path else None
    if not samples:
        click.echo("warning: empty trace, nothing to verify")
        sys.exit(EXIT_OK)
    violations = verify_trace(samples, events, max_pressure, servo_rate)
    if violations:
        for v in violations:
            click.echo(f"violation: {v}", err=True)
        click.echo(f"{len(violations)} violation(s) in {len(samples)} rows", err=True)
        sys.exit(EXIT_EXPECTATION)
    click.echo(f"ok: {len(samples)} rows, all invariants hold")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
