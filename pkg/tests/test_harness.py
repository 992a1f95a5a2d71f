"""CLI harness: exit codes, CSV schema stability, verification, benchmark."""

from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from pneusim.firmware import ClockMode, DeviceService, EndpointUnreachableError, serve
from pneusim.harness import (
    DEVICE_WIFI_REFERENCE,
    LatencyStats,
    main,
    percentile,
    run_latency_benchmark,
    verify_trace,
)
from pneusim.scenesim import builtin_scenario, run_scenario
from pneusim.telemetry import (
    EventRecord,
    TelemetrySample,
    read_events,
    read_trace,
    trace_columns,
    write_events,
    write_trace,
)

GOLDEN_HEADER = (
    "time,fill_1,fill_2,fill_3,pressure_1,pressure_2,pressure_3,"
    "servo_angle_1,servo_angle_2,servo_angle_3,"
    "servo_target_1,servo_target_2,servo_target_3,"
    "pin_01,pin_02,pin_03,pin_04,pin_05,pin_06,events"
)


@pytest.fixture(scope="module")
def throw_result():
    return run_scenario(builtin_scenario("overhand_throw"),
                        DeviceService(clock=ClockMode.manual()))


def test_trace_csv_header_is_frozen(tmp_path, throw_result):
    path = tmp_path / "trace.csv"
    write_trace(str(path), throw_result.samples)
    header = path.read_text().splitlines()[0]
    assert header == GOLDEN_HEADER
    assert ",".join(trace_columns([1, 2, 3, 4, 5, 6])) == GOLDEN_HEADER


def test_trace_and_events_round_trip(tmp_path, throw_result):
    trace_path = tmp_path / "trace.csv"
    events_path = tmp_path / "events.csv"
    write_trace(str(trace_path), throw_result.samples)
    write_events(str(events_path), throw_result.events)
    samples = read_trace(str(trace_path))
    assert len(samples) == len(throw_result.samples)
    assert samples[0].time == pytest.approx(throw_result.samples[0].time)
    assert samples[-1].pins == throw_result.samples[-1].pins
    events = read_events(str(events_path))
    assert [(e.kind, e.object_id) for e in events] == \
        [(e.kind, e.object_id) for e in throw_result.events]


def test_verify_accepts_recorded_traces(throw_result):
    assert verify_trace(throw_result.samples, throw_result.events) == []


def test_verify_flags_injected_faults(throw_result):
    sample = throw_result.samples[10]
    corrupted = list(throw_result.samples)
    corrupted[10] = TelemetrySample(
        time=sample.time, fills=(1.2, 0.0, 0.0),
        pressures=(16 * 1.2, 0.0, 0.0),
        servo_angles=sample.servo_angles, servo_targets=sample.servo_targets,
        pins=sample.pins)
    violations = verify_trace(corrupted)
    assert any("fill_1" in v for v in violations)

    jumped = list(throw_result.samples)
    jumped[10] = TelemetrySample(
        time=sample.time, fills=sample.fills, pressures=sample.pressures,
        servo_angles=(90.0, 0.0, 0.0), servo_targets=sample.servo_targets,
        pins=sample.pins)
    assert any("deg/s bound" in v for v in verify_trace(jumped))


def test_verify_flags_double_grab_and_bad_causality(throw_result):
    events = [
        EventRecord(0.1, "grabbed", "a", 1),
        EventRecord(0.2, "grabbed", "b", 2),
    ]
    violations = verify_trace(throw_result.samples, events)
    assert any("simultaneously" in v for v in violations)
    events = [EventRecord(0.1, "inflate_start", "ghost", 1)]
    violations = verify_trace(throw_result.samples, events)
    assert any("before any grab" in v for v in violations)
    # squeeze-mode deflations are exempt from released-first ordering
    events = [
        EventRecord(0.1, "grabbed", "a", 1),
        EventRecord(0.2, "deflate_start", "a", 1, "mode=squeeze"),
    ]
    assert verify_trace(throw_result.samples, events) == []


def test_percentile_interpolation():
    values = [float(i) for i in range(1, 101)]
    assert percentile(values, 50) == pytest.approx(50.5)
    assert percentile(values, 95) == pytest.approx(95.05)
    assert percentile(values, 100) == 100.0
    assert percentile([3.0], 99) == 3.0
    with pytest.raises(ValueError):
        percentile([], 50)


def test_latency_stats_invariants():
    with pytest.raises(ValueError):
        LatencyStats("setBatch", 0, 1.0, 0.0, 1.0, 1.0, 1.0, "loopback")
    with pytest.raises(ValueError):
        LatencyStats("setBatch", 5, 1.0, 0.0, 2.0, 1.0, 3.0, "loopback")


def test_benchmark_against_loopback_server(tmp_path):
    server = serve(clock=ClockMode.realtime())
    try:
        stats, samples = run_latency_benchmark(server.base_url, 200, "setBatch")
    finally:
        server.shutdown()
    assert stats.n == 200 and len(samples) == 200
    assert stats.transport == "loopback"
    assert 0.0 < stats.mean < DEVICE_WIFI_REFERENCE["setBatch"]["mean"]
    assert stats.p50 <= stats.p95 <= stats.p99


def test_benchmark_single_sample_has_zero_deviation():
    server = serve(clock=ClockMode.realtime())
    try:
        stats, _ = run_latency_benchmark(server.base_url, 1, "setServo")
    finally:
        server.shutdown()
    assert stats.n == 1
    assert stats.std_dev == 0.0
    assert stats.p50 == stats.p95 == stats.p99 == stats.mean


def test_benchmark_unreachable_endpoint():
    with pytest.raises(EndpointUnreachableError):
        run_latency_benchmark("http://127.0.0.1:9", 3)


# -- CLI ----------------------------------------------------------------------

def test_cli_serve_missing_config_exits_2():
    runner = CliRunner()
    result = runner.invoke(main, ["serve", "--config", "/no/such/file.json"])
    assert result.exit_code == 2


def test_cli_serve_bad_clock_exits_2():
    runner = CliRunner()
    result = runner.invoke(main, ["serve", "--clock", "warp9"])
    assert result.exit_code == 2


def test_cli_run_builtin_writes_trace_and_exits_0(tmp_path):
    runner = CliRunner()
    prefix = str(tmp_path / "out")
    result = runner.invoke(main, ["run", "underhand_throw", "--output", prefix])
    assert result.exit_code == 0, result.output
    samples = read_trace(prefix + ".csv")
    events = read_events(prefix + ".events.csv")
    assert samples and events
    assert verify_trace(samples, events) == []


def test_cli_run_unknown_scenario_file_exits_2(tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, ["run", str(tmp_path / "missing.json")])
    assert result.exit_code == 2


def test_cli_run_unmet_expectation_exits_1(tmp_path):
    from pneusim.scenesim import ExpectedEvent, save_scenario

    scenario = builtin_scenario("overhand_throw")
    scenario.expected_events.append(ExpectedEvent("grabbed", 3.5, 3.9, "cue_ball"))
    path = tmp_path / "impossible.json"
    save_scenario(scenario, path)
    runner = CliRunner()
    result = runner.invoke(main, ["run", str(path), "--output", str(tmp_path / "x")])
    assert result.exit_code == 1
    assert "missing expected event" in result.output


def test_cli_run_unreachable_endpoint_exits_3(tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, [
        "run", "overhand_throw", "--endpoint", "http://127.0.0.1:9",
        "--output", str(tmp_path / "x")])
    assert result.exit_code == 3


def test_cli_bench_zero_requests_is_usage_error():
    runner = CliRunner()
    result = runner.invoke(main, ["bench", "--endpoint", "http://127.0.0.1:1", "--n", "0"])
    assert result.exit_code == 2


def test_cli_bench_smoke(tmp_path):
    server = serve(clock=ClockMode.realtime())
    try:
        runner = CliRunner()
        out = str(tmp_path / "lat.csv")
        result = runner.invoke(main, [
            "bench", "--endpoint", server.base_url, "--n", "50", "--output", out])
        assert result.exit_code == 0, result.output
        assert "transport=loopback" in result.output
        assert "reference only" in result.output
        assert len(open(out).read().splitlines()) == 51
    finally:
        server.shutdown()


def test_cli_verify_passes_on_good_trace(tmp_path, throw_result):
    trace = tmp_path / "t.csv"
    events = tmp_path / "e.csv"
    write_trace(str(trace), throw_result.samples)
    write_events(str(events), throw_result.events)
    runner = CliRunner()
    result = runner.invoke(main, ["verify", str(trace), "--events", str(events)])
    assert result.exit_code == 0, result.output


def test_cli_verify_flags_corruption(tmp_path, throw_result):
    trace = tmp_path / "t.csv"
    write_trace(str(trace), throw_result.samples)
    lines = trace.read_text().splitlines()
    parts = lines[5].split(",")
    parts[1] = "1.200000"  # fill_1 out of range
    lines[5] = ",".join(parts)
    trace.write_text("\n".join(lines) + "\n")
    runner = CliRunner()
    result = runner.invoke(main, ["verify", str(trace)])
    assert result.exit_code == 1


def test_cli_verify_empty_trace_warns_and_exits_0(tmp_path):
    trace = tmp_path / "empty.csv"
    write_trace(str(trace), [])
    runner = CliRunner()
    result = runner.invoke(main, ["verify", str(trace)])
    assert result.exit_code == 0
    assert "warning" in result.output


def test_cli_run_accepts_config_file(tmp_path):
    config = {
        "pneumatics": {"pump_flow_rate": 2.5, "max_pressure": 16.0},
        "controller": {"grasp_angle": 75},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    runner = CliRunner()
    prefix = str(tmp_path / "cfg_run")
    result = runner.invoke(main, [
        "run", "sorting", "--config", str(config_path), "--output", prefix])
    assert result.exit_code == 0, result.output
    samples = read_trace(prefix + ".csv")
    assert 75.0 in {s.servo_targets[0] for s in samples}
