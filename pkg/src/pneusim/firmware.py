"""Device firmware emulator: the two command endpoints over HTTP.

The service mirrors a single-core microcontroller loop: requests are
decoded and applied strictly in arrival order, one at a time, and pin
writes never interleave with a physics step. Responses are minimal and
scriptable: 200 with a plain-text ``OK`` on success, 400 with a JSON
``{"error": <reason>}`` on parse/validation failure, 404 elsewhere.

Three clock modes drive the physics:

* ``realtime``   — a background thread keeps device time glued to wall time;
* ``accelerated``— same, sped up by a factor;
* ``manual``     — time advances only through ``GET /step?dt=<seconds>``,
  which makes integration tests fully deterministic (lock-step).

Endpoints: ``/setBatch``, ``/setServo``, ``/telemetry``, ``/step``.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qsl, urlsplit

import requests

from . import pneumodel, protocol
from .pneumodel import DeviceError, DeviceState, PneumaticConfig
from .telemetry import TelemetrySample

DEFAULT_PHYSICS_DT = 0.005  # seconds per integration substep

REALTIME = "realtime"
ACCELERATED = "accelerated"
MANUAL = "manual"


class EndpointUnreachableError(ConnectionError):
    """The firmware endpoint did not answer."""


@dataclass(frozen=True)
class ClockMode:
    kind: str
    factor: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in (REALTIME, ACCELERATED, MANUAL):
            raise ValueError(f"unknown clock mode {self.kind!r}")
        if self.factor <= 0:
            raise ValueError("clock factor must be positive")

    @classmethod
    def realtime(cls) -> "ClockMode":
        return cls(REALTIME)

    @classmethod
    def accelerated(cls, factor: float) -> "ClockMode":
        return cls(ACCELERATED, factor)

    @classmethod
    def manual(cls) -> "ClockMode":
        return cls(MANUAL)

    @classmethod
    def parse(cls, text: str) -> "ClockMode":
        """Parse a CLI clock spec: ``realtime``, ``manual`` or ``x<factor>``."""
        if text == REALTIME:
            return cls.realtime()
        if text == MANUAL:
            return cls.manual()
        if text.startswith("x"):
            try:
                return cls.accelerated(float(text[1:]))
            except ValueError:
                pass
        raise ValueError(f"bad clock spec {text!r}; expected realtime, manual or xN")


@dataclass(frozen=True)
class CommandLogEntry:
    receive_time: float
    endpoint: str  # "setBatch" | "setServo"
    raw_query: str
    outcome: str  # "applied" | "rejected"
    reason: str = ""


class DeviceService:
    """The emulator core shared by the HTTP layer and in-process clients.

    All command application, stepping and telemetry reads serialize on one
    lock, so a telemetry snapshot can never observe a half-applied batch.
    """

    def __init__(
        self,
        config: PneumaticConfig | None = None,
        clock: ClockMode | None = None,
        physics_dt: float = DEFAULT_PHYSICS_DT,
        record_trace: bool = False,
    ):
        if not 0.0 < physics_dt <= pneumodel.MAX_TIMESTEP:
            raise ValueError(f"physics_dt must be in (0, {pneumodel.MAX_TIMESTEP}]")
        self.config = config or PneumaticConfig()
        self.clock_mode = clock or ClockMode.manual()
        self.physics_dt = physics_dt
        self.record_trace = record_trace
        self.state = DeviceState(self.config)
        self.command_log: list[CommandLogEntry] = []
        self.trace: list[TelemetrySample] = []
        self._lock = threading.Lock()
        self._last_events: tuple[str, ...] = ()
        self._stop = threading.Event()
        self._clock_thread: threading.Thread | None = None

    # -- request handling -------------------------------------------------

    def handle(self, path: str, query: str) -> tuple[int, str, str]:
        """Dispatch one GET request; returns (status, body, content type)."""
        if path == protocol.BATCH_PATH:
            return self._handle_command("setBatch", query)
        if path == protocol.SERVO_PATH:
            return self._handle_command("setServo", query)
        if path == "/telemetry":
            return 200, json.dumps(self._telemetry_dict()), "application/json"
        if path == "/step":
            return self._handle_step(query)
        return 404, json.dumps({"error": "unknown_path"}), "application/json"

    def _handle_command(self, endpoint: str, query: str) -> tuple[int, str, str]:
        with self._lock:
            receive_time = self.state.clock
            try:
                if endpoint == "setBatch":
                    self.state.apply_batch(protocol.parse_batch(query))
                else:
                    self.state.apply_servo(protocol.parse_servo(query))
            except (protocol.CommandError, DeviceError) as exc:
                self.command_log.append(CommandLogEntry(
                    receive_time, endpoint, query, "rejected", exc.reason))
                body = json.dumps({"error": exc.reason, "message": str(exc)})
                return 400, body, "application/json"
            self.command_log.append(CommandLogEntry(receive_time, endpoint, query, "applied"))
            return 200, "OK", "text/plain"

    def _handle_step(self, query: str) -> tuple[int, str, str]:
        if self.clock_mode.kind != MANUAL:
            body = json.dumps({"error": "manual_step_only",
                               "message": "stepping requires the manual clock mode"})
            return 400, body, "application/json"
        params = dict(parse_qsl(query, keep_blank_values=True))
        try:
            dt = float(params["dt"])
        except (KeyError, ValueError):
            return 400, json.dumps({"error": "invalid_timestep"}), "application/json"
        if dt <= 0:
            return 400, json.dumps({"error": "invalid_timestep"}), "application/json"
        self.advance(dt)
        return 200, "OK", "text/plain"

    # -- stepping and telemetry -------------------------------------------

    def advance(self, total_dt: float) -> list[TelemetrySample]:
        """Advance physics by total_dt in substeps of physics_dt.

        Commands may apply between substeps but never inside one. One
        sample is produced per substep.
        """
        samples = []
        remaining = total_dt
        while remaining > 1e-12:
            dt = min(self.physics_dt, remaining)
            with self._lock:
                events = self.state.step(dt)
                self._last_events = tuple(events)
                sample = self._sample_locked()
            if self.record_trace:
                self.trace.append(sample)
            samples.append(sample)
            remaining -= dt
        return samples

    def sample(self) -> TelemetrySample:
        with self._lock:
            return self._sample_locked()

    def _sample_locked(self) -> TelemetrySample:
        s = self.state
        return TelemetrySample(
            time=s.clock,
            fills=s.fills(),
            pressures=s.pressures(),
            servo_angles=s.servo_angles(),
            servo_targets=s.servo_targets(),
            pins=s.pin_map(),
            events=self._last_events,
        )

    def _telemetry_dict(self) -> dict:
        sample = self.sample()
        return {
            "time": sample.time,
            "fills": list(sample.fills),
            "pressures": list(sample.pressures),
            "servo_angles": list(sample.servo_angles),
            "servo_targets": list(sample.servo_targets),
            "pins": {f"{p:02d}": v for p, v in sample.pins},
            "events": list(sample.events),
        }

    # -- clock thread ------------------------------------------------------

    def start_clock(self) -> None:
        """Start the wall-clock stepping thread (realtime/accelerated only)."""
        if self.clock_mode.kind == MANUAL or self._clock_thread is not None:
            return
        factor = self.clock_mode.factor if self.clock_mode.kind == ACCELERATED else 1.0
        self._stop.clear()
        self._clock_thread = threading.Thread(
            target=self._run_clock, args=(factor,), daemon=True)
        self._clock_thread.start()

    def _run_clock(self, factor: float) -> None:
        anchor_wall = time.perf_counter()
        anchor_clock = self.state.clock
        while not self._stop.is_set():
            target = anchor_clock + (time.perf_counter() - anchor_wall) * factor
            behind = target - self.state.clock
            if behind >= self.physics_dt:
                # Cap each catch-up burst so commands can interleave.
                self.advance(min(behind, 0.1))
            else:
                self._stop.wait(min(self.physics_dt / factor, 0.02))

    def stop_clock(self) -> None:
        self._stop.set()
        if self._clock_thread is not None:
            self._clock_thread.join(timeout=2.0)
            self._clock_thread = None

    def shutdown(self) -> list[CommandLogEntry]:
        """Stop the clock and hand back the full command log."""
        self.stop_clock()
        return list(self.command_log)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_GET(self):  # noqa: N802 - http.server naming
        path, _, query = self.path.partition("?")
        status, body, ctype = self.server.service.handle(path, query)
        data = body.encode("ascii")
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, fmt, *args):  # silence per-request stderr noise
        pass


class _Server(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, service: DeviceService):
        super().__init__(address, _Handler)
        self.service = service


class FirmwareServer:
    """A running emulator bound to a TCP port."""

    def __init__(self, service: DeviceService, httpd: _Server):
        self.service = service
        self._httpd = httpd
        self._thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        self._thread.start()
        service.start_clock()

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def shutdown(self) -> list[CommandLogEntry]:
        """Stop accepting requests; flush and return the command log."""
        self._httpd.shutdown()
        self._thread.join(timeout=5.0)
        self._httpd.server_close()
        return self.service.shutdown()


def serve(
    config: PneumaticConfig | None = None,
    clock: ClockMode | None = None,
    port: int = 0,
    physics_dt: float = DEFAULT_PHYSICS_DT,
    record_trace: bool = False,
) -> FirmwareServer:
    """Bind and start the emulator; port 0 picks a free port.

    Bind failures surface as OSError.
    """
    service = DeviceService(config, clock, physics_dt, record_trace)
    httpd = _Server(("127.0.0.1", port), service)
    return FirmwareServer(service, httpd)


class LocalClient:
    """In-process client, used for deterministic lock-step runs."""

    manual = True

    def __init__(self, service: DeviceService):
        if service.clock_mode.kind != MANUAL:
            raise ValueError("lock-step runs need a manual-clock service")
        service.record_trace = True
        self.service = service

    def send(self, path_query: str) -> tuple[int, str]:
        path, _, query = path_query.partition("?")
        status, body, _ = self.service.handle(path, query)
        return status, body

    def step(self, dt: float) -> list[TelemetrySample]:
        return self.service.advance(dt)

    def telemetry(self) -> TelemetrySample:
        return self.service.sample()


class HttpClient:
    """Network client speaking the wire protocol to a running firmware."""

    def __init__(self, base_url: str, realtime: bool = False, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.manual = not realtime
        self.timeout = timeout
        self._session = requests.Session()

    def _get(self, path_query: str) -> requests.Response:
        try:
            return self._session.get(self.base_url + path_query, timeout=self.timeout)
        except requests.exceptions.ConnectionError as exc:
            raise EndpointUnreachableError(f"cannot reach {self.base_url}") from exc

    def send(self, path_query: str) -> tuple[int, str]:
        resp = self._get(path_query)
        return resp.status_code, resp.text

    def step(self, dt: float) -> list[TelemetrySample]:
        if self.manual:
            status, body = self.send(f"/step?dt={dt}")
            if status != 200:
                raise RuntimeError(f"step rejected: {body}")
        else:
            time.sleep(dt)
        return [self.telemetry()]

    def telemetry(self) -> TelemetrySample:
        resp = self._get("/telemetry")
        data = resp.json()
        return TelemetrySample(
            time=data["time"],
            fills=tuple(data["fills"]),
            pressures=tuple(data["pressures"]),
            servo_angles=tuple(data["servo_angles"]),
            servo_targets=tuple(data["servo_targets"]),
            pins=tuple(sorted((int(k), v) for k, v in data["pins"].items())),
            events=tuple(data["events"]),
        )


def is_loopback(url: str) -> bool:
    host = urlsplit(url).hostname or ""
    return host in ("127.0.0.1", "localhost", "::1")
