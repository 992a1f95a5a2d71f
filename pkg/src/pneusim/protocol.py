"""Wire protocol for the device's two GET command endpoints.

Every command is carried entirely in the request line:

    /setBatch?pin=<concatenated 2-digit pin ids>&state=<one 0/1 per pin>
    /setServo?pin=<2-digit pin id>&state=<angle 0-180>

A batch pairs the i-th state bit with the i-th pin id, so
``/setBatch?pin=1918&state=10`` switches pin 19 on and pin 18 off.
Parsing is strict on purpose: the decoder doubles as a conformance tool,
so unknown query parameters, non-digit pins, odd-length pin strings and
out-of-range angles are all rejected with a machine-readable reason.
"""

from __future__ import annotations

from dataclasses import dataclass
from urllib.parse import parse_qsl

BATCH_PATH = "/setBatch"
SERVO_PATH = "/setServo"

MIN_PIN = 0
MAX_PIN = 99
MIN_ANGLE = 0
MAX_ANGLE = 180

# Digit checks are explicit ASCII sets: str.isdigit() accepts non-ASCII
# digits, which must not reach int().
_ASCII_DIGITS = frozenset("0123456789")
_STATE_CHARS = frozenset("01")


class CommandError(ValueError):
    """Base class for command encode/decode failures.

    ``reason`` is a stable machine-readable token, used verbatim in the
    firmware's 400 responses and in command-log entries.
    """

    reason = "invalid_command"


class MalformedQueryError(CommandError):
    reason = "malformed_query"


class MissingParameterError(CommandError):
    reason = "missing_parameter"


class UnknownParameterError(CommandError):
    reason = "unknown_parameter"


class EmptyCommandError(CommandError):
    reason = "empty_command"


class MismatchedLengthError(CommandError):
    reason = "mismatched_length"


class NonDigitPinError(CommandError):
    reason = "non_digit_pin"


class InvalidStateCharError(CommandError):
    reason = "invalid_state_char"


class AngleOutOfRangeError(CommandError):
    reason = "angle_out_of_range"


PinId = int  # digital pin id in [0, 99], rendered as exactly two digits


def render_pin(pin: PinId) -> str:
    """Render a pin id as its canonical two-digit form."""
    if not isinstance(pin, int) or isinstance(pin, bool):
        raise NonDigitPinError(f"pin id must be an integer, got {pin!r}")
    if not MIN_PIN <= pin <= MAX_PIN:
        raise NonDigitPinError(f"pin id {pin} outside [{MIN_PIN}, {MAX_PIN}]")
    return f"{pin:02d}"


def parse_pin(text: str) -> PinId:
    """Parse a two-digit pin id; anything else is rejected."""
    if len(text) != 2 or any(c not in _ASCII_DIGITS for c in text):
        raise NonDigitPinError(f"pin id must be exactly two decimal digits, got {text!r}")
    return int(text)


@dataclass(frozen=True)
class BatchCommand:
    """An ordered list of (pin, state) pairs set atomically by one request.

    Duplicate pins are legal; at application time the last occurrence wins.
    """

    entries: tuple[tuple[PinId, int], ...]

    def __post_init__(self) -> None:
        normalized = []
        for pin, state in self.entries:
            if not isinstance(pin, int) or isinstance(pin, bool) or not MIN_PIN <= pin <= MAX_PIN:
                raise NonDigitPinError(f"pin id {pin!r} outside [{MIN_PIN}, {MAX_PIN}]")
            if state not in (0, 1):
                raise InvalidStateCharError(f"state must be 0 or 1, got {state!r}")
            normalized.append((pin, int(state)))
        if not normalized:
            raise EmptyCommandError("a batch must contain at least one pin")
        object.__setattr__(self, "entries", tuple(normalized))

    @property
    def pin_string(self) -> str:
        return "".join(render_pin(pin) for pin, _ in self.entries)

    @property
    def state_string(self) -> str:
        return "".join(str(state) for _, state in self.entries)


@dataclass(frozen=True)
class ServoCommand:
    """A single servo target: pin id plus angle in degrees."""

    pin: PinId
    angle: int

    def __post_init__(self) -> None:
        render_pin(self.pin)  # range check
        if not isinstance(self.angle, int) or isinstance(self.angle, bool):
            raise AngleOutOfRangeError(f"angle must be an integer, got {self.angle!r}")
        if not MIN_ANGLE <= self.angle <= MAX_ANGLE:
            raise AngleOutOfRangeError(
                f"angle {self.angle} outside [{MIN_ANGLE}, {MAX_ANGLE}]"
            )


def encode_batch(cmd: BatchCommand) -> str:
    """Encode a batch as its canonical path+query string."""
    return f"{BATCH_PATH}?pin={cmd.pin_string}&state={cmd.state_string}"


def encode_servo(cmd: ServoCommand) -> str:
    """Encode a servo command; the angle carries no zero padding."""
    return f"{SERVO_PATH}?pin={render_pin(cmd.pin)}&state={cmd.angle}"


def parse_batch(query: str) -> BatchCommand:
    """Decode a batch from a bare query string or a full path+query.

    Total over arbitrary strings: anything invalid raises a
    :class:`CommandError` subclass, never anything else.
    """
    pin_str, state_str = _split_params(query, BATCH_PATH)
    if pin_str == "" and state_str == "":
        raise EmptyCommandError("batch has no pins and no states")
    if any(c not in _ASCII_DIGITS for c in pin_str):
        raise NonDigitPinError(f"pin string {pin_str!r} contains non-digit characters")
    if any(c not in _STATE_CHARS for c in state_str):
        raise InvalidStateCharError(f"state string {state_str!r} contains characters outside 0/1")
    if len(pin_str) != 2 * len(state_str):
        raise MismatchedLengthError(
            f"{len(pin_str)} pin digits do not pair with {len(state_str)} states"
        )
    entries = tuple(
        (int(pin_str[2 * i : 2 * i + 2]), int(state_str[i])) for i in range(len(state_str))
    )
    return BatchCommand(entries)


def parse_servo(query: str) -> ServoCommand:
    """Decode a servo command from a bare query string or full path+query."""
    pin_str, state_str = _split_params(query, SERVO_PATH)
    pin = parse_pin(pin_str)
    negative = state_str.startswith("-")
    digits = state_str[1:] if negative else state_str
    if not digits or any(c not in _ASCII_DIGITS for c in digits):
        raise AngleOutOfRangeError(f"angle must be a decimal integer, got {state_str!r}")
    angle = -int(digits) if negative else int(digits)
    if not MIN_ANGLE <= angle <= MAX_ANGLE:
        raise AngleOutOfRangeError(f"angle {angle} outside [{MIN_ANGLE}, {MAX_ANGLE}]")
    return ServoCommand(pin, angle)


def _split_params(query: str, expected_path: str) -> tuple[str, str]:
    """Extract the pin/state parameters, URL-decoding along the way.

    Accepts either ``pin=..&state=..`` or ``/path?pin=..&state=..``; in the
    path form the path must match the endpoint. Only the two documented
    parameters are recognized, and each may appear once.
    """
    if not isinstance(query, str):
        raise MalformedQueryError(f"query must be a string, got {type(query).__name__}")
    if not query.isascii():
        raise MalformedQueryError("query must be ASCII")
    if query.startswith("/"):
        path, sep, query = query.partition("?")
        if not sep:
            raise MissingParameterError(f"no query string in {path!r}")
        if path != expected_path:
            raise MalformedQueryError(f"path {path!r} does not match {expected_path!r}")
    pairs = parse_qsl(query, keep_blank_values=True)
    params: dict[str, str] = {}
    for key, value in pairs:
        if key not in ("pin", "state"):
            raise UnknownParameterError(f"unrecognized parameter {key!r}")
        if key in params:
            raise MalformedQueryError(f"parameter {key!r} given more than once")
        params[key] = value
    for key in ("pin", "state"):
        if key not in params:
            raise MissingParameterError(f"parameter {key!r} is required")
    return params["pin"], params["state"]
