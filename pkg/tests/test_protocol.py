"""Wire protocol: exact command strings, strict rejection, round-trips."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pneusim import protocol
from pneusim.protocol import (
    AngleOutOfRangeError,
    BatchCommand,
    CommandError,
    EmptyCommandError,
    InvalidStateCharError,
    MalformedQueryError,
    MismatchedLengthError,
    MissingParameterError,
    NonDigitPinError,
    ServoCommand,
    UnknownParameterError,
    encode_batch,
    encode_servo,
    parse_batch,
    parse_servo,
)

batches = st.lists(
    st.tuples(st.integers(0, 99), st.integers(0, 1)), min_size=1, max_size=50
).map(lambda entries: BatchCommand(tuple(entries)))

servos = st.builds(ServoCommand, pin=st.integers(0, 99), angle=st.integers(0, 180))


def test_known_batch_command_strings_decode():
    cmd = parse_batch("pin=1918&state=10")
    assert cmd.entries == ((19, 1), (18, 0))
    cmd = parse_batch("/setBatch?pin=010203&state=100")
    assert cmd.entries == ((1, 1), (2, 0), (3, 0))


def test_known_batch_command_strings_encode():
    assert encode_batch(BatchCommand(((19, 1), (18, 0)))) == "/setBatch?pin=1918&state=10"
    assert encode_batch(BatchCommand(((1, 1), (2, 0), (3, 0)))) == "/setBatch?pin=010203&state=100"
    assert encode_batch(BatchCommand(((0, 0),))) == "/setBatch?pin=00&state=0"


def test_servo_encoding_boundaries():
    assert encode_servo(ServoCommand(5, 60)) == "/setServo?pin=05&state=60"
    assert encode_servo(ServoCommand(5, 0)) == "/setServo?pin=05&state=0"
    assert encode_servo(ServoCommand(5, 180)) == "/setServo?pin=05&state=180"


def test_servo_parse_boundaries():
    assert parse_servo("pin=05&state=180") == ServoCommand(5, 180)
    assert parse_servo("pin=05&state=0") == ServoCommand(5, 0)
    with pytest.raises(AngleOutOfRangeError):
        parse_servo("pin=05&state=181")
    with pytest.raises(AngleOutOfRangeError):
        parse_servo("pin=05&state=-1")


@pytest.mark.parametrize("query,error", [
    ("pin=19&state=", MismatchedLengthError),
    ("pin=191&state=1", MismatchedLengthError),
    ("pin=&state=1", MismatchedLengthError),
    ("pin=&state=", EmptyCommandError),
    ("pin=1a&state=1", NonDigitPinError),
    ("pin=19&state=2", InvalidStateCharError),
    ("pin=19&state=1 ", InvalidStateCharError),
    ("pin=19", MissingParameterError),
    ("state=1", MissingParameterError),
    ("", MissingParameterError),
    ("pin=19&state=1&extra=1", UnknownParameterError),
    ("pin=19&pin=18&state=1", MalformedQueryError),
    ("/setServo?pin=19&state=1", MalformedQueryError),
], ids=lambda v: repr(v))
def test_batch_rejections(query, error):
    with pytest.raises(error):
        parse_batch(query)


def test_unicode_digits_are_rejected():
    # str.isdigit() would accept these; the parser must not.
    with pytest.raises(CommandError):
        parse_batch("pin=١٩&state=1")
    with pytest.raises(CommandError):
        parse_servo("pin=05&state=١")


@pytest.mark.parametrize("query,error", [
    ("pin=5&state=60", NonDigitPinError),
    ("pin=123&state=60", NonDigitPinError),
    ("pin=05&state=6_0", AngleOutOfRangeError),
    ("pin=05&state= 60", AngleOutOfRangeError),
    ("pin=05&state=", AngleOutOfRangeError),
    ("pin=05", MissingParameterError),
], ids=lambda v: repr(v))
def test_servo_rejections(query, error):
    with pytest.raises(error):
        parse_servo(query)


def test_construction_enforces_invariants():
    with pytest.raises(EmptyCommandError):
        BatchCommand(())
    with pytest.raises(NonDigitPinError):
        BatchCommand(((100, 1),))
    with pytest.raises(InvalidStateCharError):
        BatchCommand(((10, 2),))
    with pytest.raises(AngleOutOfRangeError):
        ServoCommand(5, 181)
    with pytest.raises(NonDigitPinError):
        ServoCommand(-1, 60)


def test_duplicate_pins_are_preserved_in_order():
    cmd = parse_batch("pin=0505&state=10")
    assert cmd.entries == ((5, 1), (5, 0))


def test_url_decoding_applies_before_parsing():
    assert parse_batch("pin=%31%39&state=%31").entries == ((19, 1),)


@given(batches)
def test_batch_round_trip(cmd):
    assert parse_batch(encode_batch(cmd)) == cmd


@given(servos)
def test_servo_round_trip(cmd):
    assert parse_servo(encode_servo(cmd)) == cmd


@given(batches)
def test_every_encoded_pin_is_two_characters(cmd):
    encoded = encode_batch(cmd)
    pin_str = encoded.split("pin=")[1].split("&")[0]
    assert len(pin_str) == 2 * len(cmd.entries)
    for pin, _ in cmd.entries:
        assert len(protocol.render_pin(pin)) == 2


def test_order_preserved_for_fifty_entries():
    entries = tuple((i % 100, i % 2) for i in range(50))
    cmd = BatchCommand(entries)
    decoded = parse_batch(encode_batch(cmd))
    for i, pair in enumerate(entries):
        assert decoded.entries[i] == pair


@settings(max_examples=50, deadline=None)
@given(st.text(max_size=80))
def test_parse_is_total_over_text(text):
    for parser in (parse_batch, parse_servo):
        try:
            parser(text)
        except CommandError:
            pass


def test_fuzz_rejection_totality():
    """100,000 random inputs: parsers either decode or raise CommandError."""
    rng = random.Random(0xC0FFEE)
    alphabet = "pinstate=&?/0123456789abc%+;é☃ \t"
    for _ in range(100_000):
        length = rng.randrange(0, 30)
        text = "".join(rng.choice(alphabet) for _ in range(length))
        for parser in (parse_batch, parse_servo):
            try:
                parser(text)
            except CommandError:
                pass
