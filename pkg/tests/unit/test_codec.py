"""Unit tests for the down-tunnel payload codec."""

import base64
import dataclasses
import zlib
from typing import List

import hypothesis.strategies as st
import pytest
from hypothesis import given, settings

from CoDA_Sim.core import exceptions, samples
from CoDA_Sim.tunnel import codec
from tests.conftest import SampleFactory

_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"


@pytest.fixture
def batch(make_sample: SampleFactory) -> List[samples.Sample]:
    """Creates 25 samples of one user with varied behavior.

    Returns:
        The samples.
    """
    return [
        make_sample(
            1000 + i,
            user_id=3,
            day=i // 10,
            label=i % 2,
            behavior_seq=tuple((i * 7 + j) % 40 for j in range(3 + i % 4)),
            target_item=i % 4,
            animation=("bubble", "gif", "none")[i % 3],
        )
        for i in range(25)
    ]


def _frame(raw: bytes) -> str:
    framed = zlib.crc32(raw).to_bytes(4, "big") + raw
    return base64.b64encode(zlib.compress(framed)).decode("ascii")


def test_round_trip_is_identity(batch: List[samples.Sample]) -> None:
    """Tests that decoding an encoded batch gives the batch back.

    Args:
        batch: Fixture providing 25 samples.
    """
    payload = codec.encode_payload(batch)

    assert codec.decode_payload(payload) == batch
    assert codec.decode_text(payload.text) == batch
    assert payload.declared_raw_len == len(samples.to_ldjson(batch))
    assert payload.checksum == zlib.crc32(samples.to_ldjson(batch))


def test_encoding_is_deterministic(batch: List[samples.Sample]) -> None:
    """Tests that equal input gives equal wire text.

    Args:
        batch: Fixture providing 25 samples.
    """
    assert codec.encode_payload(batch) == codec.encode_payload(list(batch))


def test_typical_batch_compresses_below_forty_percent(
    batch: List[samples.Sample],
) -> None:
    """Tests the compressed size of a 25-sample batch.

    Args:
        batch: Fixture providing 25 samples.
    """
    payload = codec.encode_payload(batch)

    assert payload.compression_ratio <= 0.40
    assert payload.compressed_len == len(base64.b64decode(payload.text))


def test_empty_batch_cannot_be_encoded() -> None:
    """Tests that an empty batch raises EmptyInputError."""
    with pytest.raises(exceptions.EmptyInputError):
        codec.encode_payload([])


def test_flipped_character_is_detected(batch: List[samples.Sample]) -> None:
    """Tests that changing one character in the middle never decodes silently.

    Args:
        batch: Fixture providing 25 samples.
    """
    text = codec.encode_payload(batch).text
    middle = len(text) // 2
    flipped = "A" if text[middle] != "A" else "B"
    damaged = text[:middle] + flipped + text[middle + 1 :]

    with pytest.raises(
        (exceptions.PayloadParseError, exceptions.PayloadCorruptionError)
    ):
        codec.decode_text(damaged)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_any_single_substitution_is_detected(data: st.DataObject) -> None:
    """Tests substitutions anywhere in the first two thirds of the text.

    Args:
        data: Hypothesis draw source.
    """
    raw = samples.to_ldjson(
        [
            samples.Sample(i, 1, 0, 0, "gif", (0.5,), (), (i, i + 1), (1.0,), 1)
            for i in range(10)
        ]
    )
    text = _frame(raw)
    position = data.draw(st.integers(0, len(text) * 2 // 3))
    replacement = data.draw(
        st.sampled_from(_ALPHABET).filter(lambda c: c != text[position])
    )
    damaged = text[:position] + replacement + text[position + 1 :]

    with pytest.raises(
        (exceptions.PayloadParseError, exceptions.PayloadCorruptionError)
    ):
        codec.decode_text(damaged)


@pytest.mark.parametrize(
    "text, error",
    [
        ("", exceptions.Base64DecodeError),
        ("!!!!", exceptions.Base64DecodeError),
        ("QUJD", exceptions.DeflateDecodeError),
    ],
)
def test_invalid_text_is_rejected(text: str, error: type) -> None:
    """Tests empty text, non-alphabet text and BASE64 that is not zlib.

    Args:
        text: Wire text to decode.
        error: Expected exception type.
    """
    with pytest.raises(error):
        codec.decode_text(text)


def test_truncated_stream_is_a_deflate_error(batch: List[samples.Sample]) -> None:
    """Tests that a cut-off zlib stream is rejected.

    Args:
        batch: Fixture providing 25 samples.
    """
    compressed = base64.b64decode(codec.encode_payload(batch).text)
    truncated = base64.b64encode(compressed[: len(compressed) // 2]).decode("ascii")

    with pytest.raises(exceptions.DeflateDecodeError):
        codec.decode_text(truncated)


def test_wrong_embedded_checksum_is_corruption() -> None:
    """Tests a well-formed stream whose CRC does not match its content."""
    framed = (0).to_bytes(4, "big") + b'{"a":1}\n'
    text = base64.b64encode(zlib.compress(framed)).decode("ascii")

    with pytest.raises(exceptions.PayloadCorruptionError, match="checksum"):
        codec.decode_text(text)


def test_declared_metadata_must_match(batch: List[samples.Sample]) -> None:
    """Tests that a wrong declared length or checksum is corruption.

    Args:
        batch: Fixture providing 25 samples.
    """
    payload = codec.encode_payload(batch)

    for damaged in (
        dataclasses.replace(payload, declared_raw_len=payload.declared_raw_len + 1),
        dataclasses.replace(payload, checksum=payload.checksum ^ 1),
    ):
        with pytest.raises(exceptions.PayloadCorruptionError):
            codec.decode_payload(damaged)


def test_valid_frame_with_bad_records_is_a_parse_error() -> None:
    """Tests that intact bytes holding non-sample JSON raise SampleParseError."""
    with pytest.raises(exceptions.SampleParseError):
        codec.decode_text(_frame(b'{"sample_id":1}\n'))
    with pytest.raises(exceptions.SampleParseError):
        codec.decode_text(_frame(b"not json\n"))
