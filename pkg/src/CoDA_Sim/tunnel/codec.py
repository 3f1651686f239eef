"""Module providing the down-tunnel payload codec.

Wire format, bit-exact::

    BASE64( zlib( crc32_be(raw) + raw ) )

where ``raw`` is the canonical LDJSON serialization of the samples, ``zlib`` is
an RFC 1950 stream and BASE64 uses the RFC 4648 standard alphabet with padding.
Decoding checks the CRC before any sample is parsed.
"""

import base64
import binascii
import dataclasses
import zlib
from typing import List, Sequence

from CoDA_Sim.core import exceptions, samples

COMPRESSION_LEVEL = 9
PUBLISHED_REDUCTION = 0.90


@dataclasses.dataclass(frozen=True)
class EncodedPayload:
    """A batch of samples ready for the down tunnel.

    Attributes:
        text: BASE64 text carried over the wire.
        declared_raw_len: Length in bytes of the decompressed LDJSON.
        checksum: CRC-32 of the decompressed LDJSON.
    """

    text: str
    declared_raw_len: int
    checksum: int

    @property
    def compressed_len(self) -> int:
        """Length in bytes of the DEFLATE stream inside ``text``."""
        padding = len(self.text) - len(self.text.rstrip("="))
        return len(self.text) * 3 // 4 - padding

    @property
    def compression_ratio(self) -> float:
        """Compressed size over raw size."""
        return self.compressed_len / max(self.declared_raw_len, 1)


def encode_payload(batch: Sequence[samples.Sample]) -> EncodedPayload:
    """Serializes, checksums, compresses and BASE64-encodes samples.

    Args:
        batch: Samples to send, nonempty.

    Returns:
        The payload; identical input always yields identical text.

    Raises:
        EmptyInputError: If ``batch`` is empty.
    """
    if not batch:
        raise exceptions.EmptyInputError("Cannot encode an empty batch.")
    raw = samples.to_ldjson(batch)
    checksum = zlib.crc32(raw)
    framed = checksum.to_bytes(4, "big") + raw
    text = base64.b64encode(zlib.compress(framed, COMPRESSION_LEVEL)).decode("ascii")
    return EncodedPayload(text=text, declared_raw_len=len(raw), checksum=checksum)


def decode_text(text: str) -> List[samples.Sample]:
    """Decodes wire text whose metadata travelled separately or not at all.

    Args:
        text: BASE64 text produced by ``encode_payload``.

    Returns:
        The samples.

    Raises:
        Base64DecodeError: If the text is not padded standard BASE64.
        DeflateDecodeError: If the bytes are not a complete zlib stream.
        PayloadCorruptionError: If the embedded CRC does not match.
        SampleParseError: If the LDJSON is not a list of valid samples.
    """
    raw, _ = _unwrap(text)
    return samples.from_ldjson(raw)


def decode_payload(payload: EncodedPayload) -> List[samples.Sample]:
    """Exact inverse of ``encode_payload``.

    The embedded CRC, the declared length and the declared checksum must all
    agree with the decompressed bytes before they are parsed.

    Raises:
        Base64DecodeError: If the text is not padded standard BASE64.
        DeflateDecodeError: If the bytes are not a complete zlib stream.
        PayloadCorruptionError: If any integrity check fails.
        SampleParseError: If the LDJSON is not a list of valid samples.
    """
    raw, checksum = _unwrap(payload.text)
    if len(raw) != payload.declared_raw_len or checksum != payload.checksum:
        raise exceptions.PayloadCorruptionError(
            "Payload does not match its declared length or checksum."
        )
    return samples.from_ldjson(raw)


def _unwrap(text: str) -> tuple[bytes, int]:
    if not text:
        raise exceptions.Base64DecodeError("Payload text is empty.")
    try:
        compressed = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as err:
        raise exceptions.Base64DecodeError(f"Invalid BASE64: {err}") from err
    decompressor = zlib.decompressobj()
    try:
        framed = decompressor.decompress(compressed)
    except zlib.error as err:
        raise exceptions.DeflateDecodeError(f"Invalid DEFLATE stream: {err}") from err
    if not decompressor.eof or decompressor.unused_data:
        raise exceptions.DeflateDecodeError("DEFLATE stream is incomplete.")
    if len(framed) < 4:
        raise exceptions.PayloadCorruptionError("Payload is missing its checksum.")
    checksum = int.from_bytes(framed[:4], "big")
    raw = framed[4:]
    if zlib.crc32(raw) != checksum:
        raise exceptions.PayloadCorruptionError("Payload checksum mismatch.")
    return raw, checksum
