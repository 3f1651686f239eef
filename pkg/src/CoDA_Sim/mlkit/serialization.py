"""Versioned binary model blobs.

Layout, little-endian throughout::

    b"CODA" | u16 format version | u8 model kind | u64 seed
    | u16 n_hparams | u32 * n_hparams
    | u16 layer count
    | per layer: u16 name length | name (UTF-8) | u8 ndim | u32 * ndim
                 | row-major float64 values

Encoding the same parameters always yields the same bytes.
"""

import struct
from typing import Dict, Type

import numpy as np

from CoDA_Sim.core import exceptions
from CoDA_Sim.mlkit import models

MAGIC = b"CODA"
FORMAT_VERSION = 1

_MODEL_CLASSES: Dict[int, Type[models.Model]] = {
    models.KIND_CLASSIFIER: models.ClassifierModel,
    models.KIND_RECOMMENDER: models.RecommenderModel,
}


def dumps(model: models.Model) -> bytes:
    """Serializes a model to its binary blob.

    Args:
        model: Classifier or recommender model.

    Returns:
        The blob bytes.
    """
    hparams = model.hparams()
    parts = [
        MAGIC,
        struct.pack("<HBQH", FORMAT_VERSION, model.kind, model.seed, len(hparams)),
        struct.pack(f"<{len(hparams)}I", *hparams),
        struct.pack("<H", len(model.params)),
    ]
    for name, array in model.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    """Cursor over a blob that raises ModelFormatError on truncation."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise exceptions.ModelFormatError("Model blob is truncated.")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> models.Model:
    """Rebuilds a model from its binary blob.

    Args:
        data: Bytes produced by ``dumps``.

    Returns:
        The model, with parameters bitwise equal to the serialized ones.

    Raises:
        ModelFormatError: If the blob is malformed, truncated or of an unknown
            version or kind.
    """
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise exceptions.ModelFormatError("Bad magic bytes.")
    version, kind, seed, n_hparams = reader.unpack("<HBQH")
    if version != FORMAT_VERSION:
        raise exceptions.ModelFormatError(f"Unsupported format version {version}.")
    if kind not in _MODEL_CLASSES:
        raise exceptions.ModelFormatError(f"Unknown model kind {kind}.")
    hparams = reader.unpack(f"<{n_hparams}I")
    try:
        model = _MODEL_CLASSES[kind].from_hparams(seed, hparams)
    except ValueError as err:
        raise exceptions.ModelFormatError(f"Invalid model header: {err}") from err

    (n_layers,) = reader.unpack("<H")
    if n_layers != len(model.params):
        raise exceptions.ModelFormatError("Layer count does not match the header.")
    for _ in range(n_layers):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as err:
            raise exceptions.ModelFormatError("Layer name is not UTF-8.") from err
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        expected = model.params.get(name)
        if expected is None or expected.shape != tuple(shape):
            raise exceptions.ModelFormatError(f"Unexpected layer '{name}' {shape}.")
        raw = reader.take(8 * expected.size)
        values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        model.params[name] = values.reshape(shape)
    if reader.offset != len(data):
        raise exceptions.ModelFormatError("Trailing bytes after the last layer.")
    return model
