"""Bit-exact array serialization shared by the pool and checkpoint formats."""

import base64

import numpy as np


def pack_floats(arr) -> str:
    """Base64 of the little-endian float64 bytes; round-trips bit-exactly."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    return base64.b64encode(a.tobytes()).decode("ascii")


def unpack_floats(text: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except Exception as exc:
        raise ValueError(f"bad base64 array payload: {exc}") from None
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if isinstance(shape, int) and shape < 0:  # length unknown to the caller
        return flat
    want = shape if isinstance(shape, int) else int(np.prod(shape))
    if flat.size != want:
        raise ValueError(f"array payload has {flat.size} values, expected {want}")
    return flat.reshape(shape)
