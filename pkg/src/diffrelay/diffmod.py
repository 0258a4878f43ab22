"""Differential encoding for unitary (PSK) and non-unitary (QAM) alphabets.

Unitary encoding multiplies phases: v[n] = v[n-1] * x[n].  Non-unitary
encoding divides out the previous symbol's magnitude so the transmitted
power tracks the alphabet's: v[n] = v[n-1] * x[n] / |x[n-1]|, which makes
|v[n]| = |x[n]| hold exactly along the whole stream.  Both streams start
from the initialization symbol v[0] = 1 with |x[0]| taken as 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constellation import ConstellationSpec

_UNIT_TOL = 1e-9


@dataclass(frozen=True)
class DiffState:
    """Carry-over between consecutive differential encodings of one stream."""

    prev_v: complex = 1.0 + 0.0j
    prev_x_mag: float = 1.0

    def __post_init__(self) -> None:
        if not self.prev_x_mag > 0.0:
            raise ValueError(f"prev_x_mag must be > 0, got {self.prev_x_mag}")


def encode_psk(state: DiffState, x: complex) -> tuple[DiffState, complex]:
    """Encode one unit-modulus symbol; returns (new state, transmitted v)."""
    x = complex(x)
    if abs(abs(x) - 1.0) > _UNIT_TOL:
        raise ValueError(f"PSK symbol must be unit modulus, got |x| = {abs(x)}")
    v = state.prev_v * x
    return DiffState(prev_v=v, prev_x_mag=1.0), v


def encode_qam(state: DiffState, x: complex) -> tuple[DiffState, complex]:
    """Encode one alphabet symbol of arbitrary magnitude."""
    x = complex(x)
    if x == 0:
        raise ValueError("cannot differentially encode a zero symbol")
    v = state.prev_v * x / state.prev_x_mag
    return DiffState(prev_v=v, prev_x_mag=abs(x)), v


def encode_psk_frame(indices: np.ndarray, spec: ConstellationSpec) -> np.ndarray:
    """Vectorized PSK encoding of index frames.

    ``indices`` has shape (..., L); the result has shape (..., L+1) with the
    initialization symbol in slot 0.  Phase accumulation is done on integer
    indices, so every transmitted symbol is an exact constellation point.
    """
    indices = np.asarray(indices)
    if spec.kind != "psk":
        raise ValueError("encode_psk_frame requires a PSK alphabet")
    csum = np.cumsum(indices, axis=-1) % spec.M
    out = np.empty(indices.shape[:-1] + (indices.shape[-1] + 1,), dtype=complex)
    out[..., 0] = 1.0
    out[..., 1:] = spec.points[csum]
    return out


def encode_qam_frame(indices: np.ndarray, spec: ConstellationSpec) -> np.ndarray:
    """Vectorized QAM encoding of index frames; same shapes as the PSK form."""
    indices = np.asarray(indices)
    if spec.kind != "qam":
        raise ValueError("encode_qam_frame requires a QAM alphabet")
    x = spec.points[indices]
    unit = x / np.abs(x)
    phase = np.cumprod(unit, axis=-1)
    out = np.empty(indices.shape[:-1] + (indices.shape[-1] + 1,), dtype=complex)
    out[..., 0] = 1.0
    out[..., 1] = x[..., 0]
    out[..., 2:] = x[..., 1:] * phase[..., :-1]
    return out
