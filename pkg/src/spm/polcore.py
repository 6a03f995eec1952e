"""
Stokes / Mueller algebra and an ideal division-of-focal-plane camera.

Stokes data is carried as numpy arrays whose last axis holds the linear
components ``(s0, s1, s2)``; a fourth circular component is accepted on
input and always treated as zero. Angles are degrees at the interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateError, PreconditionError

# Filter angle sampled at position (row % 2, col % 2) of each 2x2 super-pixel.
MOSAIC_LAYOUT = np.array([[90.0, 45.0], [135.0, 0.0]])

REALIZABILITY_SLACK = 1e-9


class StokesVector(NamedTuple):
    s0: float
    s1: float
    s2: float
    s3: float = 0.0


class LinearPolarizationState(NamedTuple):
    """Mean intensity, DoLP and AoLP (degrees, in [-90, 90))."""

    mean_intensity: np.ndarray
    dolp: np.ndarray
    aolp: np.ndarray
    aolp_defined: np.ndarray


@dataclass(frozen=True)
class PolarimetricImage:
    """Per-pixel linear Stokes field, shape ``(height, width, channels, 3)``."""

    stokes: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.stokes, dtype=float)
        if s.ndim != 4 or s.shape[-1] != 3 or s.shape[2] not in (1, 3):
            raise PreconditionError(f"stokes must be (H, W, 1|3, 3), got {s.shape}")
        object.__setattr__(self, "stokes", s)

    @property
    def height(self) -> int:
        return self.stokes.shape[0]

    @property
    def width(self) -> int:
        return self.stokes.shape[1]

    @property
    def channels(self) -> int:
        return self.stokes.shape[2]

    @property
    def s0(self) -> np.ndarray:
        return self.stokes[..., 0]


def canonical_aolp(angle_deg):
    """Reduce an AoLP (degrees) modulo 180 into [-90, 90)."""
    return np.mod(np.asarray(angle_deg, dtype=float) + 90.0, 180.0) - 90.0


def angular_distance(a_deg, b_deg):
    """Distance between two AoLPs under the 180-degree periodic metric."""
    d = np.mod(np.asarray(a_deg, dtype=float) - b_deg + 90.0, 180.0) - 90.0
    return np.abs(d)


def _linear(s):
    s = np.asarray(s, dtype=float)
    if s.shape[-1] == 4:
        s = s[..., :3]
    if s.shape[-1] != 3:
        raise PreconditionError(f"Stokes arrays need 3 or 4 components, got {s.shape[-1]}")
    return s


def clamp_realizable(s):
    """Rescale (s1, s2) so that the linear DoLP never exceeds one."""
    s = np.array(_linear(s), dtype=float)
    norm = np.hypot(s[..., 1], s[..., 2])
    s0 = np.maximum(s[..., 0], 0.0)
    over = norm > s0
    scale = np.where(over, s0 / np.where(norm > 0, norm, 1.0), 1.0)
    s[..., 0] = s0
    s[..., 1] *= scale
    s[..., 2] *= scale
    return s


def stokes_from_intensities(i0, i45, i90, i135):
    """Linear Stokes ``(..., 3)`` from four polarizer-filtered intensities."""
    i0, i45, i90, i135 = (np.asarray(v, dtype=float) for v in (i0, i45, i90, i135))
    if any(np.any(v < 0) for v in (i0, i45, i90, i135)):
        raise PreconditionError("filtered intensities must be non-negative")
    s = np.stack([i0 + i90, i0 - i90, i45 - i135], axis=-1)
    return clamp_realizable(s)


def to_linear_state(s) -> LinearPolarizationState:
    s = _linear(s)
    s0 = s[..., 0]
    if np.any(s0 <= 0):
        raise DegenerateError("s0 must be positive to define a polarization state")
    norm = np.hypot(s[..., 1], s[..., 2])
    dolp = norm / s0
    defined = norm > 0
    aolp = np.where(defined, canonical_aolp(0.5 * np.degrees(np.arctan2(s[..., 2], s[..., 1]))), 0.0)
    return LinearPolarizationState(s0 / 2.0, dolp, aolp, defined)


def from_linear_state(mean_intensity, dolp, aolp_deg):
    """Inverse of :func:`to_linear_state`."""
    s0 = 2.0 * np.asarray(mean_intensity, dtype=float)
    two_phi = 2.0 * np.radians(aolp_deg)
    return np.stack([s0 + 0 * two_phi, s0 * dolp * np.cos(two_phi), s0 * dolp * np.sin(two_phi)], axis=-1)


def aolp_of(s):
    """AoLP in degrees without the degenerate-light checks (0 where undefined)."""
    s = _linear(s)
    return canonical_aolp(0.5 * np.degrees(np.arctan2(s[..., 2], s[..., 1])))


def apply_mueller(m, s):
    """``M @ s`` for a (..., 4, 4) matrix and (..., 3|4) Stokes; keeps input width."""
    m = np.asarray(m, dtype=float)
    s = np.asarray(s, dtype=float)
    width = s.shape[-1]
    if width == 3:
        s4 = np.concatenate([s, np.zeros(s.shape[:-1] + (1,))], axis=-1)
    elif width == 4:
        s4 = s
    else:
        raise PreconditionError("Stokes arrays need 3 or 4 components")
    out = np.einsum("...ij,...j->...i", m, s4)
    return out[..., :width]


def intensity_through_polarizer(state: LinearPolarizationState | tuple, filter_angle_deg):
    mean, dolp, aolp = state[0], state[1], state[2]
    return mean * (1.0 + dolp * np.cos(2.0 * np.radians(filter_angle_deg) - 2.0 * np.radians(aolp)))


def filtered_intensity(s, filter_angle_deg):
    """Intensity behind a linear polarizer, directly from Stokes components."""
    s = _linear(s)
    t = 2.0 * np.radians(filter_angle_deg)
    return 0.5 * (s[..., 0] + s[..., 1] * np.cos(t) + s[..., 2] * np.sin(t))


def mosaic(image: PolarimetricImage) -> np.ndarray:
    """Raw sensor image ``(H, W, C)`` sampled on the 2x2 filter layout."""
    h, w = image.height, image.width
    if h % 2 or w % 2:
        raise PreconditionError(f"mosaic needs even dimensions, got {h}x{w}")
    angles = np.tile(MOSAIC_LAYOUT, (h // 2, w // 2))[:, :, None]
    return filtered_intensity(image.stokes, angles)


def demosaic(raw) -> PolarimetricImage:
    """Half-resolution Stokes image, one pixel per 2x2 super-pixel."""
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    h, w = raw.shape[:2]
    if h % 2 or w % 2:
        raise PreconditionError(f"demosaic needs even dimensions, got {h}x{w}")
    samples = {}
    for dy in range(2):
        for dx in range(2):
            samples[MOSAIC_LAYOUT[dy, dx]] = np.clip(raw[dy::2, dx::2], 0.0, None)
    s = stokes_from_intensities(samples[0.0], samples[45.0], samples[90.0], samples[135.0])
    return PolarimetricImage(s)
