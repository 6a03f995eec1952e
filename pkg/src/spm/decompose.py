"""
Reduced Mueller recovery from incident/observed Stokes stacks and the
diffuse/specular split.

With a near co-axial rig the surface matrix keeps only ``m00``, ``m10 =
m01``, ``m20 = -m02`` and ``m11 = -m22``. The second and third Stokes rows
are linear in ``(m10, m20, m11)``::

    s1_o = m10 * s0_i + m11 * s1_i
    s2_o = m20 * s0_i - m11 * s2_i

so two pairs with different incident AoLP determine them; ``m00`` then
follows from the first row of a single pair.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, PreconditionError
from .reflectance import DiffusePolarization, SurfaceMueller, diffuse_from_mueller

MAX_CONDITION = 1e8
DIFFUSE_FLOOR = 1e-9


@dataclass(frozen=True)
class MuellerEstimate:
    """Reduced Mueller entries, one value per colour channel."""

    m00: np.ndarray
    m10: np.ndarray
    m20: np.ndarray
    m11: np.ndarray
    residual: np.ndarray

    def matrix(self) -> np.ndarray:
        """Assembled ``(C, 4, 4)`` matrices."""
        c = np.shape(self.m00)
        m = np.zeros(c + (4, 4))
        m[..., 0, 0] = self.m00
        m[..., 0, 1] = m[..., 1, 0] = self.m10
        m[..., 2, 0] = self.m20
        m[..., 0, 2] = -self.m20
        m[..., 1, 1] = self.m11
        m[..., 2, 2] = m[..., 3, 3] = -self.m11
        return m


@dataclass(frozen=True)
class ReflectionSplit:
    c_s: np.ndarray
    c_d: np.ndarray
    md10: np.ndarray
    md20: np.ndarray

    @property
    def diffuse(self) -> DiffusePolarization:
        return diffuse_from_mueller(self.md10, self.md20)

    def mueller(self) -> SurfaceMueller:
        return SurfaceMueller(self.c_s, self.c_d, self.md10, self.md20)


def design_matrix(incident) -> np.ndarray:
    """Stacked ``(2N, 3)`` system in ``(m10, m20, m11)``."""
    s = np.asarray(incident, dtype=float)
    a = np.zeros((2 * len(s), 3))
    a[0::2, 0] = s[:, 0]
    a[0::2, 2] = s[:, 1]
    a[1::2, 1] = s[:, 0]
    a[1::2, 2] = -s[:, 2]
    return a


def solve_mueller(incident, observed, average_m00: bool = False) -> MuellerEstimate:
    """Least-squares reduced Mueller entries from ``N >= 2`` Stokes pairs.

    ``incident`` is ``(N, 3)``; ``observed`` is ``(N, 3)`` or ``(N, C, 3)``.
    The first pair is the centre; ``m00`` comes from it unless
    ``average_m00`` averages the single-pair estimate over the stack.
    """
    s_i = np.asarray(incident, dtype=float)[..., :3]
    s_o = np.asarray(observed, dtype=float)[..., :3]
    if s_o.ndim == 2:
        s_o = s_o[:, None, :]
    n = len(s_i)
    if n < 2 or len(s_o) != n:
        raise PreconditionError(f"need at least two matching Stokes pairs, got {n}")
    if np.any(s_i[:, 0] <= 0):
        raise DegenerateError("incident s0 must be positive")
    a = design_matrix(s_i)
    if np.linalg.cond(a) > MAX_CONDITION:
        raise DegenerateError("incident AoLPs in the stack are not diverse enough")
    b = np.empty((2 * n, s_o.shape[1]))
    b[0::2] = s_o[:, :, 1]
    b[1::2] = s_o[:, :, 2]
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    m10, m20, m11 = x
    residual = np.linalg.norm(a @ x - b, axis=0)
    per_pair = (s_o[:, :, 0] - s_i[:, 1:2] * m10 + s_i[:, 2:3] * m20) / s_i[:, 0:1]
    m00 = per_pair.mean(axis=0) if average_m00 else per_pair[0]
    return MuellerEstimate(m00, m10, m20, m11, residual)


def split_reflections(m: MuellerEstimate, clamp: bool = True) -> ReflectionSplit:
    """``c_s = m11``, ``c_d = m00 - m11`` and the normalised diffuse entries.

    Negative ``c_d`` (noise) is clamped to zero with a warning when
    ``clamp`` and its diffuse entries are ``nan``. A non-negative diffuse
    term below ``1e-9 * m00`` raises: the diffuse polarization is undefined.
    """
    m00 = np.asarray(m.m00, dtype=float)
    c_s = np.asarray(m.m11, dtype=float)
    c_d = m00 - c_s
    negative = c_d < 0
    if np.any(negative) and not clamp:
        raise DegenerateError("negative diffuse term")
    if np.any((~negative) & (c_d < DIFFUSE_FLOOR * np.abs(m00))):
        raise DegenerateError("diffuse term vanishes; diffuse polarization undefined")
    if np.any(negative):
        warnings.warn("negative diffuse term clamped to zero", RuntimeWarning, stacklevel=2)
    safe = np.where(negative, 1.0, c_d)
    md10 = np.where(negative, np.nan, np.asarray(m.m10) / safe)
    md20 = np.where(negative, np.nan, np.asarray(m.m20) / safe)
    return ReflectionSplit(c_s, np.maximum(c_d, 0.0), md10, md20)


@dataclass
class Decomposition:
    """Per-correspondence split; rows of invalid stacks are ``nan``."""

    c_s: np.ndarray     # (N, C)
    c_d: np.ndarray     # (N, C)
    md10: np.ndarray    # (N, C)
    md20: np.ndarray    # (N, C)
    m00: np.ndarray     # (N, C)
    residual: np.ndarray
    valid: np.ndarray   # (N,)


def decompose_correspondences(corr, average_m00: bool = False, clamp: bool = True) -> Decomposition:
    """Solve and split the stack of every correspondence in a set.

    Points with fewer than two pairs or a degenerate stack are marked
    invalid instead of raising.
    """
    n = len(corr)
    channels = corr.observed.shape[-2]
    out = {k: np.full((n, channels), np.nan) for k in ("c_s", "c_d", "md10", "md20", "m00", "residual")}
    valid = np.zeros(n, dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(n):
            inc, obs = corr.stack(i)
            if len(inc) < 2:
                continue
            try:
                est = solve_mueller(inc, obs, average_m00)
                sp = split_reflections(est, clamp)
            except (DegenerateError, PreconditionError):
                continue
            out["c_s"][i], out["c_d"][i] = sp.c_s, sp.c_d
            out["md10"][i], out["md20"][i] = sp.md10, sp.md20
            out["m00"][i], out["residual"][i] = est.m00, est.residual
            valid[i] = bool(np.all(np.isfinite(sp.md10)))
    return Decomposition(valid=valid, **out)
