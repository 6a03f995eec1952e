"""
Per-point polarimetric reflection model.

The surface Mueller matrix is a specular block ``c_s * diag(1, 1, -1, -1)``
plus a diffuse block whose first row/column carries the Fresnel-transmission
polarization. Radiometric terms come from a compact Fresnel-microfacet
surrogate:

    c_s = k_s * F(mu, l.h) * D(n.h; alpha, beta) / (4 n.v)
    c_d = K_b * n.l                                   (kappa = 0)
    D   = exp(-tan^2/alpha^2) / (pi alpha^2 cos^4) * (1 + beta sin^2)

with ``F`` the unpolarized dielectric Fresnel reflectance and no shadowing
term. Vectors live in the camera frame (x right, y down, z forward); ``v``
and ``l`` point from the surface toward the camera and the light.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DegenerateError, PreconditionError
from .polcore import angular_distance, canonical_aolp


@dataclass(frozen=True)
class BrdfParams:
    mu: float = 1.5
    k_s: float = 1.0
    alpha: float = 0.3
    beta: float = 0.0
    kappa: float = 0.0
    K_b: np.ndarray | float = 1.0  # per point and/or per channel

    def __post_init__(self):
        if self.kappa != 0.0:
            raise PreconditionError("mesoscopic roughness is fixed at 0")
        if not 1.0 < self.mu <= 3.0:
            raise PreconditionError(f"refractive index must lie in (1, 3], got {self.mu}")
        if self.k_s < 0 or self.alpha <= 0 or self.beta < 0:
            raise PreconditionError("need k_s >= 0, alpha > 0, beta >= 0")

    def material(self) -> np.ndarray:
        return np.array([self.mu, self.k_s, self.alpha, self.beta])


@dataclass(frozen=True)
class DiffusePolarization:
    dolp_d: np.ndarray
    aolp_d: np.ndarray  # degrees


@dataclass(frozen=True)
class SurfaceMueller:
    """Eq.-5 style reflection: ``c_s``, per-channel ``c_d`` and diffuse entries.

    ``c_s``, ``md10`` and ``md20`` have shape ``(...)``; ``c_d`` is ``(..., C)``.
    """

    c_s: np.ndarray
    c_d: np.ndarray
    md10: np.ndarray
    md20: np.ndarray

    @property
    def md01(self):
        return self.md10

    @property
    def md02(self):
        return -np.asarray(self.md20)

    def matrix(self) -> np.ndarray:
        """Full 4x4 matrices, shape ``(..., C, 4, 4)``."""
        cs = np.asarray(self.c_s, dtype=float)[..., None]
        cd = np.asarray(self.c_d, dtype=float)
        md10 = np.asarray(self.md10, dtype=float)[..., None]
        md20 = np.asarray(self.md20, dtype=float)[..., None]
        cs, cd, md10, md20 = np.broadcast_arrays(cs, cd, md10, md20)
        m = np.zeros(cd.shape + (4, 4))
        m[..., 0, 0] = cs + cd
        m[..., 1, 1] = cs
        m[..., 2, 2] = -cs
        m[..., 3, 3] = -cs
        m[..., 0, 1] = m[..., 1, 0] = cd * md10
        m[..., 2, 0] = cd * md20
        m[..., 0, 2] = -cd * md20
        return m

    def apply(self, s_in) -> np.ndarray:
        """Reflect incident linear Stokes ``(..., 3)`` into ``(..., C, 3)``."""
        s_in = np.asarray(s_in, dtype=float)
        s0, s1, s2 = (s_in[..., i][..., None] for i in range(3))
        cs = np.asarray(self.c_s, dtype=float)[..., None]
        cd = np.asarray(self.c_d, dtype=float)
        m10 = cd * np.asarray(self.md10, dtype=float)[..., None]
        m20 = cd * np.asarray(self.md20, dtype=float)[..., None]
        o0 = (cs + cd) * s0 + m10 * s1 - m20 * s2
        o1 = m10 * s0 + cs * s1
        o2 = m20 * s0 - cs * s2
        return np.stack(np.broadcast_arrays(o0, o1, o2), axis=-1)


def surface_mueller(c_s, c_d, dp: DiffusePolarization) -> SurfaceMueller:
    c_s = np.asarray(c_s, dtype=float)
    c_d = np.asarray(c_d, dtype=float)
    if np.any(c_s < 0) or np.any(c_d < 0):
        raise PreconditionError("radiometric terms must be non-negative")
    two = 2.0 * np.radians(dp.aolp_d)
    return SurfaceMueller(c_s, c_d, dp.dolp_d * np.cos(two), dp.dolp_d * np.sin(two))


def diffuse_from_mueller(md10, md20) -> DiffusePolarization:
    """Polar form of the diffuse entries (DoLP, AoLP in degrees)."""
    md10 = np.asarray(md10, dtype=float)
    md20 = np.asarray(md20, dtype=float)
    return DiffusePolarization(np.hypot(md10, md20),
                               canonical_aolp(0.5 * np.degrees(np.arctan2(md20, md10))))


# --- diffuse polarization ------------------------------------------------------

def diffuse_dolp_cos(cos_z, mu, derivatives: bool = False):
    """Fresnel-transmission diffuse DoLP from the cosine of the zenith angle.

    With ``derivatives=True`` also returns d/dcos_z and d/dmu.
    """
    c = np.asarray(cos_z, dtype=float)
    s2 = 1.0 - c * c
    m_minus = mu - 1.0 / mu
    m_plus = mu + 1.0 / mu
    r = np.sqrt(mu * mu - s2)
    num = m_minus ** 2 * s2
    den = 2.0 + 2.0 * mu * mu - m_plus ** 2 * s2 + 4.0 * c * r
    rho = num / den
    if not derivatives:
        return rho
    dnum_dc = -2.0 * c * m_minus ** 2
    dden_dc = 2.0 * c * m_plus ** 2 + 4.0 * r + 4.0 * c * c / r
    dnum_dmu = 2.0 * m_minus * (1.0 + 1.0 / mu ** 2) * s2
    dden_dmu = 4.0 * mu - 2.0 * m_plus * (1.0 - 1.0 / mu ** 2) * s2 + 4.0 * c * mu / r
    drho_dc = (dnum_dc * den - num * dden_dc) / den ** 2
    drho_dmu = (dnum_dmu * den - num * dden_dmu) / den ** 2
    return rho, drho_dc, drho_dmu


def diffuse_dolp(zenith_deg, mu):
    zenith = np.asarray(zenith_deg, dtype=float)
    if np.any(zenith < 0) or np.any(zenith >= 90):
        raise PreconditionError("zenith must lie in [0, 90) degrees")
    if mu <= 1:
        raise PreconditionError("refractive index must exceed 1")
    return diffuse_dolp_cos(np.cos(np.radians(zenith)), mu)


def diffuse_aolp(normal):
    """Azimuth of the normal's image-plane projection, canonical degrees.

    Returns ``(aolp, defined)``; frontal normals are undefined (AoLP 0).
    """
    n = np.asarray(normal, dtype=float)
    nx, ny = n[..., 0], n[..., 1]
    defined = np.hypot(nx, ny) > 1e-15
    aolp = np.where(defined, canonical_aolp(np.degrees(np.arctan2(ny, nx))), 0.0)
    return aolp, defined


def diffuse_polarization(normal, view, mu) -> DiffusePolarization:
    n = np.asarray(normal, dtype=float)
    cos_z = np.clip(np.sum(n * view, axis=-1), 0.0, 1.0)
    aolp, _ = diffuse_aolp(n)
    return DiffusePolarization(diffuse_dolp_cos(cos_z, mu), aolp)


def reflected_aolp(c_d, c_s, dolp_d, aolp_d, dolp_i, aolp_i):
    """Observed AoLP of a surface lit by linearly polarized light.

    Returns ``(aolp_deg, defined)``.
    """
    td = 2.0 * np.radians(aolp_d)
    ti = 2.0 * np.radians(aolp_i)
    num = c_d * dolp_d * np.sin(td) - c_s * dolp_i * np.sin(ti)
    den = c_d * dolp_d * np.cos(td) + c_s * dolp_i * np.cos(ti)
    defined = np.hypot(num, den) > 1e-15
    return canonical_aolp(0.5 * np.degrees(np.arctan2(num, den))), defined


def max_aolp_modulation(cd_over_cs: float, rho_ratio: float, aolp_i: float = 0.0) -> float:
    """Worst-case |reflected AoLP - (-incident AoLP)| over all diffuse AoLPs.

    Dense grid over the diffuse AoLP followed by bounded 1-D refinement.
    """
    def deviation(phi_d):
        phi_o, _ = reflected_aolp(cd_over_cs, 1.0, rho_ratio, phi_d, 1.0, aolp_i)
        return angular_distance(phi_o, -aolp_i)

    grid = np.linspace(-90.0, 90.0, 3601)
    dev = deviation(grid)
    i = int(np.argmax(dev))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(lambda p: -deviation(p), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-10})
    return float(max(dev[i], -res.fun))


# --- radiometric surrogate --------------------------------------------------------

def fresnel_reflectance(mu, cos_d, derivative: bool = False):
    """Unpolarized dielectric Fresnel reflectance (optionally with d/dmu)."""
    c = np.clip(np.asarray(cos_d, dtype=float), 1e-12, 1.0)
    g = np.sqrt(mu * mu - 1.0 + c * c)
    p = ((g - c) / (g + c)) ** 2
    q_num = c * (g + c) - 1.0
    q_den = c * (g - c) + 1.0
    q = q_num / q_den
    f = 0.5 * p * (1.0 + q * q)
    if not derivative:
        return f
    dp = 4.0 * c * (g - c) / (g + c) ** 3
    dq = 2.0 * c * (1.0 - c * c) / q_den ** 2
    df_dg = 0.5 * (dp * (1.0 + q * q) + p * 2.0 * q * dq)
    return f, df_dg * mu / g


def microfacet_distribution(cos_h, alpha, beta, derivatives: bool = False):
    """Beckmann-style lobe with a ``beta`` shape correction.

    With ``derivatives=True`` returns ``(D, dD/dcos_h, dD/dalpha, dD/dbeta)``.
    """
    ch = np.clip(np.asarray(cos_h, dtype=float), 1e-6, 1.0)
    c2 = ch * ch
    sin2 = 1.0 - c2
    tan2 = sin2 / c2
    base = np.exp(-tan2 / alpha ** 2) / (np.pi * alpha ** 2 * c2 * c2)
    shape = 1.0 + beta * sin2
    d = base * shape
    if not derivatives:
        return d
    dlog_dch = 2.0 / (alpha ** 2 * ch ** 3) - 4.0 / ch - 2.0 * beta * ch / shape
    dd_dalpha = d * (2.0 * tan2 / alpha ** 3 - 2.0 / alpha)
    return d, d * dlog_dch, dd_dalpha, base * sin2


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def half_vector(light, view):
    return _unit(np.asarray(light, dtype=float) + view)


def shade(brdf: BrdfParams, normal, light, view, K_b=None):
    """Radiometric terms ``(c_s, c_d)`` for unit ``normal``, ``light``, ``view``.

    ``K_b`` defaults to ``brdf.K_b`` and broadcasts as ``(..., C)``; both
    terms vanish when the light or the viewer is below the surface.
    """
    n = np.asarray(normal, dtype=float)
    l = np.asarray(light, dtype=float)
    v = np.asarray(view, dtype=float)
    kb = np.asarray(brdf.K_b if K_b is None else K_b, dtype=float)
    h = half_vector(l, v)
    cos_i = np.sum(n * l, axis=-1)
    cos_v = np.sum(n * v, axis=-1)
    lit = (cos_i > 0) & (cos_v > 0)
    cos_h = np.sum(n * h, axis=-1)
    cos_d = np.sum(l * h, axis=-1)
    f = fresnel_reflectance(brdf.mu, cos_d)
    d = microfacet_distribution(cos_h, brdf.alpha, brdf.beta)
    c_s = np.where(lit, brdf.k_s * f * d / (4.0 * np.where(lit, cos_v, 1.0)), 0.0)
    if kb.ndim == 0:
        kb = kb[None]
    c_d = np.where(lit[..., None], kb * np.clip(cos_i, 0.0, None)[..., None], 0.0)
    return c_s, c_d


def point_mueller(brdf: BrdfParams, normal, light, view, K_b=None) -> SurfaceMueller:
    """Shade plus diffuse polarization at camera-frame points."""
    c_s, c_d = shade(brdf, normal, light, view, K_b)
    dp = diffuse_polarization(normal, view, brdf.mu)
    return surface_mueller(c_s, c_d, dp)


def require_diffuse(c_d, m00, tol=1e-9):
    if np.any(np.asarray(c_d) <= tol * np.abs(m00)):
        raise DegenerateError("diffuse term vanishes; diffuse polarization undefined")
