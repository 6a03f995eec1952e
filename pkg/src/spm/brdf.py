"""
Shape and reflectance refinement from decomposed reflections.

Global material ``(mu, k_s, alpha, beta)`` and per-point normals minimise

    sum_i |c_s(n_i) - c_s_i|^2 + lambda_d |md(n_i) - md_i|^2
          + lambda_n huber(|n_i - n_i_init|)

where ``huber(r) = sqrt(r^2 + delta^2) - delta`` smooths the unsquared norm
at zero. The solver alternates a bounded trust-region material step with
a per-point damped Gauss-Newton normal step on two tangent parameters,
both with analytic Jacobians. Per-point albedo then has a closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from .errors import PreconditionError
from .reflectance import (BrdfParams, diffuse_dolp_cos, fresnel_reflectance, half_vector,
                          microfacet_distribution, surface_mueller, diffuse_polarization, shade)


# --- PCA normals ------------------------------------------------------------------

def pca_normals(points, k_neighbors: int = 12, flag_ratio: float = 1e-10):
    """Smallest principal axis of each k-nearest-neighbour patch.

    Normals face the camera at the origin. Returns ``(normals, valid)``;
    neighbourhoods whose covariance has rank < 2 are flagged invalid.
    """
    pts = np.asarray(points, dtype=float)
    if k_neighbors < 3:
        raise PreconditionError("k_neighbors must be >= 3")
    if len(pts) < k_neighbors:
        raise PreconditionError(f"need at least {k_neighbors} points, got {len(pts)}")
    _, idx = cKDTree(pts).query(pts, k=k_neighbors)
    nb = pts[idx]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k_neighbors
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    flip = np.sum(normals * -pts, axis=-1) < 0
    normals[flip] *= -1.0
    valid = w[:, 1] > flag_ratio * np.maximum(w[:, 2], np.finfo(float).tiny)
    return normals, valid


# --- forward model and derivatives -------------------------------------------------

@dataclass
class FitData:
    """Observed split at fixed 3D points, with light and view directions."""

    points: np.ndarray   # (N, 3)
    c_s: np.ndarray      # (N, C)
    md10: np.ndarray     # (N, C)
    md20: np.ndarray     # (N, C)
    light: np.ndarray    # (N, 3) unit, toward the light
    view: np.ndarray     # (N, 3) unit, toward the camera
    c_d: np.ndarray | None = None

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_points(cls, points, c_s, md10, md20, light_position, c_d=None) -> "FitData":
        p = np.asarray(points, dtype=float)
        def col(a):
            a = np.asarray(a, dtype=float)
            return a[:, None] if a.ndim == 1 else a
        light = np.asarray(light_position, dtype=float) - p
        light /= np.linalg.norm(light, axis=-1, keepdims=True)
        view = -p / np.linalg.norm(p, axis=-1, keepdims=True)
        return cls(p, col(c_s), col(md10), col(md20), light, view, None if c_d is None else col(c_d))


def _azimuth_terms(n):
    nx, ny = n[:, 0], n[:, 1]
    q = nx * nx + ny * ny
    # the azimuth is undefined along the optical axis, where the diffuse DoLP vanishes
    axial = q < 1e-24
    q = np.where(axial, 1.0, q)
    c2 = np.where(axial, 1.0, (nx * nx - ny * ny) / q)
    s2 = np.where(axial, 0.0, 2.0 * nx * ny / q)
    dc2 = np.zeros_like(n)
    ds2 = np.zeros_like(n)
    q2 = np.where(axial, np.inf, q * q)
    dc2[:, 0] = 4.0 * nx * ny * ny / q2
    dc2[:, 1] = -4.0 * ny * nx * nx / q2
    ds2[:, 0] = 2.0 * ny * (ny * ny - nx * nx) / q2
    ds2[:, 1] = 2.0 * nx * (nx * nx - ny * ny) / q2
    return c2, s2, dc2, ds2


def predict(theta, normals, light, view, derivatives: bool = False):
    """Rendered ``(c_s, md10, md20)`` per point.

    With ``derivatives`` also returns Jacobians with respect to the material
    ``(N, 3, 4)`` and to the raw normal components ``(N, 3, 3)``; normals
    enter the formulas unnormalised.
    """
    mu, k_s, alpha, beta = (float(t) for t in theta)
    n = np.asarray(normals, dtype=float)
    h = half_vector(light, view)
    cos_v = np.sum(n * view, axis=-1)
    cos_i = np.sum(n * light, axis=-1)
    cos_h = np.sum(n * h, axis=-1)
    cos_d = np.sum(light * h, axis=-1)
    lit = (cos_i > 0) & (cos_v > 0)
    cv = np.where(lit, cos_v, 1.0)
    f, df_dmu = fresnel_reflectance(mu, cos_d, derivative=True)
    d, dd_dch, dd_da, dd_db = microfacet_distribution(cos_h, alpha, beta, derivatives=True)
    inv = 1.0 / (4.0 * cv)
    cs = np.where(lit, k_s * f * d * inv, 0.0)
    rho, drho_dc, drho_dmu = diffuse_dolp_cos(np.clip(cv, 0.0, 1.0), mu, derivatives=True)
    c2, s2, dc2, ds2 = _azimuth_terms(n)
    md10 = rho * c2
    md20 = rho * s2
    if not derivatives:
        return cs, md10, md20
    jt = np.zeros((len(n), 3, 4))
    jt[:, 0, 0] = k_s * df_dmu * d * inv
    jt[:, 0, 1] = f * d * inv
    jt[:, 0, 2] = k_s * f * dd_da * inv
    jt[:, 0, 3] = k_s * f * dd_db * inv
    jt[:, 0] *= lit[:, None]
    jt[:, 1, 0] = drho_dmu * c2
    jt[:, 2, 0] = drho_dmu * s2
    jn = np.zeros((len(n), 3, 3))
    # c_s = k_s f d(n.h) / (4 n.v); d/dch clipped region contributes zero
    inside = (cos_h > 1e-6) & (cos_h < 1.0)
    dcs_dch = np.where(inside, k_s * f * dd_dch * inv, 0.0)
    dcs_dcv = -cs / cv
    jn[:, 0] = (dcs_dch[:, None] * h + dcs_dcv[:, None] * view) * lit[:, None]
    jn[:, 1] = (drho_dc * c2)[:, None] * view + rho[:, None] * dc2
    jn[:, 2] = (drho_dc * s2)[:, None] * view + rho[:, None] * ds2
    return cs, md10, md20, jt, jn


# --- objective -----------------------------------------------------------------

@dataclass
class FitConfig:
    lambda_d: float = 0.01
    lambda_n: float = 0.001
    max_iter: int = 50
    tol: float = 1e-12
    huber_delta: float = 1e-6
    init: BrdfParams = field(default_factory=lambda: BrdfParams(mu=1.5, k_s=0.04, alpha=0.3, beta=0.0))
    lower: tuple = (1.0 + 1e-6, 0.0, 1e-4, 0.0)
    upper: tuple = (3.0, np.inf, 2.0, 2.0)
    fit_normals: bool = True
    max_nfev: int = 200

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_n < 0:
            raise PreconditionError("weights must be non-negative")


def _huber(r, delta):
    return np.sqrt(r * r + delta * delta) - delta


def residual_terms(theta, normals, init_normals, data: FitData, cfg: FitConfig, penalised=None):
    """Squared-residual contributions ``(specular, diffuse, normal)``."""
    cs, md10, md20 = predict(theta, normals, data.light, data.view)
    spec = np.sum((cs[:, None] - data.c_s) ** 2)
    diff = cfg.lambda_d * (np.sum((md10[:, None] - data.md10) ** 2) + np.sum((md20[:, None] - data.md20) ** 2))
    dn = np.linalg.norm(np.asarray(normals) - init_normals, axis=-1)
    pen = _huber(dn, cfg.huber_delta)
    if penalised is not None:
        pen = pen * penalised
    return float(spec), float(diff), float(cfg.lambda_n * np.sum(pen))


def objective(theta, normals, init_normals, data: FitData, cfg: FitConfig, penalised=None) -> float:
    return sum(residual_terms(theta, normals, init_normals, data, cfg, penalised))


def objective_gradient(theta, normals, init_normals, data: FitData, cfg: FitConfig, penalised=None):
    """Objective with its gradient in the material ``(4,)`` and raw normals ``(N, 3)``."""
    normals = np.asarray(normals, dtype=float)
    cs, md10, md20, jt, jn = predict(theta, normals, data.light, data.view, derivatives=True)
    r_cs = cs[:, None] - data.c_s
    r10 = md10[:, None] - data.md10
    r20 = md20[:, None] - data.md20
    w_cs = 2.0 * r_cs.sum(axis=1)
    w10 = 2.0 * cfg.lambda_d * r10.sum(axis=1)
    w20 = 2.0 * cfg.lambda_d * r20.sum(axis=1)
    g_theta = (w_cs[:, None] * jt[:, 0] + w10[:, None] * jt[:, 1] + w20[:, None] * jt[:, 2]).sum(axis=0)
    g_n = w_cs[:, None] * jn[:, 0] + w10[:, None] * jn[:, 1] + w20[:, None] * jn[:, 2]
    delta = normals - init_normals
    dn = np.linalg.norm(delta, axis=-1)
    scale = cfg.lambda_n / np.sqrt(dn * dn + cfg.huber_delta ** 2)
    if penalised is not None:
        scale = scale * penalised
    g_n = g_n + scale[:, None] * delta
    f = objective(theta, normals, init_normals, data, cfg, penalised)
    return f, g_theta, g_n


# --- fitting ---------------------------------------------------------------------

@dataclass
class FitResult:
    brdf: BrdfParams
    normals: np.ndarray
    objective: float
    terms: dict
    history: list
    converged: bool
    iterations: int


def _tangent_basis(n):
    ref = np.where(np.abs(n[:, 0:1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    t1 = np.cross(n, ref)
    t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def _material_step(theta, normals, data, cfg):
    c = data.c_s.shape[1]
    sd = np.sqrt(cfg.lambda_d)

    def fun(t):
        cs, m10, m20 = predict(t, normals, data.light, data.view)
        return np.concatenate([(cs[:, None] - data.c_s).ravel(),
                               sd * (m10[:, None] - data.md10).ravel(),
                               sd * (m20[:, None] - data.md20).ravel()])

    def jac(t):
        *_, jt, _ = predict(t, normals, data.light, data.view, derivatives=True)
        rep = lambda j: np.repeat(j, c, axis=0)  # noqa: E731
        return np.concatenate([rep(jt[:, 0]), sd * rep(jt[:, 1]), sd * rep(jt[:, 2])])

    x0 = np.clip(theta, np.array(cfg.lower) + 0.0, cfg.upper)
    res = least_squares(fun, x0, jac=jac, bounds=(cfg.lower, cfg.upper), method="trf", x_scale="jac",
                        ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=cfg.max_nfev)
    return res.x


def _point_objective(theta, normals, init_normals, data, cfg, pen):
    cs, m10, m20 = predict(theta, normals, data.light, data.view)
    dn = np.linalg.norm(normals - init_normals, axis=-1)
    return (np.sum((cs[:, None] - data.c_s) ** 2, axis=1)
            + cfg.lambda_d * np.sum((m10[:, None] - data.md10) ** 2 + (m20[:, None] - data.md20) ** 2, axis=1)
            + cfg.lambda_n * pen * _huber(dn, cfg.huber_delta))


def _normal_step(theta, normals, init_normals, data, cfg, penalised, inner: int = 60):
    """Per-point damped Gauss-Newton on two tangent parameters.

    The Huber penalty is replaced at each iterate by its quadratic
    majoriser, and a point's update is kept only if its own objective
    drops, so the total never increases.
    """
    n_pts = len(normals)
    pen = np.ones(n_pts) if penalised is None else penalised.astype(float)
    sd = np.sqrt(cfg.lambda_d)
    n = normals.copy()
    f = _point_objective(theta, n, init_normals, data, cfg, pen)
    lam = np.full(n_pts, 1e-3)
    active = np.ones(n_pts, dtype=bool)
    for _ in range(inner):
        t1, t2 = _tangent_basis(n)
        cs, m10, m20, _, jn = predict(theta, n, data.light, data.view, derivatives=True)
        r = np.concatenate([cs[:, None] - data.c_s, sd * (m10[:, None] - data.md10),
                            sd * (m20[:, None] - data.md20)], axis=1)
        c = data.c_s.shape[1]
        jrows = np.concatenate([np.repeat(jn[:, k:k + 1], c, axis=1) * (1.0 if k == 0 else sd)
                                for k in range(3)], axis=1)          # (N, 3C, 3)
        j = np.stack([jrows @ t1[:, :, None], jrows @ t2[:, :, None]], axis=-1)[:, :, 0, :]
        delta = n - init_normals
        w = cfg.lambda_n * pen / np.sqrt(np.sum(delta ** 2, axis=-1) + cfg.huber_delta ** 2)
        g = np.einsum("nri,nr->ni", j, r) + w[:, None] * np.stack(
            [np.sum(delta * t1, -1), np.sum(delta * t2, -1)], axis=-1)
        h = np.einsum("nri,nrj->nij", j, j) + w[:, None, None] * np.eye(2)
        damp = h + lam[:, None, None] * (np.eye(2) * (np.trace(h, axis1=1, axis2=2)[:, None, None] + 1e-30))
        step = -np.linalg.solve(damp, g[:, :, None])[:, :, 0]
        cand = n + step[:, :1] * t1 + step[:, 1:] * t2
        cand /= np.linalg.norm(cand, axis=-1, keepdims=True)
        f_new = _point_objective(theta, cand, init_normals, data, cfg, pen)
        ok = active & (f_new < f)
        gain = np.where(ok, f - f_new, 0.0)
        n[ok] = cand[ok]
        f = np.where(ok, f_new, f)
        lam = np.where(ok, lam / 3.0, lam * 4.0)
        active &= ~((~ok) & (lam > 1e12)) & ~(ok & (gain <= 1e-15 * np.maximum(f, 1e-300)))
        if not np.any(active):
            break
    return n


def fit_specular(data: FitData, init_normals, cfg: FitConfig | None = None, penalised=None) -> FitResult:
    """Alternating material / normal refinement.

    ``penalised`` masks the points whose initial normal anchors the fit
    (flagged PCA normals are excluded). Each accepted step never increases
    the objective.
    """
    cfg = cfg or FitConfig()
    if len(data) < 10:
        raise PreconditionError(f"need at least 10 correspondences, got {len(data)}")
    init_normals = np.asarray(init_normals, dtype=float)
    init_normals = init_normals / np.linalg.norm(init_normals, axis=-1, keepdims=True)
    if penalised is not None:
        penalised = np.asarray(penalised, dtype=bool)
    theta = cfg.init.material().astype(float)
    normals = init_normals.copy()
    f = objective(theta, normals, init_normals, data, cfg, penalised)
    history = [f]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        f_start = f
        cand = _material_step(theta, normals, data, cfg)
        f_c = objective(cand, normals, init_normals, data, cfg, penalised)
        if f_c <= f:
            theta, f = cand, f_c
        if cfg.fit_normals:
            cand_n = _normal_step(theta, normals, init_normals, data, cfg, penalised)
            f_c = objective(theta, cand_n, init_normals, data, cfg, penalised)
            if f_c <= f:
                normals, f = cand_n, f_c
        history.append(f)
        if f_start - f <= cfg.tol * max(f_start, 1e-300):
            converged = True
            break
    if not converged:
        warnings.warn("BRDF fit did not converge; returning best-so-far", RuntimeWarning, stacklevel=2)
    spec, diff, pen = residual_terms(theta, normals, init_normals, data, cfg, penalised)
    brdf = BrdfParams(mu=theta[0], k_s=theta[1], alpha=theta[2], beta=theta[3])
    return FitResult(brdf, normals, f, {"specular": spec, "diffuse": diff, "normal": pen},
                     history, converged, it)


def fit_albedo(c_d_obs, normals, light):
    """Closed-form per-point, per-channel body albedo.

    The rendered diffuse term at unit albedo is ``n.l``; the least-squares
    scale is ``c_d . u / u^2``. Returns ``(K_b, valid)`` with zero-shading
    points ``nan`` and invalid.
    """
    cd = np.asarray(c_d_obs, dtype=float)
    if cd.ndim == 1:
        cd = cd[:, None]
    u = np.clip(np.sum(np.asarray(normals) * np.asarray(light), axis=-1), 0.0, None)
    valid = u > 0
    safe = np.where(valid, u, 1.0)
    kb = np.where(valid[:, None], cd * safe[:, None] / (safe * safe)[:, None], np.nan)
    return kb, valid


# --- relighting ------------------------------------------------------------------

@dataclass(frozen=True)
class Light:
    """Point light at ``position`` or directional light toward ``direction``."""

    position: tuple | None = None
    direction: tuple | None = None
    intensity: float = 1.0

    def __post_init__(self):
        if (self.position is None) == (self.direction is None):
            raise PreconditionError("give exactly one of position or direction")

    def toward(self, points):
        p = np.asarray(points, dtype=float)
        if self.position is not None:
            v = np.asarray(self.position, dtype=float) - p
        else:
            v = np.broadcast_to(np.asarray(self.direction, dtype=float), p.shape)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)


def relight(points, normals, brdf: BrdfParams, light: Light, K_b=None, incident=None):
    """Radiance ``s0`` ``(..., C)`` seen from the camera at the origin.

    ``incident`` optionally gives per-point unit-intensity incident Stokes
    (default unpolarized); the light's intensity scales it. No distance
    falloff, matching the projector model.
    """
    p = np.asarray(points, dtype=float)
    n = np.asarray(normals, dtype=float)
    l = light.toward(p)
    v = -p / np.linalg.norm(p, axis=-1, keepdims=True)
    c_s, c_d = shade(brdf, n, l, v, K_b)
    if incident is None:
        return light.intensity * (c_s[..., None] + c_d)
    dp = diffuse_polarization(n, v, brdf.mu)
    sm = surface_mueller(c_s, c_d, dp)
    s_in = light.intensity * np.asarray(incident, dtype=float)
    return sm.apply(s_in)[..., 0]
