"""
Synthetic rectified projector-camera rig and polarimetric renderer.

Coordinates: camera frame with x right, y down, z forward; the projector
centre sits at ``(baseline, 0, 0)`` with parallel axes. Pixel ``i`` of
either device spans the continuous interval ``[i, i + 1)``. Surfaces are
ray-cast analytically (planes, spheres, disks) or by marching (height
fields), and the projector shadow test casts the exact projector ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .codebook import PatternImage
from .errors import PreconditionError
from .polcore import PolarimetricImage, filtered_intensity, stokes_from_intensities
from .reflectance import BrdfParams, SurfaceMueller, point_mueller

EPS_T = 1e-9


@dataclass(frozen=True)
class Pinhole:
    focal: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class Rig:
    camera: Pinhole
    projector: Pinhole
    baseline: float

    def __post_init__(self):
        if self.baseline <= 0 or self.camera.focal <= 0 or self.projector.focal <= 0:
            raise PreconditionError("baseline and focal lengths must be positive")

    @classmethod
    def default(cls, width=256, height=256, focal=1000.0, projector_width=1024,
                projector_height=768, baseline=0.2) -> "Rig":
        cam = Pinhole(focal, width / 2, height / 2, width, height)
        proj = Pinhole(focal, projector_width / 2, projector_height / 2, projector_width, projector_height)
        return cls(cam, proj, baseline)

    @property
    def projector_center(self) -> np.ndarray:
        return np.array([self.baseline, 0.0, 0.0])

    def camera_rays(self) -> np.ndarray:
        """Unnormalised rays ``(H, W, 3)`` with z = 1 through pixel centres."""
        c = self.camera
        u = (np.arange(c.width) + 0.5 - c.cx) / c.focal
        v = (np.arange(c.height) + 0.5 - c.cy) / c.focal
        xn, yn = np.meshgrid(u, v)
        return np.stack([xn, yn, np.ones_like(xn)], axis=-1)

    def to_projector(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Continuous projector ``(x, y)`` of camera-frame points."""
        p = np.asarray(points, dtype=float)
        pr = self.projector
        z = p[..., 2]
        return (pr.focal * (p[..., 0] - self.baseline) / z + pr.cx,
                pr.focal * p[..., 1] / z + pr.cy)

    def to_camera(self, points) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(points, dtype=float)
        c = self.camera
        return c.focal * p[..., 0] / p[..., 2] + c.cx, c.focal * p[..., 1] / p[..., 2] + c.cy

    def camera_px_per_projector_px(self) -> float:
        return self.camera.focal / self.projector.focal

    def disparity_depth_bound(self, z) -> np.ndarray:
        """Depth change of one camera pixel of disparity at depth ``z``."""
        return np.asarray(z, dtype=float) ** 2 / (self.baseline * self.camera.focal)


# --- surfaces ------------------------------------------------------------------

Albedo = "np.ndarray | Callable[[np.ndarray], np.ndarray]"


def _eval_albedo(albedo, local_points, channels):
    if callable(albedo):
        out = np.asarray(albedo(local_points), dtype=float)
    else:
        out = np.broadcast_to(np.asarray(albedo, dtype=float), local_points.shape[:-1] + (channels,))
    return np.broadcast_to(out, local_points.shape[:-1] + (channels,))


@dataclass(frozen=True)
class Surface:
    """Base class; subclasses implement ``_hit`` and ``_normal``."""

    albedo: object = 1.0

    def intersect(self, origin, direction) -> np.ndarray:
        """Smallest ray parameter ``t > 0`` (``inf`` on a miss)."""
        o = np.broadcast_to(np.asarray(origin, dtype=float), np.shape(direction))
        return self._hit(o, np.asarray(direction, dtype=float))

    def normal(self, points) -> np.ndarray:
        return self._normal(np.asarray(points, dtype=float))

    def albedo_at(self, points, channels) -> np.ndarray:
        return _eval_albedo(self.albedo, np.asarray(points, dtype=float), channels)

    def _hit(self, o, d):
        raise NotImplementedError

    def _normal(self, p):
        raise NotImplementedError


def _positive(t):
    return np.where(np.isfinite(t) & (t > EPS_T), t, np.inf)


@dataclass(frozen=True)
class Plane(Surface):
    """``z = z0 + sx * x + sy * y``."""

    z0: float = 1.0
    slope: tuple[float, float] = (0.0, 0.0)

    def _hit(self, o, d):
        a = np.array([-self.slope[0], -self.slope[1], 1.0])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z0 - o @ a) / (d @ a)
        return _positive(t)

    def _normal(self, p):
        n = np.array([self.slope[0], self.slope[1], -1.0])
        return np.broadcast_to(n / np.linalg.norm(n), p.shape).copy()


@dataclass(frozen=True)
class Sphere(Surface):
    center: tuple[float, float, float] = (0.0, 0.0, 1.0)
    radius: float = 0.1

    def _hit(self, o, d):
        c = np.asarray(self.center, dtype=float)
        oc = o - c
        a = np.sum(d * d, axis=-1)
        b = np.sum(d * oc, axis=-1)
        q = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - a * q
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - root) / a
        t1 = (-b + root) / a
        t = np.where(t0 > EPS_T, t0, t1)
        return np.where(hit, _positive(t), np.inf)

    def _normal(self, p):
        return (p - np.asarray(self.center, dtype=float)) / self.radius


@dataclass(frozen=True)
class Disk(Surface):
    """Frontoparallel disk at depth ``z`` (normal toward the camera)."""

    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.05
    z: float = 0.9

    def _hit(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - o[..., 2]) / d[..., 2]
        p = o + t[..., None] * d
        inside = (p[..., 0] - self.center[0]) ** 2 + (p[..., 1] - self.center[1]) ** 2 <= self.radius ** 2
        return np.where(inside, _positive(t), np.inf)

    def _normal(self, p):
        return np.broadcast_to(np.array([0.0, 0.0, -1.0]), p.shape).copy()


@dataclass(frozen=True)
class HeightField(Surface):
    """``z = h(x, y)`` with gradient ``grad(x, y) -> (hx, hy)``.

    Rays are marched in ``steps`` samples between the depth bounds, then the
    first sign change is refined by bisection.
    """

    h: Callable = None
    grad: Callable = None
    z_bounds: tuple[float, float] = (0.5, 2.0)
    steps: int = 160

    def _f(self, o, d, t):
        p = o + t[..., None] * d
        return p[..., 2] - self.h(p[..., 0], p[..., 1])

    def _hit(self, o, d):
        zmin, zmax = self.z_bounds
        dz = d[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (zmin - o[..., 2]) / dz
            tb = (zmax - o[..., 2]) / dz
        t_lo = np.clip(np.minimum(ta, tb), EPS_T, None)
        t_hi = np.maximum(ta, tb)
        valid = np.isfinite(t_lo) & np.isfinite(t_hi) & (t_hi > t_lo)
        t_lo = np.where(valid, t_lo, 0.0)
        t_hi = np.where(valid, t_hi, 1.0)
        result = np.full(dz.shape, np.inf)
        found = np.zeros(dz.shape, dtype=bool)
        prev_t = t_lo
        prev_f = self._f(o, d, prev_t)
        lo = np.zeros_like(t_lo)
        hi = np.zeros_like(t_lo)
        for k in range(1, self.steps + 1):
            t = t_lo + (t_hi - t_lo) * (k / self.steps)
            f = self._f(o, d, t)
            cross = valid & ~found & (np.sign(prev_f) != np.sign(f))
            lo = np.where(cross, prev_t, lo)
            hi = np.where(cross, t, hi)
            found |= cross
            prev_t, prev_f = t, f
        f_lo = self._f(o, d, lo)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            f_mid = self._f(o, d, mid)
            left = np.sign(f_mid) == np.sign(f_lo)
            lo = np.where(left, mid, lo)
            f_lo = np.where(left, f_mid, f_lo)
            hi = np.where(left, hi, mid)
        result[found] = (0.5 * (lo + hi))[found]
        return result

    def _normal(self, p):
        hx, hy = self.grad(p[..., 0], p[..., 1])
        n = np.stack([hx, hy, -np.ones_like(hx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


def gaussian_bump(z0=1.0, amplitude=0.05, center=(0.0, 0.0), sigma=0.03, albedo=1.0,
                  z_bounds=None) -> HeightField:
    """Plane at ``z0`` with a Gaussian bump raised toward the camera."""
    cx, cy = center

    def h(x, y):
        return z0 - amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))

    def grad(x, y):
        e = amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))
        return e * (x - cx) / sigma ** 2, e * (y - cy) / sigma ** 2

    if z_bounds is None:
        z_bounds = (z0 - max(amplitude, 0.0) - 1e-3, z0 + max(-amplitude, 0.0) + 1e-3)
    return HeightField(albedo=albedo, h=h, grad=grad, z_bounds=z_bounds)


@dataclass(frozen=True)
class Translated(Surface):
    """A surface (and its texture) moved by ``offset``."""

    base: Surface = None
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def _hit(self, o, d):
        return self.base._hit(o - np.asarray(self.offset, dtype=float), d)

    def _normal(self, p):
        return self.base._normal(p - np.asarray(self.offset, dtype=float))

    def albedo_at(self, points, channels):
        return self.base.albedo_at(np.asarray(points) - np.asarray(self.offset, dtype=float), channels)


@dataclass(frozen=True)
class Union:
    """Nearest-hit combination of several surfaces."""

    members: tuple

    def intersect_index(self, origin, direction):
        ts = np.stack([m.intersect(origin, direction) for m in self.members])
        idx = np.argmin(ts, axis=0)
        return np.take_along_axis(ts, idx[None], axis=0)[0], idx

    def intersect(self, origin, direction):
        return self.intersect_index(origin, direction)[0]


def _as_union(surface) -> Union:
    return surface if isinstance(surface, Union) else Union((surface,))


# --- scenes --------------------------------------------------------------------

@dataclass(frozen=True)
class Scene:
    """Surface geometry plus global material.

    ``motion(t)`` (optional) returns the surface at frame time ``t``.
    ``mueller_override(points, normals)`` (optional) replaces the
    shading model by an explicit :class:`SurfaceMueller` field.
    """

    surface: object
    brdf: BrdfParams = field(default_factory=BrdfParams)
    channels: int = 1
    motion: Callable | None = None
    mueller_override: Callable | None = None

    def surface_at(self, t: float = 0.0):
        return self.motion(t) if self.motion is not None else self.surface


@dataclass
class GroundTruth:
    depth: np.ndarray      # (H, W), nan where the ray misses
    points: np.ndarray     # (H, W, 3)
    normal: np.ndarray     # (H, W, 3), toward the camera
    proj_x: np.ndarray     # (H, W) continuous projector column, nan where unlit
    lit: np.ndarray        # (H, W) bool
    hit: np.ndarray        # (H, W) bool
    K_b: np.ndarray        # (H, W, C)
    c_s: np.ndarray        # (H, W)
    c_d: np.ndarray        # (H, W, C)
    md10: np.ndarray       # (H, W)
    md20: np.ndarray       # (H, W)
    incident: np.ndarray   # (H, W, 3) incident linear Stokes

    def mueller(self) -> SurfaceMueller:
        return SurfaceMueller(self.c_s, self.c_d, self.md10, self.md20)

    @property
    def proj_col(self) -> np.ndarray:
        """Integer projector column (-1 where unlit)."""
        return np.where(self.lit, np.floor(np.nan_to_num(self.proj_x)), -1).astype(int)


def trace_geometry(scene: Scene, rig: Rig, time: float = 0.0):
    """Camera-ray hits: depth, points, normals, albedo and projector illumination."""
    surface = _as_union(scene.surface_at(time))
    rays = rig.camera_rays()
    h, w = rays.shape[:2]
    d = rays.reshape(-1, 3)
    t, idx = surface.intersect_index(np.zeros(3), d)
    hit = np.isfinite(t)
    t_safe = np.where(hit, t, 1.0)
    pts = d * t_safe[:, None]
    normals = np.zeros_like(pts)
    albedo = np.zeros((len(d), scene.channels))
    for k, member in enumerate(surface.members):
        sel = hit & (idx == k)
        if np.any(sel):
            normals[sel] = member.normal(pts[sel])
            albedo[sel] = member.albedo_at(pts[sel], scene.channels)

    # projector illumination: frustum, facing and shadow ray
    q = rig.projector_center
    xp, yp = rig.to_projector(pts)
    in_frustum = hit & (xp >= 0) & (xp < rig.projector.width) & (yp >= 0) & (yp < rig.projector.height)
    to_light = q - pts
    to_view = -pts
    facing = (np.sum(normals * to_light, axis=-1) > 0) & (np.sum(normals * to_view, axis=-1) > 0)
    t_shadow = surface.intersect(q, pts - q)
    unblocked = t_shadow >= 1.0 - 1e-7
    lit = in_frustum & facing & unblocked

    depth = np.where(hit, pts[:, 2], np.nan)
    shape = (h, w)
    return (depth.reshape(shape), pts.reshape(h, w, 3), normals.reshape(h, w, 3),
            np.where(lit, xp, np.nan).reshape(shape), lit.reshape(shape), hit.reshape(shape),
            albedo.reshape(h, w, scene.channels))


def _unit(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def ground_truth(scene: Scene, pattern: PatternImage, rig: Rig, time: float = 0.0) -> GroundTruth:
    if pattern.width != rig.projector.width:
        raise PreconditionError(f"pattern width {pattern.width} != projector width {rig.projector.width}")
    depth, pts, normals, proj_x, lit, hit, albedo = trace_geometry(scene, rig, time)
    light = _unit(rig.projector_center - pts)
    view = _unit(-pts)
    if scene.mueller_override is not None:
        sm = scene.mueller_override(pts, normals)
        c_s = np.broadcast_to(np.asarray(sm.c_s, dtype=float), lit.shape)
        c_d = np.broadcast_to(np.asarray(sm.c_d, dtype=float), lit.shape + (scene.channels,))
        md10 = np.broadcast_to(np.asarray(sm.md10, dtype=float), lit.shape)
        md20 = np.broadcast_to(np.asarray(sm.md20, dtype=float), lit.shape)
    else:
        sm = point_mueller(scene.brdf, normals, light, view, albedo)
        c_s, c_d, md10, md20 = sm.c_s, sm.c_d, sm.md10, sm.md20
    zero = ~lit
    c_s = np.where(zero, 0.0, c_s)
    c_d = np.where(zero[..., None], 0.0, c_d)
    md10 = np.where(zero, 0.0, md10)
    md20 = np.where(zero, 0.0, md20)
    col = np.clip(np.floor(np.nan_to_num(proj_x)).astype(int), 0, pattern.width - 1)
    incident = np.where(lit[..., None], pattern.column_stokes()[col], 0.0)
    return GroundTruth(depth, pts, normals, proj_x, lit, hit, albedo, c_s, c_d, md10, md20, incident)


def compose_image(gt: GroundTruth) -> PolarimetricImage:
    """Noiseless image implied by a ground truth (``s_o = M s_i`` per pixel)."""
    s = gt.mueller().apply(gt.incident)
    s = np.where(gt.lit[..., None, None], s, 0.0)
    return PolarimetricImage(s)


def add_noise(image: PolarimetricImage, sigma: float, rng: np.random.Generator) -> PolarimetricImage:
    """Gaussian noise on the four virtual filter intensities, then re-form Stokes."""
    samples = []
    for angle in (0.0, 45.0, 90.0, 135.0):
        i = filtered_intensity(image.stokes, angle)
        samples.append(np.clip(i + rng.normal(0.0, sigma, i.shape), 0.0, None))
    return PolarimetricImage(stokes_from_intensities(*samples))


def frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(frame)])


def render_frame(scene: Scene, pattern: PatternImage, rig: Rig, noise_sigma: float = 0.0,
                 seed: int = 0, frame: int = 0, time: float | None = None):
    """Render one polarimetric frame; returns ``(PolarimetricImage, GroundTruth)``."""
    gt = ground_truth(scene, pattern, rig, frame if time is None else time)
    image = compose_image(gt)
    if noise_sigma > 0:
        image = add_noise(image, noise_sigma, frame_rng(seed, frame))
    return image, gt


def render_sequence(scene: Scene, patterns: Sequence[PatternImage], rig: Rig, noise_sigma: float = 0.0,
                    seed: int = 0, frames: int | None = None):
    """Frame ``t`` uses ``patterns[t % P]`` and the scene at time ``t``."""
    if len(patterns) == 0:
        raise PreconditionError("need at least one pattern")
    count = len(patterns) if frames is None else frames
    return [render_frame(scene, patterns[t % len(patterns)], rig, noise_sigma, seed, t, float(t))
            for t in range(count)]


def translating(surface: Surface, velocity) -> Callable:
    """Motion callable moving ``surface`` by ``velocity`` (m/frame)."""
    v = np.asarray(velocity, dtype=float)
    return lambda t: Translated(albedo=surface.albedo, base=surface, offset=tuple(v * t))


def with_motion(scene: Scene, moving: Surface, velocity, static: Sequence[Surface] = ()) -> Scene:
    """Scene whose ``moving`` member translates while ``static`` members stay."""
    move = translating(moving, velocity)
    return replace(scene, motion=lambda t: Union(tuple(static) + (move(t),)))
