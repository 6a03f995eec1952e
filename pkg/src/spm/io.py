"""
File formats: PSI Stokes images, pattern and scene JSON, point clouds and
ground-truth tables, plus RBF densification of sparse clouds.

Text formats write floats with ``repr`` so every value round-trips
exactly; missing or flagged values use the token ``NA``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.interpolate import RBFInterpolator

from .codebook import Codebook, CodeParams, assemble_pattern, quantize_levels, validate_sequence
from .decoder import CorrespondenceSet, ProjectedCode
from .dense import AdaptiveResult, DenseCorrespondences, ShiftedPatternSet, shifted_pattern_set
from .errors import DegenerateError, ParseError, PreconditionError
from .polcore import PolarimetricImage
from .reflectance import BrdfParams
from .simulator import Disk, GroundTruth, Pinhole, Plane, Rig, Scene, Sphere, Union, gaussian_bump, with_motion

PSI_MAGIC = b"PSI1"
_PSI_HEADER = struct.Struct("<4s4I")
NA = "NA"
PATTERN_VERSION = 1
CLOUD_VERSION = 1


# --- PSI images -----------------------------------------------------------------

def encode_psi(image: PolarimetricImage) -> bytes:
    s = np.asarray(image.stokes)
    h, w, c, k = s.shape
    return _PSI_HEADER.pack(PSI_MAGIC, w, h, c, k) + s.astype("<f4").tobytes(order="C")


def decode_psi(data: bytes) -> PolarimetricImage:
    if len(data) < _PSI_HEADER.size:
        raise ParseError(f"PSI header truncated: {len(data)} bytes, need {_PSI_HEADER.size} (offset 0)")
    magic, w, h, c, k = _PSI_HEADER.unpack_from(data, 0)
    if magic != PSI_MAGIC:
        raise ParseError(f"bad PSI magic {magic!r} at byte offset 0")
    if c not in (1, 3):
        raise ParseError(f"PSI channel count {c} at byte offset 12 must be 1 or 3")
    if k != 3:
        raise ParseError(f"PSI component count {k} at byte offset 16 must be 3")
    need = w * h * c * k * 4
    have = len(data) - _PSI_HEADER.size
    if have != need:
        raise ParseError(f"PSI payload at byte offset {_PSI_HEADER.size} has {have} bytes, expected {need}")
    arr = np.frombuffer(data, dtype="<f4", offset=_PSI_HEADER.size).reshape(h, w, c, k)
    return PolarimetricImage(arr.astype(np.float64))


def write_psi(path, image: PolarimetricImage) -> None:
    Path(path).write_bytes(encode_psi(image))


def read_psi(path) -> PolarimetricImage:
    return decode_psi(Path(path).read_bytes())


# --- JSON helpers -------------------------------------------------------------------

def _load_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno}: {e.msg}") from None


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ParseError(f"{where}: missing key '{key}'")
    return d[key]


# --- patterns -------------------------------------------------------------------------

@dataclass
class PatternSpec:
    """A single-shot codebook or a shifted set, plus the projector size."""

    codebook: Codebook
    projector_width: int
    projector_height: int
    shifted: ShiftedPatternSet | None = None

    @property
    def count(self) -> int:
        return 1 if self.shifted is None else self.shifted.count

    def patterns(self) -> list:
        if self.shifted is not None:
            return list(self.shifted.patterns)
        return [assemble_pattern(self.codebook, self.projector_width, self.projector_height)]

    def projected(self, t: int = 0) -> ProjectedCode:
        if self.shifted is not None:
            return self.shifted.projected(t)
        w, h = self.projector_width, self.projector_height
        return ProjectedCode(self.codebook.levels, self.codebook.layout(w), assemble_pattern(self.codebook, w, h))


def pattern_to_dict(spec: PatternSpec) -> dict:
    p = spec.codebook.params
    sh = spec.shifted
    return {
        "version": PATTERN_VERSION,
        "k_db": p.k_db,
        "n_db": p.n_db,
        "aolp_min_deg": p.aolp_min,
        "aolp_max_deg": p.aolp_max,
        "aolp_levels_deg": [float(v) for v in spec.codebook.levels],
        "sequence": [int(v) for v in spec.codebook.sequence],
        "stripe_width_px": p.stripe_width,
        "projector_width_px": spec.projector_width,
        "projector_height_px": spec.projector_height,
        "gaussian_sigma_px": 0.0 if sh is None else float(sh.sigma),
        "shift_offsets_px": [] if sh is None else [float(v) for v in sh.offsets],
        "level_permutations": [] if sh is None else sh.permutations.tolist(),
    }


def pattern_from_dict(d: dict, where: str = "pattern") -> PatternSpec:
    if _need(d, "version", where) != PATTERN_VERSION:
        raise ParseError(f"{where}: unsupported version {d['version']}")
    try:
        params = CodeParams(int(_need(d, "k_db", where)), int(_need(d, "n_db", where)),
                            float(d.get("aolp_min_deg", 0.0)), float(d.get("aolp_max_deg", 80.0)),
                            int(_need(d, "stripe_width_px", where)))
    except PreconditionError as e:
        raise ParseError(f"{where}: {e}") from None
    levels = np.asarray(_need(d, "aolp_levels_deg", where), dtype=float)
    if levels.shape != (params.k_db,) or not np.allclose(levels, quantize_levels(params), atol=1e-9):
        raise ParseError(f"{where}: aolp_levels_deg inconsistent with k_db and the AoLP range")
    seq = np.asarray(_need(d, "sequence", where), dtype=int)
    report = validate_sequence(seq, params)
    if not report.ok:
        raise ParseError(f"{where}: sequence fails validation ({report})")
    cb = Codebook(params, levels, seq)
    w = int(_need(d, "projector_width_px", where))
    h = int(_need(d, "projector_height_px", where))
    perms = d.get("level_permutations") or []
    shifted = None
    if perms:
        offsets = d.get("shift_offsets_px") or None
        try:
            shifted = shifted_pattern_set(cb, perms, float(d.get("gaussian_sigma_px", 0.0)), w, h, offsets)
        except (PreconditionError, DegenerateError) as e:
            raise ParseError(f"{where}: {e}") from None
    return PatternSpec(cb, w, h, shifted)


def write_pattern(path, spec: PatternSpec) -> None:
    _dump_json(path, pattern_to_dict(spec))


def read_pattern(path) -> PatternSpec:
    return pattern_from_dict(_load_json(path), str(path))


# --- rig -------------------------------------------------------------------------------

def rig_to_dict(rig: Rig) -> dict:
    def pin(p: Pinhole):
        return {"focal": p.focal, "cx": p.cx, "cy": p.cy, "width": p.width, "height": p.height}
    return {"camera": pin(rig.camera), "projector": pin(rig.projector), "baseline": rig.baseline}


def rig_from_dict(d: dict, where: str = "rig") -> Rig:
    """Full form (``camera``/``projector``/``baseline``) or ``Rig.default`` keywords."""
    try:
        if "camera" in d:
            def pin(name):
                q = _need(d, name, where)
                return Pinhole(float(q["focal"]), float(q["cx"]), float(q["cy"]), int(q["width"]), int(q["height"]))
            return Rig(pin("camera"), pin("projector"), float(_need(d, "baseline", where)))
        allowed = {"width", "height", "focal", "projector_width", "projector_height", "baseline"}
        extra = set(d) - allowed
        if extra:
            raise ParseError(f"{where}: unknown keys {sorted(extra)}")
        return Rig.default(**d)
    except (KeyError, TypeError, PreconditionError) as e:
        raise ParseError(f"{where}: {e}") from None


def read_rig(path) -> Rig:
    return rig_from_dict(_load_json(path), str(path))


def write_rig(path, rig: Rig) -> None:
    _dump_json(path, rig_to_dict(rig))


# --- scenes ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SineTexture:
    """``base + amplitude * sin(f x) cos(f y)`` in surface-local metres."""

    base: float = 0.5
    amplitude: float = 0.4
    frequency: float = 60.0

    def __call__(self, points):
        p = np.asarray(points, dtype=float)
        v = self.base + self.amplitude * np.sin(self.frequency * p[..., 0]) * np.cos(self.frequency * p[..., 1])
        return v[..., None]


def _albedo(spec, where):
    if isinstance(spec, dict):
        if spec.get("type") != "sine":
            raise ParseError(f"{where}: unknown albedo texture {spec.get('type')!r}")
        return SineTexture(float(spec.get("base", 0.5)), float(spec.get("amplitude", 0.4)),
                           float(spec.get("frequency", 60.0)))
    if isinstance(spec, list):
        return tuple(float(v) for v in spec)
    return float(spec)


def _surface(d, where):
    kind = _need(d, "type", where)
    alb = _albedo(d.get("albedo", 1.0), where)
    if kind == "plane":
        return Plane(alb, float(d.get("z0", 1.0)), tuple(d.get("slope", (0.0, 0.0))))
    if kind == "sphere":
        return Sphere(alb, tuple(_need(d, "center", where)), float(_need(d, "radius", where)))
    if kind == "disk":
        return Disk(alb, tuple(_need(d, "center", where)), float(_need(d, "radius", where)),
                    float(d.get("z", 0.9)))
    if kind == "bump":
        return gaussian_bump(float(d.get("z0", 1.0)), float(d.get("amplitude", 0.05)),
                             tuple(d.get("center", (0.0, 0.0))), float(d.get("sigma", 0.03)), alb)
    raise ParseError(f"{where}: unknown surface type {kind!r}")


def scene_from_dict(d: dict, where: str = "scene") -> Scene:
    """Surfaces, material, channel count and optional translation of one member."""
    items = _need(d, "surfaces", where)
    if not items:
        raise ParseError(f"{where}: no surfaces")
    surfaces = [_surface(s, f"{where}: surfaces[{i}]") for i, s in enumerate(items)]
    try:
        brdf = BrdfParams(**d.get("brdf", {}))
    except (TypeError, PreconditionError) as e:
        raise ParseError(f"{where}: brdf: {e}") from None
    scene = Scene(Union(tuple(surfaces)), brdf, int(d.get("channels", 1)))
    motion = d.get("motion")
    if motion:
        k = int(_need(motion, "surface", f"{where}: motion"))
        if not 0 <= k < len(surfaces):
            raise ParseError(f"{where}: motion surface index {k} out of range")
        static = tuple(s for i, s in enumerate(surfaces) if i != k)
        scene = with_motion(scene, surfaces[k], tuple(_need(motion, "velocity", f"{where}: motion")), static)
    return scene


def read_scene(path) -> Scene:
    return scene_from_dict(_load_json(path), str(path))


def brdf_to_dict(b: BrdfParams) -> dict:
    return {"mu": b.mu, "k_s": b.k_s, "alpha": b.alpha, "beta": b.beta, "kappa": b.kappa}


def brdf_from_dict(d: dict, where: str = "brdf") -> BrdfParams:
    keys = {f.name for f in fields(BrdfParams)} - {"K_b"}
    try:
        return BrdfParams(**{k: float(v) for k, v in d.items() if k in keys})
    except (TypeError, PreconditionError) as e:
        raise ParseError(f"{where}: {e}") from None


# --- point clouds ---------------------------------------------------------------------------

@dataclass
class Cloud:
    """Decoded points with optional reflectance fields and Stokes stacks.

    ``incident`` is ``(N, P, 3)`` and ``observed`` ``(N, P, C, 3)``;
    ``nstack`` says how many of the ``P`` pairs belong to each point. A
    point with a single pair borrows its ``left``/``right`` neighbours'
    pairs, as stripe correspondences do.
    """

    row: np.ndarray
    cam_x: np.ndarray
    proj_x: np.ndarray
    points: np.ndarray
    incident: np.ndarray
    observed: np.ndarray
    nstack: np.ndarray
    left: np.ndarray = None
    right: np.ndarray = None
    normals: np.ndarray = None
    c_s: np.ndarray = None
    c_d: np.ndarray = None
    md10: np.ndarray = None
    md20: np.ndarray = None
    K_b: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, c = len(self.row), self.channels
        minus = np.full(n, -1, dtype=int)
        self.left = minus.copy() if self.left is None else np.asarray(self.left, dtype=int)
        self.right = minus.copy() if self.right is None else np.asarray(self.right, dtype=int)
        if self.normals is None:
            self.normals = np.full((n, 3), np.nan)
        for name in ("c_s", "c_d", "md10", "md20", "K_b"):
            if getattr(self, name) is None:
                setattr(self, name, np.full((n, c), np.nan))

    def __len__(self):
        return len(self.row)

    @property
    def channels(self) -> int:
        return self.observed.shape[2]

    @property
    def depth(self):
        return self.points[:, 2]

    def stack(self, i: int):
        k = int(self.nstack[i])
        if k > 1:
            return self.incident[i, :k], self.observed[i, :k]
        idx = [i] + [int(j) for j in (self.left[i], self.right[i]) if j >= 0]
        return self.incident[idx, 0], self.observed[idx, 0]

    @classmethod
    def from_stripes(cls, corr: CorrespondenceSet) -> "Cloud":
        n = len(corr)
        return cls(corr.row.astype(int), corr.cam_x, corr.proj_x, corr.points, corr.incident[:, None],
                   corr.observed[:, None], np.ones(n, dtype=int), corr.left, corr.right)

    @classmethod
    def from_dense(cls, corr: DenseCorrespondences) -> "Cloud":
        n, p = corr.incident.shape[:2]
        return cls(corr.row.astype(int), corr.cam_x, corr.proj_x, corr.points, corr.incident,
                   corr.observed, np.full(n, p, dtype=int))

    @classmethod
    def from_result(cls, result) -> "Cloud":
        if isinstance(result, Cloud):
            return result
        if isinstance(result, CorrespondenceSet):
            return cls.from_stripes(result)
        if isinstance(result, DenseCorrespondences):
            return cls.from_dense(result)
        if isinstance(result, AdaptiveResult):
            return concatenate_clouds([cls.from_stripes(result.stripe), cls.from_dense(result.dense)])
        raise PreconditionError(f"cannot make a cloud from {type(result).__name__}")


def concatenate_clouds(parts: list[Cloud]) -> Cloud:
    parts = [p for p in parts if len(p)] or parts[:1]
    p_max = max(p.incident.shape[1] for p in parts)
    channels = parts[0].channels

    def pad(a, width):
        out = np.full((a.shape[0], width) + a.shape[2:], np.nan)
        out[:, :a.shape[1]] = a
        return out

    offsets = np.cumsum([0] + [len(p) for p in parts[:-1]])

    def shift(a, off):
        return np.where(a >= 0, a + off, -1)

    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    if any(p.channels != channels for p in parts):
        raise PreconditionError("clouds have different channel counts")
    return Cloud(cat("row"), cat("cam_x"), cat("proj_x"), cat("points"),
                 np.concatenate([pad(p.incident, p_max) for p in parts]),
                 np.concatenate([pad(p.observed, p_max) for p in parts]), cat("nstack"),
                 np.concatenate([shift(p.left, o) for p, o in zip(parts, offsets)]),
                 np.concatenate([shift(p.right, o) for p, o in zip(parts, offsets)]),
                 cat("normals"), cat("c_s"), cat("c_d"), cat("md10"), cat("md20"), cat("K_b"))


def _fmt(v) -> str:
    v = float(v)
    return repr(v) if np.isfinite(v) else NA


def _fmt_id(v) -> str:
    return str(int(v)) if v >= 0 else NA


def _cloud_columns(c: int, p: int) -> list[str]:
    cols = ["id", "row", "cam_x", "proj_x", "X", "Y", "Z", "nx", "ny", "nz"]
    for name in ("c_s", "c_d", "md10", "md20", "K_b"):
        cols += [f"{name}_{k}" for k in range(c)]
    cols += ["left", "right", "nstack"]
    for j in range(p):
        cols += [f"si{j}_{m}" for m in range(3)]
        cols += [f"so{j}_{k}_{m}" for k in range(c) for m in range(3)]
    return cols


def format_cloud(cloud: Cloud) -> str:
    n, p = cloud.incident.shape[:2]
    c = cloud.channels
    lines = [f"# spm-cloud {CLOUD_VERSION}", f"# channels {c}", f"# stack {p}"]
    for k, v in sorted(cloud.meta.items()):
        lines.append(f"# meta {k} {v}")
    lines.append(" ".join(_cloud_columns(c, p)))
    for i in range(n):
        rec = [str(i), str(int(cloud.row[i])), _fmt(cloud.cam_x[i]), _fmt(cloud.proj_x[i])]
        rec += [_fmt(v) for v in cloud.points[i]]
        rec += [_fmt(v) for v in cloud.normals[i]]
        for name in ("c_s", "c_d", "md10", "md20", "K_b"):
            rec += [_fmt(v) for v in getattr(cloud, name)[i]]
        rec += [_fmt_id(cloud.left[i]), _fmt_id(cloud.right[i]), str(int(cloud.nstack[i]))]
        for j in range(p):
            rec += [_fmt(v) for v in cloud.incident[i, j]]
            rec += [_fmt(v) for v in cloud.observed[i, j].ravel()]
        lines.append(" ".join(rec))
    return "\n".join(lines) + "\n"


def _parse_float(tok, lineno, col):
    if tok == NA:
        return np.nan
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"line {lineno}: column '{col}': not a number: {tok!r}") from None
    if not np.isfinite(v):
        raise ParseError(f"line {lineno}: column '{col}': non-finite value {tok!r} (use {NA})")
    return v


def _parse_int(tok, lineno, col, allow_na=False):
    if tok == NA and allow_na:
        return -1
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"line {lineno}: column '{col}': not an integer: {tok!r}") from None


def parse_cloud(text: str) -> Cloud:
    lines = text.splitlines()
    header = {}
    meta = {}
    body_start = None
    for lineno, line in enumerate(lines, 1):
        if line.startswith("#"):
            parts = line[1:].split()
            if parts[:1] == ["meta"] and len(parts) >= 3:
                meta[parts[1]] = " ".join(parts[2:])
            elif len(parts) == 2:
                header[parts[0]] = parts[1]
            continue
        body_start = lineno
        break
    if header.get("spm-cloud") != str(CLOUD_VERSION):
        raise ParseError("line 1: missing or unsupported '# spm-cloud' header")
    try:
        c, p = int(header["channels"]), int(header["stack"])
    except (KeyError, ValueError):
        raise ParseError("header: need '# channels C' and '# stack P' lines") from None
    cols = _cloud_columns(c, p)
    if body_start is None or lines[body_start - 1].split() != cols:
        raise ParseError(f"line {body_start or len(lines) + 1}: column header does not match channels={c}, stack={p}")
    records = []
    for lineno in range(body_start + 1, len(lines) + 1):
        toks = lines[lineno - 1].split()
        if not toks:
            continue
        if len(toks) != len(cols):
            raise ParseError(f"line {lineno}: expected {len(cols)} fields, got {len(toks)}")
        records.append((lineno, toks))
    n = len(records)
    row = np.zeros(n, dtype=int)
    left = np.zeros(n, dtype=int)
    right = np.zeros(n, dtype=int)
    nstack = np.zeros(n, dtype=int)
    vals = np.zeros((n, len(cols)))
    int_cols = {"id", "row", "left", "right", "nstack"}
    for i, (lineno, toks) in enumerate(records):
        for j, (tok, name) in enumerate(zip(toks, cols)):
            if name not in int_cols:
                vals[i, j] = _parse_float(tok, lineno, name)
        if _parse_int(toks[0], lineno, "id") != i:
            raise ParseError(f"line {lineno}: ids must run 0..N-1 in order")
        row[i] = _parse_int(toks[1], lineno, "row")
        left[i] = _parse_int(toks[cols.index("left")], lineno, "left", True)
        right[i] = _parse_int(toks[cols.index("right")], lineno, "right", True)
        nstack[i] = _parse_int(toks[cols.index("nstack")], lineno, "nstack")
        if not 1 <= nstack[i] <= p:
            raise ParseError(f"line {lineno}: nstack {nstack[i]} outside 1..{p}")
        for nb, name in ((left[i], "left"), (right[i], "right")):
            if nb >= n:
                raise ParseError(f"line {lineno}: {name} id {nb} out of range")
    at = {name: k for k, name in enumerate(cols)}

    def grab(names):
        return vals[:, [at[x] for x in names]]

    fields_c = {name: grab([f"{name}_{k}" for k in range(c)]) for name in ("c_s", "c_d", "md10", "md20", "K_b")}
    inc = np.zeros((n, p, 3))
    obs = np.zeros((n, p, c, 3))
    for j in range(p):
        inc[:, j] = grab([f"si{j}_{m}" for m in range(3)])
        obs[:, j] = grab([f"so{j}_{k}_{m}" for k in range(c) for m in range(3)]).reshape(n, c, 3)
    return Cloud(row, grab(["cam_x"])[:, 0], grab(["proj_x"])[:, 0], grab(["X", "Y", "Z"]), inc, obs,
                 nstack, left, right, grab(["nx", "ny", "nz"]), meta=meta, **fields_c)


def write_cloud(path, cloud) -> None:
    Path(path).write_text(format_cloud(Cloud.from_result(cloud)))


def read_cloud(path) -> Cloud:
    try:
        return parse_cloud(Path(path).read_text())
    except ParseError as e:
        raise ParseError(f"{path}: {e}") from None


# --- ground truth tables ----------------------------------------------------------------------

def _truth_columns(c: int) -> list[str]:
    cols = ["row", "col", "hit", "lit", "depth", "X", "Y", "Z", "nx", "ny", "nz", "proj_x", "c_s"]
    cols += [f"c_d_{k}" for k in range(c)] + ["md10", "md20"] + [f"K_b_{k}" for k in range(c)]
    return cols


def write_truth(path, gt: GroundTruth) -> None:
    h, w = gt.depth.shape
    c = gt.c_d.shape[-1]
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(_truth_columns(c))
        for r in range(h):
            for x in range(w):
                rec = [r, x, int(gt.hit[r, x]), int(gt.lit[r, x]), _fmt(gt.depth[r, x])]
                rec += [_fmt(v) for v in gt.points[r, x]] + [_fmt(v) for v in gt.normal[r, x]]
                rec += [_fmt(gt.proj_x[r, x]), _fmt(gt.c_s[r, x])] + [_fmt(v) for v in gt.c_d[r, x]]
                rec += [_fmt(gt.md10[r, x]), _fmt(gt.md20[r, x])] + [_fmt(v) for v in gt.K_b[r, x]]
                out.writerow(rec)


def read_truth(path) -> dict:
    """Ground-truth maps keyed by column name, each ``(H, W)``."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ParseError(f"{path}: line 1: empty file")
    cols = rows[0]
    c = sum(1 for x in cols if x.startswith("c_d_"))
    if cols != _truth_columns(c):
        raise ParseError(f"{path}: line 1: unexpected columns")
    data = np.zeros((len(rows) - 1, len(cols)))
    for i, rec in enumerate(rows[1:]):
        lineno = i + 2
        if len(rec) != len(cols):
            raise ParseError(f"{path}: line {lineno}: expected {len(cols)} fields, got {len(rec)}")
        data[i] = [_parse_float(t, lineno, name) for t, name in zip(rec, cols)]
    h = int(data[:, 0].max()) + 1 if len(data) else 0
    w = int(data[:, 1].max()) + 1 if len(data) else 0
    if len(data) != h * w:
        raise ParseError(f"{path}: expected a full {h}x{w} grid, got {len(data)} records")
    maps = {name: np.full((h, w), np.nan) for name in cols}
    r, x = data[:, 0].astype(int), data[:, 1].astype(int)
    for k, name in enumerate(cols):
        maps[name][r, x] = data[:, k]
    for name in ("hit", "lit"):
        maps[name] = maps[name].astype(bool)
    return maps


# --- densification -----------------------------------------------------------------------------

def rbf_densify(sites, values, query, kernel_sigma: float = 4.0, neighbors: int | None = None):
    """Gaussian RBF interpolation of scattered ``values`` onto ``query``.

    ``sites`` and ``query`` are ``(N, 2)``/``(M, 2)`` image coordinates;
    ``values`` is ``(N,)`` or ``(N, K)``. A linear polynomial tail makes
    planar data exact. Falls back to a ``1e-8`` ridge when the system is
    singular.
    """
    sites = np.asarray(sites, dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(sites) < 3:
        raise PreconditionError(f"need at least 3 sites, got {len(sites)}")
    if kernel_sigma <= 0:
        raise PreconditionError("kernel_sigma must be positive")
    eps = 1.0 / (kernel_sigma * np.sqrt(2.0))
    kw = dict(kernel="gaussian", epsilon=eps, degree=1, neighbors=neighbors)
    try:
        rbf = RBFInterpolator(sites, vals, smoothing=0.0, **kw)
    except np.linalg.LinAlgError:
        try:
            rbf = RBFInterpolator(sites, vals, smoothing=1e-8, **kw)
        except np.linalg.LinAlgError as e:
            raise DegenerateError(f"RBF system singular even with a ridge: {e}") from None
    return rbf(np.asarray(query, dtype=float))
