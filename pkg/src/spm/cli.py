"""
Command-line driver: ``spm <subcommand> ...``.

Exit codes: 0 success, 1 other pipeline error, 2 parse error, 3 precondition
violated, 4 numerical degeneracy, 5 file system error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .brdf import FitConfig, FitData, Light, fit_albedo, fit_specular, pca_normals
from .codebook import Codebook, CodeParams, validate_sequence
from .decoder import DecoderConfig, reconstruct_single_shot
from .decompose import decompose_correspondences
from .dense import DenseConfig, adaptive_decode, dense_decode, label_motion, make_shifted_patterns
from .errors import ParseError, PreconditionError, SPMError
from .polcore import PolarimetricImage
from .reflectance import BrdfParams, point_mueller
from .simulator import Rig, render_sequence

IO_EXIT = 5


def _rig(path) -> Rig:
    return io.read_rig(path) if path else Rig.default()


def cmd_gen_pattern(a) -> int:
    params = CodeParams(a.k, a.n, a.aolp_min, a.aolp_max, a.width)
    cb = Codebook.generate(params)
    report = validate_sequence(cb.sequence, params)
    shifted = None
    if a.shifted:
        shifted = make_shifted_patterns(cb, a.shifted, a.sigma, a.seed, a.projector_width, a.projector_height)
    io.write_pattern(a.output, io.PatternSpec(cb, a.projector_width, a.projector_height, shifted))
    print(f"sequence length {len(cb.sequence)}, {report.coverage_count} unique windows, "
          f"adjacency {'ok' if report.adjacency_ok else 'violated'}")
    return 0 if report.ok else 1


def cmd_render(a) -> int:
    scene = io.read_scene(a.scene)
    spec = io.read_pattern(a.pattern)
    rig = _rig(a.rig)
    out = Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    frames = a.frames or spec.count
    seq = render_sequence(scene, spec.patterns(), rig, a.noise, a.seed, frames)
    clean = render_sequence(scene, spec.patterns(), rig, 0.0, a.seed, frames) if a.noise > 0 else seq
    for t, ((img, gt), (ref, _)) in enumerate(zip(seq, clean)):
        io.write_psi(out / f"frame_{t:04d}.psi", img)
        io.write_psi(out / f"clean_{t:04d}.psi", ref)
        io.write_truth(out / f"truth_{t:04d}.csv", gt)
    io._dump_json(out / "render.json", {"frames": frames, "noise": a.noise, "seed": a.seed,
                                        "patterns": spec.count, "rig": io.rig_to_dict(rig)})
    print(f"rendered {frames} frame(s) to {out}")
    return 0


def _decoder_cfg(a) -> DecoderConfig:
    return DecoderConfig(window=a.window, vote_min=a.vote_min)


def cmd_decode(a) -> int:
    image = io.read_psi(a.image)
    spec = io.read_pattern(a.pattern)
    rig = _rig(a.rig)
    corr = reconstruct_single_shot(image, spec.projected(a.frame), rig, _decoder_cfg(a))
    cloud = io.Cloud.from_result(corr)
    cloud.meta["frame"] = a.frame
    io.write_cloud(a.output, cloud)
    print(f"decoded {len(cloud)} correspondences")
    return 0


def cmd_decompose(a) -> int:
    cloud = io.read_cloud(a.cloud)
    dec = decompose_correspondences(cloud, a.average_m00)
    cloud.c_s, cloud.c_d, cloud.md10, cloud.md20 = dec.c_s, dec.c_d, dec.md10, dec.md20
    io.write_cloud(a.output, cloud)
    print(f"decomposed {int(dec.valid.sum())} of {len(cloud)} points")
    return 0


def _fit_config(d: dict) -> tuple[FitConfig, dict]:
    opts = {k: d.pop(k) for k in ("k_neighbors", "channel", "light_position") if k in d}
    if "init" in d:
        d["init"] = io.brdf_from_dict(d["init"], "fit config: init")
    for k in ("lower", "upper"):
        if k in d:
            d[k] = tuple(float(v) for v in d[k])
    try:
        return FitConfig(**d), opts
    except TypeError as e:
        raise ParseError(f"fit config: {e}") from None


# stripe clouds hold one point per stripe and row, so a neighbourhood has to
# reach across several stripes before it stops looking like a curve
STRIPE_NEIGHBORS = 96
DENSE_NEIGHBORS = 12


def _normals(cloud: io.Cloud, k_neighbors: int | None = None):
    have = np.all(np.isfinite(cloud.normals), axis=1)
    if np.all(have):
        return cloud.normals, have
    if k_neighbors is None:
        k_neighbors = DENSE_NEIGHBORS if np.all(cloud.nstack > 1) else STRIPE_NEIGHBORS
    n, ok = pca_normals(cloud.points, min(k_neighbors, len(cloud)))
    return np.where(have[:, None], cloud.normals, n), ok | have


def cmd_fit_brdf(a) -> int:
    cloud = io.read_cloud(a.cloud)
    cfg, opts = _fit_config(io._load_json(a.config) if a.config else {})
    rig = _rig(a.rig)
    light = np.asarray(opts.get("light_position", rig.projector_center), dtype=float)
    ch = int(opts.get("channel", 0))
    normals, ok = _normals(cloud, opts.get("k_neighbors"))
    use = ok & np.isfinite(cloud.c_s[:, ch]) & np.isfinite(cloud.md10[:, ch]) & np.isfinite(cloud.md20[:, ch])
    if use.sum() < 10:
        raise PreconditionError(f"only {int(use.sum())} points carry a valid decomposition")
    data = FitData.from_points(cloud.points[use], cloud.c_s[use, ch], cloud.md10[use, ch],
                               cloud.md20[use, ch], light, cloud.c_d[use])
    res = fit_specular(data, normals[use], cfg)
    K_b, _ = fit_albedo(cloud.c_d[use], res.normals, data.light)
    out = io.brdf_to_dict(res.brdf)
    out.update(objective=float(res.objective), converged=bool(res.converged), iterations=int(res.iterations),
               points=int(use.sum()), light_position=[float(v) for v in light])
    io._dump_json(a.output, out)
    if a.cloud_out:
        cloud.normals = cloud.normals.copy()
        cloud.normals[use] = res.normals
        cloud.K_b = np.full_like(cloud.K_b, np.nan)
        cloud.K_b[use] = K_b
        io.write_cloud(a.cloud_out, cloud)
    print(f"fit {out['points']} points: mu={res.brdf.mu:.4g} k_s={res.brdf.k_s:.4g} "
          f"alpha={res.brdf.alpha:.4g} beta={res.brdf.beta:.4g}")
    return 0


def parse_light(text: str) -> Light:
    """``"dir=x,y,z;I=1"`` or ``"pos=x,y,z;I=1"``."""
    fields = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise ParseError(f"light spec: expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        fields[k.strip()] = v.strip()
    try:
        vec = lambda s: tuple(float(x) for x in s.split(","))
        intensity = float(fields.pop("I", 1.0))
        if set(fields) == {"dir"}:
            return Light(direction=vec(fields["dir"]), intensity=intensity)
        if set(fields) == {"pos"}:
            return Light(position=vec(fields["pos"]), intensity=intensity)
    except ValueError as e:
        raise ParseError(f"light spec: {e}") from None
    raise ParseError(f"light spec needs exactly one of dir= or pos=, got {text!r}")


def relight_cloud(cloud: io.Cloud, brdf: BrdfParams, light: Light, rig: Rig, use_incident: bool = False):
    """Stokes image of the relit cloud, zero away from decoded pixels."""
    normals, _ = _normals(cloud)
    p = cloud.points
    K_b = cloud.K_b
    if not np.all(np.isfinite(K_b)):
        # unfitted albedo: recover it from the diffuse term seen under the projector
        kb, _ = fit_albedo(np.nan_to_num(cloud.c_d, nan=0.0), normals, Light(rig.projector_center).toward(p))
        K_b = np.where(np.isfinite(K_b), K_b, np.nan_to_num(kb, nan=1.0))
    v = -p / np.linalg.norm(p, axis=-1, keepdims=True)
    sm = point_mueller(brdf, normals, light.toward(p), v, K_b)
    s_in = cloud.incident[:, 0] if use_incident else np.tile([1.0, 0.0, 0.0], (len(p), 1))
    s = sm.apply(light.intensity * s_in)
    out = np.zeros((rig.camera.height, rig.camera.width, cloud.channels, 3))
    out[cloud.row, np.floor(cloud.cam_x).astype(int)] = s
    return PolarimetricImage(out)


def cmd_relight(a) -> int:
    cloud = io.read_cloud(a.geometry)
    brdf = io.brdf_from_dict(io._load_json(a.brdf), str(a.brdf))
    img = relight_cloud(cloud, brdf, parse_light(a.light), _rig(a.rig), a.use_incident)
    io.write_psi(a.output, img)
    print(f"relit {len(cloud)} points")
    return 0


def _frame_files(directory) -> list[Path]:
    files = sorted(Path(directory).glob("frame_*.psi"))
    if not files:
        raise PreconditionError(f"no frame_*.psi files in {directory}")
    return files


def cmd_dense(a) -> int:
    spec = io.read_pattern(a.pattern)
    if spec.shifted is None:
        raise PreconditionError("dense decoding needs a shifted pattern set")
    rig = _rig(a.rig)
    frames = [io.read_psi(f) for f in _frame_files(a.frames)]
    cfg = DenseConfig(decoder=DecoderConfig(window=a.window, vote_min=a.vote_min))
    if a.adaptive:
        masks = label_motion(frames, a.tau)
        result = adaptive_decode(frames, spec.shifted, masks, rig, cfg)
        cloud = io.Cloud.from_result(result)
        cloud.meta["frame"] = len(frames) - 1
    else:
        p = spec.shifted.count
        if len(frames) < p:
            raise PreconditionError(f"need {p} frames, found {len(frames)}")
        cloud = io.Cloud.from_result(dense_decode(frames[:p], spec.shifted, rig, cfg))
        cloud.meta["frame"] = p - 1
    io.write_cloud(a.output, cloud)
    print(f"decoded {len(cloud)} correspondences")
    return 0


def _stats(err) -> dict:
    err = np.asarray(err, dtype=float)
    if len(err) == 0:
        return {"count": 0, "mean": None, "median": None, "rms": None}
    return {"count": int(len(err)), "mean": float(err.mean()), "median": float(np.median(err)),
            "rms": float(np.sqrt(np.mean(err ** 2)))}


def evaluate(cloud: io.Cloud, truth: dict, kernel_sigma: float = 4.0) -> dict:
    """Sparse and densified depth errors (mm) and normal errors (deg)."""
    x = np.floor(cloud.cam_x).astype(int)
    h, w = truth["depth"].shape
    inside = (x >= 0) & (x < w) & (cloud.row >= 0) & (cloud.row < h)
    r, x = cloud.row[inside], x[inside]
    z_true = truth["depth"][r, x]
    ok = np.isfinite(z_true) & np.isfinite(cloud.depth[inside])
    report = {"points": int(len(cloud)), "depth_mm": _stats(1000.0 * np.abs(cloud.depth[inside][ok] - z_true[ok]))}
    n = cloud.normals[inside]
    has_n = ok & np.all(np.isfinite(n), axis=1)
    if np.any(has_n):
        nt = np.stack([truth[k][r, x] for k in ("nx", "ny", "nz")], axis=-1)
        cos = np.abs(np.sum(n[has_n] * nt[has_n], axis=1))
        report["normal_deg"] = _stats(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    sites = np.c_[cloud.cam_x[inside][ok], r[ok] + 0.5]
    if len(sites) >= 3:
        yy, xx = np.nonzero(truth["hit"])
        query = np.c_[xx + 0.5, yy + 0.5]
        near = cKDTree(sites).query(query, distance_upper_bound=2.0 * kernel_sigma)[0] <= 2.0 * kernel_sigma
        neighbors = None if len(sites) <= 2000 else 64
        zq = io.rbf_densify(sites, cloud.depth[inside][ok], query[near], kernel_sigma, neighbors)
        report["dense_depth_mm"] = _stats(1000.0 * np.abs(zq - truth["depth"][yy[near], xx[near]]))
    return report


def cmd_eval(a) -> int:
    cloud = io.read_cloud(a.cloud)
    frame = a.frame if a.frame is not None else int(cloud.meta.get("frame", 0))
    truth = io.read_truth(Path(a.truth) / f"truth_{frame:04d}.csv")
    report = evaluate(cloud, truth, a.sigma)
    report["frame"] = frame
    io._dump_json(a.output, report)
    d = report["depth_mm"]
    if d["count"]:
        print(f"{d['count']} points: mean {d['mean']:.3f} mm, median {d['median']:.3f} mm")
    return 0


def cmd_selftest(a) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spm", description="Spatial polarization multiplexing pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    def decoder_opts(p):
        p.add_argument("--window", type=int, default=None, help="voting window (odd, camera px)")
        p.add_argument("--vote-min", type=int, default=None)

    p = add("gen-pattern", cmd_gen_pattern, "generate a codebook / shifted pattern file")
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--width", type=int, default=12, help="stripe width (projector px)")
    p.add_argument("--aolp-min", type=float, default=0.0)
    p.add_argument("--aolp-max", type=float, default=80.0)
    p.add_argument("--shifted", type=int, default=0, metavar="P")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--projector-width", type=int, default=1024)
    p.add_argument("--projector-height", type=int, default=768)
    p.add_argument("-o", "--output", required=True)

    p = add("render", cmd_render, "render synthetic frames and ground truth")
    p.add_argument("--scene", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--rig")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)

    p = add("decode", cmd_decode, "single-shot decoding of one frame")
    p.add_argument("--image", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--rig")
    p.add_argument("--frame", type=int, default=0, help="pattern index within a shifted set")
    decoder_opts(p)
    p.add_argument("-o", "--output", required=True)

    p = add("decompose", cmd_decompose, "split reflection per correspondence")
    p.add_argument("--cloud", required=True)
    p.add_argument("--average-m00", action="store_true")
    p.add_argument("-o", "--output", required=True)

    p = add("fit-brdf", cmd_fit_brdf, "fit the surface BRDF to a decomposed cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--config")
    p.add_argument("--rig")
    p.add_argument("--cloud-out", help="also write the cloud with fitted normals and albedo")
    p.add_argument("-o", "--output", required=True)

    p = add("relight", cmd_relight, "render the fitted geometry under a new light")
    p.add_argument("--geometry", required=True)
    p.add_argument("--brdf", required=True)
    p.add_argument("--light", required=True, help='e.g. "dir=0.3,0.2,1;I=1"')
    p.add_argument("--rig")
    p.add_argument("--use-incident", action="store_true", help="illuminate with the decoded incident Stokes")
    p.add_argument("-o", "--output", required=True)

    p = add("dense", cmd_dense, "per-pixel decoding from shifted patterns")
    p.add_argument("--frames", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--rig")
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--tau", type=float, default=0.1)
    decoder_opts(p)
    p.add_argument("-o", "--output", required=True)

    p = add("eval", cmd_eval, "depth and normal errors against ground truth")
    p.add_argument("--cloud", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--frame", type=int, default=None)
    p.add_argument("--sigma", type=float, default=4.0, help="RBF kernel sigma (camera px)")
    p.add_argument("-o", "--output", required=True)

    add("selftest", cmd_selftest, "run the built-in oracle checks")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SPMError as e:
        print(f"spm {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"spm {args.command}: {e}", file=sys.stderr)
        return IO_EXIT


if __name__ == "__main__":
    sys.exit(main())
