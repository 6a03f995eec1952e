"""
Shifted-pattern dense matching and adaptive static/dynamic decoding.

Each of ``P`` patterns is the base stripe pattern shifted by a fraction of
the stripe width, with its own AoLP level assignment and softened edges.
For a static pixel the ``P`` observed ``(s1, s2)`` pairs form a stack that
is an affine image of the incident stack of its projector column (scale
``c_s``, per-component offsets from the diffuse term), so stacks are
compared with an affine-invariant cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .codebook import Codebook, PatternImage, StripeLayout
from .decoder import (CorrespondenceSet, DecoderConfig, ProjectedCode, build_correspondences,
                      decode_row, detect_stripes, monotone_align, split_flags, stripe_score, triangulate)
from .errors import DegenerateError, PreconditionError
from .simulator import Rig

PATTERN_CONDITION = 1e6


# --- shifted patterns ---------------------------------------------------------

@dataclass(frozen=True)
class ShiftedPatternSet:
    codebook: Codebook
    offsets: np.ndarray          # (P,) projector px
    sigma: float
    permutations: np.ndarray     # (P, k): symbol -> level index
    patterns: tuple              # PatternImage per shift
    layouts: tuple               # StripeLayout per shift

    @property
    def count(self) -> int:
        return len(self.offsets)

    def projected(self, t: int) -> ProjectedCode:
        t = t % self.count
        return ProjectedCode(self.codebook.levels, self.layouts[t], self.patterns[t])

    def incident_stack(self, order=None) -> np.ndarray:
        """Incident Stokes ``(width, P, 3)`` per projector column."""
        order = range(self.count) if order is None else order
        return np.stack([self.patterns[t % self.count].column_stokes() for t in order], axis=1)


def _shifted_symbols(codebook: Codebook, width: int, offset: float):
    w = codebook.params.stripe_width
    idx = np.floor((np.arange(width) + 0.5 + offset) / w).astype(int)
    if idx.max() >= len(codebook.sequence):
        raise PreconditionError("sequence too short for the projector width")
    return idx


def _smooth_angles(aolp, sigma):
    if sigma <= 0:
        return np.asarray(aolp, dtype=float)
    two = 2.0 * np.radians(aolp)
    c = gaussian_filter1d(np.cos(two), sigma, mode="nearest")
    s = gaussian_filter1d(np.sin(two), sigma, mode="nearest")
    return 0.5 * np.degrees(np.arctan2(s, c))


def _stack_condition(incident) -> np.ndarray:
    """Design-matrix condition number of every column's incident stack."""
    s = np.asarray(incident, dtype=float)          # (W, P, 3)
    a = np.zeros((s.shape[0], 2 * s.shape[1], 3))
    a[:, 0::2, 0] = s[..., 0]
    a[:, 0::2, 2] = s[..., 1]
    a[:, 1::2, 1] = s[..., 0]
    a[:, 1::2, 2] = -s[..., 2]
    sv = np.linalg.svd(a, compute_uv=False)
    with np.errstate(divide="ignore"):
        return np.where(sv[:, -1] > 0, sv[:, 0] / sv[:, -1], np.inf)


def _build_patterns(codebook, perms, offsets, sigma, width, height):
    patterns = []
    for t, o in enumerate(offsets):
        levels = perms[t][codebook.sequence[_shifted_symbols(codebook, width, o)]]
        patterns.append(PatternImage(_smooth_angles(codebook.levels[levels], sigma), height))
    return patterns


def shifted_pattern_set(codebook: Codebook, permutations, sigma: float = 1.0,
                        projector_width: int = 1024, projector_height: int = 768,
                        offsets=None) -> ShiftedPatternSet:
    """Pattern set for explicit per-pattern level permutations.

    ``offsets`` default to ``t * stripe_width / P``. Raises if any column's
    incident stack is ill conditioned.
    """
    perms = np.asarray(permutations, dtype=int)
    count, k = perms.shape
    w = codebook.params.stripe_width
    if count < 2 or k != codebook.params.k_db:
        raise PreconditionError(f"need (P >= 2, {codebook.params.k_db}) permutations, got {perms.shape}")
    if any(sorted(row) != list(range(k)) for row in perms.tolist()):
        raise PreconditionError("every row must be a permutation of the symbols")
    offsets = np.arange(count) * w / count if offsets is None else np.asarray(offsets, dtype=float)
    patterns = _build_patterns(codebook, perms, offsets, sigma, projector_width, projector_height)
    inc = np.stack([p.column_stokes() for p in patterns], axis=1)
    if not np.all(_stack_condition(inc) < PATTERN_CONDITION):
        raise DegenerateError("level assignments leave some column stacks ill conditioned")
    layouts = []
    for t, o in enumerate(offsets):
        first = int(np.floor(o / w))
        last = int(np.floor((projector_width - 1 + o) / w))
        idx = np.arange(first, last + 1)
        starts = idx * w - o
        centers = starts + 0.5 * w
        keep = (centers >= 0) & (centers < projector_width)
        lvl = perms[t][codebook.sequence[idx[keep]]]
        layouts.append(StripeLayout(codebook.levels[lvl], lvl, centers[keep], starts[keep], w))
    return ShiftedPatternSet(codebook, offsets, float(sigma), perms, tuple(patterns), tuple(layouts))


def make_shifted_patterns(codebook: Codebook, count: int = 12, sigma: float = 1.0, seed: int = 0,
                          projector_width: int = 1024, projector_height: int = 768,
                          max_tries: int = 1000) -> ShiftedPatternSet:
    """``count`` patterns offset by ``t * stripe_width / count`` columns.

    Pattern 0 is the unshifted base pattern. The others draw a level
    permutation from ``seed`` until every column's incident stack is well
    conditioned for the reduced Mueller solve.
    """
    if count < 2:
        raise PreconditionError("need at least two shifted patterns")
    if sigma < 0:
        raise PreconditionError("sigma must be non-negative")
    k = codebook.params.k_db
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        perms = np.stack([np.arange(k)] + [rng.permutation(k) for _ in range(count - 1)])
        try:
            return shifted_pattern_set(codebook, perms, sigma, projector_width, projector_height)
        except DegenerateError:
            continue
    raise DegenerateError("could not find level assignments with diverse incident stacks")


# --- affine-invariant cost ---------------------------------------------------------

def interleave(stokes) -> np.ndarray:
    """``(..., P, 3)`` Stokes -> ``(..., 2P)`` stack ``s1, s2, s1, s2, ...``."""
    s = np.asarray(stokes, dtype=float)
    return s[..., 1:3].reshape(s.shape[:-2] + (2 * s.shape[-2],))


def incident_stack_vector(stokes) -> np.ndarray:
    """Interleaved incident stack with ``s2`` negated (specular flip)."""
    x = interleave(stokes).copy()
    x[..., 1::2] *= -1.0
    return x


def _centre(x):
    x = np.asarray(x, dtype=float)
    out = x.copy()
    out[..., 0::2] -= x[..., 0::2].mean(axis=-1, keepdims=True)
    out[..., 1::2] -= x[..., 1::2].mean(axis=-1, keepdims=True)
    return out


def directed_cost(y, x):
    """``min_{a,b1,b2} |a x + b1 1_o + b2 1_e - y|^2`` in closed form."""
    yc, xc = _centre(y), _centre(x)
    yy = np.sum(yc * yc, axis=-1)
    xx = np.sum(xc * xc, axis=-1)
    xy = np.sum(xc * yc, axis=-1)
    return yy - np.where(xx > 0, xy * xy / np.where(xx > 0, xx, 1.0), 0.0)


def match_cost(so, si):
    """Symmetric affine-invariant cost between an observed and an incident stack.

    ``si`` is expected with its ``s2`` entries already negated.
    """
    so = np.asarray(so, dtype=float)
    si = np.asarray(si, dtype=float)
    if so.shape[-1] != si.shape[-1]:
        raise PreconditionError("stacks must have equal length")
    if so.shape[-1] % 2 or so.shape[-1] < 4:
        raise PreconditionError("stacks need an even length >= 4")
    return directed_cost(so, si) + directed_cost(si, so)


def cost_matrix(observed, incident) -> np.ndarray:
    """Pairwise :func:`match_cost` between ``(K, 2P)`` and ``(J, 2P)`` stacks."""
    yc, xc = _centre(observed), _centre(incident)
    yy = np.sum(yc * yc, axis=-1)[:, None]
    xx = np.sum(xc * xc, axis=-1)[None, :]
    g2 = (yc @ xc.T) ** 2
    inv_x = np.where(xx > 0, 1.0 / np.where(xx > 0, xx, 1.0), 0.0)
    inv_y = np.where(yy > 0, 1.0 / np.where(yy > 0, yy, 1.0), 0.0)
    return yy + xx - g2 * (inv_x + inv_y)


def score_and_threshold(cost, t: float = 0.2):
    """``score = C0 - C`` with ``C0 = (1 - t) min C + t max C``."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        raise PreconditionError("empty cost matrix")
    lo = cost.min()
    c0 = lo + t * (cost.max() - lo)   # same value, exact for a constant matrix
    return c0 - cost, float(c0)


def normalised_score(cost, t: float = 0.2):
    """Scores divided by ``|C0|`` so they compare with stripe scores."""
    score, c0 = score_and_threshold(cost, t)
    return (score / abs(c0) if c0 != 0 else score), c0


def subpixel_refine(score_row, j_peak: int):
    """Parabola vertex through the peak and its neighbours.

    Returns ``(j_star, ok)``; ``ok`` is False for a flat triple, a
    boundary peak, or a sample that is not a local maximum.
    """
    s = np.asarray(score_row, dtype=float)
    j = int(j_peak)
    if j <= 0 or j >= len(s) - 1:
        return float(j), False
    a, b, c = s[j - 1], s[j], s[j + 1]
    if b < a or b < c:
        return float(j), False
    curv = a - 2.0 * b + c
    if curv == 0:
        return float(j), False
    return j + 0.5 * (a - c) / curv, True


# --- dense and hybrid decoding ---------------------------------------------------------

@dataclass
class DenseConfig:
    t: float = 0.2
    decoder: DecoderConfig | None = None
    subpixel: bool = True


@dataclass
class DenseCorrespondences:
    """Per-pixel matches with their Stokes stacks over the ``P`` frames."""

    row: np.ndarray
    cam_x: np.ndarray
    proj_x: np.ndarray          # continuous, sub-pixel
    column: np.ndarray          # integer projector column
    refined: np.ndarray         # parabola refinement applied
    incident: np.ndarray        # (N, P, 3)
    observed: np.ndarray        # (N, P, C, 3)
    points: np.ndarray

    def __len__(self):
        return len(self.row)

    @property
    def depth(self):
        return self.points[:, 2]

    def stack(self, i: int):
        return self.incident[i], self.observed[i]

    @classmethod
    def empty(cls, count: int, channels: int) -> "DenseCorrespondences":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return cls(zi, z, z, zi, np.zeros(0, dtype=bool), np.zeros((0, count, 3)),
                   np.zeros((0, count, channels, 3)), np.zeros((0, 3)))


@dataclass
class _Window:
    """Stacks of the ``P`` frames ending at one time step."""

    observed: np.ndarray        # (H, W, P, C, 3)
    incident: np.ndarray        # (Wp, P, 3)
    obs_vec: np.ndarray         # (H, W, 2P) shape channel
    inc_vec: np.ndarray         # (Wp, 2P)
    lit: np.ndarray             # (H, W) lit in every frame


def _window(frames, patterns: ShiftedPatternSet, end: int, channel: int, floor: float) -> _Window:
    p = patterns.count
    idx = list(range(end - p + 1, end + 1))
    obs = np.stack([frames[i].stokes for i in idx], axis=2)
    inc = patterns.incident_stack(idx)
    lit = np.all(obs[..., channel, 0] >= floor, axis=2)
    return _Window(obs, inc, interleave(obs[..., channel, :]), incident_stack_vector(inc), lit)


def _resolve(cfg: DenseConfig | None, rig: Rig, patterns: ShiftedPatternSet, channels: int):
    cfg = cfg or DenseConfig()
    dec = (cfg.decoder or DecoderConfig()).resolved(rig, patterns.codebook.params.stripe_width, channels)
    return cfg, dec


def _hybrid_row(r, dense_px, win: _Window | None, stripes, code: ProjectedCode, cfg: DenseConfig,
                dec: DecoderConfig):
    """One monotone DP over per-pixel stacks and stripe detections.

    Returns ``(dense_matches, stripe_matches)`` with dense matches as
    ``(pixel, column, j_star, refined)`` and stripe matches as
    ``(detection, stripe index)``.
    """
    n_cols = code.pattern.width
    dscore = None
    if len(dense_px):
        cost = cost_matrix(win.obs_vec[r, dense_px], win.inc_vec)
        dscore, _ = normalised_score(cost, cfg.t)
    # a stripe may sit anywhere within its span: runs cut at a region
    # boundary cover only part of it and must not collide with the stacks
    lay = code.layout
    stripe_of_col = np.full(n_cols, -1)
    for k, a in enumerate(lay.starts):
        a = int(a)
        stripe_of_col[max(a, 0):min(a + lay.width, n_cols)] = k
    sscore = None
    if stripes:
        angles = code.levels[[d.symbol for d in stripes]]
        per_stripe = stripe_score(angles, lay.angles, dec.phi_th)
        covered = stripe_of_col >= 0
        sscore = np.full((len(stripes), n_cols), -np.inf)
        sscore[:, covered] = per_stripe[:, stripe_of_col[covered]]
    xs = np.concatenate([np.asarray(dense_px, dtype=float) + 0.5, [d.x for d in stripes]])
    kind = np.concatenate([np.zeros(len(dense_px), dtype=int), np.ones(len(stripes), dtype=int)])
    local = np.concatenate([np.arange(len(dense_px)), np.arange(len(stripes))]).astype(int)
    order = np.argsort(xs, kind="stable")
    rows = []
    for o in order:
        rows.append(dscore[local[o]] if kind[o] == 0 else sscore[local[o]])
    if not rows:
        return [], []
    shared = kind[order] == 0
    split = split_flags(stripes, dec.period)
    prev = -1
    for i, o in enumerate(order):
        if kind[o] == 1:
            # a split stripe may share only with the run just before it
            shared[i] = bool(split[local[o]]) and prev == local[o] - 1
            prev = local[o]
        else:
            prev = -1
    pairs, _ = monotone_align(np.array(rows), shared=shared)
    dense_m, stripe_m = [], []
    for i, j in pairs:
        o = order[i]
        if kind[o] == 0:
            row_scores = dscore[local[o]]
            if cfg.subpixel:
                js, ok = subpixel_refine(row_scores, j)
            else:
                js, ok = float(j), False
            dense_m.append((int(dense_px[local[o]]), int(j), js, ok))
        else:
            stripe_m.append((local[o], int(stripe_of_col[j])))
    return dense_m, stripe_m


def _assemble_dense(matches, win: _Window, rig: Rig, dec: DecoderConfig, count: int) -> DenseCorrespondences:
    channels = win.observed.shape[3]
    if not matches:
        return DenseCorrespondences.empty(count, channels)
    rows = np.array([m[0] for m in matches])
    px = np.array([m[1] for m in matches])
    col = np.array([m[2] for m in matches])
    js = np.array([m[3] for m in matches])
    ok = np.array([m[4] for m in matches])
    cam_x = px + 0.5
    proj_x = js + 0.5
    c, p = rig.camera, rig.projector
    keep = (cam_x - c.cx) / c.focal - (proj_x - p.cx) / p.focal > dec.min_disparity
    rows, px, col, cam_x, proj_x, ok = rows[keep], px[keep], col[keep], cam_x[keep], proj_x[keep], ok[keep]
    if len(rows):
        points, _ = triangulate(cam_x, rows, proj_x, rig, dec.min_disparity)
    else:
        points = np.zeros((0, 3))
    return DenseCorrespondences(rows, cam_x, proj_x, col, ok, win.incident[col],
                                win.observed[rows, px], points)


def dense_decode(frames, patterns: ShiftedPatternSet, rig: Rig, cfg: DenseConfig | None = None):
    """Per-pixel decoding of ``P`` frames of a static scene (frame ``t`` lit by pattern ``t``)."""
    if len(frames) != patterns.count:
        raise PreconditionError(f"need {patterns.count} frames, got {len(frames)}")
    channels = frames[0].channels
    cfg, dec = _resolve(cfg, rig, patterns, channels)
    end = patterns.count - 1
    floor = dec.radiance_floor * patterns.patterns[0].intensity
    win = _window(frames, patterns, end, dec.channel, floor)
    code = patterns.projected(end)
    matches = []
    for r in range(frames[0].height):
        px = np.flatnonzero(win.lit[r])
        dm, _ = _hybrid_row(r, px, win, [], code, cfg, dec)
        matches += [(r,) + m for m in dm]
    return _assemble_dense(matches, win, rig, dec, patterns.count)


# --- motion labelling and adaptive decoding ------------------------------------------------

@dataclass(frozen=True)
class MotionMask:
    dynamic: np.ndarray     # (T, H, W); frame 0 has no predecessor and is static
    tau: float

    def static_window(self, t: int, count: int) -> np.ndarray:
        """Pixels unchanged over the ``count`` frames ending at ``t``."""
        if t < count - 1:
            return np.zeros(self.dynamic.shape[1:], dtype=bool)
        return ~np.any(self.dynamic[t - count + 2:t + 1], axis=0)


def label_motion(frames, tau: float = 0.1, floor: float = 1e-4) -> MotionMask:
    """Frame-to-frame ``s0`` change test, any channel."""
    if len(frames) < 2:
        raise PreconditionError("need at least two frames")
    s0 = np.stack([f.stokes[..., 0] for f in frames])        # (T, H, W, C)
    diff = np.abs(s0[1:] - s0[:-1])
    ref = np.maximum(np.maximum(s0[1:], s0[:-1]), floor)
    dyn = np.any(diff > tau * ref, axis=-1)
    return MotionMask(np.concatenate([np.zeros((1,) + dyn.shape[1:], dtype=bool), dyn]), float(tau))


@dataclass
class AdaptiveResult:
    stripe: CorrespondenceSet
    dense: DenseCorrespondences
    static: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return np.concatenate([self.stripe.points, self.dense.points])


def adaptive_decode(frames, patterns: ShiftedPatternSet, masks: MotionMask, rig: Rig,
                    cfg: DenseConfig | None = None, frame: int | None = None) -> AdaptiveResult:
    """Hybrid decoding of frame ``frame`` (default last).

    Static pixels contribute stacks from the trailing ``P`` frames, dynamic
    pixels vote for stripes in the current frame only; each scanline is
    aligned in one DP.
    """
    t = len(frames) - 1 if frame is None else frame
    if masks.dynamic.shape[0] != len(frames):
        raise PreconditionError("mask and frame counts differ")
    image = frames[t]
    channels = image.channels
    cfg, dec = _resolve(cfg, rig, patterns, channels)
    code = patterns.projected(t)
    floor = dec.radiance_floor * code.pattern.intensity
    static = masks.static_window(t, patterns.count)
    win = _window(frames, patterns, t, dec.channel, floor) if static.any() else None
    dense_matches = []
    rows, xs, proj, stripe, symbol, obs = [], [], [], [], [], []
    for r in range(image.height):
        dense_px = np.flatnonzero(static[r] & win.lit[r]) if win is not None else np.zeros(0, dtype=int)
        dynamic = ~static[r]
        if len(dense_px) == 0:
            voting = None if dynamic.all() else dynamic
            found = decode_row(image.stokes[r], code, dec, r, voting)
            sm = [(det, j) for det, j, _ in found]
        else:
            dets = []
            if dynamic.any():
                dets = detect_stripes(image.stokes[r], code.levels, dec.window, dec.vote_min, floor,
                                      dec.negate_aolp, r, dec.channel, dynamic)
            dm, sidx = _hybrid_row(r, dense_px, win, dets, code, cfg, dec)
            dense_matches += [(r,) + m for m in dm]
            sm = [(dets[i], j) for i, j in sidx]
        for det, j in sm:
            rows.append(r)
            xs.append(det.x)
            proj.append(code.layout.centers[j])
            stripe.append(j)
            symbol.append(det.symbol)
            obs.append(det.stokes)
    if rows:
        stripe_arr = np.array(stripe)
        scs = build_correspondences(rows, xs, proj, stripe_arr, symbol, code.stripe_stokes()[stripe_arr],
                                    np.array(obs), rig, dec.min_disparity)
    else:
        scs = CorrespondenceSet.empty(channels)
    if win is not None:
        dense = _assemble_dense(dense_matches, win, rig, dec, patterns.count)
    else:
        dense = DenseCorrespondences.empty(patterns.count, channels)
    return AdaptiveResult(scs, dense, static)
