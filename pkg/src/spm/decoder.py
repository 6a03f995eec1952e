"""
Single-shot decoding: stripe detection, dynamic-programming alignment
against the projected sequence, and ray-plane triangulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook, PatternImage, StripeLayout, assemble_pattern, quantize_aolp
from .errors import DegenerateError, PreconditionError
from .polcore import PolarimetricImage, aolp_of
from .simulator import Rig

PHI_TH = 30.0
GAP_TIEBREAK = 1e-9
# stripe DP gap costs: opening a gap costs more than the 0.107 lost to a
# one-level mislabel, so such a detection is absorbed in place; the per-stripe
# cost keeps long jumps expensive
GAP_OPEN = 0.15
GAP_EXTEND = 0.05


@dataclass(frozen=True)
class ProjectedCode:
    """What the decoder knows about one projected pattern."""

    levels: np.ndarray
    layout: StripeLayout
    pattern: PatternImage

    @classmethod
    def from_codebook(cls, codebook: Codebook, rig: Rig) -> "ProjectedCode":
        w, h = rig.projector.width, rig.projector.height
        return cls(codebook.levels, codebook.layout(w), assemble_pattern(codebook, w, h))

    def stripe_stokes(self) -> np.ndarray:
        cols = np.clip(np.floor(self.layout.centers).astype(int), 0, self.pattern.width - 1)
        return self.pattern.column_stokes()[cols]


@dataclass
class DecoderConfig:
    window: int | None = None        # odd; default: stripe period in camera px
    vote_min: int | None = None      # default: window // 3
    radiance_floor: float = 1e-4     # relative to the pattern intensity
    negate_aolp: bool = True         # specular reflection flips the AoLP sign
    channel: int | None = None       # shape channel; default green for RGB
    phi_th: float = PHI_TH
    min_disparity: float = 1e-6      # normalised units
    period: float | None = None      # stripe width in camera px, set by resolved()
    gap_open: float = GAP_OPEN       # per run of skipped projector stripes
    gap_extend: float = GAP_EXTEND   # per skipped projector stripe

    def resolved(self, rig: Rig, stripe_width: int, channels: int) -> "DecoderConfig":
        period = stripe_width * rig.camera_px_per_projector_px()
        window = self.window
        if window is None:
            window = max(1, int(np.floor(period)))
            if window % 2 == 0:
                window -= 1
        if window % 2 == 0:
            raise PreconditionError("window must be odd")
        vote_min = self.vote_min if self.vote_min is not None else max(1, window // 3)
        channel = self.channel if self.channel is not None else (1 if channels == 3 else 0)
        if self.gap_open < 0 or self.gap_extend < 0:
            raise PreconditionError("gap costs must be non-negative")
        return DecoderConfig(window, vote_min, self.radiance_floor, self.negate_aolp, channel,
                             self.phi_th, self.min_disparity, period, self.gap_open, self.gap_extend)


@dataclass
class DetectedStripe:
    row: int
    x: float             # continuous camera x of the run centre
    symbol: int
    votes: int
    stokes: np.ndarray   # mean observed Stokes (C, 3) over supporting pixels
    first: int = 0
    last: int = 0


def pixel_labels(row_stokes, levels, floor, negate=True, voting=None):
    """Per-pixel quantized symbol (``-1`` for unlit or rejected pixels)."""
    s = np.asarray(row_stokes, dtype=float)
    lit = s[..., 0] >= floor
    if voting is not None:
        lit &= voting
    aolp = aolp_of(s)
    if negate:
        aolp = -aolp
    labels = quantize_aolp(aolp, levels)
    return np.where(lit, labels, -1), lit


def detect_stripes(row_stokes, levels, window_w: int, vote_min: int, floor: float = 1e-4,
                   negate: bool = True, row: int = 0, channel: int = 0, voting=None) -> list[DetectedStripe]:
    """Windowed AoLP voting along one scanline.

    ``row_stokes`` is ``(W, 3)`` or ``(W, C, 3)``; ``channel`` selects the
    channel that votes, the mean Stokes is kept for every channel.
    ``voting`` optionally masks the pixels allowed to vote. Runs touching
    either end of the scanline are dropped.
    """
    if window_w % 2 == 0 or window_w < 1:
        raise PreconditionError("window_w must be a positive odd integer")
    if vote_min < 1:
        raise PreconditionError("vote_min must be >= 1")
    s = np.asarray(row_stokes, dtype=float)
    if s.ndim == 2:
        s = s[:, None, :]
    levels = np.asarray(levels, dtype=float)
    k = len(levels)
    raw, lit = pixel_labels(s[:, channel], levels, floor, negate, voting)
    width = len(raw)
    onehot = np.zeros((width + 1, k))
    valid = raw >= 0
    onehot[1:][valid, raw[valid]] = 1.0
    csum = np.cumsum(onehot, axis=0)
    half = window_w // 2
    lo = np.clip(np.arange(width) - half, 0, width)
    hi = np.clip(np.arange(width) + half + 1, 0, width)
    counts = csum[hi] - csum[lo]
    winner = np.argmax(counts, axis=1)
    votes = counts[np.arange(width), winner]
    filtered = np.where(lit & (votes >= vote_min), winner, -1)

    stripes = []
    x = 0
    while x < width:
        sym = filtered[x]
        if sym < 0:
            x += 1
            continue
        end = x
        while end + 1 < width and filtered[end + 1] == sym:
            end += 1
        support = np.flatnonzero(raw[x:end + 1] == sym) + x
        # a run cut by the image border has a biased centre
        inside = x > 0 and end < width - 1
        if inside and len(support) >= vote_min:
            stripes.append(DetectedStripe(row, 0.5 * (x + end + 1), int(sym), len(support),
                                          s[support].mean(axis=0), x, end))
        x = end + 1
    return stripes


def stripe_score(det_angles, proj_angles, phi_th: float = PHI_TH) -> np.ndarray:
    """``cos(2 phi_d - 2 phi_p) - cos(2 phi_th)`` for every pair."""
    d = np.radians(np.asarray(det_angles, dtype=float))[:, None]
    p = np.radians(np.asarray(proj_angles, dtype=float))[None, :]
    return np.cos(2 * d - 2 * p) - np.cos(2 * np.radians(phi_th))


def monotone_align(score, shared=None, gap_open: float = 0.0, gap_extend: float = GAP_TIEBREAK):
    """Maximum-score monotone alignment of candidates (rows) to targets (columns).

    Only pairs with positive score may match; skipping candidates, or targets
    before the first and after the last match, adds nothing. A run of ``k``
    targets skipped between two matches costs ``gap_open + k * gap_extend``;
    the default ``gap_extend`` only breaks ties toward the most compact
    alignment. Matched targets strictly increase, except that a candidate
    flagged in ``shared`` may reuse the previous match's target. Returns
    ``(pairs, total)`` with ``(i, j)`` pairs in increasing order and
    ``total`` the summed score of the pairs, gap costs excluded.
    """
    score = np.asarray(score, dtype=float)
    m, n = score.shape
    shared = np.zeros(m, dtype=bool) if shared is None else np.asarray(shared, dtype=bool)
    if m == 0 or n == 0:
        return [], 0.0
    ramp = gap_extend * np.arange(n)
    idx = np.arange(n)
    # ending[j]: best value whose last match is exactly target j
    # open_[j]: best value with last match <= j, penalised for targets skipped since
    ending = np.full(n, -np.inf)
    open_ = np.full(n, -np.inf)
    took = np.zeros((m, n), dtype=bool)
    back = np.zeros((m, n), dtype=np.int64)  # target of the previous match, -1 if none
    ptrs = np.zeros((m + 1, n), dtype=np.int64)
    ptrs[0] = -1
    for i in range(m):
        row = score[i]
        # previous match at j - 1, or further back behind a gap
        adjacent = np.concatenate([[-np.inf], ending])[:n]
        gapped = np.concatenate([[-np.inf, -np.inf], open_])[:n] - gap_extend - gap_open
        prior = np.maximum(adjacent, gapped)
        prior_ptr = np.where(adjacent >= gapped, idx - 1, np.concatenate([[-1, -1], ptrs[i]])[:n])
        if shared[i]:
            reuse = ending
            better = reuse > prior
            prior = np.where(better, reuse, prior)
            prior_ptr = np.where(better, idx, prior_ptr)
        start = prior <= 0
        cand = np.where(start, 0.0, prior) + row
        use = (row > 0) & (cand > ending)
        ending = np.where(use, cand, ending)
        took[i] = use
        back[i] = np.where(start, -1, prior_ptr)
        shifted = ending + ramp
        run = np.maximum.accumulate(shifted)
        open_ = run - ramp
        ptrs[i + 1] = np.maximum.accumulate(np.where(shifted == run, idx, -1))
        ptrs[i + 1][~np.isfinite(run)] = -1
    if not np.isfinite(ending.max()):
        return [], 0.0
    pairs = []
    j = int(np.argmax(ending))
    i = m - 1
    while j >= 0 and i >= 0:
        while i >= 0 and not took[i, j]:
            i -= 1
        if i < 0:
            break
        pairs.append((i, j))
        j = int(back[i, j])
        i -= 1
    pairs.reverse()
    return pairs, float(sum(score[i, j] for i, j in pairs))


def triangulate(cam_x, row, proj_x, rig: Rig, min_disparity: float = 1e-9):
    """Intersect camera rays with projector column planes.

    ``cam_x``/``proj_x`` are continuous x coordinates, ``row`` the camera
    row index. Returns ``(points (..., 3), depth)``.
    """
    c, p = rig.camera, rig.projector
    xc = (np.asarray(cam_x, dtype=float) - c.cx) / c.focal
    xq = (np.asarray(proj_x, dtype=float) - p.cx) / p.focal
    denom = xc - xq
    if np.any(denom <= min_disparity):
        raise DegenerateError("ray and stripe plane are (nearly) parallel: disparity too small")
    z = rig.baseline / denom
    y = (np.asarray(row, dtype=float) + 0.5 - c.cy) / c.focal
    pts = np.stack(np.broadcast_arrays(xc * z, y * z, z), axis=-1)
    return pts, z


@dataclass
class CorrespondenceSet:
    """Column-oriented decoded correspondences.

    ``left``/``right`` index the matched neighbours on the same scanline
    (``-1`` when absent); ``pairs(i)`` gives the Stokes stack of point ``i``.
    """

    row: np.ndarray
    cam_x: np.ndarray
    proj_x: np.ndarray
    stripe: np.ndarray
    symbol: np.ndarray
    incident: np.ndarray      # (N, 3)
    observed: np.ndarray      # (N, C, 3)
    left: np.ndarray
    right: np.ndarray
    points: np.ndarray        # (N, 3)
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.row)

    @property
    def depth(self):
        return self.points[:, 2]

    def stack_indices(self, i: int) -> list[int]:
        """Centre first, then available neighbours."""
        idx = [i]
        for nb in (self.left[i], self.right[i]):
            if nb >= 0:
                idx.append(int(nb))
        return idx

    def stack(self, i: int):
        """``(incident (N, 3), observed (N, C, 3))`` pairs for point ``i``."""
        idx = self.stack_indices(i)
        return self.incident[idx], self.observed[idx]

    @classmethod
    def empty(cls, channels: int = 1) -> "CorrespondenceSet":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=int)
        return cls(zi, z, z, zi, zi, np.zeros((0, 3)), np.zeros((0, channels, 3)), zi, zi, np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, parts: list["CorrespondenceSet"], channels: int = 1) -> "CorrespondenceSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(channels)
        offsets = np.cumsum([0] + [len(p) for p in parts[:-1]])

        def shift(arr, off):
            return np.where(arr >= 0, arr + off, -1)

        return cls(
            np.concatenate([p.row for p in parts]),
            np.concatenate([p.cam_x for p in parts]),
            np.concatenate([p.proj_x for p in parts]),
            np.concatenate([p.stripe for p in parts]),
            np.concatenate([p.symbol for p in parts]),
            np.concatenate([p.incident for p in parts]),
            np.concatenate([p.observed for p in parts]),
            np.concatenate([shift(p.left, o) for p, o in zip(parts, offsets)]),
            np.concatenate([shift(p.right, o) for p, o in zip(parts, offsets)]),
            np.concatenate([p.points for p in parts]),
        )


def split_flags(detected, period: float | None = None) -> np.ndarray:
    """Detections that may share the previous detection's stripe.

    A stripe cut by an occlusion edge shows up as two runs of one symbol.
    A pair qualifies when the symbols match and, given ``period`` (the
    stripe width in camera pixels), the two runs together are no wider than
    one stripe plus a pixel.
    """
    flags = np.zeros(len(detected), dtype=bool)
    for i in range(1, len(detected)):
        a, b = detected[i - 1], detected[i]
        if a.symbol != b.symbol:
            continue
        span = (a.last - a.first + 1) + (b.last - b.first + 1)
        flags[i] = period is None or span <= period + 1
    return flags


def dp_decode(detected: list[DetectedStripe], layout: StripeLayout, levels=None,
              phi_th: float = PHI_TH, period: float | None = None, gap_open: float = GAP_OPEN,
              gap_extend: float = GAP_EXTEND):
    """Align detections (sorted by x) with the projected stripes.

    ``levels`` maps detected symbols to angles (defaults to the layout's
    distinct angles in increasing order). ``period`` limits which repeated
    symbols count as one split stripe, see :func:`split_flags`. Skipped
    stripes cost as in :func:`monotone_align`. Returns
    ``(det, stripe, score)`` triples for the positive-score matches.
    """
    if not detected:
        return []
    xs = [d.x for d in detected]
    if any(b < a for a, b in zip(xs, xs[1:])):
        raise PreconditionError("detections must be sorted by x")
    if levels is None:
        levels = np.unique(layout.angles)
    angles = np.asarray(levels, dtype=float)[[d.symbol for d in detected]]
    score = stripe_score(angles, layout.angles, phi_th)
    pairs, _ = monotone_align(score, split_flags(detected, period), gap_open, gap_extend)
    return [(i, j, float(score[i, j])) for i, j in pairs]


def link_neighbours(row_groups, stripe):
    """Neighbour indices for items sharing a row whose stripe index differs by one."""
    n = len(stripe)
    left = np.full(n, -1)
    right = np.full(n, -1)
    for idx in row_groups:
        by_stripe = {int(stripe[i]): i for i in idx}
        for i in idx:
            left[i] = by_stripe.get(int(stripe[i]) - 1, -1)
            right[i] = by_stripe.get(int(stripe[i]) + 1, -1)
    return left, right


def build_correspondences(rows, cam_x, proj_x, stripe, symbol, incident, observed, rig: Rig,
                          min_disparity: float, neighbours: bool = True) -> CorrespondenceSet:
    rows = np.asarray(rows, dtype=int)
    cam_x = np.asarray(cam_x, dtype=float)
    proj_x = np.asarray(proj_x, dtype=float)
    c, p = rig.camera, rig.projector
    disparity = (cam_x - c.cx) / c.focal - (proj_x - p.cx) / p.focal
    keep = disparity > min_disparity
    rows, cam_x, proj_x = rows[keep], cam_x[keep], proj_x[keep]
    stripe = np.asarray(stripe, dtype=int)[keep]
    symbol = np.asarray(symbol, dtype=int)[keep]
    incident = np.asarray(incident, dtype=float).reshape(-1, 3)[keep]
    observed = np.asarray(observed, dtype=float)[keep]
    points, _ = triangulate(cam_x, rows, proj_x, rig, min_disparity) if len(rows) else (np.zeros((0, 3)), None)
    if neighbours:
        groups = [np.flatnonzero(rows == r) for r in np.unique(rows)]
        left, right = link_neighbours(groups, stripe)
    else:
        left = right = np.full(len(rows), -1)
    return CorrespondenceSet(rows, cam_x, proj_x, stripe, symbol, incident, observed, left, right, points)


def decode_row(stokes_row, code: ProjectedCode, cfg: DecoderConfig, row: int, voting=None):
    """Detections and matches for one scanline: ``[(DetectedStripe, stripe, score)]``."""
    floor = cfg.radiance_floor * code.pattern.intensity
    det = detect_stripes(stokes_row, code.levels, cfg.window, cfg.vote_min, floor, cfg.negate_aolp,
                         row, cfg.channel, voting)
    return [(det[i], j, sc) for i, j, sc in dp_decode(det, code.layout, code.levels, cfg.phi_th,
                                                         cfg.period, cfg.gap_open, cfg.gap_extend)]


def reconstruct_single_shot(image: PolarimetricImage, code, rig: Rig, cfg: DecoderConfig | None = None):
    """Detect, decode and triangulate every scanline of one frame.

    ``code`` is a :class:`Codebook` or a :class:`ProjectedCode`.
    """
    if isinstance(code, Codebook):
        code = ProjectedCode.from_codebook(code, rig)
    cfg = (cfg or DecoderConfig()).resolved(rig, code.layout.width, image.channels)
    stripe_stokes = code.stripe_stokes()
    rows, xs, proj, stripe, symbol, obs = [], [], [], [], [], []
    for r in range(image.height):
        for det, j, _ in decode_row(image.stokes[r], code, cfg, r):
            rows.append(r)
            xs.append(det.x)
            proj.append(code.layout.centers[j])
            stripe.append(j)
            symbol.append(det.symbol)
            obs.append(det.stokes)
    if not rows:
        return CorrespondenceSet.empty(image.channels)
    stripe_arr = np.array(stripe)
    return build_correspondences(rows, xs, proj, stripe_arr, symbol, stripe_stokes[stripe_arr],
                                 np.array(obs), rig, cfg.min_disparity)
