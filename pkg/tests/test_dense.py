import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spm.codebook import Codebook
from spm.decoder import reconstruct_single_shot
from spm.dense import (PATTERN_CONDITION, MotionMask, _stack_condition, adaptive_decode, cost_matrix, dense_decode,
                       directed_cost, incident_stack_vector, interleave, label_motion,
                       make_shifted_patterns, match_cost, normalised_score, score_and_threshold,
                       shifted_pattern_set, subpixel_refine)
from spm.errors import PreconditionError
from spm.polcore import PolarimetricImage
from spm.simulator import render_frame, render_sequence


def affine_design(x):
    """Columns ``x``, odd indicator, even indicator (1-based positions)."""
    n = x.shape[-1]
    odd = np.zeros(n)
    odd[0::2] = 1.0
    return np.stack([x, odd, 1.0 - odd], axis=-1)


def grid_minimum(y, x, centre, half_cells=50, rng=None):
    """Brute-force ``min |A t - y|^2`` on a 101^3 grid with a random sub-cell offset."""
    a = affine_design(x)
    g = a.T @ a
    r = a.T @ y
    yy = y @ y
    step = 1e-3 * (1.0 + np.abs(centre))
    shift = rng.uniform(-0.5, 0.5, 3) * step
    axes = [centre[k] + shift[k] + step[k] * np.arange(-half_cells, half_cells + 1) for k in range(3)]
    t0, t1, t2 = np.meshgrid(*axes, indexing="ij", sparse=True)
    f = (g[0, 0] * t0 * t0 + g[1, 1] * t1 * t1 + g[2, 2] * t2 * t2
         + 2 * (g[0, 1] * t0 * t1 + g[0, 2] * t0 * t2 + g[1, 2] * t1 * t2)
         - 2 * (r[0] * t0 + r[1] * t1 + r[2] * t2) + yy)
    # the nearest node lies within half a step of the optimum along each axis
    bound = 0.25 * step @ np.abs(g) @ step
    return f.min(), bound


def closed_form_params(y, x):
    return np.linalg.lstsq(affine_design(x), y, rcond=None)[0]


# --- shifted patterns ---------------------------------------------------------------

def test_offsets_cover_one_period(shifted):
    np.testing.assert_array_equal(shifted.offsets, np.arange(12))
    np.testing.assert_array_equal(shifted.permutations[0], np.arange(7))
    assert shifted.count == 12


def test_base_pattern_is_unshifted(shifted, pattern):
    hard = make_shifted_patterns(Codebook.generate(), 12, sigma=0.0, seed=0)
    np.testing.assert_array_equal(hard.patterns[0].aolp, pattern.aolp)


def test_hard_edges_without_smoothing(codebook):
    hard = make_shifted_patterns(codebook, 4, sigma=0.0, seed=1)
    for p in hard.patterns:
        assert set(np.unique(p.aolp)) <= set(codebook.levels)


def test_smoothing_stays_in_level_range(shifted):
    for p in shifted.patterns:
        assert p.aolp.min() >= -1e-9 and p.aolp.max() <= 80.0 + 1e-9
    # 0 and 80 deg are adjacent-free neighbours; the blur takes the minor arc through 40 deg
    soft = shifted.patterns[0].aolp
    assert np.any((soft > 1e-6) & (soft < 80 - 1e-6) & ~np.isin(soft, shifted.codebook.levels))


def test_column_stacks_are_diverse(shifted):
    inc = shifted.incident_stack()
    aolp = 0.5 * np.degrees(np.arctan2(inc[..., 2], inc[..., 1]))
    assert all(len(np.unique(np.round(col, 6))) >= 2 for col in aolp)
    assert np.all(_stack_condition(inc) < PATTERN_CONDITION)


def test_shifted_set_preconditions(codebook):
    with pytest.raises(PreconditionError):
        make_shifted_patterns(codebook, 1)
    with pytest.raises(PreconditionError):
        shifted_pattern_set(codebook, [[0, 1, 2, 3, 4, 5, 5], list(range(7))])


def test_layouts_follow_offsets(shifted):
    lay = shifted.layouts[3]
    assert np.all(np.diff(lay.centers) == 12)
    assert np.all((lay.centers >= 0) & (lay.centers < 1024))
    np.testing.assert_allclose(lay.starts % 12, (12 - 3) % 12)


# --- cost ----------------------------------------------------------------------------

stacks = st.integers(2, 8).flatmap(
    lambda p: st.tuples(*[st.lists(st.floats(-1, 1), min_size=2 * p, max_size=2 * p)] * 2))


@settings(max_examples=60)
@given(stacks, st.floats(0.1, 5.0) | st.floats(-5.0, -0.1), st.floats(-2, 2), st.floats(-2, 2))
def test_exact_affine_relation_costs_nothing(pair, a, b1, b2):
    x = np.array(pair[0])
    if np.ptp(x[0::2]) + np.ptp(x[1::2]) < 1e-3:
        return
    odd = np.zeros(len(x))
    odd[0::2] = 1.0
    y = a * x + b1 * odd + b2 * (1 - odd)
    scale = 1.0 + np.sum(y * y) + np.sum(x * x)
    assert match_cost(y, x) == pytest.approx(0.0, abs=1e-12 * scale)
    assert match_cost(x, x) == pytest.approx(0.0, abs=1e-12 * scale)


@settings(max_examples=60)
@given(stacks)
def test_cost_is_symmetric_and_non_negative(pair):
    x, y = np.array(pair[0]), np.array(pair[1])
    assert match_cost(x, y) == pytest.approx(match_cost(y, x), abs=1e-12)
    assert match_cost(x, y) >= -1e-12


def test_cost_matches_grid_minimisation():
    rng = np.random.default_rng(7)
    for _ in range(50):
        x, y = rng.normal(size=(2, 12))
        for obs, inc in ((y, x), (x, y)):
            c = directed_cost(obs, inc)
            fmin, bound = grid_minimum(obs, inc, closed_form_params(obs, inc), rng=rng)
            assert c - 1e-12 <= fmin <= c + bound + 1e-12


def test_cost_matrix_matches_pairwise():
    rng = np.random.default_rng(3)
    obs, inc = rng.normal(size=(5, 8)), rng.normal(size=(7, 8))
    ref = np.array([[match_cost(o, i) for i in inc] for o in obs])
    np.testing.assert_allclose(cost_matrix(obs, inc), ref, atol=1e-12)


def test_cost_length_checks():
    with pytest.raises(PreconditionError):
        match_cost(np.zeros(4), np.zeros(6))
    with pytest.raises(PreconditionError):
        match_cost(np.zeros(2), np.zeros(2))


def test_interleave_and_flip():
    s = np.array([[1.0, 0.1, 0.2], [1.0, 0.3, 0.4]])
    np.testing.assert_array_equal(interleave(s), [0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(incident_stack_vector(s), [0.1, -0.2, 0.3, -0.4])


# --- score --------------------------------------------------------------------------

def test_threshold_examples():
    score, c0 = score_and_threshold(np.array([[0.0, 10.0], [5.0, 2.0]]))
    assert c0 == pytest.approx(2.0)
    np.testing.assert_allclose(score, [[2.0, -8.0], [-3.0, 0.0]])
    score, _ = score_and_threshold(np.full((3, 4), 1.7))
    assert np.all(score == 0)
    with pytest.raises(PreconditionError):
        score_and_threshold(np.zeros((0, 3)))


def test_normalised_score_scale():
    s, c0 = normalised_score(np.array([[0.0, 10.0]]))
    np.testing.assert_allclose(s, [[1.0, -4.0]])


@pytest.mark.parametrize("triple, expected, ok", [
    ((1.0, 2.0, 1.0), 5.0, True),
    ((1.0, 2.0, 1.5), 5.0 + 1 / 6, True),
    ((2.0, 2.0, 2.0), 5.0, False),
])
def test_parabola_examples(triple, expected, ok):
    row = np.zeros(11)
    row[4:7] = triple
    j, flag = subpixel_refine(row, 5)
    assert j == pytest.approx(expected) and flag is ok


def test_parabola_boundary_and_non_peak():
    assert subpixel_refine(np.array([3.0, 2.0, 1.0]), 0)[1] is False
    assert subpixel_refine(np.array([3.0, 2.0, 1.0]), 1)[1] is False


@given(st.floats(-0.49, 0.49), st.floats(0.1, 10.0), st.floats(-5, 5))
def test_parabola_vertex_is_exact(v, k, c):
    j = np.arange(9)
    row = c - k * (j - (4 + v)) ** 2
    js, ok = subpixel_refine(row, 4)
    assert ok and js == pytest.approx(4 + v, abs=1e-9)


# --- decoding --------------------------------------------------------------------

@pytest.fixture(scope="module")
def plane_frames(plane_scene, shifted, rig):
    seq = render_sequence(plane_scene, shifted.patterns, rig)
    return [f for f, _ in seq], seq[-1][1]


def test_true_columns_score_positive(plane_frames, shifted):
    frames, gt = plane_frames
    row = 100
    obs = interleave(np.stack([f.stokes[row, :, 0] for f in frames], axis=1))
    inc = incident_stack_vector(shifted.incident_stack())
    score, _ = score_and_threshold(cost_matrix(obs, inc))
    true = gt.proj_col[row]
    tscore = score[np.arange(len(true)), true]
    assert np.all(tscore > 0)
    wrong = score.copy()
    for d in (-1, 0, 1):
        wrong[np.arange(len(true)), np.clip(true + d, 0, 1023)] = np.nan
    assert np.nanpercentile(wrong, 95) < 0


def test_dense_plane_is_subpixel_and_dense(plane_frames, shifted, rig):
    frames, gt = plane_frames
    dense = dense_decode(frames, shifted, rig)
    x = np.floor(dense.cam_x).astype(int)
    err = dense.proj_x - gt.proj_x[dense.row, x]
    assert np.sqrt(np.mean(err ** 2)) < 0.5
    single = reconstruct_single_shot(frames[0], shifted.projected(0), rig)
    assert len(dense) >= 8 * len(single)
    assert dense.incident.shape[1:] == (12, 3)
    inc, obs = dense.stack(0)
    assert inc.shape == (12, 3) and obs.shape == (12, 1, 3)


def test_dense_needs_all_frames(plane_frames, shifted, rig):
    frames, _ = plane_frames
    with pytest.raises(PreconditionError):
        dense_decode(frames[:5], shifted, rig)


# --- motion ----------------------------------------------------------------------

def uniform(value, h=6, w=8):
    return PolarimetricImage(np.broadcast_to([value, 0.0, 0.0], (h, w, 1, 3)).copy())


def test_identical_frames_are_static():
    m = label_motion([uniform(1.0)] * 4)
    assert not m.dynamic.any() and m.dynamic.shape == (4, 6, 8)


def test_doubled_pixel_is_dynamic():
    b = uniform(1.0)
    b.stokes[2, 3, 0, 0] = 2.0
    m = label_motion([uniform(1.0), b])
    assert m.dynamic[1].sum() == 1 and m.dynamic[1, 2, 3]
    assert not m.dynamic[0].any()


def test_motion_needs_two_frames():
    with pytest.raises(PreconditionError):
        label_motion([uniform(1.0)])


def test_static_window():
    dyn = np.zeros((5, 2, 2), dtype=bool)
    dyn[2, 0, 0] = True
    m = MotionMask(dyn, 0.1)
    assert not m.static_window(1, 3).any()
    assert not m.static_window(3, 3)[0, 0] and m.static_window(3, 3)[1, 1]
    assert m.static_window(4, 2)[0, 0]


def test_adaptive_checks_mask_length(plane_frames, shifted, rig):
    frames, _ = plane_frames
    with pytest.raises(PreconditionError):
        adaptive_decode(frames, shifted, label_motion(frames[:3]), rig)
