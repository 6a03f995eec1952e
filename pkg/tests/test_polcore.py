import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spm.errors import DegenerateError, PreconditionError
from spm.polcore import (PolarimetricImage, angular_distance, apply_mueller, canonical_aolp,
                         clamp_realizable, demosaic, filtered_intensity, from_linear_state,
                         intensity_through_polarizer, mosaic, stokes_from_intensities, to_linear_state)

angles = st.floats(-720, 720, allow_nan=False)
dolps = st.floats(0.01, 1.0)
means = st.floats(0.01, 10.0)


# --- stokes_from_intensities -------------------------------------------------------

@pytest.mark.parametrize("i, expected", [
    ((1, 0.5, 0, 0.5), (1, 1, 0)),
    ((0.5, 1, 0.5, 0), (1, 0, 1)),
    ((0.5, 0.5, 0.5, 0.5), (1, 0, 0)),
])
def test_stokes_from_intensities_examples(i, expected):
    np.testing.assert_allclose(stokes_from_intensities(*i), expected, atol=1e-15)


def test_stokes_from_intensities_rejects_negative():
    with pytest.raises(PreconditionError):
        stokes_from_intensities(1, -0.1, 0, 0)


def test_noisy_samples_are_clamped_to_realizable():
    s = stokes_from_intensities(1.0, 1.0, 0.0, 0.0)  # raw (1, 1, 1): DoLP sqrt(2)
    assert np.hypot(s[1], s[2]) == pytest.approx(s[0])
    np.testing.assert_allclose(s, [1, 1 / np.sqrt(2), 1 / np.sqrt(2)])


def test_clamp_leaves_physical_vectors_alone():
    s = np.array([2.0, 0.3, -0.4])
    np.testing.assert_array_equal(clamp_realizable(s), s)


# --- to_linear_state ----------------------------------------------------------------

@pytest.mark.parametrize("s, mean, rho, phi", [
    ((1, 1, 0, 0), 0.5, 1.0, 0.0),
    ((2, 0, 2, 0), 1.0, 1.0, 45.0),
])
def test_to_linear_state_examples(s, mean, rho, phi):
    st_ = to_linear_state(s)
    assert st_.mean_intensity == pytest.approx(mean)
    assert st_.dolp == pytest.approx(rho)
    assert st_.aolp == pytest.approx(phi)
    assert st_.aolp_defined


def test_unpolarized_state_flags_undefined_aolp():
    st_ = to_linear_state((1, 0, 0, 0))
    assert st_.mean_intensity == 0.5 and st_.dolp == 0.0
    assert st_.aolp == 0.0 and not st_.aolp_defined


def test_zero_intensity_is_degenerate():
    with pytest.raises(DegenerateError):
        to_linear_state((0, 0, 0))


def test_aolp_range_is_half_open():
    # 90 deg is the same orientation as -90 deg and must map to -90
    assert to_linear_state(from_linear_state(1.0, 1.0, 90.0)).aolp == pytest.approx(-90.0)
    assert canonical_aolp(90.0) == -90.0


@given(means, dolps, angles)
def test_state_round_trip(mean, rho, phi):
    st_ = to_linear_state(from_linear_state(mean, rho, phi))
    assert st_.mean_intensity == pytest.approx(mean, rel=1e-12)
    assert st_.dolp == pytest.approx(rho, rel=1e-9)
    assert angular_distance(st_.aolp, phi) < 1e-7
    assert -90.0 <= st_.aolp < 90.0


@given(means, dolps, angles)
def test_polarizer_samples_reproduce_state(mean, rho, phi):
    state = (mean, rho, phi)
    i = [intensity_through_polarizer(state, a) for a in (0, 45, 90, 135)]
    st_ = to_linear_state(stokes_from_intensities(*i))
    assert st_.mean_intensity == pytest.approx(mean, rel=1e-12)
    assert st_.dolp == pytest.approx(rho, rel=1e-9, abs=1e-12)
    assert angular_distance(st_.aolp, phi) < 1e-6


@given(angles)
def test_canonical_aolp_is_180_periodic(phi):
    assert canonical_aolp(phi) == pytest.approx(canonical_aolp(phi + 180.0), abs=1e-9)
    assert -90.0 <= canonical_aolp(phi) < 90.0


# --- apply_mueller / polarizer ------------------------------------------------------

def test_identity_mueller():
    s = np.array([1.0, 0.3, -0.2])
    np.testing.assert_array_equal(apply_mueller(np.eye(4), s), s)


def test_pure_specular_flips_aolp():
    s = from_linear_state(1.0, 0.7, 30.0)
    out = to_linear_state(apply_mueller(np.diag([1.0, 1.0, -1.0, -1.0]), s))
    assert out.aolp == pytest.approx(-30.0)
    assert out.dolp == pytest.approx(0.7)


def test_diffuse_first_column_polarizes_unpolarized_light():
    m = np.eye(4) * 0.0
    m[0, 0] = 1.0
    m[1, 0] = 0.1
    out = apply_mueller(m, np.array([1.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out, [1.0, 0.1, 0.0, 0.0])
    st_ = to_linear_state(out)
    assert st_.dolp == pytest.approx(0.1) and st_.aolp == 0.0


@pytest.mark.parametrize("angle, expected", [(0, 2.0), (90, 0.0), (45, 1.0)])
def test_intensity_through_polarizer_examples(angle, expected):
    assert intensity_through_polarizer((1.0, 1.0, 0.0), angle) == pytest.approx(expected, abs=1e-15)


@given(means, dolps, angles, angles)
def test_filtered_intensity_matches_state_form(mean, rho, phi, filt):
    s = from_linear_state(mean, rho, phi)
    assert filtered_intensity(s, filt) == pytest.approx(
        intensity_through_polarizer((mean, rho, phi), filt), rel=1e-9, abs=1e-12)


# --- mosaic / demosaic --------------------------------------------------------------

def _field(h, w, s):
    return PolarimetricImage(np.broadcast_to(np.asarray(s, dtype=float), (h, w, 1, 3)).copy())


def test_uniform_field_round_trip():
    s = from_linear_state(0.8, 1.0, 37.0)
    out = demosaic(mosaic(_field(8, 6, s)))
    assert out.stokes.shape == (4, 3, 1, 3)
    np.testing.assert_allclose(out.stokes, np.broadcast_to(s, out.stokes.shape), atol=1e-12)


def test_unpolarized_field_gives_equal_samples():
    raw = mosaic(_field(4, 4, [2.0, 0.0, 0.0]))
    np.testing.assert_allclose(raw, 1.0)


def _stripes(h, w, parity, a=10.0, b=70.0):
    phi = np.where(parity % 2 == 0, a, b)
    s = from_linear_state(np.ones((h, w)), np.ones((h, w)), phi)
    return PolarimetricImage(s[:, :, None, :])


def _ideal_downsample(img):
    h, w = img.height, img.width
    return img.stokes.reshape(h // 2, 2, w // 2, 2, 1, 3).mean(axis=(1, 3))


def test_slanted_one_pixel_stripes_alias_aolp():
    rr, cc = np.mgrid[0:8, 0:8]
    img = _stripes(8, 8, rr + cc)
    got = to_linear_state(demosaic(mosaic(img)).stokes)
    ideal = to_linear_state(_ideal_downsample(img))
    assert np.all(angular_distance(got.aolp, ideal.aolp) > 1.0)


def test_vertical_one_pixel_stripes_alias_dolp():
    # each filter pair sits on both stripes, so the AoLP survives but s0 does not
    img = _stripes(8, 8, np.broadcast_to(np.arange(8), (8, 8)))
    got = to_linear_state(demosaic(mosaic(img)).stokes)
    ideal = to_linear_state(_ideal_downsample(img))
    assert np.all(np.abs(got.dolp - ideal.dolp) > 0.01)


@pytest.mark.parametrize("shape", [(3, 4), (4, 5)])
def test_odd_dimensions_rejected(shape):
    with pytest.raises(PreconditionError):
        mosaic(_field(*shape, [1.0, 0.0, 0.0]))
    with pytest.raises(PreconditionError):
        demosaic(np.ones(shape))


def test_image_shape_checked():
    with pytest.raises(PreconditionError):
        PolarimetricImage(np.zeros((2, 2, 2, 3)))


@settings(max_examples=50)
@given(st.lists(st.tuples(means, dolps, angles), min_size=4, max_size=4))
def test_demosaic_output_is_realizable(states):
    s = np.array([from_linear_state(*x) for x in states]).reshape(2, 2, 1, 3)
    out = demosaic(mosaic(PolarimetricImage(s))).stokes
    assert np.all(np.hypot(out[..., 1], out[..., 2]) <= out[..., 0] * (1 + 1e-12))
