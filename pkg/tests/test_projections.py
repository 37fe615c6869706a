import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panoflow import projections as pj
from panoflow.sphere import dir_to_spherical, great_circle_angle, normalize, spherical_to_dir

from .conftest import random_dirs

E = pj.ProjectionSpec.equirect(512)
C = pj.ProjectionSpec.tricyl(512)
P = pj.ProjectionSpec.cubepad(128)
SPECS = [E, C, P]


def psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return 10 * math.log10(1.0 / mse)


def smooth_texture(spec):
    d = pj.pixel_map(spec).dirs
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    img = 0.5 + 0.2 * np.sin(3 * x + 1) * np.cos(2 * z) + 0.2 * np.sin(4 * y + 2 * x)
    return np.where(pj.pixel_map(spec).valid, img, 0.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        pj.ProjectionSpec(pj.EQUIRECT, 100, 40)
    with pytest.raises(ValueError):
        pj.ProjectionSpec(pj.TRICYL, 100, 100)
    with pytest.raises(ValueError):
        pj.ProjectionSpec(pj.CUBEPAD, 100, 100, face=16, pad=2)
    with pytest.raises(ValueError):
        pj.ProjectionSpec("mercator", 10, 5)


@pytest.mark.parametrize("spec", SPECS)
def test_parse_round_trip(spec):
    assert pj.ProjectionSpec.parse(str(spec)) == spec


def test_layout_dimensions():
    assert C.shape == (435, 512) and C.band_height == 145
    assert P.shape == (3 * 128 + 32, 4 * 128 + 32)
    assert P.pad == 16


def test_h_max_closed_form():
    assert C.h_max == pytest.approx(math.log(1 + math.sqrt(2)), abs=1e-6)
    assert C.h_max == pytest.approx(0.881374, abs=1e-6)


@given(st.floats(-1.5, 1.5))
def test_mercator_inverse(phi):
    assert pj.inverse_mercator(pj.mercator_h(phi)) == pytest.approx(phi, abs=1e-12)


def test_equirect_centre():
    d, valid, owned = pj.pixel_to_dir(E, 255, 127)
    theta, phi = dir_to_spherical(d)
    assert valid and owned
    assert abs(theta) < 1e-2 and abs(phi) < 1e-2
    x, y, _ = pj.dir_to_pixel(E, np.array([[1.0, 0.0, 0.0]]))
    assert x[0] == pytest.approx(E.width / 2 - 0.5)
    assert y[0] == pytest.approx(E.height / 2 - 0.5)


def test_tricyl_band0_centre_row_on_equator():
    row = C.band_height // 2
    d = pj.pixel_map(C).dirs[row]
    assert np.max(np.abs(d[:, 1])) < 1e-12


def test_tricyl_ownership_high_latitude_tilted():
    phi = np.pi / 4 + 0.01
    d = normalize(np.array([0.05, np.sin(phi), np.cos(phi)]))
    assert pj.owner_chart(C, d[None])[0] == 1


@pytest.mark.parametrize("spec", SPECS)
def test_pixel_round_trip(spec):
    pm = pj.pixel_map(spec)
    ys, xs = np.nonzero(pm.owned)
    x, y, ch = pj.dir_to_pixel(spec, pm.dirs[ys, xs])
    dx = x - xs
    if spec.kind != pj.CUBEPAD:
        dx = (dx + spec.width / 2) % spec.width - spec.width / 2
    assert np.max(np.hypot(dx, y - ys)) < 0.51
    assert np.array_equal(ch, pm.chart[ys, xs])
    back = pj.from_canvas(spec, x, y, ch)
    assert np.max(great_circle_angle(back, pm.dirs[ys, xs])) < 0.6 * np.pi / spec.width


@pytest.mark.parametrize("spec", SPECS)
def test_valid_dirs_unit(spec):
    pm = pj.pixel_map(spec)
    assert np.allclose(np.linalg.norm(pm.dirs[pm.valid], axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("spec", [C, P])
def test_coverage_unique_owner(spec, rng):
    d = random_dirs(rng, 100_000)
    x, y, ch = pj.dir_to_pixel(spec, d)
    assert np.all((ch >= 0) & (ch < spec.n_charts))
    if spec.kind == pj.TRICYL:
        top = ch * spec.band_height - 0.5
        assert np.all((y >= top) & (y <= top + spec.band_height))
    else:
        for f in range(6):
            ox, oy = spec.face_origin(f)
            sel = ch == f
            assert np.all((x[sel] >= ox - 0.5) & (x[sel] <= ox + spec.face - 0.5))
            assert np.all((y[sel] >= oy - 0.5) & (y[sel] <= oy + spec.face - 0.5))


def test_cubepad_dead_corners():
    pm = pj.pixel_map(P)
    assert not pm.valid[-1, -1] and not pm.valid[0, -1]
    assert pm.owned.sum() == 6 * P.face**2


def test_resample_identity_exact():
    img = smooth_texture(E)
    assert np.array_equal(pj.resample(E, img, E), img)


@pytest.mark.parametrize("src,dst", [(E, C), (C, P), (P, E), (E, P)])
def test_resample_constant(src, dst):
    img = np.full(src.shape + (3,), 0.37)
    out = pj.resample(src, img, dst)
    assert np.allclose(out[pj.pixel_map(dst).valid], 0.37, atol=1e-12)


def test_resample_shape_mismatch():
    with pytest.raises(ValueError):
        pj.resample(E, np.zeros((10, 20)), C)


def test_equirect_tricyl_round_trip_psnr():
    E1 = pj.ProjectionSpec.equirect(1024)
    C1 = pj.ProjectionSpec.tricyl(1024)
    img = smooth_texture(E1)
    back = pj.resample(C1, pj.resample(E1, img, C1), E1)
    assert psnr(img, back) > 30.0


def test_cubepad_gradient_monotone_across_seams():
    img = pj.resample(E, np.stack([pj.pixel_map(E).dirs[..., k] for k in range(3)], axis=-1), P)
    F, p = P.face, P.pad
    row = p + F + F // 2
    # front (+x) -> right (+z): z grows across the seam
    z = img[row, p + F // 2 : p + F + F // 2, 2]
    assert np.all(np.diff(z) > 0)
    # front -> top (+y) going up the canvas, including the pad band
    col = p + F // 2
    y = img[p + F + F // 2 : p + F // 2 : -1, col, 1]
    assert np.all(np.diff(y) > 0)


def test_cubepad_pad_content_continuous():
    tex = smooth_texture(E)
    out = pj.resample(E, tex, P)
    pm = pj.pixel_map(P)
    pad = pm.valid & ~pm.owned
    x, y, ch = pj.dir_to_pixel(E, pm.dirs[pad])
    ref = pj.sample(E, tex, x, y, ch)
    assert np.max(np.abs(out[pad] - ref)) < 1e-12


@pytest.mark.parametrize("spec", SPECS)
def test_solid_angle_total(spec):
    wm = pj.solid_angle_weights(spec)
    assert np.all(wm.weights >= 0)
    assert wm.total == pytest.approx(4 * np.pi, rel=0.01)


def test_equirect_weights_by_row():
    w = pj.solid_angle_weights(E).weights
    assert np.allclose(w, w[:, :1], rtol=1e-9, atol=0)
    eq_row, pole_row = E.height // 2, 0
    assert w[eq_row, 0] > w[pole_row, 0]
    phi = lambda r: np.pi / 2 - (r + 0.5) / E.height * np.pi
    expected = np.cos(phi(pole_row)) / np.cos(phi(eq_row))
    assert w[pole_row, 0] / w[eq_row, 0] == pytest.approx(expected, rel=0.05)


def test_tricyl_ownership_pattern():
    owned = pj.solid_angle_weights(C).owned
    bh = C.band_height
    for b in range(3):
        band = owned[b * bh : (b + 1) * bh]
        centre = band[bh // 2]
        edge = band[0]
        # the band's equator row is owned more than its edge row
        assert centre.mean() > edge.mean()


@given(st.floats(-np.pi, np.pi), st.floats(-1.55, 1.55))
def test_dir_pixel_consistency(theta, phi):
    d = spherical_to_dir(theta, phi)[None]
    for spec in SPECS:
        x, y, ch = pj.dir_to_pixel(spec, d)
        back = pj.from_canvas(spec, x, y, ch)
        assert great_circle_angle(back, d)[0] < 1e-9
