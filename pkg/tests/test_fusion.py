import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from panoflow import experiments as ex
from panoflow import fusion as fu
from panoflow import metrics as mt
from panoflow import projections as pj
from panoflow import synth
from panoflow.flowfield import FlowField, field_endpoints
from panoflow.sphere import great_circle_angle

W = 256
E = pj.ProjectionSpec.equirect(W)
C = pj.ProjectionSpec.tricyl(W)
P = pj.ProjectionSpec.cubepad(W // 4)
PX = 2 * np.pi / W


def field(u, v=0.0):
    return FlowField(E, np.broadcast_to(u, E.shape).copy(), np.broadcast_to(v, E.shape).copy(), np.ones(E.shape, bool))


@pytest.fixture(scope="module")
def trio():
    scene = synth.build_scene(synth.DatasetConfig(schedule="eft", pairs=1, seed=31, width=W))
    gt = synth.ground_truth_flow(scene, 0, E)
    rng = np.random.default_rng(0)
    a = field(gt.u + rng.normal(0, 2 * PX, E.shape), gt.v + rng.normal(0, 2 * PX, E.shape))
    b = field(gt.u + rng.normal(0, 2 * PX, E.shape), gt.v + rng.normal(0, 2 * PX, E.shape))
    a.u = np.angle(np.exp(1j * a.u))
    b.u = np.angle(np.exp(1j * b.u))
    return gt, a, b


def test_blend_t_one_is_a(trio):
    _, a, b = trio
    out = fu.blend(a, b, 1.0)
    assert np.array_equal(out.u, a.u) and np.array_equal(out.v, a.v)


@given(st.floats(0, 1))
def test_blend_idempotent(t):
    a = field(np.linspace(-np.pi + 1e-9, np.pi, W)[None, :], 0.01)
    out = fu.blend(a, a, t)
    assert np.array_equal(out.u, a.u) and np.array_equal(out.v, a.v)


def test_blend_seam_short_arc():
    out = fu.blend(field(np.pi - 0.1), field(-np.pi + 0.1), 0.5)
    assert np.allclose(np.abs(out.u), np.pi)
    assert np.all((out.u > -np.pi) & (out.u <= np.pi))


def test_blend_validity_rules():
    a, b = field(0.1), field(0.3)
    a.valid[0] = False
    b.valid[1] = False
    a.valid[2] = False
    b.valid[2] = False
    out = fu.blend(a, b, 0.5)
    assert np.allclose(out.u[0], 0.3) and np.allclose(out.u[1], 0.1)
    assert not out.valid[2].any() and out.valid[3:].all()
    assert np.allclose(out.u[3:], 0.2)


def test_blend_errors():
    with pytest.raises(ValueError):
        fu.blend(field(0.0), field(0.0), 1.5)
    with pytest.raises(ValueError):
        fu.blend(field(0.0), FlowField.zeros(pj.ProjectionSpec.equirect(128)), 0.5)
    with pytest.raises(ValueError):
        fu.blend(FlowField.zeros(C), FlowField.zeros(C), 0.5)


@given(st.floats(0, 1))
def test_blend_endpoint_between(t):
    rng = np.random.default_rng(5)
    a = field(rng.uniform(-0.05, 0.05, E.shape), rng.uniform(-0.05, 0.05, E.shape))
    b = field(rng.uniform(-0.05, 0.05, E.shape), rng.uniform(-0.05, 0.05, E.shape))
    out = fu.blend(a, b, t)
    ea, eb, eo = (field_endpoints(f)[0] for f in (a, b, out))
    assert np.all(great_circle_angle(eo, ea) <= great_circle_angle(ea, eb) + 0.5 * PX)


def test_oracle_with_perfect_a(trio):
    gt, _, b = trio
    lower, upper, lo_a, hi_a = fu.oracle_bounds(gt, b, gt)
    assert np.array_equal(lower.u, gt.u) and np.array_equal(lower.v, gt.v)
    differ = (b.u != gt.u) | (b.v != gt.v)
    assert np.array_equal(upper.u[differ], b.u[differ])


@pytest.mark.parametrize("metric", ["sd", "epe"])
def test_oracle_pointwise_dominance(trio, metric):
    gt, a, b = trio
    err = {"sd": mt.sd_map, "epe": mt.epe_map}[metric]
    lower, upper, _, _ = fu.oracle_bounds(a, b, gt, metric)
    ea, eb = err(a, gt), err(b, gt)
    assert np.all(err(lower, gt) <= np.minimum(ea, eb))
    assert np.all(err(upper, gt) >= np.maximum(ea, eb))
    agg = {k: mt.evaluate(f, gt) for k, f in (("a", a), ("b", b), ("lo", lower), ("hi", upper))}
    key = "sd_mean" if metric == "sd" else "epe_mean"
    assert getattr(agg["lo"], key) <= min(getattr(agg["a"], key), getattr(agg["b"], key))
    assert getattr(agg["hi"], key) >= max(getattr(agg["a"], key), getattr(agg["b"], key))


def test_oracle_never_picks_invalid(trio):
    gt, a, b = trio
    a = a.copy()
    a.valid[:20] = False
    lower, upper, _, _ = fu.oracle_bounds(a, b, gt)
    assert lower.valid[:20].all() and upper.valid[:20].all()


def test_oracle_lower_strict_on_complementary_models():
    trial = ex.fusion_trial(101, width=W)
    assert trial.epe["lower"] < 0.9 * min(trial.epe["E"], trial.epe["C"])


def test_confidence_equal_cues():
    t = fu.heuristic_confidence(C, C, E)
    assert np.allclose(t, 0.5)
    fb = np.full(E.shape, 2.0)
    assert np.allclose(fu.heuristic_confidence(P, P, E, fb, fb), 0.5)


def test_confidence_fb_dominates():
    t = fu.heuristic_confidence(E, C, E, np.zeros(E.shape), np.full(E.shape, 50.0))
    assert np.all(t > 0.9)


def test_confidence_prefers_equirect_at_equator():
    t = fu.heuristic_confidence(E, C, E)
    eq_rows = slice(E.height // 2 - 2, E.height // 2 + 2)
    assert np.all(t[eq_rows] > 0.5)
    assert t[0].mean() < 0.5
    assert np.all((t >= 0) & (t <= 1))


def test_distortion_prior_clipped():
    for spec in (E, C, P):
        p = fu.distortion_prior(spec, E, clip=3.0)
        assert p.shape == E.shape and np.all(np.abs(p) <= 3.0)


def test_forward_backward_consistent_yaw():
    fwd, bwd = field(3 * PX), field(-3 * PX)
    err = fu.forward_backward_error(fwd, bwd)
    assert np.max(err) < 1e-6
    bad = fu.forward_backward_error(fwd, field(0.0))
    assert np.allclose(bad[E.height // 2], 3.0, rtol=0.01)
