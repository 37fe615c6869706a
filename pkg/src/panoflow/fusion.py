"""Per-pixel fusion of two equirect flow predictions."""
from dataclasses import dataclass

import numpy as np

from . import projections as pj
from .flowfield import FlowField, field_endpoints
from .metrics import epe_map, sd_map
from .sphere import TWO_PI, great_circle_angle, spherical_to_dir, wrap_delta_theta


def _check(*fields):
    spec = fields[0].spec
    for f in fields[1:]:
        if f.spec != spec:
            raise ValueError(f"spec mismatch: {spec} vs {f.spec}")
    if spec.kind != pj.EQUIRECT:
        raise ValueError("fusion operates on equirect fields; reproject first")


def _rewrap(u):
    return np.where(u > np.pi, u - TWO_PI, np.where(u <= -np.pi, u + TWO_PI, u))


def blend(p_a, p_b, t):
    """t * p_a + (1 - t) * p_b with the longitude step taken along the short arc.

    Where only one input is valid it is copied through; where neither is
    valid the output is invalid.
    """
    _check(p_a, p_b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), p_a.spec.shape)
    if np.any(~((t >= 0) & (t <= 1))):
        raise ValueError("confidence values must lie in [0, 1]")
    s = 1.0 - t
    u = _rewrap(p_a.u + s * wrap_delta_theta(p_b.u - p_a.u))
    v = p_a.v + s * (p_b.v - p_a.v)
    only_a = p_a.valid & ~p_b.valid
    only_b = p_b.valid & ~p_a.valid
    u = np.where(only_a, p_a.u, np.where(only_b, p_b.u, u))
    v = np.where(only_a, p_a.v, np.where(only_b, p_b.v, v))
    valid = p_a.valid | p_b.valid
    u[~valid] = 0.0
    v[~valid] = 0.0
    sat = np.where(only_b, p_b.saturated, p_a.saturated)
    return FlowField(p_a.spec, u, v, valid, sat & valid)


def select(p_a, p_b, take_a):
    """Per-pixel choice between two fields."""
    _check(p_a, p_b)
    return FlowField(
        p_a.spec,
        np.where(take_a, p_a.u, p_b.u),
        np.where(take_a, p_a.v, p_b.v),
        np.where(take_a, p_a.valid, p_b.valid),
        np.where(take_a, p_a.saturated, p_b.saturated),
    )


def oracle_bounds(p_a, p_b, gt, metric="sd"):
    """Per-pixel best (lower) and worst (upper) of two predictions given ground truth.

    ``metric`` is "sd" (great-circle endpoint distance) or "epe".  Ties go
    to ``p_a``; a prediction invalid at a pixel is never chosen over a
    valid one.  Returns (lower, upper, take_a_lower, take_a_upper).
    """
    _check(p_a, p_b, gt)
    err = {"sd": sd_map, "epe": epe_map}[metric]
    ea, eb = err(p_a, gt), err(p_b, gt)
    lo_a = np.where(p_a.valid, ea, np.inf) <= np.where(p_b.valid, eb, np.inf)
    hi_a = np.where(p_a.valid, ea, -np.inf) >= np.where(p_b.valid, eb, -np.inf)
    return select(p_a, p_b, lo_a), select(p_a, p_b, hi_a), lo_a, hi_a


# ---------------------------------------------------------------------------
# heuristic confidence


@dataclass
class ConfidenceWeights:
    """Constants of the logistic confidence t = sigmoid(gain * (c_a - c_b))."""

    gain: float = 1.0
    prior: float = 0.5
    fb: float = 1.0
    fb_clip: float = 10.0
    prior_clip: float = 3.0


def distortion_prior(chart_spec, eq_spec, clip=3.0):
    """Log solid angle of the chart pixel each equirect direction is read from.

    Normalised by the chart's mean owned-pixel solid angle, so 0 means an
    average pixel and negative values mean oversampled, distorted pixels.
    """
    pm = pj.pixel_map(eq_spec)
    wm = pj.solid_angle_weights(chart_spec)
    x, y, _ = pj.dir_to_pixel(chart_spec, pm.dirs.reshape(-1, 3))
    H, W = chart_spec.shape
    xi = np.rint(x).astype(np.int64)
    xi = np.clip(xi, 0, W - 1) if chart_spec.kind == pj.CUBEPAD else np.mod(xi, W)
    yi = np.clip(np.rint(y).astype(np.int64), 0, H - 1)
    own = wm.weights[wm.owned]
    ref = own.mean()
    s = np.maximum(wm.weights[yi, xi], ref * np.exp(-clip))
    return np.clip(np.log(s / ref), -clip, clip).reshape(eq_spec.shape)


def forward_backward_error(fwd, bwd):
    """Distance (equirect pixels) between a pixel and where fwd-then-bwd flow returns it."""
    _check(fwd, bwd)
    spec = fwd.spec
    start = pj.pixel_map(spec).dirs
    ends, ok, _ = field_endpoints(fwd)
    x, y, ch = pj.dir_to_pixel(spec, ends.reshape(-1, 3))
    bu = pj.sample(spec, np.cos(bwd.u), x, y, ch), pj.sample(spec, np.sin(bwd.u), x, y, ch)
    bv = pj.sample(spec, bwd.v, x, y, ch)
    bvalid = pj.sample(spec, bwd.valid.astype(np.float64), x, y, ch) > 0.999
    theta = np.arctan2(ends[..., 2], ends[..., 0]).ravel()
    phi = np.arcsin(np.clip(ends[..., 1], -1.0, 1.0)).ravel()
    back = spherical_to_dir(theta + np.arctan2(bu[1], bu[0]), np.clip(phi + bv, -np.pi / 2, np.pi / 2))
    err = great_circle_angle(start.reshape(-1, 3), back) * spec.width / TWO_PI
    good = ok.ravel() & bvalid
    return np.where(good, err, np.inf).reshape(spec.shape)


def heuristic_confidence(spec_a, spec_b, eq_spec, fb_a=None, fb_b=None, weights=None):
    """Confidence t in [0, 1] that prediction A (from ``spec_a``) should be trusted.

    Each side scores c = prior * distortion_prior - fb * min(fb_error, fb_clip);
    absolute pixel position never enters directly.
    """
    w = weights or ConfidenceWeights()
    c_a = w.prior * distortion_prior(spec_a, eq_spec, w.prior_clip)
    c_b = w.prior * distortion_prior(spec_b, eq_spec, w.prior_clip)
    if fb_a is not None:
        c_a = c_a - w.fb * np.minimum(fb_a, w.fb_clip)
    if fb_b is not None:
        c_b = c_b - w.fb * np.minimum(fb_b, w.fb_clip)
    return 1.0 / (1.0 + np.exp(-w.gain * (c_a - c_b)))
