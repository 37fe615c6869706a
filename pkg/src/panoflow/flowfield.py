"""Dense flow fields tied to a projection, re-projection between layouts, I/O."""
import struct
from dataclasses import dataclass, field

import numpy as np

from . import projections as pj
from .sphere import HALF_PI, TWO_PI, spherical_to_dir, wrap_angle, wrap_delta_theta

SFL_MAGIC = b"SFL1"
FLO_MAGIC = b"PIEH"
FLO_UNKNOWN = 1e9
KIND_CODES = {pj.EQUIRECT: 0, pj.TRICYL: 1, pj.CUBEPAD: 2}

VALID_BIT = 1
SATURATED_BIT = 2


class FlowFormatError(ValueError):
    pass


@dataclass
class FlowField:
    """Per-pixel flow on ``spec``.

    Equirect fields hold (dtheta, dphi) in radians; tri-cylinder and cube
    padding fields hold pixel displacements inside the pixel's own chart.
    ``saturated`` marks equirect targets that were clamped at a pole.
    """

    spec: pj.ProjectionSpec
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    saturated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.saturated is None:
            self.saturated = np.zeros(self.spec.shape, dtype=bool)
        self.saturated = np.asarray(self.saturated, dtype=bool)
        for name in ("u", "v", "valid", "saturated"):
            if getattr(self, name).shape != self.spec.shape:
                raise ValueError(f"flow component {name} has shape {getattr(self, name).shape}, expected {self.spec.shape}")

    @classmethod
    def zeros(cls, spec):
        pm = pj.pixel_map(spec)
        return cls(spec, np.zeros(spec.shape), np.zeros(spec.shape), pm.valid.copy())

    def copy(self):
        return FlowField(self.spec, self.u.copy(), self.v.copy(), self.valid.copy(), self.saturated.copy())

    def pixels(self):
        """Flow in image pixel units, rows pointing down."""
        if self.spec.kind == pj.EQUIRECT:
            W, H = self.spec.width, self.spec.height
            return self.u * W / TWO_PI, -self.v * H / np.pi
        return self.u, self.v


def _endpoints(spec, cx, cy, charts, u, v, start):
    """Target directions for flows (u, v) starting at canonical chart coords (cx, cy)."""
    sat = np.zeros(np.shape(u), dtype=bool)
    ok = np.ones(np.shape(u), dtype=bool)
    if spec.kind == pj.EQUIRECT:
        theta = (cx + 0.5) / spec.width * TWO_PI - np.pi
        phi = HALF_PI - (cy + 0.5) / spec.height * np.pi
        phi2 = phi + v
        sat = np.abs(phi2) > HALF_PI
        out = spherical_to_dir(wrap_angle(theta + u), np.clip(phi2, -HALF_PI, HALF_PI))
    else:
        X = cx + u
        Y = cy + v
        if spec.kind == pj.TRICYL:
            top = charts * spec.band_height - 0.5
            ok = (Y >= top) & (Y <= top + spec.band_height)
        out = pj.from_canvas(spec, X, Y, charts)
        ok &= np.all(np.isfinite(out), axis=-1)
    zero = (u == 0) & (v == 0)
    out[zero] = start[zero]
    return out, ok, sat


def endpoint_dir(spec, x, y, flow_uv):
    """Direction a flow vector points to from integer pixel(s) (x, y).

    Returns (dirs, ok, saturated).  Chart flows are followed on the
    analytic chart of the start pixel; targets leaving the chart (its band,
    or the canvas for cube padding) are not ok.  Equirect targets past a
    pole are clamped and flagged saturated.
    """
    pm = pj.pixel_map(spec)
    x = np.asarray(x)
    y = np.asarray(y)
    u, v = (np.asarray(c, dtype=np.float64) for c in flow_uv)
    u, v = np.broadcast_to(u, x.shape), np.broadcast_to(v, x.shape)
    out, ok, sat = _endpoints(spec, pm.cx[y, x], pm.cy[y, x], pm.chart[y, x], u, v, pm.dirs[y, x])
    if spec.kind == pj.CUBEPAD:
        H, W = spec.shape
        tx, ty = x + u, y + v
        ok &= (tx >= -0.5) & (tx <= W - 0.5) & (ty >= -0.5) & (ty <= H - 0.5)
    return out, ok & pm.valid[y, x], sat


def field_endpoints(flow):
    """Endpoint directions for every pixel of a field: (dirs, ok, saturated)."""
    H, W = flow.spec.shape
    ys, xs = np.mgrid[0:H, 0:W]
    dirs, ok, sat = endpoint_dir(flow.spec, xs, ys, (flow.u, flow.v))
    return dirs, ok & flow.valid, sat | flow.saturated


def reproject_flow(src, dst_spec):
    """Express a flow field on another projection.

    For each destination pixel direction d, the four source pixels around d
    (in the chart that owns d) give start/end pairs.  Their displacements
    are expressed in that one source chart, blended bilinearly and applied
    to d, which yields the target direction d'.  The destination flow is
    then d' - d measured in the destination pixel's own chart.
    """
    src_spec = src.spec
    pm_d = pj.pixel_map(dst_spec)
    pm_s = pj.pixel_map(src_spec)
    sel = pm_d.valid
    d = pm_d.dirs[sel]
    xs, ys, chs = pj.dir_to_pixel(src_spec, d)
    ix, iy, w = pj.bilinear_taps(src_spec, xs, ys, chs)

    ends, ends_ok, ends_sat = field_endpoints(src)
    used = w > 1e-9
    src_charts = np.repeat(chs[:, None], 4, axis=1)
    sx, sy = pj.chart_coords(src_spec, pm_s.dirs[iy, ix], src_charts)
    ex, ey = pj.chart_coords(src_spec, ends[iy, ix], src_charts)
    du = pj.wrap_coord_delta(src_spec, ex - sx)
    dv = ey - sy
    still = (src.u[iy, ix] == 0) & (src.v[iy, ix] == 0)
    du[still] = 0.0
    dv[still] = 0.0
    finite = np.isfinite(du) & np.isfinite(dv)
    tap_ok = (ends_ok[iy, ix] & finite) | ~used
    du = np.where(used & finite, du, 0.0)
    dv = np.where(used & finite, dv, 0.0)
    mu = np.sum(w * du, axis=1)
    mv = np.sum(w * dv, axis=1)

    cx, cy = pj.chart_coords(src_spec, d, chs)
    tx, ty = cx + mu, cy + mv
    if src_spec.kind == pj.EQUIRECT:
        ty = np.clip(ty, -HALF_PI, HALF_PI)
    target = pj.chart_point(src_spec, tx, ty, chs)
    moving = (mu != 0) | (mv != 0)
    target[~moving] = d[~moving]

    dst_charts = pm_d.chart[sel]
    ax, ay = pj.chart_coords(dst_spec, d, dst_charts)
    bx, by = pj.chart_coords(dst_spec, target, dst_charts)
    fu = pj.wrap_coord_delta(dst_spec, bx - ax)
    fv = by - ay
    fu[~moving] = 0.0
    fv[~moving] = 0.0
    ok = np.all(tap_ok, axis=1) & np.isfinite(fu) & np.isfinite(fv)

    u = np.zeros(dst_spec.shape)
    v = np.zeros(dst_spec.shape)
    valid = np.zeros(dst_spec.shape, dtype=bool)
    sat = np.zeros(dst_spec.shape, dtype=bool)
    u[sel] = np.where(ok, fu, 0.0)
    v[sel] = np.where(ok, fv, 0.0)
    valid[sel] = ok
    sat[sel] = np.any(ends_sat[iy, ix] & used, axis=1)
    return FlowField(dst_spec, u, v, valid, sat)


# ---------------------------------------------------------------------------
# SFL1 files


def _spec_params(spec):
    if spec.kind == pj.TRICYL:
        return [struct.unpack("<I", struct.pack("<f", 2.0 * spec.half_fov))[0]]
    if spec.kind == pj.CUBEPAD:
        return [spec.face, spec.pad]
    return []


def _spec_from_header(kind_code, width, height, params):
    kinds = {v: k for k, v in KIND_CODES.items()}
    if kind_code not in kinds:
        raise FlowFormatError(f"unknown projection code {kind_code}")
    kind = kinds[kind_code]
    try:
        if kind == pj.EQUIRECT:
            return pj.ProjectionSpec(kind, width, height)
        if kind == pj.TRICYL:
            fov = struct.unpack("<f", struct.pack("<I", params[0]))[0]
            half = 0.5 * fov
            if abs(half - np.pi / 4) < 1e-6:
                half = np.pi / 4
            return pj.ProjectionSpec(kind, width, height, half_fov=half)
        return pj.ProjectionSpec(kind, width, height, face=params[0], pad=params[1])
    except (IndexError, ValueError) as exc:
        raise FlowFormatError(f"inconsistent projection header: {exc}") from exc


def write_flow(flow, path):
    bad = ~np.isfinite(flow.u) | ~np.isfinite(flow.v)
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValueError(f"refusing to write non-finite flow: {int(bad.sum())} pixels, first at (x={x}, y={y})")
    spec = flow.spec
    params = _spec_params(spec)
    header = SFL_MAGIC + struct.pack("<4I", KIND_CODES[spec.kind], spec.width, spec.height, len(params))
    header += struct.pack(f"<{len(params)}I", *params)
    uv = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    flags = flow.valid.astype(np.uint8) * VALID_BIT | flow.saturated.astype(np.uint8) * SATURATED_BIT
    with open(path, "wb") as f:
        f.write(header)
        f.write(uv.tobytes())
        f.write(flags.astype(np.uint8).tobytes())


def read_flow(path, expect_spec=None):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != SFL_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {data[:4]!r}, expected {SFL_MAGIC!r}")
    if len(data) < 20:
        raise FlowFormatError(f"{path}: truncated header")
    kind, width, height, nparam = struct.unpack_from("<4I", data, 4)
    off = 20 + 4 * nparam
    if len(data) < off:
        raise FlowFormatError(f"{path}: truncated header")
    params = struct.unpack_from(f"<{nparam}I", data, 20)
    spec = _spec_from_header(kind, width, height, params)
    n = width * height
    if len(data) != off + 9 * n:
        raise FlowFormatError(f"{path}: payload is {len(data) - off} bytes, expected {9 * n}")
    uv = np.frombuffer(data, dtype="<f4", count=2 * n, offset=off).reshape(height, width, 2)
    flags = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 8 * n).reshape(height, width)
    if expect_spec is not None and spec != expect_spec:
        raise FlowFormatError(f"{path}: projection {spec} does not match expected {expect_spec}")
    return FlowField(spec, uv[..., 0], uv[..., 1], (flags & VALID_BIT) > 0, (flags & SATURATED_BIT) > 0)


def write_flo(flow, path):
    """Middlebury .flo export of an equirect field, in pixel units."""
    if flow.spec.kind != pj.EQUIRECT:
        raise ValueError(".flo export only supports equirect fields")
    pu, pv = flow.pixels()
    uv = np.stack([pu, pv], axis=-1).astype("<f4")
    uv[~flow.valid] = np.float32(1e10)
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(struct.pack("<ii", flow.spec.width, flow.spec.height))
        f.write(uv.tobytes())


def read_flo(path):
    """Middlebury .flo import, interpreted as equirect pixel flow and converted to radians."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {data[:4]!r}, expected {FLO_MAGIC!r}")
    w, h = struct.unpack_from("<ii", data, 4)
    if len(data) != 12 + 8 * w * h:
        raise FlowFormatError(f"{path}: truncated .flo payload")
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)
    try:
        spec = pj.ProjectionSpec(pj.EQUIRECT, w, h)
    except ValueError as exc:
        raise FlowFormatError(f"{path}: {exc}") from exc
    valid = (np.abs(uv[..., 0]) < FLO_UNKNOWN) & (np.abs(uv[..., 1]) < FLO_UNKNOWN)
    u = np.where(valid, uv[..., 0] * TWO_PI / w, 0.0)
    v = np.where(valid, -uv[..., 1] * np.pi / h, 0.0)
    return FlowField(spec, u, v, valid)


# ---------------------------------------------------------------------------
# visualisation


def make_colorwheel():
    """Middlebury colour wheel: RY, YG, GC, CB, BM, MR segments."""
    # (length, channel held at 1, channel ramped, ramp direction)
    segments = [(15, 0, 1, 1), (6, 1, 0, -1), (4, 1, 2, 1), (11, 2, 1, -1), (13, 2, 0, 1), (6, 0, 2, -1)]
    rows = []
    for n, hold, ramp, direction in segments:
        seg = np.zeros((n, 3))
        seg[:, hold] = 1.0
        t = np.arange(n) / n
        seg[:, ramp] = t if direction > 0 else 1.0 - t
        rows.append(seg)
    return np.concatenate(rows)


def flow_to_color(flow, max_flow=None, as_float=False):
    """Colour-wheel rendering: hue is direction, saturation grows with magnitude.

    Magnitudes are normalised by ``max_flow`` (pixels) or by the largest
    valid magnitude.  Zero flow renders white, invalid pixels black.
    """
    pu, pv = flow.pixels()
    mag = np.hypot(pu, pv)
    if max_flow is None:
        max_flow = float(mag[flow.valid].max()) if flow.valid.any() else 0.0
    rad = mag / max_flow if max_flow > 0 else np.zeros_like(mag)
    wheel = make_colorwheel()
    ncols = len(wheel)
    angle = np.arctan2(-pv, -pu) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    r = rad[..., None]
    inside = r <= 1
    col = np.where(inside, 1 - r * (1 - col), col * 0.75)
    col[~flow.valid] = 0.0
    if as_float:
        return col
    return (np.clip(col, 0, 1) * 255 + 0.5).astype(np.uint8)


def warp_image(image, flow):
    """Sample ``image`` (on ``flow.spec``) at each pixel's flow target.

    With a backward flow (t+1 -> t) this pulls frame t content onto frame
    t+1; with a forward flow applied to frame t+1 it reconstructs frame t.
    Returns (warped image, ok mask).
    """
    image = np.asarray(image, dtype=np.float64)
    dirs, ok, _ = field_endpoints(flow)
    x, y, ch = pj.dir_to_pixel(flow.spec, dirs.reshape(-1, 3))
    out = pj.sample(flow.spec, image, x, y, ch).reshape(image.shape)
    return out, ok
