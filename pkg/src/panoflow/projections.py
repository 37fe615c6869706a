"""Pixel <-> direction maps for the three panoramic layouts.

Equirect
    Plain longitude/latitude grid, ``width == 2 * height``.
TriCylinder
    Three Mercator bands stacked top to bottom.  Band 0 wraps a cylinder
    around the Y axis, band 1 around X, band 2 around Z.  Each band covers
    longitude [-pi, pi) horizontally and latitude [-half_fov, half_fov]
    vertically.  A direction is owned by the band whose equator it is
    closest to.
CubePadding
    Cube-map cross of face size F with a pad of p pixels.  Front, right,
    back and left faces form a 4F strip, the top face sits above the front
    face and the bottom face below it.  Pads are filled by extending each
    face plane beyond its edge, so the content next to a face edge is the
    neighbouring face content seen through that plane.  Canvas size is
    (4F + 2p) x (3F + 2p); corners that no face reaches are dead.

Pixel centres sit at integer coordinates, i.e. pixel (x, y) covers
[x - 0.5, x + 0.5).  Chart ids: equirect 0, tricyl band 0..2, cubepad face
0..5 (front, right, back, left, top, bottom), -1 for dead pixels.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .sphere import HALF_PI, TWO_PI, normalize, spherical_to_dir, wrap_angle

EQUIRECT = "equirect"
TRICYL = "tricyl"
CUBEPAD = "cubepad"
KINDS = (EQUIRECT, TRICYL, CUBEPAD)

SHORT_NAMES = {"E": EQUIRECT, "C": TRICYL, "P": CUBEPAD}

# rows map global -> band-local coordinates; local +y is the cylinder axis
BAND_FRAMES = np.array(
    [
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],  # Y axis
        [[0, 0, 1], [1, 0, 0], [0, 1, 0]],  # X axis
        [[0, 1, 0], [0, 0, 1], [1, 0, 0]],  # Z axis
    ],
    dtype=np.float64,
)
BAND_AXIS = (1, 0, 2)

# face normal, image-right and image-down vectors
FACE_N = np.array([[1, 0, 0], [0, 0, 1], [-1, 0, 0], [0, 0, -1], [0, 1, 0], [0, -1, 0]], dtype=np.float64)
FACE_R = np.array([[0, 0, 1], [-1, 0, 0], [0, 0, -1], [1, 0, 0], [0, 0, 1], [0, 0, 1]], dtype=np.float64)
FACE_D = np.array([[0, -1, 0], [0, -1, 0], [0, -1, 0], [0, -1, 0], [1, 0, 0], [-1, 0, 0]], dtype=np.float64)
FACE_NAMES = ("front", "right", "back", "left", "top", "bottom")


def mercator_h(phi):
    """Cylinder height for a latitude: ln(tan phi + sec phi)."""
    return np.arcsinh(np.tan(phi))


def inverse_mercator(h):
    return 2.0 * np.arctan(np.exp(h)) - HALF_PI


@dataclass(frozen=True)
class ProjectionSpec:
    kind: str
    width: int
    height: int
    half_fov: float = np.pi / 4
    face: int = 0
    pad: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("projection dimensions must be positive")
        if self.kind == EQUIRECT and self.width != 2 * self.height:
            raise ValueError(f"equirect needs width == 2*height, got {self.width}x{self.height}")
        if self.kind == TRICYL:
            if self.height % 3:
                raise ValueError("tri-cylinder height must be divisible by 3")
            if not 0.0 < self.half_fov < HALF_PI:
                raise ValueError("tri-cylinder half FOV must lie in (0, pi/2)")
        if self.kind == CUBEPAD:
            F, p = self.face, self.pad
            if F <= 0 or p < 1 or p > F:
                raise ValueError("cube padding needs face > 0 and 1 <= pad <= face")
            if (self.width, self.height) != (4 * F + 2 * p, 3 * F + 2 * p):
                raise ValueError("cube padding canvas must be (4F+2p) x (3F+2p)")

    @classmethod
    def equirect(cls, width=512):
        return cls(EQUIRECT, width, width // 2)

    @classmethod
    def tricyl(cls, width=512, band_height=None, half_fov=np.pi / 4):
        if band_height is None:
            # square pixels at the band equator, forced odd so a centre row exists
            h = mercator_h(half_fov)
            band_height = 2 * int(round(width * h / TWO_PI)) + 1
        return cls(TRICYL, width, 3 * band_height, half_fov=half_fov)

    @classmethod
    def cubepad(cls, face=128, pad=None):
        if pad is None:
            pad = max(1, face // 8)
        return cls(CUBEPAD, 4 * face + 2 * pad, 3 * face + 2 * pad, face=face, pad=pad)

    @classmethod
    def parse(cls, text, width=512):
        """Build a spec from ``equirect:512``, ``tricyl:512[x145]``, ``cubepad:128[:16]`` or E/C/P."""
        parts = text.split(":")
        kind = SHORT_NAMES.get(parts[0], parts[0])
        args = parts[1:]
        if kind == EQUIRECT:
            return cls.equirect(int(args[0]) if args else width)
        if kind == TRICYL:
            if not args:
                return cls.tricyl(width)
            w, _, bh = args[0].partition("x")
            return cls.tricyl(int(w), int(bh) // 3 if bh else None)
        if kind == CUBEPAD:
            if not args:
                return cls.cubepad(width // 4)
            return cls.cubepad(int(args[0]), int(args[1]) if len(args) > 1 else None)
        raise ValueError(f"unknown projection {text!r}")

    def __str__(self):
        if self.kind == EQUIRECT:
            return f"equirect:{self.width}"
        if self.kind == TRICYL:
            return f"tricyl:{self.width}x{self.height}"
        return f"cubepad:{self.face}:{self.pad}"

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def n_charts(self):
        return {EQUIRECT: 1, TRICYL: 3, CUBEPAD: 6}[self.kind]

    @property
    def band_height(self):
        return self.height // 3

    @property
    def h_max(self):
        return float(mercator_h(self.half_fov))

    def face_origin(self, face):
        F, p = self.face, self.pad
        if face < 4:
            return p + face * F, p + F
        return (p, p) if face == 4 else (p, p + 2 * F)


# ---------------------------------------------------------------------------
# continuous chart maps


def _group(charts, n):
    charts = np.asarray(charts)
    for c in range(n):
        idx = np.nonzero(charts == c)
        if idx[0].size:
            yield c, idx


def owner_chart(spec, dirs):
    """Chart that owns each direction (exactly one per direction)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    if spec.kind == EQUIRECT:
        return np.zeros(dirs.shape[:-1], dtype=np.int64)
    a = np.abs(dirs)
    if spec.kind == TRICYL:
        # equator distance of band b is asin|d . axis_b|; ties go to the lower band
        return np.argmin(np.stack([a[..., 1], a[..., 0], a[..., 2]], axis=-1), axis=-1)
    axis = np.argmax(a, axis=-1)
    sign = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] >= 0
    lut_pos = np.array([0, 4, 1])
    lut_neg = np.array([2, 5, 3])
    return np.where(sign, lut_pos[axis], lut_neg[axis])


def to_canvas(spec, dirs, charts):
    """Canvas coordinates (x, y) of directions expressed in the given charts.

    Cube faces use their canonical position in the cross; directions behind
    a face plane give NaN.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    charts = np.broadcast_to(np.asarray(charts), dirs.shape[:-1])
    if spec.kind == EQUIRECT:
        x = dirs[..., 0]
        theta = wrap_angle(np.arctan2(dirs[..., 2], x))
        phi = np.arctan2(dirs[..., 1], np.hypot(x, dirs[..., 2]))
        return (theta + np.pi) / TWO_PI * spec.width - 0.5, (HALF_PI - phi) / np.pi * spec.height - 0.5
    x = np.full(dirs.shape[:-1], np.nan)
    y = np.full(dirs.shape[:-1], np.nan)
    if spec.kind == TRICYL:
        W, Hb, hm = spec.width, spec.band_height, spec.h_max
        for b, idx in _group(charts, 3):
            loc = dirs[idx] @ BAND_FRAMES[b].T
            theta = wrap_angle(np.arctan2(loc[:, 2], loc[:, 0]))
            h = np.arcsinh(loc[:, 1] / np.hypot(loc[:, 0], loc[:, 2]))
            x[idx] = (theta + np.pi) / TWO_PI * W - 0.5
            y[idx] = b * Hb + (hm - h) / (2 * hm) * Hb - 0.5
        return x, y
    F = spec.face
    for f, idx in _group(charts, 6):
        d = dirs[idx]
        s = d @ FACE_N[f]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(s > 0, (d @ FACE_R[f]) / s, np.nan)
            b = np.where(s > 0, (d @ FACE_D[f]) / s, np.nan)
        c0, r0 = spec.face_origin(f)
        x[idx] = c0 + (a + 1.0) * 0.5 * F - 0.5
        y[idx] = r0 + (b + 1.0) * 0.5 * F - 0.5
    return x, y


def from_canvas(spec, x, y, charts):
    """Directions at continuous canvas coordinates, evaluated on the chart's own formula."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    charts = np.broadcast_to(np.asarray(charts), x.shape)
    if spec.kind == EQUIRECT:
        theta = (x + 0.5) / spec.width * TWO_PI - np.pi
        phi = HALF_PI - (y + 0.5) / spec.height * np.pi
        return spherical_to_dir(theta, phi)
    out = np.zeros(x.shape + (3,))
    if spec.kind == TRICYL:
        W, Hb, hm = spec.width, spec.band_height, spec.h_max
        for b, idx in _group(charts, 3):
            theta = (x[idx] + 0.5) / W * TWO_PI - np.pi
            h = hm - (y[idx] - b * Hb + 0.5) / Hb * (2 * hm)
            loc = spherical_to_dir(theta, inverse_mercator(h))
            out[idx] = loc @ BAND_FRAMES[b]
        return out
    F = spec.face
    for f, idx in _group(charts, 6):
        c0, r0 = spec.face_origin(f)
        a = (x[idx] - c0 + 0.5) / F * 2.0 - 1.0
        b = (y[idx] - r0 + 0.5) / F * 2.0 - 1.0
        v = FACE_N[f] + a[:, None] * FACE_R[f] + b[:, None] * FACE_D[f]
        out[idx] = normalize(v)
    return out


def chart_coords(spec, dirs, charts):
    """Coordinates in the units flow is stored in: (theta, phi) for equirect, canvas pixels otherwise."""
    if spec.kind == EQUIRECT:
        dirs = np.asarray(dirs, dtype=np.float64)
        theta = wrap_angle(np.arctan2(dirs[..., 2], dirs[..., 0]))
        phi = np.arctan2(dirs[..., 1], np.hypot(dirs[..., 0], dirs[..., 2]))
        return theta, phi
    return to_canvas(spec, dirs, charts)


def chart_point(spec, cx, cy, charts):
    """Inverse of :func:`chart_coords`."""
    if spec.kind == EQUIRECT:
        return spherical_to_dir(cx, cy)
    return from_canvas(spec, cx, cy, charts)


def coord_period(spec):
    """Period of the first flow coordinate, or None when it does not wrap."""
    return {EQUIRECT: TWO_PI, TRICYL: float(spec.width), CUBEPAD: None}[spec.kind]


def wrap_coord_delta(spec, delta):
    period = coord_period(spec)
    if period is None:
        return delta
    half = 0.5 * period
    return half - np.mod(half - delta, period)


# ---------------------------------------------------------------------------
# discrete pixel maps


@dataclass(frozen=True)
class PixelMap:
    dirs: np.ndarray  # (H, W, 3), zero on dead pixels
    chart: np.ndarray  # (H, W) int, -1 on dead pixels
    valid: np.ndarray  # (H, W) bool
    owned: np.ndarray  # (H, W) bool
    cx: np.ndarray  # canonical canvas x within the chart
    cy: np.ndarray


def _cube_regions(spec):
    """Chart and canonical canvas coordinates for every cube-padding pixel."""
    F, p, W, H = spec.face, spec.pad, spec.width, spec.height
    ys, xs = np.mgrid[0:H, 0:W]
    chart = np.full((H, W), -1, dtype=np.int64)
    cx = xs.astype(np.float64).copy()
    cy = ys.astype(np.float64).copy()

    ring = np.mod(xs - p, 4 * F)
    ring_face = ring // F
    ring_x = p + ring

    band = (ys >= F) & (ys < 2 * F + 2 * p)  # equator faces with vertical pad
    chart[band] = ring_face[band]
    cx[band] = ring_x[band]

    left = xs < 2 * p + F  # columns shared with the top/bottom face extension
    for face, rows, core_edge in ((4, ys < p + F, p + F - 1), (5, ys >= p + 2 * F, p + 2 * F)):
        region = rows & left
        in_pad_band = region & band
        # corner squares where a polar face pad meets an equator face pad:
        # split along the diagonal, each pixel goes to the nearer face edge
        dist_eq = np.abs(ys - core_edge)
        dist_polar = np.where(xs >= p + F, xs - (p + F), p - 1 - xs)
        corner = in_pad_band & ((xs >= p + F) | (xs < p))
        take_polar = region & ~(corner & (dist_eq <= dist_polar))
        chart[take_polar] = face
        cx[take_polar] = xs[take_polar]
        cy[take_polar] = ys[take_polar]

    owned = np.zeros((H, W), dtype=bool)
    core_rows = (ys >= p + F) & (ys < p + 2 * F)
    owned[core_rows & (xs >= p) & (xs < p + 4 * F)] = True
    core_cols = (xs >= p) & (xs < p + F)
    owned[core_cols & (ys >= p) & (ys < p + F)] = True
    owned[core_cols & (ys >= p + 2 * F) & (ys < p + 3 * F)] = True
    return chart, cx, cy, owned


@lru_cache(maxsize=16)
def pixel_map(spec):
    H, W = spec.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    if spec.kind == EQUIRECT:
        chart = np.zeros((H, W), dtype=np.int64)
        cx, cy = xs, ys
        owned = np.ones((H, W), dtype=bool)
    elif spec.kind == TRICYL:
        chart = (ys // spec.band_height).astype(np.int64)
        cx, cy = xs, ys
        owned = None
    else:
        chart, cx, cy, owned = _cube_regions(spec)
    valid = chart >= 0
    dirs = np.zeros((H, W, 3))
    dirs[valid] = from_canvas(spec, cx[valid], cy[valid], chart[valid])
    if owned is None:
        owned = owner_chart(spec, dirs) == chart
    owned &= valid
    pm = PixelMap(dirs, chart, valid, owned, cx, cy)
    for arr in (pm.dirs, pm.chart, pm.valid, pm.owned, pm.cx, pm.cy):
        arr.setflags(write=False)
    return pm


def pixel_to_dir(spec, x, y):
    """Direction of integer pixel(s), plus validity and ownership flags."""
    pm = pixel_map(spec)
    x = np.asarray(x)
    y = np.asarray(y)
    return pm.dirs[y, x], pm.valid[y, x], pm.owned[y, x]


def dir_to_pixel(spec, dirs):
    """Sub-pixel canvas position of each direction in its owning chart."""
    charts = owner_chart(spec, dirs)
    x, y = to_canvas(spec, dirs, charts)
    return x, y, charts


# ---------------------------------------------------------------------------
# sampling


def bilinear_taps(spec, x, y, charts):
    """Integer tap coordinates and weights (N, 4) for bilinear lookups.

    Equirect and tri-cylinder bands wrap horizontally; vertical addressing
    clamps to the image (equirect) or to the band (tri-cylinder).  Cube
    padding clamps to the canvas.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    charts = np.broadcast_to(np.asarray(charts), x.shape).ravel()
    H, W = spec.shape
    # snap tiny offsets so lookups on the source grid are exact
    rx, ry = np.round(x), np.round(y)
    x = np.where(np.abs(x - rx) < 1e-7, rx, x)
    y = np.where(np.abs(y - ry) < 1e-7, ry, y)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    if spec.kind == CUBEPAD:
        x0, x1 = np.clip(x0, 0, W - 1), np.clip(x1, 0, W - 1)
        lo, hi = 0, H - 1
    else:
        x0, x1 = np.mod(x0, W), np.mod(x1, W)
        if spec.kind == TRICYL:
            lo = charts * spec.band_height
            hi = lo + spec.band_height - 1
        else:
            lo, hi = 0, H - 1
    y0 = np.clip(y0, lo, hi)
    y1 = np.clip(y1, lo, hi)
    ix = np.stack([x0, x1, x0, x1], axis=1)
    iy = np.stack([y0, y0, y1, y1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return ix, iy, w


def sample(spec, img, x, y, charts):
    img = np.asarray(img)
    ix, iy, w = bilinear_taps(spec, x, y, charts)
    vals = img[iy, ix]
    if img.ndim == 3:
        return np.einsum("nk,nkc->nc", w, vals)
    return np.einsum("nk,nk->n", w, vals)


def resample(src_spec, src_image, dst_spec):
    """Resample an image from one projection to another (bilinear)."""
    src_image = np.asarray(src_image)
    if src_image.shape[:2] != src_spec.shape:
        raise ValueError(f"image shape {src_image.shape[:2]} does not match {src_spec} {src_spec.shape}")
    if src_spec == dst_spec:
        return src_image.astype(np.float64, copy=True)
    pm = pixel_map(dst_spec)
    out = np.zeros(dst_spec.shape + src_image.shape[2:])
    x, y, ch = dir_to_pixel(src_spec, pm.dirs[pm.valid])
    out[pm.valid] = sample(src_spec, src_image.astype(np.float64), x, y, ch)
    return out


# ---------------------------------------------------------------------------
# solid angle


@dataclass(frozen=True)
class WeightMap:
    weights: np.ndarray  # steradians, zero outside the ownership mask
    owned: np.ndarray

    @property
    def total(self):
        return float(np.sum(self.weights[self.owned]))


@lru_cache(maxsize=16)
def solid_angle_weights(spec):
    """Per-pixel patch area from the cross product of right/down neighbour offsets."""
    pm = pixel_map(spec)
    v = pm.valid
    c, cx, cy = pm.chart[v], pm.cx[v], pm.cy[v]
    pc = from_canvas(spec, cx, cy, c)
    pr = from_canvas(spec, cx + 1.0, cy, c)
    pd = from_canvas(spec, cx, cy + 1.0, c)
    w = np.zeros(spec.shape)
    w[v] = np.linalg.norm(np.cross(pr - pc, pd - pc), axis=-1)
    w[~pm.owned] = 0.0
    w.setflags(write=False)
    return WeightMap(w, pm.owned)
