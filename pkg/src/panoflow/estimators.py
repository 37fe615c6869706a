"""Classical per-projection flow estimators and a controllable perturbed-GT estimator.

All estimators work on the chart canvas in pixel units.  Equirect images
and tri-cylinder bands wrap horizontally; cube padding canvases do not.
Equirect results are converted to (dtheta, dphi) radians on the way out.
"""
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import projections as pj
from .flowfield import FlowField, reproject_flow
from .imageio import luminance
from .sphere import HALF_PI, TWO_PI, dir_to_spherical, wrap_delta_theta

BLOCKMATCH = "blockmatch"
HORNSCHUNCK = "hornschunck"
PERTURBED = "perturbed"
ESTIMATORS = (BLOCKMATCH, HORNSCHUNCK, PERTURBED)

PROFILES = ("uniform", "latitude", "polar", "chart")


@dataclass
class PerturbModel:
    """Error model for :func:`perturb_gt`, amplitudes in chart pixels.

    The local amplitude is ``floor + (1 - floor) * w`` where ``w`` in [0, 1]
    comes from ``profile``: ``latitude`` grows toward the poles, ``polar``
    grows toward the equator, ``chart`` grows with distance from the chart's
    low-distortion centre (band equator, face centre, or the equator for
    equirect), ``uniform`` is constant.
    """

    profile: str = "uniform"
    bias: float = 0.0
    noise: float = 0.0
    floor: float = 0.1
    power: float = 1.0
    smooth: float = 6.0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown perturbation profile {self.profile!r}")
        if self.bias < 0 or self.noise < 0 or not 0 <= self.floor <= 1 or self.smooth <= 0:
            raise ValueError("perturbation amplitudes must be >= 0 and floor in [0, 1]")


@dataclass
class EstimatorConfig:
    kind: str = BLOCKMATCH
    levels: int = 3
    radius: int = 3
    block: int = 7
    alpha: float = 0.03
    iterations: int = 100
    pole_margin: float = 0.05
    subpixel: bool = True
    seed: int = 0
    perturb: PerturbModel = field(default_factory=PerturbModel)

    def __post_init__(self):
        if self.kind not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.kind!r}; choose from {', '.join(ESTIMATORS)}")
        if self.levels < 1 or self.radius < 1 or self.block < 1 or self.iterations < 1:
            raise ValueError("levels, radius, block and iterations must be positive")
        if self.alpha <= 0 or not 0 <= self.pole_margin < 0.5:
            raise ValueError("alpha must be positive and pole_margin in [0, 0.5)")

    @classmethod
    def from_pairs(cls, pairs):
        """Build from ``{key: str}``; ``perturb.<field>`` keys set the error model."""
        top = {f.name: f.type for f in fields(cls)}
        sub = {f.name: f.type for f in fields(PerturbModel)}
        kw, pkw = {}, {}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key.startswith("perturb."):
                name = key.split(".", 1)[1]
                if name not in sub:
                    raise ValueError(f"unknown perturbation key {key!r}")
                pkw[name] = _coerce(raw, sub[name])
            elif key in top and key != "perturb":
                kw[key] = _coerce(raw, top[key])
            else:
                raise ValueError(f"unknown estimator key {key!r}")
        return cls(perturb=PerturbModel(**pkw), **kw)

    @classmethod
    def from_file(cls, path):
        return cls.from_pairs(read_key_values(path))


def _coerce(raw, typ):
    raw = str(raw).strip()
    if typ in (bool, "bool"):
        return raw.lower() in ("1", "true", "yes", "on")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def read_key_values(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# pyramid helpers


def _downsample(img):
    h, w = img.shape
    if h % 2:
        img = np.vstack([img, img[-1:]])
    if w % 2:
        img = np.hstack([img, img[:, -1:]])
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _upsample_flow(f, shape, smooth=False):
    up = np.repeat(np.repeat(f, 2, axis=0), 2, axis=1)[: shape[0], : shape[1]]
    if up.shape != shape:
        up = np.pad(up, ((0, shape[0] - up.shape[0]), (0, shape[1] - up.shape[1])), mode="edge")
    return 2.0 * up


def _modes(periodic):
    return ("nearest", "wrap" if periodic else "nearest")


def _gather(img, ys, xs, periodic):
    h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.mod(xs, w) if periodic else np.clip(xs, 0, w - 1)
    return img[ys, xs]


# ---------------------------------------------------------------------------
# block matching


def _candidates(radius):
    r = int(radius)
    cand = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dx * dx + dy * dy <= r * r]
    # smallest displacement first, then scanline order: strict '<' keeps the earlier one on ties
    cand.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[1], d[0]))
    return cand


def _pad(img, m, periodic):
    img = np.pad(img, ((m, m), (0, 0)), mode="edge")
    return np.pad(img, ((0, 0), (m, m)), mode="wrap" if periodic else "edge")


def _costs_at(a, b, dx, dy, block, periodic):
    """Exact block SAD, divided by the block area, at a per-pixel integer displacement (dx, dy).

    Samples outside the image repeat the border (wrap horizontally when
    periodic).  Pixels are grouped by displacement: compact groups are
    box-filtered on their bounding box, sparse ones summed over the block
    offsets directly.
    """
    h, w = a.shape
    half = block // 2
    m = half + int(max(np.abs(dx).max(), np.abs(dy).max()))
    ap, bp = _pad(a, m, periodic), _pad(b, m, periodic)
    wp = ap.shape[1]
    out = np.empty(h * w)
    key = (dx * (4 * h + 1) + dy).ravel()
    order = np.argsort(key, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(key[order]) != 0])
    sparse = []
    for idx in np.split(order, starts[1:]):
        rows, cols = np.divmod(idx, w)
        r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        if (r1 - r0 + block) * (c1 - c0 + block) > idx.size * block**2 // 2:
            sparse.append(idx)
            continue
        ddx, ddy = int(dx.flat[idx[0]]), int(dy.flat[idx[0]])
        ys = slice(r0 + m - half, r1 + m + half)
        xs = slice(c0 + m - half, c1 + m + half)
        yb = slice(ys.start + ddy, ys.stop + ddy)
        xb = slice(xs.start + ddx, xs.stop + ddx)
        cost = ndimage.uniform_filter(np.abs(ap[ys, xs] - bp[yb, xb]), size=block, mode="nearest")
        out[idx] = cost[rows - r0 + half, cols - c0 + half]
    if sparse:
        idx = np.concatenate(sparse)
        rows, cols = np.divmod(idx, w)
        ia = (rows + m) * wp + cols + m
        ib = ia + dy.flat[idx] * wp + dx.flat[idx]
        af, bf = ap.ravel(), bp.ravel()
        acc = np.zeros(idx.size)
        for oy in range(-half, half + 1):
            for ox in range(-half, half + 1):
                off = oy * wp + ox
                acc += np.abs(af[ia + off] - bf[ib + off])
        out[idx] = acc / block**2
    return out.reshape(h, w)


def _match_level(a, b, fx, fy, radius, block, periodic, subpixel):
    h, w = a.shape
    best = np.full((h, w), np.inf)
    bx = np.zeros((h, w), dtype=np.int64)
    by = np.zeros((h, w), dtype=np.int64)
    for dx, dy in _candidates(radius):
        c = _costs_at(a, b, fx + dx, fy + dy, block, periodic)
        better = c < best
        best[better] = c[better]
        bx[better] = dx
        by[better] = dy
    ux = (fx + bx).astype(np.float64)
    uy = (fy + by).astype(np.float64)
    if subpixel:
        for comp, ex, ey in ((ux, 1, 0), (uy, 0, 1)):
            cm = _costs_at(a, b, fx + bx - ex, fy + by - ey, block, periodic)
            cp = _costs_at(a, b, fx + bx + ex, fy + by + ey, block, periodic)
            den = cm - 2.0 * best + cp
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where((den > 0) & (best > 0), 0.5 * (cm - cp) / den, 0.0)
            comp += np.clip(off, -0.5, 0.5)
    return ux, uy


def block_match(a, b, radius=3, block=7, levels=3, periodic=False, subpixel=True):
    """Coarse-to-fine SAD block matching on a single chart image.

    Each level searches integer offsets within a disc of ``radius`` around
    the rounded, doubled coarser estimate.  Coarse levels always refine to
    subpixel so that half-pixel shifts do not alias into a patchwork of
    initial offsets; the finest level refines only if ``subpixel``.  The
    result is clamped to the nominal reach ``radius * 2**levels``.
    """
    pa, pb = _pyramid(a, levels), _pyramid(b, levels)
    fx = np.zeros(pa[-1].shape, dtype=np.int64)
    fy = np.zeros(pa[-1].shape, dtype=np.int64)
    ux = uy = None
    for lvl in range(levels - 1, -1, -1):
        if lvl < levels - 1:
            fx = np.rint(_upsample_flow(ux, pa[lvl].shape)).astype(np.int64)
            fy = np.rint(_upsample_flow(uy, pa[lvl].shape)).astype(np.int64)
        ux, uy = _match_level(pa[lvl], pb[lvl], fx, fy, radius, block, periodic, subpixel or lvl > 0)
    reach = float(radius * 2**levels)
    mag = np.hypot(ux, uy)
    scale = np.where(mag > reach, reach / np.maximum(mag, 1e-300), 1.0)
    return ux * scale, uy * scale


# ---------------------------------------------------------------------------
# Horn-Schunck


def _neighbour_sum(f, periodic):
    s = np.zeros_like(f)
    n = np.zeros_like(f)
    s[1:] += f[:-1]
    n[1:] += 1
    s[:-1] += f[1:]
    n[:-1] += 1
    if periodic:
        s += np.roll(f, 1, axis=1) + np.roll(f, -1, axis=1)
        n += 2
    else:
        s[:, 1:] += f[:, :-1]
        n[:, 1:] += 1
        s[:, :-1] += f[:, 1:]
        n[:, :-1] += 1
    return s, n


def hs_energy(ix, iy, it, u, v, alpha, periodic=False):
    """Discrete Horn-Schunck energy: data term plus alpha^2 times squared 4-neighbour differences."""
    data = np.sum((ix * u + iy * v + it) ** 2)
    smooth = np.sum(np.diff(u, axis=0) ** 2) + np.sum(np.diff(v, axis=0) ** 2)
    if periodic:
        smooth += np.sum((u - np.roll(u, -1, axis=1)) ** 2) + np.sum((v - np.roll(v, -1, axis=1)) ** 2)
    else:
        smooth += np.sum(np.diff(u, axis=1) ** 2) + np.sum(np.diff(v, axis=1) ** 2)
    return float(data + alpha**2 * smooth)


def hs_iterate(ix, iy, it, u, v, alpha, iterations, periodic=False, energies=None):
    """Red-black Gauss-Seidel sweeps on the Horn-Schunck energy.

    Each half-sweep minimises the energy exactly over one colour of pixels
    with the other fixed, so the energy never increases.
    """
    u = u.copy()
    v = v.copy()
    h, w = u.shape
    parity = np.add.outer(np.arange(h), np.arange(w)) % 2
    if periodic and w % 2:
        # an odd periodic width breaks the checkerboard at the seam; the last column gets its own two colours
        parity[:, -1] = 2 + np.arange(h) % 2
    colours = np.unique(parity)
    _, n = _neighbour_sum(u, periodic)
    k = alpha**2 * n
    den = k + ix**2 + iy**2
    for _ in range(iterations):
        for c in colours:
            m = parity == c
            su, _ = _neighbour_sum(u, periodic)
            sv, _ = _neighbour_sum(v, periodic)
            ub, vb = su / n, sv / n
            s = (ix * ub + iy * vb + it) / den
            u[m] = (ub - ix * s)[m]
            v[m] = (vb - iy * s)[m]
        if energies is not None:
            energies.append(hs_energy(ix, iy, it, u, v, alpha, periodic))
    return u, v


def _warp(img, u, v, periodic):
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.array([ys + v, xs + u])
    if periodic:
        coords[1] = np.mod(coords[1], w)
        padded = np.hstack([img, img[:, :1]])
        return ndimage.map_coordinates(padded, coords, order=1, mode="nearest")
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def _gradients(img, periodic):
    gy = ndimage.sobel(img, axis=0, mode=_modes(periodic)) / 8.0
    gx = ndimage.sobel(img, axis=1, mode=_modes(periodic)) / 8.0
    return gx, gy


def horn_schunck(a, b, alpha=0.03, iterations=100, levels=3, periodic=False):
    """Coarse-to-fine Horn-Schunck with warping between levels."""
    pa, pb = _pyramid(a, levels), _pyramid(b, levels)
    u = np.zeros(pa[-1].shape)
    v = np.zeros(pa[-1].shape)
    for lvl in range(levels - 1, -1, -1):
        if lvl < levels - 1:
            u = ndimage.uniform_filter(_upsample_flow(u, pa[lvl].shape), 3, mode=_modes(periodic))
            v = ndimage.uniform_filter(_upsample_flow(v, pa[lvl].shape), 3, mode=_modes(periodic))
        bw = _warp(pb[lvl], u, v, periodic)
        ix, iy = _gradients(0.5 * (pa[lvl] + bw), periodic)
        it = bw - pa[lvl] - ix * u - iy * v
        u, v = hs_iterate(ix, iy, it, u, v, alpha, iterations, periodic)
    return u, v


# ---------------------------------------------------------------------------
# per-projection driver


def _chart_slices(spec):
    """(row slice, periodic) pieces estimated independently."""
    if spec.kind == pj.TRICYL:
        hb = spec.band_height
        return [(slice(b * hb, (b + 1) * hb), True) for b in range(3)]
    return [(slice(0, spec.height), spec.kind == pj.EQUIRECT)]


def _px_to_field(spec, ux, uy, valid):
    if spec.kind == pj.EQUIRECT:
        return FlowField(spec, ux * TWO_PI / spec.width, -uy * np.pi / spec.height, valid)
    return FlowField(spec, ux, uy, valid)


def _fill_pole_rows(ux, uy, margin):
    h = ux.shape[0]
    m = int(round(margin * h))
    if m <= 0 or 2 * m >= h:
        return
    ux[:m] = ux[m]
    uy[:m] = uy[m]
    ux[h - m:] = ux[h - m - 1]
    uy[h - m:] = uy[h - m - 1]


def estimate(frame_a, frame_b, spec, cfg, gt=None):
    """Estimate flow between two frames already projected onto ``spec``.

    ``gt`` (any projection) is required for the perturbed-GT estimator.
    """
    a = luminance(frame_a)
    b = luminance(frame_b)
    if a.shape != spec.shape or b.shape != spec.shape:
        raise ValueError(f"frames {a.shape}/{b.shape} do not match {spec} {spec.shape}")
    pm = pj.pixel_map(spec)
    if cfg.kind == PERTURBED:
        if gt is None:
            raise ValueError("the perturbed estimator needs a ground-truth flow")
        chart_gt = gt if gt.spec == spec else reproject_flow(gt, spec)
        return perturb_gt(chart_gt, cfg.perturb, cfg.seed)

    a = np.where(pm.valid, a, 0.0)
    b = np.where(pm.valid, b, 0.0)
    ux = np.zeros(spec.shape)
    uy = np.zeros(spec.shape)
    for rows, periodic in _chart_slices(spec):
        if cfg.kind == BLOCKMATCH:
            fx, fy = block_match(a[rows], b[rows], cfg.radius, cfg.block, cfg.levels, periodic, cfg.subpixel)
        else:
            fx, fy = horn_schunck(a[rows], b[rows], cfg.alpha, cfg.iterations, cfg.levels, periodic)
        ux[rows] = fx
        uy[rows] = fy
    if spec.kind == pj.EQUIRECT and cfg.kind == BLOCKMATCH:
        _fill_pole_rows(ux, uy, cfg.pole_margin)
    ux[~pm.valid] = 0.0
    uy[~pm.valid] = 0.0
    return _px_to_field(spec, ux, uy, pm.valid.copy())


# ---------------------------------------------------------------------------
# perturbed ground truth


def profile_weight(spec, profile):
    """Per-pixel profile value in [0, 1] used to scale perturbations."""
    pm = pj.pixel_map(spec)
    if profile == "uniform":
        return np.where(pm.valid, 1.0, 0.0)
    _, phi = dir_to_spherical(pm.dirs)
    lat = np.abs(phi) / HALF_PI
    if profile == "latitude":
        w = lat
    elif profile == "polar":
        w = 1.0 - lat
    elif spec.kind == pj.EQUIRECT:
        w = lat
    elif spec.kind == pj.TRICYL:
        axis = np.take_along_axis(pm.dirs, np.asarray(pj.BAND_AXIS)[pm.chart][..., None], axis=-1)[..., 0]
        w = np.arcsin(np.clip(np.abs(axis), 0.0, 1.0)) / spec.half_fov
    else:
        d = pm.dirs
        depth = np.einsum("...k,...k->...", d, pj.FACE_N[pm.chart])
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.einsum("...k,...k->...", d, pj.FACE_R[pm.chart]) / depth
            b = np.einsum("...k,...k->...", d, pj.FACE_D[pm.chart]) / depth
        w = np.where(depth > 0, np.maximum(np.abs(a), np.abs(b)), 1.0)
    return np.where(pm.valid, np.clip(w, 0.0, 1.0), 0.0)


def _smooth_field(rng, shape, sigma, periodic):
    n = rng.standard_normal(shape)
    s = ndimage.gaussian_filter(n, sigma, mode=_modes(periodic))
    std = s.std()
    return s / std if std > 0 else s


def perturb_gt(gt, model, seed=0):
    """Add chart-dependent smooth bias and white noise (in chart pixels) to a flow field."""
    if model.bias == 0 and model.noise == 0:
        return gt.copy()
    spec = gt.spec
    rng = np.random.default_rng(seed)
    periodic = spec.kind != pj.CUBEPAD
    amp = model.floor + (1.0 - model.floor) * profile_weight(spec, model.profile) ** model.power
    du = model.bias * _smooth_field(rng, spec.shape, model.smooth, periodic)
    dv = model.bias * _smooth_field(rng, spec.shape, model.smooth, periodic)
    du += model.noise * rng.standard_normal(spec.shape)
    dv += model.noise * rng.standard_normal(spec.shape)
    du *= amp
    dv *= amp
    out = gt.copy()
    if spec.kind == pj.EQUIRECT:
        out.u = wrap_delta_theta(out.u + du * TWO_PI / spec.width)
        out.v = out.v - dv * np.pi / spec.height
    else:
        out.u = out.u + du
        out.v = out.v + dv
    out.u[~out.valid] = 0.0
    out.v[~out.valid] = 0.0
    return out
