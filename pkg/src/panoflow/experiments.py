"""Controlled desk-scale experiments shared by the scripts and the acceptance suite."""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import edit
from . import estimators as es
from . import fusion as fu
from . import metrics as mt
from . import projections as pj
from . import synth
from .flowfield import reproject_flow, warp_image
from .sphere import dir_to_spherical, normalize

# Complementary error models: the equirect one degrades steeply toward the
# poles, the tri-cylinder one grows mildly toward its band edges.
EQUIRECT_MODEL = es.PerturbModel(profile="latitude", bias=3.0, noise=1.5, floor=0.05, power=3.0)
TRICYL_MODEL = es.PerturbModel(profile="chart", bias=0.8, noise=0.4, floor=0.5)


def psnr(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = (a - b) ** 2
    if err.ndim == 3:
        err = err.mean(axis=-1)
    if mask is not None:
        err = err[mask]
    mse = mt.mean(err)
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


def backward_warp_psnr(scene, t, spec):
    """PSNR of frame t against frame t+1 pulled back by the ground-truth flow, on non-occluded pixels."""
    fa = synth.render_frame(scene, t, spec)
    fb = synth.render_frame(scene, t + 1, spec)
    gt, occ = synth.ground_truth_flow(scene, t, spec, with_occlusion=True)
    warped, ok = warp_image(fb, gt)
    return psnr(fa, warped, ok & ~occ)


# ---------------------------------------------------------------------------
# fusion with perturbed ground truth


@dataclass
class FusionTrial:
    seed: int
    epe: dict
    sd: dict
    lower_pointwise: bool
    upper_pointwise: bool
    argmin_switch_fraction: float


def fusion_trial(seed, width=256, schedule="eft", model_a=EQUIRECT_MODEL, model_b=TRICYL_MODEL, weights=None):
    """One seeded trial: perturbed equirect and tri-cylinder estimates fused on the equirect grid."""
    E = pj.ProjectionSpec.equirect(width)
    C = pj.ProjectionSpec.tricyl(width)
    scene = synth.build_scene(synth.DatasetConfig(schedule=schedule, pairs=1, seed=seed, width=width))
    gt = synth.ground_truth_flow(scene, 0, E)
    ss = np.random.SeedSequence(seed).spawn(2)
    pa = es.perturb_gt(gt, model_a, int(ss[0].generate_state(1)[0]))
    pb = reproject_flow(es.perturb_gt(reproject_flow(gt, C), model_b, int(ss[1].generate_state(1)[0])), E)
    blended = fu.blend(pa, pb, fu.heuristic_confidence(E, C, E, weights=weights))
    lo_e, hi_e, _, _ = fu.oracle_bounds(pa, pb, gt, "epe")
    lo_s, hi_s, _, _ = fu.oracle_bounds(pa, pb, gt, "sd")
    fields = {"E": pa, "C": pb, "blend": blended}
    epe = {k: mt.evaluate(f, gt).epe_mean for k, f in fields.items()}
    sd = {k: mt.evaluate(f, gt).sd_mean for k, f in fields.items()}
    epe["lower"], epe["upper"] = mt.evaluate(lo_e, gt).epe_mean, mt.evaluate(hi_e, gt).epe_mean
    sd["lower"], sd["upper"] = mt.evaluate(lo_s, gt).sd_mean, mt.evaluate(hi_s, gt).sd_mean

    both = pa.valid & pb.valid & gt.valid
    ea, eb = mt.epe_map(pa, gt)[both], mt.epe_map(pb, gt)[both]
    el, eu = mt.epe_map(lo_e, gt)[both], mt.epe_map(hi_e, gt)[both]
    return FusionTrial(
        seed=seed,
        epe=epe,
        sd=sd,
        lower_pointwise=bool(np.all(el <= np.minimum(ea, eb))),
        upper_pointwise=bool(np.all(eu >= np.maximum(ea, eb))),
        argmin_switch_fraction=float(min(np.mean(ea < eb), np.mean(eb < ea))),
    )


# ---------------------------------------------------------------------------
# projection complementarity


@dataclass
class ComplementarityProtocol:
    """Frozen settings of the latitude-binned block-matching comparison."""

    schedule: str = "city"
    width: int = 512
    lat_edges_deg: tuple = (0.0, 30.0, 60.0, 90.0)
    high_lat_deg: float = 60.0
    non_occluded: bool = True
    estimator: dict = field(default_factory=lambda: {"kind": "blockmatch"})

    def estimator_config(self):
        return es.EstimatorConfig.from_pairs({k: str(v) for k, v in self.estimator.items()})


@dataclass
class ComplementarityTrial:
    seed: int
    equirect_bins: list
    tricyl_bins: list
    equirect_high: float
    tricyl_high: float

    @property
    def monotone(self):
        return bool(np.all(np.diff(self.equirect_bins) > 0))

    @property
    def tricyl_wins_high(self):
        return bool(self.tricyl_high < self.equirect_high)


def complementarity_trial(seed, protocol=None):
    """Block matching on equirect and tri-cylinder frames, evaluated on the equirect grid by |latitude|."""
    p = protocol or ComplementarityProtocol()
    E = pj.ProjectionSpec.equirect(p.width)
    C = pj.ProjectionSpec.tricyl(p.width)
    cfg = p.estimator_config()
    scene = synth.build_scene(synth.DatasetConfig(schedule=p.schedule, pairs=1, seed=seed, width=p.width))
    fa = synth.render_frame(scene, 0, E)
    fb = synth.render_frame(scene, 1, E)
    gt, occ = synth.ground_truth_flow(scene, 0, E, with_occlusion=True)
    mask = ~occ if p.non_occluded else None
    pe = es.estimate(fa, fb, E, cfg)
    pc = reproject_flow(es.estimate(pj.resample(E, fa, C), pj.resample(E, fb, C), C, cfg), E)
    me = mt.evaluate(pe, gt, mask).epe_map
    mc = mt.evaluate(pc, gt, mask).epe_map
    _, phi = dir_to_spherical(pj.pixel_map(E).dirs)
    lat = np.degrees(np.abs(phi))
    edges = list(p.lat_edges_deg)
    bins = [(lat >= a) & (lat < b) if b < edges[-1] else (lat >= a) for a, b in zip(edges[:-1], edges[1:])]
    high = lat >= p.high_lat_deg

    def binned(m):
        return [mt.mean(m[b & np.isfinite(m)]) for b in bins]

    return ComplementarityTrial(
        seed=seed,
        equirect_bins=binned(me),
        tricyl_bins=binned(mc),
        equirect_high=mt.mean(me[high & np.isfinite(me) & np.isfinite(mc)]),
        tricyl_high=mt.mean(mc[high & np.isfinite(me) & np.isfinite(mc)]),
    )


def load_calibration(path):
    with open(path) as f:
        data = json.load(f)
    proto = data["protocol"]
    proto["lat_edges_deg"] = tuple(proto["lat_edges_deg"])
    return ComplementarityProtocol(**proto), data


def calibration_record(protocol, trials, min_monotone, min_tricyl_wins):
    return {
        "protocol": asdict(protocol),
        "thresholds": {"min_monotone": min_monotone, "min_tricyl_wins": min_tricyl_wins, "trials": len(trials)},
        "seeds": [t.seed for t in trials],
        "observed": {
            "monotone": sum(t.monotone for t in trials),
            "tricyl_wins_high": sum(t.tricyl_wins_high for t in trials),
        },
        "trials": [
            {
                "seed": t.seed,
                "equirect_bins": t.equirect_bins,
                "tricyl_bins": t.tricyl_bins,
                "equirect_high": t.equirect_high,
                "tricyl_high": t.tricyl_high,
            }
            for t in trials
        ],
    }


# ---------------------------------------------------------------------------
# edit propagation


def _to_pixel(spec, d):
    theta, phi = dir_to_spherical(d)
    return (theta + np.pi) / (2 * np.pi) * spec.width - 0.5, (np.pi / 2 - phi) / np.pi * spec.height - 0.5


def edit_drift_trial(seed, frames=30, width=512, radius=6, schedule="city"):
    """Carry a disc sprite stuck on a surface through ground-truth backward flows.

    The reference track follows the 3-D surface point under the sprite's
    centre analytically.  Returns per-frame (centroid, reference, error px).
    """
    spec = pj.ProjectionSpec.equirect(width)
    scene = synth.build_scene(synth.DatasetConfig(schedule=schedule, pairs=frames, seed=seed, width=width))
    img0, depth, ids = synth.render_frame(scene, 0, spec, aux=True)
    # anchor on the deepest interior point of the largest non-ground object region
    cand = (ids > 0) if schedule == "city" else (ids >= 0)
    labels = np.where(cand, ids, -1)
    best = None
    for k in np.unique(labels[labels >= 0]):
        inside = ndimage.distance_transform_edt(np.pad(labels == k, 1))[1:-1, 1:-1]
        yx = np.unravel_index(np.argmax(inside), inside.shape)
        if best is None or inside[yx] > best[0]:
            best = (inside[yx], yx, k)
    _, (cy, cx), k = best
    cam0 = scene.camera[0]
    d_world = cam0.dirs_to_world(pj.pixel_map(spec).dirs[cy, cx][None])[0]
    hit = cam0.position + depth[cy, cx] * d_world
    local = scene.objects[k].poses[0].apply_inverse(hit[None])

    layer = edit.place_sprite(spec.shape, edit.disc_sprite(radius), cx, cy)
    track = []
    for t in range(frames + 1):
        if t > 0:
            back = synth.ground_truth_flow(scene, t, spec, target_index=t - 1)
            layer = edit.advance_layer(layer, back)
        world = scene.objects[k].poses[t].apply(local)[0]
        ref = _to_pixel(spec, normalize(scene.camera[t].to_camera(world[None])[0]))
        cen = edit.layer_centroid(spec, layer)
        if cen is None:
            track.append((None, ref, float("inf")))
            continue
        dx = (cen[0] - ref[0] + width / 2) % width - width / 2
        track.append((cen, (float(ref[0]), float(ref[1])), float(np.hypot(dx, cen[1] - ref[1]))))
    return track
