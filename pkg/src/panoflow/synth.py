"""Analytic 360 scenes with exact ground-truth spherical flow.

A scene is a set of rigid primitives (sphere, box, ground plane) with one
pose per frame, plus a camera pose per frame.  Rendering ray-casts every
pixel direction; ground truth follows each hit point through the object
motion into the next camera and reads off its spherical coordinates.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import projections as pj
from .flowfield import FlowField, write_flow
from .imageio import write_pfm, write_png
from .sphere import dir_to_spherical, normalize, rotation_matrix, wrap_delta_theta

log = logging.getLogger(__name__)

SPHERE = "sphere"
BOX = "box"
PLANE = "plane"

LIGHT_DIR = normalize(np.array([0.4, 0.8, 0.3]))
AMBIENT = 0.45
DIFFUSE = 0.55
SKY_ZENITH = np.array([0.32, 0.48, 0.78])
SKY_HORIZON = np.array([0.78, 0.84, 0.90])
SKY_NADIR = np.array([0.35, 0.32, 0.30])


def _check_rotation(R, what):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"{what} rotation must be 3x3")
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
        raise ValueError(f"{what} rotation is not a proper orthonormal matrix")
    return R


@dataclass(frozen=True)
class RigidMotion:
    """Object-to-world transform: world = rotation @ local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "motion"))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts):
        return pts @ self.rotation.T + self.translation

    def apply_inverse(self, pts):
        return (pts - self.translation) @ self.rotation


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rotation and camera centre."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "camera"))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))

    def to_camera(self, pts):
        return (pts - self.position) @ self.rotation

    def dirs_to_world(self, dirs):
        return dirs @ self.rotation.T

    def dirs_to_camera(self, dirs):
        return dirs @ self.rotation


@dataclass(frozen=True)
class Texture:
    """Smooth procedural albedo in object-local coordinates.

    ``noise`` sums a few seeded plane waves; ``checker`` is a soft 3-D
    checker.  Both are band-limited so bilinear resampling stays faithful.
    """

    kind: str = "noise"
    color: tuple = (0.7, 0.5, 0.4)
    scale: float = 1.0
    contrast: float = 0.6
    seed: int = 0
    fog: float = 0.0  # distance scale for fading into the horizon colour, 0 disables

    def albedo(self, local_pts, dist=None):
        p = local_pts / self.scale
        if self.kind == "checker":
            pat = np.tanh(2.5 * np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 2]))
        else:
            rng = np.random.default_rng(self.seed)
            k = rng.normal(size=(6, 3))
            k *= (rng.uniform(1.0, 3.0, 6) * 2.0 * np.pi / np.linalg.norm(k, axis=1))[:, None]
            ph = rng.uniform(0, 2 * np.pi, 6)
            pat = np.sum(np.cos(p @ k.T + ph), axis=1) / 2.5
            pat = np.tanh(pat)
        col = np.asarray(self.color) * (1.0 + self.contrast * pat[:, None]) / (1.0 + self.contrast)
        if self.fog > 0 and dist is not None:
            f = np.exp(-dist / self.fog)[:, None]
            col = f * col + (1 - f) * SKY_HORIZON * 0.8
        return col


@dataclass
class SceneObject:
    primitive: str
    size: np.ndarray  # sphere: (r,), box: half extents, plane: unused
    texture: Texture
    poses: list  # RigidMotion per frame

    def __post_init__(self):
        if self.primitive not in (SPHERE, BOX, PLANE):
            raise ValueError(f"unknown primitive {self.primitive!r}")
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))

    def contains(self, world_pt, frame, margin=0.0):
        p = self.poses[frame].apply_inverse(np.asarray(world_pt, dtype=np.float64)[None])[0]
        if self.primitive == SPHERE:
            return np.linalg.norm(p) <= self.size[0] + margin
        if self.primitive == BOX:
            return bool(np.all(np.abs(p) <= self.size + margin))
        return p[1] <= margin

    def bound(self, frame):
        """World bounding sphere (centre, radius); None for planes."""
        if self.primitive == PLANE:
            return None
        r = self.size[0] if self.primitive == SPHERE else float(np.linalg.norm(self.size))
        return self.poses[frame].translation, r


@dataclass
class Scene:
    objects: list
    camera: list  # CameraPose per frame
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for t, cam in enumerate(self.camera):
            for k, obj in enumerate(self.objects):
                if len(obj.poses) != len(self.camera):
                    raise ValueError(f"object {k} has {len(obj.poses)} poses for {len(self.camera)} frames")
                if obj.contains(cam.position, t):
                    raise ValueError(f"camera is inside object {k} at frame {t}")

    @property
    def n_frames(self):
        return len(self.camera)


# ---------------------------------------------------------------------------
# ray casting


def _intersect(obj, pose, origin, dirs):
    """Ray parameter of the first hit (inf on miss) for world rays from ``origin``."""
    o = pose.apply_inverse(origin[None])[0]
    d = dirs @ pose.rotation
    n = len(dirs)
    if obj.primitive == SPHERE:
        r = obj.size[0]
        b = d @ o
        c = o @ o - r * r
        disc = b * b - c
        s = np.full(n, np.inf)
        hit = disc >= 0
        sq = np.sqrt(disc[hit])
        s0 = -b[hit] - sq
        s1 = -b[hit] + sq
        s[hit] = np.where(s0 > 1e-9, s0, np.where(s1 > 1e-9, s1, np.inf))
        return s
    if obj.primitive == BOX:
        h = obj.size
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        s = np.where((tmax >= tmin) & (tmin > 1e-9), tmin, np.inf)
        return s
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -o[1] / d[:, 1]
    return np.where(s > 1e-9, s, np.inf)


def _local_normal(obj, lp):
    if obj.primitive == SPHERE:
        return lp / np.linalg.norm(lp, axis=1, keepdims=True)
    if obj.primitive == BOX:
        q = np.abs(lp) / obj.size
        axis = np.argmax(q, axis=1)
        nrm = np.zeros_like(lp)
        nrm[np.arange(len(lp)), axis] = np.sign(lp[np.arange(len(lp)), axis])
        return nrm
    nrm = np.zeros_like(lp)
    nrm[:, 1] = 1.0
    return nrm


def trace(scene, frame, world_dirs, origin=None):
    """Nearest hit along world rays.  Returns (distance, object index or -1)."""
    if origin is None:
        origin = scene.camera[frame].position
    n = len(world_dirs)
    best = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        pose = obj.poses[frame]
        bnd = obj.bound(frame)
        if bnd is not None:
            c, r = bnd
            to_c = c - origin
            dist = np.linalg.norm(to_c)
            if dist > r:
                cos_cone = np.sqrt(max(0.0, 1.0 - (r / dist) ** 2))
                cand = np.nonzero(world_dirs @ (to_c / dist) >= cos_cone - 1e-9)[0]
            else:
                cand = np.arange(n)
        else:
            cand = np.arange(n)
        if cand.size == 0:
            continue
        s = _intersect(obj, pose, origin, world_dirs[cand])
        closer = s < best[cand]
        best[cand[closer]] = s[closer]
        idx[cand[closer]] = k
    return best, idx


def sky_color(world_dirs, contrast=0.0, seed=0):
    """Latitude gradient, optionally modulated by clouds fixed to world directions.

    The cloud pattern depends on direction only, so it sits at infinity and
    moves with pure camera rotation like the rest of the sky.
    """
    y = world_dirs[:, 1:2]
    up = SKY_HORIZON + (SKY_ZENITH - SKY_HORIZON) * np.clip(y, 0, 1)
    down = SKY_HORIZON * 0.8 + (SKY_NADIR - SKY_HORIZON * 0.8) * np.clip(-y, 0, 1)
    col = np.where(y >= 0, up, down)
    if contrast > 0:
        rng = np.random.default_rng(seed)
        k = rng.normal(size=(8, 3))
        k *= (rng.uniform(4.0, 12.0, 8) * 2.0 * np.pi / np.linalg.norm(k, axis=1))[:, None]
        ph = rng.uniform(0, 2 * np.pi, 8)
        pat = np.tanh(np.sum(np.cos(world_dirs @ k.T + ph), axis=1) / 2.5)
        col = col * (1.0 + contrast * pat[:, None]) / (1.0 + contrast)
    return col


def shade(scene, frame, world_dirs, dist, idx, origin=None):
    if origin is None:
        origin = scene.camera[frame].position
    out = sky_color(world_dirs, scene.meta.get("sky_contrast", 0.0), scene.meta.get("sky_seed", 0))
    for k in np.unique(idx[idx >= 0]):
        obj = scene.objects[k]
        pose = obj.poses[frame]
        sel = np.nonzero(idx == k)[0]
        wp = origin + dist[sel, None] * world_dirs[sel]
        lp = pose.apply_inverse(wp)
        nrm = _local_normal(obj, lp) @ pose.rotation.T
        lam = AMBIENT + DIFFUSE * np.clip(nrm @ LIGHT_DIR, 0.0, None)
        out[sel] = obj.texture.albedo(lp, dist[sel]) * lam[:, None]
    return out


def render_frame(scene, frame_index, spec, aux=False):
    """Render one frame into ``spec``; dead cube-padding pixels stay black.

    With ``aux=True`` also returns (depth, object id) maps; sky has depth
    inf and id -1.
    """
    pm = pj.pixel_map(spec)
    cam = scene.camera[frame_index]
    dirs = cam.dirs_to_world(pm.dirs[pm.valid])
    dist, idx = trace(scene, frame_index, dirs)
    img = np.zeros(spec.shape + (3,))
    img[pm.valid] = shade(scene, frame_index, dirs, dist, idx)
    if not aux:
        return img
    depth = np.full(spec.shape, np.inf)
    ids = np.full(spec.shape, -1, dtype=np.int64)
    depth[pm.valid] = dist
    ids[pm.valid] = idx
    return img, depth, ids


# ---------------------------------------------------------------------------
# ground truth


def flow_targets(scene, frame_a, frame_b, cam_dirs):
    """Where camera-frame directions at ``frame_a`` land at ``frame_b``.

    Returns (target camera directions at frame_b, object ids at frame_a,
    occluded flags).  Hits follow their object's motion; sky directions
    follow the camera rotation only.
    """
    cam_a = scene.camera[frame_a]
    cam_b = scene.camera[frame_b]
    world = cam_a.dirs_to_world(cam_dirs)
    dist, idx = trace(scene, frame_a, world)
    out = cam_b.dirs_to_camera(world)
    depth_b = np.full(len(cam_dirs), np.inf)
    for k in np.unique(idx[idx >= 0]):
        obj = scene.objects[k]
        sel = np.nonzero(idx == k)[0]
        X = cam_a.position + dist[sel, None] * world[sel]
        O = obj.poses[frame_a].apply_inverse(X)
        Xb = obj.poses[frame_b].apply(O)
        rel = cam_b.to_camera(Xb)
        depth_b[sel] = np.linalg.norm(rel, axis=1)
        out[sel] = rel / depth_b[sel, None]
    out = normalize(out)
    # second pass: is the moved point the nearest surface at frame_b?
    dist_b, _ = trace(scene, frame_b, cam_b.dirs_to_world(out))
    occluded = dist_b < depth_b * (1.0 - 1e-6) - 1e-9
    return out, idx, occluded


def ground_truth_flow(scene, frame_index, spec=None, target_index=None, with_occlusion=False):
    """Equirect ground-truth flow from ``frame_index`` to ``target_index`` (default next frame)."""
    if spec is None:
        spec = pj.ProjectionSpec.equirect(512)
    if spec.kind != pj.EQUIRECT:
        raise ValueError("ground truth flow is produced on an equirect grid")
    if target_index is None:
        target_index = frame_index + 1
    pm = pj.pixel_map(spec)
    d = pm.dirs.reshape(-1, 3)
    tgt, _, occ = flow_targets(scene, frame_index, target_index, d)
    th, ph = dir_to_spherical(d)
    th2, ph2 = dir_to_spherical(tgt)
    u = wrap_delta_theta(th2 - th).reshape(spec.shape)
    v = (ph2 - ph).reshape(spec.shape)
    flow = FlowField(spec, u, v, np.ones(spec.shape, dtype=bool))
    if with_occlusion:
        return flow, occ.reshape(spec.shape)
    return flow


# ---------------------------------------------------------------------------
# dataset schedules


def euler_rotation(yaw, pitch, roll):
    """Camera rotation from yaw (about +y), pitch (about +z) and roll (about +x)."""
    return (
        rotation_matrix([0, 1, 0], yaw)
        @ rotation_matrix([0, 0, 1], pitch)
        @ rotation_matrix([1, 0, 0], roll)
    )


@dataclass
class DatasetConfig:
    schedule: str = "eft"
    pairs: int = 8
    seed: int = 0
    width: int = 512
    n_objects: int = 30
    max_tilt_deg: float = 45.0  # city: bound on camera pitch/roll (and yaw swing)
    turn_rate_deg: float = 1.5  # eft: camera angular speed per frame
    flip_every: int = 20  # eft: frames between rotation-direction flips
    backward: bool = True
    sky_contrast: float = 0.5  # 0 gives a plain gradient sky

    def __post_init__(self):
        if self.schedule not in ("city", "eft"):
            raise ValueError(f"unknown schedule {self.schedule!r} (expected 'city' or 'eft')")
        if self.pairs < 1 or self.n_objects < 0:
            raise ValueError("pairs must be >= 1 and n_objects >= 0")


def _clear_of(objects, cams, candidate, margin):
    for t, cam in enumerate(cams):
        if candidate.contains(cam.position, t, margin=margin):
            return False
        c, r = candidate.bound(t)
        for other in objects:
            b = other.bound(t)
            if b is not None and np.linalg.norm(b[0] - c) < b[1] + r:
                return False
    return True


def _random_texture(rng, kind="noise", scale=1.0, fog=0.0):
    return Texture(kind, tuple(rng.uniform(0.25, 0.95, 3)), scale, rng.uniform(0.4, 0.8), int(rng.integers(2**31)), fog)


def city_scene(cfg, rng):
    """Ground plane, static buildings and boxes driving along the street grid."""
    n = cfg.pairs + 1
    tilt = np.deg2rad(cfg.max_tilt_deg)
    speed = rng.uniform(0.05, 0.15)
    amp = rng.uniform(0.3, 1.0, 3) * tilt
    freq = rng.uniform(0.02, 0.08, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    cams, euler = [], []
    for t in range(n):
        yaw, pitch, roll = amp * np.sin(freq * t + phase)
        euler.append((float(yaw), float(pitch), float(roll)))
        cams.append(CameraPose(euler_rotation(yaw, pitch, roll), [speed * t, 1.6, 0.0]))

    ground = SceneObject(PLANE, [0.0], _random_texture(rng, "checker", 2.0, fog=25.0), [RigidMotion.identity()] * n)
    objects = [ground]
    n_build = cfg.n_objects // 3
    tries = 0
    while len(objects) < 1 + cfg.n_objects and tries < 5000:
        tries += 1
        building = len(objects) - 1 < n_build
        if building:
            half = np.array([rng.uniform(1.5, 4), rng.uniform(2, 8), rng.uniform(1.5, 4)])
            r = rng.uniform(10, 30)
            vel = np.zeros(3)
        else:
            half = np.array([rng.uniform(0.7, 1.0), rng.uniform(0.6, 0.8), rng.uniform(1.6, 2.3)])
            r = rng.uniform(4, 18)
            vel = np.zeros(3)
            vel[rng.choice([0, 2])] = rng.choice([-1, 1]) * rng.uniform(0.05, 0.3)
        ang = rng.uniform(0, 2 * np.pi)
        c0 = np.array([r * np.cos(ang), half[1], r * np.sin(ang)])
        heading = 0.0 if building or vel[2] != 0 else np.pi / 2
        R = rotation_matrix([0, 1, 0], heading)
        poses = [RigidMotion(R, c0 + vel * t) for t in range(n)]
        cand = SceneObject(BOX, half, _random_texture(rng, scale=rng.uniform(0.8, 2.5)), poses)
        if _clear_of(objects[1:], cams, cand, margin=0.5):
            objects.append(cand)
    return Scene(objects, cams, {"schedule": "city", "euler": euler})


def eft_scene(cfg, rng):
    """Floating primitives with random rigid motions around a turning camera."""
    n = cfg.pairs + 1
    axis = normalize(rng.normal(size=3))
    rate = np.deg2rad(cfg.turn_rate_deg)
    signs = [(-1) ** (k // cfg.flip_every) for k in range(n - 1)]
    angles = np.concatenate([[0.0], np.cumsum(np.array(signs, dtype=np.float64) * rate)])
    drift = rng.normal(size=3) * 0.02
    cams = [CameraPose(rotation_matrix(axis, a), drift * t) for t, a in enumerate(angles)]

    objects = []
    tries = 0
    while len(objects) < cfg.n_objects and tries < 5000:
        tries += 1
        prim = SPHERE if rng.random() < 0.5 else BOX
        size = [rng.uniform(0.4, 1.4)] if prim == SPHERE else rng.uniform(0.3, 1.1, 3)
        c0 = normalize(rng.normal(size=3)) * rng.uniform(3.0, 10.0)
        vel = rng.normal(size=3) * 0.03
        w_axis = normalize(rng.normal(size=3))
        w = np.deg2rad(rng.uniform(-2.0, 2.0))
        R0 = rotation_matrix(normalize(rng.normal(size=3)), rng.uniform(0, np.pi))
        poses = [RigidMotion(rotation_matrix(w_axis, w * t) @ R0, c0 + vel * t) for t in range(n)]
        cand = SceneObject(prim, size, _random_texture(rng, scale=rng.uniform(0.5, 1.5)), poses)
        if _clear_of(objects, cams, cand, margin=0.5):
            objects.append(cand)
    return Scene(objects, cams, {"schedule": "eft", "axis": axis.tolist(), "signs": signs})


def build_scene(cfg):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    scene = city_scene(cfg, rng) if cfg.schedule == "city" else eft_scene(cfg, rng)
    scene.meta["sky_contrast"] = float(cfg.sky_contrast)
    scene.meta["sky_seed"] = int(rng.integers(2**31))
    return scene


def generate_dataset(cfg, out_dir, threads=1):
    """Render frames, ground-truth flows and occlusion masks; write a JSON-lines manifest.

    Returns the manifest path.  Output bytes depend only on ``cfg``.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory {out_dir!r} is not writable: {exc}") from exc

    scene = build_scene(cfg)
    spec = pj.ProjectionSpec.equirect(cfg.width)
    for sub in ("frames", "flows", "occlusion"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    def frame_job(t):
        path = os.path.join("frames", f"frame_{t:04d}.png")
        write_png(os.path.join(out_dir, path), render_frame(scene, t, spec))
        return path

    def pair_job(t):
        rec = {"index": t}
        flow, occ = ground_truth_flow(scene, t, spec, with_occlusion=True)
        rec["flow_ab"] = os.path.join("flows", f"flow_{t:04d}.sfl")
        write_flow(flow, os.path.join(out_dir, rec["flow_ab"]))
        rec["occlusion"] = os.path.join("occlusion", f"occ_{t:04d}.pfm")
        write_pfm(os.path.join(out_dir, rec["occlusion"]), occ.astype(np.float32))
        if cfg.backward:
            back = ground_truth_flow(scene, t + 1, spec, target_index=t)
            rec["flow_ba"] = os.path.join("flows", f"back_{t:04d}.sfl")
            write_flow(back, os.path.join(out_dir, rec["flow_ba"]))
        return rec

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        frames = list(pool.map(frame_job, range(scene.n_frames)))
        pairs = list(pool.map(pair_job, range(cfg.pairs)))

    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as f:
        for t, rec in enumerate(pairs):
            out = {
                "frame_a": frames[t],
                "frame_b": frames[t + 1],
                "flow_ab": rec["flow_ab"],
                "flow_ba": rec.get("flow_ba"),
                "occlusion": rec["occlusion"],
                "spec": str(spec),
                "seed": cfg.seed,
                "schedule": cfg.schedule,
                "pose_a": _pose_record(scene, t),
                "pose_b": _pose_record(scene, t + 1),
            }
            f.write(json.dumps(out, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "dataset_config.json"), "w") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)
    log.info("wrote %d pairs to %s", cfg.pairs, out_dir)
    return manifest


def _pose_record(scene, t):
    cam = scene.camera[t]
    rec = {"rotation": np.round(cam.rotation, 12).tolist(), "position": np.round(cam.position, 12).tolist()}
    if "euler" in scene.meta:
        rec["yaw_pitch_roll"] = list(scene.meta["euler"][t])
    return rec


def read_manifest(path):
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                rec["root"] = root
                records.append(rec)
    return records
