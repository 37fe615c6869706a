"""Edit propagation: carry an RGBA layer through a video with backward flow."""
import numpy as np

from . import projections as pj
from .flowfield import warp_image
from .sphere import dir_to_spherical, normalize


def disc_sprite(radius, color=(1.0, 0.2, 0.1), softness=1.0):
    """RGBA disc with a soft edge, (2r+1) pixels square."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    alpha = np.clip((r + 0.5 - np.hypot(xx, yy)) / max(softness, 1e-6), 0.0, 1.0)
    rgba = np.empty((2 * r + 1, 2 * r + 1, 4))
    rgba[..., :3] = color
    rgba[..., 3] = alpha
    return rgba


def place_sprite(shape, sprite, cx, cy):
    """Empty RGBA layer of ``shape`` with ``sprite`` centred at integer pixel (cx, cy).

    Columns wrap around the longitude seam; rows outside the image are dropped.
    """
    H, W = shape
    layer = np.zeros((H, W, 4))
    h, w = sprite.shape[:2]
    rows = np.arange(h) + int(cy) - h // 2
    cols = np.mod(np.arange(w) + int(cx) - w // 2, W)
    keep = (rows >= 0) & (rows < H)
    layer[np.ix_(rows[keep], cols)] = sprite[keep]
    return layer


def composite(frame, layer):
    frame = np.asarray(frame, dtype=np.float64)[..., :3]
    a = layer[..., 3:4]
    return frame * (1.0 - a) + layer[..., :3] * a


def advance_layer(layer, back_flow):
    """Pull the layer from frame t into frame t+1 using flow t+1 -> t."""
    warped, ok = warp_image(layer, back_flow)
    warped[~ok] = 0.0
    return warped


def layer_centroid(spec, layer, threshold=1e-3):
    """Alpha-weighted mean direction of the layer as subpixel equirect (x, y), or None if empty."""
    alpha = layer[..., 3]
    if alpha.sum() <= threshold:
        return None
    dirs = pj.pixel_map(spec).dirs
    mean_dir = normalize(np.tensordot(alpha, dirs, axes=([0, 1], [0, 1])))
    theta, phi = dir_to_spherical(mean_dir)
    x = (theta + np.pi) / (2 * np.pi) * spec.width - 0.5
    y = (np.pi / 2 - phi) / np.pi * spec.height - 0.5
    return float(np.mod(x + 0.5, spec.width) - 0.5), float(y)


def propagate(frames, back_flows, layer):
    """Composite ``layer`` onto frames[0] and carry it through the sequence.

    ``back_flows[k]`` maps frame k+1 to frame k.  Yields (edited frame,
    layer) per frame, starting with the anchor.
    """
    if len(back_flows) < len(frames) - 1:
        raise ValueError(f"need {len(frames) - 1} backward flows, got {len(back_flows)}")
    yield composite(frames[0], layer), layer
    for k in range(1, len(frames)):
        layer = advance_layer(layer, back_flows[k - 1])
        yield composite(frames[k], layer), layer
