"""Unit-sphere geometry shared by every projection.

Directions are numpy arrays with a trailing axis of length 3 (x, y, z).
+y is up, longitude ``theta`` runs from +x toward +z, latitude ``phi`` is
positive above the equator.  Everything is in radians.
"""
import numpy as np

TWO_PI = 2.0 * np.pi
HALF_PI = 0.5 * np.pi


def normalize(d):
    d = np.asarray(d, dtype=np.float64)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def wrap_angle(theta):
    """Wrap a longitude into [-pi, pi)."""
    return np.mod(np.asarray(theta, dtype=np.float64) + np.pi, TWO_PI) - np.pi


def wrap_delta_theta(dt):
    """Wrap a longitude difference into (-pi, pi], taking the short way round."""
    return np.pi - np.mod(np.pi - np.asarray(dt, dtype=np.float64), TWO_PI)


def dir_to_spherical(d):
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    theta = wrap_angle(np.arctan2(z, x))
    phi = np.arctan2(y, np.hypot(x, z))
    return theta, phi


def spherical_to_dir(theta, phi):
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    c = np.cos(phi)
    return np.stack([c * np.cos(theta), np.sin(phi), c * np.sin(theta)], axis=-1)


def great_circle_angle(a, b):
    """Angle between unit vectors, atan2 form (accurate for tiny and near-pi angles)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.arctan2(cross, dot)


def rotation_matrix(axis, angle):
    """Right-handed rotation about ``axis`` (Rodrigues)."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def yaw_matrix(angle):
    """Rotation about +y that increases longitude by ``angle``."""
    # rotating about +y by a positive angle moves +x toward -z, so negate
    return rotation_matrix([0.0, 1.0, 0.0], -angle)
