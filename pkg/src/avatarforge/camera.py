"""Pinhole ray generation and projection.

Poses are 4x4 camera-to-world transforms (row-major storage); the camera
looks along its +z axis, +x right, +y down, matching image rows growing
downward. Continuous pixel coordinates place the center of pixel (col, row)
at (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import numpy as np

from .dataset import Intrinsics


def pixel_rays(intr: Intrinsics, pose: np.ndarray, cols: np.ndarray, rows: np.ndarray):
    """World-space origins and unit directions through given pixel centers."""
    x = (np.asarray(cols, dtype=np.float64) + 0.5 - intr.cx) / intr.fx
    y = (np.asarray(rows, dtype=np.float64) + 0.5 - intr.cy) / intr.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    rot = pose[:3, :3]
    d = d_cam @ rot.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose[:3, 3], d.shape)
    return np.ascontiguousarray(o), d


def image_rays(intr: Intrinsics, pose: np.ndarray, width: int | None = None, height: int | None = None):
    """Rays through every pixel center, row-major; shapes (H*W, 3)."""
    w = width or intr.width
    h = height or intr.height
    rows, cols = np.mgrid[0:h, 0:w]
    return pixel_rays(intr, pose, cols.reshape(-1), rows.reshape(-1))


def project(intr: Intrinsics, pose: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Project world points to continuous pixel coordinates (x, y)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = pose[:3, :3]
    cam = (pts - pose[:3, 3]) @ rot  # R^T (X - t)
    z = cam[:, 2]
    if np.any(z <= 1e-9):
        raise ValueError("point behind camera")
    return np.stack([intr.fx * cam[:, 0] / z + intr.cx,
                     intr.fy * cam[:, 1] / z + intr.cy], axis=-1)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose with the camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    dist = np.linalg.norm(fwd)
    if dist < 1e-12:
        raise ValueError("look_at: eye and target coincide")
    fwd = fwd / dist
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up / np.linalg.norm(up))) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(fwd, up)
    x /= np.linalg.norm(x)
    y = np.cross(fwd, x)
    pose = np.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose


def ray_box_intersect(origins: np.ndarray, dirs: np.ndarray, lo: float = -1.0, hi: float = 1.0):
    """Slab test against an axis-aligned cube; returns (t_near, t_far, hit).

    t_near is clamped to 0 so origins inside the box behave correctly.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    # Degenerate (zero) direction components: the slab is hit iff the origin
    # coordinate is inside, otherwise missed.
    zero = np.abs(dirs) < 1e-12
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit
