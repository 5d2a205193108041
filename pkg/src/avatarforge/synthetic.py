"""Synthetic fixtures: a known deformable toy avatar and simple translating
textures, written out as loadable datasets with exact tracked parameters.

The toy avatar is a textured opaque sphere with two displacement blendshapes.
Frames are rendered from a ground-truth model, so fitting code can be checked
against a scene it can represent exactly; landmarks are projections of fixed
surface anchors carried through the deformation, so guide warps and the
temporal-consistency metric see exact correspondences.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .avatar import AvatarModel, DeformationBasis, RadianceGrid, deform, render_rays
from .camera import image_rays, look_at, project
from .dataset import FrameDataset, FrameRecord, Intrinsics, load_dataset, write_manifest
from .images import save_image

SPHERE_RADIUS = 0.55


def _grid_coords(resolution: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def make_toy_avatar(resolution: int = 32, coeff_count: int = 2,
                    deform_resolution: int = 8, blendshapes: str = "bumps",
                    texture_freq: float = 1.0) -> AvatarModel:
    """Ground-truth model: textured opaque sphere plus two blendshapes.

    blendshapes "bumps" gives two localized displacement bumps; "drift" keeps
    the mouth bump as coefficient 0 and makes coefficient 1 a global
    translation, so frame-to-frame motion is exactly landmark-warpable.
    texture_freq scales the color pattern frequency (higher is busier and
    more ambiguous for patch matching).
    """
    g = _grid_coords(resolution)
    dist = np.linalg.norm(g, axis=-1)
    density_raw = np.clip((SPHERE_RADIUS - dist) * 150.0, -10.0, 20.0)
    f = texture_freq
    color_raw = np.stack([
        1.6 * np.sin(4.0 * f * g[..., 0]) * np.cos(3.0 * f * g[..., 1]) + 0.7 * np.sin(8.0 * f * g[..., 2]),
        1.4 * np.cos(5.0 * f * g[..., 1] + 2.0 * f * g[..., 2]) + 0.6 * np.sin(7.0 * f * g[..., 0]),
        1.5 * np.sin(3.0 * f * g[..., 0] + 4.0 * f * g[..., 2]) + 0.5 * np.cos(6.0 * f * g[..., 1]),
    ], axis=-1)
    grid = RadianceGrid(resolution=resolution, density_raw=density_raw, color_raw=color_raw)

    gd = _grid_coords(deform_resolution)
    basis = np.zeros((coeff_count, deform_resolution, deform_resolution, deform_resolution, 3))
    # the lower-lip bump displaces observed content away from the upper lip,
    # so larger e[0] reads as a wider-open mouth
    centers = [np.array([0.0, 0.3, -0.35]), np.array([0.25, -0.2, -0.35])]
    axes = [np.array([0.0, -0.14, 0.0]), np.array([0.12, 0.0, 0.04])]
    for k in range(coeff_count):
        c = centers[k % len(centers)]
        bump = np.exp(-((gd - c) ** 2).sum(-1) / (2 * 0.45 ** 2))
        basis[k] = bump[..., None] * axes[k % len(axes)]
    if blendshapes == "drift" and coeff_count >= 2:
        basis[1] = np.broadcast_to(np.array([0.20, 0.12, 0.0]), basis[1].shape)
    return AvatarModel(grid=grid,
                       basis=DeformationBasis(coeff_count=coeff_count,
                                              resolution=deform_resolution, grids=basis))


def _anchor_points() -> np.ndarray:
    """Fixed canonical surface anchors on the camera-facing hemisphere.

    Index 2 is the upper-lip anchor and index 3 the lower-lip anchor used by
    exemplar selection in the toy fixtures.
    """
    xy = np.array([
        [-0.28, -0.25], [0.28, -0.25],
        [0.0, 0.18], [0.0, 0.34],
        [-0.3, 0.12], [0.3, 0.12],
        [0.0, 0.0], [0.0, -0.3],
        [-0.16, 0.28], [0.16, 0.28],
    ])
    z = -np.sqrt(SPHERE_RADIUS ** 2 - (xy ** 2).sum(-1)) - 0.01
    return np.concatenate([xy, z[:, None]], axis=1)


def _observed_anchors(model: AvatarModel, e: np.ndarray) -> np.ndarray:
    """Invert the deformation for the anchors by fixed-point iteration."""
    canonical = _anchor_points()
    observed = canonical.copy()
    for _ in range(8):
        observed = canonical - (deform(model.basis, observed, e) - observed)
    return observed


def orbit_pose(azimuth: float, elevation: float = 0.0, radius: float = 2.4) -> np.ndarray:
    eye = radius * np.array([np.sin(azimuth) * np.cos(elevation),
                             np.sin(elevation),
                             -np.cos(azimuth) * np.cos(elevation)])
    return look_at(eye, (0.0, 0.0, 0.0))


def render_view(model: AvatarModel, intr: Intrinsics, pose: np.ndarray, e: np.ndarray,
                n_samples: int = 96, seed: int = 0):
    """Render color and alpha (1 - residual transmittance) for one view."""
    origins, dirs = image_rays(intr, pose)
    cache: dict = {}
    colors = render_rays(model, origins, dirs, e, n_samples=n_samples, seed=seed, _cache=cache)
    alpha = np.zeros(len(origins))
    alpha[cache["idx"]] = 1.0 - cache["residual"]
    h, w = intr.height, intr.width
    return np.clip(colors.reshape(h, w, 3), 0, 1), alpha.reshape(h, w)


def make_toy_dataset(root: str | Path, n_frames: int = 20, size: int = 64,
                     resolution: int = 32, n_samples: int = 96, seed: int = 0,
                     expression_scale: float = 1.0, azimuth_span: float = 0.45,
                     open_mouth_frame: int | None = None,
                     blendshapes: str = "bumps",
                     texture_freq: float = 1.0) -> tuple[FrameDataset, AvatarModel]:
    """Write a toy head-video dataset rendered from a known avatar.

    Poses sweep an orbit arc, expressions vary smoothly, and one frame (the
    widest lip gap) is emphasized so exemplar selection has a unique argmax.
    Returns the loaded dataset and the ground-truth model.
    """
    root = Path(root)
    model = make_toy_avatar(resolution=resolution, blendshapes=blendshapes,
                            texture_freq=texture_freq)
    intr = Intrinsics(fx=1.6 * size, fy=1.6 * size, cx=size / 2, cy=size / 2,
                      width=size, height=size)
    open_mouth_frame = n_frames // 2 if open_mouth_frame is None else open_mouth_frame

    # expressions are drawn independently of the pose sweep so deformation
    # cannot alias into view coverage
    rng = np.random.default_rng(seed + 17)
    e1_lo = -1.0 if blendshapes == "drift" else -0.4
    e1_hi = 1.0 if blendshapes == "drift" else 0.4
    e_all = np.column_stack([rng.uniform(0.0, 1.0, n_frames),
                             rng.uniform(e1_lo, e1_hi, n_frames)]) * expression_scale
    records = []
    for i in range(n_frames):
        phase = i / max(n_frames - 1, 1)
        azimuth = azimuth_span * (2.0 * phase - 1.0)
        elevation = 0.27 * azimuth_span * np.sin(2 * np.pi * phase)
        pose = orbit_pose(azimuth, elevation)
        e = e_all[i].copy()
        if i == open_mouth_frame:
            e[0] = 1.35 * expression_scale
        color, alpha = render_view(model, intr, pose, e, n_samples=n_samples, seed=seed)
        mask = (alpha > 0.5).astype(np.float64)
        save_image(color, root / "frames" / f"{i:06d}.png")
        save_image(mask, root / "masks" / f"{i:06d}.png")
        landmarks = project(intr, pose, _observed_anchors(model, e))
        landmarks[:, 0] = np.clip(landmarks[:, 0], 0, intr.width - 1)
        landmarks[:, 1] = np.clip(landmarks[:, 1], 0, intr.height - 1)
        records.append(FrameRecord(index=i, image_path=f"frames/{i:06d}.png",
                                   mask_path=f"masks/{i:06d}.png", pose=pose,
                                   expression=e, landmarks=landmarks))
    ds = FrameDataset(root=root, intrinsics=intr, frames=records, fps=25.0)
    write_manifest(ds, root / "manifest.json")
    return load_dataset(root), model


LIP_LANDMARKS = (2, 3)


def smooth_noise(shape: tuple[int, int], seed: int, sigma: float = 3.0) -> np.ndarray:
    """Band-limited random RGB texture in [0, 1]."""
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.uniform(size=shape + (3,)), sigma=(sigma, sigma, 0))
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo)


def make_translation_dataset(root: str | Path, n_frames: int = 4,
                             size: tuple[int, int] = (64, 48), max_shift: int = 10,
                             seed: int = 7) -> FrameDataset:
    """Textured window sliding over a larger canvas: exact integer motion,
    exact landmarks, an elliptical mask riding along with the content.

    Relative translations between frames stay within max_shift pixels.
    """
    root = Path(root)
    w, h = size
    margin = max_shift + 2
    canvas = smooth_noise((h + 2 * margin, w + 2 * margin), seed)
    rng = np.random.default_rng(seed + 1)
    half = max_shift // 2
    offsets = np.column_stack([
        np.rint(np.linspace(-half, half, n_frames)),
        np.rint(rng.uniform(-half, half, size=n_frames))]).astype(int)
    offsets[0] = (0, 0)

    yy, xx = np.mgrid[0:h + 2 * margin, 0:w + 2 * margin].astype(np.float64)
    cy, cx = margin + h / 2, margin + w / 2
    ell = ((xx - cx) / (w * 0.30)) ** 2 + ((yy - cy) / (h * 0.32)) ** 2
    canvas_mask = (ell <= 1.0).astype(np.float64)
    base_lm = np.array([[cx, cy], [cx - w * 0.18, cy - h * 0.15], [cx + w * 0.18, cy - h * 0.15],
                        [cx, cy + h * 0.2], [cx - w * 0.15, cy + h * 0.12], [cx + w * 0.15, cy + h * 0.12]])

    intr = Intrinsics(fx=100.0, fy=100.0, cx=w / 2, cy=h / 2, width=w, height=h)
    records = []
    for i, (ox, oy) in enumerate(offsets):
        top, left = margin + oy, margin + ox
        frame = canvas[top:top + h, left:left + w]
        mask = canvas_mask[top:top + h, left:left + w]
        lm = base_lm - np.array([left, top])
        save_image(frame, root / "frames" / f"{i:06d}.png")
        save_image(mask, root / "masks" / f"{i:06d}.png")
        records.append(FrameRecord(index=i, image_path=f"frames/{i:06d}.png",
                                   mask_path=f"masks/{i:06d}.png", pose=np.eye(4),
                                   expression=np.zeros(1), landmarks=lm))
    ds = FrameDataset(root=root, intrinsics=intr, frames=records, fps=25.0)
    write_manifest(ds, root / "manifest.json")
    return load_dataset(root)
