"""Guide channels steering exemplar-to-frame patch matching.

A guide stack pairs a source frame (the exemplar) with a target frame and
carries three aligned channel groups: appearance (masked RGB), positional
(normalized expected source coordinates), and a soft segmentation mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .images import masked

SHEPARD_EPS = 1.0  # squared pixels, keeps weights finite on landmarks
DEFAULT_SEG_BLUR = 3


@dataclass
class GuideWeights:
    appearance: float = 2.0
    positional: float = 1.0
    segmentation: float = 1.5
    style: float = 1.0

    def validate(self) -> None:
        vals = (self.appearance, self.positional, self.segmentation, self.style)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"guide weights must be finite and >= 0, got {vals}")
        if all(v == 0 for v in vals):
            raise ValueError("guide weights must not all be zero")


@dataclass
class WarpField:
    """Dense map from target pixels to real-valued source coordinates.

    map has shape (H, W, 2) ordered (x, y), clamped to source bounds.
    """
    width: int
    height: int
    map: np.ndarray

    def validate(self) -> None:
        if self.map.shape != (self.height, self.width, 2):
            raise ValueError(f"warp map shape {self.map.shape} != ({self.height}, {self.width}, 2)")
        if not np.isfinite(self.map).all():
            raise ValueError("warp map has non-finite coordinates")


@dataclass
class GuideStack:
    appearance_src: np.ndarray   # (H, W, 3)
    appearance_tgt: np.ndarray
    positional_src: np.ndarray   # (H, W, 2), [0, 1]
    positional_tgt: np.ndarray
    seg_src: np.ndarray          # (H, W), [0, 1]
    seg_tgt: np.ndarray
    weights: GuideWeights

    @property
    def shape(self) -> tuple[int, int]:
        return self.appearance_src.shape[:2]

    def validate(self) -> None:
        h, w = self.appearance_src.shape[:2]
        named = {
            "appearance_src": (self.appearance_src, 3), "appearance_tgt": (self.appearance_tgt, 3),
            "positional_src": (self.positional_src, 2), "positional_tgt": (self.positional_tgt, 2),
            "seg_src": (self.seg_src, 0), "seg_tgt": (self.seg_tgt, 0),
        }
        for name, (arr, ch) in named.items():
            expect = (h, w) if ch == 0 else (h, w, ch)
            if arr.shape != expect:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expect}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} has non-finite values")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
        self.weights.validate()


def positional_guide(src_landmarks: np.ndarray, tgt_landmarks: np.ndarray,
                     size: tuple[int, int]) -> WarpField:
    """Shepard-interpolated warp from landmark correspondences.

    Every target pixel p maps to p plus the inverse-distance-squared weighted
    mean of the landmark displacements (source minus target), with weights
    1 / (|p - l_tgt|^2 + 1). Exact for global translations. size is (W, H);
    the result is clamped to source bounds.
    """
    src = np.asarray(src_landmarks, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(tgt_landmarks, dtype=np.float64).reshape(-1, 2)
    if src.shape[0] == 0:
        raise ValueError("positional_guide needs at least one landmark")
    if src.shape != tgt.shape:
        raise ValueError(f"landmark count mismatch: {src.shape[0]} vs {tgt.shape[0]}")
    w, h = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xs, ys], axis=-1)                      # (H, W, 2)
    disp = src - tgt                                       # (L, 2)
    d2 = ((pix[:, :, None, :] - tgt[None, None, :, :]) ** 2).sum(-1)  # (H, W, L)
    wgt = 1.0 / (d2 + SHEPARD_EPS)
    offs = (wgt[..., None] * disp[None, None]).sum(axis=2) / wgt.sum(axis=2, keepdims=False)[..., None]
    coords = pix + offs
    coords[..., 0] = np.clip(coords[..., 0], 0.0, w - 1.0)
    coords[..., 1] = np.clip(coords[..., 1], 0.0, h - 1.0)
    field = WarpField(width=w, height=h, map=coords)
    field.validate()
    return field


def segmentation_guide(mask: np.ndarray, blur_radius: int = DEFAULT_SEG_BLUR) -> np.ndarray:
    """Soften a mask with a normalized box filter of the given radius."""
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ValueError(f"segmentation_guide expects a single-channel mask, got shape {arr.shape}")
    if blur_radius < 0:
        raise ValueError("blur_radius must be >= 0")
    if blur_radius == 0:
        return arr.copy()
    out = uniform_filter(arr, size=2 * blur_radius + 1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def build_guides(src_image: np.ndarray, src_mask: np.ndarray, src_landmarks: np.ndarray,
                 tgt_image: np.ndarray, tgt_mask: np.ndarray, tgt_landmarks: np.ndarray,
                 weights: GuideWeights | None = None,
                 blur_radius: int = DEFAULT_SEG_BLUR,
                 background: float = 1.0) -> GuideStack:
    """Assemble the full guide stack for one (exemplar, target) frame pair.

    Appearance channels are the masked images; positional channels hold
    normalized coordinates (each source pixel's own position, and the Shepard
    warp destination for target pixels); segmentation channels are the
    box-blurred masks.
    """
    weights = weights or GuideWeights()
    h, w = np.asarray(tgt_image).shape[:2]
    if np.asarray(src_image).shape[:2] != (h, w):
        raise ValueError("source and target frames must share one resolution")

    app_src = masked(src_image, src_mask, background)
    app_tgt = masked(tgt_image, tgt_mask, background)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = np.array([w, h], dtype=np.float64)
    pos_src = np.stack([xs, ys], axis=-1) / denom
    warp = positional_guide(src_landmarks, tgt_landmarks, (w, h))
    pos_tgt = warp.map / denom

    stack = GuideStack(
        appearance_src=app_src, appearance_tgt=app_tgt,
        positional_src=pos_src, positional_tgt=pos_tgt,
        seg_src=segmentation_guide(src_mask, blur_radius),
        seg_tgt=segmentation_guide(tgt_mask, blur_radius),
        weights=weights,
    )
    stack.validate()
    return stack


def warp_image(image: np.ndarray, field: WarpField) -> np.ndarray:
    """Resample an image through a warp field (bilinear)."""
    from .images import bilinear_sample

    return bilinear_sample(image, field.map)
