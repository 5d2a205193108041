"""Objective quality proxies: temporal consistency, sharpness, and PSNR.

Human ratings of edited avatars are not reproducible, so reports use two
documented stand-ins: temporal consistency is the mean masked color error
between a frame and its successor warped back through the landmark warp
(lower is better, range [0, sqrt(3)]); sharpness is the variance of a 3x3
Laplacian of luma inside the mask (higher is sharper).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .guides import positional_guide, warp_image
from .images import to_gray

PSNR_CAP_DB = 99.0
LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                      [1.0, -4.0, 1.0],
                      [0.0, 1.0, 0.0]])


@dataclass
class MetricReport:
    temporal_consistency: float | None = None
    temporal_consistency_per_pair: list = dataclass_field(default_factory=list)
    sharpness: float | None = None
    sharpness_per_frame: list = dataclass_field(default_factory=list)
    psnr: float | None = None
    psnr_per_frame: list = dataclass_field(default_factory=list)
    notes: str = ("temporal_consistency: mean masked color error against the "
                  "landmark-warped next frame, lower is better; sharpness: "
                  "masked Laplacian variance, higher is sharper. Both are "
                  "objective proxies, not calibrated to human ratings.")

    def to_dict(self) -> dict:
        return {
            "temporal_consistency": self.temporal_consistency,
            "temporal_consistency_per_pair": self.temporal_consistency_per_pair,
            "sharpness": self.sharpness,
            "sharpness_per_frame": self.sharpness_per_frame,
            "psnr": self.psnr,
            "psnr_per_frame": self.psnr_per_frame,
            "notes": self.notes,
        }

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def save_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame", "temporal_consistency_pair", "sharpness", "psnr"])
            n = max(len(self.temporal_consistency_per_pair) + 1,
                    len(self.sharpness_per_frame), len(self.psnr_per_frame))
            for i in range(n):
                tc = (self.temporal_consistency_per_pair[i]
                      if i < len(self.temporal_consistency_per_pair) else "")
                sh = self.sharpness_per_frame[i] if i < len(self.sharpness_per_frame) else ""
                ps = self.psnr_per_frame[i] if i < len(self.psnr_per_frame) else ""
                writer.writerow([i, tc, sh, ps])


def pairwise_consistency(frame_a: np.ndarray, frame_b: np.ndarray, mask_a: np.ndarray,
                         landmarks_a: np.ndarray, landmarks_b: np.ndarray) -> float:
    """Mean Euclidean color error of frame_a against frame_b warped into
    frame_a's geometry, over frame_a's mask."""
    h, w = np.asarray(frame_a).shape[:2]
    warp = positional_guide(landmarks_b, landmarks_a, (w, h))
    warped = warp_image(np.atleast_3d(frame_b), warp)
    diff = np.atleast_3d(frame_a) - warped
    err = np.sqrt((diff ** 2).sum(axis=-1))
    sel = np.asarray(mask_a) > 0.5
    if not sel.any():
        raise ValueError("empty mask")
    return float(err[sel].mean())


def temporal_consistency(frames: list, masks: list, landmark_tracks: list) -> MetricReport:
    """Mean over consecutive pairs of the landmark-warped masked color error."""
    if len(frames) < 2:
        raise ValueError("temporal_consistency needs at least 2 frames")
    if not (len(frames) == len(masks) == len(landmark_tracks)):
        raise ValueError("frames, masks, and landmark tracks must align")
    pairs = [pairwise_consistency(frames[i], frames[i + 1], masks[i],
                                  landmark_tracks[i], landmark_tracks[i + 1])
             for i in range(len(frames) - 1)]
    return MetricReport(temporal_consistency=float(np.mean(pairs)),
                        temporal_consistency_per_pair=pairs)


def sharpness(image: np.ndarray, mask: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian of luma over masked pixels."""
    sel = np.asarray(mask) > 0.5
    if not sel.any():
        raise ValueError("empty mask")
    responses = convolve(to_gray(np.asarray(image, dtype=np.float64)), LAPLACIAN, mode="nearest")
    return float(responses[sel].var())


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) in dB over (optionally masked) pixels, capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    if mask is not None:
        sel = np.asarray(mask) > 0.5
        if not sel.any():
            raise ValueError("empty mask")
        a, b = a[sel], b[sel]
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))
