"""Frame dataset loading, validation, and persistence.

On-disk layout::

    root/manifest.json
    root/frames/000000.png   8-bit RGB
    root/masks/000000.png    8-bit grayscale

The manifest holds fps, pinhole intrinsics, and one record per frame with a
camera-to-world pose (16 numbers, row-major), an expression coefficient
vector, and 2D landmarks in pixel coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .images import load_image, save_image, validate_image

ROTATION_TOL = 1e-5


class DatasetError(ValueError):
    """Raised for manifest schema violations and missing files."""


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise DatasetError(f"intrinsics: focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width):
            raise DatasetError(f"intrinsics: cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise DatasetError(f"intrinsics: cy={self.cy} outside [0, {self.height})")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass
class FrameRecord:
    index: int
    image_path: str
    mask_path: str
    pose: np.ndarray          # 4x4 camera-to-world
    expression: np.ndarray    # (m,)
    landmarks: np.ndarray     # (L, 2) as (x, y) pixels

    def validate(self, intrinsics: Intrinsics) -> None:
        if self.pose.shape != (4, 4):
            raise DatasetError(f"pose must be 4x4 at frame {self.index}")
        rot = self.pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=ROTATION_TOL):
            raise DatasetError(f"pose rotation not orthonormal at frame {self.index}")
        if np.linalg.det(rot) < 0:
            raise DatasetError(f"pose rotation has negative determinant at frame {self.index}")
        if not np.allclose(self.pose[3], [0, 0, 0, 1], atol=1e-8):
            raise DatasetError(f"pose last row must be [0, 0, 0, 1] at frame {self.index}")
        lm = self.landmarks
        if lm.ndim != 2 or lm.shape[1] != 2:
            raise DatasetError(f"landmarks must be (L, 2) at frame {self.index}")
        if lm.size and (lm[:, 0].min() < 0 or lm[:, 0].max() >= intrinsics.width
                        or lm[:, 1].min() < 0 or lm[:, 1].max() >= intrinsics.height):
            raise DatasetError(f"landmark outside image bounds at frame {self.index}")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "image": self.image_path,
            "mask": self.mask_path,
            "pose": [float(v) for v in self.pose.reshape(-1)],
            "expression": [float(v) for v in self.expression],
            "landmarks": [[float(x), float(y)] for x, y in self.landmarks],
        }


@dataclass
class FrameDataset:
    root: Path
    intrinsics: Intrinsics
    frames: list[FrameRecord]
    fps: float = 25.0
    _image_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def expression_dim(self) -> int:
        return len(self.frames[0].expression) if self.frames else 0

    @property
    def landmark_count(self) -> int:
        return len(self.frames[0].landmarks) if self.frames else 0

    def image(self, i: int) -> np.ndarray:
        key = ("image", i)
        if key not in self._image_cache:
            self._image_cache[key] = load_image(self.root / self.frames[i].image_path)
        return self._image_cache[key]

    def mask(self, i: int) -> np.ndarray:
        key = ("mask", i)
        if key not in self._image_cache:
            self._image_cache[key] = load_image(self.root / self.frames[i].mask_path, grayscale=True)
        return self._image_cache[key]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DatasetError(f"manifest missing field '{key}' in {where}")
    return obj[key]


def load_dataset(root: str | Path) -> FrameDataset:
    """Load and fully validate a frame dataset from its manifest.

    Images stay on disk and are loaded lazily by index; their existence and
    common resolution are checked here.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest is not valid JSON: {exc}") from exc

    intr_doc = _require(doc, "intrinsics", "manifest")
    intr = Intrinsics(
        fx=float(_require(intr_doc, "fx", "intrinsics")),
        fy=float(_require(intr_doc, "fy", "intrinsics")),
        cx=float(_require(intr_doc, "cx", "intrinsics")),
        cy=float(_require(intr_doc, "cy", "intrinsics")),
        width=int(_require(intr_doc, "width", "intrinsics")),
        height=int(_require(intr_doc, "height", "intrinsics")),
    )
    intr.validate()
    fps = float(_require(doc, "fps", "manifest"))

    frames: list[FrameRecord] = []
    prev_index = None
    for pos, fr in enumerate(_require(doc, "frames", "manifest")):
        where = f"frame {pos}"
        pose = np.asarray(_require(fr, "pose", where), dtype=np.float64)
        if pose.size != 16:
            raise DatasetError(f"pose must have 16 numbers at {where}")
        rec = FrameRecord(
            index=int(_require(fr, "index", where)),
            image_path=str(_require(fr, "image", where)),
            mask_path=str(_require(fr, "mask", where)),
            pose=pose.reshape(4, 4),
            expression=np.asarray(_require(fr, "expression", where), dtype=np.float64),
            landmarks=np.asarray(_require(fr, "landmarks", where), dtype=np.float64).reshape(-1, 2),
        )
        rec.validate(intr)
        if prev_index is not None and rec.index <= prev_index:
            raise DatasetError(f"frame indices not strictly increasing at frame {pos}")
        prev_index = rec.index
        frames.append(rec)

    if frames:
        m = len(frames[0].expression)
        lcount = len(frames[0].landmarks)
        for pos, rec in enumerate(frames):
            if len(rec.expression) != m:
                raise DatasetError(f"inconsistent expression length at frame {pos}")
            if len(rec.landmarks) != lcount:
                raise DatasetError(f"inconsistent landmark count at frame {pos}")

    for pos, rec in enumerate(frames):
        for kind, rel in (("image", rec.image_path), ("mask", rec.mask_path)):
            path = root / rel
            if not path.is_file():
                raise DatasetError(f"missing {kind} file '{rel}' referenced by frame {pos}")
            with PILImage.open(path) as im:
                if im.size != (intr.width, intr.height):
                    raise DatasetError(
                        f"{kind} '{rel}' has size {im.size}, expected "
                        f"({intr.width}, {intr.height}) at frame {pos}")

    return FrameDataset(root=root, intrinsics=intr, frames=frames, fps=fps)


def write_manifest(dataset: FrameDataset, path: str | Path) -> None:
    doc = {
        "fps": dataset.fps,
        "intrinsics": dataset.intrinsics.to_dict(),
        "frames": [fr.to_dict() for fr in dataset.frames],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def save_frameset(dataset: FrameDataset, images: list[np.ndarray], out: str | Path, label: str) -> Path:
    """Persist a set of per-frame images as a loadable dataset.

    Images land at out/label/NNNNNN.png; masks are copied alongside under
    out/label/masks/ and a manifest pointing at the new files is written, so
    the result round-trips through load_dataset.
    """
    if len(images) != len(dataset.frames):
        raise DatasetError(f"image count {len(images)} does not match frame count {len(dataset.frames)}")
    dest = Path(out) / label
    dest.mkdir(parents=True, exist_ok=True)

    new_frames = []
    for i, (rec, img) in enumerate(zip(dataset.frames, images)):
        validate_image(img, f"frame {i}")
        name = f"{i:06d}.png"
        save_image(img, dest / name)
        mask_name = f"masks/{i:06d}.png"
        save_image(dataset.mask(i), dest / mask_name)
        new_frames.append(FrameRecord(
            index=rec.index, image_path=name, mask_path=mask_name,
            pose=rec.pose, expression=rec.expression, landmarks=rec.landmarks))

    out_ds = FrameDataset(root=dest, intrinsics=dataset.intrinsics, frames=new_frames, fps=dataset.fps)
    write_manifest(out_ds, dest / "manifest.json")
    return dest
