"""End-to-end avatar editing: select an exemplar, edit it once, propagate the
edit to every frame, train the avatar, and iterate the dataset update.

Cycle 0 stylizes the original masked frames; later cycles re-stylize renders
of the current avatar (appearance source and targets both move to the
rendered domain, while landmarks and masks stay fixed because poses and
expressions do not change). The external editor runs exactly once per full
run; the edited exemplar is reused unchanged every cycle. Edited frames are
persisted before training starts, and training reads them back from disk.

All randomness derives from one root seed.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .avatar import (AvatarModel, TrainConfig, render_dataset, render_image,
                     save_checkpoint, train)
from .dataset import FrameDataset, load_dataset, save_frameset
from .editor import DEFAULT_TIMEOUT, EditRequest, make_editor
from .guides import GuideWeights
from .images import masked, save_image
from .metrics import MetricReport, sharpness, temporal_consistency
from .rng import derive_seed
from .stylize import SynthesisParams, propagate_sequence
from .synthetic import orbit_pose

MODES = ("full", "one_seed_once", "ebsynth_once")


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"pipeline stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class EditDefaults:
    image_guidance: float = 1.5
    text_guidance: float = 3.5
    steps: int = 100


@dataclass
class PipelineConfig:
    cycles: int = 3
    mode: str = "full"
    editor: str = "mock:identity"
    edit: EditDefaults = field(default_factory=EditDefaults)
    synthesis: SynthesisParams = field(default_factory=SynthesisParams)
    guide_weights: GuideWeights = field(default_factory=GuideWeights)
    training: TrainConfig = field(default_factory=TrainConfig)
    exemplar_override: int | None = None
    resume_training: bool = True
    seed: int = 0
    lip_landmark_indices: tuple[int, int] | None = None
    grid_resolution: int = 64
    deform_resolution: int = 8
    editor_timeout: float = DEFAULT_TIMEOUT
    stylize_workers: int = 1

    def validate(self) -> "PipelineConfig":
        if self.cycles < 1:
            raise ValueError(f"cycles must be >= 1, got {self.cycles}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "full":
            self.cycles = 1
        self.synthesis.validate()
        self.training.validate()
        self.guide_weights.validate()
        return self

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lip_landmark_indices"] = (list(self.lip_landmark_indices)
                                       if self.lip_landmark_indices else None)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        if "edit" in doc and isinstance(doc["edit"], dict):
            doc["edit"] = EditDefaults(**doc["edit"])
        if "synthesis" in doc and isinstance(doc["synthesis"], dict):
            doc["synthesis"] = SynthesisParams(**doc["synthesis"])
        if "training" in doc and isinstance(doc["training"], dict):
            doc["training"] = TrainConfig(**doc["training"])
        if "guide_weights" in doc and isinstance(doc["guide_weights"], dict):
            doc["guide_weights"] = GuideWeights(**doc["guide_weights"])
        if doc.get("lip_landmark_indices") is not None:
            doc["lip_landmark_indices"] = tuple(doc["lip_landmark_indices"])
        if doc.get("mode"):
            doc["mode"] = doc["mode"].replace("-", "_")
        return cls(**doc)


@dataclass
class CycleArtifacts:
    cycle: int
    edited_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    edited_temporal_consistency: float


@dataclass
class PipelineState:
    dataset: FrameDataset
    model: AvatarModel
    exemplar_index: int
    edited_exemplar: np.ndarray
    out_dir: Path


@dataclass
class PipelineResult:
    checkpoint_path: Path
    previews_dir: Path
    report_path: Path
    cycles: list[CycleArtifacts]
    report: dict


def _stage(name: str):
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineStageError):
                raise PipelineStageError(name, exc) from exc
            return False

    return _Guard()


def select_exemplar(dataset: FrameDataset, lip_landmark_indices: tuple[int, int] | None = None,
                    exemplar_override: int | None = None) -> int:
    """Frame with the widest vertical lip-landmark gap (mouth most open);
    ties break to the lowest index; an override wins outright."""
    n = len(dataset.frames)
    if n == 0:
        raise ValueError("empty dataset")
    if exemplar_override is not None:
        if not (0 <= exemplar_override < n):
            raise ValueError(f"exemplar_override {exemplar_override} out of range for {n} frames")
        return exemplar_override
    if lip_landmark_indices is None:
        raise ValueError("missing lip-landmark designation: set lip_landmark_indices or exemplar_override")
    upper, lower = lip_landmark_indices
    lcount = dataset.landmark_count
    if not (0 <= upper < lcount and 0 <= lower < lcount):
        raise ValueError(f"lip landmark indices {lip_landmark_indices} out of range for {lcount} landmarks")
    gaps = [abs(fr.landmarks[lower][1] - fr.landmarks[upper][1]) for fr in dataset.frames]
    return int(np.argmax(gaps))


def _masked_originals(dataset: FrameDataset) -> list[np.ndarray]:
    return [masked(dataset.image(i), dataset.mask(i), 1.0) for i in range(len(dataset.frames))]


def _edited_set_metrics(dataset: FrameDataset, images: list[np.ndarray]) -> MetricReport:
    masks = [dataset.mask(i) for i in range(len(dataset.frames))]
    tracks = [fr.landmarks for fr in dataset.frames]
    report = temporal_consistency(images, masks, tracks)
    report.sharpness_per_frame = [sharpness(img, msk) for img, msk in zip(images, masks)]
    report.sharpness = float(np.mean(report.sharpness_per_frame))
    return report


def run_cycle(state: PipelineState, t: int, config: PipelineConfig) -> CycleArtifacts:
    """One dataset-update cycle: build targets, propagate the exemplar edit,
    persist the edited set, then train on the persisted frames."""
    ds = state.dataset
    with _stage(f"cycle {t}: build targets"):
        if t == 0:
            targets = _masked_originals(ds)
        else:
            targets = render_dataset(state.model, ds,
                                     n_samples=config.training.samples_per_ray,
                                     seed=derive_seed(config.seed, 5, t))
    with _stage(f"cycle {t}: propagate"):
        synth = replace(config.synthesis, rng_seed=derive_seed(config.seed, 2, t))
        edited = propagate_sequence(ds, state.exemplar_index, state.edited_exemplar,
                                    targets, synth, weights=config.guide_weights,
                                    workers=config.stylize_workers)
    with _stage(f"cycle {t}: persist edited frames"):
        edited_dir = save_frameset(ds, edited, state.out_dir, f"cycle_{t:03d}")
    with _stage(f"cycle {t}: train"):
        train_ds = load_dataset(edited_dir)
        train_images = [train_ds.image(i) for i in range(len(train_ds.frames))]
        tc = replace(config.training, rng_seed=derive_seed(config.seed, 3))
        resume = config.resume_training and t >= 1
        train(state.model, train_ds, train_images, tc, resume=resume)
    with _stage(f"cycle {t}: artifacts"):
        checkpoint_path = edited_dir / "checkpoint.avfc"
        save_checkpoint(state.model, checkpoint_path)
        report = _edited_set_metrics(ds, edited)
        metrics_path = edited_dir / "metrics.json"
        report.save(metrics_path)
    return CycleArtifacts(cycle=t, edited_dir=edited_dir, checkpoint_path=checkpoint_path,
                          metrics_path=metrics_path,
                          edited_temporal_consistency=report.temporal_consistency)


def _render_previews(state: PipelineState, config: PipelineConfig) -> Path:
    """Novel-view orbit and novel-expression sweep renders of the final model."""
    ds = state.dataset
    out = state.out_dir / "previews"
    seed = derive_seed(config.seed, 4)
    base = ds.frames[state.exemplar_index]
    radius = float(np.linalg.norm(base.pose[:3, 3])) or 2.5
    n_samples = config.training.samples_per_ray
    for i, az in enumerate(np.linspace(-0.5, 0.5, 8)):
        img = render_image(state.model, ds.intrinsics, orbit_pose(az, radius=radius),
                           base.expression, n_samples=n_samples, seed=seed)
        save_image(img, out / f"orbit_{i:02d}.png")
    span = float(np.abs([fr.expression[0] for fr in ds.frames]).max() or 1.0)
    for i, scale in enumerate(np.linspace(-span, span, 6)):
        e = base.expression.copy()
        e[0] = scale
        img = render_image(state.model, ds.intrinsics, base.pose, e,
                           n_samples=n_samples, seed=seed)
        save_image(img, out / f"expression_{i:02d}.png")
    return out


def run_pipeline(dataset_root: str | Path, instruction: str, config: PipelineConfig,
                 out_dir: str | Path, editor=None) -> PipelineResult:
    """Full run: exemplar selection, one external edit, per-cycle propagation
    and training, previews, and a consolidated metrics report.

    editor may override the config editor spec with any callable mapping
    EditRequest to EditResponse (used for counting and stub editors).
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump({"instruction": instruction, **config.to_dict()}, fh, indent=1, default=str)
        fh.write("\n")

    with _stage("load dataset"):
        ds = load_dataset(dataset_root)
        if len(ds.frames) == 0:
            raise ValueError("dataset has no frames")
    with _stage("select exemplar"):
        exemplar_index = select_exemplar(ds, config.lip_landmark_indices, config.exemplar_override)
    edit_fn = editor if editor is not None else make_editor(config.editor, timeout=config.editor_timeout)

    model = AvatarModel.create(resolution=config.grid_resolution,
                               coeff_count=ds.expression_dim,
                               deform_resolution=config.deform_resolution)
    state = PipelineState(dataset=ds, model=model, exemplar_index=exemplar_index,
                          edited_exemplar=np.zeros(1), out_dir=out_dir)

    edit_seed = derive_seed(config.seed, 1)
    if config.mode == "one_seed_once":
        cycles = [_run_one_seed_cycle(state, config, edit_fn, instruction, edit_seed)]
    else:
        with _stage("edit exemplar"):
            exemplar_image = masked(ds.image(exemplar_index), ds.mask(exemplar_index), 1.0)
            response = edit_fn(EditRequest(image=exemplar_image, instruction=instruction,
                                           seed=edit_seed,
                                           image_guidance=config.edit.image_guidance,
                                           text_guidance=config.edit.text_guidance,
                                           steps=config.edit.steps))
            state.edited_exemplar = response.image
            save_image(state.edited_exemplar, out_dir / "edited_exemplar.png")
        cycles = [run_cycle(state, t, config) for t in range(config.cycles)]

    with _stage("previews"):
        previews_dir = _render_previews(state, config)
    with _stage("final renders and report"):
        renders = render_dataset(state.model, ds, n_samples=config.training.samples_per_ray,
                                 seed=derive_seed(config.seed, 6))
        renders_dir = out_dir / "final_renders"
        for i, img in enumerate(renders):
            save_image(img, renders_dir / f"{i:06d}.png")
        render_report = _edited_set_metrics(ds, renders)
        checkpoint_path = out_dir / "checkpoint.avfc"
        shutil.copyfile(cycles[-1].checkpoint_path, checkpoint_path)
        report = {
            "mode": config.mode,
            "cycles": config.cycles,
            "exemplar_index": exemplar_index,
            "edited_temporal_consistency_per_cycle": [c.edited_temporal_consistency for c in cycles],
            "final_render_temporal_consistency": render_report.temporal_consistency,
            "final_render_sharpness": render_report.sharpness,
            "metric_notes": render_report.notes,
        }
        report_path = out_dir / "metrics.json"
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=1)
            fh.write("\n")
    return PipelineResult(checkpoint_path=checkpoint_path, previews_dir=previews_dir,
                          report_path=report_path, cycles=cycles, report=report)


def _run_one_seed_cycle(state: PipelineState, config: PipelineConfig, edit_fn,
                        instruction: str, edit_seed: int) -> CycleArtifacts:
    """Ablation: every frame edited independently with one fixed seed, then a
    single training pass; no exemplar propagation."""
    ds = state.dataset
    with _stage("one-seed edits"):
        edited = []
        for i, img in enumerate(_masked_originals(ds)):
            response = edit_fn(EditRequest(image=img, instruction=instruction, seed=edit_seed,
                                           image_guidance=config.edit.image_guidance,
                                           text_guidance=config.edit.text_guidance,
                                           steps=config.edit.steps))
            edited.append(response.image)
        state.edited_exemplar = edited[state.exemplar_index]
        save_image(state.edited_exemplar, state.out_dir / "edited_exemplar.png")
    with _stage("persist edited frames"):
        edited_dir = save_frameset(ds, edited, state.out_dir, "cycle_000")
    with _stage("train"):
        train_ds = load_dataset(edited_dir)
        train_images = [train_ds.image(i) for i in range(len(train_ds.frames))]
        tc = replace(config.training, rng_seed=derive_seed(config.seed, 3))
        train(state.model, train_ds, train_images, tc, resume=False)
    with _stage("artifacts"):
        checkpoint_path = edited_dir / "checkpoint.avfc"
        save_checkpoint(state.model, checkpoint_path)
        report = _edited_set_metrics(ds, edited)
        metrics_path = edited_dir / "metrics.json"
        report.save(metrics_path)
    return CycleArtifacts(cycle=0, edited_dir=edited_dir, checkpoint_path=checkpoint_path,
                          metrics_path=metrics_path,
                          edited_temporal_consistency=report.temporal_consistency)
