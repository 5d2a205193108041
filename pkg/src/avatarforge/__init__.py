"""avatarforge: instruction-driven editing of animatable head avatars.

Edit one exemplar frame with an external instruction-driven editor, propagate
the edit to every frame with exemplar-guided patch synthesis, fit a
deformable voxel radiance field, and iterate the dataset update.
"""

from .avatar import (AvatarModel, DeformationBasis, RadianceGrid, TrainConfig,
                     deform, load_checkpoint, loss_and_grad, render_dataset,
                     render_image, save_checkpoint, train)
from .dataset import (DatasetError, FrameDataset, FrameRecord, Intrinsics,
                      load_dataset, save_frameset)
from .editor import (CountingEditor, EditRequest, EditResponse, edit_mock,
                     edit_remote, make_editor)
from .guides import (GuideStack, GuideWeights, WarpField, build_guides,
                     positional_guide, segmentation_guide)
from .images import bilinear_sample, load_image, masked, save_image
from .metrics import MetricReport, psnr, sharpness, temporal_consistency
from .pipeline import (CycleArtifacts, PipelineConfig, PipelineResult,
                       PipelineStageError, run_cycle, run_pipeline,
                       select_exemplar)
from .stylize import (NNField, SynthesisParams, nnf_search, patch_cost,
                      propagate_sequence, synthesize_frame, vote)

__version__ = "0.1.0"

__all__ = [
    "AvatarModel", "DeformationBasis", "RadianceGrid", "TrainConfig",
    "deform", "load_checkpoint", "loss_and_grad", "render_dataset",
    "render_image", "save_checkpoint", "train",
    "DatasetError", "FrameDataset", "FrameRecord", "Intrinsics",
    "load_dataset", "save_frameset",
    "CountingEditor", "EditRequest", "EditResponse", "edit_mock",
    "edit_remote", "make_editor",
    "GuideStack", "GuideWeights", "WarpField", "build_guides",
    "positional_guide", "segmentation_guide",
    "bilinear_sample", "load_image", "masked", "save_image",
    "MetricReport", "psnr", "sharpness", "temporal_consistency",
    "CycleArtifacts", "PipelineConfig", "PipelineResult",
    "PipelineStageError", "run_cycle", "run_pipeline", "select_exemplar",
    "NNField", "SynthesisParams", "nnf_search", "patch_cost",
    "propagate_sequence", "synthesize_frame", "vote",
]
