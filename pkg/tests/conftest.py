"""Shared fixtures. Heavyweight artifacts (toy datasets, pipeline runs,
trained models) are session-scoped and reused by both the unit tests and the
acceptance suite."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from avatarforge.avatar import AvatarModel, TrainConfig, train, render_image
from avatarforge.editor import CountingEditor, edit_mock
from avatarforge.guides import GuideWeights
from avatarforge.images import save_image
from avatarforge.metrics import psnr
from avatarforge.pipeline import PipelineConfig, run_pipeline
from avatarforge.stylize import SynthesisParams
from avatarforge.synthetic import (LIP_LANDMARKS, make_toy_dataset,
                                   make_translation_dataset, orbit_pose,
                                   render_view)


def write_manifest_fixture(root: Path, n_frames: int = 3, m: int = 2, landmarks: int = 5,
                           size=(8, 6), mutate=None) -> Path:
    """Hand-built minimal dataset (independent of the package's writers)."""
    w, h = size
    rng = np.random.default_rng(0)
    frames = []
    for i in range(n_frames):
        img = rng.uniform(size=(h, w, 3))
        save_image(img, root / "frames" / f"{i:06d}.png")
        save_image(np.ones((h, w)), root / "masks" / f"{i:06d}.png")
        frames.append({
            "index": i,
            "image": f"frames/{i:06d}.png",
            "mask": f"masks/{i:06d}.png",
            "pose": [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, -2.5, 0, 0, 0, 1],
            "expression": [0.1 * i] * m,
            "landmarks": [[1.0 + j, 1.0 + (i % 2)] for j in range(landmarks)],
        })
    doc = {"fps": 25.0,
           "intrinsics": {"fx": 10.0, "fy": 10.0, "cx": w / 2, "cy": h / 2,
                          "width": w, "height": h},
           "frames": frames}
    if mutate is not None:
        mutate(doc)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.json", "w") as fh:
        json.dump(doc, fh)
    return root


@pytest.fixture(scope="session")
def translation_ds(tmp_path_factory):
    return make_translation_dataset(tmp_path_factory.mktemp("trans") / "ds")


@pytest.fixture(scope="session")
def toy_pipeline_ds(tmp_path_factory):
    """Deformable toy scene for pipeline-level tests: translating sphere with
    a mouth blendshape, busy texture, near-fixed camera. The landmark warp is
    then almost exact, so the consistency metric sees content differences
    rather than warp error."""
    ds, gt = make_toy_dataset(tmp_path_factory.mktemp("toypipe") / "ds",
                              n_frames=10, size=48, n_samples=48, seed=3,
                              azimuth_span=0.08, blendshapes="drift",
                              texture_freq=2.0)
    return ds, gt


def pipeline_test_config(**overrides) -> PipelineConfig:
    """Pipeline config for the toy fixture. Synthesis is deliberately
    under-converged (single sweep, weak positional guide) so the propagated
    edits carry the per-frame distortions that motivate the iterative update;
    the coarse grid keeps renders smooth."""
    cfg = PipelineConfig(
        editor="mock:sepia",
        synthesis=SynthesisParams(patch_size=3, pm_iterations=1, em_rounds=1,
                                  pyramid_min_dim=48, rng_seed=0),
        guide_weights=GuideWeights(appearance=2.0, positional=0.1,
                                   segmentation=0.3, style=1.0),
        training=TrainConfig(rays_per_step=1024, samples_per_ray=48, steps_per_cycle=1800,
                             learning_rate=0.1, rng_seed=0),
        lip_landmark_indices=LIP_LANDMARKS,
        grid_resolution=16,
        deform_resolution=8,
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


@pytest.fixture(scope="session")
def full_run(toy_pipeline_ds, tmp_path_factory):
    """Full-mode 3-cycle run with a counting sepia editor."""
    ds, _ = toy_pipeline_ds
    editor = CountingEditor(lambda req: edit_mock("sepia", req))
    out = tmp_path_factory.mktemp("run_full")
    result = run_pipeline(ds.root, "make it sepia", pipeline_test_config(), out, editor=editor)
    return result, editor, out


@pytest.fixture(scope="session")
def ebsynth_once_run(toy_pipeline_ds, tmp_path_factory):
    ds, _ = toy_pipeline_ds
    editor = CountingEditor(lambda req: edit_mock("sepia", req))
    out = tmp_path_factory.mktemp("run_eb")
    config = pipeline_test_config(mode="ebsynth_once", cycles=1)
    result = run_pipeline(ds.root, "make it sepia", config, out, editor=editor)
    return result, editor, out


@pytest.fixture(scope="session")
def one_seed_run(toy_pipeline_ds, tmp_path_factory):
    """Per-frame independent edits with one fixed seed and per-frame noise."""
    ds, _ = toy_pipeline_ds
    editor = CountingEditor(lambda req: edit_mock("noisy:sepia:0.08", req))
    out = tmp_path_factory.mktemp("run_oneseed")
    config = pipeline_test_config(mode="one_seed_once", cycles=1)
    result = run_pipeline(ds.root, "make it sepia", config, out, editor=editor)
    return result, editor, out


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """Very small toy scene for determinism and contract tests."""
    ds, gt = make_toy_dataset(tmp_path_factory.mktemp("tiny") / "ds",
                              n_frames=6, size=32, n_samples=32, seed=5)
    return ds, gt


def tiny_config(**overrides) -> PipelineConfig:
    cfg = pipeline_test_config(
        synthesis=SynthesisParams(pm_iterations=3, em_rounds=2, pyramid_min_dim=16, rng_seed=0),
        training=TrainConfig(rays_per_step=512, samples_per_ray=32, steps_per_cycle=60,
                             learning_rate=0.1, rng_seed=0),
        grid_resolution=16,
        cycles=2,
    )
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


@pytest.fixture(scope="session")
def determinism_runs(tiny_ds, tmp_path_factory):
    ds, _ = tiny_ds
    results = []
    for tag in ("a", "b"):
        editor = CountingEditor(lambda req: edit_mock("sepia", req))
        out = tmp_path_factory.mktemp(f"run_det_{tag}")
        result = run_pipeline(ds.root, "sepia please", tiny_config(seed=11), out, editor=editor)
        results.append((result, editor, out))
    return results


@pytest.fixture(scope="session")
def static_fit(tmp_path_factory):
    """Train on renders of a known static sphere (no deformation); returns
    held-out view PSNR and the elapsed wall-clock."""
    ds, gt = make_toy_dataset(tmp_path_factory.mktemp("fit_static") / "ds",
                              n_frames=20, size=64, n_samples=64, seed=0,
                              expression_scale=0.0)
    images = [ds.image(i) for i in range(len(ds.frames))]
    held_pose = orbit_pose(0.1, 0.05)
    held_e = np.zeros(2)
    held_img, held_alpha = render_view(gt, ds.intrinsics, held_pose, held_e,
                                       n_samples=64, seed=123)
    model = AvatarModel.create(resolution=32, coeff_count=2, deform_resolution=8)
    cfg = TrainConfig(rays_per_step=2048, samples_per_ray=64, steps_per_cycle=2000,
                      learning_rate=0.1, rng_seed=1)
    losses: list[float] = []
    start = time.monotonic()
    train(model, ds, images, cfg, on_step=lambda s, l: losses.append(l))
    render = render_image(model, ds.intrinsics, held_pose, held_e, n_samples=64, seed=9)
    elapsed = time.monotonic() - start
    return {"psnr": psnr(render, held_img), "elapsed": elapsed, "losses": losses,
            "model": model, "dataset": ds, "images": images}


@pytest.fixture(scope="session")
def deformable_fit(tmp_path_factory):
    """Same oracle with two active blendshapes and expression-varying truth."""
    ds, gt = make_toy_dataset(tmp_path_factory.mktemp("fit_deform") / "ds",
                              n_frames=20, size=64, n_samples=64, seed=0)
    images = [ds.image(i) for i in range(len(ds.frames))]
    held_pose = orbit_pose(0.1, 0.05)
    held_e = np.array([0.8, -0.25])
    held_img, held_alpha = render_view(gt, ds.intrinsics, held_pose, held_e,
                                       n_samples=64, seed=123)
    model = AvatarModel.create(resolution=32, coeff_count=2, deform_resolution=8)
    cfg = TrainConfig(rays_per_step=2048, samples_per_ray=64, steps_per_cycle=2000,
                      learning_rate=0.1, rng_seed=1)
    losses: list[float] = []
    start = time.monotonic()
    train(model, ds, images, cfg, on_step=lambda s, l: losses.append(l))
    render = render_image(model, ds.intrinsics, held_pose, held_e, n_samples=64, seed=9)
    elapsed = time.monotonic() - start
    return {"psnr": psnr(render, held_img), "elapsed": elapsed, "losses": losses,
            "model": model, "dataset": ds, "images": images}
