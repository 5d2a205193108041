import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge.dataset import DatasetError, load_dataset, save_frameset
from avatarforge.images import load_image, masked, save_image

from conftest import write_manifest_fixture


def test_load_round_trips_fixture(tmp_path):
    root = write_manifest_fixture(tmp_path / "ds")
    ds = load_dataset(root)
    assert len(ds.frames) == 3
    assert ds.expression_dim == 2
    assert ds.landmark_count == 5
    assert ds.intrinsics.fx == 10.0
    assert ds.intrinsics.width == 8 and ds.intrinsics.height == 6
    assert ds.fps == 25.0
    assert ds.frames[1].expression.tolist() == [0.1, 0.1]
    img = ds.image(0)
    assert img.shape == (6, 8, 3)
    assert img.min() >= 0 and img.max() <= 1


def test_inconsistent_expression_length_names_frame(tmp_path):
    def mutate(doc):
        doc["frames"][1]["expression"] = [0.1, 0.1, 0.1]

    root = write_manifest_fixture(tmp_path / "ds", mutate=mutate)
    with pytest.raises(DatasetError, match="inconsistent expression length at frame 1"):
        load_dataset(root)


def test_missing_image_file_names_path(tmp_path):
    root = write_manifest_fixture(tmp_path / "ds")
    (root / "frames" / "000002.png").unlink()
    with pytest.raises(DatasetError, match="frames/000002.png"):
        load_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="missing manifest"):
        load_dataset(tmp_path / "nope")


def test_inconsistent_landmark_count(tmp_path):
    def mutate(doc):
        doc["frames"][2]["landmarks"] = doc["frames"][2]["landmarks"][:3]

    root = write_manifest_fixture(tmp_path / "ds", mutate=mutate)
    with pytest.raises(DatasetError, match="inconsistent landmark count at frame 2"):
        load_dataset(root)


def test_landmark_out_of_bounds(tmp_path):
    def mutate(doc):
        doc["frames"][0]["landmarks"][0] = [100.0, 1.0]

    root = write_manifest_fixture(tmp_path / "ds", mutate=mutate)
    with pytest.raises(DatasetError, match="landmark outside image bounds at frame 0"):
        load_dataset(root)


def test_non_orthonormal_pose_rejected(tmp_path):
    def mutate(doc):
        doc["frames"][0]["pose"][0] = 2.0

    root = write_manifest_fixture(tmp_path / "ds", mutate=mutate)
    with pytest.raises(DatasetError, match="rotation not orthonormal at frame 0"):
        load_dataset(root)


def test_non_increasing_indices_rejected(tmp_path):
    def mutate(doc):
        doc["frames"][1]["index"] = 0

    root = write_manifest_fixture(tmp_path / "ds", mutate=mutate)
    with pytest.raises(DatasetError, match="strictly increasing"):
        load_dataset(root)


def test_missing_field_named(tmp_path):
    def mutate(doc):
        del doc["frames"][1]["pose"]

    root = write_manifest_fixture(tmp_path / "ds", mutate=mutate)
    with pytest.raises(DatasetError, match="missing field 'pose' in frame 1"):
        load_dataset(root)


def test_resolution_mismatch_rejected(tmp_path):
    root = write_manifest_fixture(tmp_path / "ds")
    save_image(np.zeros((5, 5, 3)), root / "frames" / "000001.png")
    with pytest.raises(DatasetError, match="size"):
        load_dataset(root)


def test_save_frameset_naming_and_manifest(tmp_path):
    root = write_manifest_fixture(tmp_path / "ds")
    ds = load_dataset(root)
    images = [ds.image(i) for i in range(3)]
    dest = save_frameset(ds, images, tmp_path / "out", "cycle0")
    assert dest == tmp_path / "out" / "cycle0"
    for i in range(3):
        assert (dest / f"{i:06d}.png").is_file()
    assert (dest / "manifest.json").is_file()
    with open(dest / "manifest.json") as fh:
        doc = json.load(fh)
    assert doc["frames"][0]["image"] == "000000.png"


def test_save_frameset_count_mismatch(tmp_path):
    root = write_manifest_fixture(tmp_path / "ds")
    ds = load_dataset(root)
    with pytest.raises(DatasetError, match="count"):
        save_frameset(ds, [], tmp_path / "out", "cycle0")


def test_save_load_round_trip_bit_exact(tmp_path):
    root = write_manifest_fixture(tmp_path / "ds")
    ds = load_dataset(root)
    images = [ds.image(i) for i in range(3)]
    dest = save_frameset(ds, images, tmp_path / "out", "rt")
    round_tripped = load_dataset(dest)
    for i in range(3):
        a = np.rint(images[i] * 255).astype(np.uint8)
        b = np.rint(round_tripped.image(i) * 255).astype(np.uint8)
        assert np.array_equal(a, b)
        assert np.array_equal(round_tripped.image(i), images[i])


def test_masked_identity_and_fill():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(5, 7, 3))
    assert np.array_equal(masked(img, np.ones((5, 7)), 1.0), img)
    out = masked(img, np.zeros((5, 7)), 1.0)
    assert np.array_equal(out, np.ones((5, 7, 3)))


def test_masked_half_blend_formula():
    # per-pixel formula oracle: mask 0.5, black image, white background
    img = np.zeros((4, 4, 3))
    out = masked(img, np.full((4, 4), 0.5), 1.0)
    expected = 0.5 * img + 0.5 * 1.0
    assert np.allclose(out, expected)
    assert np.allclose(out, 0.5)


def test_masked_size_mismatch():
    with pytest.raises(ValueError, match="size mismatch"):
        masked(np.zeros((4, 4, 3)), np.ones((3, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_masked_output_bounded_by_inputs(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(4, 5, 3))
    mask = rng.uniform(size=(4, 5))
    bg = rng.uniform(size=3)
    out = masked(img, mask, bg)
    lo = np.minimum(img, np.broadcast_to(bg, img.shape))
    hi = np.maximum(img, np.broadcast_to(bg, img.shape))
    assert (out >= lo - 1e-12).all()
    assert (out <= hi + 1e-12).all()


def test_intrinsics_validation(tmp_path):
    def bad_focal(doc):
        doc["intrinsics"]["fx"] = -1.0

    root = write_manifest_fixture(tmp_path / "ds", mutate=bad_focal)
    with pytest.raises(DatasetError, match="focal lengths"):
        load_dataset(root)

    def bad_principal(doc):
        doc["intrinsics"]["cx"] = 99.0

    root2 = write_manifest_fixture(tmp_path / "ds2", mutate=bad_principal)
    with pytest.raises(DatasetError, match="cx"):
        load_dataset(root2)


def test_png_round_trip_8bit(tmp_path):
    rng = np.random.default_rng(3)
    img = np.rint(rng.uniform(size=(6, 6, 3)) * 255) / 255.0
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert np.array_equal(back, img)
