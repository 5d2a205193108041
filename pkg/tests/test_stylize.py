import numpy as np
import pytest

from avatarforge.editor import SEPIA_MATRIX
from avatarforge.guides import GuideStack, GuideWeights, build_guides
from avatarforge.images import masked
from avatarforge.metrics import psnr
from avatarforge.stylize import (NNField, SynthesisParams, nnf_search,
                                 patch_cost, propagate_sequence,
                                 synthesize_frame, vote)

PATCH = 5
HALF = PATCH // 2


def random_stack(seed, h=16, w=16, weights=None):
    rng = np.random.default_rng(seed)
    return GuideStack(
        appearance_src=rng.uniform(size=(h, w, 3)), appearance_tgt=rng.uniform(size=(h, w, 3)),
        positional_src=rng.uniform(size=(h, w, 2)), positional_tgt=rng.uniform(size=(h, w, 2)),
        seg_src=rng.uniform(size=(h, w)), seg_tgt=rng.uniform(size=(h, w)),
        weights=weights or GuideWeights())


def same_frame_stack(seed, h=16, w=16):
    stack = random_stack(seed, h, w)
    stack.appearance_tgt = stack.appearance_src.copy()
    stack.positional_tgt = stack.positional_src.copy()
    stack.seg_tgt = stack.seg_src.copy()
    return stack


def identity_nnf(h, w, patch=PATCH):
    half = patch // 2
    iy, ix = np.mgrid[0:h - patch + 1, 0:w - patch + 1]
    coords = np.stack([ix + half, iy + half], axis=-1)
    return NNField(patch_size=patch, coords=coords, costs=np.zeros(coords.shape[:2]))


def identity_positional(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([xs / w, ys / h], axis=-1)


def exhaustive_optimum(stack, patch):
    """Independent exhaustive oracle: explicit offset loops, no shared helpers."""
    h, w = stack.seg_src.shape
    half = patch // 2
    cys, cxs = np.mgrid[half:h - half, half:w - half]
    cys, cxs = cys.ravel(), cxs.ravel()
    wts = stack.weights
    groups = [(stack.appearance_tgt, stack.appearance_src, wts.appearance),
              (stack.positional_tgt, stack.positional_src, wts.positional),
              (stack.seg_tgt[..., None], stack.seg_src[..., None], wts.segmentation)]
    n = len(cys)
    cost = np.zeros((n, n))
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            for tgt, src, wt in groups:
                tv = tgt[cys + dy, cxs + dx]
                sv = src[cys + dy, cxs + dx]
                d = tv[:, None, :] - sv[None, :, :]
                cost += wt * (d * d).sum(-1)
    return cost.min(axis=1)


# ---------------------------------------------------------------------------
# patch_cost
# ---------------------------------------------------------------------------

def test_patch_cost_identical_patches_zero():
    stack = same_frame_stack(0)
    style = np.random.default_rng(5).uniform(size=(16, 16, 3))
    assert patch_cost(stack, style, None, (7, 7), (7, 7), PATCH) == 0.0


def test_patch_cost_positional_closed_form():
    h, w = 16, 16
    stack = random_stack(1, h, w, weights=GuideWeights(0.0, 1.0, 0.0, 0.0))
    stack.positional_src = identity_positional(h, w)
    stack.positional_tgt = identity_positional(h, w)
    style = np.zeros((h, w, 3))
    assert patch_cost(stack, style, None, (7, 7), (7, 7), PATCH) == pytest.approx(0.0)
    delta = 3
    expected = PATCH ** 2 * (delta / w) ** 2
    got = patch_cost(stack, style, None, (7, 7), (7 + delta, 7), PATCH)
    assert got == pytest.approx(expected, rel=1e-12)


def test_patch_cost_appearance_closed_form():
    h, w = 16, 16
    stack = same_frame_stack(2, h, w)
    stack.weights = GuideWeights(1.0, 0.0, 0.0, 0.0)
    stack.appearance_tgt = np.clip(stack.appearance_src.copy(), 0, 0.9)
    stack.appearance_src = stack.appearance_tgt.copy()
    stack.appearance_tgt = stack.appearance_tgt.copy()
    stack.appearance_tgt[..., 1] = np.clip(stack.appearance_tgt[..., 1] + 0.1, 0, 1.0)
    stack.appearance_tgt[..., 1] = stack.appearance_src[..., 1] + 0.1  # exact constant offset
    stack.appearance_tgt = np.clip(stack.appearance_tgt, 0, 1)
    style = np.zeros((h, w, 3))
    got = patch_cost(stack, style, None, (7, 7), (7, 7), PATCH)
    assert got == pytest.approx(PATCH ** 2 * 0.01, rel=1e-9)


def test_patch_cost_includes_style_term():
    stack = same_frame_stack(3)
    style = np.zeros((16, 16, 3))
    current = np.full((16, 16, 3), 0.2)
    got = patch_cost(stack, style, current, (7, 7), (7, 7), PATCH)
    assert got == pytest.approx(stack.weights.style * PATCH ** 2 * 3 * 0.04, rel=1e-9)


def test_patch_cost_out_of_bounds():
    stack = random_stack(4)
    style = np.zeros((16, 16, 3))
    with pytest.raises(ValueError, match="outside bounds"):
        patch_cost(stack, style, None, (1, 7), (7, 7), PATCH)
    with pytest.raises(ValueError, match="outside bounds"):
        patch_cost(stack, style, None, (7, 7), (7, 14), PATCH)


# ---------------------------------------------------------------------------
# nnf_search
# ---------------------------------------------------------------------------

def test_identity_init_is_global_optimum():
    stack = same_frame_stack(10)
    params = SynthesisParams(rng_seed=3)
    init = identity_nnf(16, 16)
    nnf = nnf_search(stack, stack.appearance_src, None, params, init=init)
    assert nnf.costs.sum() == 0.0
    assert np.array_equal(nnf.coords, init.coords)


def test_random_noise_fixture_near_exhaustive_optimum():
    params = SynthesisParams(rng_seed=7)
    for seed in (7, 8, 9):
        stack = random_stack(seed)
        style = np.random.default_rng(seed + 50).uniform(size=(16, 16, 3))
        nnf = nnf_search(stack, style, None, params)
        optimum = exhaustive_optimum(stack, PATCH)
        assert nnf.costs.mean() <= 1.05 * optimum.mean()
        # returned costs agree with the public cost function
        for gy, gx in [(0, 0), (3, 5), (11, 11)]:
            p = (gx + HALF, gy + HALF)
            q = tuple(nnf.coords[gy, gx])
            assert nnf.costs[gy, gx] == pytest.approx(
                patch_cost(stack, style, None, p, q, PATCH), rel=1e-9)


def test_unique_motif_found_exactly():
    # an 8x8 pair with one unique 3x3 motif translated between src and tgt
    h = w = 8
    patch = 3
    zeros = np.zeros((h, w, 3))
    motif = np.random.default_rng(11).uniform(0.2, 1.0, size=(3, 3, 3))
    app_src = zeros.copy()
    app_src[1:4, 1:4] = motif
    app_tgt = zeros.copy()
    app_tgt[4:7, 3:6] = motif
    stack = GuideStack(
        appearance_src=app_src, appearance_tgt=app_tgt,
        positional_src=np.zeros((h, w, 2)), positional_tgt=np.zeros((h, w, 2)),
        seg_src=np.ones((h, w)), seg_tgt=np.ones((h, w)),
        weights=GuideWeights(1.0, 0.0, 0.0, 0.0))
    params = SynthesisParams(patch_size=3, rng_seed=5)
    nnf = nnf_search(stack, app_src, None, params)
    # target motif center (4, 5) must map to source motif center (2, 2)
    assert tuple(nnf.coords[5 - 1, 4 - 1]) == (2, 2)
    assert nnf.costs[5 - 1, 4 - 1] == pytest.approx(0.0, abs=1e-12)


def test_sweep_costs_non_increasing():
    stack = random_stack(12)
    style = np.random.default_rng(60).uniform(size=(16, 16, 3))
    log = []
    nnf_search(stack, style, None, SynthesisParams(rng_seed=1), sweep_log=log)
    assert len(log) == SynthesisParams().pm_iterations
    assert all(log[i + 1] <= log[i] + 1e-12 for i in range(len(log) - 1))


def test_search_improves_on_init_costs():
    stack = random_stack(13)
    style = np.random.default_rng(61).uniform(size=(16, 16, 3))
    bad_init = identity_nnf(16, 16)
    nnf = nnf_search(stack, style, None, SynthesisParams(rng_seed=2), init=bad_init)
    init_costs = np.array([[patch_cost(stack, style, None,
                                       (gx + HALF, gy + HALF),
                                       tuple(bad_init.coords[gy, gx]), PATCH)
                            for gx in range(12)] for gy in range(12)])
    assert (nnf.costs <= init_costs + 1e-12).all()


def test_determinism_bit_identical():
    stack = random_stack(14)
    style = np.random.default_rng(62).uniform(size=(16, 16, 3))
    a = nnf_search(stack, style, None, SynthesisParams(rng_seed=9))
    b = nnf_search(stack, style, None, SynthesisParams(rng_seed=9))
    assert np.array_equal(a.coords, b.coords)
    assert np.array_equal(a.costs, b.costs)
    c = nnf_search(stack, style, None, SynthesisParams(rng_seed=10))
    assert not np.array_equal(a.coords, c.coords)


def test_degenerate_weights_rejected():
    stack = random_stack(15, weights=GuideWeights(0.0, 0.0, 0.0, 1.0))
    style = np.zeros((16, 16, 3))
    with pytest.raises(ValueError, match="degenerate weights"):
        nnf_search(stack, style, None, SynthesisParams(rng_seed=0))
    # with a current image the style term carries the search
    nnf_search(stack, style, np.zeros((16, 16, 3)), SynthesisParams(rng_seed=0))


# ---------------------------------------------------------------------------
# vote
# ---------------------------------------------------------------------------

def test_vote_identity_reproduces_style():
    style = np.random.default_rng(20).uniform(size=(12, 14, 3))
    out = vote(identity_nnf(12, 14), style)
    assert np.allclose(out, style, atol=1e-12)


def test_vote_constant_style_constant_output():
    style = np.full((10, 10, 3), 0.37)
    nnf = identity_nnf(10, 10)
    nnf.coords = np.flip(nnf.coords, axis=(0, 1)).copy()  # arbitrary permutation
    out = vote(nnf, style)
    assert np.allclose(out, 0.37)


def test_vote_two_patch_overlap_hand_counted():
    # grid 1x2 (patch 3, target 3x4): entry (0,0) matches source center (1,1)
    # (identity), entry (0,1) matches (3,1), i.e. shifted one pixel right.
    style = np.zeros((3, 5))
    style[1, 1] = 0.2   # what the left patch copies onto target pixel (1,1)
    style[1, 2] = 0.6   # what the right patch copies onto the same pixel
    coords = np.array([[[1, 1], [3, 1]]])
    nnf = NNField(patch_size=3, coords=coords, costs=np.zeros((1, 2)))
    out = vote(nnf, style)
    # hand-counted: target (1,1) sits at offset (0,0) of the left patch
    # (source pixel (1,1)) and offset (-1,0) of the right patch (source pixel
    # (2,1)); the uniform average is 0.4
    assert out[1, 1] == pytest.approx((0.2 + 0.6) / 2)
    assert out.shape == (3, 4)


def test_vote_bounded_by_style_range():
    rng = np.random.default_rng(21)
    style = rng.uniform(0.3, 0.6, size=(16, 16, 3))
    coords = np.stack([rng.integers(HALF, 14, size=(12, 12)),
                       rng.integers(HALF, 14, size=(12, 12))], axis=-1)
    out = vote(NNField(patch_size=PATCH, coords=coords, costs=np.zeros((12, 12))), style)
    for ch in range(3):
        assert out[..., ch].min() >= style[..., ch].min() - 1e-12
        assert out[..., ch].max() <= style[..., ch].max() + 1e-12


def test_vote_empty_nnf_rejected():
    with pytest.raises(ValueError, match="empty NNF"):
        vote(NNField(patch_size=3, coords=np.zeros((0, 0, 2), dtype=int),
                     costs=np.zeros((0, 0))), np.zeros((4, 4, 3)))


# ---------------------------------------------------------------------------
# synthesize_frame / propagate_sequence
# ---------------------------------------------------------------------------

def _guides_for(ds, src, tgt, targets):
    return build_guides(targets[src], ds.mask(src), ds.frames[src].landmarks,
                        targets[tgt], ds.mask(tgt), ds.frames[tgt].landmarks)


def test_self_synthesis_high_fidelity(translation_ds):
    ds = translation_ds
    targets = [masked(ds.image(i), ds.mask(i), 1.0) for i in range(len(ds.frames))]
    stack = _guides_for(ds, 0, 0, targets)
    out = synthesize_frame(stack, targets[0], SynthesisParams(rng_seed=0))
    assert psnr(out, targets[0]) >= 45.0


def test_noop_edit_reproduces_targets(translation_ds):
    ds = translation_ds
    targets = [masked(ds.image(i), ds.mask(i), 1.0) for i in range(len(ds.frames))]
    outs = propagate_sequence(ds, 0, targets[0], targets, SynthesisParams(rng_seed=0))
    for i in range(1, len(ds.frames)):
        assert psnr(outs[i], targets[i], ds.mask(i)) >= 35.0


def test_colormap_transfer(translation_ds):
    ds = translation_ds
    targets = [masked(ds.image(i), ds.mask(i), 1.0) for i in range(len(ds.frames))]
    style = np.clip(targets[0] @ SEPIA_MATRIX.T, 0, 1)
    outs = propagate_sequence(ds, 0, style, targets, SynthesisParams(rng_seed=0))
    for i in range(1, len(ds.frames)):
        oracle = np.clip(targets[i] @ SEPIA_MATRIX.T, 0, 1)
        assert psnr(outs[i], oracle, ds.mask(i)) >= 30.0


def test_propagate_single_frame_returns_edited(tmp_path):
    from conftest import write_manifest_fixture
    from avatarforge.dataset import load_dataset

    root = write_manifest_fixture(tmp_path / "one", n_frames=1, size=(16, 16))
    ds = load_dataset(root)
    edited = np.random.default_rng(0).uniform(size=(16, 16, 3))
    outs = propagate_sequence(ds, 0, edited, [ds.image(0)], SynthesisParams(rng_seed=0))
    assert len(outs) == 1
    assert np.array_equal(outs[0], edited)


def test_propagate_static_video_matches_exemplar(tmp_path):
    from conftest import write_manifest_fixture
    from avatarforge.dataset import load_dataset
    from avatarforge.images import save_image

    root = write_manifest_fixture(tmp_path / "static", n_frames=3, size=(32, 24))
    ds0 = load_dataset(root)
    frame = ds0.image(0)
    for i in range(3):  # identical frames
        save_image(frame, root / "frames" / f"{i:06d}.png")
    ds = load_dataset(root)
    edited = np.clip(frame @ SEPIA_MATRIX.T, 0, 1)
    targets = [ds.image(i) for i in range(3)]
    outs = propagate_sequence(ds, 0, edited, targets, SynthesisParams(rng_seed=1))
    for out in outs:
        assert psnr(out, edited) >= 40.0


def test_propagate_deterministic_and_worker_invariant(translation_ds):
    ds = translation_ds
    targets = [masked(ds.image(i), ds.mask(i), 1.0) for i in range(len(ds.frames))]
    params = SynthesisParams(rng_seed=4)
    a = propagate_sequence(ds, 0, targets[0], targets, params)
    b = propagate_sequence(ds, 0, targets[0], targets, params)
    c = propagate_sequence(ds, 0, targets[0], targets, params, workers=2)
    for x, y, z in zip(a, b, c):
        assert np.array_equal(x, y)
        assert np.array_equal(x, z)


def test_propagate_validates_alignment(translation_ds):
    ds = translation_ds
    targets = [ds.image(i) for i in range(len(ds.frames))]
    with pytest.raises(ValueError, match="target images"):
        propagate_sequence(ds, 0, targets[0], targets[:-1], SynthesisParams())
    with pytest.raises(ValueError, match="out of range"):
        propagate_sequence(ds, 99, targets[0], targets, SynthesisParams())


def test_synthesis_params_validation():
    with pytest.raises(ValueError, match="patch_size"):
        SynthesisParams(patch_size=4).validate()
    with pytest.raises(ValueError, match="pm_iterations"):
        SynthesisParams(pm_iterations=0).validate()
    with pytest.raises(ValueError, match="em_rounds"):
        SynthesisParams(em_rounds=0).validate()
