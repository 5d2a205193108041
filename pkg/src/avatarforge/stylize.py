"""Exemplar-guided patch synthesis: PatchMatch over guide stacks plus voting.

The searcher keeps a nearest-neighbor field (NNF) from target patch centers
to source patch centers and refines it with raster-order propagation and
exponentially decaying random search; a voting step averages the style pixels
of all overlapping matched patches into the output. Run coarse-to-fine, this
propagates an edited exemplar's style onto a geometrically related target.

All patch centers are (x, y) pixel coordinates, matching the landmark
convention.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .guides import GuideStack, GuideWeights, build_guides
from .images import box_downscale
from .rng import derive_seed


@dataclass
class SynthesisParams:
    patch_size: int = 5
    pyramid_min_dim: int = 32
    pyramid_factor: int = 2
    pm_iterations: int = 6
    em_rounds: int = 3
    random_search_radius_decay: float = 0.5
    rng_seed: int = 0

    def validate(self) -> None:
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if self.pm_iterations < 1:
            raise ValueError("pm_iterations must be >= 1")
        if self.em_rounds < 1:
            raise ValueError("em_rounds must be >= 1")
        if not (0 < self.random_search_radius_decay < 1):
            raise ValueError("random_search_radius_decay must lie in (0, 1)")
        if self.pyramid_factor < 2:
            raise ValueError("pyramid_factor must be >= 2")


@dataclass
class NNField:
    """Per-target-patch best source match.

    coords has shape (grid_h, grid_w, 2) holding (x, y) source patch centers;
    costs has shape (grid_h, grid_w). Grid cell (gy, gx) covers the target
    patch centered at (gx + patch_size//2, gy + patch_size//2).
    """
    patch_size: int
    coords: np.ndarray
    costs: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.costs.shape

    def validate(self, src_shape: tuple[int, int]) -> None:
        half = self.patch_size // 2
        h, w = src_shape
        if self.coords.shape[:2] != self.costs.shape or self.coords.shape[2] != 2:
            raise ValueError("coords/costs shape mismatch")
        x, y = self.coords[..., 0], self.coords[..., 1]
        if x.min() < half or x.max() > w - 1 - half or y.min() < half or y.max() > h - 1 - half:
            raise ValueError("source coords put a patch outside source bounds")
        if not np.isfinite(self.costs).all() or self.costs.min() < 0:
            raise ValueError("costs must be finite and >= 0")


def _check_effective_weights(weights: GuideWeights, current: np.ndarray | None) -> None:
    guide_total = weights.appearance + weights.positional + weights.segmentation
    style_active = current is not None and weights.style > 0
    if guide_total == 0 and not style_active:
        raise ValueError("degenerate weights: no guide channel and no style coherence term is active")


def _channel_stack(guides: GuideStack, style: np.ndarray, current: np.ndarray | None):
    """Weighted per-pixel feature planes for target and source sides."""
    w = guides.weights
    tgt = [guides.appearance_tgt * np.sqrt(w.appearance),
           guides.positional_tgt * np.sqrt(w.positional),
           guides.seg_tgt[..., None] * np.sqrt(w.segmentation)]
    src = [guides.appearance_src * np.sqrt(w.appearance),
           guides.positional_src * np.sqrt(w.positional),
           guides.seg_src[..., None] * np.sqrt(w.segmentation)]
    if current is not None and w.style > 0:
        tgt.append(np.atleast_3d(current) * np.sqrt(w.style))
        src.append(np.atleast_3d(style) * np.sqrt(w.style))
    return np.concatenate(tgt, axis=2), np.concatenate(src, axis=2)


def _patch_features(planes: np.ndarray, patch_size: int) -> np.ndarray:
    """(gh, gw, C*patch^2) flattened patch vectors from (H, W, C) planes."""
    win = sliding_window_view(planes, (patch_size, patch_size), axis=(0, 1))
    gh, gw = win.shape[:2]
    return np.ascontiguousarray(win).reshape(gh, gw, -1)


def patch_cost(guides: GuideStack, style: np.ndarray, current: np.ndarray | None,
               p: tuple[int, int], q: tuple[int, int], patch_size: int = 5) -> float:
    """Matching energy between target patch at p and source patch at q.

    Sums weighted squared differences over all patch offsets: appearance,
    positional, and segmentation guide channels always; plus the style
    coherence term |current - style|^2 when a current synthesis exists.
    """
    half = patch_size // 2
    h, w = guides.shape
    for name, (cx, cy) in (("target", p), ("source", q)):
        if not (half <= cx <= w - 1 - half and half <= cy <= h - 1 - half):
            raise ValueError(f"{name} patch at {(cx, cy)} falls outside bounds for patch_size {patch_size}")
    py, px = int(p[1]) - half, int(p[0]) - half
    qy, qx = int(q[1]) - half, int(q[0]) - half
    wts = guides.weights

    def block(arr, y, x):
        a = np.atleast_3d(arr)
        return a[y:y + patch_size, x:x + patch_size]

    cost = wts.appearance * np.sum((block(guides.appearance_tgt, py, px) - block(guides.appearance_src, qy, qx)) ** 2)
    cost += wts.positional * np.sum((block(guides.positional_tgt, py, px) - block(guides.positional_src, qy, qx)) ** 2)
    cost += wts.segmentation * np.sum((block(guides.seg_tgt, py, px) - block(guides.seg_src, qy, qx)) ** 2)
    if current is not None:
        cost += wts.style * np.sum((block(current, py, px) - block(style, qy, qx)) ** 2)
    return float(cost)


def _diagonals(gh: int, gw: int):
    """Anti-diagonal index groups; cells in one group share gy + gx."""
    out = []
    for d in range(gh + gw - 1):
        gy = np.arange(max(0, d - gw + 1), min(gh, d + 1))
        out.append((gy, d - gy))
    return out


def _candidate_costs(f_tgt, f_src, gys, gxs, cand_gy, cand_gx):
    diff = f_tgt[gys, gxs] - f_src[cand_gy, cand_gx]
    return np.einsum("ij,ij->i", diff, diff)


def nnf_search(guides: GuideStack, style: np.ndarray, current: np.ndarray | None,
               params: SynthesisParams, init: NNField | None = None,
               sweep_log: list | None = None) -> NNField:
    """PatchMatch refinement of the nearest-neighbor field.

    Each of pm_iterations sweeps runs a propagation pass in raster order
    (alternating direction per sweep) followed by a random-search pass whose
    radius decays geometrically; candidates are accepted only on strict cost
    improvement, so every entry's cost is non-increasing. Deterministic for a
    fixed params.rng_seed. Costs of a supplied init are recomputed here.
    """
    params.validate()
    guides.validate()
    _check_effective_weights(guides.weights, current)
    h, w = guides.shape
    if np.asarray(style).shape[:2] != (h, w):
        raise ValueError("style must share the guide stack resolution")
    patch = params.patch_size
    half = patch // 2
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than patch_size {patch}")

    tgt_planes, src_planes = _channel_stack(guides, style, current)
    f_tgt = _patch_features(tgt_planes, patch)
    f_src = _patch_features(src_planes, patch)
    gh, gw = f_tgt.shape[:2]

    rng = np.random.default_rng(np.random.SeedSequence(params.rng_seed))
    if init is None:
        cx = rng.integers(half, w - half, size=(gh, gw))
        cy = rng.integers(half, h - half, size=(gh, gw))
        coords = np.stack([cx, cy], axis=-1).astype(np.int64)
    else:
        coords = init.coords.astype(np.int64).copy()
        if coords.shape[:2] != (gh, gw):
            raise ValueError(f"init grid {coords.shape[:2]} does not match target grid {(gh, gw)}")
        coords[..., 0] = np.clip(coords[..., 0], half, w - 1 - half)
        coords[..., 1] = np.clip(coords[..., 1], half, h - 1 - half)
    diff = f_tgt - f_src[coords[..., 1] - half, coords[..., 0] - half]
    costs = np.einsum("ijk,ijk->ij", diff, diff)

    diagonals = _diagonals(gh, gw)
    radii = []
    r = float(max(h, w))
    while r >= 1.0:
        radii.append(r)
        r *= params.random_search_radius_decay

    for sweep in range(params.pm_iterations):
        forward = sweep % 2 == 0
        step = 1 if forward else -1
        order = diagonals if forward else diagonals[::-1]
        for gys, gxs in order:
            for axis in (1, 0):  # vertical then horizontal neighbor
                if axis == 1:
                    ny, nx = gys - step, gxs
                else:
                    ny, nx = gys, gxs - step
                valid = (ny >= 0) & (ny < gh) & (nx >= 0) & (nx < gw)
                if not valid.any():
                    continue
                vy, vx = gys[valid], gxs[valid]
                ncoord = coords[ny[valid], nx[valid]]
                cand_x = ncoord[:, 0] + (step if axis == 0 else 0)
                cand_y = ncoord[:, 1] + (step if axis == 1 else 0)
                cand_x = np.clip(cand_x, half, w - 1 - half)
                cand_y = np.clip(cand_y, half, h - 1 - half)
                cc = _candidate_costs(f_tgt, f_src, vy, vx, cand_y - half, cand_x - half)
                better = cc < costs[vy, vx]
                if better.any():
                    by, bx = vy[better], vx[better]
                    coords[by, bx, 0] = cand_x[better]
                    coords[by, bx, 1] = cand_y[better]
                    costs[by, bx] = cc[better]

        draws = rng.uniform(-1.0, 1.0, size=(len(radii), gh, gw, 2))
        for lvl, radius in enumerate(radii):
            cand = np.rint(coords + draws[lvl] * radius).astype(np.int64)
            cand[..., 0] = np.clip(cand[..., 0], half, w - 1 - half)
            cand[..., 1] = np.clip(cand[..., 1], half, h - 1 - half)
            diff = f_tgt - f_src[cand[..., 1] - half, cand[..., 0] - half]
            cc = np.einsum("ijk,ijk->ij", diff, diff)
            better = cc < costs
            coords[better] = cand[better]
            costs[better] = cc[better]

        if sweep_log is not None:
            sweep_log.append(float(costs.sum()))

    return NNField(patch_size=patch, coords=coords, costs=costs)


def vote(nnf: NNField, style: np.ndarray, patch_size: int | None = None) -> np.ndarray:
    """Reconstruct the target by averaging style pixels of all overlapping
    matched patches; output is bounded by the style's per-channel range."""
    patch = patch_size or nnf.patch_size
    half = patch // 2
    gh, gw = nnf.grid_shape
    if gh == 0 or gw == 0:
        raise ValueError("empty NNF")
    style = np.atleast_3d(np.asarray(style, dtype=np.float64))
    h, w = gh + patch - 1, gw + patch - 1
    acc = np.zeros((h, w, style.shape[2]))
    cnt = np.zeros((h, w, 1))
    sy = nnf.coords[..., 1] - half
    sx = nnf.coords[..., 0] - half
    for a in range(patch):
        for b in range(patch):
            acc[a:a + gh, b:b + gw] += style[sy + a, sx + b]
            cnt[a:a + gh, b:b + gw] += 1.0
    out = acc / cnt
    lo = style.reshape(-1, style.shape[2]).min(axis=0)
    hi = style.reshape(-1, style.shape[2]).max(axis=0)
    out = np.clip(out, lo, hi)
    return out if out.shape[2] > 1 else out[..., 0]


def _downscale_stack(guides: GuideStack, factor: int) -> GuideStack:
    return GuideStack(
        appearance_src=box_downscale(guides.appearance_src, factor),
        appearance_tgt=box_downscale(guides.appearance_tgt, factor),
        positional_src=box_downscale(guides.positional_src, factor),
        positional_tgt=box_downscale(guides.positional_tgt, factor),
        seg_src=np.clip(box_downscale(guides.seg_src, factor), 0, 1),
        seg_tgt=np.clip(box_downscale(guides.seg_tgt, factor), 0, 1),
        weights=guides.weights,
    )


def _upsample_nnf(nnf: NNField, factor: int, fine_shape: tuple[int, int]) -> NNField:
    """Map a coarse NNF onto the finer grid, scaling match offsets."""
    patch = nnf.patch_size
    half = patch // 2
    h, w = fine_shape
    gh, gw = h - patch + 1, w - patch + 1
    cgh, cgw = nnf.grid_shape
    gy = np.clip(np.arange(gh) // factor, 0, cgh - 1)
    gx = np.clip(np.arange(gw) // factor, 0, cgw - 1)
    coarse = nnf.coords[gy[:, None], gx[None, :]]
    tgt_x = np.arange(gw)[None, :] + half
    tgt_y = np.arange(gh)[:, None] + half
    coarse_tx = gx[None, :] + half
    coarse_ty = gy[:, None] + half
    fine = np.empty((gh, gw, 2), dtype=np.int64)
    fine[..., 0] = tgt_x + factor * (coarse[..., 0] - coarse_tx)
    fine[..., 1] = tgt_y + factor * (coarse[..., 1] - coarse_ty)
    fine[..., 0] = np.clip(fine[..., 0], half, w - 1 - half)
    fine[..., 1] = np.clip(fine[..., 1], half, h - 1 - half)
    return NNField(patch_size=patch, coords=fine, costs=np.zeros((gh, gw)))


def synthesize_frame(guides: GuideStack, style: np.ndarray, params: SynthesisParams) -> np.ndarray:
    """Coarse-to-fine synthesis of one target frame from the edited exemplar.

    Builds an image pyramid (halving until the min dimension is at or below
    pyramid_min_dim), and per level alternates em_rounds of search and vote;
    the style coherence term engages once the level's first vote exists. The
    NNF is upsampled between levels with offsets scaled accordingly.
    """
    params.validate()
    guides.validate()
    style = np.asarray(style, dtype=np.float64)
    if style.shape[:2] != guides.shape:
        raise ValueError("style must share the guide stack resolution")

    factors = [1]
    h, w = guides.shape
    while min(h, w) > params.pyramid_min_dim:
        h = -(-h // params.pyramid_factor)
        w = -(-w // params.pyramid_factor)
        if min(h, w) < params.patch_size:
            break
        factors.append(factors[-1] * params.pyramid_factor)

    levels = []
    for factor in factors:
        if factor == 1:
            levels.append((guides, style))
        else:
            levels.append((_downscale_stack(guides, factor), box_downscale(style, factor)))
    levels = levels[::-1]  # coarse to fine

    nnf = None
    current = None
    for lvl, (g, s) in enumerate(levels):
        current = None  # style term re-engages after this level's first vote
        for rnd in range(params.em_rounds):
            seed = derive_seed(params.rng_seed, lvl, rnd)
            nnf = nnf_search(g, s, current, replace(params, rng_seed=seed), init=nnf)
            current = vote(nnf, s, params.patch_size)
        if lvl + 1 < len(levels):
            nnf = _upsample_nnf(nnf, params.pyramid_factor, levels[lvl + 1][0].shape)
    return current


def propagate_sequence(dataset, exemplar_index: int, edited_exemplar: np.ndarray,
                       targets: list[np.ndarray], params: SynthesisParams,
                       weights: GuideWeights | None = None, blur_radius: int = 3,
                       workers: int = 1) -> list[np.ndarray]:
    """Stylize every frame of a sequence from one edited exemplar.

    targets are the per-frame appearance images aligned with dataset order
    (the exemplar's slot provides the matching source appearance). Frames are
    independent; each derives its own seed from params.rng_seed, so results
    do not depend on worker scheduling. The exemplar slot returns the edited
    exemplar unchanged.
    """
    n = len(dataset.frames)
    if len(targets) != n:
        raise ValueError(f"got {len(targets)} target images for {n} frames")
    if not (0 <= exemplar_index < n):
        raise ValueError(f"exemplar index {exemplar_index} out of range for {n} frames")
    src_img = targets[exemplar_index]
    src_mask = dataset.mask(exemplar_index)
    src_lm = dataset.frames[exemplar_index].landmarks

    def synth(i: int) -> np.ndarray:
        if i == exemplar_index:
            return np.array(edited_exemplar, dtype=np.float64, copy=True)
        stack = build_guides(src_img, src_mask, src_lm,
                             targets[i], dataset.mask(i), dataset.frames[i].landmarks,
                             weights=weights, blur_radius=blur_radius)
        return synthesize_frame(stack, edited_exemplar,
                                replace(params, rng_seed=derive_seed(params.rng_seed, i)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(synth, range(n)))
    return [synth(i) for i in range(n)]
