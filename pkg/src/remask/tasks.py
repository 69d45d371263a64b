"""Applications of the sampling engine: refinement, mask-free editing, upscaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_rng
from .errors import InvalidComponentError, InvalidTilingError, ShapeError
from .grid import (
    Condition,
    TokenGrid,
    make_linear_schedule,
    weighted_sample_without_replacement,
)
from .sampling import MASK, UniformFixed, fill_masked, generate


def refine_steps(
    grid: TokenGrid,
    gen,
    selector,
    steps: int,
    cond: Condition,
    guidance: float,
    rng,
    *,
    fraction: float = 1.0,
) -> TokenGrid:
    """Revision rounds: re-mask low-scoring locations by weight (1 - score), refill.

    Each of the ``steps`` rounds re-masks round(fraction*N/steps) locations
    (at least one) drawn without replacement by weight 1 - score, then fills
    them in one guided prediction pass. steps=0 returns the grid unchanged.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return grid
    if not grid.is_complete:
        raise ValueError("refine_steps requires a fully revealed grid")
    rng = check_rng(rng)
    n = grid.n_cells
    per_round = min(n, max(1, int(round(fraction * n / steps))))
    for _ in range(steps):
        score = selector.score(grid, cond)
        weights = _positive(1.0 - score.values)
        remask = weighted_sample_without_replacement(weights, per_round, rng)
        cells = np.array(grid.cells)
        cells[remask] = MASK
        masked_grid = grid.with_cells(cells)
        dists = gen.guided_predict(masked_grid, cond, guidance)
        grid = fill_masked(masked_grid, dists, rng, "sample")
    return grid


def refine_mask_lowest(
    grid: TokenGrid,
    gen,
    selector,
    fraction: float,
    cond: Condition,
    guidance: float,
    rng,
    *,
    inner_steps: int = 8,
) -> TokenGrid:
    """Deterministically mask the floor(fraction*N) lowest-scoring locations
    (ties to the lower index) and regenerate them with uniform fixed sampling."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if not grid.is_complete:
        raise ValueError("refine_mask_lowest requires a fully revealed grid")
    rng = check_rng(rng)
    n = grid.n_cells
    m = int(math.floor(fraction * n))
    if m == 0:
        return grid
    score = selector.score(grid, cond)
    order = np.lexsort((np.arange(n), score.values))
    lowest = np.sort(order[:m])
    cells = np.array(grid.cells)
    cells[lowest] = MASK
    schedule = make_linear_schedule(m, min(inner_steps, m))
    out, _ = generate(
        gen, None, UniformFixed(), schedule, cond, guidance, rng,
        initial_grid=grid.with_cells(cells),
    )
    return out


@dataclass(frozen=True)
class EditRequest:
    """Mask-free edit: relocate an object by re-weighting the resampling."""

    source: TokenGrid
    old_condition: Condition
    new_condition: Condition
    component: str
    noise_ratio: float = 0.25
    steps: int = 10

    def __post_init__(self):
        if self.component not in self.new_condition.components:
            raise InvalidComponentError(
                f"component {self.component!r} not in condition {self.new_condition.id}"
            )
        if not 0.0 < self.noise_ratio < 1.0:
            raise ValueError(f"noise_ratio must lie in (0, 1), got {self.noise_ratio}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def edit_mask_free(req: EditRequest, gen, selector, guidance: float, rng, *, floor: float = 0.05) -> TokenGrid:
    """Each round re-masks ceil(noise_ratio*N) locations drawn by weight
    (1 - score) * (floor + cross-attention of the target component), then
    refills under the new condition."""
    if not req.source.is_complete:
        raise ValueError("edit source must be fully revealed")
    rng = check_rng(rng)
    grid = req.source
    n = grid.n_cells
    n_remask = min(n, int(math.ceil(req.noise_ratio * n)))
    for _ in range(req.steps):
        cross = gen.cross_attention_map(grid, req.new_condition, req.component)
        score = selector.score(grid, req.new_condition)
        weights = _positive((1.0 - score.values) * (floor + cross))
        remask = weighted_sample_without_replacement(weights, n_remask, rng)
        cells = np.array(grid.cells)
        cells[remask] = MASK
        masked_grid = grid.with_cells(cells)
        dists = gen.guided_predict(masked_grid, req.new_condition, guidance)
        grid = fill_masked(masked_grid, dists, rng, "sample")
    return grid


def upsample_token_map(grid: TokenGrid, embeddings, factor: int) -> TokenGrid:
    """Bicubic upsampling of the embedded token field, then nearest-embedding
    quantization (Euclidean, ties to the lower id)."""
    if factor < 2:
        raise ValueError(f"factor must be >= 2, got {factor}")
    if not grid.is_complete:
        raise ValueError("upsample_token_map requires a fully revealed grid")
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ShapeError("embeddings must be a K x d table")
    if grid.cells.max() >= emb.shape[0]:
        raise ShapeError("grid holds token ids outside the embedding table")
    h, w = grid.height, grid.width
    field = emb[grid.cells].reshape(h, w, -1)
    wy = _bicubic_matrix(h, h * factor)
    wx = _bicubic_matrix(w, w * factor)
    up = np.einsum("oi,ijd->ojd", wy, field)
    up = np.einsum("pj,ojd->opd", wx, up)
    flat = up.reshape(-1, emb.shape[1])
    d2 = (flat**2).sum(axis=1, keepdims=True) - 2.0 * flat @ emb.T + (emb**2).sum(axis=1)
    tokens = d2.argmin(axis=1)
    return TokenGrid(h * factor, w * factor, tokens)


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys bicubic convolution kernel; interpolates through the samples."""
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    out[near] = (a + 2.0) * ax[near] ** 3 - (a + 3.0) * ax[near] ** 2 + 1.0
    out[far] = a * ax[far] ** 3 - 5.0 * a * ax[far] ** 2 + 8.0 * a * ax[far] - 4.0 * a
    return out


def _bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, aligned corners, clamped borders."""
    weights = np.zeros((n_out, n_in))
    if n_in == 1:
        weights[:, 0] = 1.0
        return weights
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    base = np.floor(src).astype(np.int64)
    for tap in range(-1, 3):
        pos = base + tap
        k = _cubic_kernel(src - pos)
        clamped = np.clip(pos, 0, n_in - 1)
        np.add.at(weights, (np.arange(n_out), clamped), k)
    return weights


def upscale_tiled(
    grid: TokenGrid,
    gen,
    selector,
    window: tuple[int, int],
    overlap: int,
    passes: int,
    cond: Condition,
    guidance: float,
    rng,
    *,
    revision_steps: int = 2,
) -> TokenGrid:
    """Cover the grid with overlapping windows and refine each in raster order.

    Later windows overwrite overlap regions (last writer wins); within a pass
    windows see earlier updates. passes=0 is the identity.
    """
    wh, ww = int(window[0]), int(window[1])
    if (wh, ww) != (gen.height, gen.width):
        raise InvalidTilingError(
            f"window {wh}x{ww} does not match generator dims {gen.height}x{gen.width}"
        )
    if wh > grid.height or ww > grid.width:
        raise InvalidTilingError("window larger than the grid")
    if not 0 <= overlap < min(wh, ww):
        raise InvalidTilingError(f"overlap must lie in [0, min(window)), got {overlap}")
    if passes < 0:
        raise ValueError("passes must be >= 0")
    if not grid.is_complete:
        raise ValueError("upscale_tiled requires a fully revealed grid")
    rng = check_rng(rng)
    row_starts = _tile_starts(grid.height, wh, overlap)
    col_starts = _tile_starts(grid.width, ww, overlap)
    covered = np.zeros((grid.height, grid.width), dtype=bool)
    for r0 in row_starts:
        for c0 in col_starts:
            covered[r0 : r0 + wh, c0 : c0 + ww] = True
    if not covered.all():
        raise AssertionError("tiling failed to cover the grid")
    cells = np.array(grid.cells).reshape(grid.height, grid.width)
    for _ in range(passes):
        for r0 in row_starts:
            for c0 in col_starts:
                sub = TokenGrid(wh, ww, cells[r0 : r0 + wh, c0 : c0 + ww].reshape(-1))
                refined = refine_steps(sub, gen, selector, revision_steps, cond, guidance, rng)
                cells[r0 : r0 + wh, c0 : c0 + ww] = refined.cells.reshape(wh, ww)
    return TokenGrid(grid.height, grid.width, cells.reshape(-1))


def _tile_starts(extent: int, window: int, overlap: int) -> list[int]:
    stride = window - overlap
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def _positive(weights: np.ndarray) -> np.ndarray:
    top = weights.max()
    if top <= 0.0:
        return np.ones_like(weights)
    return np.maximum(weights, 1e-9 * top)
