"""Token-grid data model, mask schedules and weighted selection primitives.

Grids are immutable row-major lattices of codebook ids with MASK = -1 as the
reserved sentinel. All randomness flows through an explicit numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_locations, check_rng, check_weights
from .errors import InfeasibleSampleError, InvalidScheduleError, ShapeError

MASK = -1


@dataclass(frozen=True)
class Codebook:
    """Token alphabet of ``size`` ids 0..size-1 (MASK excluded)."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"codebook size must be >= 2, got {self.size}")


@dataclass(frozen=True)
class Condition:
    """Discrete condition label with its ordered component list.

    Components play the role of caption words; potentials and cross-attention
    maps are addressed per component label.
    """

    id: int
    components: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise ValueError("condition needs at least one component")


@dataclass(frozen=True)
class TokenGrid:
    """Immutable height x width grid of token ids, MASK = -1, row-major."""

    height: int
    width: int
    cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1).copy()
        if self.height < 1 or self.width < 1:
            raise ShapeError("grid dims must be positive")
        if cells.shape[0] != self.height * self.width:
            raise ShapeError(
                f"expected {self.height * self.width} cells, got {cells.shape[0]}"
            )
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @property
    def is_complete(self) -> bool:
        return not np.any(self.cells == MASK)

    def with_cells(self, cells) -> "TokenGrid":
        return TokenGrid(self.height, self.width, cells)

    @staticmethod
    def fully_masked(height: int, width: int) -> "TokenGrid":
        return TokenGrid(height, width, np.full(height * width, MASK, dtype=np.int64))

    def validate_tokens(self, codebook_size: int) -> None:
        bad = (self.cells != MASK) & ((self.cells < 0) | (self.cells >= codebook_size))
        if np.any(bad):
            raise ValueError(f"token ids outside [0, {codebook_size}) at {np.flatnonzero(bad).tolist()}")


def masked_set(grid: TokenGrid) -> np.ndarray:
    """Indices of MASK cells, sorted (the paper's A_t)."""
    return np.flatnonzero(grid.cells == MASK).astype(np.int64)


def complement(locations: np.ndarray, n: int) -> np.ndarray:
    keep = np.ones(n, dtype=bool)
    keep[locations] = False
    return np.flatnonzero(keep).astype(np.int64)


def apply_keep(predicted: TokenGrid, keep) -> TokenGrid:
    """MASK everything outside ``keep``; predicted must be fully revealed."""
    if not predicted.is_complete:
        raise ValueError("apply_keep requires a fully revealed predicted grid")
    keep = check_locations(keep, predicted.n_cells)
    cells = np.full(predicted.n_cells, MASK, dtype=np.int64)
    cells[keep] = predicted.cells[keep]
    return predicted.with_cells(cells)


@dataclass(frozen=True)
class MaskSchedule:
    """Per-step keep counts in generation order: counts[0] = k_T, ..., counts[-1] = k_1.

    The cumulative kept total after the step at index s is sum(counts[:s+1]);
    it reaches N at the final step.
    """

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise InvalidScheduleError("schedule needs at least one step")
        if any(c < 0 for c in counts):
            raise InvalidScheduleError("keep counts must be non-negative")
        if sum(counts) <= 0:
            raise InvalidScheduleError("schedule must reveal at least one token")

    @property
    def steps(self) -> int:
        return len(self.counts)

    @property
    def n_tokens(self) -> int:
        return sum(self.counts)

    def count_at(self, t: int) -> int:
        """k_t for step t in T..1."""
        return self.counts[self.steps - t]

    def kept_total(self, t: int) -> int:
        """m(t) = k_T + ... + k_t."""
        return sum(self.counts[: self.steps - t + 1])


def make_linear_schedule(n_tokens: int, steps: int) -> MaskSchedule:
    """Equal keep counts, remainder on the earliest steps."""
    _check_schedule_args(n_tokens, steps)
    base, rem = divmod(n_tokens, steps)
    counts = [base + 1] * rem + [base] * (steps - rem)
    return MaskSchedule(tuple(counts))


def make_cosine_schedule(n_tokens: int, steps: int) -> MaskSchedule:
    """Keep counts proportional to increments of cos((t/T) * pi/2).

    Early steps reveal few tokens, later steps reveal many. Cumulative targets
    are rounded and then repaired so each step keeps at least one token and the
    totals still sum to N.
    """
    _check_schedule_args(n_tokens, steps)
    cum = []
    prev = 0
    for s in range(1, steps + 1):
        target = int(round(n_tokens * (1.0 - np.cos(np.pi * s / (2.0 * steps)))))
        target = max(target, prev + 1)            # every step reveals something
        target = min(target, n_tokens - (steps - s))  # leave room for later steps
        cum.append(target)
        prev = target
    cum[-1] = n_tokens
    counts = [cum[0]] + [cum[s] - cum[s - 1] for s in range(1, steps)]
    return MaskSchedule(tuple(counts))


def _check_schedule_args(n_tokens: int, steps: int) -> None:
    if steps < 1 or steps > n_tokens:
        raise InvalidScheduleError(
            f"need 1 <= steps <= n_tokens, got steps={steps}, n_tokens={n_tokens}"
        )


def weighted_sample_without_replacement(weights, m: int, rng) -> np.ndarray:
    """Sequential weighted draws: pick proportional to weight, remove, renormalize.

    Returns m distinct indices, sorted. Deterministic given the rng state.
    """
    rng = check_rng(rng)
    w = check_weights(weights).copy()
    m = int(m)
    n_positive = int(np.count_nonzero(w > 0))
    if m < 0:
        raise ValueError("m must be non-negative")
    if m > n_positive:
        raise InfeasibleSampleError(
            f"asked for {m} draws but only {n_positive} positive-weight locations"
        )
    picked = np.empty(m, dtype=np.int64)
    for d in range(m):
        cum = np.cumsum(w)
        r = rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, r, side="right"))
        idx = min(idx, w.shape[0] - 1)
        picked[d] = idx
        w[idx] = 0.0
    picked.sort()
    return picked


def sample_categorical_rows(dists, rng) -> np.ndarray:
    """One inverse-CDF draw per row of an N x K row-stochastic matrix."""
    rng = check_rng(rng)
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError(f"expected a 2-D distribution matrix, got shape {d.shape}")
    cum = np.cumsum(d, axis=1)
    u = rng.random(d.shape[0]) * cum[:, -1]
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.clip(idx, 0, d.shape[1] - 1).astype(np.int64)


def grid_to_text(grid: TokenGrid, codebook_size: int) -> str:
    """Plain-text dump: 'H W K' header then H rows, MASK written as -1."""
    lines = [f"{grid.height} {grid.width} {codebook_size}"]
    cells = grid.cells.reshape(grid.height, grid.width)
    for row in cells:
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def grid_from_text(text: str) -> tuple[TokenGrid, int]:
    """Parse the plain-text dump; returns (grid, codebook size)."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty grid text")
    header = lines[0].split()
    if len(header) != 3:
        raise ValueError(f"expected 'H W K' header, got {lines[0]!r}")
    h, w, k = (int(x) for x in header)
    if len(lines) != h + 1:
        raise ValueError(f"expected {h} rows, got {len(lines) - 1}")
    cells = []
    for ln in lines[1:]:
        row = [int(x) for x in ln.split()]
        if len(row) != w:
            raise ValueError(f"expected {w} columns, got {len(row)} in {ln!r}")
        cells.extend(row)
    grid = TokenGrid(h, w, np.asarray(cells, dtype=np.int64))
    grid.validate_tokens(k)
    return grid, k
