"""Token-selection strategies and the masked-diffusion generation loop.

Six strategies: two fixed (uniform, purity), two revocable (random revoke,
persistent with weight w), and two learned (TCTS and TCTS with frequency
adaptive sampling). Persistent interpolates random revoke (w=1) and uniform
fixed (w=INFINITE, handled symbolically so the equivalence is exact).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_prob_rows, check_rng, check_unit_interval, check_weights
from .errors import ConfigurationError, ShapeError
from .grid import (
    MASK,
    Condition,
    MaskSchedule,
    TokenGrid,
    apply_keep,
    complement,
    grid_to_text,
    masked_set,
    sample_categorical_rows,
    weighted_sample_without_replacement,
)
from .selector import ScoreMap

INFINITE = math.inf
DEFAULT_PERSISTENT_WEIGHT = 15.0
DEFAULT_ATTENTION_THRESHOLD = 0.45
DEFAULT_GUIDANCE_SCALE = 5.0

_WEIGHT_FLOOR = 1e-9


class Strategy:
    """Base tag for token-selection strategies."""

    requires_selector = False


@dataclass(frozen=True)
class UniformFixed(Strategy):
    pass


@dataclass(frozen=True)
class Purity(Strategy):
    pass


@dataclass(frozen=True)
class RandomRevoke(Strategy):
    pass


@dataclass(frozen=True)
class Persistent(Strategy):
    w: float = DEFAULT_PERSISTENT_WEIGHT

    def __post_init__(self):
        if not (self.w >= 1.0):
            raise ValueError(f"persistent weight must be >= 1, got {self.w}")


@dataclass(frozen=True)
class Tcts(Strategy):
    w: float = DEFAULT_PERSISTENT_WEIGHT
    deterministic: bool = False
    requires_selector = True

    def __post_init__(self):
        if not (1.0 <= self.w < INFINITE):
            raise ValueError(f"TCTS weight must be finite and >= 1, got {self.w}")


@dataclass(frozen=True)
class TctsFas(Strategy):
    w: float = DEFAULT_PERSISTENT_WEIGHT
    phi: float = DEFAULT_ATTENTION_THRESHOLD
    deterministic: bool = False
    requires_selector = True

    def __post_init__(self):
        if not (1.0 <= self.w < INFINITE):
            raise ValueError(f"FAS weight must be finite and >= 1, got {self.w}")
        check_unit_interval(self.phi, "phi")


def confidence_map(dists) -> ScoreMap:
    """Purity confidence: max over the codebook per location."""
    d = check_prob_rows(dists)
    return ScoreMap(d.max(axis=1))


def persistent_weights(masked_locations, w: float, n: int) -> np.ndarray:
    """Weight 1 on masked locations, w on previously kept ones."""
    if not (1.0 <= w < INFINITE):
        raise ValueError(f"persistent weight must be finite and >= 1, got {w}")
    weights = np.full(n, w, dtype=np.float64)
    weights[np.asarray(masked_locations, dtype=np.int64)] = 1.0
    return weights


def fas_weights(map_tc, map_sa, masked_locations, w: float, phi: float, n: int) -> np.ndarray:
    """Frequency-adaptive weighting of a score map.

    Previously kept locations whose attention value falls below phi (low
    frequency) are multiplied by w; masked locations by a = 1 + (w-1)*|A^C|/n;
    previously kept high-frequency locations keep their raw score.
    """
    tc = check_weights(map_tc, n)
    sa = np.asarray(map_sa, dtype=np.float64).reshape(-1)
    if sa.shape[0] != n:
        raise ShapeError(f"attention map must have {n} entries, got {sa.shape[0]}")
    if not (1.0 <= w < INFINITE):
        raise ValueError(f"FAS weight must be finite and >= 1, got {w}")
    check_unit_interval(phi, "phi")
    masked = np.asarray(masked_locations, dtype=np.int64)
    kept = np.ones(n, dtype=bool)
    kept[masked] = False
    a = 1.0 + (w - 1.0) * ((n - masked.shape[0]) / n)
    out = tc.copy()
    out[kept & (sa < phi)] *= w
    out[masked] *= a
    return out


@dataclass
class StepState:
    """Inputs select_keep needs at one diffusion step."""

    t: int
    grid: TokenGrid
    output: "object"
    schedule: MaskSchedule
    rng: np.random.Generator
    score_map: ScoreMap | None = None
    region: np.ndarray | None = None


def select_keep(strategy: Strategy, state: StepState) -> np.ndarray:
    """Kept locations at step t; size equals m(t) within the active region."""
    rng = check_rng(state.rng)
    n = state.grid.n_cells
    region = (
        np.arange(n, dtype=np.int64)
        if state.region is None
        else np.asarray(state.region, dtype=np.int64)
    )
    in_region = np.zeros(n, dtype=bool)
    in_region[region] = True
    masked = masked_set(state.grid)
    if not np.all(in_region[masked]):
        raise ValueError("masked cells outside the regeneration region")
    kept_prev = region[~np.isin(region, masked)]
    m = state.schedule.kept_total(state.t)
    k_t = state.schedule.count_at(state.t)

    if isinstance(strategy, (UniformFixed, Purity)) or (
        isinstance(strategy, Persistent) and strategy.w == INFINITE
    ):
        if isinstance(strategy, Purity):
            conf = state.output.dists.max(axis=1)
            order = np.lexsort((masked, -conf[masked]))
            fresh = masked[order[:k_t]]
        else:
            weights = np.zeros(n)
            weights[masked] = 1.0
            fresh = weighted_sample_without_replacement(weights, k_t, rng)
        keep = np.sort(np.concatenate([kept_prev, fresh]))
    elif isinstance(strategy, RandomRevoke):
        weights = np.zeros(n)
        weights[region] = 1.0
        keep = weighted_sample_without_replacement(weights, m, rng)
    elif isinstance(strategy, Persistent):
        weights = np.zeros(n)
        weights[masked] = 1.0
        weights[kept_prev] = strategy.w
        keep = weighted_sample_without_replacement(weights, m, rng)
    elif isinstance(strategy, (Tcts, TctsFas)):
        if state.score_map is None:
            raise ConfigurationError(f"{type(strategy).__name__} needs a score map")
        region_n = region.shape[0]
        tc = state.score_map.values[region]
        masked_in_region = np.searchsorted(region, masked)
        if isinstance(strategy, TctsFas):
            sa = state.output.self_attention_map[region]
            phi = strategy.phi
        else:
            sa = np.ones(region_n)  # empty low-frequency split: plain TCTS
            phi = 0.0
        w_region = fas_weights(tc, sa, masked_in_region, strategy.w, phi, region_n)
        weights = np.zeros(n)
        weights[region] = w_region
        if strategy.deterministic:
            order = np.lexsort((np.arange(n), -weights))
            keep = np.sort(order[:m])
        else:
            keep = weighted_sample_without_replacement(_floored(weights), m, rng)
    else:
        raise ConfigurationError(f"unknown strategy {strategy!r}")

    if keep.shape[0] != m:
        raise AssertionError(f"kept {keep.shape[0]} locations, expected m(t)={m}")
    return keep


def _floored(weights: np.ndarray) -> np.ndarray:
    """Relative floor so every location stays drawable; scale-free."""
    top = weights.max()
    if top <= 0.0:
        return np.ones_like(weights)
    return np.maximum(weights, _WEIGHT_FLOOR * top)


@dataclass(frozen=True)
class TrajectoryStep:
    t: int
    kept: np.ndarray
    predicted: TokenGrid
    state: TokenGrid


@dataclass
class Trajectory:
    steps: list[TrajectoryStep] = field(default_factory=list)

    @property
    def final(self) -> TokenGrid:
        return self.steps[-1].state

    def kept_sets(self) -> list[np.ndarray]:
        return [s.kept for s in self.steps]


def generate(
    gen,
    selector,
    strategy: Strategy,
    schedule: MaskSchedule,
    cond: Condition,
    guidance: float,
    rng,
    *,
    initial_grid: TokenGrid | None = None,
    predict_mode: str = "sample",
) -> tuple[TokenGrid, Trajectory]:
    """Full masked-diffusion loop, t = T..1.

    Each step predicts a complete grid (masked cells sampled from the guided
    categoricals, revealed cells copied), scores it if the strategy needs a
    selector, selects the kept set and re-masks the rest. When ``initial_grid``
    is partially revealed, only its masked region is regenerated and the
    schedule must cover exactly that region.
    """
    return _run(gen, selector, lambda t: strategy, schedule, cond, guidance, rng,
                initial_grid=initial_grid, predict_mode=predict_mode)


def switch_strategy_generate(
    gen,
    selector,
    strategy_early: Strategy,
    strategy_late: Strategy,
    switch_step: int,
    schedule: MaskSchedule,
    cond: Condition,
    guidance: float,
    rng,
    *,
    initial_grid: TokenGrid | None = None,
    predict_mode: str = "sample",
) -> tuple[TokenGrid, Trajectory]:
    """strategy_early for t > switch_step, strategy_late for t <= switch_step."""
    if not 1 <= switch_step <= schedule.steps:
        raise ConfigurationError(
            f"switch_step must lie in [1, {schedule.steps}], got {switch_step}"
        )
    return _run(
        gen,
        selector,
        lambda t: strategy_early if t > switch_step else strategy_late,
        schedule,
        cond,
        guidance,
        rng,
        initial_grid=initial_grid,
        predict_mode=predict_mode,
    )


def _run(gen, selector, strategy_at, schedule, cond, guidance, rng, *, initial_grid, predict_mode):
    rng = check_rng(rng)
    if predict_mode not in ("sample", "argmax"):
        raise ConfigurationError(f"predict_mode must be sample|argmax, got {predict_mode!r}")
    if initial_grid is None:
        grid = TokenGrid.fully_masked(gen.height, gen.width)
    else:
        if (initial_grid.height, initial_grid.width) != (gen.height, gen.width):
            raise ShapeError("initial grid dims do not match the generator")
        grid = initial_grid
    region = masked_set(grid)
    fixed = complement(region, grid.n_cells)
    if schedule.n_tokens != region.shape[0]:
        raise ConfigurationError(
            f"schedule covers {schedule.n_tokens} tokens but {region.shape[0]} cells are masked"
        )
    needs_selector = any(
        strategy_at(t).requires_selector for t in range(schedule.steps, 0, -1)
    )
    if needs_selector and selector is None:
        raise ConfigurationError("strategy requires a selector but none was given")

    traj = Trajectory()
    for t in range(schedule.steps, 0, -1):
        strategy = strategy_at(t)
        output = gen.predict(grid, cond, guidance, need_attention=isinstance(strategy, TctsFas))
        xhat = fill_masked(grid, output.dists, rng, predict_mode)
        score_map = selector.score(xhat, cond) if strategy.requires_selector else None
        keep_region = select_keep(
            strategy,
            StepState(
                t=t,
                grid=grid,
                output=output,
                schedule=schedule,
                rng=rng,
                score_map=score_map,
                region=region,
            ),
        )
        keep = np.sort(np.concatenate([keep_region, fixed])) if fixed.size else keep_region
        grid = apply_keep(xhat, keep)
        traj.steps.append(TrajectoryStep(t=t, kept=keep, predicted=xhat, state=grid))
    if not grid.is_complete:
        raise AssertionError("generation finished with MASK cells remaining")
    return grid, traj


def fill_masked(grid: TokenGrid, dists: np.ndarray, rng, mode: str = "sample") -> TokenGrid:
    """Complete x_hat: revealed cells copied, masked cells drawn from dists."""
    masked = masked_set(grid)
    cells = np.array(grid.cells)
    if masked.size:
        if mode == "sample":
            cells[masked] = sample_categorical_rows(dists[masked], rng)
        else:
            cells[masked] = dists[masked].argmax(axis=1)
    return grid.with_cells(cells)


def write_trajectory(path, traj: Trajectory, codebook_size: int, config_hash: str, seed) -> None:
    """One file per run: header with config hash and seed, then per-step blocks."""
    lines = [f"{config_hash} {seed}"]
    for step in traj.steps:
        lines.append(f"step {step.t}")
        lines.append("kept " + " ".join(str(int(i)) for i in step.kept))
        lines.append("predicted")
        lines.append(grid_to_text(step.predicted, codebook_size).rstrip("\n"))
        lines.append("state")
        lines.append(grid_to_text(step.state, codebook_size).rstrip("\n"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
