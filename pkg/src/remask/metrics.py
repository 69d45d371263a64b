"""Desk-scale evaluation: alignment, exact likelihood, diversity, drop counts.

These replace perceptual metrics: the toy world admits exact computation, so
orderings between strategies (not absolute magnitudes) are the reproducible
content. All metrics are pure functions of their inputs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError
from .grid import Condition, TokenGrid
from .sampling import Trajectory
from .toyworld import ToyWorld, alignment_score


def alignment_rate(samples: list[TokenGrid], world: ToyWorld, cond: Condition) -> float:
    """Mean posterior probability of the condition over the samples."""
    if not samples:
        raise EmptyInputError("alignment_rate needs at least one sample")
    return float(np.mean([alignment_score(world, cond, g) for g in samples]))


@dataclass(frozen=True)
class NllResult:
    """Mean negative log-likelihood; zero-probability samples contribute +inf
    and are counted instead of raising."""

    value: float
    zero_probability_count: int


def exact_nll(samples: list[TokenGrid], world: ToyWorld, cond: Condition) -> NllResult:
    """Mean -ln p_c(sample) in nats per grid under the true joint."""
    if not samples:
        raise EmptyInputError("exact_nll needs at least one sample")
    total = 0.0
    zeros = 0
    for g in samples:
        lp = world.log_prob(cond, g)
        if np.exp(lp) == 0.0:  # probability underflows to an exact zero
            zeros += 1
            total = np.inf
        else:
            total += -lp
    return NllResult(value=float(total / len(samples)), zero_probability_count=zeros)


def diversity_entropy(samples: list[TokenGrid], region) -> float:
    """Empirical entropy (nats) of the token histogram pooled over region cells."""
    region = np.asarray(region, dtype=np.int64)
    if region.size == 0:
        raise EmptyInputError("diversity_entropy needs a non-empty region")
    if not samples:
        raise EmptyInputError("diversity_entropy needs at least one sample")
    tokens = np.concatenate([g.cells[region] for g in samples])
    counts = np.bincount(tokens)
    p = counts[counts > 0] / tokens.shape[0]
    return float(-(p * np.log(p)).sum())


def resample_count_stats(traj: Trajectory) -> np.ndarray:
    """Per-location count of steps at which a previously kept token was dropped."""
    n = traj.steps[0].state.n_cells
    drops = np.zeros(n, dtype=np.int64)
    prev_kept = None
    for step in traj.steps:
        kept_mask = np.zeros(n, dtype=bool)
        kept_mask[step.kept] = True
        if prev_kept is not None:
            drops[prev_kept & ~kept_mask] += 1
        prev_kept = kept_mask
    return drops


CSV_COLUMNS = (
    "world",
    "condition",
    "strategy",
    "T",
    "w",
    "phi",
    "s",
    "seed",
    "alignment_rate",
    "exact_nll",
    "diversity_low",
    "diversity_high",
    "mean_drops",
    "error",
)


def write_metrics_csv(path, rows: list[dict]) -> None:
    """One row per (world, condition, strategy, T, w, phi, s, seed)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        _write_rows(fh, rows)


def metrics_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    _write_rows(buf, rows)
    return buf.getvalue()


def _write_rows(fh, rows: list[dict]) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
    writer.writeheader()
    for row in rows:
        out = {}
        for col in CSV_COLUMNS:
            v = row.get(col, "")
            if isinstance(v, float):
                v = repr(v)
            out[col] = v
        writer.writerow(out)


def read_metrics_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
