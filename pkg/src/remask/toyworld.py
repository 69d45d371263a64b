"""Exactly enumerable ground-truth distributions over small token grids.

A world is a family of Gibbs distributions over complete grids, one per
condition. Potentials are attributed to *component* labels; a condition's
log-potential is the sum of its components' unary and 4-neighbor edge tables.
That makes "the condition with one component removed" well-defined, which the
cross-attention oracle needs.

Worlds whose active components carry no edge potentials factorize over
locations and are evaluated without materializing the K^N table, so large
unary-only worlds stay exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from ._validation import check_prob_rows, check_rng
from .errors import (
    EnumerationTooLargeError,
    ImpossibleEvidenceError,
    InvalidComponentError,
)
from .grid import MASK, Codebook, Condition, TokenGrid

ENUMERATION_BUDGET = 10_000_000


@dataclass(frozen=True, eq=False)
class ToyWorld:
    codebook: Codebook
    height: int
    width: int
    conditions: tuple[Condition, ...]
    unary: dict[str, tuple[tuple[int, np.ndarray], ...]]
    edges: dict[str, tuple[tuple[int, int, np.ndarray], ...]]
    regions: tuple[str, ...] | None = None

    def __post_init__(self):
        n = self.height * self.width
        k = self.codebook.size
        object.__setattr__(self, "conditions", tuple(self.conditions))
        ids = [c.id for c in self.conditions]
        if not ids:
            raise ValueError("world needs at least one condition")
        if len(set(ids)) != len(ids):
            raise ValueError("condition ids must be unique")

        unary = {}
        for comp, entries in self.unary.items():
            rows = []
            for i, weights in entries:
                i = int(i)
                w = np.asarray(weights, dtype=np.float64).reshape(-1)
                if not 0 <= i < n:
                    raise ValueError(f"unary location {i} outside grid")
                if w.shape[0] != k:
                    raise ValueError(f"unary table at {i} must have {k} entries")
                if np.any(np.isnan(w)) or np.any(np.isposinf(w)):
                    raise ValueError("unary weights must be finite or -inf-like")
                w.setflags(write=False)
                rows.append((i, w))
            unary[comp] = tuple(rows)
        object.__setattr__(self, "unary", unary)

        edges = {}
        for comp, entries in self.edges.items():
            rows = []
            for i, j, table in entries:
                i, j = int(i), int(j)
                if j < i:
                    i, j = j, i
                    table = np.asarray(table, dtype=np.float64).T
                t = np.ascontiguousarray(np.asarray(table, dtype=np.float64))
                if t.shape != (k, k):
                    raise ValueError(f"edge table ({i},{j}) must be {k}x{k}")
                if not _is_neighbor(i, j, self.width, n):
                    raise ValueError(f"edge ({i},{j}) is not a 4-neighbor pair")
                if np.any(np.isnan(t)) or np.any(np.isposinf(t)):
                    raise ValueError("edge weights must be finite or -inf-like")
                t.setflags(write=False)
                rows.append((i, j, t))
            edges[comp] = tuple(rows)
        object.__setattr__(self, "edges", edges)

        if self.regions is not None:
            regions = tuple(str(r) for r in self.regions)
            if len(regions) != n:
                raise ValueError(f"regions must have {n} labels")
            bad = set(regions) - {"low_freq", "high_freq"}
            if bad:
                raise ValueError(f"unknown region labels {sorted(bad)}")
            object.__setattr__(self, "regions", regions)

        object.__setattr__(self, "_cache", {})

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def condition(self, cid: int) -> Condition:
        for c in self.conditions:
            if c.id == cid:
                return c
        raise KeyError(f"no condition with id {cid}")

    def region_locations(self, label: str) -> np.ndarray:
        if self.regions is None:
            raise ValueError("world has no region labels")
        return np.asarray([i for i, r in enumerate(self.regions) if r == label], dtype=np.int64)

    # -- internal potential machinery -------------------------------------

    def _tables(self, components: tuple[str, ...]):
        """Aggregated (N x K unary, edge list) for a component tuple."""
        key = ("tables", components)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        n, k = self.n_cells, self.codebook.size
        u = np.zeros((n, k), dtype=np.float64)
        edge_list: list[tuple[int, int, np.ndarray]] = []
        for comp in components:
            for i, w in self.unary.get(comp, ()):
                u[i] += w
            edge_list.extend(self.edges.get(comp, ()))
        result = (u, tuple(edge_list))
        self._cache[key] = result
        return result

    def _has_edges(self, components: tuple[str, ...]) -> bool:
        return bool(self._tables(components)[1])

    def _grids(self) -> np.ndarray:
        """All K^N grids, mixed-radix order (location 0 most significant)."""
        cached = self._cache.get("grids")
        if cached is None:
            n, k = self.n_cells, self.codebook.size
            if k**n > ENUMERATION_BUDGET:
                raise EnumerationTooLargeError(
                    f"K^N = {k}^{n} exceeds the enumeration budget of {ENUMERATION_BUDGET}"
                )
            cached = _all_grids(k, n)
            self._cache["grids"] = cached
        return cached

    def _joint(self, components: tuple[str, ...]):
        """(grids, probs, log_probs, log_z) over all K^N complete grids."""
        key = ("joint", components)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        n, k = self.n_cells, self.codebook.size
        grids = self._grids()
        u, edge_list = self._tables(components)
        lw = np.zeros(grids.shape[0], dtype=np.float64)
        for i in range(n):
            lw += u[i, grids[:, i]]
        for i, j, table in edge_list:
            lw += table[grids[:, i], grids[:, j]]
        log_z = _logsumexp(lw)
        if not np.isfinite(log_z):
            raise ValueError("partition function is zero: no grid has positive probability")
        log_probs = lw - log_z
        probs = np.exp(log_probs)
        result = (grids, probs, log_probs, log_z)
        self._cache[key] = result
        return result

    def _match_arrays(self):
        """Per-(location, token) boolean masks over the enumerated grids."""
        cached = self._cache.get("match")
        if cached is None:
            grids = self._grids()
            n, k = self.n_cells, self.codebook.size
            cached = {
                (i, v): np.ascontiguousarray(grids[:, i] == v)
                for i in range(n)
                for v in range(k)
            }
            self._cache["match"] = cached
        return cached

    def _token_indicators(self):
        """Per-token float indicator matrices (size x N) for fast marginals."""
        cached = self._cache.get("indicators")
        if cached is None:
            grids = self._grids()
            cached = [
                np.ascontiguousarray((grids == v).astype(np.float64))
                for v in range(self.codebook.size)
            ]
            self._cache["indicators"] = cached
        return cached

    def _unary_dists(self, components: tuple[str, ...]) -> np.ndarray:
        """Per-location softmax of the unary tables (factorized worlds only)."""
        key = ("unary_dists", components)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        u, _ = self._tables(components)
        shifted = u - u.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        dists = e / e.sum(axis=1, keepdims=True)
        dists.setflags(write=False)
        self._cache[key] = dists
        return dists

    def _log_z(self, components: tuple[str, ...]) -> float:
        key = ("log_z", components)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        if self._has_edges(components):
            log_z = self._joint(components)[3]
        else:
            u, _ = self._tables(components)
            log_z = float(sum(_logsumexp(u[i]) for i in range(self.n_cells)))
        self._cache[key] = log_z
        return log_z

    def log_prob(self, condition: Condition, grid: TokenGrid) -> float:
        """Exact log p_c(grid) for a complete grid."""
        if not grid.is_complete:
            raise ValueError("log_prob requires a fully revealed grid")
        u, edge_list = self._tables(condition.components)
        cells = grid.cells
        theta = float(u[np.arange(self.n_cells), cells].sum())
        for i, j, table in edge_list:
            theta += float(table[cells[i], cells[j]])
        return theta - self._log_z(condition.components)


def _is_neighbor(i: int, j: int, width: int, n: int) -> bool:
    if not (0 <= i < n and 0 <= j < n and i != j):
        return False
    same_row = (j == i + 1) and (i % width != width - 1)
    below = j == i + width
    return same_row or below


def _all_grids(k: int, n: int) -> np.ndarray:
    """All K^N grids as an array of cell vectors, index = mixed-radix code."""
    size = k**n
    idx = np.arange(size)
    grids = np.empty((size, n), dtype=np.int64)
    for pos in range(n - 1, -1, -1):
        grids[:, pos] = idx % k
        idx //= k
    return grids


def _logsumexp(a: np.ndarray) -> float:
    m = np.max(a)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(a - m))))


@dataclass(frozen=True)
class JointTable:
    """Exact probabilities for every complete grid under one condition.

    Grid index is the mixed-radix code with location 0 most significant.
    """

    condition: Condition
    probs: np.ndarray = field(repr=False)
    codebook_size: int
    height: int
    width: int
    log_z: float

    def decode(self, index: int) -> np.ndarray:
        n = self.height * self.width
        cells = np.empty(n, dtype=np.int64)
        for pos in range(n - 1, -1, -1):
            cells[pos] = index % self.codebook_size
            index //= self.codebook_size
        return cells

    def encode(self, cells) -> int:
        code = 0
        for v in np.asarray(cells, dtype=np.int64):
            code = code * self.codebook_size + int(v)
        return code


def enumerate_joint(world: ToyWorld, condition: Condition) -> JointTable:
    """Exact Gibbs distribution over all complete grids for the condition."""
    _, probs, _, log_z = world._joint(condition.components)
    return JointTable(
        condition=condition,
        probs=probs,
        codebook_size=world.codebook.size,
        height=world.height,
        width=world.width,
        log_z=log_z,
    )


def sample_true(world: ToyWorld, condition: Condition, rng) -> TokenGrid:
    """Draw a grid exactly from the world's conditional distribution."""
    rng = check_rng(rng)
    comps = condition.components
    if world._has_edges(comps):
        grids, probs, _, _ = world._joint(comps)
        cum = np.cumsum(probs)
        r = rng.random() * cum[-1]
        idx = min(int(np.searchsorted(cum, r, side="right")), probs.shape[0] - 1)
        cells = grids[idx].copy()
    else:
        dists = world._unary_dists(comps)
        cum = np.cumsum(dists, axis=1)
        u = rng.random(world.n_cells)
        cells = (u[:, None] >= cum).sum(axis=1).astype(np.int64)
        np.clip(cells, 0, world.codebook.size - 1, out=cells)
    return TokenGrid(world.height, world.width, cells)


def oracle_predictive(world: ToyWorld, condition: Condition, grid: TokenGrid) -> np.ndarray:
    """Exact p_c(x_i = j | revealed cells) for every location; point mass at revealed cells."""
    comps = condition.components
    n, k = world.n_cells, world.codebook.size
    cells = grid.cells
    revealed = np.flatnonzero(cells != MASK)

    if not world._has_edges(comps):
        dists = world._unary_dists(comps)
        if revealed.size and np.any(dists[revealed, cells[revealed]] <= 0.0):
            raise ImpossibleEvidenceError("revealed cells have zero probability under the condition")
        out = np.array(dists, copy=True)
        if revealed.size:
            out[revealed] = 0.0
            out[revealed, cells[revealed]] = 1.0
        return out

    key = ("predictive", comps, cells.tobytes())
    cached = world._cache.get(key)
    if cached is not None:
        return cached
    _, probs, _, _ = world._joint(comps)
    w = _consistent_weights(world, probs, cells, revealed)
    total = w.sum()
    if total <= 0.0:
        raise ImpossibleEvidenceError("revealed cells have zero probability under the condition")
    out = _marginals(world, w, total)
    if revealed.size:
        out[revealed] = 0.0
        out[revealed, cells[revealed]] = 1.0
    out.setflags(write=False)
    world._cache[key] = out
    return out


def _consistent_weights(world, probs, cells, revealed) -> np.ndarray:
    """probs masked to grids agreeing with the revealed cells."""
    if revealed.size == 0:
        return probs
    match = world._match_arrays()
    mask = match[(int(revealed[0]), int(cells[revealed[0]]))].copy()
    for i in revealed[1:]:
        np.logical_and(mask, match[(int(i), int(cells[i]))], out=mask)
    return probs * mask


def _marginals(world, w: np.ndarray, total: float) -> np.ndarray:
    """Per-location token marginals of a weight vector over all grids."""
    indicators = world._token_indicators()
    out = np.empty((world.n_cells, world.codebook.size), dtype=np.float64)
    for v, ind in enumerate(indicators):
        out[:, v] = w @ ind
    out /= total
    return out


def leave_one_out_predictive(world: ToyWorld, condition: Condition, grid: TokenGrid) -> np.ndarray:
    """p_c(x_i = j | revealed cells excluding i) for every location.

    Unlike oracle_predictive this never collapses a revealed location to a
    point mass; it is the uncertainty the world assigns to each cell given
    the rest, which the oracle scorer and frequency surrogate consume.
    """
    comps = condition.components
    n, k = world.n_cells, world.codebook.size
    cells = grid.cells
    revealed = np.flatnonzero(cells != MASK)

    if not world._has_edges(comps):
        return np.array(world._unary_dists(comps), copy=True)

    key = ("loo", comps, cells.tobytes())
    cached = world._cache.get(key)
    if cached is not None:
        return cached
    _, probs, _, _ = world._joint(comps)
    match = world._match_arrays()
    indicators = world._token_indicators()
    if revealed.size:
        n_match = np.zeros(probs.shape[0], dtype=np.int16)
        for i in revealed:
            n_match += match[(int(i), int(cells[i]))]
        all_match = n_match == revealed.size
    else:
        all_match = np.ones(probs.shape[0], dtype=bool)
    w_all = probs * all_match
    total_all = w_all.sum()
    if revealed.size == 0 and total_all <= 0.0:
        raise ImpossibleEvidenceError("partition function vanished")
    out = np.zeros((n, k), dtype=np.float64)
    revealed_set = set(int(i) for i in revealed)
    masked_done = False
    for i in range(n):
        if i in revealed_set:
            # drop location i from the evidence
            consistent = (n_match == revealed.size) | (
                (n_match == revealed.size - 1) & ~match[(i, int(cells[i]))]
            )
            w = probs * consistent
            total = w.sum()
            if total <= 0.0:
                raise ImpossibleEvidenceError(
                    f"no completion has positive probability at location {i}"
                )
            out[i] = [w @ ind[:, i] for ind in indicators]
            out[i] /= total
        else:
            if total_all <= 0.0:
                raise ImpossibleEvidenceError(
                    "revealed cells have zero probability under the condition"
                )
            if not masked_done:
                masked_marg = _marginals(world, w_all, total_all)
                masked_done = True
            out[i] = masked_marg[i]
    out.setflags(write=False)
    world._cache[key] = out
    return out


def alignment_score(world: ToyWorld, condition: Condition, grid: TokenGrid) -> float:
    """Posterior probability of the condition given the grid, uniform prior."""
    if not grid.is_complete:
        raise ValueError("alignment_score requires a fully revealed grid")
    logs = np.array([world.log_prob(c, grid) for c in world.conditions])
    target = [idx for idx, c in enumerate(world.conditions) if c.id == condition.id]
    if not target:
        raise KeyError(f"condition {condition.id} not part of this world")
    m = logs.max()
    if not np.isfinite(m):
        return 1.0 / len(world.conditions)
    p = np.exp(logs - m)
    return float(p[target[0]] / p.sum())


def oracle_frequency_map(world: ToyWorld, dists) -> np.ndarray:
    """Normalized predictive entropy H_i / ln K per location, in [0, 1]."""
    d = check_prob_rows(dists, k=world.codebook.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(d > 0.0, d * np.log(d), 0.0)
    h = -terms.sum(axis=1)
    return np.clip(h / np.log(world.codebook.size), 0.0, 1.0)


def oracle_cross_attention(
    world: ToyWorld, condition: Condition, component: str, grid: TokenGrid
) -> np.ndarray:
    """Per-location sensitivity of the conditional distribution to a component.

    Total-variation distance between leave-one-out conditionals under the
    condition and under the condition with the component removed, rescaled so
    the most affected location scores 1 (all-zero maps stay zero).
    """
    if component not in condition.components:
        raise InvalidComponentError(
            f"component {component!r} not in condition {condition.id}"
        )
    reduced = tuple(c for c in condition.components if c != component)
    full = leave_one_out_predictive(world, condition, grid)
    rest = _loo_for_components(world, reduced, grid)
    tv = 0.5 * np.abs(full - rest).sum(axis=1)
    top = tv.max()
    return tv / top if top > 0.0 else np.zeros_like(tv)


def _loo_for_components(world: ToyWorld, components: tuple[str, ...], grid: TokenGrid) -> np.ndarray:
    """leave_one_out_predictive for a bare component tuple (possibly empty)."""
    proxy = Condition(id=-1, components=components or ("__empty__",))
    return leave_one_out_predictive(world, proxy, grid)


# -- world files -----------------------------------------------------------


def world_from_dict(data: dict) -> ToyWorld:
    try:
        k = int(data["codebook_size"])
        height = int(data["height"])
        width = int(data["width"])
        conditions = tuple(
            Condition(id=int(c["id"]), components=tuple(str(x) for x in c["components"]))
            for c in data["conditions"]
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed world definition: {exc}") from exc
    unary: dict[str, list] = {}
    for entry in data.get("unary", []):
        comp = str(entry["component"])
        unary.setdefault(comp, []).append((int(entry["i"]), entry["weights"]))
    edges: dict[str, list] = {}
    for entry in data.get("edges", []):
        comp = str(entry["component"])
        edges.setdefault(comp, []).append((int(entry["i"]), int(entry["j"]), entry["table"]))
    regions = data.get("regions")
    world = ToyWorld(
        codebook=Codebook(k),
        height=height,
        width=width,
        conditions=conditions,
        unary={c: tuple(v) for c, v in unary.items()},
        edges={c: tuple(v) for c, v in edges.items()},
        regions=tuple(regions) if regions else None,
    )
    for cond in world.conditions:
        if not world._has_edges(cond.components) or k ** world.n_cells <= ENUMERATION_BUDGET:
            if not np.isfinite(world._log_z(cond.components)):
                raise ValueError(f"condition {cond.id} has zero partition function")
    return world


def load_world(path) -> ToyWorld:
    """Load a world definition file, resolving builtin:<name> to bundled data."""
    spath = str(path)
    if spath.startswith("builtin:"):
        name = spath.split(":", 1)[1]
        text = resources.files("remask").joinpath(f"worlds/{name}.json").read_text()
    else:
        with open(spath, "r", encoding="utf-8") as fh:
            text = fh.read()
    return world_from_dict(json.loads(text))


BUNDLED_WORLDS = ("disjoint", "overlap", "bgfg", "texture")
