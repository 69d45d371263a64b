"""Token scorers: the learnable text-conditioned selector and the exact oracle.

A score map assigns each location the probability that its token is "real"
(well-aligned) under the condition; high scores are keep-weights in the
sampling strategies. The learnable model is trained to detect generator
reconstructions with per-location binary cross-entropy, reconstructing with a
guidance scale drawn fresh per example.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _net
from ._validation import check_rng
from .base import ParamsMixin
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, ShapeError, TrainingFailureError, UndefinedAucError
from .grid import MASK, Condition, TokenGrid, sample_categorical_rows
from .toyworld import ToyWorld, leave_one_out_predictive, sample_true


@dataclass(frozen=True)
class ScoreMap:
    """Per-location keep scores in [0, 1]."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any(v < -1e-9) or np.any(v > 1.0 + 1e-9):
            raise ValueError("score map values must lie in [0, 1]")
        v = np.clip(v, 0.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


class TokenSelector(ParamsMixin):
    """Learned scorer: same trunk as the generator, 1-logit sigmoid head.

    Consumes a fully revealed grid plus condition; labels during training are
    1 for original tokens and 0 for generator reconstructions.
    """

    def __init__(
        self,
        d_model=32,
        n_heads=2,
        n_layers=2,
        epochs=20,
        steps_per_epoch=40,
        batch_size=16,
        lr=0.08,
        momentum=0.9,
        mask_ratio_range=(0.2, 0.9),
        guidance_range=(1.0, 7.0),
        probe_size=64,
        seed=0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.mask_ratio_range = mask_ratio_range
        self.guidance_range = guidance_range
        self.probe_size = probe_size
        self.seed = seed

    def fit(self, world: ToyWorld, generator, rng=None) -> "TokenSelector":
        rng = check_rng(self.seed if rng is None else rng)
        init_rng, probe_rng, train_rng = rng.spawn(3)
        self._bind_world(world)
        self.params_ = _net.init_params(
            init_rng,
            n_cells=self.n_cells_,
            codebook_size=self.codebook_size_,
            n_conditions=len(self.condition_ids_),
            n_components=len(self.component_labels_),
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            out_dim=1,
        )
        probe = [self._make_example(world, generator, probe_rng) for _ in range(self.probe_size)]
        velocity = _net.zero_grads(self.params_)
        self.probe_losses_ = [self._batch_loss(probe)]
        for _ in range(self.epochs):
            for _ in range(self.steps_per_epoch):
                batch = [
                    self._make_example(world, generator, train_rng)
                    for _ in range(self.batch_size)
                ]
                loss, grads = self._loss_and_grads(batch)
                if not np.isfinite(loss):
                    raise TrainingFailureError(f"selector training diverged (loss={loss})")
                _net.sgd_momentum_step(self.params_, grads, velocity, self.lr, self.momentum)
            self.probe_losses_.append(self._batch_loss(probe))
        return self

    def _bind_world(self, world: ToyWorld) -> None:
        self.height_ = world.height
        self.width_ = world.width
        self.n_cells_ = world.n_cells
        self.codebook_size_ = world.codebook.size
        self.condition_ids_ = sorted(c.id for c in world.conditions)
        labels = sorted({comp for c in world.conditions for comp in c.components})
        self.component_labels_ = labels
        self._cond_row = {cid: i + 1 for i, cid in enumerate(self.condition_ids_)}
        self._comp_row = {label: i for i, label in enumerate(labels)}

    def _make_example(self, world: ToyWorld, generator, rng: np.random.Generator):
        """(reconstructed cells, condition, per-location 1=original labels)."""
        cond = world.conditions[int(rng.integers(len(world.conditions)))]
        x0 = sample_true(world, cond, rng)
        lo, hi = self.mask_ratio_range
        ratio = lo + (hi - lo) * rng.random()
        n_mask = min(self.n_cells_ - 1, max(1, int(round(ratio * self.n_cells_))))
        locs = np.sort(rng.permutation(self.n_cells_)[:n_mask])
        masked_cells = np.array(x0.cells)
        masked_cells[locs] = MASK
        g_lo, g_hi = self.guidance_range
        s = g_lo + (g_hi - g_lo) * rng.random()
        dists = generator.guided_predict(
            TokenGrid(self.height_, self.width_, masked_cells), cond, s
        )
        xhat = np.array(x0.cells)
        xhat[locs] = sample_categorical_rows(dists[locs], rng)
        labels = np.ones(self.n_cells_, dtype=np.float64)
        labels[locs] = 0.0
        return xhat, cond, labels

    # -- scoring -------------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ConfigurationError("selector is not fitted")

    def _cond_tokens(self, cond: Condition | None):
        if cond is None:
            return 0, []
        row = self._cond_row.get(cond.id)
        if row is None:
            raise ConfigurationError(f"unknown condition id {cond.id}")
        try:
            comp_rows = [self._comp_row[c] for c in cond.components]
        except KeyError as exc:
            raise ConfigurationError(f"unknown component {exc.args[0]!r}") from exc
        return row, comp_rows

    def _forward_cells(self, cells: np.ndarray, cond: Condition | None):
        cond_row, comp_rows = self._cond_tokens(cond)
        x, tok_rows = _net.embed_sequence(self.params_, cells, cond, cond_row, comp_rows)
        z, cache = _net.forward_seq(self.params_, x, self.n_layers, self.n_heads)
        logits = (z[: self.n_cells_] @ self.params_["head_w"] + self.params_["head_b"]).reshape(-1)
        cache["tok_rows"] = tok_rows
        cache["cond_row"] = cond_row
        cache["comp_rows"] = comp_rows
        return logits, cache

    def score(self, grid: TokenGrid, cond: Condition) -> ScoreMap:
        self._check_fitted()
        if not grid.is_complete:
            raise ValueError("selector scores fully revealed grids only")
        cells = _net.grid_cells(grid, self.n_cells_, self.height_, self.width_)
        logits, _ = self._forward_cells(cells, cond)
        return ScoreMap(1.0 / (1.0 + np.exp(-logits)))

    # -- loss / gradients ------------------------------------------------------

    def _example_loss_grads(self, example, grads, scale: float) -> float:
        cells, cond, labels = example
        logits, cache = self._forward_cells(cells, cond)
        p = 1.0 / (1.0 + np.exp(-logits))
        eps = 1e-12
        loss = -float(
            np.mean(labels * np.log(p + eps) + (1.0 - labels) * np.log(1.0 - p + eps))
        )
        dlogits = ((p - labels) / self.n_cells_ * scale).reshape(-1, 1)
        z = cache["z"]
        n = self.n_cells_
        grads["head_w"] += z[:n].T @ dlogits
        grads["head_b"] += dlogits.sum(axis=0)
        dz = np.zeros_like(z)
        dz[:n] = dlogits @ self.params_["head_w"].T
        dx0 = _net.backward_seq(self.params_, cache, dz, self.n_layers, grads)
        _net.scatter_embedding_grads(
            grads, dx0, cache["tok_rows"], n, cache["cond_row"], cache["comp_rows"]
        )
        return loss

    def _loss_and_grads(self, examples):
        grads = _net.zero_grads(self.params_)
        scale = 1.0 / len(examples)
        total = 0.0
        for example in examples:
            total += self._example_loss_grads(example, grads, scale)
        return total * scale, grads

    def _batch_loss(self, examples) -> float:
        total = 0.0
        for cells, cond, labels in examples:
            logits, _ = self._forward_cells(cells, cond)
            p = 1.0 / (1.0 + np.exp(-logits))
            eps = 1e-12
            total += -float(
                np.mean(labels * np.log(p + eps) + (1.0 - labels) * np.log(1.0 - p + eps))
            )
        return total / len(examples)

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        hyper = {
            "params": {
                k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()
            },
            "height": self.height_,
            "width": self.width_,
            "codebook_size": self.codebook_size_,
            "condition_ids": self.condition_ids_,
            "component_labels": self.component_labels_,
        }
        save_checkpoint(path, "selector", hyper, self.params_)

    @classmethod
    def load(cls, path) -> "TokenSelector":
        kind, hyper, tensors = load_checkpoint(path)
        if kind != "selector":
            raise ValueError(f"checkpoint kind {kind!r} is not a selector")
        params = dict(hyper["params"])
        for key in ("mask_ratio_range", "guidance_range"):
            params[key] = tuple(params[key])
        model = cls(**params)
        model.height_ = int(hyper["height"])
        model.width_ = int(hyper["width"])
        model.n_cells_ = model.height_ * model.width_
        model.codebook_size_ = int(hyper["codebook_size"])
        model.condition_ids_ = [int(c) for c in hyper["condition_ids"]]
        model.component_labels_ = [str(c) for c in hyper["component_labels"]]
        model._cond_row = {cid: i + 1 for i, cid in enumerate(model.condition_ids_)}
        model._comp_row = {lbl: i for i, lbl in enumerate(model.component_labels_)}
        model.params_ = tensors
        return model


def oracle_score(world: ToyWorld, cond: Condition, grid: TokenGrid) -> ScoreMap:
    """Exact leave-one-out conditionals: p_c(x_i = grid_i | all other cells)."""
    if not grid.is_complete:
        raise ValueError("oracle_score requires a fully revealed grid")
    loo = leave_one_out_predictive(world, cond, grid)
    return ScoreMap(loo[np.arange(world.n_cells), grid.cells])


class OracleSelector:
    """Selector-interface adapter over oracle_score."""

    def __init__(self, world: ToyWorld):
        self.world = world

    def score(self, grid: TokenGrid, cond: Condition) -> ScoreMap:
        return oracle_score(self.world, cond, grid)


def train_selector(generator, world: ToyWorld, rng=None, **hyper) -> TokenSelector:
    """Fit a TokenSelector against a generator (estimator wrapper)."""
    return TokenSelector(**hyper).fit(world, generator, rng=rng)


def roc_auc(scores, labels) -> float:
    """Rank-based ROC-AUC with tie correction."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ShapeError("scores and labels must have equal length")
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs both label classes")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.shape[0], dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.shape[0]:
        j = i
        while j + 1 < s.shape[0] and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[y].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def selector_auc(selector, eval_set) -> float:
    """Pooled per-location ROC-AUC of a selector over (grid, condition, labels) triples."""
    scores = []
    labels = []
    for grid, cond, label_vec in eval_set:
        scores.append(selector.score(grid, cond).values)
        labels.append(np.asarray(label_vec).reshape(-1))
    if not scores:
        raise UndefinedAucError("empty evaluation set")
    return roc_auc(np.concatenate(scores), np.concatenate(labels))
