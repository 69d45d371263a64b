"""Generators: a small trainable attention model and the exact-oracle twin.

Both expose the same interface consumed by the sampling loop and the tasks:
``forward`` (per-location categoricals plus attention maps), ``guided_predict``
(classifier-free guidance in logit space), ``predict`` (guided distributions
with maps, one call per diffusion step), ``cross_attention_map`` and
``token_embeddings``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _net
from ._validation import check_prob_rows, check_rng
from .base import ParamsMixin
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, ShapeError, TrainingFailureError
from .grid import MASK, Condition, TokenGrid
from .toyworld import (
    ToyWorld,
    leave_one_out_predictive,
    oracle_cross_attention,
    oracle_frequency_map,
    oracle_predictive,
    sample_true,
)

self_attention_map = _net.self_attention_map


@dataclass(frozen=True)
class GeneratorOutput:
    """Per-location categoricals plus the attention maps of one forward pass."""

    dists: np.ndarray
    self_attention_map: np.ndarray = field(repr=False)
    cross_attention: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        d = check_prob_rows(self.dists)
        sa = np.asarray(self.self_attention_map, dtype=np.float64).reshape(-1)
        if sa.shape[0] != d.shape[0]:
            raise ShapeError("self-attention map length must match the grid size")
        if np.any(sa < -1e-9) or np.any(sa > 1.0 + 1e-9):
            raise ValueError("self-attention map values must lie in [0, 1]")
        object.__setattr__(self, "dists", d)
        object.__setattr__(self, "self_attention_map", np.clip(sa, 0.0, 1.0))


def _combine_guided_log(log_c: np.ndarray, log_n: np.ndarray, s: float) -> np.ndarray:
    """logit_null + s * (logit_c - logit_null) with -inf-safe handling."""
    with np.errstate(invalid="ignore"):
        combined = log_n + s * (log_c - log_n)
    combined = np.where(np.isneginf(log_c) | np.isneginf(log_n), -np.inf, combined)
    return combined


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=1, keepdims=True)
    shifted = np.where(np.isfinite(logits), logits - m, -np.inf)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class NeuralGenerator(ParamsMixin):
    """Trainable masked-token generator over a fixed grid geometry.

    Trained by masked-token denoising: sample a true grid, mask a random
    subset (ratio ~ U[0,1]), minimize cross-entropy of the true tokens at the
    masked locations; a fraction of examples use the null condition so
    classifier-free guidance is available at inference time.
    """

    def __init__(
        self,
        d_model=32,
        n_heads=2,
        n_layers=2,
        epochs=20,
        steps_per_epoch=40,
        batch_size=16,
        lr=0.1,
        momentum=0.9,
        null_fraction=0.1,
        attention_map_kind="sigmoid",
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
        self.null_fraction = null_fraction
        self.attention_map_kind = attention_map_kind
        self.probe_size = probe_size
        self.seed = seed

    # -- fitting -----------------------------------------------------------

    def fit(self, world: ToyWorld, rng=None) -> "NeuralGenerator":
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
            out_dim=self.codebook_size_,
        )
        self.trained_with_null_ = self.null_fraction > 0.0
        probe = [self._make_example(world, probe_rng) for _ in range(self.probe_size)]
        velocity = _net.zero_grads(self.params_)
        self.probe_losses_ = [self._batch_loss(probe)]
        for _ in range(self.epochs):
            for _ in range(self.steps_per_epoch):
                batch = [self._make_example(world, train_rng) for _ in range(self.batch_size)]
                loss, grads = self._loss_and_grads(batch)
                if not np.isfinite(loss):
                    raise TrainingFailureError(f"generator training diverged (loss={loss})")
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

    def _make_example(self, world: ToyWorld, rng: np.random.Generator):
        cond = world.conditions[int(rng.integers(len(world.conditions)))]
        model_cond = None if rng.random() < self.null_fraction else cond
        x0 = sample_true(world, cond, rng)
        ratio = rng.random()
        n_mask = min(self.n_cells_, max(1, int(round(ratio * self.n_cells_))))
        locs = rng.permutation(self.n_cells_)[:n_mask]
        cells = np.array(x0.cells)
        cells[locs] = MASK
        return cells, model_cond, x0.cells, np.sort(locs)

    # -- forward machinery ---------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ConfigurationError("generator is not fitted")

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
        logits = z[: self.n_cells_] @ self.params_["head_w"] + self.params_["head_b"]
        cache["tok_rows"] = tok_rows
        cache["cond_row"] = cond_row
        cache["comp_rows"] = comp_rows
        return logits, cache

    def _maps_from_cache(self, cache, components) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        n = self.n_cells_
        last = cache["layers"][-1]
        map_sa = _net.self_attention_map(
            last["qh"][:, :n, :], last["kh"][:, :n, :], kind=self.attention_map_kind
        )
        cross: dict[str, np.ndarray] = {}
        for offset, comp in enumerate(components):
            cross[comp] = last["attn"][:, :n, n + 1 + offset].mean(axis=0)
        return map_sa, cross

    def forward(self, grid: TokenGrid, cond: Condition | None) -> GeneratorOutput:
        self._check_fitted()
        cells = _net.grid_cells(grid, self.n_cells_, self.height_, self.width_)
        logits, cache = self._forward_cells(cells, cond)
        map_sa, cross = self._maps_from_cache(cache, cond.components if cond else ())
        return GeneratorOutput(_softmax_rows(logits), map_sa, cross)

    def guided_predict(self, grid: TokenGrid, cond: Condition, s: float) -> np.ndarray:
        return self.predict(grid, cond, s).dists

    def predict(
        self, grid: TokenGrid, cond: Condition, s: float, need_attention: bool = True
    ) -> GeneratorOutput:
        """Guided distributions plus the conditional pass's attention maps.

        ``need_attention`` is advisory; the maps fall out of the forward cache
        here, so they are always populated.
        """
        self._check_fitted()
        if s < 0:
            raise ValueError(f"guidance scale must be >= 0, got {s}")
        cells = _net.grid_cells(grid, self.n_cells_, self.height_, self.width_)
        logits_c, cache = self._forward_cells(cells, cond)
        map_sa, cross = self._maps_from_cache(cache, cond.components if cond else ())
        if s == 1.0:
            return GeneratorOutput(_softmax_rows(logits_c), map_sa, cross)
        if not getattr(self, "trained_with_null_", False):
            raise ConfigurationError(
                "guidance needs a generator trained with a null condition "
                "(null_fraction > 0)"
            )
        logits_n, _ = self._forward_cells(cells, None)
        if s == 0.0:
            return GeneratorOutput(_softmax_rows(logits_n), map_sa, cross)
        combined = logits_n + s * (logits_c - logits_n)
        return GeneratorOutput(_softmax_rows(combined), map_sa, cross)

    def cross_attention_map(self, grid: TokenGrid, cond: Condition, component: str) -> np.ndarray:
        out = self.forward(grid, cond)
        try:
            return out.cross_attention[component]
        except KeyError:
            from .errors import InvalidComponentError

            raise InvalidComponentError(
                f"component {component!r} not in condition {cond.id}"
            ) from None

    def token_embeddings(self) -> np.ndarray:
        self._check_fitted()
        return np.array(self.params_["tok_emb"][: self.codebook_size_])

    @property
    def height(self) -> int:
        return self.height_

    @property
    def width(self) -> int:
        return self.width_

    @property
    def codebook_size(self) -> int:
        return self.codebook_size_

    # -- loss / gradients ----------------------------------------------------

    def _example_loss_grads(self, example, grads, scale: float) -> float:
        cells, cond, target, mask_locs = example
        logits, cache = self._forward_cells(cells, cond)
        logp = logits - _logsumexp_rows(logits)
        n_masked = mask_locs.shape[0]
        loss = -float(logp[mask_locs, target[mask_locs]].sum()) / n_masked
        dlogits = np.zeros_like(logits)
        probs = np.exp(logp)
        dlogits[mask_locs] = probs[mask_locs] * (scale / n_masked)
        dlogits[mask_locs, target[mask_locs]] -= scale / n_masked
        self._backward(cache, dlogits, grads)
        return loss

    def _backward(self, cache, dlogits, grads):
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

    def _loss_and_grads(self, examples):
        grads = _net.zero_grads(self.params_)
        scale = 1.0 / len(examples)
        total = 0.0
        for example in examples:
            total += self._example_loss_grads(example, grads, scale)
        return total * scale, grads

    def _batch_loss(self, examples) -> float:
        total = 0.0
        for cells, cond, target, mask_locs in examples:
            logits, _ = self._forward_cells(cells, cond)
            logp = logits - _logsumexp_rows(logits)
            total += -float(logp[mask_locs, target[mask_locs]].sum()) / mask_locs.shape[0]
        return total / len(examples)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        hyper = {
            "params": self.get_params(),
            "height": self.height_,
            "width": self.width_,
            "codebook_size": self.codebook_size_,
            "condition_ids": self.condition_ids_,
            "component_labels": self.component_labels_,
            "trained_with_null": bool(self.trained_with_null_),
        }
        save_checkpoint(path, "generator", hyper, self.params_)

    @classmethod
    def load(cls, path) -> "NeuralGenerator":
        kind, hyper, tensors = load_checkpoint(path)
        if kind != "generator":
            raise ValueError(f"checkpoint kind {kind!r} is not a generator")
        model = cls(**hyper["params"])
        model.height_ = int(hyper["height"])
        model.width_ = int(hyper["width"])
        model.n_cells_ = model.height_ * model.width_
        model.codebook_size_ = int(hyper["codebook_size"])
        model.condition_ids_ = [int(c) for c in hyper["condition_ids"]]
        model.component_labels_ = [str(c) for c in hyper["component_labels"]]
        model._cond_row = {cid: i + 1 for i, cid in enumerate(model.condition_ids_)}
        model._comp_row = {lbl: i for i, lbl in enumerate(model.component_labels_)}
        model.trained_with_null_ = bool(hyper["trained_with_null"])
        model.params_ = tensors
        return model


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    return m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def forward(gen, grid: TokenGrid, cond: Condition | None) -> GeneratorOutput:
    return gen.forward(grid, cond)


def guided_predict(gen, grid: TokenGrid, cond: Condition, s: float) -> np.ndarray:
    return gen.guided_predict(grid, cond, s)


def train_generator(world: ToyWorld, rng=None, **hyper) -> NeuralGenerator:
    """Fit a NeuralGenerator on a toy world (estimator wrapper)."""
    return NeuralGenerator(**hyper).fit(world, rng=rng)


class OracleGenerator:
    """Exact generator backed by the world's conditional distributions.

    The unconditional (null) prediction is the uniform mixture over the
    world's conditions; the self-attention surrogate is the normalized
    leave-one-out predictive entropy, high where the world is locally diverse.
    """

    def __init__(self, world: ToyWorld):
        self.world = world

    @property
    def height(self) -> int:
        return self.world.height

    @property
    def width(self) -> int:
        return self.world.width

    @property
    def codebook_size(self) -> int:
        return self.world.codebook.size

    def _predictive(self, grid: TokenGrid, cond: Condition | None) -> np.ndarray:
        if cond is not None:
            return oracle_predictive(self.world, cond, grid)
        key = ("mixture", grid.cells.tobytes())
        cached = self.world._cache.get(key)
        if cached is not None:
            return cached
        weights = []
        preds = []
        for c in self.world.conditions:
            evidence = self._evidence(grid, c)
            weights.append(evidence)
            preds.append(oracle_predictive(self.world, c, grid) if evidence > 0 else None)
        total = sum(weights)
        if total <= 0.0:
            from .errors import ImpossibleEvidenceError

            raise ImpossibleEvidenceError("revealed cells impossible under every condition")
        out = np.zeros((self.world.n_cells, self.codebook_size))
        for wgt, pred in zip(weights, preds):
            if wgt > 0:
                out += (wgt / total) * pred
        out.setflags(write=False)
        self.world._cache[key] = out
        return out

    def _evidence(self, grid: TokenGrid, cond: Condition) -> float:
        """Marginal probability of the revealed cells under the condition."""
        from .toyworld import _consistent_weights

        cells = grid.cells
        revealed = np.flatnonzero(cells != MASK)
        comps = cond.components
        if revealed.size == 0:
            return 1.0
        if not self.world._has_edges(comps):
            dists = self.world._unary_dists(comps)
            return float(np.prod(dists[revealed, cells[revealed]]))
        _, probs, _, _ = self.world._joint(comps)
        return float(_consistent_weights(self.world, probs, cells, revealed).sum())

    def forward(self, grid: TokenGrid, cond: Condition | None) -> GeneratorOutput:
        dists = self._predictive(grid, cond)
        map_sa = self._attention_surrogate(grid, cond)
        cross = {}
        if cond is not None:
            for comp in cond.components:
                cross[comp] = oracle_cross_attention(self.world, cond, comp, grid)
        return GeneratorOutput(dists, map_sa, cross)

    def _attention_surrogate(self, grid: TokenGrid, cond: Condition | None) -> np.ndarray:
        ref = cond if cond is not None else self.world.conditions[0]
        loo = leave_one_out_predictive(self.world, ref, grid)
        return oracle_frequency_map(self.world, loo)

    def guided_predict(self, grid: TokenGrid, cond: Condition, s: float) -> np.ndarray:
        if s < 0:
            raise ValueError(f"guidance scale must be >= 0, got {s}")
        pred_c = self._predictive(grid, cond)
        if s == 1.0:
            return np.array(pred_c)
        pred_n = self._predictive(grid, None)
        if s == 0.0:
            return np.array(pred_n)
        with np.errstate(divide="ignore"):
            log_c = np.log(pred_c)
            log_n = np.log(pred_n)
        return _softmax_rows(_combine_guided_log(log_c, log_n, s))

    def predict(
        self, grid: TokenGrid, cond: Condition, s: float, need_attention: bool = True
    ) -> GeneratorOutput:
        dists = self.guided_predict(grid, cond, s)
        if need_attention:
            map_sa = self._attention_surrogate(grid, cond)
        else:
            map_sa = np.zeros(self.world.n_cells)  # skipped: strategy never reads it
        return GeneratorOutput(dists, map_sa, {})

    def cross_attention_map(self, grid: TokenGrid, cond: Condition, component: str) -> np.ndarray:
        return oracle_cross_attention(self.world, cond, component, grid)

    def token_embeddings(self) -> np.ndarray:
        return np.eye(self.codebook_size)
