import numpy as np
import pytest

from remask.errors import InvalidComponentError, InvalidTilingError
from remask.grid import MASK, TokenGrid, make_linear_schedule
from remask.neuralgen import OracleGenerator
from remask.sampling import UniformFixed, generate
from remask.selector import OracleSelector, oracle_score
from remask.tasks import (
    EditRequest,
    edit_mask_free,
    refine_mask_lowest,
    refine_steps,
    upsample_token_map,
    upscale_tiled,
)
from remask.toyworld import alignment_score, sample_true

from oracles import bicubic_value_2d


@pytest.fixture(scope="module")
def overlap_gen(overlap_world):
    return OracleGenerator(overlap_world)


@pytest.fixture(scope="module")
def overlap_sel(overlap_world):
    return OracleSelector(overlap_world)


class TestRefineSteps:
    def test_zero_steps_identity(self, overlap_world, overlap_gen, overlap_sel, rng):
        g = sample_true(overlap_world, overlap_world.condition(0), rng)
        out = refine_steps(g, overlap_gen, overlap_sel, 0, overlap_world.condition(0), 2.0, rng)
        assert out is g

    def test_corrupted_cell_has_highest_remask_weight(self, disjoint_world):
        # a zero-support corruption scores exactly 0, so weight (1 - score)
        # puts the strict maximum on the corrupted location
        cond = disjoint_world.condition(0)
        g = sample_true(disjoint_world, cond, np.random.default_rng(0))
        cells = np.array(g.cells)
        cells[0] = 1  # zero support under condition 0
        corrupted = TokenGrid(3, 3, cells)
        score = oracle_score(disjoint_world, cond, corrupted).values
        weights = 1.0 - score
        assert int(np.argmax(weights)) == 0
        assert weights[0] == 1.0
        assert np.all(weights[1:] < 1.0)

    def test_refinement_output_complete(self, overlap_world, overlap_gen, overlap_sel, rng):
        cond = overlap_world.condition(0)
        g = sample_true(overlap_world, cond, rng)
        out = refine_steps(g, overlap_gen, overlap_sel, 3, cond, 2.0, rng)
        assert out.is_complete

    def test_rejects_masked_input(self, overlap_world, overlap_gen, overlap_sel, rng):
        with pytest.raises(ValueError):
            refine_steps(TokenGrid.fully_masked(4, 4), overlap_gen, overlap_sel, 2,
                         overlap_world.condition(0), 2.0, rng)


class TestRefineMaskLowest:
    def test_tiny_fraction_identity(self, overlap_world, overlap_gen, overlap_sel, rng):
        g = sample_true(overlap_world, overlap_world.condition(0), rng)
        out = refine_mask_lowest(g, overlap_gen, overlap_sel, 0.05,
                                 overlap_world.condition(0), 2.0, rng)
        assert np.array_equal(out.cells, g.cells)

    def test_masks_exactly_floor_fraction(self, overlap_world, overlap_sel):
        # deterministic selection: verify via the score ordering directly
        cond = overlap_world.condition(0)
        g = sample_true(overlap_world, cond, np.random.default_rng(1))
        score = overlap_sel.score(g, cond).values
        m = int(np.floor(0.6 * 16))
        order = np.lexsort((np.arange(16), score))
        lowest = set(order[:m].tolist())
        assert len(lowest) == 9

    def test_corrupted_cells_fall_in_masked_set(self, overlap_world, overlap_gen, overlap_sel):
        cond = overlap_world.condition(0)
        hits = 0
        trials = 50
        for t in range(trials):
            g = sample_true(overlap_world, cond, np.random.default_rng(t))
            cells = np.array(g.cells)
            corrupt = [1, 6, 12]
            for i in corrupt:
                cells[i] = 1 - cells[i]
            grid = TokenGrid(4, 4, cells)
            score = overlap_sel.score(grid, cond).values
            order = np.lexsort((np.arange(16), score))
            lowest = set(order[: int(0.6 * 16)].tolist())
            if all(i in lowest for i in corrupt):
                hits += 1
        assert hits / trials >= 0.95

    def test_invalid_fraction(self, overlap_world, overlap_gen, overlap_sel, rng):
        g = sample_true(overlap_world, overlap_world.condition(0), rng)
        with pytest.raises(ValueError):
            refine_mask_lowest(g, overlap_gen, overlap_sel, 1.0,
                               overlap_world.condition(0), 2.0, rng)


class TestEditMaskFree:
    def test_defaults(self, disjoint_world):
        g = sample_true(disjoint_world, disjoint_world.condition(0), np.random.default_rng(0))
        req = EditRequest(
            source=g,
            old_condition=disjoint_world.condition(0),
            new_condition=disjoint_world.condition(1),
            component="left_bright",
        )
        assert req.noise_ratio == 0.25
        assert req.steps == 10

    def test_unknown_component_rejected(self, disjoint_world, rng):
        g = sample_true(disjoint_world, disjoint_world.condition(0), rng)
        with pytest.raises(InvalidComponentError):
            EditRequest(
                source=g,
                old_condition=disjoint_world.condition(0),
                new_condition=disjoint_world.condition(1),
                component="left_dark",  # not in the new condition
            )

    def test_zero_cross_attention_reduces_to_selector_weights(self, disjoint_world):
        # the floor keeps the edit functional when the map is all zero
        gen = OracleGenerator(disjoint_world)
        sel = OracleSelector(disjoint_world)
        g = sample_true(disjoint_world, disjoint_world.condition(0), np.random.default_rng(3))
        req = EditRequest(
            source=g,
            old_condition=disjoint_world.condition(0),
            new_condition=disjoint_world.condition(0),
            component="field",  # removing it changes every cell equally; map rescales
            noise_ratio=0.25,
            steps=2,
        )
        out = edit_mask_free(req, gen, sel, 1.0, np.random.default_rng(4))
        assert out.is_complete
        assert out.cells[0] == g.cells[0]

    def test_disjoint_world_edit_quality(self, disjoint_world):
        # alignment under the new condition > 0.9 in >= 80% of runs while
        # zero-cross-attention locations change in < 20% of runs
        gen = OracleGenerator(disjoint_world)
        sel = OracleSelector(disjoint_world)
        c0, c1 = disjoint_world.condition(0), disjoint_world.condition(1)
        runs = 100
        aligned = 0
        bg_changes = np.zeros(8)
        for i in range(runs):
            g = sample_true(disjoint_world, c0, np.random.default_rng((1, i)))
            req = EditRequest(source=g, old_condition=c0, new_condition=c1,
                              component="left_bright")
            out = edit_mask_free(req, gen, sel, 5.0, np.random.default_rng((2, i)))
            if alignment_score(disjoint_world, c1, out) > 0.9:
                aligned += 1
            bg_changes += (out.cells[1:] != g.cells[1:]).astype(int)
        assert aligned / runs >= 0.8
        assert np.all(bg_changes / runs < 0.2)


class TestUpsampleTokenMap:
    def test_constant_grid(self):
        grid = TokenGrid(2, 2, [1, 1, 1, 1])
        out = upsample_token_map(grid, np.eye(3), 3)
        assert out.height == 6 and out.width == 6
        assert np.all(out.cells == 1)

    def test_corner_alignment(self):
        grid = TokenGrid(2, 2, [0, 1, 2, 3])
        out = upsample_token_map(grid, np.eye(4), 2)
        cells = out.cells.reshape(4, 4)
        assert cells[0, 0] == 0 and cells[0, 3] == 1
        assert cells[3, 0] == 2 and cells[3, 3] == 3

    def test_checkerboard_matches_hand_bicubic(self):
        # independent tensor-product kernel evaluation at every output cell
        cells = np.array([0, 1, 0, 1, 0, 1, 0, 1, 0])
        grid = TokenGrid(3, 3, cells)
        emb = np.eye(2)
        out = upsample_token_map(grid, emb, 2)
        field = emb[cells].reshape(3, 3, 2)
        for oy in range(6):
            for ox in range(6):
                y = oy * 2 / 5.0
                x = ox * 2 / 5.0
                vec = bicubic_value_2d(field, y, x)
                expected = int(np.argmin(((vec - emb) ** 2).sum(axis=1)))
                assert out.cells.reshape(6, 6)[oy, ox] == expected

    def test_output_tokens_in_range(self, rng):
        cells = rng.integers(0, 4, size=12)
        grid = TokenGrid(3, 4, cells)
        out = upsample_token_map(grid, np.eye(4), 3)
        assert out.height == 9 and out.width == 12
        assert out.cells.min() >= 0 and out.cells.max() < 4

    def test_rejects_factor_one(self):
        with pytest.raises(ValueError):
            upsample_token_map(TokenGrid(2, 2, [0, 1, 1, 0]), np.eye(2), 1)


class TestUpscaleTiled:
    def test_single_tile_equals_refine_steps(self, overlap_world, overlap_gen, overlap_sel):
        cond = overlap_world.condition(0)
        g = sample_true(overlap_world, cond, np.random.default_rng(5))
        a = upscale_tiled(g, overlap_gen, overlap_sel, (4, 4), 0, 1, cond, 2.0,
                          np.random.default_rng(6), revision_steps=2)
        b = refine_steps(g, overlap_gen, overlap_sel, 2, cond, 2.0,
                         np.random.default_rng(6))
        assert np.array_equal(a.cells, b.cells)

    def test_zero_passes_identity(self, overlap_world, overlap_gen, overlap_sel, rng):
        g = sample_true(overlap_world, overlap_world.condition(0), rng)
        out = upscale_tiled(g, overlap_gen, overlap_sel, (4, 4), 1, 0,
                            overlap_world.condition(0), 2.0, rng)
        assert np.array_equal(out.cells, g.cells)

    def test_window_larger_than_grid(self, overlap_world, overlap_gen, overlap_sel, rng):
        g = sample_true(overlap_world, overlap_world.condition(0), rng)
        small = TokenGrid(2, 2, g.cells[:4])
        with pytest.raises(InvalidTilingError):
            upscale_tiled(small, overlap_gen, overlap_sel, (4, 4), 0, 1,
                          overlap_world.condition(0), 2.0, rng)

    def test_upscale_improves_or_keeps_window_alignment(self, overlap_world, overlap_gen, overlap_sel):
        # 2x-upsampled grids, refined windows vs unrefined: mean per-window
        # alignment must not decrease
        cond = overlap_world.condition(0)

        def window_alignment(big):
            cells = big.cells.reshape(8, 8)
            scores = []
            for r0 in (0, 4):
                for c0 in (0, 4):
                    sub = TokenGrid(4, 4, cells[r0:r0 + 4, c0:c0 + 4].reshape(-1))
                    scores.append(alignment_score(overlap_world, cond, sub))
            return float(np.mean(scores))

        base_scores, refined_scores = [], []
        for i in range(20):
            g = sample_true(overlap_world, cond, np.random.default_rng((7, i)))
            up = upsample_token_map(g, overlap_gen.token_embeddings(), 2)
            base_scores.append(window_alignment(up))
            refined = upscale_tiled(up, overlap_gen, overlap_sel, (4, 4), 1, 2,
                                    cond, 2.0, np.random.default_rng((8, i)),
                                    revision_steps=2)
            refined_scores.append(window_alignment(refined))
        assert np.mean(refined_scores) >= np.mean(base_scores) - 1e-9
