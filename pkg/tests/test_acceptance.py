"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Ordering claims written as ">= at one-sided 0.05" are tested as "the opposite
strict ordering is not significant at 0.05"; claims written as strict are
tested as significance of the claimed direction at 0.05. Every run is seeded,
so each criterion is a deterministic computation.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from remask.grid import (
    MASK,
    Codebook,
    Condition,
    TokenGrid,
    make_linear_schedule,
)
from remask.metrics import diversity_entropy, exact_nll, resample_count_stats
from remask.neuralgen import NeuralGenerator, OracleGenerator
from remask.sampling import (
    INFINITE,
    Persistent,
    RandomRevoke,
    Tcts,
    TctsFas,
    UniformFixed,
    fas_weights,
    generate,
    switch_strategy_generate,
)
from remask.selector import OracleSelector, TokenSelector, selector_auc
from remask.tasks import refine_mask_lowest, refine_steps
from remask.toyworld import ToyWorld, alignment_score, load_world, sample_true

from oracles import FractionWorld, enumerate_final_distribution, enumerate_weighted_draws

GUIDANCE = 2.0  # overlap-world experiments run at s=2 (see decisions ledger)


def report(num, name, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num:02d} ({name}): {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


def greater_p(a, b) -> float:
    """One-sided Welch p-value for mean(a) > mean(b)."""
    return float(stats.ttest_ind(a, b, equal_var=False, alternative="greater").pvalue)


def edge_world_2x2() -> ToyWorld:
    table = np.array([[math.log(3.0), 0.0], [0.0, math.log(3.0)]])
    return ToyWorld(
        codebook=Codebook(2),
        height=2,
        width=2,
        conditions=(Condition(0, ("coupled",)),),
        unary={},
        edges={"coupled": ((0, 1, table),)},
    )


@pytest.fixture(scope="module")
def overlap():
    world = load_world("builtin:overlap")
    return world, OracleGenerator(world), OracleSelector(world), world.condition(0)


def _grid_code(grid: TokenGrid, k: int) -> int:
    code = 0
    for v in grid.cells:
        code = code * k + int(v)
    return code


def test_criterion_01_interpolation_endpoints():
    t0 = time.time()
    # exact kept-set law equality of Persistent(w=1) and RandomRevoke, N=4, T=2
    exact_ok = True
    for masked, m in ((frozenset(range(4)), 2), (frozenset({1, 3}), 4)):
        rr = enumerate_weighted_draws([Fraction(1)] * 4, m)
        p1 = enumerate_weighted_draws(
            [Fraction(1) if i in masked else Fraction(1) for i in range(4)], m
        )
        exact_ok &= rr == p1

    # Persistent(INFINITE) trace-identical to UniformFixed over 1000 paired configs
    world = edge_world_2x2()
    gen = OracleGenerator(world)
    cond = world.condition(0)
    trace_ok = True
    checked = 0
    for steps in (1, 2, 3, 4):
        for seed in range(250):
            sched = make_linear_schedule(4, steps)
            g1, t1 = generate(gen, None, UniformFixed(), sched, cond, 1.0,
                              np.random.default_rng((steps, seed)))
            g2, t2 = generate(gen, None, Persistent(INFINITE), sched, cond, 1.0,
                              np.random.default_rng((steps, seed)))
            same = np.array_equal(g1.cells, g2.cells) and all(
                np.array_equal(a.kept, b.kept)
                and np.array_equal(a.predicted.cells, b.predicted.cells)
                and np.array_equal(a.state.cells, b.state.cells)
                for a, b in zip(t1.steps, t2.steps)
            )
            trace_ok &= same
            checked += 1
    ok = exact_ok and trace_ok and checked == 1000
    report(1, "interpolation endpoints", ok,
           f"rational law equality={exact_ok}, {checked} paired traces identical={trace_ok}, "
           f"{time.time() - t0:.0f}s")


def test_criterion_02_trajectory_marginal_equivalence():
    t0 = time.time()
    world = edge_world_2x2()
    gen = OracleGenerator(world)
    cond = world.condition(0)
    sched = make_linear_schedule(4, 2)
    fw = FractionWorld(
        k=2, n=4,
        edge_factors={(0, 1): [[Fraction(3), Fraction(1)], [Fraction(1), Fraction(3)]]},
    )
    runs = 100_000
    details = []
    ok = True
    strategies = [
        ("uniform_fixed", 201, UniformFixed(), "uniform_fixed", 1),
        ("random_revoke", 202, RandomRevoke(), "random_revoke", 1),
        ("persistent_w3", 203, Persistent(3.0), "persistent", 3),
    ]
    for name, tag, strat, oracle_name, w in strategies:
        exact = enumerate_final_distribution(world=fw, counts=[2, 2],
                                             strategy=oracle_name, w=Fraction(w))
        counts = np.zeros(16)
        for i in range(runs):
            g, _ = generate(gen, None, strat, sched, cond, 1.0,
                            np.random.default_rng((tag, i)))
            counts[_grid_code(g, 2)] += 1
        expected = np.zeros(16)
        for cells, p in exact.items():
            idx = 0
            for v in cells:
                idx = idx * 2 + v
            expected[idx] = float(p) * runs
        pvalue = stats.chisquare(counts, expected).pvalue
        details.append(f"{name}: p={pvalue:.4f}")
        ok &= pvalue > 0.001
    report(2, "trajectory-marginal oracle equivalence", ok,
           "; ".join(details) + f", {time.time() - t0:.0f}s")


def test_criterion_03_fas_algebra():
    t0 = time.time()
    rng = np.random.default_rng(1234)
    ok = True
    for _ in range(300):
        n = int(rng.integers(2, 40))
        w = float(rng.uniform(1.0, 40.0))
        phi = float(rng.random())
        tc = rng.random(n)
        sa = rng.random(n)
        masked = np.flatnonzero(rng.random(n) < rng.random())
        out = fas_weights(tc, sa, masked, w, phi, n)
        a = 1.0 + (w - 1.0) * ((n - masked.size) / n)
        masked_mask = np.zeros(n, dtype=bool)
        masked_mask[masked] = True
        expected = np.where(
            masked_mask, tc * a, np.where(sa < phi, tc * w, tc)
        )
        ok &= np.array_equal(out, expected)  # machine-precision identity
        ok &= np.array_equal(fas_weights(tc, sa, masked, 1.0, phi, n), tc)
    report(3, "FAS algebra", ok, f"300 random configurations exact, {time.time() - t0:.0f}s")


def test_criterion_04_tradeoff_ordering(overlap):
    t0 = time.time()
    world, gen, _, cond = overlap
    sched = make_linear_schedule(16, 8)
    grid_w = [(1.0, 6000), (2.0, 2000), (4.0, 2000), (15.0, 2000), (INFINITE, 6000)]
    align, nll = {}, {}
    for w, n in grid_w:
        strat = RandomRevoke() if w == 1.0 else Persistent(w)
        a = np.empty(n)
        q = np.empty(n)
        for i in range(n):
            g, _ = generate(gen, None, strat, sched, cond, GUIDANCE,
                            np.random.default_rng((int(w if w != INFINITE else 99), i)))
            a[i] = alignment_score(world, cond, g)
            q[i] = -world.log_prob(cond, g)
        align[w], nll[w] = a, q
    ws = [w for w, _ in grid_w]
    # weak monotone decrease: no adjacent pair may significantly increase
    weak_ok = True
    for lo, hi in zip(ws, ws[1:]):
        weak_ok &= greater_p(align[hi], align[lo]) >= 0.05
        weak_ok &= greater_p(nll[hi], nll[lo]) >= 0.05
    p_align = greater_p(align[1.0], align[INFINITE])
    p_nll = greater_p(nll[1.0], nll[INFINITE])
    strict_ok = p_align < 0.05 and p_nll < 0.05
    means_a = ", ".join(f"{np.mean(align[w]):.4f}" for w in ws)
    means_q = ", ".join(f"{np.mean(nll[w]):.3f}" for w in ws)
    report(4, "trade-off ordering", weak_ok and strict_ok,
           f"align by w: [{means_a}], nll by w: [{means_q}], "
           f"endpoint p_align={p_align:.4f}, p_nll={p_nll:.4f}, {time.time() - t0:.0f}s")


def test_criterion_05_learned_tcts_efficacy():
    t0 = time.time()
    world = load_world("builtin:texture")
    cond = world.condition(0)
    gen = NeuralGenerator(
        epochs=2, steps_per_epoch=50, batch_size=16, lr=0.1, probe_size=48, seed=21
    ).fit(world)
    sel = TokenSelector(
        d_model=48, epochs=25, steps_per_epoch=80, batch_size=16, probe_size=64, seed=23
    ).fit(world, gen)
    eval_rng = np.random.default_rng(777)
    eval_set = []
    for _ in range(500):
        cells, c, labels = sel._make_example(world, gen, eval_rng)
        eval_set.append((TokenGrid(4, 4, cells), c, labels))
    auc = selector_auc(sel, eval_set)

    sched = make_linear_schedule(16, 8)
    n = 1000
    a_tcts = np.empty(n)
    a_rr = np.empty(n)
    for i in range(n):
        g, _ = generate(gen, sel, Tcts(), sched, cond, GUIDANCE,
                        np.random.default_rng((61, i)))
        a_tcts[i] = alignment_score(world, cond, g)
        g, _ = generate(gen, None, RandomRevoke(), sched, cond, GUIDANCE,
                        np.random.default_rng((62, i)))
        a_rr[i] = alignment_score(world, cond, g)
    p_violation = greater_p(a_rr, a_tcts)
    ok = auc >= 0.65 and p_violation >= 0.05
    report(5, "learned TCTS efficacy", ok,
           f"held-out AUC={auc:.4f} (>=0.65), Tcts align={a_tcts.mean():.4f} vs "
           f"RR={a_rr.mean():.4f} (violation p={p_violation:.4f}), {time.time() - t0:.0f}s")


def test_criterion_06_over_simplification():
    t0 = time.time()
    world = load_world("builtin:bgfg")
    cond = world.condition(0)
    gen = OracleGenerator(world)
    sel = TokenSelector(
        epochs=6, steps_per_epoch=30, batch_size=12, lr=0.1, probe_size=24, seed=5
    ).fit(world, gen)
    low = world.region_locations("low_freq")
    sched = make_linear_schedule(100, 100)
    n = 250
    ent = {}
    drops = {}
    for name, strat in (("tcts", Tcts()), ("fas", TctsFas())):
        ent[name] = np.empty(n)
        drops[name] = np.empty(n)
        for i in range(n):
            g, traj = generate(gen, sel, strat, sched, cond, 5.0,
                               np.random.default_rng((int(name == "fas"), i)))
            ent[name][i] = diversity_entropy([g], low)
            drops[name][i] = resample_count_stats(traj)[low].mean()
    p_div_violation = greater_p(ent["tcts"], ent["fas"])  # FAS >= Tcts, weak
    p_drops_strict = greater_p(drops["tcts"], drops["fas"])  # strictly smaller under FAS
    ok = p_div_violation >= 0.05 and p_drops_strict < 0.05
    report(6, "over-simplification", ok,
           f"bg entropy FAS={ent['fas'].mean():.4f} vs Tcts={ent['tcts'].mean():.4f} "
           f"(violation p={p_div_violation:.4f}); low-freq drops FAS={drops['fas'].mean():.2f} "
           f"vs Tcts={drops['tcts'].mean():.2f} (p={p_drops_strict:.2e}), {time.time() - t0:.0f}s")


def test_criterion_07_early_stage_dominance(overlap):
    t0 = time.time()
    world, gen, _, cond = overlap
    sched = make_linear_schedule(16, 8)
    n = 1000
    u2r = np.empty(n)
    r2u = np.empty(n)
    for i in range(n):
        g, _ = switch_strategy_generate(
            gen, None, UniformFixed(), RandomRevoke(), 4, sched, cond, GUIDANCE,
            np.random.default_rng((71, i)))
        u2r[i] = alignment_score(world, cond, g)
        g, _ = switch_strategy_generate(
            gen, None, RandomRevoke(), UniformFixed(), 4, sched, cond, GUIDANCE,
            np.random.default_rng((72, i)))
        r2u[i] = alignment_score(world, cond, g)
    p_violation = greater_p(r2u, u2r)
    ok = p_violation >= 0.05
    report(7, "early-stage dominance", ok,
           f"U2R={u2r.mean():.4f} vs R2U={r2u.mean():.4f} (violation p={p_violation:.4f}), "
           f"{time.time() - t0:.0f}s")


def test_criterion_08_refinement_lift(overlap):
    t0 = time.time()
    world, gen, sel, cond = overlap
    sched = make_linear_schedule(16, 8)
    n = 1000
    base = np.empty(n)
    steps_lift = np.empty(n)
    lowest_lift = np.empty(n)
    for i in range(n):
        g, _ = generate(gen, None, UniformFixed(), sched, cond, GUIDANCE,
                        np.random.default_rng((81, i)))
        base[i] = alignment_score(world, cond, g)
        r1 = refine_steps(g, gen, sel, 8, cond, GUIDANCE, np.random.default_rng((82, i)))
        steps_lift[i] = alignment_score(world, cond, r1)
        r2 = refine_mask_lowest(g, gen, sel, 0.6, cond, GUIDANCE,
                                np.random.default_rng((83, i)))
        lowest_lift[i] = alignment_score(world, cond, r2)
    p_steps = float(stats.ttest_rel(steps_lift, base, alternative="greater").pvalue)
    p_lowest = float(stats.ttest_rel(lowest_lift, base, alternative="greater").pvalue)
    ok = p_steps < 0.05 and p_lowest < 0.05
    report(8, "refinement lift", ok,
           f"base={base.mean():.4f}, refine_steps={steps_lift.mean():.4f} (p={p_steps:.2e}), "
           f"mask_lowest={lowest_lift.mean():.4f} (p={p_lowest:.2e}), {time.time() - t0:.0f}s")


def test_criterion_09_numerical_soundness(texture_world):
    t0 = time.time()
    gen = NeuralGenerator(
        d_model=16, n_heads=2, n_layers=2, epochs=1, steps_per_epoch=5,
        batch_size=4, lr=0.05, probe_size=4, seed=2,
    ).fit(texture_world)
    rng = np.random.default_rng(8)
    examples = [gen._make_example(texture_world, rng) for _ in range(3)]
    _, grads = gen._loss_and_grads(examples)
    h = 1e-5
    check = np.random.default_rng(13)
    worst = 0.0
    n_checked = 0
    for name in sorted(gen.params_):
        arr = gen.params_[name]
        n_coords = max(1, int(0.01 * arr.size))
        for flat in check.choice(arr.size, size=min(n_coords, arr.size), replace=False):
            ij = np.unravel_index(flat, arr.shape)
            orig = arr[ij]
            arr[ij] = orig + h
            lp, _ = gen._loss_and_grads(examples)
            arr[ij] = orig - h
            lm, _ = gen._loss_and_grads(examples)
            arr[ij] = orig
            fd = (lp - lm) / (2 * h)
            bp = grads[name][ij]
            rel = abs(fd - bp) / max(abs(fd), abs(bp), 1e-6)
            worst = max(worst, rel)
            n_checked += 1
    grad_ok = worst <= 1e-3

    rows_ok = True
    sa_ok = True
    rng2 = np.random.default_rng(5)
    for _ in range(50):
        cells = rng2.integers(-1, 4, size=16)
        out = gen.forward(TokenGrid(4, 4, cells), texture_world.condition(0))
        rows_ok &= bool(np.all(np.abs(out.dists.sum(axis=1) - 1.0) < 1e-6))
        sa_ok &= bool(np.all((out.self_attention_map >= 0) & (out.self_attention_map <= 1)))
    ok = grad_ok and rows_ok and sa_ok
    report(9, "numerical soundness", ok,
           f"gradcheck worst rel err={worst:.2e} over {n_checked} coords, rows sum ok={rows_ok}, "
           f"attention in [0,1]={sa_ok}, {time.time() - t0:.0f}s")


def test_criterion_10_determinism(tmp_path):
    t0 = time.time()
    from remask.cli import main

    def run(cmd, cfg, out, extra=()):
        cfg_path = tmp_path / f"{out}.json"
        cfg_path.write_text(json.dumps(cfg))
        rc = main([cmd, "--config", str(cfg_path), "--out", str(tmp_path / out), *extra])
        assert rc == 0, f"{cmd} exited {rc}"
        return {
            p.name: p.read_bytes()
            for p in sorted((tmp_path / out).rglob("*"))
            if p.is_file()
        }

    gen_cfg = {
        "world": "builtin:disjoint", "strategy": "random_revoke", "steps": 3,
        "samples": 4, "seed": 17, "condition": 0, "guidance": 1.0,
    }
    same_gen = run("generate", gen_cfg, "g1") == run("generate", gen_cfg, "g2")

    sweep_cfg = {
        "world": "builtin:overlap", "strategy": "persistent", "steps": 4,
        "samples": 2, "seed": 3, "condition": 0, "guidance": 2.0,
        "sweep": {"w": [1, 4, "inf"], "steps": [2, 4]},
    }
    sweep_jobs_equal = (
        run("sweep", sweep_cfg, "s1", ("--jobs", "1"))
        == run("sweep", sweep_cfg, "s2", ("--jobs", "3"))
    )

    train_cfg = {
        "world": "builtin:texture", "seed": 7,
        "train": {"kind": "selector", "generator": "oracle", "epochs": 2,
                  "steps_per_epoch": 5, "batch_size": 4, "probe_size": 4},
    }
    same_train = run("train", train_cfg, "t1") == run("train", train_cfg, "t2")

    ok = same_gen and sweep_jobs_equal and same_train
    report(10, "determinism", ok,
           f"generate={same_gen}, sweep(jobs 1 vs 3)={sweep_jobs_equal}, train={same_train}, "
           f"{time.time() - t0:.0f}s")
