"""Command-line entry point: generate, sweep, train, edit, refine, upscale.

Configuration is a JSON file plus ``--set key=value`` overrides (dotted keys
reach nested sections, values parse as JSON with a plain-string fallback).
Every command is reproducible from (config, seed): per-sample and per-cell
generators derive from numpy SeedSequence spawn keys, so sweep results do not
depend on the job count.

Exit codes: 0 success, 2 config error, 3 runtime/model error, 4 partial sweep
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .errors import RemaskError, TrainingFailureError
from .grid import (
    Condition,
    MaskSchedule,
    TokenGrid,
    grid_from_text,
    grid_to_text,
    make_cosine_schedule,
    make_linear_schedule,
)
from .neuralgen import NeuralGenerator, OracleGenerator
from .sampling import (
    INFINITE,
    Persistent,
    Purity,
    RandomRevoke,
    Strategy,
    Tcts,
    TctsFas,
    UniformFixed,
    generate,
    write_trajectory,
)
from .selector import OracleSelector, TokenSelector
from .tasks import EditRequest, edit_mask_free, refine_mask_lowest, refine_steps, upsample_token_map, upscale_tiled
from .toyworld import ToyWorld, load_world

DEFAULTS = {
    "world": None,
    "generator": "oracle",
    "selector": "none",
    "strategy": "uniform",
    "w": 15.0,
    "phi": 0.45,
    "schedule": "linear",
    "steps": 8,
    "guidance": 5.0,
    "condition": None,
    "seed": 0,
    "samples": 16,
    "out": None,
    "deterministic_selection": False,
    "predict_mode": "sample",
}

STRATEGY_NAMES = ("uniform", "purity", "random_revoke", "persistent", "tcts", "tcts_fas")


@dataclass
class RunConfig:
    raw: dict
    world_path: str
    world: ToyWorld
    generator_kind: str
    selector_kind: str
    strategy_name: str
    w: float
    phi: float
    schedule_kind: str
    steps: int
    guidance: float
    condition: Condition
    seed: int
    samples: int
    out_dir: str
    deterministic_selection: bool
    predict_mode: str
    errors: list = field(default_factory=list)


def _parse_set(expr: str):
    if "=" not in expr:
        raise ValueError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_set(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot descend into {p!r} in --set {key}")
    node[parts[-1]] = value


def _load_config(args) -> dict:
    with open(args.config, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    for expr in args.set or []:
        key, value = _parse_set(expr)
        _apply_set(cfg, key, value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


def _resolve(cfg: dict, command: str) -> RunConfig:
    errors: list[str] = []
    merged = dict(DEFAULTS)
    merged.update({k: v for k, v in cfg.items() if k in DEFAULTS})

    world = None
    world_path = merged.get("world")
    if not world_path:
        errors.append("world: missing world path")
    else:
        try:
            world = load_world(world_path)
        except (OSError, ValueError) as exc:
            errors.append(f"world: {exc}")

    strategy_name = str(merged["strategy"])
    if strategy_name not in STRATEGY_NAMES:
        errors.append(f"strategy: unknown {strategy_name!r}, expected one of {STRATEGY_NAMES}")

    selector_kind = str(merged["selector"])
    if strategy_name in ("tcts", "tcts_fas") and selector_kind == "none":
        errors.append("selector: strategy %r requires a selector, got 'none'" % strategy_name)

    generator_kind = str(merged["generator"])
    if generator_kind != "oracle" and not os.path.exists(generator_kind):
        errors.append(f"generator: checkpoint {generator_kind!r} not readable")
    if selector_kind not in ("none", "oracle") and not os.path.exists(selector_kind):
        errors.append(f"selector: checkpoint {selector_kind!r} not readable")

    w = merged["w"]
    if isinstance(w, str):
        w = INFINITE if w.lower() in ("inf", "infinite") else float(w)
    w = float(w)
    if not w >= 1.0:
        errors.append(f"w: persistent weight must be >= 1, got {w}")

    phi = float(merged["phi"])
    if not 0.0 <= phi <= 1.0:
        errors.append(f"phi: must lie in [0, 1], got {phi}")

    schedule_kind = str(merged["schedule"])
    if schedule_kind not in ("linear", "cosine"):
        errors.append(f"schedule: unknown {schedule_kind!r}")

    steps = int(merged["steps"])
    if steps < 1:
        errors.append(f"steps: must be >= 1, got {steps}")
    elif world is not None and steps > world.n_cells:
        errors.append(f"steps: {steps} exceeds the {world.n_cells}-cell grid")

    guidance = float(merged["guidance"])
    if guidance < 0:
        errors.append(f"guidance: must be >= 0, got {guidance}")

    seed = int(merged["seed"])
    if not 0 <= seed < 2**64:
        errors.append(f"seed: must be an unsigned 64-bit integer, got {seed}")

    samples = int(merged["samples"])
    if samples < 1:
        errors.append(f"samples: must be >= 1, got {samples}")

    condition = None
    if world is not None:
        cid = merged["condition"]
        cid = world.conditions[0].id if cid is None else int(cid)
        try:
            condition = world.condition(cid)
        except KeyError:
            errors.append(f"condition: id {cid} not in world")

    predict_mode = str(merged["predict_mode"])
    if predict_mode not in ("sample", "argmax"):
        errors.append(f"predict_mode: must be sample|argmax, got {predict_mode!r}")

    out_dir = merged.get("out") or os.environ.get("REMASK_OUT") or os.path.join("runs", command)

    return RunConfig(
        raw=cfg,
        world_path=str(world_path),
        world=world,
        generator_kind=generator_kind,
        selector_kind=selector_kind,
        strategy_name=strategy_name,
        w=w,
        phi=phi,
        schedule_kind=schedule_kind,
        steps=steps,
        guidance=guidance,
        condition=condition,
        seed=seed,
        samples=samples,
        out_dir=str(out_dir),
        deterministic_selection=bool(merged["deterministic_selection"]),
        predict_mode=predict_mode,
        errors=errors,
    )


def _build_strategy(rc: RunConfig) -> Strategy:
    name = rc.strategy_name
    if name == "uniform":
        return UniformFixed()
    if name == "purity":
        return Purity()
    if name == "random_revoke":
        return RandomRevoke()
    if name == "persistent":
        return Persistent(rc.w)
    if name == "tcts":
        return Tcts(w=rc.w if math.isfinite(rc.w) else 15.0, deterministic=rc.deterministic_selection)
    return TctsFas(
        w=rc.w if math.isfinite(rc.w) else 15.0,
        phi=rc.phi,
        deterministic=rc.deterministic_selection,
    )


def _build_generator(rc: RunConfig):
    if rc.generator_kind == "oracle":
        return OracleGenerator(rc.world)
    return NeuralGenerator.load(rc.generator_kind)


def _build_selector(rc: RunConfig):
    if rc.selector_kind == "none":
        return None
    if rc.selector_kind == "oracle":
        return OracleSelector(rc.world)
    return TokenSelector.load(rc.selector_kind)


def _build_schedule(rc: RunConfig, n_tokens: int) -> MaskSchedule:
    maker = make_linear_schedule if rc.schedule_kind == "linear" else make_cosine_schedule
    return maker(n_tokens, rc.steps)


def _config_hash(cfg: dict) -> str:
    semantic = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(semantic, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _sample_rng(seed: int, cell: int, sample: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(cell, sample)))


def _run_cell(rc: RunConfig, cell_index: int) -> dict:
    """Generate rc.samples grids and aggregate the metrics row."""
    gen = _build_generator(rc)
    selector = _build_selector(rc)
    strategy = _build_strategy(rc)
    schedule = _build_schedule(rc, rc.world.n_cells)
    grids = []
    trajs = []
    for i in range(rc.samples):
        rng = _sample_rng(rc.seed, cell_index, i)
        g, traj = generate(
            gen, selector, strategy, schedule, rc.condition, rc.guidance, rng,
            predict_mode=rc.predict_mode,
        )
        grids.append(g)
        trajs.append(traj)
    row = _metrics_row(rc, grids, trajs)
    return {"row": row, "grids": grids, "trajs": trajs}


def _metrics_row(rc: RunConfig, grids, trajs) -> dict:
    world = rc.world
    nll = metrics_mod.exact_nll(grids, world, rc.condition)
    drops = np.stack([metrics_mod.resample_count_stats(t) for t in trajs])
    row = {
        "world": rc.world_path,
        "condition": rc.condition.id,
        "strategy": rc.strategy_name,
        "T": rc.steps,
        "w": rc.w,
        "phi": rc.phi,
        "s": rc.guidance,
        "seed": rc.seed,
        "alignment_rate": metrics_mod.alignment_rate(grids, world, rc.condition),
        "exact_nll": nll.value,
        "mean_drops": float(drops.mean()),
        "error": "",
    }
    for label, col in (("low_freq", "diversity_low"), ("high_freq", "diversity_high")):
        try:
            region = world.region_locations(label) if world.regions else np.array([])
        except ValueError:
            region = np.array([])
        row[col] = (
            metrics_mod.diversity_entropy(grids, region) if region.size else ""
        )
    return row


def cmd_generate(rc: RunConfig, jobs: int) -> int:
    os.makedirs(rc.out_dir, exist_ok=True)
    result = _run_cell(rc, cell_index=0)
    chash = _config_hash(rc.raw)
    k = rc.world.codebook.size
    for i, (g, traj) in enumerate(zip(result["grids"], result["trajs"])):
        with open(os.path.join(rc.out_dir, f"sample_{i:04d}.grid.txt"), "w") as fh:
            fh.write(grid_to_text(g, k))
        write_trajectory(
            os.path.join(rc.out_dir, f"sample_{i:04d}.traj.txt"), traj, k, chash, rc.seed
        )
    metrics_mod.write_metrics_csv(os.path.join(rc.out_dir, "metrics.csv"), [result["row"]])
    return 0


SWEEPABLE = ("strategy", "w", "phi", "steps", "guidance", "condition", "schedule", "samples")


def cmd_sweep(rc: RunConfig, jobs: int) -> int:
    sweep_spec = rc.raw.get("sweep", {})
    if not isinstance(sweep_spec, dict):
        print("sweep: must be an object of key -> list", file=sys.stderr)
        return 2
    bad = [k for k in sweep_spec if k not in SWEEPABLE]
    if bad:
        print(f"sweep: cannot sweep over {bad}; allowed {SWEEPABLE}", file=sys.stderr)
        return 2
    keys = sorted(sweep_spec)
    value_lists = [list(sweep_spec[k]) for k in keys]
    cells = list(itertools.product(*value_lists)) if keys else [()]

    def run_one(idx_cell):
        idx, values = idx_cell
        cfg = dict(rc.raw)
        cfg.pop("sweep", None)
        for key, value in zip(keys, values):
            cfg[key] = value
        sub = _resolve(cfg, "sweep")
        cell_key = json.dumps(dict(zip(keys, values)), sort_keys=True)
        if sub.errors:
            row = {c: "" for c in metrics_mod.CSV_COLUMNS}
            row.update({"world": rc.world_path, "seed": rc.seed, "error": "; ".join(sub.errors)})
            return idx, cell_key, row, True
        try:
            row = _run_cell(sub, cell_index=idx)["row"]
            return idx, cell_key, row, False
        except RemaskError as exc:
            row = {c: "" for c in metrics_mod.CSV_COLUMNS}
            row.update(
                {
                    "world": sub.world_path,
                    "condition": sub.condition.id if sub.condition else "",
                    "strategy": sub.strategy_name,
                    "T": sub.steps,
                    "w": sub.w,
                    "phi": sub.phi,
                    "s": sub.guidance,
                    "seed": sub.seed,
                    "error": f"{type(exc).__name__}: {exc}",
                }
            )
            return idx, cell_key, row, True

    indexed = list(enumerate(cells))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, indexed))
    else:
        results = [run_one(ic) for ic in indexed]
    results.sort(key=lambda r: r[1])
    os.makedirs(rc.out_dir, exist_ok=True)
    metrics_mod.write_metrics_csv(
        os.path.join(rc.out_dir, "sweep.csv"), [r[2] for r in results]
    )
    return 4 if any(r[3] for r in results) else 0


_GENERATOR_KEYS = (
    "d_model", "n_heads", "n_layers", "epochs", "steps_per_epoch", "batch_size",
    "lr", "momentum", "null_fraction", "attention_map_kind", "probe_size",
)
_SELECTOR_KEYS = (
    "d_model", "n_heads", "n_layers", "epochs", "steps_per_epoch", "batch_size",
    "lr", "momentum", "mask_ratio_range", "guidance_range", "probe_size",
)


def cmd_train(rc: RunConfig, jobs: int) -> int:
    spec = rc.raw.get("train", {})
    kind = spec.get("kind")
    if kind not in ("generator", "selector"):
        print("train.kind: must be 'generator' or 'selector'", file=sys.stderr)
        return 2
    os.makedirs(rc.out_dir, exist_ok=True)
    ckpt = spec.get("checkpoint") or os.path.join(rc.out_dir, f"{kind}.ckpt")
    allowed = _GENERATOR_KEYS if kind == "generator" else _SELECTOR_KEYS
    hyper = {k: spec[k] for k in allowed if k in spec}
    for key in ("mask_ratio_range", "guidance_range"):
        if key in hyper:
            hyper[key] = tuple(hyper[key])
    try:
        if kind == "generator":
            model = NeuralGenerator(seed=rc.seed, **hyper).fit(rc.world)
        else:
            base_kind = spec.get("generator", "oracle")
            base = (
                OracleGenerator(rc.world)
                if base_kind == "oracle"
                else NeuralGenerator.load(base_kind)
            )
            model = TokenSelector(seed=rc.seed, **hyper).fit(rc.world, base)
        model.save(ckpt)
    except TrainingFailureError as exc:
        if os.path.exists(ckpt):
            os.remove(ckpt)
        print(f"training failed: {exc}", file=sys.stderr)
        return 3
    with open(os.path.join(rc.out_dir, "train_loss.csv"), "w", encoding="utf-8") as fh:
        fh.write("epoch,probe_loss\n")
        for epoch, loss in enumerate(model.probe_losses_):
            fh.write(f"{epoch},{loss!r}\n")
    return 0


def _load_input_grid(rc: RunConfig, spec: dict, key_name: str):
    path = spec.get("input")
    if not path:
        print(f"{key_name}.input: missing input grid path", file=sys.stderr)
        return None
    with open(path, "r", encoding="utf-8") as fh:
        grid, _ = grid_from_text(fh.read())
    return grid


def cmd_edit(rc: RunConfig, jobs: int) -> int:
    spec = rc.raw.get("edit", {})
    grid = _load_input_grid(rc, spec, "edit")
    if grid is None:
        return 2
    try:
        new_cond = rc.world.condition(int(spec.get("new_condition", rc.condition.id)))
    except KeyError as exc:
        print(f"edit.new_condition: {exc}", file=sys.stderr)
        return 2
    component = spec.get("component")
    if component is None:
        print("edit.component: missing target component", file=sys.stderr)
        return 2
    req = EditRequest(
        source=grid,
        old_condition=rc.condition,
        new_condition=new_cond,
        component=str(component),
        noise_ratio=float(spec.get("noise_ratio", 0.25)),
        steps=int(spec.get("steps", 10)),
    )
    gen = _build_generator(rc)
    selector = _build_selector(rc) or OracleSelector(rc.world)
    out = edit_mask_free(req, gen, selector, rc.guidance, _sample_rng(rc.seed, 0, 0))
    os.makedirs(rc.out_dir, exist_ok=True)
    with open(os.path.join(rc.out_dir, "edited.grid.txt"), "w") as fh:
        fh.write(grid_to_text(out, rc.world.codebook.size))
    return 0


def cmd_refine(rc: RunConfig, jobs: int) -> int:
    spec = rc.raw.get("refine", {})
    grid = _load_input_grid(rc, spec, "refine")
    if grid is None:
        return 2
    mode = spec.get("mode", "steps")
    gen = _build_generator(rc)
    selector = _build_selector(rc) or OracleSelector(rc.world)
    rng = _sample_rng(rc.seed, 0, 0)
    if mode == "steps":
        out = refine_steps(
            grid, gen, selector, int(spec.get("revision_steps", 8)),
            rc.condition, rc.guidance, rng,
            fraction=float(spec.get("fraction", 1.0)),
        )
    elif mode == "mask_lowest":
        out = refine_mask_lowest(
            grid, gen, selector, float(spec.get("fraction", 0.6)),
            rc.condition, rc.guidance, rng,
        )
    else:
        print(f"refine.mode: unknown {mode!r}", file=sys.stderr)
        return 2
    os.makedirs(rc.out_dir, exist_ok=True)
    with open(os.path.join(rc.out_dir, "refined.grid.txt"), "w") as fh:
        fh.write(grid_to_text(out, rc.world.codebook.size))
    return 0


def cmd_upscale(rc: RunConfig, jobs: int) -> int:
    spec = rc.raw.get("upscale", {})
    grid = _load_input_grid(rc, spec, "upscale")
    if grid is None:
        return 2
    factor = int(spec.get("factor", 2))
    passes = int(spec.get("passes", 2))
    gen = _build_generator(rc)
    selector = _build_selector(rc) or OracleSelector(rc.world)
    window = (gen.height, gen.width)
    overlap = spec.get("overlap")
    overlap = int(overlap) if overlap is not None else min(window) // 4
    up = upsample_token_map(grid, gen.token_embeddings(), factor)
    if passes > 0:
        up = upscale_tiled(
            up, gen, selector, window, overlap, passes, rc.condition, rc.guidance,
            _sample_rng(rc.seed, 0, 0),
            revision_steps=int(spec.get("revision_steps", 2)),
        )
    os.makedirs(rc.out_dir, exist_ok=True)
    with open(os.path.join(rc.out_dir, "upscaled.grid.txt"), "w") as fh:
        fh.write(grid_to_text(up, rc.world.codebook.size))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "sweep": cmd_sweep,
    "train": cmd_train,
    "edit": cmd_edit,
    "refine": cmd_refine,
    "upscale": cmd_upscale,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="remask", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    parser.add_argument("--seed", type=int, default=None, help="override the seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    args = parser.parse_args(argv)

    try:
        cfg = _load_config(args)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"config: {exc}", file=sys.stderr)
        return 2

    rc = _resolve(cfg, args.command)
    if rc.errors:
        for err in rc.errors:
            print(err, file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](rc, max(1, args.jobs))
    except RemaskError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
