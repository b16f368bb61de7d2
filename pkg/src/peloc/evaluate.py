"""Denormalized MAE evaluation, per-phase aggregation, multi-seed statistics,
the experiment grid runner, and report rendering in the paper-table layout
(12 row groups x 9 MAE columns)."""

from __future__ import annotations

import dataclasses
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import core, net, training, windowing
from .core import PhaseKind, Session
from .ingest import SessionAudioCache
from .windowing import BoundaryKind, WindowPlan, denormalize_offset

GRID_CONFIGS = {
    "head": {"lora_rank": 0, "head_only": True},
    "lora2": {"lora_rank": 2, "head_only": False},
    "lora4": {"lora_rank": 4, "head_only": False},
    "lora8": {"lora_rank": 8, "head_only": False},
}

DEFAULT_EVAL_SEED = 90210      # shared placement seed: every config sees the same eval windows
DEFAULT_BASE_SEED = 17
DEFAULT_TRAIN_PER_BOUNDARY = 4
DEFAULT_VAL_PER_BOUNDARY = 2
DEFAULT_TEST_PER_BOUNDARY = 4

PHASE_COLUMNS = [(p, col) for p in ("P1", "P2", "P3") for col in ("Avg", "Start", "End")]


@dataclass(frozen=True)
class EvalRecord:
    session_id: str
    phase: PhaseKind
    boundary: BoundaryKind
    D: float
    t_start: float
    o_true: float
    o_hat: float
    abs_error_s: float


@dataclass(frozen=True)
class GridSpec:
    windows: tuple = (30.0, 60.0, 120.0)
    configs: tuple = ("head", "lora2", "lora4", "lora8")
    seeds: tuple = training.PAPER_SEEDS

    def cells(self) -> list[tuple[float, str, int]]:
        if not (self.windows and self.configs and self.seeds):
            raise ValueError("grid sets must be non-empty")
        for c in self.configs:
            if c not in GRID_CONFIGS:
                raise ValueError(f"unknown config {c!r}")
        return [(D, c, s) for D in self.windows for c in self.configs for s in self.seeds]


@dataclass
class Corpus:
    root: str
    sessions: list[Session]
    split: core.SplitAssignment

    def part(self, name: str) -> list[Session]:
        ids = set(self.split.ids(name))
        return [s for s in self.sessions if s.id in ids]

    @classmethod
    def from_dir(cls, root, ratios, split_seed: int = 0) -> "Corpus":
        root = Path(root)
        sessions = core.load_manifest(root / "manifest.json")
        usable = [s for s in sessions if not core.exclusion_reasons(s)]
        split = core.split_dataset([s.id for s in usable], ratios, split_seed)
        return cls(str(root), usable, split)


def plan_session_examples(session: Session, D: float, seed_root: int, index: int,
                          per_boundary: int) -> list[WindowPlan]:
    seed = int(np.random.SeedSequence([seed_root, index]).generate_state(1)[0])
    return windowing.plan_examples(session, D, seed, per_boundary)


def build_example_set(sessions, D: float, seed_root: int, per_boundary: int,
                      cache: SessionAudioCache | None = None) -> training.ExampleSet:
    plans = []
    for i, s in enumerate(sessions):
        plans.extend(plan_session_examples(s, D, seed_root, i, per_boundary))
    paths = {s.id: s.audio_path for s in sessions}
    return training.ExampleSet(plans, paths, cache)


def evaluate_model(model: net.BoundaryRegressor, example_set: training.ExampleSet) -> list[EvalRecord]:
    """Score every planned window: denormalize the prediction and compare
    against the true absolute boundary time."""
    records = []
    for plan in example_set.plans:
        example = example_set.materialize(plan)
        o_hat = model.predict(example)
        t_hat = denormalize_offset(o_hat, plan.spec.t_start, plan.spec.duration_D)
        records.append(EvalRecord(
            session_id=plan.spec.session_id, phase=plan.spec.phase,
            boundary=plan.spec.boundary, D=plan.spec.duration_D,
            t_start=plan.spec.t_start, o_true=plan.target_offset, o_hat=o_hat,
            abs_error_s=abs(t_hat - plan.t_abs)))
    return records


def mae_seconds(records) -> dict:
    """Start/End MAE per phase plus the pooled start+end Avg. Groups with no
    records are omitted rather than reported as zero."""
    if not records:
        raise ValueError("records must be non-empty")
    table: dict = {}
    for phase in PhaseKind:
        groups = {
            "start": [r.abs_error_s for r in records
                      if r.phase == phase and r.boundary == BoundaryKind.START],
            "end": [r.abs_error_s for r in records
                    if r.phase == phase and r.boundary == BoundaryKind.END],
        }
        pooled = groups["start"] + groups["end"]
        entry = {}
        for key, vals in groups.items():
            if vals:
                entry[key] = float(np.mean(vals))
        if pooled:
            entry["avg"] = float(np.mean(pooled))
            entry["n"] = len(pooled)
        if entry:
            table[phase.name] = entry
    return table


def aggregate_seeds(tables: list[dict]) -> dict:
    """Across-seed sample mean and (n-1)-denominator standard deviation per
    cell. With a single seed the std is omitted (None)."""
    if not tables:
        raise ValueError("no per-seed tables")
    out: dict = {}
    for phase in ("P1", "P2", "P3"):
        cols = {}
        for key in ("avg", "start", "end"):
            vals = [t[phase][key] for t in tables if phase in t and key in t[phase]]
            if not vals:
                continue
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
            cols[key] = {"mean": mean, "std": std, "n_seeds": len(vals)}
        if cols:
            out[phase] = cols
    return out


def format_cell(mean: float, std: float | None) -> str:
    if std is None:
        return f"{mean:.1f}"
    return f"{mean:.1f} ± {std:.1f}"


def config_headline(phase_avgs) -> float:
    """Unweighted mean of the per-phase Avg values for one configuration."""
    return float(np.mean(list(phase_avgs)))


# --- single training cell ----------------------------------------------------

def model_config_for(config_name: str, overrides: dict | None = None) -> net.ModelConfig:
    kwargs = dict(GRID_CONFIGS[config_name])
    if overrides:
        kwargs.update(overrides)
    return net.ModelConfig(**kwargs)


def pretrain_example_set(corpus: Corpus, train_cfg: training.TrainConfig, base_seed: int,
                         cache: SessionAudioCache | None = None) -> training.ExampleSet:
    """Randomly placed windows over the first few training sessions: the
    pretraining data never consults boundary labels."""
    sessions = corpus.part("train")[:8]
    plans = []
    for i, s in enumerate(sessions):
        seed = int(np.random.SeedSequence([base_seed, 7, i]).generate_state(1)[0])
        plans.extend(windowing.plan_probe_windows(s, train_cfg.pretrain_window_s, seed, 12))
    return training.ExampleSet(plans, {s.id: s.audio_path for s in sessions}, cache)


def _base_cache_key(cfg: net.ModelConfig, train_cfg: training.TrainConfig, base_seed: int) -> str:
    import hashlib
    shape = (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.vocab_size, cfg.audio_stride,
             cfg.n_mels, cfg.ffn_mult, base_seed, train_cfg.pretrain_steps,
             train_cfg.pretrain_lr, train_cfg.pretrain_window_s)
    return hashlib.sha256(repr(shape).encode()).hexdigest()[:16]


def prepare_base_model(cfg: net.ModelConfig, corpus: Corpus, train_cfg: training.TrainConfig,
                       base_seed: int, cache: SessionAudioCache | None = None,
                       base_cache_dir=None) -> net.BoundaryRegressor:
    """Base construction shared by every grid cell: build bare (no adapters),
    pretrain on the self-supervised energy proxy, then attach adapters per
    the config and finalize (quantize + freeze). Deterministic in
    (cfg shape, corpus, base_seed); optionally cached on disk so parallel
    cells skip redundant pretraining."""
    bare_cfg = replace(cfg, lora_rank=0, head_only=True)
    model = net.build_model(bare_cfg, base_seed)
    cached = None
    if base_cache_dir is not None:
        cached = Path(base_cache_dir) / f"base_{_base_cache_key(cfg, train_cfg, base_seed)}.npz"
    if cached is not None and cached.exists():
        state = np.load(cached)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(torch.from_numpy(state[name]))
    elif train_cfg.pretrain_steps > 0:
        pre_set = pretrain_example_set(corpus, train_cfg, base_seed, cache)
        training.pretrain_base(model, pre_set, train_cfg, seed=base_seed)
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            tmp = cached.with_name(f"{cached.stem}.{os.getpid()}.tmp.npz")
            np.savez(tmp, **{n: p.detach().numpy() for n, p in model.named_parameters()})
            os.replace(tmp, cached)
    model.cfg = cfg
    if cfg.lora_rank > 0:
        net.attach_adapters(model, generator=torch.Generator().manual_seed(base_seed + 0x5EED))
    net.finalize_base(model)
    return model


@dataclass
class CellSpec:
    window: float
    config: str
    seed: int


def run_cell(corpus: Corpus, cell: CellSpec, train_cfg: training.TrainConfig,
             model_overrides: dict | None = None, out_dir=None,
             eval_seed: int = DEFAULT_EVAL_SEED, base_seed: int = DEFAULT_BASE_SEED,
             train_per_boundary: int = DEFAULT_TRAIN_PER_BOUNDARY,
             val_per_boundary: int = DEFAULT_VAL_PER_BOUNDARY,
             test_per_boundary: int = DEFAULT_TEST_PER_BOUNDARY,
             save_ckpt: bool = True) -> dict:
    """Train and evaluate one (window, config, seed) cell. Evaluation windows
    are placed with the shared eval seed so every config sees identical ones."""
    torch.set_num_threads(1)
    t0 = time.monotonic()
    D = cell.window
    cache = SessionAudioCache()
    cfg = model_config_for(cell.config, model_overrides)
    model = prepare_base_model(cfg, corpus, train_cfg, base_seed, cache,
                               base_cache_dir=out_dir)
    train_set = build_example_set(corpus.part("train"), D, cell.seed, train_per_boundary, cache)
    val_set = build_example_set(corpus.part("validation"), D, eval_seed, val_per_boundary, cache)
    test_set = build_example_set(corpus.part("test"), D, eval_seed, test_per_boundary, cache)
    result = training.train(model, train_set, val_set, train_cfg, cell.seed)
    records = evaluate_model(model, test_set)
    table = mae_seconds(records)
    out = {
        "window": D, "config": cell.config, "seed": cell.seed,
        "mae": table,
        "test_records": [
            {"session": r.session_id, "phase": r.phase.name, "boundary": r.boundary.value,
             "D": r.D, "t_start": r.t_start, "o_true": r.o_true, "o_hat": r.o_hat,
             "abs_error_s": r.abs_error_s} for r in records],
        "best_epoch": result.best_epoch, "best_val_mae_s": result.best_val_mae,
        "stopped_early": result.stopped_early,
        "history": [dataclasses.asdict(h) for h in result.history],
        "eval_seed": eval_seed, "base_seed": base_seed,
        "test_per_boundary": test_per_boundary,
        "runtime_s": time.monotonic() - t0,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / cell_filename(cell), "w") as f:
            json.dump(out, f)
            f.write("\n")
        if save_ckpt:
            net.save_checkpoint(out_dir / f"ckpt_{int(D)}s_{cell.config}_s{cell.seed}",
                                model, base_seed, extra={"window": D, "seed": cell.seed})
    return out


def cell_filename(cell: CellSpec) -> str:
    return f"cell_{int(cell.window)}s_{cell.config}_s{cell.seed}.json"


def _run_cell_job(args) -> tuple[str, dict | None, str | None]:
    (root, ratios, split_seed, cell, train_cfg_kwargs, model_overrides, out_dir,
     eval_seed, base_seed, tpb, vpb, xpb) = args
    try:
        corpus = Corpus.from_dir(root, ratios, split_seed)
        cfg = training.TrainConfig(**train_cfg_kwargs)
        out = run_cell(corpus, cell, cfg, model_overrides, out_dir, eval_seed,
                       base_seed, tpb, vpb, xpb)
        return cell_filename(cell), out, None
    except Exception as e:  # the grid records the failure and keeps going
        return cell_filename(cell), None, f"{type(e).__name__}: {e}"


def run_grid(corpus_root, ratios, split_seed, grid: GridSpec,
             train_cfg: training.TrainConfig, out_dir, workers: int = 1,
             model_overrides: dict | None = None, eval_seed: int = DEFAULT_EVAL_SEED,
             base_seed: int = DEFAULT_BASE_SEED,
             train_per_boundary: int = DEFAULT_TRAIN_PER_BOUNDARY,
             val_per_boundary: int = DEFAULT_VAL_PER_BOUNDARY,
             test_per_boundary: int = DEFAULT_TEST_PER_BOUNDARY) -> dict:
    """Every grid cell, resumable: cells with a result file on disk are not
    re-run; individual failures are recorded and the grid continues."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [CellSpec(*c) for c in grid.cells()]
    pending = [c for c in cells if not (out_dir / cell_filename(c)).exists()]
    cfg_kwargs = dataclasses.asdict(train_cfg)
    jobs = [(str(corpus_root), tuple(ratios), split_seed, c, cfg_kwargs, model_overrides,
             str(out_dir), eval_seed, base_seed, train_per_boundary, val_per_boundary,
             test_per_boundary) for c in pending]
    failures = {}
    if jobs:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for fname, _, err in pool.map(_run_cell_job, jobs):
                    if err:
                        failures[fname] = err
        else:
            for job in jobs:
                fname, _, err = _run_cell_job(job)
                if err:
                    failures[fname] = err
    results = collect_results(out_dir, grid)
    results["failures"] = failures
    with open(out_dir / "grid_results.json", "w") as f:
        json.dump(results, f, indent=2)
        f.write("\n")
    return results


def collect_results(out_dir, grid: GridSpec) -> dict:
    """Aggregate per-cell files into the mean ± std table structure."""
    out_dir = Path(out_dir)
    rows = []
    for D in grid.windows:
        for config in grid.configs:
            tables, seeds_found, meta = [], [], {}
            for seed in grid.seeds:
                path = out_dir / cell_filename(CellSpec(D, config, seed))
                if not path.exists():
                    continue
                with open(path) as f:
                    cell = json.load(f)
                tables.append(cell["mae"])
                seeds_found.append(seed)
                meta = {"test_per_boundary": cell.get("test_per_boundary"),
                        "eval_seed": cell.get("eval_seed")}
            if not tables:
                rows.append({"window": D, "config": config, "seeds": [], "cells": None})
                continue
            agg = aggregate_seeds(tables)
            headline = config_headline(
                agg[p]["avg"]["mean"] for p in ("P1", "P2", "P3") if p in agg)
            rows.append({"window": D, "config": config, "seeds": seeds_found,
                         "cells": agg, "overall_avg_s": headline, **meta})
    return {"rows": rows, "windows": list(grid.windows), "configs": list(grid.configs),
            "seeds": list(grid.seeds)}


# --- report rendering ---------------------------------------------------------

def render_text_report(results: dict) -> str:
    """Plain-text table in the paper layout; a pure function of the results
    structure so re-rendering is byte-stable."""
    buf = io.StringIO()
    header = ["Window", "Config"] + [f"{p} {c}" for p, c in PHASE_COLUMNS]
    widths = [7, 7] + [12] * 9
    first = next((r for r in results["rows"] if r.get("cells")), None)
    tpb = first.get("test_per_boundary") if first else None
    buf.write("Per-phase average, start, and end MAE in seconds on the test split.\n")
    buf.write(f"Mean ± S.D. across seeds {results['seeds']}; "
              f"{tpb} seeded placements per test boundary.\n\n")
    buf.write("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip() + "\n")
    buf.write("-" * (sum(widths) + 2 * len(widths)) + "\n")
    best = None
    for row in results["rows"]:
        cols = [f"{row['window']:g}s", row["config"]]
        if row.get("cells"):
            for phase, col in PHASE_COLUMNS:
                cell = row["cells"].get(phase, {}).get(col.lower())
                cols.append(format_cell(cell["mean"], cell["std"]) if cell else "--")
            if best is None or row["overall_avg_s"] < best["overall_avg_s"]:
                best = row
        else:
            cols += ["--"] * 9
        buf.write("  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip() + "\n")
    if best is not None:
        buf.write(f"\nBest configuration: {best['config']} at {best['window']:g}s windows, "
                  f"overall MAE {best['overall_avg_s']:.1f} s "
                  "(mean of the three per-phase Avg cells).\n")
    if results.get("failures"):
        buf.write(f"\nFailed cells: {json.dumps(results['failures'])}\n")
    return buf.getvalue()


def render_csv_report(results: dict) -> str:
    lines = ["window,config," + ",".join(f"{p} {c}" for p, c in PHASE_COLUMNS)]
    for row in results["rows"]:
        cols = [f"{row['window']:g}", row["config"]]
        for phase, col in PHASE_COLUMNS:
            cell = (row.get("cells") or {}).get(phase, {}).get(col.lower())
            cols.append(format_cell(cell["mean"], cell["std"]) if cell else "")
        lines.append(",".join(cols))
    return "\n".join(lines) + "\n"
