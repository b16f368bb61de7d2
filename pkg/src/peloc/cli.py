"""Command-line interface.

Subcommands: synth, annotate, review-serve, verify, train, grid, eval,
report. Option precedence is flag > config-file value > built-in default;
--config names a JSON file with one section per subcommand.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

from . import core, evaluate, ingest, net, supervision, synth, training
from .errors import ConfigError, ParseError, PelocError


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


class _Options:
    """Flag > config file > default resolution with defaults in --help."""

    def __init__(self, sub: argparse.ArgumentParser, section: str):
        self.sub = sub
        self.section = section
        self.defaults = {}

    def add(self, name: str, default, help: str, type=str, **kwargs):
        dest = name.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        if type is bool:
            self.sub.add_argument(name, dest=dest, action="store_true", default=None,
                                  help=f"{help} (default: {default})")
        else:
            self.sub.add_argument(name, dest=dest, default=None, type=type,
                                  help=f"{help} (default: {default})", **kwargs)

    def resolve(self, args: argparse.Namespace, file_cfg: dict) -> dict:
        section = file_cfg.get(self.section, {})
        out = {}
        for dest, default in self.defaults.items():
            flag = getattr(args, dest, None)
            out[dest] = flag if flag is not None else section.get(dest, default)
        return out


def _ratio_triple(text: str):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated ratios")
    return tuple(parts)


def _float_list(text: str):
    return tuple(float(x) for x in str(text).split(","))


def _int_list(text: str):
    return tuple(int(x) for x in str(text).split(","))


def _str_list(text: str):
    return tuple(x.strip() for x in str(text).split(","))


def build_parser() -> tuple[_Parser, dict[str, _Options]]:
    parser = _Parser(prog="peloc", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", default=None, help="JSON config file (flags override it)")
    subs = parser.add_subparsers(dest="command", required=True)
    opts: dict[str, _Options] = {}

    def section(name, help):
        sub = subs.add_parser(name, help=help)
        opts[name] = _Options(sub, name)
        return opts[name]

    o = section("synth", "generate a synthetic corpus")
    o.add("--n", 68, "number of sessions", type=int)
    o.add("--seed", 0, "corpus seed", type=int)
    o.add("--out", "corpus", "output directory")
    o.add("--preset", "desk", "desk (short sessions) or full (clinical-scale durations)")

    o = section("annotate", "propose phase annotations for every session")
    o.add("--corpus", "corpus", "corpus directory (manifest.json inside)")
    o.add("--annotator", "mock", "mock or http")
    o.add("--jitter", 2.0, "mock annotator timestamp jitter in seconds", type=float)
    o.add("--seed", 0, "mock annotator seed", type=int)

    o = section("review-serve", "serve the HTTP review API (and UI if built)")
    o.add("--corpus", "corpus", "corpus directory with proposals.jsonl")
    o.add("--host", "127.0.0.1", "bind address")
    o.add("--port", 8765, "port", type=int)
    o.add("--tolerance", supervision.DEFAULT_TOLERANCE_S, "agreement tolerance in seconds", type=float)
    o.add("--ui", "frontend/dist", "static UI directory to mount at /ui")

    o = section("verify", "review pending proposals in the terminal")
    o.add("--corpus", "corpus", "corpus directory with proposals.jsonl")
    o.add("--rater", "rater", "rater id recorded in verdicts")
    o.add("--tolerance", supervision.DEFAULT_TOLERANCE_S, "agreement tolerance in seconds", type=float)

    def train_like(o):
        o.add("--corpus", "corpus", "corpus directory")
        o.add("--out", "runs", "output directory for results and checkpoints")
        o.add("--ratios", (48 / 68, 10 / 68, 10 / 68), "train,val,test ratios", type=_ratio_triple)
        o.add("--split-seed", 0, "dataset split seed", type=int)
        o.add("--epochs", 10, "max training epochs", type=int)
        o.add("--lr", 1e-4, "peak learning rate", type=float)
        o.add("--weight-decay", 0.01, "decoupled weight decay", type=float)
        o.add("--warmup-ratio", 0.1, "warmup fraction of total steps", type=float)
        o.add("--patience", 3, "early-stopping patience in epochs", type=int)
        o.add("--pretrain-steps", 200, "base proxy-pretraining steps", type=int)
        o.add("--train-per-boundary", evaluate.DEFAULT_TRAIN_PER_BOUNDARY,
              "training windows per boundary", type=int)
        o.add("--test-per-boundary", evaluate.DEFAULT_TEST_PER_BOUNDARY,
              "eval placements per test boundary", type=int)

    o = section("train", "train one (window, config, seed) cell")
    o.add("--window", 30.0, "window duration in seconds", type=float)
    o.add("--model", "lora8", "head, lora2, lora4 or lora8")
    o.add("--seed", 42, "training seed", type=int)
    train_like(o)

    o = section("grid", "run the full experiment grid")
    o.add("--windows", (30.0, 60.0, 120.0), "window durations", type=_float_list)
    o.add("--configs", ("head", "lora2", "lora4", "lora8"), "model configs", type=_str_list)
    o.add("--seeds", training.PAPER_SEEDS, "training seeds", type=_int_list)
    o.add("--workers", 1, "parallel cell workers", type=int)
    train_like(o)

    o = section("eval", "evaluate a checkpoint on a corpus split")
    o.add("--checkpoint", "runs/ckpt", "checkpoint directory")
    o.add("--corpus", "corpus", "corpus directory")
    o.add("--ratios", (48 / 68, 10 / 68, 10 / 68), "train,val,test ratios", type=_ratio_triple)
    o.add("--split-seed", 0, "dataset split seed", type=int)
    o.add("--split", "test", "which split to evaluate")
    o.add("--test-per-boundary", evaluate.DEFAULT_TEST_PER_BOUNDARY,
          "eval placements per boundary", type=int)

    o = section("report", "render grid results as text and CSV tables")
    o.add("--results", "runs", "directory holding cell_*.json files")
    o.add("--format", "both", "text, csv, or both")

    return parser, opts


def _train_cfg(v: dict) -> training.TrainConfig:
    return training.TrainConfig(
        lr_peak=v["lr"], weight_decay=v["weight_decay"], warmup_ratio=v["warmup_ratio"],
        epochs=v["epochs"], patience=v["patience"], pretrain_steps=v["pretrain_steps"])


def cmd_synth(v) -> int:
    if v["preset"] == "desk":
        cfg = synth.desk_config(n_sessions=v["n"], seed=v["seed"])
    elif v["preset"] == "full":
        cfg = synth.SynthConfig(n_sessions=v["n"], seed=v["seed"])
    else:
        raise ValueError(f"unknown preset {v['preset']!r}")
    sessions, stats = synth.generate_corpus(cfg, v["out"])
    print(f"wrote {len(sessions)} sessions to {v['out']} "
          f"(mean duration {stats['mean_duration_s']:.1f}s, "
          f"total {stats['total_duration_s'] / 3600:.2f}h)")
    return 0


def cmd_annotate(v) -> int:
    root = Path(v["corpus"])
    sessions = core.load_manifest(root / "manifest.json")
    if v["annotator"] == "mock":
        annotator = supervision.MockAnnotator(jitter_s=v["jitter"], seed=v["seed"])
    elif v["annotator"] == "http":
        annotator = supervision.HttpAnnotator()
    else:
        raise ValueError(f"unknown annotator {v['annotator']!r}")
    proposals = []
    for s in sessions:
        sents = ingest.parse_transcript(s.transcript_path)
        text = "\n".join(f"[{x.start_s:.2f}-{x.end_s:.2f}] {x.speaker}: {x.text}" for x in sents)
        proposals.extend(supervision.annotate(s, text, annotator))
    supervision.save_proposals(proposals, root / "proposals.jsonl")
    print(f"wrote {len(proposals)} proposals for {len(sessions)} sessions "
          f"to {root / 'proposals.jsonl'}")
    return 0


def cmd_review_serve(v) -> int:
    from . import server

    ui = v["ui"] if Path(v["ui"]).is_dir() else None
    print(f"review API on http://{v['host']}:{v['port']}  (ui: {ui or 'not built'})")
    server.serve(v["corpus"], host=v["host"], port=v["port"],
                 tolerance_s=v["tolerance"], ui_dir=ui)
    return 0


def cmd_verify(v, stdin=None) -> int:
    """Terminal review loop: the primary component is fully operable with no
    UI built."""
    stdin = stdin or sys.stdin
    root = Path(v["corpus"])
    proposals = supervision.load_proposals(root / "proposals.jsonl")
    store = supervision.VerdictStore(proposals, log_path=root / "verdicts.jsonl")
    import time as _time
    for p in store.pending():
        print(f"\n{p.proposal_id}: {p.description}")
        print(f"  start {p.start_s:.2f}s  stop {p.stop_s:.2f}s  present={p.present}")
        print("  [a]ccept / [c]orrect / [r]eject-label / [s]kip / [q]uit: ", end="", flush=True)
        choice = stdin.readline().strip().lower()
        if choice == "q":
            break
        if choice == "s" or choice == "":
            continue
        decision = {"a": "accept", "c": "correct", "r": "reject-label"}.get(choice)
        if decision is None:
            print(f"  unknown choice {choice!r}, skipping")
            continue
        kwargs = {}
        if decision == "correct":
            print("  corrected start (s): ", end="", flush=True)
            kwargs["corrected_start_s"] = float(stdin.readline().strip())
            print("  corrected stop (s): ", end="", flush=True)
            kwargs["corrected_stop_s"] = float(stdin.readline().strip())
        verdict = supervision.RaterVerdict(
            proposal_id=p.proposal_id, decision=decision, rater_id=v["rater"],
            timestamp=_time.time(), **kwargs)
        ann = supervision.apply_verdict(store, verdict)
        print(f"  recorded: {ann.phase.name} {ann.start_s:.2f}-{ann.stop_s:.2f} present={ann.present}")
    if store.verdicts:
        stats = supervision.compute_agreement(proposals, store.verdicts, v["tolerance"])
        print(f"\nagreement at {stats.tolerance_s:g}s tolerance: "
              f"timestamps {stats.timestamp_accuracy:.2%} ({stats.n_timestamps}), "
              f"labels {stats.label_accuracy:.2%} ({stats.n_labels})")
    return 0


def cmd_train(v) -> int:
    corpus = evaluate.Corpus.from_dir(v["corpus"], v["ratios"], v["split_seed"])
    cfg = _train_cfg(v)
    cell = evaluate.CellSpec(v["window"], v["model"], v["seed"])
    n_train = len(corpus.part("train")) * 6 * v["train_per_boundary"]
    total = cfg.epochs * n_train
    print(f"training {v['model']} at {v['window']:g}s windows, seed {v['seed']}: "
          f"{total} steps, lr peaks at {cfg.lr_peak:g} at step {cfg.warmup_ratio * total:.0f} "
          f"({cfg.warmup_ratio:.0%} of steps), cosine decay after")
    out = evaluate.run_cell(corpus, cell, cfg, out_dir=v["out"],
                            train_per_boundary=v["train_per_boundary"],
                            test_per_boundary=v["test_per_boundary"])
    for h in out["history"]:
        print(f"  epoch {h['epoch']}: train_loss={h['train_loss']:.4f} "
              f"val_mae={h['val_mae_seconds']:.2f}s lr_last={h['lr_last']:.3e}")
    print(f"best epoch {out['best_epoch']} val MAE {out['best_val_mae_s']:.2f}s; test MAE:")
    print(json.dumps(out["mae"], indent=2))
    return 0


def cmd_grid(v) -> int:
    grid = evaluate.GridSpec(windows=v["windows"], configs=v["configs"], seeds=v["seeds"])
    results = evaluate.run_grid(
        v["corpus"], v["ratios"], v["split_seed"], grid, _train_cfg(v), v["out"],
        workers=v["workers"], train_per_boundary=v["train_per_boundary"],
        test_per_boundary=v["test_per_boundary"])
    text = evaluate.render_text_report(results)
    (Path(v["out"]) / "report.txt").write_text(text)
    (Path(v["out"]) / "report.csv").write_text(evaluate.render_csv_report(results))
    print(text)
    return 0 if not results["failures"] else 2


def cmd_eval(v) -> int:
    model, meta = net.load_checkpoint(v["checkpoint"])
    corpus = evaluate.Corpus.from_dir(v["corpus"], v["ratios"], v["split_seed"])
    D = float(meta.get("window", 30.0))
    sessions = corpus.part(v["split"])
    test_set = evaluate.build_example_set(sessions, D, evaluate.DEFAULT_EVAL_SEED,
                                          v["test_per_boundary"])
    records = evaluate.evaluate_model(model, test_set)
    table = evaluate.mae_seconds(records)
    print(f"{v['split']} split, {len(records)} windows at D={D:g}s:")
    print(json.dumps(table, indent=2))
    return 0


def infer_grid(results_dir) -> evaluate.GridSpec:
    pat = re.compile(r"cell_(\d+)s_([a-z0-9]+)_s(\d+)\.json$")
    windows, configs, seeds = set(), set(), set()
    for p in Path(results_dir).glob("cell_*.json"):
        m = pat.match(p.name)
        if m:
            windows.add(float(m.group(1)))
            configs.add(m.group(2))
            seeds.add(int(m.group(3)))
    if not windows:
        raise ValueError(f"no cell_*.json results under {results_dir}")
    order = {c: i for i, c in enumerate(evaluate.GRID_CONFIGS)}
    return evaluate.GridSpec(windows=tuple(sorted(windows)),
                             configs=tuple(sorted(configs, key=lambda c: order.get(c, 99))),
                             seeds=tuple(sorted(seeds)))


def cmd_report(v) -> int:
    results = evaluate.collect_results(v["results"], infer_grid(v["results"]))
    results["failures"] = {}
    if v["format"] in ("text", "both"):
        text = evaluate.render_text_report(results)
        (Path(v["results"]) / "report.txt").write_text(text)
        print(text)
    if v["format"] in ("csv", "both"):
        csv = evaluate.render_csv_report(results)
        (Path(v["results"]) / "report.csv").write_text(csv)
        if v["format"] == "csv":
            print(csv)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "annotate": cmd_annotate,
    "review-serve": cmd_review_serve,
    "verify": cmd_verify,
    "train": cmd_train,
    "grid": cmd_grid,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser, opts = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    file_cfg = {}
    if args.config:
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            print(f"error: bad config file {args.config}: {e}", file=sys.stderr)
            return 1
    values = opts[args.command].resolve(args, file_cfg)
    try:
        return COMMANDS[args.command](values)
    except (ValueError, ConfigError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PelocError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
