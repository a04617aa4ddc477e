"""Command-line entry point: ``rehydil <subcommand> ...``.

Run directories default to ``$REHYDIL_RUNS`` (or ``./runs``) when ``--out``
is not given.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import REGIONS, DatasetError, generate_dataset, load_dataset
from .evaluation import evaluate_forgetting, evaluate_subsets, paired_t_test, subset_name
from .trainer import ExperimentConfig, ProtocolError, TrainingDivergedError, load_run_models, run_dil

log = logging.getLogger("rehydil")

RUNS_ENV = "REHYDIL_RUNS"

# ablation grids; each entry is (label, overrides applied on top of the base config)
REFERENCE = {"cph_stages": (4, 5), "similarity": "tversky", "alpha": 0.7, "beta": 1.5,
             "use_replay": True, "use_tac": True}
GRIDS: dict[str, list[tuple[str, dict]]] = {
    "layers": [("5", {"cph_stages": (5,)}),
               ("4,5", {"cph_stages": (4, 5)}),
               ("3,4,5", {"cph_stages": (3, 4, 5)})],
    "similarity": [("cosine", {"similarity": "cosine"}),
                   ("tversky", {"similarity": "tversky"})],
    "tversky": [(f"{a},{b}", {"alpha": a, "beta": b})
                for a, b in ((0.5, 0.5), (0.9, 1.3), (0.8, 1.4), (0.7, 1.5), (0.6, 1.6))],
    "modules": [("DIL", {"use_replay": False, "use_tac": False, "cph_stages": ()}),
                ("DIL+CPH", {"use_replay": False, "use_tac": False}),
                ("DIL+TAC", {"cph_stages": ()}),
                ("DIL+CPH+TAC", {})],
}
MODEL_KEYS = {"cph_stages"}


class UsageError(Exception):
    pass


def _runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def _parse_stages(text: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated stage numbers, got {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with 'model' and/or 'plan' sections")
    p.add_argument("--seed", type=int, help="seed for weights, batches and queues")
    p.add_argument("--no-replay", action="store_true", help="disable the replay buffer (implies --no-tac)")
    p.add_argument("--no-tac", action="store_true", help="disable the contrastive term")
    p.add_argument("--no-cph", action="store_true", help="plain U-Net, no hypergraph blocks")
    p.add_argument("--cph-stages", type=_parse_stages, help="encoder stages with a hypergraph block, e.g. 4,5")
    p.add_argument("--similarity", choices=("tversky", "cosine"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--retention", type=float, help="percent of each stage kept for replay")


def build_config(args: argparse.Namespace, overrides: dict | None = None) -> ExperimentConfig:
    """Config file first, then grid overrides, then explicit flags."""
    try:
        base = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config file {args.config}: {exc}") from exc
    model, plan = base["model"], base["plan"]
    for k, v in (overrides or {}).items():
        (model if k in MODEL_KEYS else plan)[k] = list(v) if isinstance(v, tuple) else v
    flags = {"seed": args.seed, "similarity": args.similarity, "alpha": args.alpha, "beta": args.beta,
             "gamma": args.gamma, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size,
             "retention_percent": args.retention}
    plan.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None:
        model["seed"] = args.seed
    if args.cph_stages is not None:
        model["cph_stages"] = list(args.cph_stages)
    if args.no_cph:
        model["cph_stages"] = []
    if args.no_replay:
        plan["use_replay"] = False
        plan["use_tac"] = False
    if args.no_tac:
        plan["use_tac"] = False
    try:
        return ExperimentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _dataset_digest(root: Path) -> str:
    return hashlib.sha256((root / "manifest.json").read_bytes()).hexdigest()


def _same_run_exists(run_dir: Path, config: ExperimentConfig, data: Path) -> bool:
    try:
        cfg, _ = load_run_models(run_dir)
        meta = json.loads((run_dir / "data.json").read_text())
    except (FileNotFoundError, ValueError):
        return False
    return (cfg.to_dict() == config.to_dict() and (run_dir / "metrics.jsonl").exists()
            and meta.get("manifest_sha256") == _dataset_digest(data))


def train_run(config: ExperimentConfig, data: Path, run_dir: Path, reuse: bool = False) -> Path:
    if reuse and _same_run_exists(run_dir, config, data):
        log.info("reusing finished run %s", run_dir)
        return run_dir
    ds = load_dataset(data)
    t0 = time.perf_counter()
    run_dil(config, ds, run_dir)
    (run_dir / "data.json").write_text(json.dumps(
        {"path": str(Path(data).resolve()), "manifest_sha256": _dataset_digest(Path(data))},
        indent=1, sort_keys=True) + "\n")
    log.info("trained %s in %.1fs", run_dir, time.perf_counter() - t0)
    return run_dir


def _data_for_run(run_dir: Path, data: Path | None) -> Path:
    if data is not None:
        return data
    meta = run_dir / "data.json"
    if not meta.exists():
        raise UsageError(f"{run_dir} records no dataset; pass --data")
    return Path(json.loads(meta.read_text())["path"])


def evaluate_run(run_dir: Path, data: Path | None = None, threshold: float = 0.5) -> dict:
    """Write ``eval/`` tables into the run directory and return the summary."""
    config, models = load_run_models(run_dir)
    ds = load_dataset(_data_for_run(run_dir, data))
    order = config.plan.modality_order
    report = evaluate_subsets(models[-1], ds, threshold=threshold)
    forgetting = evaluate_forgetting(models, ds, order, threshold=threshold)
    out = run_dir / "eval"
    out.mkdir(exist_ok=True)
    (out / "subsets.csv").write_text(report.to_csv())
    (out / "patients.csv").write_text(report.patients_csv())
    (out / "forgetting.csv").write_text(forgetting.to_csv())
    first = order[0]
    summary = {
        "config": config.to_dict(),
        "fingerprints": [m.fingerprint() for m in models],
        "threshold": threshold,
        "average": {r: 100.0 * float(np.mean([report.mean(r, s) for s in report.subsets])) for r in REGIONS},
        "subsets": {subset_name(s): {r: 100.0 * report.mean(r, s) for r in REGIONS} for s in report.subsets},
        "first_modality": first,
        "first_modality_final": {r: 100.0 * forgetting.dsc[(len(order) - 1, first)][r] for r in REGIONS},
        "forgetting": {m: {r: 100.0 * forgetting.forgetting(m, r) for r in REGIONS} for m in order},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def _patient_means(run_dir: Path) -> dict[str, dict[str, float]]:
    """Per region, each patient's DSC averaged over all subsets (read from eval/patients.csv)."""
    acc: dict[str, dict[str, list[float]]] = {}
    with open(run_dir / "eval" / "patients.csv") as f:
        for row in csv.DictReader(f):
            acc.setdefault(row["region"], {}).setdefault(row["patient"], []).append(float(row["dsc"]))
    return {r: {p: float(np.mean(v)) for p, v in pats.items()} for r, pats in acc.items()}


def render_report(run_dirs: Sequence[Path], labels: Sequence[str] | None = None,
                  baseline: Path | None = None) -> str:
    """One CSV row per run; a pure function of the run directories' eval outputs."""
    rows = []
    base_scores = _patient_means(baseline) if baseline is not None else None
    for k, rd in enumerate(run_dirs):
        path = rd / "eval" / "summary.json"
        if not path.exists():
            raise UsageError(f"{rd} has no eval/summary.json; run `rehydil eval {rd}` first")
        s = json.loads(path.read_text())
        m, p = s["config"]["model"], s["config"]["plan"]
        row = {"run": labels[k] if labels else rd.name,
               "replay": int(p["use_replay"]), "tac": int(p["use_tac"]),
               "cph": ",".join(str(x) for x in m["cph_stages"]) or "-",
               "similarity": p["similarity"], "alpha": p["alpha"], "beta": p["beta"], "seed": p["seed"]}
        for r in REGIONS:
            row[r] = round(s["average"][r], 4)
        for r in REGIONS:
            row[f"{s['first_modality']}_final_{r}"] = round(s["first_modality_final"][r], 4)
        row[f"{s['first_modality']}_forgetting_WT"] = round(s["forgetting"][s["first_modality"]]["WT"], 4)
        if base_scores is not None:
            mine = _patient_means(rd)
            for r in REGIONS:
                pats = sorted(base_scores[r])
                if len(pats) < 2:
                    row[f"p_{r}"] = "n/a"  # a paired test needs two patients
                    continue
                res = paired_t_test([mine[r][q] for q in pats], [base_scores[r][q] for q in pats])
                row[f"p_{r}"] = f"{res.p:.4g}"
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def _print_table(text: str) -> None:
    sys.stdout.write(text)
    if not text.endswith("\n"):
        sys.stdout.write("\n")


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    root = generate_dataset(args.out, seed=args.seed, num_patients=args.patients,
                            slices_per_patient=args.slices, image_size=args.size, depth=args.depth)
    print(root)
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    out = args.out or _runs_root() / f"run-seed{config.plan.seed}"
    train_run(config, args.data, out)
    print(out)
    return 0


def cmd_eval(args) -> int:
    summary = evaluate_run(args.run, args.data, args.threshold)
    _print_table((args.run / "eval" / "subsets.csv").read_text())
    print()
    _print_table((args.run / "eval" / "forgetting.csv").read_text())
    print("\nmean DSC over subsets: " + ", ".join(f"{r} {summary['average'][r]:.2f}" for r in REGIONS))
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import CHECKS, run_suite

    checks = args.only.split(",") if args.only else list(CHECKS)
    unknown = set(checks) - set(CHECKS)
    if unknown:
        raise UsageError(f"unknown checks {sorted(unknown)}; choose from {sorted(CHECKS)}")
    failed = 0
    worst: dict[str, float] = {}
    t0 = time.perf_counter()
    for res in run_suite(args.seeds, checks):
        worst[res.check] = max(worst.get(res.check, 0.0), res.report.max_rel_error)
        if not res.report.passed:
            failed += 1
            print(f"FAIL {res.check} seed {res.seed}: max rel error {res.report.max_rel_error:.3e}")
    for name in checks:
        print(f"{name:14s} {args.seeds} seeds  max rel error {worst[name]:.3e}")
    print(f"{'FAILED' if failed else 'ok'} in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


def cmd_report(args) -> int:
    text = render_report(args.runs, baseline=args.baseline)
    if args.out:
        args.out.write_text(text)
    _print_table(text)
    return 0


def cmd_ablate(args) -> int:
    names = list(GRIDS) if args.grid == "all" else [args.grid]
    root = args.out or _runs_root() / "ablate"
    for name in names:
        dirs, labels = [], []
        for label, overrides in GRIDS[name]:
            config = build_config(args, {**REFERENCE, **overrides})
            run_dir = root / name / label.replace(",", "_").replace("+", "_")
            train_run(config, args.data, run_dir, reuse=True)
            summary_file = run_dir / "eval" / "summary.json"
            if not summary_file.exists() or json.loads(summary_file.read_text())["config"] != config.to_dict():
                evaluate_run(run_dir, args.data)
            dirs.append(run_dir)
            labels.append(label)
        text = render_report(dirs, labels)
        (root / f"{name}.csv").write_text(text)
        print(f"# {name}")
        _print_table(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rehydil", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic four-modality dataset")
    g.add_argument("out", type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--patients", type=int, default=40)
    g.add_argument("--slices", type=int, default=16)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--depth", type=int, default=5, help="network depth the image size must support")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the four-stage incremental protocol")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path)
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="subset DSC table and forgetting table for a run")
    e.add_argument("run", type=Path)
    e.add_argument("--data", type=Path, help="defaults to the dataset the run was trained on")
    e.add_argument("--threshold", type=float, default=0.5)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable component")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--only", help="comma-separated subset of checks")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="comparison table across evaluated runs")
    r.add_argument("runs", type=Path, nargs="+")
    r.add_argument("--baseline", type=Path, help="add paired t-test p-values against this run")
    r.add_argument("--out", type=Path)
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--out", type=Path)
    a.add_argument("--grid", choices=[*GRIDS, "all"], default="all")
    _add_train_flags(a)
    a.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"rehydil: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, ProtocolError, TrainingDivergedError, FileNotFoundError) as exc:
        print(f"rehydil: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
