"""Command-line entry point: ``fusionrisk <command> [options]``.

Every command writes plain files (CSV with a header, JSON) plus a
``<file>.meta.json`` sidecar holding the config hash and package version.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .calibration import KINDS, load_calibrators, save_calibrators
from .data import PredictionFileError, cohort_summary, generate_synthetic_cohort, load_predictions, load_synthetic_config, save_predictions, select_split, specialist_names
from .fusion import AverageModel, StackingModel, explain_case, fit_stacker, global_weights, load_model, model_to_dict, save_model
from .metrics import BINS_CSV_COLUMNS, REPORT_CSV_COLUMNS, auprc, auroc, brier
from .pipeline import agreement_analysis, complete_split, evaluate_cohort, fit_branch_calibrators, robustness_table

log = logging.getLogger("fusionrisk")


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    inputs: list[str]
    specialists: list[str]
    meta: str = "logreg"
    candidates: list[str] = field(default_factory=lambda: list(KINDS))
    bootstrap_n: int = 1000
    seed: int = 0
    level: float = 0.95
    threshold: float = 0.5
    ece_bins: int = 20
    l2: float = 0.0
    out: str | None = None

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _sidecar(path: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    meta = {
        "artifact": "fusionrisk",
        "version": __version__,
        "command": cfg.command,
        "config_hash": cfg.digest(),
        "config": asdict(cfg),
    }
    if extra:
        meta.update(extra)
    path.with_name(path.name + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path: Path, obj, cfg: RunConfig, extra: dict | None = None) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    _sidecar(path, cfg, extra)


def _write_csv(path: Path, rows: list[dict], columns: Sequence[str], cfg: RunConfig, extra: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _sidecar(path, cfg, extra)


def _out_dir(args) -> Path:
    if not args.out:
        raise CLIError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    if not args.input:
        raise CLIError("--input is required")
    path = Path(args.input)
    if not path.exists():
        raise CLIError(f"input file not found: {path}")
    records = load_predictions(path)
    available = specialist_names(records)
    if args.specialists:
        specialists = [s.strip() for s in args.specialists.split(",") if s.strip()]
        unknown = [s for s in specialists if s not in available]
        if unknown:
            raise CLIError(f"specialist(s) not in {path.name}: {', '.join(unknown)}")
    else:
        specialists = available
    return records, specialists


def _config(args, specialists) -> RunConfig:
    inputs = [p for p in (getattr(args, "input", None), getattr(args, "model", None), getattr(args, "calibrators", None)) if p]
    return RunConfig(
        command=args.command,
        inputs=[str(p) for p in inputs],
        specialists=list(specialists),
        meta=getattr(args, "meta", "logreg"),
        candidates=list(getattr(args, "candidates", KINDS)),
        bootstrap_n=getattr(args, "bootstrap_n", 1000),
        seed=args.seed if args.seed is not None else 0,
        level=getattr(args, "level", 0.95),
        threshold=getattr(args, "threshold", 0.5),
        ece_bins=getattr(args, "ece_bins", 20),
        l2=getattr(args, "l2", 0.0),
        out=getattr(args, "out", None),
    )


def _model(args):
    if not args.model:
        raise CLIError("--model is required")
    if not Path(args.model).exists():
        raise CLIError(f"model file not found: {args.model}")
    return load_model(args.model)


def _require_logreg(model):
    if not isinstance(model, StackingModel):
        raise CLIError("this command needs a logreg meta-learner model")
    return model


# -- commands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    if not args.config:
        raise CLIError("--config is required")
    cfg = load_synthetic_config(args.config)
    if args.seed is not None:
        cfg = type(cfg)(cfg.n, cfg.prevalence, cfg.branches, cfg.rho, args.seed)
    if not args.out:
        raise CLIError("--out is required")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic_cohort(cfg)
    save_predictions(records, out)
    run = RunConfig("simulate", [args.config], list(cfg.branches), seed=cfg.seed, out=str(out))
    _sidecar(out, run, {"synthetic_config": cfg.to_dict(), "binormal_auc": {k: b.auc for k, b in cfg.branches.items()}})
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_fuse(args) -> int:
    records, specialists = _load(args)
    cfg = _config(args, specialists)
    out = _out_dir(args)
    val = select_split(records, "validation")
    if not val:
        raise CLIError("no validation records")
    if args.meta == "avg":
        model = AverageModel(tuple(specialists))
    else:
        model = fit_stacker(records, specialists, l2=args.l2)
    _, y, P = complete_split(records, "validation", specialists)
    p = model.predict_proba(P)
    report = {
        "meta": model.meta,
        "model": model_to_dict(model),
        "global_weights": global_weights(model),
        "validation": {
            "n": len(y),
            "prevalence": float(y.mean()),
            "auroc": auroc(p, y),
            "auprc": auprc(p, y),
            "brier": brier(p, y),
        },
        "cohort": cohort_summary(records).to_dict(),
    }
    save_model(model, out / "model.json")
    _sidecar(out / "model.json", cfg)
    _write_json(out / "fit_report.json", report, cfg)
    print(f"wrote {out / 'model.json'}")
    return 0


def _selections(args, records, specialists, model):
    return fit_branch_calibrators(records, specialists, model, args.candidates, args.ece_bins)


def cmd_calibrate(args) -> int:
    records, specialists = _load(args)
    model = _model(args) if args.model else None
    cfg = _config(args, specialists)
    out = _out_dir(args)
    sel = _selections(args, records, specialists, model)
    save_calibrators({k: s.chosen for k, s in sel.items()}, out / "calibrators.json")
    _sidecar(out / "calibrators.json", cfg)
    _write_json(out / "calibration_selection.json", {k: s.to_dict() for k, s in sel.items()}, cfg)
    for k, s in sel.items():
        print(f"{k}: {s.chosen.kind} (validation ECE {s.ece[s.chosen.kind]:.4f}, raw {s.raw_ece:.4f})")
    return 0


def _calibrators(args, records, model):
    if getattr(args, "calibrators", None):
        if not Path(args.calibrators).exists():
            raise CLIError(f"calibrator file not found: {args.calibrators}")
        return load_calibrators(args.calibrators)
    return {k: s.chosen for k, s in _selections(args, records, list(model.specialists), model).items()}


def _report_rows(rows):
    flat = []
    for r in rows:
        for m in r.report.rows():
            flat.append({"model": r.model, "stage": r.stage, "calibrator": r.calibrator or "", **m})
    return flat


def _report_json(rows):
    return [{"model": r.model, "stage": r.stage, "calibrator": r.calibrator, **r.report.to_dict()} for r in rows]


def cmd_evaluate(args) -> int:
    records, _ = _load(args)
    model = _model(args)
    cfg = _config(args, model.specialists)
    out = _out_dir(args)
    cals = _calibrators(args, records, model)
    rows, rel = evaluate_cohort(records, model, cals, args.threshold, args.ece_bins, args.bootstrap_n, cfg.seed, args.level)
    extra = {"bootstrap_seed": cfg.seed, "bootstrap_n": args.bootstrap_n}
    _write_csv(out / "evaluation.csv", _report_rows(rows), ("model", "stage", "calibrator") + REPORT_CSV_COLUMNS, cfg, extra)
    _write_json(out / "evaluation.json", _report_json(rows), cfg, extra)
    rel_rows = [{"model": m, "stage": st, **b} for (m, st), bins in rel.items() for b in bins.rows()]
    _write_csv(out / "reliability.csv", rel_rows, ("model", "stage") + BINS_CSV_COLUMNS, cfg)
    for r in rows:
        m = r.report.metrics
        print(f"{r.model:>10} {r.stage:<4} AUROC {m['auroc'].point:.3f} AUPRC {m['auprc'].point:.3f} ECE {m['ece'].point:.3f}")
    return 0


def cmd_explain(args) -> int:
    records, _ = _load(args)
    model = _require_logreg(_model(args))
    if not args.episode:
        raise CLIError("--episode is required")
    matches = [r for r in select_split(records, "test") if r.episode_id == args.episode]
    if not matches:
        raise CLIError(f"unknown episode {args.episode!r} in the test split")
    exp = explain_case(model, matches[0], args.threshold)
    text = exp.render()
    print(text)
    if args.out:
        cfg = _config(args, model.specialists)
        out = _out_dir(args)
        stem = f"explain_{args.episode}"
        (out / f"{stem}.txt").write_text(text + "\n", encoding="utf-8")
        _sidecar(out / f"{stem}.txt", cfg)
        _write_json(out / f"{stem}.json", exp.to_dict(), cfg)
    return 0


def cmd_robustness(args) -> int:
    records, _ = _load(args)
    model = _require_logreg(_model(args))
    cfg = _config(args, model.specialists)
    out = _out_dir(args)
    cals = _calibrators(args, records, model)
    vitals, notes = args.vitals or model.specialists[0], args.notes or model.specialists[1]
    rows = robustness_table(
        records, model, cals, vitals, notes, args.fallback_mode, args.threshold, args.ece_bins, args.bootstrap_n, cfg.seed, args.level
    )
    extra = {"bootstrap_seed": cfg.seed, "fallback_mode": args.fallback_mode}
    flat = [{"scenario": r["model"], **{k: v for k, v in r.items() if k not in ("model", "stage")}} for r in _report_rows(rows)]
    _write_csv(out / "robustness.csv", flat, ("scenario", "calibrator") + REPORT_CSV_COLUMNS, cfg, extra)
    _write_json(out / "robustness.json", _report_json(rows), cfg, extra)
    for r in rows:
        m = r.report.metrics
        print(f"{r.model:>14} AUROC {m['auroc'].point:.3f} AUPRC {m['auprc'].point:.3f} Brier {m['brier'].point:.3f} ECE {m['ece'].point:.3f}")
    return 0


def cmd_agreement(args) -> int:
    records, _ = _load(args)
    model = _require_logreg(_model(args))
    cfg = _config(args, model.specialists)
    out = _out_dir(args)
    vitals, notes = args.vitals or model.specialists[0], args.notes or model.specialists[1]
    a = agreement_analysis(records, model, vitals, notes)
    _write_csv(out / "agreement_counts.csv", a.counts, list(a.counts[0]), cfg)
    _write_csv(out / "logit_scatter.csv", a.scatter, list(a.scatter[0]) if a.scatter else ["episode_id"], cfg)
    _write_csv(out / "modality_shares.csv", a.shares, list(a.shares[0]) if a.shares else ["episode_id"], cfg)
    _write_csv(out / "share_histogram.csv", a.histogram, list(a.histogram[0]), cfg)
    for row in a.counts:
        print(f"{row['category']:<11} n={row['count']:<6} ({100 * row['prevalence']:.1f}%)")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "explain": cmd_explain,
    "robustness": cmd_robustness,
    "agreement": cmd_agreement,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="prediction file (.jsonl or .csv)")
    common.add_argument("--model", help="model JSON written by `fuse`")
    common.add_argument("--out", help="output directory (output file for `simulate`)")
    common.add_argument("--seed", type=int, default=None, help="bootstrap / simulation seed (default 0)")
    common.add_argument("--bootstrap-n", type=int, default=1000)
    common.add_argument("--level", type=float, default=0.95, help="bootstrap interval level")
    common.add_argument("--threshold", type=float, default=0.5)
    common.add_argument("--meta", choices=("logreg", "avg"), default="logreg")
    common.add_argument("--ece-bins", type=int, default=20)
    common.add_argument("--l2", type=float, default=0.0)
    common.add_argument("--specialists", help="comma-separated specialist names (default: all in file)")
    common.add_argument("--candidates", type=lambda s: [c.strip() for c in s.split(",")], default=list(KINDS))
    common.add_argument("--calibrators", help="calibrators JSON written by `calibrate`")
    common.add_argument("--vitals", help="specialist treated as the vitals branch (default: first)")
    common.add_argument("--notes", help="specialist treated as the notes branch (default: second)")
    common.add_argument("--fallback-mode", choices=("single", "impute"), default="single")
    common.add_argument("--episode", help="episode_id for `explain`")
    common.add_argument("--config", help="synthetic cohort config JSON for `simulate`")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fusionrisk", description="Late-fusion risk stacking, calibration and audit reports.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate a synthetic prediction cohort",
        "fuse": "fit the meta-learner on the validation split",
        "evaluate": "test-split metrics with bootstrap intervals",
        "calibrate": "select per-branch calibrators on validation",
        "explain": "per-episode decision breakdown",
        "robustness": "missing-modality fallback scenarios",
        "agreement": "agreement counts, logit scatter and modality shares",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CLIError, PredictionFileError, ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
