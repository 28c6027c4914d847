"""Command-line entry point: ``frailmil <command> [options]``.

Exit codes: 0 success, 2 usage or config error, 1 runtime failure. Every
command writes ``manifest.json`` next to its outputs; ``frailmil rerun
manifest.json`` repeats the run with identical settings.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

from . import __version__
from .cohort import MODALITIES, Modality, parse_modality
from .config import load_config
from .evaluation import (
    CohortData,
    run_ablation,
    run_loso,
    write_attention_csv,
    write_fold_csv,
    write_predictions_csv,
    write_summary_csv,
)
from .exceptions import ConfigError, FrailMILError
from .hrv import HRV_FEATURES, aggregate_daily, recording_features
from .ingest import (
    ModalityTable,
    build_labels,
    file_digest,
    filter_adherence,
    list_files,
    load_cohort_dir,
    load_ecg,
    summarize_cohort,
    write_modality_table,
    write_summary,
)
from .mil import count_params_flops, init_model
from .synth import SynthConfig, generate_cohort

logger = logging.getLogger("frailmil")

PAPER_PARAMS = 0.307e6
PAPER_FLOPS = 0.479e9


class UsageError(Exception):
    pass


def _write_manifest(out_dir: Path, command: str, argv: list, seed, config: dict, inputs: list, started: str) -> None:
    outputs = {p.name: file_digest(p) for p in sorted(out_dir.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "tool": "frailmil",
        "version": __version__,
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": config,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": outputs,
        "started": started,
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (math.isfinite(value) and value >= 0):
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return value


def _probability(text: str) -> float:
    value = _nonneg_float(text)
    if value > 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return value


def _modalities(text: str) -> tuple:
    try:
        mods = {parse_modality(t) for t in text.split(",") if t.strip()}
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not mods:
        raise argparse.ArgumentTypeError("empty modality list")
    return tuple(m for m in MODALITIES if m in mods)


def _counts(text: str) -> dict:
    out = {}
    try:
        for item in text.split(","):
            k, v = item.split("=")
            out[parse_modality(k)] = int(v)
    except (ValueError, ConfigError):
        raise argparse.ArgumentTypeError(f"expected e.g. phys=20,sleep=20,hrv=4; got {text!r}") from None
    return out


def cmd_synth(args, argv) -> int:
    started = _now()
    out = Path(args.out_dir)
    mask = {m.value: (4 if m in args.signal_modalities else 0) for m in MODALITIES}
    config = SynthConfig(
        n_patients=args.patients,
        missing_prob=args.missing,
        signal=args.signal,
        signal_features=mask,
        seed=args.seed,
    )
    cohort = generate_cohort(config)
    cohort.write(out)
    _write_manifest(out, "synth", argv, args.seed, config.to_dict(), [], started)
    print(f"wrote synthetic cohort of {args.patients} patients to {out}")
    return 0


def cmd_extract_hrv(args, argv) -> int:
    started = _now()
    src = Path(args.ecg_dir)
    if not src.is_dir():
        raise UsageError(f"ECG directory {src} does not exist")
    files = list_files(src, ".csv")
    if not files:
        raise FrailMILError(f"no ECG .csv files in {src}")
    segments = defaultdict(list)
    ok = []
    for path in files:
        try:
            for rec in load_ecg(path):
                segments[(rec.patient, rec.date)] += recording_features(rec, args.segment_seconds)
            ok.append(path)
        except (FrailMILError, OSError, KeyError, ValueError) as exc:
            logger.warning("skipping %s: %s", path, exc)
    if not ok:
        raise FrailMILError("no ECG file could be processed")
    keys = sorted(segments)
    values = [[aggregate_daily(segments[k])[n] for n in HRV_FEATURES] for k in keys]
    table = ModalityTable(Modality.HRV, HRV_FEATURES, [k[0] for k in keys], [k[1] for k in keys], values)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_modality_table(table, out / "hrv.csv")
    _write_manifest(out, "extract-hrv", argv, None, {"segment_seconds": args.segment_seconds}, ok, started)
    print(f"wrote {len(table)} HRV rows from {len(ok)}/{len(files)} recording file(s) to {out / 'hrv.csv'}")
    return 0


def _load_data(args, run_config):
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    tables, clinical = load_cohort_dir(data_dir)
    if args.min_days_per_week:
        tables = filter_adherence(tables, args.min_days_per_week)
    inputs = sorted(data_dir / n for n in ("phys.csv", "sleep.csv", "hrv.csv", "clinical.csv"))
    return CohortData.from_records(tables, clinical, run_config.windows, run_config.margins), inputs


def _run_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.unweighted:
        overrides["class_weighting"] = False
    return load_config(args.config, overrides)


def _horizons(text: str) -> tuple:
    return ("M3", "M6") if text == "both" else (text.upper(),)


def _write_reports(out: Path, reports, attention: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_fold_csv(reports, out / "folds.csv")
    write_summary_csv(reports, out / "summary.csv")
    write_predictions_csv(reports, out / "predictions.csv")
    if attention:
        write_attention_csv(reports, out / "attention.csv")


def _print_summary(reports) -> None:
    for r in reports:
        print(
            f"{r.task.value:8s} {r.horizon.value} {r.subset:6s} "
            f"BalAcc {r.balacc_mean:.2f}±{r.balacc_std:.2f}  F1 {r.f1_mean:.2f}±{r.f1_std:.2f}  "
            f"(pooled BalAcc {r.balacc_pooled:.3f}, {len(r.folds)} folds)"
        )


def cmd_loso(args, argv) -> int:
    started = _now()
    rc = _run_config(args)
    data, inputs = _load_data(args, rc)
    reports = [
        run_loso(data, rc.model, args.task, h, args.modalities, args.jobs, rc.class_weighting, rc.f1)
        for h in _horizons(args.horizon)
    ]
    out = Path(args.out_dir)
    _write_reports(out, reports, args.attention)
    _write_manifest(out, "loso", argv, rc.model.seed, rc.to_dict(), inputs, started)
    _print_summary(reports)
    return 0


def cmd_ablate(args, argv) -> int:
    started = _now()
    rc = _run_config(args)
    data, inputs = _load_data(args, rc)
    reports = []
    for h in _horizons(args.horizon):
        reports += run_ablation(data, rc.model, args.task, h, args.jobs, weighted=rc.class_weighting, f1=rc.f1)
    out = Path(args.out_dir)
    _write_reports(out, reports, args.attention)
    config = rc.to_dict()
    config["subset_seeds"] = {r.subset: rc.model.seed for r in reports}
    _write_manifest(out, "ablate", argv, rc.model.seed, config, inputs, started)
    _print_summary(reports)
    return 0


def cmd_summarize(args, argv) -> int:
    started = _now()
    rc = load_config(args.config)
    tables, clinical = load_cohort_dir(args.data_dir)
    labels = build_labels(clinical, rc.margins)
    summary = summarize_cohort(tables, labels, rc.windows, clinical.baselines)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(summary, out / "class_counts.csv", out / "instance_counts.csv")
    _write_manifest(out, "summarize", argv, None, rc.to_dict(), [], started)
    print((out / "class_counts.csv").read_text(), end="")
    return 0


def cmd_params(args, argv) -> int:
    rc = load_config(args.config)
    dims = {Modality.PHYS: 12, Modality.SLEEP: 8, Modality.HRV: 10}
    if args.data_dir:
        tables, _ = load_cohort_dir(args.data_dir)
        dims = {m: t.n_features for m, t in tables.items()}
    model = init_model(rc.model, dims)
    counts = args.instances or {m: 20 for m in dims}
    acc = count_params_flops(model, counts)
    print(f"feature dims        {', '.join(f'{m.value}={f}' for m, f in dims.items())}")
    print(f"reference bag       {', '.join(f'{m.value}={n}' for m, n in counts.items())} instances")
    print(f"parameters          {acc['params']}")
    print(f"forward FLOPs       {acc['flops']}  (pooled path {acc['flops_pooled_path']}, classifier {acc['flops_classifier']})")
    print(f"published model     {PAPER_PARAMS / 1e6:.3f}M parameters, {PAPER_FLOPS / 1e9:.3f}G FLOPs (widths unpublished; not expected to match)")
    return 0


def cmd_rerun(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    old = list(manifest["argv"])
    if args.out_dir:
        if "--out-dir" in old:
            old[old.index("--out-dir") + 1] = args.out_dir
        else:
            old += ["--out-dir", args.out_dir]
    return main(old)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frailmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"frailmil {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort with planted signal")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--patients", type=_positive_int, default=30)
    p.add_argument("--signal", type=_nonneg_float, default=2.0)
    p.add_argument("--missing", type=_probability, default=0.10)
    p.add_argument("--signal-modalities", type=_modalities, default=MODALITIES, metavar="LIST")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract-hrv", help="ECG recordings -> per-date HRV modality table")
    p.add_argument("--ecg-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--segment-seconds", type=_nonneg_float, default=300.0)
    p.set_defaults(func=cmd_extract_hrv)

    for name, func, help_ in (
        ("loso", cmd_loso, "leave-one-subject-out evaluation"),
        ("ablate", cmd_ablate, "LOSO on each modality pair (P+S, P+E, S+E)"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data-dir", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--task", choices=("facit", "handgrip"), default="handgrip")
        p.add_argument("--horizon", choices=("m3", "m6", "both"), default="both")
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, default=1, help="concurrent folds (-1: all cores)")
        p.add_argument("--attention", action="store_true", help="also write attention.csv")
        p.add_argument("--unweighted", action="store_true", help="disable inverse-frequency class weights")
        p.add_argument("--min-days-per-week", type=_nonneg_float, default=0.0)
        if name == "loso":
            p.add_argument("--modalities", type=_modalities, default=MODALITIES, metavar="LIST")
        p.set_defaults(func=func)

    p = sub.add_parser("summarize", help="class and instance count tables")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("params", help="parameter count and FLOP estimate")
    p.add_argument("--config")
    p.add_argument("--data-dir", help="read feature counts from this cohort")
    p.add_argument("--instances", type=_counts, metavar="phys=N,sleep=N,hrv=N")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"frailmil: error: {exc}", file=sys.stderr)
        return 2
    except (FrailMILError, OSError, ValueError) as exc:
        print(f"frailmil: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
