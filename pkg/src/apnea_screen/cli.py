"""Command-line interface.

Subcommands:
    synth   generate a synthetic subject database
    screen  train a subject-adaptive model and detect events for one subject
    loocv   leave-one-out evaluation over a database -> report.json/report.md
    score   event-by-event scoring of a prediction CSV against annotations

Exit codes: 0 ok, 1 I/O failure, 2 usage or bad config, 3 database too
small, 4 unknown subject, 5 missing annotations. Logging verbosity comes
from the APNEA_SCREEN_LOG environment variable (error, info, debug).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_run_config
from .detector import DetectedEvent, screen, severity_from_rei
from .errors import ApneaScreenError
from .evaluation import (
    DEFAULT_MAX_TRAIN_ROWS,
    DEFAULT_TRAIN_STRIDE_S,
    MissingAnnotations,
    match_events,
    run_loocv,
    train_subject_model,
    write_report_json,
    write_report_md,
)
from .features import extract_features, write_features_csv
from .phenotype_knn import DatabaseTooSmall
from .recording_store import EventAnnotation, NoAnnotations, load_database
from .svm import save_model
from .synth import CohortSpec, InvalidSpec, generate

logger = logging.getLogger("apnea_screen")

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_SMALL_DB = 3
EXIT_UNKNOWN_SUBJECT = 4
EXIT_MISSING_ANNOTATIONS = 5


class UnknownSubject(ApneaScreenError):
    pass


def _setup_logging() -> None:
    level_name = os.environ.get("APNEA_SCREEN_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        logger.warning("unknown APNEA_SCREEN_LOG value %r; using info", level_name)
    logging.basicConfig(
        level=levels.get(level_name, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def _gamma_value(text: str):
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("gamma must be positive")
    return value


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run-config file (flags override it)")
    parser.add_argument("--k", type=int, help="number of neighbors to train on")
    parser.add_argument("--k-prime", type=int, dest="k_prime", help="comorbidity pruning depth")
    parser.add_argument("--gender-weight", type=float, help="phenotype metric gender weight")
    parser.add_argument("--svm-c", type=float, dest="svm_c", help="SVM soft-margin C")
    parser.add_argument("--gamma", type=_gamma_value, help="RBF gamma (number or 'auto')")
    parser.add_argument(
        "--train-stride",
        type=float,
        default=DEFAULT_TRAIN_STRIDE_S,
        help="epoch spacing (s) when pooling training rows (default %(default)s)",
    )
    parser.add_argument(
        "--max-train-rows",
        type=int,
        default=DEFAULT_MAX_TRAIN_ROWS,
        help="cap on balanced training rows per model (default %(default)s)",
    )
    parser.add_argument(
        "--dump-features", action="store_true", help="write per-subject features.csv"
    )


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    knn = cfg.knn
    overrides = {}
    if args.k is not None:
        overrides["k"] = args.k
    if getattr(args, "k_prime", None) is not None:
        overrides["k_prime"] = args.k_prime
    if args.gender_weight is not None:
        overrides["gender_weight"] = args.gender_weight
    if overrides:
        knn = dataclasses.replace(knn, **overrides)
    svm_cfg = cfg.svm
    svm_overrides = {}
    if getattr(args, "svm_c", None) is not None:
        svm_overrides["C"] = args.svm_c
    if getattr(args, "gamma", None) is not None:
        svm_overrides["gamma"] = args.gamma
    if svm_overrides:
        svm_cfg = dataclasses.replace(svm_cfg, **svm_overrides)
    return dataclasses.replace(cfg, knn=knn, svm=svm_cfg)


def _require_db_path(args, cfg: RunConfig) -> str:
    db_path = args.db or cfg.io.db_path
    if not db_path:
        raise ConfigError("no database path: pass --db or set io.db_path in the config")
    return db_path


def cmd_synth(args) -> int:
    try:
        spec = CohortSpec(
            n_subjects=args.subjects,
            seed=args.seed,
            duration_min=args.duration_min,
            effort_fs_hz=args.effort_fs,
            noise_level=args.noise_level,
            paradox_fraction=args.paradox_fraction,
        )
    except InvalidSpec as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    subjects = generate(spec, args.out)
    by_severity: dict[str, int] = {}
    total_events = 0
    for s in subjects:
        rei = len(s.annotations or ()) / s.recording_hours
        grade = severity_from_rei(rei)
        by_severity[grade] = by_severity.get(grade, 0) + 1
        total_events += len(s.annotations or ())
    mix = ", ".join(f"{name}={by_severity.get(name, 0)}" for name in ("Normal", "Mild", "Moderate", "Severe"))
    print(f"wrote {len(subjects)} subjects to {args.out} ({mix}; {total_events} events)")
    return EXIT_OK


def cmd_screen(args) -> int:
    cfg = _resolve_config(args)
    subjects = load_database(_require_db_path(args, cfg))
    by_id = {s.id: s for s in subjects}
    if args.subject not in by_id:
        raise UnknownSubject(args.subject)
    query = by_id[args.subject]
    reference = [s for s in subjects if s.id != args.subject]

    model, neighbor_ids = train_subject_model(
        query,
        reference,
        knn_cfg=cfg.knn,
        svm_cfg=cfg.svm,
        feat_cfg=cfg.feature,
        train_stride_s=args.train_stride,
        max_train_rows=args.max_train_rows,
    )
    logger.info("trained on neighbors: %s", ", ".join(neighbor_ids))
    features = extract_features(query, cfg.feature)
    report = screen(query, model, cfg.detector, cfg.feature, features=features)

    out_dir = Path(args.out or cfg.io.out_path or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_events_csv(report.events, out_dir / "predicted_events.csv")
    if args.dump_features:
        write_features_csv(features, out_dir / "features.csv")
    if args.save_model:
        save_model(model, args.save_model)
    print(
        f"id={report.subject_id} events={len(report.events)} "
        f"rei={report.rei:.1f} severity={report.severity}"
    )
    return EXIT_OK


def _write_events_csv(events, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("start_s,duration_s,source\n")
        for ev in events:
            fh.write(f"{repr(float(ev.start_s))},{repr(float(ev.duration_s))},{ev.source}\n")


def cmd_loocv(args) -> int:
    cfg = _resolve_config(args)
    subjects = load_database(_require_db_path(args, cfg))
    report = run_loocv(
        subjects,
        knn_cfg=cfg.knn,
        svm_cfg=cfg.svm,
        det_cfg=cfg.detector,
        feat_cfg=cfg.feature,
        train_stride_s=args.train_stride,
        max_train_rows=args.max_train_rows,
        jobs=args.jobs,
    )
    out_path = Path(args.out or cfg.io.out_path or "report.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out_path)
    write_report_md(report, out_path.with_suffix(".md"))
    if args.dump_features:
        feat_dir = out_path.parent / "features"
        feat_dir.mkdir(parents=True, exist_ok=True)
        for s in subjects:
            write_features_csv(extract_features(s, cfg.feature), feat_dir / f"{s.id}.csv")
    if args.plots:
        from .plots import write_timeline_plot

        plot_dir = Path(args.plots)
        plot_dir.mkdir(parents=True, exist_ok=True)
        by_id = {s.id: s for s in subjects}
        for result in report.results:
            subject = by_id[result.id]
            write_timeline_plot(
                result, subject.annotations or (), subject.duration_s, plot_dir / f"{result.id}.png"
            )
    binary = report.binary
    print(
        f"wrote {out_path} ({len(report.results)} subjects; "
        f"binary accuracy {binary.accuracy:.3f})"
    )
    return EXIT_OK


def _read_events_csv(path, with_kind: bool):
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        expected = ["kind", "start_s", "duration_s"] if with_kind else ["start_s", "duration_s"]
        if header[: len(expected)] != expected:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if with_kind:
                kind, start, dur = parts[0], float(parts[1]), float(parts[2])
                events.append(EventAnnotation(kind=kind, start_s=start, duration_s=dur))
            else:
                start, dur = float(parts[0]), float(parts[1])
                source = parts[2] if len(parts) > 2 else "svm"
                events.append(DetectedEvent(start_s=start, duration_s=dur, source=source))
    return sorted(events, key=lambda e: e.start_s)


def cmd_score(args) -> int:
    try:
        predicted = _read_events_csv(args.pred, with_kind=False)
        reference = _read_events_csv(args.ref, with_kind=True)
        score = match_events(predicted, reference)
    except (ValueError, IndexError, ApneaScreenError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(
        json.dumps(
            {
                "tp": score.tp,
                "fp": score.fp,
                "fn": score.fn,
                "ppv": score.ppv,
                "recall": score.recall,
                "f1": score.f1,
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="apnea-screen",
        description="Phenotype-adaptive sleep-apnea screening pipeline",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic database")
    p_synth.add_argument("--subjects", type=_positive_int, required=True)
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--duration-min", type=float, default=30.0, dest="duration_min")
    p_synth.add_argument("--effort-fs", type=float, default=8.0, dest="effort_fs")
    p_synth.add_argument("--noise-level", type=float, default=0.05, dest="noise_level")
    p_synth.add_argument("--paradox-fraction", type=float, default=0.5, dest="paradox_fraction")
    p_synth.set_defaults(func=cmd_synth)

    p_screen = sub.add_parser("screen", help="screen one subject against the rest of a database")
    p_screen.add_argument("--db", help="database directory (or io.db_path in the config)")
    p_screen.add_argument("--subject", required=True)
    p_screen.add_argument("--out", help="output directory (default .)")
    p_screen.add_argument("--save-model", dest="save_model", help="also write model.json here")
    _add_model_flags(p_screen)
    p_screen.set_defaults(func=cmd_screen)

    p_loocv = sub.add_parser("loocv", help="leave-one-out evaluation of a database")
    p_loocv.add_argument("--db", help="database directory (or io.db_path in the config)")
    p_loocv.add_argument("--out", help="report.json path (or io.out_path in the config)")
    p_loocv.add_argument("--plots", help="directory for per-subject timeline plots")
    p_loocv.add_argument("--jobs", type=_positive_int, default=None,
                         help="concurrent folds (default: available parallelism)")
    _add_model_flags(p_loocv)
    p_loocv.set_defaults(func=cmd_loocv)

    p_score = sub.add_parser("score", help="score predicted events against annotations")
    p_score.add_argument("--pred", required=True)
    p_score.add_argument("--ref", required=True)
    p_score.set_defaults(func=cmd_score)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatabaseTooSmall as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SMALL_DB
    except UnknownSubject as exc:
        print(f"error: unknown subject id {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_SUBJECT
    except (MissingAnnotations, NoAnnotations) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_ANNOTATIONS
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ApneaScreenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
