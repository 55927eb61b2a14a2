"""Command-line entry point: fuse, eval, ci, split, simulate, report."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

from . import __version__
from .annotations import (
    RAW,
    AnnotationParseError,
    AnnotationValidationError,
    combine,
    filter_dataset,
    merge_grades,
    parse_annotation_file,
    write_annotation_file,
)
from .bootstrap import BootstrapConfig, UndefinedStatisticError, bca_interval, intervals_to_json
from .fusion import DEFAULT_MASS_P, FusionConfig, config_dict, diagnostics_dict, fuse_annotation_set
from .metrics import (
    aggregate_folds,
    match_all,
    pr_curve,
    report_row,
    reports_from_json,
    reports_to_json,
    rows_to_csv,
    summary_row,
    table_header,
)
from .simulate import AnnotatorProfile, SimulationConfig, SimulationError, config_json, simulate
from .splits import PatientLeakageWarning, make_folds, rotation_ids

log = logging.getLogger("bitefuse")

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_CONFIG = 4
EXIT_INTERNAL = 5


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# -- helpers -----------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_suffix(suffix)


def _write_manifest(args, inputs, outputs, started, extra=None):
    config = {
        k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) else v)
        for k, v in vars(args).items()
        if k not in ("func",)
    }
    manifest = {
        "subcommand": args.command,
        "tool_version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "runtime_seconds": round(time.perf_counter() - started, 6),
    }
    if extra:
        manifest.update(extra)
    if args.manifest:
        path = Path(args.manifest)
    elif getattr(args, "output_dir", None):
        path = Path(args.output_dir) / "manifest.json"
    else:
        path = Path(str(args.output) + ".manifest.json")
    _write(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _read_ids(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise AnnotationParseError("file not found", path=path) from None
    return [line.strip() for line in text.splitlines() if line.strip()]


def _load(paths):
    sets = [parse_annotation_file(p) for p in paths]
    return sets[0] if len(sets) == 1 else combine(sets)


def _check_ratio(value, name, lo=0.0, hi=1.0, lo_closed=True, hi_closed=True):
    ok = (value >= lo if lo_closed else value > lo) and (value <= hi if hi_closed else value < hi)
    if not ok:
        raise ConfigError(f"--{name} out of range: {value}")


def _load_gt(args):
    gt = parse_annotation_file(args.gt)
    if args.ids:
        ids = _read_ids(args.ids)
        unknown = sorted(set(ids) - set(gt.image_ids))
        if unknown:
            raise AnnotationValidationError(f"{len(unknown)} ids not in ground truth (e.g. {unknown[0]!r})")
        gt = gt.subset(ids)
    if not gt.annotations:
        raise AnnotationValidationError("ground truth contains no annotations")
    return gt


def _prediction_sets(args, gt):
    """(name, AnnotationSet) pairs for every prediction source requested."""
    out = []
    for p in args.pred:
        pset = parse_annotation_file(p)
        if args.ids:
            pset = pset.subset(gt.image_ids)
        if args.per_source:
            out.extend(pset.by_source().items())
        else:
            out.append((args.name if args.name and len(args.pred) == 1 else Path(p).stem, pset))
    return out


# -- subcommands -------------------------------------------------------------


def cmd_fuse(args) -> int:
    started = time.perf_counter()
    try:
        config = FusionConfig(
            grouping_iou=args.grouping_iou,
            mass_p=args.p,
            sigma_divisor=args.sigma_divisor,
            min_votes=args.min_votes,
            strategy=args.strategy,
            severity_order=args.severity,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    aset = _load(args.input)
    exclude = _read_ids(args.exclude) if args.exclude else ()
    aset, filt = filter_dataset(
        aset,
        drop_rejected=not args.keep_rejected,
        drop_unknown_grade_images=aset.label_space == RAW,
        exclude_ids=exclude,
    )
    if aset.label_space == RAW and not args.no_merge:
        aset = merge_grades(aset)
    fused, groups = fuse_annotation_set(aset, config, n_annotators=args.n_annotators, n_jobs=args.jobs,
                                        return_groups=True)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    write_annotation_file(fused, output, args.format)
    outputs = [output]
    if args.diagnostics:
        diag = diagnostics_dict(groups, config)
        diag["filter"] = filt.as_dict()
        outputs.append(_write(Path(args.diagnostics), json.dumps(diag, indent=1) + "\n"))
    log.info("fused %d images into %d consensus boxes", len(fused.images), len(fused))
    _write_manifest(args, args.input + ([args.exclude] if args.exclude else []), outputs, started,
                    {"fusion": config_dict(config), "filter": filt.as_dict()})
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    _check_ratio(args.iou, "iou", lo_closed=False)
    _check_ratio(args.conf, "conf")
    gt = _load_gt(args)
    reports, curves = [], []
    for name, pset in _prediction_sets(args, gt):
        matches = match_all(pset, gt, args.classes, args.iou, source=name)
        reports.append(matches.report(args.conf))
        if args.pr_curve:
            for cls, outcome in matches.outcomes.items():
                c = pr_curve(outcome)
                curves += [[name, cls, repr(float(r)), repr(float(p)), repr(float(s))]
                           for r, p, s in zip(c.recall, c.precision, c.confidence)]
    output = Path(args.output)
    outputs = [_write(output, reports_to_json(reports))]
    csv_path = Path(args.csv) if args.csv else _sibling(output, ".csv")
    outputs.append(_write(csv_path, rows_to_csv(table_header(reports[0].class_names),
                                                [report_row(r) for r in reports])))
    if args.pr_curve:
        outputs.append(_write(Path(args.pr_curve), rows_to_csv(
            ["source", "class", "recall", "precision", "confidence"], curves)))
    _write_manifest(args, args.pred + [args.gt] + ([args.ids] if args.ids else []), outputs, started)
    return EXIT_OK


def cmd_ci(args) -> int:
    started = time.perf_counter()
    _check_ratio(args.iou, "iou", lo_closed=False)
    _check_ratio(args.conf, "conf")
    try:
        configs = [BootstrapConfig(args.iterations, args.confidence, args.seed, s) for s in args.statistic]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    gt = _load_gt(args)
    rows, table = [], []
    for name, pset in _prediction_sets(args, gt):
        matches = match_all(pset, gt, args.classes, args.iou, source=name)
        cells = [name]
        for cfg in configs:
            try:
                matches.report(args.conf).statistic(cfg.statistic)
            except KeyError as exc:
                raise ConfigError(str(exc)) from None
            iv = bca_interval(None, None, cfg, args.iou, args.conf, n_jobs=args.jobs, matches=matches)
            rows.append((name, iv))
            cells.append(iv.cell())
        table.append(cells)
    output = Path(args.output)
    outputs = [_write(output, intervals_to_json(rows))]
    csv_path = Path(args.csv) if args.csv else _sibling(output, ".csv")
    outputs.append(_write(csv_path, rows_to_csv(["source"] + list(args.statistic), table)))
    _write_manifest(args, args.pred + [args.gt] + ([args.ids] if args.ids else []), outputs, started)
    return EXIT_OK


def cmd_split(args) -> int:
    started = time.perf_counter()
    inputs = []
    patient_of = None
    if args.input:
        aset = parse_annotation_file(args.input)
        exclude = _read_ids(args.exclude) if args.exclude else ()
        aset, _ = filter_dataset(aset, drop_rejected=not args.keep_rejected,
                                 drop_unknown_grade_images=True, exclude_ids=exclude)
        ids = aset.image_ids
        inputs.append(args.input)
        if args.group_by_patient:
            patient_of = {img.id: img.patient_id for img in aset.images if img.patient_id is not None}
    elif args.ids:
        ids = _read_ids(args.ids)
        inputs.append(args.ids)
        if args.group_by_patient:
            raise ConfigError("--group-by-patient needs --input with patient_id fields")
    else:
        raise ConfigError("split needs --input or --ids")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", PatientLeakageWarning)
            assignment = make_folds(ids, args.k, args.seed, patient_of)
        for w in caught:
            log.warning("%s", w.message)
    except ValueError as exc:
        if "duplicate" in str(exc) or "patient id" in str(exc):
            raise AnnotationValidationError(str(exc)) from None
        raise ConfigError(str(exc)) from None
    out_dir = Path(args.output_dir)
    outputs = [_write(out_dir / "folds.json", assignment.to_json())]
    for i in range(assignment.k):
        for part, members in rotation_ids(assignment, i).items():
            outputs.append(_write(out_dir / f"iteration_{i}_{part}.txt", "".join(f"{m}\n" for m in members)))
    _write_manifest(args, inputs, outputs, started, {"fold_sizes": assignment.sizes()})
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    n = len(args.class_prior)
    noise = args.label_noise
    _check_ratio(noise, "label-noise")
    confusion = None
    if noise > 0:
        confusion = tuple(
            tuple((1 - noise) if i == j else noise / (n - 1) for j in range(n)) for i in range(n)
        )
    try:
        profile = AnnotatorProfile(args.jitter, args.miss_rate, args.spurious_rate, confusion)
        config = SimulationConfig(
            n_images=args.n_images,
            width=args.width,
            height=args.height,
            lesions_per_image=tuple(args.lesions),
            box_size=tuple(args.box_size),
            class_prior=tuple(args.class_prior),
            profiles=(profile,) * args.annotators,
            min_separation=args.min_separation,
            seed=args.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    gt, views = simulate(config)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "." + args.format
    outputs = [write_annotation_file(gt, out_dir / f"gt{ext}")]
    for k, view in enumerate(views):
        outputs.append(write_annotation_file(view, out_dir / f"annotator_{k + 1}{ext}"))
    outputs.append(_write(out_dir / "sim_config.json", config_json(config)))
    _write_manifest(args, [], outputs, started)
    return EXIT_OK


def cmd_report(args) -> int:
    started = time.perf_counter()
    by_source: dict[str, list] = {}
    for path in args.input:
        try:
            reports = reports_from_json(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise AnnotationParseError("file not found", path=path) from None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise AnnotationParseError(f"not an evaluation report ({exc!r})", path=path) from None
        for r in reports:
            by_source.setdefault(r.source, []).append(r)
    summaries = []
    for source, reports in by_source.items():
        if len(reports) < 2:
            raise AnnotationValidationError(f"source {source!r} appears in fewer than two reports")
        summaries.append(aggregate_folds(reports))
    output = Path(args.output)
    outputs = [_write(output, json.dumps({"summaries": [s.to_dict() for s in summaries]}, indent=1) + "\n")]
    csv_path = Path(args.csv) if args.csv else _sibling(output, ".csv")
    outputs.append(_write(csv_path, rows_to_csv(table_header(summaries[0].classes),
                                                [summary_row(s) for s in summaries])))
    _write_manifest(args, args.input, outputs, started)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_common(p, output_required=True):
    p.add_argument("--output", required=output_required, help="primary output file")
    p.add_argument("--manifest", help="run manifest path (default: <output>.manifest.json)")
    p.add_argument("--jobs", type=int, default=1, help="worker count; results do not depend on it")


def _add_eval_args(p):
    p.add_argument("--pred", nargs="+", required=True, help="prediction annotation file(s)")
    p.add_argument("--gt", required=True, help="ground-truth annotation file")
    p.add_argument("--iou", type=float, default=0.3, help="IoU threshold for a true positive")
    p.add_argument("--conf", type=float, default=0.0, help="confidence threshold for F1/FNR")
    p.add_argument("--classes", nargs="+", help="class list (default: merged classes)")
    p.add_argument("--per-source", action="store_true", help="evaluate each source_id separately")
    p.add_argument("--name", help="row name for a single prediction file")
    p.add_argument("--csv", help="CSV table path (default: output with .csv suffix)")
    p.add_argument("--ids", help="text file of image ids to evaluate on (e.g. one test fold)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bitefuse", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", help="fuse multi-annotator boxes into consensus ground truth")
    p.add_argument("--input", nargs="+", required=True, help="annotation file(s), e.g. one per annotator")
    _add_common(p)
    p.add_argument("--format", choices=("json", "csv"), help="output format (default: from suffix)")
    p.add_argument("--strategy", choices=("gmm", "nms"), default="gmm")
    p.add_argument("--iou", "--grouping-iou", dest="grouping_iou", type=float, default=0.3)
    p.add_argument("--p", type=float, default=DEFAULT_MASS_P, help="central probability mass of the consensus box")
    p.add_argument("--sigma-divisor", type=float, default=4.0)
    p.add_argument("--min-votes", type=int, default=1)
    p.add_argument("--severity", nargs="+", help="class names, most severe first")
    p.add_argument("--n-annotators", type=int, help="confidence denominator (default: sources per image)")
    p.add_argument("--exclude", help="text file of image ids to drop (e.g. the consensus test set)")
    p.add_argument("--keep-rejected", action="store_true")
    p.add_argument("--no-merge", action="store_true", help="keep raw grades instead of merging")
    p.add_argument("--diagnostics", help="JSON sidecar with group memberships and vote tallies")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="AP/F1/FNR of predictions against ground truth")
    _add_eval_args(p)
    _add_common(p)
    p.add_argument("--pr-curve", help="write precision/recall plot data as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ci", help="BCa bootstrap confidence intervals")
    _add_eval_args(p)
    _add_common(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--statistic", nargs="+", default=["map"],
                   help="map, mf1, mfnr or <ap|f1|fnr>:<class>")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("split", help="seeded k-fold assignment with three-way rotation")
    p.add_argument("--input", help="annotation file whose (filtered) images are split")
    p.add_argument("--ids", help="plain-text file of image ids")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--manifest")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--exclude", help="text file of image ids to drop")
    p.add_argument("--keep-rejected", action="store_true")
    p.add_argument("--group-by-patient", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("simulate", help="synthetic ground truth plus noisy annotators")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--manifest")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-images", type=int, default=100)
    p.add_argument("--annotators", type=int, default=6)
    p.add_argument("--jitter", type=float, default=2.0)
    p.add_argument("--miss-rate", type=float, default=0.0)
    p.add_argument("--spurious-rate", type=float, default=0.0)
    p.add_argument("--label-noise", type=float, default=0.0, help="off-diagonal confusion mass")
    p.add_argument("--width", type=float, default=1000.0)
    p.add_argument("--height", type=float, default=600.0)
    p.add_argument("--lesions", type=int, nargs=2, default=(1, 4), metavar=("MIN", "MAX"))
    p.add_argument("--box-size", type=float, nargs=2, default=(30.0, 90.0), metavar=("MIN", "MAX"))
    p.add_argument("--class-prior", type=float, nargs=3, default=(0.4, 0.4, 0.2))
    p.add_argument("--min-separation", type=float, default=20.0)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="mean ± std table over per-fold evaluation reports")
    p.add_argument("--input", nargs="+", required=True, help="eval JSON outputs, one per fold")
    _add_common(p)
    p.add_argument("--csv", help="CSV table path (default: output with .csv suffix)")
    p.set_defaults(func=cmd_report)
    return parser


def _setup_logging():
    level = os.environ.get("BITEFUSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AnnotationParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (AnnotationValidationError, SimulationError, UndefinedStatisticError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
