"""Command-line entry point: ``smrkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import analysis, coding_opt, pipeline, predictor, reporting
from .records import (
    CLASSIFICATION,
    DETECTION,
    ORIGINAL,
    RecordError,
    ingest_many,
    iter_jsonl,
    load_manifest,
    persist,
    save_manifest,
    validate_completeness,
)
from .rng import default_seed
from .smr import (
    SMR_TABLE_HEADER,
    VACUOUS_EXCLUDE,
    VACUOUS_INCLUDE,
    annotate,
    distribution,
    ordering_check,
    parse_smr_type,
    score_image,
    table_rows,
    tables_from_rows,
)

log = logging.getLogger("smrkit")

DEFAULT_SMR_TYPES = {CLASSIFICATION: ["top1", "top3", "top5"], DETECTION: ["det-ts0.50"]}


@dataclass
class RunConfig:
    manifest: Path | None = None
    records: list[Path] = field(default_factory=list)
    features: list[Path] = field(default_factory=list)
    bitrates: list[Path] = field(default_factory=list)
    smr_types: list[str] = field(default_factory=list)
    thresholds: coding_opt.ThresholdSet = coding_opt.ThresholdSet(coding_opt.DEFAULT_THRESHOLDS)
    seed: int = 0
    out: Path = Path("out")
    strict: bool = True
    workers: int = 1

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        cfg = cls(
            manifest=Path(args.manifest) if getattr(args, "manifest", None) else None,
            records=[Path(p) for p in getattr(args, "records", None) or []],
            features=[Path(p) for p in getattr(args, "features", None) or []],
            bitrates=[Path(p) for p in getattr(args, "bitrates", None) or []],
            smr_types=list(getattr(args, "smr_type", None) or []),
            seed=args.seed,
            out=Path(args.out),
            strict=args.strict,
            workers=args.workers,
        )
        if getattr(args, "thresholds", None):
            cfg.thresholds = coding_opt.ThresholdSet.parse(args.thresholds)
        if not 0 <= cfg.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {cfg.seed}")
        for p in [cfg.manifest, *cfg.records, *cfg.features, *cfg.bitrates]:
            if p is not None and not p.exists():
                raise RecordError("file not found", str(p))
        return cfg


def _load_tables(paths):
    rows = []
    for p in paths:
        if str(p).endswith(".jsonl"):
            rows.extend(obj for _, obj in iter_jsonl(p))
        else:
            rows.extend(reporting.read_csv(p))
    if not rows:
        raise RecordError("no SMR table rows found")
    return tables_from_rows(rows)


def write_tables(out: Path, tables, smr_type) -> None:
    rows = list(table_rows(tables.values()))
    reporting.write_csv(out / f"smr_{smr_type.name}.csv", SMR_TABLE_HEADER, rows)
    reporting.write_jsonl(out / f"smr_{smr_type.name}.jsonl", (dict(zip(SMR_TABLE_HEADER, r)) for r in rows))


def write_distribution(path: Path, dist) -> None:
    reporting.write_csv(path, ("qp", "mean_smr"), dist.means)


def write_curve(path: Path, curve) -> None:
    reporting.write_csv(
        path,
        ("threshold", "mean_bpp", "mean_smr", "label"),
        ((p.threshold, p.mean_bpp, p.mean_smr, curve.label) for p in curve.points),
    )


def read_curve(path) -> coding_opt.RateSmrCurve:
    rows = reporting.read_csv(path)
    if not rows:
        raise RecordError("empty curve file", str(path))
    return coding_opt.RateSmrCurve(
        rows[0]["label"],
        tuple(coding_opt.CurvePoint(float(r["threshold"]), float(r["mean_bpp"]), float(r["mean_smr"])) for r in rows),
    )


def write_decisions(path: Path, decisions) -> None:
    reporting.write_csv(
        path,
        ("image", "threshold", "q_b", "chosen_qp", "fallback"),
        ((d.image, d.threshold, d.base_qp, d.chosen_qp, int(d.fallback)) for d in decisions),
    )


def _smr_types(cfg: RunConfig, task: str):
    names = cfg.smr_types or DEFAULT_SMR_TYPES[task]
    return [parse_smr_type(n) for n in names]


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    cfg = RunConfig.from_args(args)
    manifest = load_manifest(cfg.manifest) if cfg.manifest else None
    report = {}
    if cfg.records:
        if manifest is None:
            raise RecordError("--records needs --manifest to know the task")
        recs = ingest_many(cfg.records, manifest.task, manifest)
        missing = validate_completeness(manifest, recs)
        report["perceptions"] = {"count": len(recs), "missing_cells": len(missing)}
        report["missing"] = [list(k) for k in missing.missing]
        if cfg.strict and not missing.ok:
            reporting.write_json(cfg.out / "ingest_report.json", report)
            raise RecordError("strict mode: " + missing.describe())
        persist(recs, cfg.out / "perceptions.jsonl")
    if cfg.features:
        feats = ingest_many(cfg.features, "feature", manifest)
        report["features"] = {"count": len(feats), "dim": feats.dim}
        persist(feats, cfg.out / "features.jsonl")
    if cfg.bitrates:
        rates = ingest_many(cfg.bitrates, "bitrate", manifest)
        report["bitrates"] = {"count": len(rates)}
        persist(rates, cfg.out / "bitrates.csv")
    reporting.write_json(cfg.out / "ingest_report.json", report)
    print(reporting.dumps(report))
    return 0


def run_annotate(cfg: RunConfig, vacuous: str = VACUOUS_INCLUDE):
    manifest = load_manifest(cfg.manifest)
    recs = ingest_many(cfg.records, manifest.task, manifest)
    summary = {"task": manifest.task, "strict": cfg.strict, "types": {}}
    by_k = {}
    all_tables = {}
    for st in _smr_types(cfg, manifest.task):
        tables = annotate(manifest, recs, st, strict=cfg.strict, vacuous=vacuous, workers=cfg.workers)
        write_tables(cfg.out, tables, st)
        dist = distribution(tables.values())
        write_distribution(cfg.out / f"distribution_{st.name}.csv", dist)
        summary["types"][st.name] = {
            "images": len(tables),
            "distribution": {str(q): v for q, v in dist.means},
        }
        if st.task == CLASSIFICATION:
            by_k.setdefault(st.library, {})[st.k] = tables
        all_tables[st.name] = tables
    violations = []
    for lib, tables_by_k in by_k.items():
        violations.extend(
            {"library": lib, "image": v.image, "qp": v.qp, "values": {f"top{k}": x for k, x in v.values}}
            for v in ordering_check(tables_by_k)
        )
    summary["ordering_violations"] = violations
    reporting.write_json(cfg.out / "annotate_summary.json", summary)
    return manifest, recs, all_tables, summary


def cmd_annotate(args) -> int:
    cfg = RunConfig.from_args(args)
    _, _, tables, summary = run_annotate(cfg, args.vacuous)
    for name, info in summary["types"].items():
        print(f"{name}: {info['images']} images annotated")
    return 0


def cmd_diversity(args) -> int:
    if args.from_mean is not None:
        summary = analysis.diversity_summary(args.from_mean, args.levels)
        print(reporting.dumps(summary))
        if args.out:
            reporting.write_json(Path(args.out) / "diversity_summary.json", summary)
        return 0
    cfg = RunConfig.from_args(args)
    manifest = load_manifest(cfg.manifest)
    recs = ingest_many(cfg.records, manifest.task, manifest)
    kwargs = {"task": manifest.task}
    if manifest.task == DETECTION:
        kwargs["t_s"] = args.t_s
    images = sorted(manifest.images)
    mat = analysis.diversity_matrix(
        recs, manifest.machines, images, manifest.ladder, args.sample_size, args.repetitions, cfg.seed, **kwargs
    )
    reporting.write_csv(
        cfg.out / "diversity_matrix.csv",
        ("machine", *mat.machines),
        ((m, *row.tolist()) for m, row in zip(mat.machines, mat.matrix)),
    )
    summary = mat.summary()
    if args.trials:
        labels = analysis.sequence_array(recs, manifest.machines, images, manifest.ladder, **kwargs)
        qp_range = tuple(args.qp_range) if args.qp_range else None
        exp = analysis.modification_experiment(
            labels, manifest.machines, images, manifest.ladder.levels, args.trials, qp_range, seed=cfg.seed
        )
        reporting.write_json(cfg.out / "experiment_summary.json", exp.summary())
        summary["modification"] = exp.summary()
    reporting.write_json(cfg.out / "diversity_summary.json", summary)
    print(reporting.dumps(summary))
    return 0


def cmd_jnd(args) -> int:
    cfg = RunConfig.from_args(args)
    manifest = load_manifest(cfg.manifest)
    recs = ingest_many(cfg.records, manifest.task, manifest)
    st = _smr_types(cfg, manifest.task)[0]
    rows = []
    for image in sorted(manifest.images):
        scores = score_image(manifest, recs, st, image)
        for m in manifest.machines:
            levels = [q for q in manifest.ladder.levels if (m, q) in scores]
            vals = [scores[(m, q)].value for q in levels]
            rep = analysis.locate_jnd(vals, st.task, st.t_s, levels, m, image)
            rows.append({**rep.to_dict(), "smr_type": st.name})
    reporting.write_jsonl(cfg.out / f"jnd_{st.name}.jsonl", rows)
    print(f"{sum(r['first_jnd'] is not None for r in rows)} of {len(rows)} (machine, image) pairs reach a JND point")
    return 0


def cmd_correlate(args) -> int:
    cfg = RunConfig.from_args(args)
    manifest = load_manifest(cfg.manifest)
    feats = ingest_many(cfg.features, "feature")
    tables = _load_tables(args.tables)
    extractors = args.extractors or sorted({k[0] for k in feats} & set(manifest.machines)) or sorted({k[0] for k in feats})
    study = predictor.correlation_study(feats, tables, extractors)
    reporting.write_json(cfg.out / "correlation.json", {"extractors": extractors, **study.to_dict()})
    reporting.write_csv(
        cfg.out / "correlation_points.csv",
        ("mean_feature_difference", "smr"),
        zip(study.pooled.d_values, study.pooled.smr_values),
    )
    p = study.pooled
    print(f"pooled: pearson={p.pearson:.4f} spearman={p.spearman:.4f} cubic={[round(c, 4) for c in p.coefficients]}")
    return 0


def _training_config(args, seed) -> predictor.TrainingConfig:
    return predictor.TrainingConfig(
        kind=args.model,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=seed,
        hidden=tuple(args.hidden) if args.hidden else None,
    )


def cmd_train(args) -> int:
    cfg = RunConfig.from_args(args)
    feats = ingest_many(cfg.features, "feature")
    tables = _load_tables(args.tables)
    ds = predictor.build_dataset(feats, args.extractor, tables)
    result = predictor.train(ds, _training_config(args, cfg.seed))
    predictor.save_model(cfg.out / "model.json", result.model, result.config)
    reporting.write_csv(cfg.out / "loss_trace.csv", ("epoch", "mean_L1"), enumerate(result.loss_trace, 1))
    print(f"trained {result.model.kind} model {result.model.sizes}: final L1 {result.loss_trace[-1]:.6f}")
    return 0


def cmd_predict(args) -> int:
    cfg = RunConfig.from_args(args)
    model, _ = predictor.load_model(args.model_path)
    feats = ingest_many(cfg.features, "feature")
    images = sorted({k[1] for k in feats if k[0] == args.extractor})
    rows = []
    for image in images:
        ref = feats.get((args.extractor, image, ORIGINAL))
        if ref is None:
            raise RecordError(f"missing ORIGINAL features for image {image!r}")
        for (ext, img, qp), rec in feats.items():
            if ext == args.extractor and img == image:
                rows.append((image, qp, predictor.predict_smr(model, ref.vector, rec.vector)))
    reporting.write_csv(cfg.out / "predictions.csv", ("image", "qp", "predicted_smr"), rows)
    print(f"wrote {len(rows)} predictions")
    return 0


def cmd_optimize(args) -> int:
    cfg = RunConfig.from_args(args)
    manifest = load_manifest(cfg.manifest)
    gt = _load_tables(args.tables)
    rates = ingest_many(cfg.bitrates, "bitrate")
    if args.distribution:
        dist = {int(r["qp"]): float(r["mean_smr"]) for r in reporting.read_csv(args.distribution)}
    else:
        dist = distribution(gt.values())
    images = sorted(gt)
    ladder = manifest.ladder.levels
    if args.mode == "constant":
        decisions = coding_opt.constant_qp_decisions(images, cfg.thresholds, dist)
    else:
        if args.mode == "gt":
            source = {img: gt[img].as_dict() for img in images}
        else:
            if not args.predictions:
                raise RecordError("--mode predicted needs --predictions")
            source = {}
            for r in reporting.read_csv(args.predictions):
                source.setdefault(r["image"], {})[int(r["qp"])] = float(r["predicted_smr"])
        decisions = coding_opt.guided_decisions(images, cfg.thresholds, dist, source, ladder)
    label = args.label or args.mode
    curve = coding_opt.build_curve(
        decisions, rates, {img: gt[img].as_dict() for img in images}, cfg.thresholds, label
    )
    write_decisions(cfg.out / f"decisions_{label}.csv", decisions)
    write_curve(cfg.out / f"curve_{label}.csv", curve)
    for p in curve.points:
        print(f"T={p.threshold:.2f} bpp={p.mean_bpp:.5f} smr={p.mean_smr:.4f}")
    return 0


def cmd_bdrate(args) -> int:
    anchor = read_curve(args.anchor)
    test = read_curve(args.test)
    res = coding_opt.bd_rate(anchor, test, args.bd_mode)
    if args.out:
        reporting.write_json(Path(args.out) / f"bdrate_{test.label}_vs_{anchor.label}.json", res.to_dict())
    print(f"BD-rate {test.label} vs {anchor.label}: {res.bd_rate_percent:.4f}%")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise RecordError("output directory not found", str(out))
    report = {}
    for path in sorted(out.glob("*.json")):
        if path.name in ("report.json", "model.json"):
            continue
        report[path.stem] = json.loads(path.read_text())
    curves = {}
    for path in sorted(out.glob("curve_*.csv")):
        c = read_curve(path)
        curves[c.label] = [[p.threshold, p.mean_bpp, p.mean_smr] for p in c.points]
    if curves:
        report["curves"] = curves
    reporting.write_json(out / "report.json", report)
    for name in report:
        print(name)
    return 0


def cmd_pipeline(args) -> int:
    cfg = RunConfig.from_args(args)
    if not cfg.bitrates:
        raise pipeline.StageError("ingest", RecordError("no bitrate files given (--bitrates)"))
    if not cfg.features:
        raise pipeline.StageError("ingest", RecordError("no feature files given (--features)"))
    try:
        manifest = load_manifest(cfg.manifest)
        recs = ingest_many(cfg.records, manifest.task, manifest)
        feats = ingest_many(cfg.features, "feature")
        rates = ingest_many(cfg.bitrates, "bitrate", manifest)
    except RecordError as exc:
        raise pipeline.StageError("ingest", exc) from exc
    st = _smr_types(cfg, manifest.task)[0]
    extractor = args.extractor or sorted({k[0] for k in feats})[0]
    result = pipeline.run_pipeline(
        manifest,
        recs,
        feats,
        rates,
        st,
        cfg.thresholds.values,
        _training_config(args, cfg.seed),
        extractor,
        train_fraction=args.train_fraction,
        strict=cfg.strict,
        workers=cfg.workers,
    )
    out = cfg.out
    write_tables(out, result.tables, st)
    write_distribution(out / f"distribution_{st.name}.csv", result.distribution)
    predictor.save_model(out / "model.json", result.training.model, result.training.config)
    reporting.write_csv(out / "loss_trace.csv", ("epoch", "mean_L1"), enumerate(result.training.loss_trace, 1))
    for name, decisions in result.decisions.items():
        write_decisions(out / f"decisions_{name}.csv", decisions)
        write_curve(out / f"curve_{name}.csv", result.curves[name])
    summary = {
        "smr_type": st.name,
        "seed": cfg.seed,
        "extractor": extractor,
        "train_images": len(result.train_images),
        "test_images": len(result.test_images),
        "test_mae": result.test_mae,
        "final_train_l1": result.training.loss_trace[-1],
        "thresholds": list(cfg.thresholds.values),
        "bd_rates": [b.to_dict() for b in result.bd_rates],
    }
    reporting.write_json(out / "pipeline_summary.json", summary)
    for b in result.bd_rates:
        print(f"BD-rate {b.test} vs {b.anchor}: {b.bd_rate_percent:.4f}%")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import classification_fixture, detection_fixture

    out = Path(args.out)
    if args.task == CLASSIFICATION:
        fx = classification_fixture(args.machines, args.images, dim=args.dim, seed=args.seed)
    else:
        fx = detection_fixture(args.machines, args.images, seed=args.seed)
    save_manifest(fx.manifest, out / "manifest.json")
    persist(fx.perceptions, out / "perceptions.jsonl")
    if len(fx.features):
        persist(fx.features, out / "features.jsonl")
    if len(fx.bitrates):
        persist(fx.bitrates, out / "bitrates.csv")
    print(f"wrote {args.task} fixture to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p, records=True, features=False, bitrates=False, manifest=True):
    if manifest:
        p.add_argument("--manifest", required=True, help="dataset manifest (JSON or YAML)")
    if records:
        p.add_argument("--records", nargs="+", required=True, help="perception JSONL shard(s)")
    if features:
        p.add_argument("--features", nargs="+", required=True, help="feature JSONL shard(s)")
    if bitrates:
        p.add_argument("--bitrates", nargs="+", help="bitrate CSV file(s)")
    p.add_argument("--seed", type=int, default=default_seed(), help="run seed (default: $SMRKIT_SEED or 0)")
    p.add_argument("--out", default="out", help="output directory")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--strict", dest="strict", action="store_true", default=True, help="fail on missing cells (default)")
    g.add_argument("--lenient", dest="strict", action="store_false", help="compute SMR over present machines")
    p.add_argument("--workers", type=int, default=1, help="worker pool size; results do not depend on it")


def _training_flags(p):
    p.add_argument("--model", choices=predictor.MODEL_KINDS, default=predictor.BASELINE)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--hidden", type=int, nargs="*", help="hidden layer sizes (default 4d 4d)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smrkit", description="Satisfied Machine Ratio toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize input records")
    p.add_argument("--manifest")
    p.add_argument("--records", nargs="+")
    p.add_argument("--features", nargs="+")
    p.add_argument("--bitrates", nargs="+")
    _common(p, records=False, manifest=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("annotate", help="per-image SMR tables")
    _common(p)
    p.add_argument("--smr-type", action="append", help="e.g. top1, top5-v2, det-ts0.50, det-iou0.70-ts0.60")
    p.add_argument("--vacuous", choices=(VACUOUS_INCLUDE, VACUOUS_EXCLUDE), default=VACUOUS_INCLUDE,
                   help="detection machines with empty pseudo-GT: score 1.0 or drop")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("diversity", help="machine diversity matrix and modification experiment")
    p.add_argument("--from-mean", type=float, help="only report the share of differing levels for this mean")
    p.add_argument("--levels", type=int, default=20, help="ladder length for --from-mean")
    p.add_argument("--manifest")
    p.add_argument("--records", nargs="+")
    p.add_argument("--sample-size", type=int)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--trials", type=int, default=0, help="random codec modifications to simulate")
    p.add_argument("--qp-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--t-s", type=float, default=0.5, help="detection label threshold (extension)")
    _common(p, records=False, manifest=False)
    p.set_defaults(func=cmd_diversity)

    p = sub.add_parser("jnd", help="JND points per machine and image")
    _common(p)
    p.add_argument("--smr-type", action="append")
    p.set_defaults(func=cmd_jnd)

    p = sub.add_parser("correlate", help="feature difference vs SMR study")
    _common(p, records=False, features=True)
    p.add_argument("--tables", nargs="+", required=True, help="SMR table CSV/JSONL from annotate")
    p.add_argument("--extractors", nargs="*")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("train", help="train an SMR predictor")
    _common(p, records=False, features=True, manifest=False)
    p.add_argument("--tables", nargs="+", required=True)
    p.add_argument("--extractor", required=True)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict SMR for every feature variant")
    _common(p, records=False, features=True, manifest=False)
    p.add_argument("--model-path", required=True, help="checkpoint written by train")
    p.add_argument("--extractor", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("optimize", help="select QPs and build a rate-SMR curve")
    _common(p, records=False, bitrates=True)
    p.add_argument("--tables", nargs="+", required=True, help="ground-truth SMR tables")
    p.add_argument("--thresholds", default="0.6:0.95:0.05")
    p.add_argument("--mode", choices=("constant", "gt", "predicted"), default="predicted")
    p.add_argument("--predictions", help="CSV from predict")
    p.add_argument("--distribution", help="known QP-SMR distribution CSV (default: from --tables)")
    p.add_argument("--label")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bdrate", help="BD-rate between two curve CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--bd-mode", choices=(coding_opt.CUBIC, coding_opt.PCHIP), default=coding_opt.CUBIC)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("report", help="collect JSON outputs of a run directory into report.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="annotate, train, optimize and compare curves end to end")
    _common(p, features=True, bitrates=True)
    p.add_argument("--smr-type", action="append")
    p.add_argument("--thresholds", default="0.6:0.95:0.05")
    p.add_argument("--extractor")
    p.add_argument("--train-fraction", type=float, default=0.5)
    _training_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("synth", help="write a synthetic fixture dataset")
    p.add_argument("--task", choices=(CLASSIFICATION, DETECTION), default=CLASSIFICATION)
    p.add_argument("--machines", type=int, default=12)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RecordError, ValueError, KeyError, OSError, predictor.TrainingDiverged) as exc:
        print(f"error ({args.command}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
