"""Run the full SMR pipeline on a synthetic 12-machine library and print BD-rates.

    python scripts/run_pipeline_demo.py --images 200 --epochs 300 --out runs/demo
"""

import argparse
from pathlib import Path

from smrkit import pipeline, reporting
from smrkit.coding_opt import DEFAULT_THRESHOLDS
from smrkit.predictor import BASELINE, MODEL_KINDS, TrainingConfig
from smrkit.records import QpLadder
from smrkit.smr import SmrType
from smrkit.synthetic import EXTRACTOR, classification_fixture


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--machines", type=int, default=12)
    parser.add_argument("--images", type=int, default=200)
    parser.add_argument("--k", type=int, default=1, help="top-K agreement for satisfaction")
    parser.add_argument("--model", choices=MODEL_KINDS, default=BASELINE)
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--epochs", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, help="write curves and summary here")
    args = parser.parse_args()

    fx = classification_fixture(args.machines, args.images, ladder=QpLadder.from_range(32, 51), seed=args.seed)
    result = pipeline.run_pipeline(
        fx.manifest,
        fx.perceptions,
        fx.features,
        fx.bitrates,
        SmrType("classification", k=args.k),
        DEFAULT_THRESHOLDS,
        TrainingConfig(kind=args.model, learning_rate=args.lr, epochs=args.epochs, seed=args.seed),
        EXTRACTOR,
    )
    print(f"test MAE of the {args.model} predictor: {result.test_mae:.4f}")
    for name, curve in result.curves.items():
        pts = ", ".join(f"({p.mean_bpp:.3f} bpp, {p.mean_smr:.3f})" for p in curve.points)
        print(f"{name:>17}: {pts}")
    for b in result.bd_rates:
        print(f"BD-rate {b.test} vs {b.anchor}: {b.bd_rate_percent:+.2f}%")
    if args.out:
        for name, curve in result.curves.items():
            reporting.write_csv(
                args.out / f"curve_{name}.csv",
                ("threshold", "mean_bpp", "mean_smr", "label"),
                [(p.threshold, p.mean_bpp, p.mean_smr, name) for p in curve.points],
            )
        reporting.write_json(args.out / "bd_rates.json", [b.to_dict() for b in result.bd_rates])


if __name__ == "__main__":
    main()
