"""Detection SMR tables over a grid of satisfaction thresholds on a synthetic library."""

import argparse

from smrkit.analysis import locate_jnd
from smrkit.records import ORIGINAL
from smrkit.satisfaction import score_detection
from smrkit.smr import SmrType, annotate, distribution
from smrkit.synthetic import detection_fixture


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--machines", type=int, default=6)
    parser.add_argument("--images", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    fx = detection_fixture(args.machines, args.images, seed=args.seed)
    levels = fx.manifest.ladder.levels
    print("T_S   " + "  ".join(f"qp{q:>3}" for q in levels))
    for t_s in (0.5, 0.6, 0.7, 0.8, 0.9):
        dist = distribution(annotate(fx.manifest, fx.perceptions, SmrType("detection", t_s=t_s)).values())
        print(f"{t_s:.2f}  " + "  ".join(f"{v:5.2f}" for _, v in dist.coded()))

    m, img = fx.manifest.machines[0], fx.manifest.images[0]
    original = fx.perceptions[(m, img, ORIGINAL)].payload
    scores = [score_detection(fx.perceptions[(m, img, q)].payload, original).value for q in levels]
    report = locate_jnd(scores, task="detection", t_s=0.5, levels=levels, machine=m, image=img)
    print(f"{m} on {img}: mAP per level {[round(s, 3) for s in scores]}, JND points {list(report.levels)}")


if __name__ == "__main__":
    main()
