"""Machine diversity and random codec-modification study on a synthetic library.

Reports the pairwise diversity matrix, the share of differing ladder levels,
and how often a random QP change helps one machine while hurting another.
"""

import argparse

import numpy as np

from smrkit.analysis import diversity_matrix, modification_experiment, sequence_array
from smrkit.records import QpLadder
from smrkit.synthetic import classification_fixture


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--machines", type=int, default=12)
    parser.add_argument("--images", type=int, default=200)
    parser.add_argument("--sample-size", type=int, default=100)
    parser.add_argument("--repetitions", type=int, default=3)
    parser.add_argument("--trials", type=int, default=10000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    ladder = QpLadder.from_range(32, 51)
    fx = classification_fixture(args.machines, args.images, ladder=ladder, seed=args.seed)
    machines, images = fx.manifest.machines, sorted(fx.manifest.images)
    mat = diversity_matrix(
        fx.perceptions, machines, images, ladder, sample_size=args.sample_size, repetitions=args.repetitions, seed=args.seed
    )
    with np.printoptions(precision=2, suppress=True, linewidth=160):
        print(mat.matrix)
    s = mat.summary()
    print(f"overall mean diversity {s['overall_mean']:.2f} of {s['ladder_length']} levels ({s['percent_differing']})")

    labels = sequence_array(fx.perceptions, machines, images, ladder)
    res = modification_experiment(labels, machines, images, ladder.levels, args.trials, seed=args.seed)
    print(f"non-ideal modifications: {res.non_ideal_fraction:.1%} of {len(res.trials)} trials ({res.aborted} aborted)")


if __name__ == "__main__":
    main()
