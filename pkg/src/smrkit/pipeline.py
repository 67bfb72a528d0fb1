"""annotate -> train -> select QP -> rate-SMR curves -> BD-rate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .coding_opt import (
    BdRateResult,
    QpDecision,
    RateSmrCurve,
    bd_rate,
    build_curve,
    constant_qp_decisions,
    guided_decisions,
)
from .predictor import SmrDataset, TrainingConfig, TrainResult, build_dataset, mean_absolute_error, predict_dataset, train
from .records import DatasetManifest, RecordError
from .rng import substream
from .smr import SmrDistribution, SmrTable, SmrType, annotate, distribution

log = logging.getLogger(__name__)

CONSTANT = "constant-qp"
GT_GUIDED = "gt-guided"
PRED_GUIDED = "predicted-guided"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class PipelineResult:
    tables: dict[str, SmrTable]
    distribution: SmrDistribution
    train_images: tuple[str, ...]
    test_images: tuple[str, ...]
    training: TrainResult
    test_mae: float
    decisions: dict[str, list[QpDecision]]
    curves: dict[str, RateSmrCurve]
    bd_rates: list[BdRateResult] = field(default_factory=list)


def split_images(images: Sequence[str], train_fraction: float, seed: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    images = sorted(images)
    if not 0 < train_fraction < 1:
        raise ValueError("train fraction must lie in (0, 1)")
    perm = substream(seed, "split").permutation(len(images))
    n_train = max(1, min(len(images) - 1, int(round(train_fraction * len(images)))))
    train_set = tuple(sorted(images[i] for i in perm[:n_train]))
    test_set = tuple(sorted(images[i] for i in perm[n_train:]))
    return train_set, test_set


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            log.info("stage %s", name)
            try:
                return fn(*args, **kwargs)
            except (RecordError, ValueError, KeyError, RuntimeError) as exc:
                if isinstance(exc, StageError):
                    raise
                raise StageError(name, exc) from exc

        return inner

    return wrap


def run_pipeline(
    manifest: DatasetManifest,
    perceptions: Mapping,
    features: Mapping,
    bitrates: Mapping,
    smr_type: SmrType,
    thresholds: Sequence[float],
    training: TrainingConfig,
    extractor: str,
    train_fraction: float = 0.5,
    strict: bool = True,
    workers: int = 1,
) -> PipelineResult:
    """Full evaluation on a held-out image split.

    The QP-SMR distribution used for base-QP selection comes from the
    training images; curves and BD-rates are measured on the test images.
    """
    seed = training.seed
    tables = _stage("annotate")(annotate)(manifest, perceptions, smr_type, strict=strict, workers=workers)
    train_imgs, test_imgs = split_images(list(tables), train_fraction, seed)

    dist = _stage("distribution")(distribution)([tables[i] for i in train_imgs])

    def _train():
        train_ds = build_dataset(features, extractor, tables, train_imgs)
        test_ds = build_dataset(features, extractor, tables, test_imgs)
        result = train(train_ds, training)
        return result, test_ds

    result, test_ds = _stage("train")(_train)()
    test_mae = mean_absolute_error(result.model, test_ds)

    ladder = list(manifest.ladder.levels)

    def _decide():
        gt = {img: tables[img].as_dict() for img in test_imgs}
        pred_arr = predict_dataset(result.model, test_ds)
        pred = {img: dict(zip(test_ds.levels, pred_arr[i].tolist())) for i, img in enumerate(test_ds.images)}
        return {
            CONSTANT: constant_qp_decisions(test_imgs, thresholds, dist),
            GT_GUIDED: guided_decisions(test_imgs, thresholds, dist, gt, ladder),
            PRED_GUIDED: guided_decisions(test_imgs, thresholds, dist, pred, ladder),
        }

    decisions = _stage("optimize")(_decide)()

    def _curves():
        actual = {img: tables[img].as_dict() for img in test_imgs}
        return {name: build_curve(d, bitrates, actual, thresholds, name) for name, d in decisions.items()}

    curves = _stage("curves")(_curves)()

    def _bd():
        return [
            bd_rate(curves[CONSTANT], curves[GT_GUIDED]),
            bd_rate(curves[CONSTANT], curves[PRED_GUIDED]),
            bd_rate(curves[GT_GUIDED], curves[PRED_GUIDED]),
        ]

    bds = _stage("bdrate")(_bd)()
    return PipelineResult(tables, dist, train_imgs, test_imgs, result, test_mae, decisions, curves, bds)


def evaluate_dataset(result: TrainResult, dataset: SmrDataset) -> dict:
    pred = predict_dataset(result.model, dataset)
    err = np.abs(pred - dataset.smr)
    return {"mae": float(err.mean()), "mae_coded": float(err[:, 1:].mean())}
