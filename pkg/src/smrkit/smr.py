"""Satisfied Machine Ratio: aggregation, per-image annotation tables and
dataset-level QP-SMR distributions."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .records import (
    CLASSIFICATION,
    DETECTION,
    ORIGINAL,
    DatasetManifest,
    RecordError,
    format_key,
    validate_completeness,
)
from .rng import substream
from .satisfaction import (
    COCO_IOU_GRID,
    DEFAULT_CONF_THRESHOLD,
    DetectionScoringConfig,
    SatisfactionScore,
    score_classification,
    score_detection,
)

VACUOUS_INCLUDE = "include"
VACUOUS_EXCLUDE = "exclude"


@dataclass(frozen=True)
class SmrType:
    """One SMR flavour: top-K classification, or detection (IOU grid, T_S)."""

    task: str
    k: int | None = None
    library: str = "v1"
    iou_thresholds: tuple[float, ...] | None = None
    t_s: float | None = None
    conf_threshold: float = DEFAULT_CONF_THRESHOLD

    def __post_init__(self):
        if self.task == CLASSIFICATION:
            if self.k is None or self.k < 1:
                raise ValueError("classification SMR types need k >= 1")
        elif self.task == DETECTION:
            grid = COCO_IOU_GRID if self.iou_thresholds is None else tuple(self.iou_thresholds)
            object.__setattr__(self, "iou_thresholds", grid)
            if self.t_s is None or not 0.0 < self.t_s <= 1.0:
                raise ValueError(f"detection T_S must lie in (0, 1], got {self.t_s}")
            # validates the grid and confidence threshold
            self.scoring_config
        else:
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def scoring_config(self) -> DetectionScoringConfig:
        return DetectionScoringConfig(self.iou_thresholds, self.conf_threshold)

    @property
    def name(self) -> str:
        if self.task == CLASSIFICATION:
            return f"top{self.k}-{self.library}"
        grid = self.iou_thresholds
        if len(grid) == 1:
            iou_part = f"iou{grid[0]:.2f}"
        elif grid == COCO_IOU_GRID:
            iou_part = "iou0.50:0.95"
        else:
            iou_part = "iou" + "_".join(f"{t:.2f}" for t in grid)
        return f"det-{iou_part}-ts{self.t_s:.2f}"

    def __str__(self) -> str:
        return self.name


_CLS_RE = re.compile(r"^top(\d+)(?:-(\w+))?$")
_DET_RE = re.compile(r"^det(?:-iou([0-9.:_]+))?-ts([0-9.]+)$")


def parse_smr_type(text: str) -> SmrType:
    """Parse ``top1``, ``top5-v2``, ``det-ts0.50``, ``det-iou0.70-ts0.50``,
    ``det-iou0.50:0.95-ts0.60``."""
    text = text.strip()
    m = _CLS_RE.match(text)
    if m:
        return SmrType(CLASSIFICATION, k=int(m.group(1)), library=m.group(2) or "v1")
    m = _DET_RE.match(text)
    if m:
        iou_part, ts = m.group(1), float(m.group(2))
        if iou_part is None or iou_part == "0.50:0.95":
            grid = COCO_IOU_GRID
        elif ":" in iou_part:
            raise ValueError(f"only the 0.50:0.95 IOU range is named; list thresholds with '_' instead: {text!r}")
        else:
            grid = tuple(float(t) for t in iou_part.split("_"))
        return SmrType(DETECTION, iou_thresholds=grid, t_s=ts)
    raise ValueError(f"cannot parse SMR type {text!r}")


def detection_type_grid(conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> list[SmrType]:
    """The 10 x 10 detection types: each single IOU threshold crossed with each T_S."""
    return [
        SmrType(DETECTION, iou_thresholds=(t_iou,), t_s=t_s, conf_threshold=conf_threshold)
        for t_iou in COCO_IOU_GRID
        for t_s in COCO_IOU_GRID
    ]


def is_satisfied(score: SatisfactionScore, t_s: float | None = None) -> bool:
    if score.task == CLASSIFICATION:
        return score.value == 1.0
    if t_s is None:
        raise ValueError("detection satisfaction needs a T_S threshold")
    return score.value >= t_s


def smr(scores: Sequence[SatisfactionScore], t_s: float | None = None) -> float:
    """Fraction of machines whose score meets the threshold.

    Classification machines count as satisfied iff their score is exactly 1,
    regardless of ``t_s``.
    """
    if not scores:
        raise ValueError("SMR needs at least one machine score")
    return sum(is_satisfied(s, t_s) for s in scores) / len(scores)


@dataclass(frozen=True)
class SmrTable:
    image: str
    smr_type: SmrType
    entries: tuple[tuple[int, float], ...]
    # machines that contributed at each level (differs from the library size only in lenient mode)
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.counts) != len(self.entries):
            raise ValueError("one machine count per entry required")
        for qp, v in self.entries:
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"SMR {v} at {qp} outside [0, 1]")

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(q for q, _ in self.entries)

    @property
    def machine_count(self) -> int:
        return min(self.counts) if self.counts else 0

    def as_dict(self) -> dict[int, float]:
        return dict(self.entries)

    def __getitem__(self, qp: int) -> float:
        for q, v in self.entries:
            if q == qp:
                return v
        raise KeyError(qp)


def score_cell(rec, original, smr_type: SmrType) -> SatisfactionScore:
    if smr_type.task == CLASSIFICATION:
        return score_classification(rec.payload, original.payload, smr_type.k)
    return score_detection(rec.payload, original.payload, smr_type.scoring_config)


def _missing_error(manifest: DatasetManifest, records: Mapping) -> None:
    report = validate_completeness(manifest, records)
    if not report.ok:
        raise RecordError("strict mode: " + report.describe())


def score_image(
    manifest: DatasetManifest, records: Mapping, smr_type: SmrType, image: str
) -> dict[tuple[str, int], SatisfactionScore]:
    """Scores for every present (machine, level) of one image, ORIGINAL included."""
    out = {}
    for machine in manifest.machines:
        original = records.get((machine, image, ORIGINAL))
        if original is None:
            continue
        for qp in manifest.ladder.all_levels:
            rec = records.get((machine, image, qp))
            if rec is not None:
                out[(machine, qp)] = score_cell(rec, original, smr_type)
    return out


def annotate_image(
    manifest: DatasetManifest,
    records: Mapping,
    smr_type: SmrType,
    image: str,
    vacuous: str = VACUOUS_INCLUDE,
) -> SmrTable | None:
    """SMR table of one image; ``None`` when no machine can be scored."""
    scores = score_image(manifest, records, smr_type, image)
    entries, counts = [], []
    for qp in manifest.ladder.all_levels:
        level_scores = [scores[(m, qp)] for m in manifest.machines if (m, qp) in scores]
        if vacuous == VACUOUS_EXCLUDE:
            level_scores = [s for s in level_scores if not s.vacuous]
        if not level_scores:
            if vacuous == VACUOUS_EXCLUDE:
                return None
            raise RecordError(f"no machine records for image {image!r} at {format_key((qp,))}")
        entries.append((qp, smr(level_scores, smr_type.t_s)))
        counts.append(len(level_scores))
    return SmrTable(image, smr_type, tuple(entries), tuple(counts))


def annotate(
    manifest: DatasetManifest,
    records: Mapping,
    smr_type: SmrType,
    strict: bool = True,
    vacuous: str = VACUOUS_INCLUDE,
    workers: int = 1,
) -> dict[str, SmrTable]:
    """Per-image SMR tables over the full ladder, ORIGINAL included.

    In strict mode any missing (machine, image, level) cell is an error. In
    lenient mode SMR uses the machines present at each level and the count is
    stored in the table. With ``vacuous="exclude"`` machines whose pseudo-GT
    is empty are dropped, and images left with no machine are omitted.
    """
    if smr_type.task != manifest.task:
        raise ValueError(f"SMR type {smr_type} does not match the {manifest.task} manifest")
    if vacuous not in (VACUOUS_INCLUDE, VACUOUS_EXCLUDE):
        raise ValueError(f"unknown vacuous policy {vacuous!r}")
    if strict:
        _missing_error(manifest, records)

    def work(image):
        return annotate_image(manifest, records, smr_type, image, vacuous)

    images = sorted(manifest.images)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tables = list(pool.map(work, images))
    else:
        tables = [work(img) for img in images]
    return {img: t for img, t in zip(images, tables) if t is not None}


@dataclass(frozen=True)
class SmrDistribution:
    smr_type: SmrType
    means: tuple[tuple[int, float], ...]
    n_images: int

    def as_dict(self) -> dict[int, float]:
        return dict(self.means)

    def coded(self) -> tuple[tuple[int, float], ...]:
        return tuple((q, v) for q, v in self.means if q != ORIGINAL)


def distribution(tables: Iterable[SmrTable]) -> SmrDistribution:
    """Mean SMR per level over a set of images."""
    tables = list(tables)
    if not tables:
        raise ValueError("distribution needs at least one table")
    first = tables[0]
    for t in tables[1:]:
        if t.smr_type != first.smr_type or t.levels != first.levels:
            raise ValueError(f"table for {t.image!r} does not share SMR type and ladder with {first.image!r}")
    values = np.array([[v for _, v in t.entries] for t in tables])
    # sort so the float summation order is independent of input order
    means = np.sort(values, axis=0).mean(axis=0)
    return SmrDistribution(first.smr_type, tuple(zip(first.levels, means.tolist())), len(tables))


# ---------------------------------------------------------------------------
# machine subsets


def satisfaction_array(
    manifest: DatasetManifest, records: Mapping, smr_type: SmrType, levels: Sequence[int] | None = None
) -> np.ndarray:
    """Boolean satisfied flags shaped (machines, images, levels); NaN where missing."""
    levels = tuple(manifest.ladder.levels if levels is None else levels)
    images = sorted(manifest.images)
    out = np.full((len(manifest.machines), len(images), len(levels)), np.nan)
    for ii, image in enumerate(images):
        scores = score_image(manifest, records, smr_type, image)
        for mi, machine in enumerate(manifest.machines):
            for li, qp in enumerate(levels):
                s = scores.get((machine, qp))
                if s is not None:
                    out[mi, ii, li] = float(is_satisfied(s, smr_type.t_s))
    return out


@dataclass(frozen=True)
class SubsetResult:
    n_machines: int
    repetitions: int
    mae_per_repetition: tuple[float, ...]

    @property
    def mae(self) -> float:
        return float(np.mean(self.mae_per_repetition))


def subset_mae(satisfied: np.ndarray, subset: Sequence[int], image_idx: Sequence[int] | None = None) -> float:
    """MAE between the SMR of a machine subset and the full-library SMR."""
    sat = satisfied if image_idx is None else satisfied[:, image_idx, :]
    full = np.nanmean(sat, axis=0)
    part = np.nanmean(sat[list(subset)], axis=0)
    return float(np.nanmean(np.abs(part - full)))


def subset_consistency(
    manifest: DatasetManifest,
    records: Mapping,
    smr_type: SmrType,
    n_m: int,
    repetitions: int = 3,
    seed: int = 0,
    n_images: int | None = None,
    satisfied: np.ndarray | None = None,
) -> SubsetResult:
    """Mean MAE of SMR from ``n_m`` random machines versus the full library,
    over coded levels. Each repetition redraws machines (and images when
    ``n_images`` is given) from its own seeded substream."""
    n_total = len(manifest.machines)
    if not 1 <= n_m <= n_total:
        raise ValueError(f"n_m must lie in [1, {n_total}], got {n_m}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if satisfied is None:
        satisfied = satisfaction_array(manifest, records, smr_type)
    n_img = satisfied.shape[1]
    maes = []
    for rep in range(repetitions):
        rng = substream(seed, "subset", n_m, rep)
        subset = np.sort(rng.choice(n_total, size=n_m, replace=False))
        image_idx = None
        if n_images is not None and n_images < n_img:
            image_idx = np.sort(rng.choice(n_img, size=n_images, replace=False))
        maes.append(subset_mae(satisfied, subset, image_idx))
    return SubsetResult(n_m, repetitions, tuple(maes))


# ---------------------------------------------------------------------------
# top-K ordering


@dataclass(frozen=True)
class OrderingViolation:
    image: str
    qp: int
    values: tuple[tuple[int, float], ...]


def ordering_check(tables_by_k: Mapping[int, Mapping[str, SmrTable]]) -> list[OrderingViolation]:
    """Report every (image, level) where SMR-topK decreases as K grows."""
    ks = sorted(tables_by_k)
    if len(ks) < 2:
        return []
    images = set(tables_by_k[ks[0]])
    for k in ks[1:]:
        if set(tables_by_k[k]) != images:
            raise ValueError(f"top{k} tables cover different images than top{ks[0]}")
    violations = []
    for image in sorted(images):
        tables = [tables_by_k[k][image] for k in ks]
        levels = tables[0].levels
        if any(t.levels != levels for t in tables):
            raise ValueError(f"tables for {image!r} are not aligned by level")
        for qp in levels:
            vals = [t[qp] for t in tables]
            if any(b < a for a, b in zip(vals, vals[1:])):
                violations.append(OrderingViolation(image, qp, tuple(zip(ks, vals))))
    return violations


# ---------------------------------------------------------------------------
# serialization


SMR_TABLE_HEADER = ("image", "smr_type", "qp", "smr", "machine_count")


def table_rows(tables: Iterable[SmrTable]):
    for t in sorted(tables, key=lambda t: t.image):
        for (qp, v), n in zip(t.entries, t.counts):
            yield (t.image, t.smr_type.name, qp, float(v), n)


def tables_from_rows(rows: Iterable[Mapping[str, str]]) -> dict[str, SmrTable]:
    """Rebuild tables from CSV/JSONL rows (inverse of ``table_rows``)."""
    grouped: dict[str, list] = {}
    types: dict[str, str] = {}
    for row in rows:
        image = str(row["image"])
        grouped.setdefault(image, []).append((int(row["qp"]), float(row["smr"]), int(row["machine_count"])))
        types[image] = str(row["smr_type"])
    out = {}
    for image, items in grouped.items():
        items.sort()
        out[image] = SmrTable(
            image,
            parse_smr_type(types[image]),
            tuple((q, v) for q, v, _ in items),
            tuple(n for _, _, n in items),
        )
    return out
