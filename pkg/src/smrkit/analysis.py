"""Machine diversity, the random codec-modification experiment, and JND points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .records import CLASSIFICATION, DETECTION, ORIGINAL, QpLadder, RecordError, format_key
from .rng import substream
from .satisfaction import DetectionScoringConfig, score_detection

MAX_REDRAWS = 100


@dataclass(frozen=True)
class ConsistencySequence:
    machine: str
    image: str
    levels: tuple[int, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.levels):
            raise ValueError("one label per coded level required")
        if any(v not in (0, 1) for v in self.labels):
            raise ValueError("consistency labels must be 0 or 1")

    def label_at(self, qp: int) -> int:
        return self.labels[self.levels.index(qp)]


def consistency_sequence(
    records: Mapping,
    machine: str,
    image: str,
    ladder: QpLadder,
    task: str = CLASSIFICATION,
    t_s: float | None = None,
    config: DetectionScoringConfig | None = None,
) -> ConsistencySequence:
    """Per-level consistency labels of one machine on one image.

    Classification: 1 iff the top-1 category matches the one on the original.
    Detection (not part of the original diversity study): 1 iff the
    detection satisfaction score reaches ``t_s``.
    """
    levels = tuple(ladder.levels)
    if not levels:
        raise RecordError("empty ladder")
    missing = [q for q in (ORIGINAL,) + levels if (machine, image, q) not in records]
    if missing:
        raise RecordError(
            "missing levels for consistency sequence: "
            + ", ".join(format_key((machine, image, q)) for q in missing)
        )
    original = records[(machine, image, ORIGINAL)].payload
    labels = []
    for qp in levels:
        payload = records[(machine, image, qp)].payload
        if task == CLASSIFICATION:
            labels.append(int(payload.top1 == original.top1))
        elif task == DETECTION:
            if t_s is None:
                raise ValueError("detection consistency labels need t_s")
            score = score_detection(payload, original, config or DetectionScoringConfig())
            labels.append(int(score.value >= t_s))
        else:
            raise ValueError(f"unknown task {task!r}")
    return ConsistencySequence(machine, image, levels, tuple(labels))


def diversity_score(a: ConsistencySequence | Sequence[int], b: ConsistencySequence | Sequence[int]) -> int:
    """Hamming distance between two consistency sequences."""
    if isinstance(a, ConsistencySequence) and isinstance(b, ConsistencySequence) and a.image != b.image:
        raise ValueError(f"sequences belong to different images ({a.image!r}, {b.image!r})")
    la = a.labels if isinstance(a, ConsistencySequence) else tuple(a)
    lb = b.labels if isinstance(b, ConsistencySequence) else tuple(b)
    if len(la) != len(lb):
        raise ValueError(f"sequence lengths differ ({len(la)} vs {len(lb)})")
    return sum(x != y for x, y in zip(la, lb))


def diversity_summary(overall_mean: float, n_levels: int) -> dict:
    """Express a mean diversity score as the share of levels where machines differ."""
    if n_levels <= 0:
        raise ValueError("ladder length must be positive")
    fraction = overall_mean / n_levels
    return {
        "overall_mean": overall_mean,
        "ladder_length": n_levels,
        "fraction_differing": fraction,
        "percent_differing": f"{round(100 * fraction, 1):.1f}%",
    }


@dataclass(frozen=True)
class DiversityMatrix:
    machines: tuple[str, ...]
    matrix: np.ndarray
    ladder_length: int
    n_images: int
    repetitions: int

    @property
    def overall_mean(self) -> float:
        """Mean over distinct machine pairs."""
        n = len(self.machines)
        if n < 2:
            return 0.0
        iu = np.triu_indices(n, k=1)
        return float(self.matrix[iu].mean())

    def summary(self) -> dict:
        out = diversity_summary(self.overall_mean, self.ladder_length)
        out.update(n_images=self.n_images, repetitions=self.repetitions, machines=list(self.machines))
        return out


def sequence_array(
    records: Mapping, machines: Sequence[str], images: Sequence[str], ladder: QpLadder, **kwargs
) -> np.ndarray:
    """Consistency labels shaped (machines, images, levels)."""
    out = np.zeros((len(machines), len(images), len(ladder)), dtype=np.int8)
    for mi, m in enumerate(machines):
        for ii, img in enumerate(images):
            out[mi, ii] = consistency_sequence(records, m, img, ladder, **kwargs).labels
    return out


def pairwise_hamming(labels: np.ndarray) -> np.ndarray:
    """Mean Hamming distance between machines over images; ``labels`` is (M, I, L)."""
    m = labels.shape[0]
    out = np.zeros((m, m))
    for a in range(m):
        for b in range(a + 1, m):
            d = np.sum(labels[a] != labels[b], axis=1).mean()
            out[a, b] = out[b, a] = d
    return out


def diversity_matrix(
    records: Mapping,
    machines: Sequence[str],
    images: Sequence[str],
    ladder: QpLadder,
    sample_size: int | None = None,
    repetitions: int = 1,
    seed: int = 0,
    **label_kwargs,
) -> DiversityMatrix:
    """Pairwise mean diversity, averaged over repetitions.

    Each repetition independently draws ``sample_size`` images without
    replacement (all images when ``sample_size`` is None).
    """
    images = sorted(images)
    if not images or (sample_size is not None and sample_size < 1):
        raise ValueError("image sample is empty")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    labels = sequence_array(records, machines, images, ladder, **label_kwargs)
    mats = []
    size = len(images) if sample_size is None else min(sample_size, len(images))
    for rep in range(repetitions):
        if size == len(images):
            idx = np.arange(len(images))
        else:
            idx = np.sort(substream(seed, "diversity", rep).choice(len(images), size=size, replace=False))
        mats.append(pairwise_hamming(labels[:, idx, :]))
    return DiversityMatrix(tuple(machines), np.mean(mats, axis=0), len(ladder), size, repetitions)


# ---------------------------------------------------------------------------
# random codec modifications


def is_non_ideal(lm_base: int, lm_mod: int, ln_base: int, ln_mod: int) -> bool:
    """Whether a modification helps one machine while hurting or failing the other."""
    dm = lm_mod - lm_base
    dn = ln_mod - ln_base
    if dm == dn:
        return False
    if dm == -1 or dn == -1:
        return True
    return (lm_base == lm_mod == 0) or (ln_base == ln_mod == 0)


@dataclass(frozen=True)
class ModificationTrial:
    image: str
    machines: tuple[str, str]
    qp_base: int
    qp_mod: int
    labels: tuple[int, int, int, int]
    non_ideal: bool


@dataclass(frozen=True)
class ModificationResult:
    trials: tuple[ModificationTrial, ...]
    aborted: int

    @property
    def non_ideal_fraction(self) -> float:
        if not self.trials:
            return float("nan")
        return sum(t.non_ideal for t in self.trials) / len(self.trials)

    def summary(self) -> dict:
        return {
            "trials": len(self.trials),
            "aborted": self.aborted,
            "non_ideal_fraction": self.non_ideal_fraction,
        }


def draw_modified_qp(rng: np.random.Generator, qp_base: int, lo: int, hi: int, delta_range=(1, 5)) -> int | None:
    """Signed random offset clamped to [lo, hi]; redrawn while it lands on ``qp_base``."""
    for _ in range(MAX_REDRAWS):
        delta = int(rng.integers(delta_range[0], delta_range[1] + 1))
        sign = 1 if rng.random() < 0.5 else -1
        qp_mod = min(hi, max(lo, qp_base + sign * delta))
        if qp_mod != qp_base:
            return qp_mod
    return None


def modification_experiment(
    labels: np.ndarray,
    machines: Sequence[str],
    images: Sequence[str],
    levels: Sequence[int],
    trials: int,
    qp_range: tuple[int, int] | None = None,
    delta_range: tuple[int, int] = (1, 5),
    seed: int = 0,
) -> ModificationResult:
    """Fraction of random QP modifications that are non-ideal for a machine pair.

    ``labels`` holds consistency labels shaped (machines, images, levels) as
    built by :func:`sequence_array`. Every QP in ``qp_range`` must be on the
    ladder. Trial ``t`` draws from substream ``(seed, "modify", t)``, so
    results do not depend on execution order.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if len(machines) < 2:
        raise ValueError("need at least two machines")
    levels = list(levels)
    lo, hi = qp_range if qp_range is not None else (levels[0], levels[-1])
    span = list(range(lo, hi + 1))
    if len(span) < 2:
        raise ValueError(f"QP range [{lo}, {hi}] cannot produce a distinct modified QP")
    absent = [q for q in span if q not in levels]
    if absent:
        raise ValueError(f"ladder does not cover the experiment range; missing QPs {absent}")
    pos = {q: i for i, q in enumerate(levels)}
    out = []
    aborted = 0
    for t in range(trials):
        rng = substream(seed, "modify", t)
        ii = int(rng.integers(len(images)))
        m, n = (int(x) for x in rng.choice(len(machines), size=2, replace=False))
        qp_base = int(rng.integers(lo, hi + 1))
        qp_mod = draw_modified_qp(rng, qp_base, lo, hi, delta_range)
        if qp_mod is None:
            aborted += 1
            continue
        lab = (
            int(labels[m, ii, pos[qp_base]]),
            int(labels[m, ii, pos[qp_mod]]),
            int(labels[n, ii, pos[qp_base]]),
            int(labels[n, ii, pos[qp_mod]]),
        )
        out.append(
            ModificationTrial(images[ii], (machines[m], machines[n]), qp_base, qp_mod, lab, is_non_ideal(*lab))
        )
    return ModificationResult(tuple(out), aborted)


# ---------------------------------------------------------------------------
# JND


@dataclass(frozen=True)
class JndReport:
    machine: str
    image: str
    first: int | None
    levels: tuple[int, ...]

    @property
    def empty(self) -> bool:
        return self.first is None

    def to_dict(self) -> dict:
        return {"machine": self.machine, "image": self.image, "first_jnd": self.first, "jnd_levels": list(self.levels)}


def jnd_condition(score: float, task: str, t_s: float | None = None) -> bool:
    if task == CLASSIFICATION:
        return score == 0
    if t_s is None:
        raise ValueError("detection JND needs t_s")
    return score < t_s


def locate_jnd(
    scores: Sequence[float],
    task: str = CLASSIFICATION,
    t_s: float | None = None,
    levels: Sequence[int] | None = None,
    machine: str = "",
    image: str = "",
) -> JndReport:
    """Every level meeting the JND condition, and the first one.

    ``scores`` follow the ladder in degradation order. No monotonicity is
    assumed: satisfied levels may follow a JND point. Without ``levels`` the
    report holds indices into ``scores``.
    """
    levels = tuple(range(len(scores))) if levels is None else tuple(levels)
    if len(levels) != len(scores):
        raise ValueError("one score per level required")
    hits = tuple(q for q, s in zip(levels, scores) if jnd_condition(s, task, t_s))
    return JndReport(machine, image, hits[0] if hits else None, hits)
