"""SMR-guided QP selection, rate-SMR curves and Bjøntegaard delta rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import interpolate

from .records import ORIGINAL, RecordError
from .smr import SmrDistribution

CUBIC = "cubic"
PCHIP = "pchip"


def threshold_range(start: float, stop: float, step: float) -> tuple[float, ...]:
    """Inclusive decimal range, e.g. ``threshold_range(0.6, 0.95, 0.05)``."""
    n = int(round((stop - start) / step))
    return tuple(round(start + i * step, 10) for i in range(n + 1))


DEFAULT_THRESHOLDS = threshold_range(0.6, 0.95, 0.05)


@dataclass(frozen=True)
class ThresholdSet:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("threshold set is empty")
        if any(not 0.0 < v <= 1.0 for v in vals):
            raise ValueError(f"SMR thresholds must lie in (0, 1], got {vals}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError(f"SMR thresholds must be strictly increasing, got {vals}")

    @classmethod
    def parse(cls, text: str) -> "ThresholdSet":
        """``0.6:0.95:0.05`` (start:stop:step) or a comma-separated list."""
        text = text.strip()
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            return cls(threshold_range(start, stop, step))
        return cls(tuple(float(p) for p in text.split(",") if p.strip()))

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class QpDecision:
    image: str
    threshold: float
    base_qp: int
    chosen_qp: int
    fallback: bool


def select_base_qp(distribution: SmrDistribution | Mapping[int, float], threshold: float) -> int:
    """Most-degraded coded level whose mean SMR reaches the threshold.

    If no level qualifies, the level whose mean is closest to the threshold
    (least degraded on ties).
    """
    means = distribution.as_dict() if isinstance(distribution, SmrDistribution) else dict(distribution)
    coded = sorted((q, v) for q, v in means.items() if q != ORIGINAL)
    if not coded:
        raise ValueError("distribution has no coded levels")
    qualifying = [q for q, v in coded if v >= threshold]
    if qualifying:
        return qualifying[-1]
    best_q, best_gap = coded[0][0], abs(coded[0][1] - threshold)
    for q, v in coded[1:]:
        gap = abs(v - threshold)
        if gap < best_gap:
            best_q, best_gap = q, gap
    return best_q


def select_qp(
    image: str,
    threshold: float,
    base_qp: int,
    predicted: Mapping[int, float],
    ladder: Sequence[int],
) -> QpDecision:
    """Scan from the most degraded level back to ``base_qp``; take the first
    level whose predicted SMR reaches the threshold, else fall back to ``base_qp``."""
    ladder = list(ladder)
    if base_qp not in ladder:
        raise ValueError(f"base QP {base_qp} not on the ladder")
    span = ladder[ladder.index(base_qp) :]
    missing = [q for q in span if q not in predicted]
    if missing:
        raise RecordError(f"missing predicted SMR for image {image!r} at QPs {missing}")
    for qp in reversed(span):
        if predicted[qp] >= threshold:
            return QpDecision(image, threshold, base_qp, qp, False)
    return QpDecision(image, threshold, base_qp, base_qp, True)


def constant_qp_decisions(images: Sequence[str], thresholds: Sequence[float], distribution) -> list[QpDecision]:
    """Every image coded at the distribution-derived base QP."""
    out = []
    for t in thresholds:
        qb = select_base_qp(distribution, t)
        out.extend(QpDecision(img, t, qb, qb, False) for img in images)
    return out


def guided_decisions(
    images: Sequence[str],
    thresholds: Sequence[float],
    distribution,
    smr_by_image: Mapping[str, Mapping[int, float]],
    ladder: Sequence[int],
) -> list[QpDecision]:
    """Per-image decisions from a source of (predicted or ground-truth) SMR values."""
    out = []
    for t in thresholds:
        qb = select_base_qp(distribution, t)
        out.extend(select_qp(img, t, qb, smr_by_image[img], ladder) for img in images)
    return out


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    mean_bpp: float
    mean_smr: float


@dataclass(frozen=True)
class RateSmrCurve:
    label: str
    points: tuple[CurvePoint, ...]

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.mean_bpp for p in self.points])

    @property
    def smrs(self) -> np.ndarray:
        return np.array([p.mean_smr for p in self.points])

    @classmethod
    def from_arrays(cls, label: str, rates: Sequence[float], smrs: Sequence[float], thresholds=None) -> "RateSmrCurve":
        thresholds = range(len(rates)) if thresholds is None else thresholds
        return cls(label, tuple(CurvePoint(float(t), float(r), float(s)) for t, r, s in zip(thresholds, rates, smrs)))


def build_curve(
    decisions: Sequence[QpDecision],
    bitrates: Mapping[tuple[str, int], object],
    actual_smr: Mapping[str, object],
    thresholds: Sequence[float],
    label: str,
) -> RateSmrCurve:
    """Mean bpp and mean ground-truth SMR of the chosen variants, per threshold."""
    by_t: dict[float, list[QpDecision]] = {}
    for d in decisions:
        by_t.setdefault(d.threshold, []).append(d)
    points = []
    for t in thresholds:
        group = sorted(by_t.get(t, []), key=lambda d: d.image)
        if not group:
            raise ValueError(f"no decisions for threshold {t}")
        rates, smrs = [], []
        for d in group:
            rec = bitrates.get((d.image, d.chosen_qp))
            if rec is None:
                raise RecordError(f"missing bitrate for image {d.image!r} at qp {d.chosen_qp}")
            rates.append(getattr(rec, "bpp", rec))
            try:
                smrs.append(actual_smr[d.image][d.chosen_qp])
            except KeyError:
                raise RecordError(f"missing SMR for image {d.image!r} at qp {d.chosen_qp}") from None
        points.append(CurvePoint(t, float(np.mean(rates)), float(np.mean(smrs))))
    return RateSmrCurve(label, tuple(points))


# ---------------------------------------------------------------------------
# BD-rate


@dataclass(frozen=True)
class BdRateResult:
    anchor: str
    test: str
    bd_rate_percent: float
    smr_overlap: tuple[float, float]
    mean_log_diff: float

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "test": self.test,
            "bd_rate_percent": self.bd_rate_percent,
            "smr_overlap": list(self.smr_overlap),
        }


def prepare_curve(curve: RateSmrCurve) -> tuple[np.ndarray, np.ndarray]:
    """Sort by SMR and merge exact-duplicate SMR values by averaging log10 rate."""
    smr = curve.smrs
    rate = curve.rates
    if np.any(rate <= 0):
        raise ValueError(f"curve {curve.label!r} has non-positive rates")
    log_rate = np.log10(rate)
    uniq = np.unique(smr)
    merged = np.array([log_rate[smr == s].mean() for s in uniq])
    if len(uniq) < 4:
        raise ValueError(f"curve {curve.label!r} has fewer than 4 distinct SMR points")
    return uniq, merged


def _integrals(q, lr, lo, hi, mode):
    if mode == CUBIC:
        poly = np.polyfit(q, lr, 3)
        p_int = np.polyint(poly)
        return np.polyval(p_int, hi) - np.polyval(p_int, lo)
    if mode == PCHIP:
        return interpolate.PchipInterpolator(q, lr).integrate(lo, hi)
    raise ValueError(f"unknown BD-rate mode {mode!r}")


def bd_rate(anchor: RateSmrCurve, test: RateSmrCurve, mode: str = CUBIC) -> BdRateResult:
    """Average bitrate difference of ``test`` against ``anchor`` at equal SMR, in percent.

    Cubic fits of log10(rate) over SMR are integrated analytically across
    the overlapping SMR interval. ``mode="pchip"`` swaps in piecewise-cubic
    interpolation.
    """
    qa, ra = prepare_curve(anchor)
    qt, rt = prepare_curve(test)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError(
            f"SMR ranges of {anchor.label!r} [{qa.min():.4g}, {qa.max():.4g}] and "
            f"{test.label!r} [{qt.min():.4g}, {qt.max():.4g}] do not overlap"
        )
    int_a = _integrals(qa, ra, lo, hi, mode)
    int_t = _integrals(qt, rt, lo, hi, mode)
    avg = float((int_t - int_a) / (hi - lo))
    return BdRateResult(anchor.label, test.label, (10**avg - 1) * 100, (float(lo), float(hi)), avg)
