"""Independent reference implementations used only by tests.

None of these import the code paths they check.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


# --- detection -------------------------------------------------------------


def frac_iou(a, b) -> Fraction:
    ax, ay, aw, ah = (Fraction(v) for v in a)
    bx, by, bw, bh = (Fraction(v) for v in b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return Fraction(0)
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _greedy_assignment(dets, gts, thr):
    """dets: [(bbox, conf)], gts: [bbox]. Returns TP flags in visiting order."""
    order = sorted(range(len(dets)), key=lambda i: (-Fraction(dets[i][1]), i))
    used = set()
    flags = []
    for i in order:
        cands = [(frac_iou(dets[i][0], g), -j) for j, g in enumerate(gts) if j not in used]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            best = max(cands)
            used.add(-best[1])
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _exhaustive_assignment(dets, gts, thr):
    """Enumerate every injective partial matching and keep the lexicographically
    best one in confidence order (matched first, then higher IOU, then lower GT index)."""
    order = sorted(range(len(dets)), key=lambda i: (-Fraction(dets[i][1]), i))
    options = []
    for i in order:
        opts = [None] + [j for j, g in enumerate(gts) if frac_iou(dets[i][0], g) >= thr]
        options.append(opts)
    best_key, best_flags = None, None
    for combo in itertools.product(*options):
        chosen = [c for c in combo if c is not None]
        if len(chosen) != len(set(chosen)):
            continue
        key = tuple(
            (0, 0, 0) if c is None else (1, frac_iou(dets[i][0], gts[c]), -c) for i, c in zip(order, combo)
        )
        if best_key is None or key > best_key:
            best_key, best_flags = key, [c is not None for c in combo]
    return best_flags if best_flags is not None else []


def frac_ap(flags, n_gt) -> Fraction:
    """Sum over true positives of the best precision at that recall or beyond."""
    prec = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        prec.append(Fraction(tp, k))
    total = Fraction(0)
    for k, f in enumerate(flags):
        if f:
            total += max(prec[k:])
    return total / n_gt


def oracle_map(compressed, original, grid, conf_threshold, exhaustive=False) -> Fraction | None:
    """mAP over the IOU grid; ``None`` when pseudo-GT is empty.

    ``compressed`` / ``original`` are lists of (bbox, category, confidence).
    """
    gt = [(b, c) for b, c, conf in original if Fraction(conf) > Fraction(conf_threshold)]
    if not gt:
        return None
    assign = _exhaustive_assignment if exhaustive else _greedy_assignment
    cats = sorted({c for _, c in gt})
    per_t = []
    for t in grid:
        thr = Fraction(str(t))
        aps = []
        for cat in cats:
            gts = [b for b, c in gt if c == cat]
            dets = [(b, conf) for b, c, conf in compressed if c == cat]
            aps.append(frac_ap(assign(dets, gts, thr), len(gts)) if dets else Fraction(0))
        per_t.append(sum(aps) / len(aps))
    return sum(per_t) / len(per_t)


# --- scans -----------------------------------------------------------------


def jnd_scan(scores, task, t_s=None):
    hits = []
    for i in range(len(scores)):
        bad = scores[i] == 0 if task == "classification" else scores[i] < t_s
        if bad:
            hits.append(i)
    return (hits[0] if hits else None), hits


def reverse_scan(levels, predicted, base, threshold):
    i = len(levels) - 1
    while i >= 0 and levels[i] >= base:
        if predicted[levels[i]] >= threshold:
            return levels[i], False
        i -= 1
    return base, True


# --- BD-rate ---------------------------------------------------------------


def quadrature_bd_rate(anchor, test, n=200001):
    """Trapezoid integration of the fitted cubics on a fine grid."""
    (qa, ra), (qt, rt) = anchor, test
    pa = np.polyfit(qa, np.log10(ra), 3)
    pt = np.polyfit(qt, np.log10(rt), 3)
    lo, hi = max(min(qa), min(qt)), min(max(qa), max(qt))
    x = np.linspace(lo, hi, n)
    diff = np.polyval(pt, x) - np.polyval(pa, x)
    h = x[1] - x[0]
    integral = h * (diff.sum() - 0.5 * (diff[0] + diff[-1]))
    return (10 ** (integral / (hi - lo)) - 1) * 100
