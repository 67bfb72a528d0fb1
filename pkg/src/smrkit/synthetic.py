"""Synthetic machine libraries for desk-scale experiments.

Each image has a latent quality curve that falls with QP (a sigmoid with an
image-specific knee), optionally with bumps so that some heavier
compressions are judged better than lighter ones. Machines see the curve
shifted by their own robustness offset. Feature vectors are rotated away
from the reference by an angle that grows as the latent quality drops, so
cosine similarity carries the signal a predictor can learn. Bitrates halve
roughly every 6 QPs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import (
    CLASSIFICATION,
    DETECTION,
    ORIGINAL,
    BitrateRecord,
    ClassificationPrediction,
    DatasetManifest,
    Detection,
    FeatureRecord,
    PerceptionRecord,
    QpLadder,
    RecordCollection,
)
from .rng import substream

EXTRACTOR = "encoder"


@dataclass(frozen=True)
class Fixture:
    manifest: DatasetManifest
    perceptions: RecordCollection
    features: RecordCollection
    bitrates: RecordCollection
    latent: np.ndarray  # (images, coded levels) image-level quality


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def latent_quality(n_images: int, levels: np.ndarray, rng: np.random.Generator, bump_fraction: float):
    knee = rng.uniform(levels[0] + 2, levels[-1] + 2, size=n_images)
    width = rng.uniform(1.5, 3.5, size=n_images)
    curve = _sigmoid((knee[:, None] - levels[None, :]) / width[:, None])
    bumped = rng.random(n_images) < bump_fraction
    for i in np.nonzero(bumped)[0]:
        # raise one or two random levels so a heavier QP beats a lighter one
        for j in rng.choice(len(levels), size=int(rng.integers(1, 3)), replace=False):
            curve[i, j] = min(1.0, curve[i, j] + rng.uniform(0.15, 0.35))
    return curve, knee, width


def _features(latent, dim, rng, max_angle=1.3, noise=0.01):
    """Reference vectors on the radius-sqrt(dim) sphere; variants rotate toward a
    shared artifact direction by an angle that grows as quality drops."""
    n, n_levels = latent.shape
    ref = rng.normal(size=(n, dim))
    ref *= np.sqrt(dim) / np.linalg.norm(ref, axis=1)[:, None]
    artifact = rng.normal(size=dim)
    ortho = np.tile(artifact, (n, 1))
    ortho -= (ref @ artifact / dim)[:, None] * ref
    ortho /= np.linalg.norm(ortho, axis=1)[:, None]
    angle = (1.0 - latent) * max_angle
    variants = np.sqrt(dim) * (
        np.cos(angle)[:, :, None] * ref[:, None, :] / np.sqrt(dim) + np.sin(angle)[:, :, None] * ortho[:, None, :]
    )
    variants = variants * (1.0 + noise * rng.normal(size=(n, n_levels, 1)))
    return ref, variants


def _bitrates(n_images, levels, rng):
    base = rng.uniform(0.3, 2.0, size=n_images)
    steps = 2 ** (-1.0 / 6.0) * (1.0 + rng.uniform(-0.03, 0.03, size=(n_images, len(levels) - 1)))
    ratios = np.concatenate([np.ones((n_images, 1)), np.cumprod(steps, axis=1)], axis=1)
    return base[:, None] * ratios * 2 ** (-(levels[0] - 32) / 6.0)


def classification_fixture(
    n_machines: int = 12,
    n_images: int = 200,
    ladder: QpLadder | None = None,
    dim: int = 8,
    n_categories: int = 40,
    bump_fraction: float = 0.4,
    seed: int = 0,
) -> Fixture:
    ladder = ladder or QpLadder.from_range(32, 51)
    levels = np.asarray(ladder.levels, dtype=float)
    machines = tuple(f"m{j:02d}" for j in range(n_machines))
    images = tuple(f"img{i:04d}" for i in range(n_images))
    rng = substream(seed, "fixture", "latent")
    latent, knee, width = latent_quality(n_images, levels, rng, bump_fraction)

    rng = substream(seed, "fixture", "machines")
    offset = rng.normal(0.0, 2.0, size=n_machines)
    # per (machine, image) tolerance plus per-level jitter
    tol = rng.random(size=(n_machines, n_images))
    jitter = 0.08 * rng.normal(size=(n_machines, n_images, len(levels)))
    machine_curve = _sigmoid((knee[None, :, None] + offset[:, None, None] - levels[None, None, :]) / width[None, :, None])
    machine_curve = np.clip(machine_curve + (latent - _sigmoid((knee[:, None] - levels[None, :]) / width[:, None]))[None], 0, 1)
    consistent = (tol[:, :, None] + jitter) < machine_curve

    rng = substream(seed, "fixture", "rankings")
    records = []
    for mi, m in enumerate(machines):
        for ii, img in enumerate(images):
            orig = rng.permutation(n_categories)[:5]
            records.append(PerceptionRecord(m, img, ORIGINAL, ClassificationPrediction(tuple(orig.tolist()))))
            for li, qp in enumerate(ladder.levels):
                if consistent[mi, ii, li]:
                    top1 = int(orig[0])
                else:
                    r = rng.random()
                    if r < 0.35:
                        top1 = int(orig[1])
                    elif r < 0.55:
                        top1 = int(orig[2])
                    elif r < 0.75:
                        top1 = int(orig[int(rng.integers(3, 5))])
                    else:
                        top1 = int(rng.choice([c for c in range(n_categories) if c not in orig]))
                rest = [int(c) for c in orig if c != top1][:4]
                records.append(PerceptionRecord(m, img, qp, ClassificationPrediction((top1, *rest))))

    rng = substream(seed, "fixture", "features")
    ref, variants = _features(latent, dim, rng)
    feats = []
    for ii, img in enumerate(images):
        feats.append(FeatureRecord(EXTRACTOR, img, ORIGINAL, tuple(ref[ii].tolist())))
        for li, qp in enumerate(ladder.levels):
            feats.append(FeatureRecord(EXTRACTOR, img, qp, tuple(variants[ii, li].tolist())))

    rng = substream(seed, "fixture", "bitrates")
    bpp = _bitrates(n_images, levels, rng)
    rates = [
        BitrateRecord(img, qp, float(bpp[ii, li]))
        for ii, img in enumerate(images)
        for li, qp in enumerate(ladder.levels)
    ]
    manifest = DatasetManifest(CLASSIFICATION, ladder, machines, images)
    return Fixture(
        manifest,
        RecordCollection(CLASSIFICATION, records),
        RecordCollection("feature", feats),
        RecordCollection("bitrate", rates),
        latent,
    )


def _jitter_box(box, scale, rng, size=100.0):
    x, y, w, h = box
    dx, dy = rng.normal(0, scale * w), rng.normal(0, scale * h)
    sw, sh = np.exp(rng.normal(0, scale, size=2))
    return (
        float(np.clip(x + dx, 0, size - 1)),
        float(np.clip(y + dy, 0, size - 1)),
        float(max(1.0, w * sw)),
        float(max(1.0, h * sh)),
    )


def detection_fixture(
    n_machines: int = 4,
    n_images: int = 6,
    ladder: QpLadder | None = None,
    n_categories: int = 5,
    seed: int = 0,
) -> Fixture:
    """Small detection library: boxes drift and drop out as QP grows."""
    ladder = ladder or QpLadder((32, 37, 42, 47, 51))
    levels = np.asarray(ladder.levels, dtype=float)
    machines = tuple(f"d{j:02d}" for j in range(n_machines))
    images = tuple(f"img{i:04d}" for i in range(n_images))
    rng = substream(seed, "fixture", "latent")
    latent, _, _ = latent_quality(n_images, levels, rng, 0.3)
    rng = substream(seed, "fixture", "detections")
    records = []
    for m in machines:
        for ii, img in enumerate(images):
            n_obj = int(rng.integers(1, 5))
            objects = []
            for _ in range(n_obj):
                w, h = rng.uniform(8, 40, size=2)
                x, y = rng.uniform(0, 100 - w), rng.uniform(0, 100 - h)
                objects.append(((float(x), float(y), float(w), float(h)), int(rng.integers(n_categories))))
            orig = [Detection(b, c, float(rng.uniform(0.35, 0.99))) for b, c in objects]
            # a low-confidence detection that the pseudo-GT filter drops
            orig.append(Detection(_jitter_box(objects[0][0], 0.3, rng), objects[0][1], float(rng.uniform(0.05, 0.3))))
            records.append(PerceptionRecord(m, img, ORIGINAL, tuple(orig)))
            for li, qp in enumerate(ladder.levels):
                q = latent[ii, li]
                dets = []
                for d in orig:
                    if rng.random() > 0.3 + 0.7 * q:
                        continue
                    conf = float(np.clip(d.confidence * (0.5 + 0.5 * q) + rng.normal(0, 0.05), 0.0, 1.0))
                    dets.append(Detection(_jitter_box(d.bbox, 0.25 * (1 - q) + 0.01, rng), d.category, conf))
                if rng.random() > q:
                    dets.append(
                        Detection(_jitter_box((50, 50, 20, 20), 0.5, rng), int(rng.integers(n_categories)), float(rng.uniform(0, 0.6)))
                    )
                records.append(PerceptionRecord(m, img, qp, tuple(dets)))
    manifest = DatasetManifest(DETECTION, ladder, machines, images)
    return Fixture(manifest, RecordCollection(DETECTION, records), RecordCollection("feature"), RecordCollection("bitrate"), latent)


def cosine_target_dataset(
    n_images: int = 200,
    n_levels: int = 10,
    dim: int = 8,
    slope: float = 1.4,
    intercept: float = -0.4,
    noise: float = 0.02,
    seed: int = 0,
):
    """Features whose SMR label is ``clip(slope * cos(h0, hq) + intercept + noise)``.

    Level 0 is the reference itself. Quality of the coded levels is drawn
    uniformly, so the cosine covers the whole rotation range.
    """
    from .predictor import SmrDataset  # local import keeps synthetic usable without the predictor

    rng = substream(seed, "fixture", "cosine")
    latent = np.concatenate([np.ones((n_images, 1)), rng.uniform(0, 1, size=(n_images, n_levels - 1))], axis=1)
    ref, variants = _features(latent, dim, rng, noise=0.0)
    cos = np.einsum("ild,id->il", variants, ref) / (
        np.linalg.norm(variants, axis=2) * np.linalg.norm(ref, axis=1)[:, None]
    )
    smr = np.clip(slope * cos + intercept + noise * rng.normal(size=cos.shape), 0.0, 1.0)
    levels = (ORIGINAL,) + tuple(range(32, 32 + n_levels - 1))
    images = tuple(f"img{i:04d}" for i in range(n_images))
    return SmrDataset(images, levels, variants, smr)
