"""Full-reference SMR prediction from precomputed feature vectors.

A small numpy MLP regresses SMR from the concatenation of the reference and
variant embeddings. Two model kinds share the architecture:

* ``baseline`` learns SMR(variant) directly.
* ``difference`` learns |SMR(a) - SMR(b)| between two variants of one image;
  SMR(variant) is then estimated as ``1 - Q(reference, variant)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .records import ORIGINAL, RecordError, atomic_write_text
from .rng import substream

BASELINE = "baseline"
DIFFERENCE = "difference"
MODEL_KINDS = (BASELINE, DIFFERENCE)

CHECKPOINT_FORMAT = "smrkit-mlp"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


def feature_difference(f_variant: Sequence[float], f_reference: Sequence[float]) -> float:
    """Cosine similarity between a variant's features and the reference features."""
    a = np.asarray(f_variant, dtype=float)
    b = np.asarray(f_reference, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# correlation between feature difference and SMR


@dataclass(frozen=True)
class CorrelationFit:
    d_values: tuple[float, ...]
    smr_values: tuple[float, ...]
    coefficients: tuple[float, ...]  # cubic, highest degree first
    pearson: float
    spearman: float

    @property
    def spearman_defined(self) -> bool:
        return not math.isnan(self.spearman)

    def to_dict(self) -> dict:
        return {
            "coefficients": list(self.coefficients),
            "pearson": self.pearson,
            "spearman": self.spearman,
            "spearman_defined": self.spearman_defined,
            "n_points": len(self.d_values),
        }


def fit_correlation(d_values: Sequence[float], smr_values: Sequence[float]) -> CorrelationFit:
    """Cubic least-squares fit of SMR on mean feature difference, plus rank/linear correlation."""
    d = np.asarray(d_values, dtype=float)
    s = np.asarray(smr_values, dtype=float)
    if len(np.unique(d)) < 4:
        raise ValueError("a cubic fit needs at least 4 distinct feature-difference values")
    coeffs = np.polyfit(d, s, 3)
    if np.ptp(s) == 0 or np.ptp(d) == 0:
        pearson = spearman = float("nan")
    else:
        pearson = float(stats.pearsonr(d, s)[0])
        spearman = float(stats.spearmanr(d, s)[0])
    return CorrelationFit(tuple(d.tolist()), tuple(s.tolist()), tuple(coeffs.tolist()), pearson, spearman)


@dataclass(frozen=True)
class CorrelationStudy:
    per_image: dict[str, CorrelationFit]
    pooled: CorrelationFit

    def to_dict(self) -> dict:
        return {"pooled": self.pooled.to_dict(), "images": {k: v.to_dict() for k, v in self.per_image.items()}}


def mean_feature_difference(
    features: Mapping, machines: Sequence[str], image: str, qp: int
) -> float:
    """Cosine similarity to the original, averaged over machines."""
    vals = []
    for m in machines:
        try:
            ref = features[(m, image, ORIGINAL)]
            var = features[(m, image, qp)]
        except KeyError as exc:
            raise RecordError(f"missing features for {exc.args[0]}") from None
        vals.append(feature_difference(_vec(var), _vec(ref)))
    return float(np.mean(vals))


def _vec(x):
    return x.vector if hasattr(x, "vector") else x


def correlation_study(
    features: Mapping,
    tables: Mapping,
    machines: Sequence[str],
    images: Sequence[str] | None = None,
    include_original: bool = False,
) -> CorrelationStudy:
    """Per-image (mean feature difference, SMR) scatter with cubic fits.

    Images with fewer than 4 distinct difference values get no per-image fit
    but still enter the pooled fit.
    """
    images = sorted(tables) if images is None else list(images)
    per_image = {}
    all_d, all_s = [], []
    for image in images:
        table = tables[image]
        ds, ss = [], []
        for qp, v in table.entries:
            if qp == ORIGINAL and not include_original:
                continue
            ds.append(mean_feature_difference(features, machines, image, qp))
            ss.append(v)
        all_d.extend(ds)
        all_s.extend(ss)
        if len(set(ds)) >= 4:
            per_image[image] = fit_correlation(ds, ss)
    return CorrelationStudy(per_image, fit_correlation(all_d, all_s))


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpRegressor:
    """Fully connected net with ReLU between layers and a clipped scalar output."""

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    kind: str = BASELINE

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or self.sizes[-1] != 1:
            raise ValueError(f"layer sizes must end in 1, got {self.sizes}")
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer required")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}, {b.shape}; expected sizes {self.sizes}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, kind: str = BASELINE) -> "MlpRegressor":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(tuple(sizes), weights, biases, kind)

    @classmethod
    def zeros(cls, sizes: Sequence[int], kind: str = BASELINE) -> "MlpRegressor":
        return cls(
            tuple(sizes),
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
            kind,
        )

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward_raw(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Unclipped output for a (batch, input_dim) array and the activations cache."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of length {self.input_dim}, got {x.shape[1]}")
        cache = [x]
        a = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = np.maximum(z, 0.0) if i < last else z
            cache.append(z)
        return a[:, 0], cache

    def backward(self, cache: list, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(dout * raw_output) w.r.t. params, ordered like ``params()``."""
        grads: list[np.ndarray] = []
        delta = dout[:, None]
        n_layers = len(self.weights)
        for i in reversed(range(n_layers)):
            z_prev = cache[i]
            a_prev = z_prev if i == 0 else np.maximum(z_prev, 0.0)
            grads.append(delta.sum(axis=0))
            grads.append(a_prev.T @ delta)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (z_prev > 0)
        grads.reverse()
        return grads

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.forward_raw(x)[0], 0.0, 1.0)


def mlp_forward(model: MlpRegressor, h_plus: Sequence[float]) -> float:
    """Clipped prediction for one concatenated embedding."""
    return float(model(np.asarray(h_plus, dtype=float))[0])


def loss_and_grad(model: MlpRegressor, x: np.ndarray, y: np.ndarray, loss: str = "l1"):
    """Mean loss of the unclipped output and its parameter gradients."""
    raw, cache = model.forward_raw(x)
    diff = raw - y
    n = len(y)
    if loss == "l1":
        value = float(np.mean(np.abs(diff)))
        dout = np.sign(diff) / n  # sign(0) = 0
    elif loss == "squared":
        value = float(0.5 * np.mean(diff**2))
        dout = diff / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, model.backward(cache, dout)


def gradient_check(
    model: MlpRegressor, x: np.ndarray, y: np.ndarray, loss: str = "l1", step: float = 1e-5
) -> float:
    """Max relative error between backprop and central finite differences.

    For the L1 loss, targets sitting within a few steps of the prediction are
    nudged away so no finite difference straddles the |.| kink.
    """
    x = np.asarray(x, dtype=float)
    y = np.array(y, dtype=float)
    if loss == "l1":
        raw, _ = model.forward_raw(x)
        close = np.abs(raw - y) < 1e-3
        y[close] += 1e-2
    _, grads = loss_and_grad(model, x, y, loss)
    worst = 0.0
    for p, g in zip(model.params(), grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_and_grad(model, x, y, loss)[0]
            flat[i] = orig - step
            down = loss_and_grad(model, x, y, loss)[0]
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    kind: str = BASELINE
    learning_rate: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    hidden: tuple[int, ...] | None = None  # default (4d, 4d)
    loss: str = "l1"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")

    def layer_sizes(self, d: int) -> tuple[int, ...]:
        hidden = (4 * d, 4 * d) if self.hidden is None else tuple(self.hidden)
        return (2 * d, *hidden, 1)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = None if self.hidden is None else list(self.hidden)
        return out


@dataclass(frozen=True)
class SmrDataset:
    """Features and SMR labels of every level of every image.

    ``features`` is (images, levels, d) and ``smr`` is (images, levels);
    level 0 is the ORIGINAL.
    """

    images: tuple[str, ...]
    levels: tuple[int, ...]
    features: np.ndarray
    smr: np.ndarray

    def __post_init__(self):
        if self.levels[0] != ORIGINAL:
            raise ValueError("first level must be ORIGINAL")
        n, l = len(self.images), len(self.levels)
        if self.features.shape[:2] != (n, l) or self.smr.shape != (n, l):
            raise ValueError("feature/SMR arrays do not match images x levels")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def subset(self, image_idx: Sequence[int]) -> "SmrDataset":
        idx = list(image_idx)
        return SmrDataset(
            tuple(self.images[i] for i in idx), self.levels, self.features[idx], self.smr[idx]
        )

    def baseline_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """Every (reference ⊕ variant, SMR) pair, ORIGINAL included."""
        n, l, d = self.features.shape
        ref = np.repeat(self.features[:, :1, :], l, axis=1)
        x = np.concatenate([ref, self.features], axis=2).reshape(n * l, 2 * d)
        return x, self.smr.reshape(n * l)

    def difference_samples(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """One random partner level per (image, level): input a ⊕ b, target |SMR(a) - SMR(b)|."""
        n, l, d = self.features.shape
        partner = rng.integers(0, l, size=(n, l))
        rows = np.arange(n)[:, None]
        x = np.concatenate([self.features, self.features[rows, partner]], axis=2).reshape(n * l, 2 * d)
        y = np.abs(self.smr - self.smr[rows, partner]).reshape(n * l)
        return x, y


def build_dataset(
    features: Mapping, extractor: str, tables: Mapping, images: Sequence[str] | None = None
) -> SmrDataset:
    """Assemble an :class:`SmrDataset` from feature records and SMR tables."""
    images = tuple(sorted(tables) if images is None else images)
    if not images:
        raise ValueError("no images")
    levels = tables[images[0]].levels
    feats, smrs = [], []
    for image in images:
        table = tables[image]
        if table.levels != levels:
            raise ValueError(f"table for {image!r} uses a different ladder")
        row = []
        for qp in levels:
            rec = features.get((extractor, image, qp))
            if rec is None:
                raise RecordError(f"missing features for ({extractor}, {image}, qp {qp})")
            row.append(_vec(rec))
        feats.append(row)
        smrs.append([v for _, v in table.entries])
    return SmrDataset(images, levels, np.asarray(feats, dtype=float), np.asarray(smrs, dtype=float))


@dataclass
class TrainResult:
    model: MlpRegressor
    config: TrainingConfig
    loss_trace: list[float] = field(default_factory=list)


def train(dataset: SmrDataset, config: TrainingConfig, model: MlpRegressor | None = None) -> TrainResult:
    """Seeded mini-batch Adam on the mean absolute error.

    Initialization, shuffling and (for the difference model) pair sampling
    each use their own substream of ``config.seed``.
    """
    if len(dataset.images) == 0:
        raise ValueError("empty training set")
    if model is None:
        model = MlpRegressor.init(config.layer_sizes(dataset.dim), substream(config.seed, "init"), config.kind)
    elif model.kind != config.kind or model.input_dim != 2 * dataset.dim:
        raise ValueError("model does not match the training configuration")
    opt = Adam(model.params(), config.learning_rate)
    trace = []
    if config.kind == BASELINE:
        x_all, y_all = dataset.baseline_samples()
    for epoch in range(config.epochs):
        if config.kind == DIFFERENCE:
            x_all, y_all = dataset.difference_samples(substream(config.seed, "pairs", epoch))
        order = substream(config.seed, "batch", epoch).permutation(len(y_all))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            value, grads = loss_and_grad(model, x_all[idx], y_all[idx], config.loss)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            total += value * len(idx)
            opt.step(grads)
        trace.append(total / len(order))
    return TrainResult(model, config, trace)


def predict_smr(model: MlpRegressor, reference: Sequence[float], variant: Sequence[float]) -> float:
    """Predicted SMR of a variant given the reference features."""
    ref = np.asarray(reference, dtype=float)
    var = np.asarray(variant, dtype=float)
    if ref.shape != var.shape or 2 * ref.shape[-1] != model.input_dim:
        raise ValueError(
            f"feature dimension {ref.shape[-1]}/{var.shape[-1]} does not fit a model with input {model.input_dim}"
        )
    out = model(np.concatenate([ref, var]))[0]
    if model.kind == DIFFERENCE:
        out = 1.0 - out
    return float(np.clip(out, 0.0, 1.0))


def predict_dataset(model: MlpRegressor, dataset: SmrDataset) -> np.ndarray:
    """Predicted SMR for every (image, level), shaped like ``dataset.smr``."""
    if 2 * dataset.dim != model.input_dim:
        raise ValueError("dataset dimension does not fit the model")
    x, _ = dataset.baseline_samples()
    out = model(x)
    if model.kind == DIFFERENCE:
        out = 1.0 - out
    return np.clip(out, 0.0, 1.0).reshape(dataset.smr.shape)


def mean_absolute_error(model: MlpRegressor, dataset: SmrDataset, coded_only: bool = False) -> float:
    pred = predict_dataset(model, dataset)
    err = np.abs(pred - dataset.smr)
    if coded_only:
        err = err[:, 1:]
    return float(err.mean())


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path: str | os.PathLike, model: MlpRegressor, config: TrainingConfig | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "sizes": list(model.sizes),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "config": None if config is None else config.to_dict(),
    }
    atomic_write_text(path, json.dumps(payload) + "\n")


def load_model(path: str | os.PathLike) -> tuple[MlpRegressor, TrainingConfig | None]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an SMR model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    model = MlpRegressor(
        tuple(payload["sizes"]),
        [np.asarray(w, dtype=float).reshape(a, b) for w, a, b in zip(payload["weights"], payload["sizes"][:-1], payload["sizes"][1:])],
        [np.asarray(b, dtype=float) for b in payload["biases"]],
        payload["kind"],
    )
    cfg = payload.get("config")
    if cfg is not None:
        if cfg.get("hidden") is not None:
            cfg["hidden"] = tuple(cfg["hidden"])
        cfg = TrainingConfig(**cfg)
    return model, cfg
