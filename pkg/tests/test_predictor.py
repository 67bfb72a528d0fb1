import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smrkit.predictor import (
    BASELINE,
    DIFFERENCE,
    MlpRegressor,
    SmrDataset,
    TrainingConfig,
    TrainingDiverged,
    build_dataset,
    correlation_study,
    feature_difference,
    fit_correlation,
    gradient_check,
    load_model,
    mean_absolute_error,
    mlp_forward,
    predict_dataset,
    predict_smr,
    save_model,
    train,
)
from smrkit.records import ORIGINAL
from smrkit.rng import substream
from smrkit.smr import SmrType, annotate
from smrkit.synthetic import EXTRACTOR, classification_fixture, cosine_target_dataset

# --- feature difference ------------------------------------------------------


def test_cosine_examples():
    assert feature_difference([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0, abs=1e-15)
    assert feature_difference([1, 0], [0, 1]) == 0.0
    assert feature_difference([1, 0], [1, 1]) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ValueError, match="zero-norm"):
        feature_difference([0, 0], [1, 1])
    with pytest.raises(ValueError):
        feature_difference([1, 0, 0], [1, 1])


vec = st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(vec, vec, st.floats(0.01, 100))
def test_cosine_properties(a, b, lam):
    d = feature_difference(a, b)
    assert -1 <= d <= 1
    assert d == pytest.approx(feature_difference(b, a), abs=1e-12)
    assert feature_difference(a, a) == pytest.approx(1.0, abs=1e-12)
    assert feature_difference([lam * x for x in a], b) == pytest.approx(d, abs=1e-9)


# --- correlation -------------------------------------------------------------


def test_fit_recovers_known_cubic():
    d = np.linspace(0.2, 1.0, 25)
    coeffs = (0.7, -1.2, 1.5, -0.1)
    s = np.polyval(coeffs, d)
    fit = fit_correlation(d, s)
    assert np.sqrt(np.mean((np.asarray(fit.coefficients) - coeffs) ** 2)) < 1e-9


def test_fit_constant_smr():
    fit = fit_correlation([0.1, 0.4, 0.6, 0.9], [0.5] * 4)
    assert np.allclose(fit.coefficients, [0, 0, 0, 0.5], atol=1e-12)
    assert not fit.spearman_defined
    assert fit.to_dict()["spearman_defined"] is False


def test_fit_monotone_spearman_one():
    d = [0.95, 0.9, 0.8, 0.7, 0.5]
    s = [1.0, 0.9, 0.6, 0.5, 0.1]
    fit = fit_correlation(d, s)
    assert fit.spearman == pytest.approx(1.0)
    assert fit.pearson > 0.9


def test_fit_needs_four_distinct_values():
    with pytest.raises(ValueError):
        fit_correlation([0.1, 0.1, 0.5, 0.9], [1, 1, 0.5, 0.1])


def test_correlation_study_on_fixture():
    fx = classification_fixture(n_machines=4, n_images=10, seed=1)
    tables = annotate(fx.manifest, fx.perceptions, SmrType("classification", k=1))
    study = correlation_study(fx.features, tables, [EXTRACTOR])
    assert len(study.pooled.d_values) == 10 * 20
    # lower similarity goes with lower SMR on this fixture
    assert study.pooled.spearman > 0.3


# --- forward pass ------------------------------------------------------------


def test_zero_model_predicts_zero():
    m = MlpRegressor.zeros((4, 8, 1))
    assert mlp_forward(m, np.ones(4)) == 0.0


def test_hand_computed_linear_layer():
    m = MlpRegressor((2, 1), [np.array([[1.0], [0.0]])], [np.array([0.25])])
    assert mlp_forward(m, [0.5, 0.9]) == 0.75
    assert mlp_forward(m, [2.0, 0.0]) == 1.0  # clipped
    assert mlp_forward(m, [-2.0, 0.0]) == 0.0


def test_hand_computed_hidden_layer():
    # hidden = relu([x0 - x1, x1 - x0]) ; out = 0.5*h0 + 0.25*h1 + 0.1
    w0 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    m = MlpRegressor((2, 2, 1), [w0, np.array([[0.5], [0.25]])], [np.zeros(2), np.array([0.1])])
    assert mlp_forward(m, [0.6, 0.2]) == pytest.approx(0.3, abs=1e-15)
    assert mlp_forward(m, [0.2, 0.6]) == pytest.approx(0.2, abs=1e-15)


def test_forward_deterministic_and_shape_checked():
    m = MlpRegressor.init((6, 12, 1), substream(0, "t"))
    x = np.linspace(-1, 1, 6)
    assert mlp_forward(m, x) == mlp_forward(m, x)
    with pytest.raises(ValueError):
        mlp_forward(m, np.ones(5))


def test_invalid_models_rejected():
    with pytest.raises(ValueError):
        MlpRegressor.zeros((4, 2))
    with pytest.raises(ValueError):
        MlpRegressor((2, 1), [np.array([[np.nan], [0.0]])], [np.zeros(1)])
    with pytest.raises(ValueError):
        MlpRegressor.zeros((2, 1), kind="other")


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.integers(0, 1000))
def test_predictions_in_unit_interval(x, seed):
    m = MlpRegressor.init((4, 8, 1), substream(seed, "t"))
    assert 0.0 <= mlp_forward(m, x) <= 1.0


# --- gradients ---------------------------------------------------------------


def test_gradient_check_4_8_1():
    rng = substream(1, "gc")
    m = MlpRegressor.init((4, 8, 1), rng)
    x = rng.normal(size=(8, 4))
    y = rng.uniform(0, 1, size=8)
    assert gradient_check(m, x, y) < 1e-4


def test_gradient_check_linear_squared():
    rng = substream(2, "gc")
    m = MlpRegressor.init((4, 1), rng)
    x = rng.normal(size=(8, 4))
    y = rng.normal(size=8)
    assert gradient_check(m, x, y, loss="squared") < 1e-7


def test_gradient_check_dead_rectifier():
    rng = substream(3, "gc")
    m = MlpRegressor.init((4, 8, 1), rng)
    m.biases[0][:] = -100.0  # every hidden unit is dead
    x = rng.normal(size=(8, 4))
    err = gradient_check(m, x, rng.uniform(size=8))
    assert math.isfinite(err) and err < 1e-4


# --- training ----------------------------------------------------------------


def _constant_dataset(n=32, value=0.6):
    rng = np.random.default_rng(0)
    return SmrDataset(
        tuple(f"i{i}" for i in range(n)), (ORIGINAL, 32, 37, 42), rng.uniform(0, 1, size=(n, 4, 1)), np.full((n, 4), value)
    )


def test_constant_target_is_learned():
    ds = _constant_dataset()
    cfg = TrainingConfig(learning_rate=1e-3, epochs=200, batch_size=16, hidden=(8,))
    assert cfg.layer_sizes(1) == (2, 8, 1)
    res = train(ds, cfg)
    assert mean_absolute_error(res.model, ds) < 1e-3


def test_loss_halves_on_cosine_toy():
    ds = cosine_target_dataset(n_images=100, seed=1)
    res = train(ds, TrainingConfig(learning_rate=1e-3, epochs=100))
    assert len(res.loss_trace) == 100
    assert res.loss_trace[-1] <= 0.5 * res.loss_trace[0]


def test_default_learning_rate():
    assert TrainingConfig().learning_rate == 1e-4


def test_training_is_bit_reproducible():
    ds = cosine_target_dataset(n_images=30, seed=2)
    for kind in (BASELINE, DIFFERENCE):
        cfg = TrainingConfig(kind=kind, epochs=5, seed=11)
        a, b = train(ds, cfg), train(ds, cfg)
        assert a.loss_trace == b.loss_trace
        assert all(np.array_equal(p, q) for p, q in zip(a.model.params(), b.model.params()))


def test_divergence_is_reported():
    ds = _constant_dataset()
    ds.features[0, 0, 0] = 1e200
    linear = MlpRegressor((2, 1), [np.ones((2, 1))], [np.zeros(1)])
    with pytest.raises(TrainingDiverged, match="epoch 0"), np.errstate(over="ignore"):
        train(ds, TrainingConfig(epochs=2, loss="squared"), model=linear)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainingConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainingConfig(kind="other")


def test_difference_samples_targets():
    ds = cosine_target_dataset(n_images=5, n_levels=4, seed=0)
    x, y = ds.difference_samples(np.random.default_rng(0))
    assert x.shape == (20, 2 * ds.dim)
    d = ds.dim
    for row, target in zip(x, y):
        a = next((i, l) for i in range(5) for l in range(4) if np.array_equal(ds.features[i, l], row[:d]))
        b = next(l for l in range(4) if np.array_equal(ds.features[a[0], l], row[d:]))
        assert target == abs(ds.smr[a] - ds.smr[a[0], b])


# --- prediction --------------------------------------------------------------


def test_zero_difference_model_predicts_one():
    m = MlpRegressor.zeros((6, 12, 1), kind=DIFFERENCE)
    assert predict_smr(m, [1, 2, 3], [3, 2, 1]) == 1.0


def test_baseline_passes_output_through():
    m = MlpRegressor((4, 1), [np.zeros((4, 1))], [np.array([0.73])])
    assert predict_smr(m, [1, 2], [3, 4]) == pytest.approx(0.73, abs=1e-15)
    with pytest.raises(ValueError):
        predict_smr(m, [1, 2, 3], [1, 2, 3])


def test_difference_model_near_one_on_identity():
    ds = cosine_target_dataset(n_images=300, seed=3)
    res = train(ds, TrainingConfig(kind=DIFFERENCE, learning_rate=1e-3, epochs=60))
    for i in range(10):
        ref = ds.features[i, 0]
        assert predict_smr(res.model, ref, ref) == pytest.approx(1.0, abs=0.1)


def test_predict_dataset_matches_single_predictions():
    ds = cosine_target_dataset(n_images=3, n_levels=4, seed=4)
    for kind in (BASELINE, DIFFERENCE):
        m = MlpRegressor.init(TrainingConfig().layer_sizes(ds.dim), substream(0, "x"), kind)
        grid = predict_dataset(m, ds)
        for i in range(3):
            for l in range(4):
                assert grid[i, l] == pytest.approx(predict_smr(m, ds.features[i, 0], ds.features[i, l]), abs=1e-15)


def test_build_dataset_from_records():
    fx = classification_fixture(n_machines=3, n_images=4, seed=5)
    tables = annotate(fx.manifest, fx.perceptions, SmrType("classification", k=1))
    ds = build_dataset(fx.features, EXTRACTOR, tables)
    assert ds.features.shape == (4, 21, 8)
    assert np.all(ds.smr[:, 0] == 1.0)


def test_checkpoint_roundtrip(tmp_path):
    cfg = TrainingConfig(kind=DIFFERENCE, hidden=(5,))
    m = MlpRegressor.init(cfg.layer_sizes(3), substream(0, "ck"), DIFFERENCE)
    save_model(tmp_path / "m.json", m, cfg)
    m2, cfg2 = load_model(tmp_path / "m.json")
    assert cfg2 == cfg and m2.kind == DIFFERENCE
    assert all(np.array_equal(p, q) for p, q in zip(m.params(), m2.params()))
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_model(tmp_path / "bad.json")
