from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from riskwatch.datagen import Kind
from riskwatch.preprocess import (
    FeatureMatrix, InsufficientDataError, MissingDataError, SampleSet, apply_normalizer,
    clean_outliers, extract_features, fill_missing, fit_normalizer, make_samples, prepare,
    raw_column,
)
from riskwatch.taxonomy import N_RISK_TYPES

nan = np.nan


def fm(*columns, names=None) -> FeatureMatrix:
    values = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    stamps = np.datetime64("2021-01-01") + np.arange(values.shape[0])
    names = names or [f"f{j}" for j in range(values.shape[1])]
    return FeatureMatrix(stamps, names, values)


def price_matrix(close, volume=None) -> FeatureMatrix:
    cols, names = [close], [raw_column(Kind.COMMODITY, "C", "close")]
    if volume is not None:
        cols.append(volume)
        names.append(raw_column(Kind.COMMODITY, "C", "volume"))
    return fm(*cols, names=names)


# -- clean_outliers ---------------------------------------------------------

def test_outlier_hundred_flagged():
    out = clean_outliers(fm([1, 1, 1, 1, 100]), 3.0)
    assert out.missing_mask[:, 0].tolist() == [False] * 4 + [True]
    assert out.values[:4, 0].tolist() == [1, 1, 1, 1]


def test_outlier_by_hand_mad():
    # median 3, |dev| = [2,1,0,1,2,27] -> MAD 1.5, robust scale 1.4826*1.5
    col = [1, 2, 3, 4, 5, 30]
    z = np.abs(np.array(col) - 3.5) / (1.4826 * 1.5)  # median of 6 values is 3.5, MAD 1.5
    out = clean_outliers(fm(col), 3.0)
    assert out.missing_mask[:, 0].tolist() == (z > 3.0).tolist()
    assert out.missing_mask[:, 0].tolist() == [False] * 5 + [True]


def test_constant_column_unchanged():
    m = fm([5, 5, 5, 5])
    assert clean_outliers(m, 0.1).equals(m)


def test_within_threshold_identity():
    m = fm([1.0, 1.1, 0.9, 1.05], [3, 2, 1, 2])
    assert clean_outliers(m, 10.0).equals(m)


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_outlier_threshold_must_be_positive(z):
    with pytest.raises(ValueError):
        clean_outliers(fm([1, 2]), z)


@given(arrays(float, st.integers(3, 30), elements=st.floats(-1e6, 1e6)), st.floats(0.5, 10))
def test_outliers_only_add_missing(col, z):
    m = fm(col)
    out = clean_outliers(m, z)
    keep = ~out.missing_mask
    assert np.array_equal(out.values[keep], m.values[keep])
    assert (out.missing_mask >= m.missing_mask).all()


# -- fill_missing -----------------------------------------------------------

def test_forward_fill_example():
    assert fill_missing(fm([1, nan, nan, 4])).values[:, 0].tolist() == [1, 1, 1, 4]


def test_leading_gap_backfilled():
    out = fill_missing(fm([nan, 2, 3]))
    assert out.values[:, 0].tolist() == [2, 2, 3]
    assert not out.missing_mask.any()


def test_all_missing_column_names_feature():
    with pytest.raises(MissingDataError, match="empty_col"):
        fill_missing(fm([1, 2], [nan, nan], names=["ok", "empty_col"]))


@given(arrays(float, st.tuples(st.integers(1, 20), st.integers(1, 4)),
              elements=st.one_of(st.just(nan), st.floats(-100, 100))))
def test_fill_idempotent_and_order_preserving(values):
    values[0, :] = np.where(np.isnan(values).all(axis=0), 1.0, values[0, :])
    m = fm(*values.T)
    once = fill_missing(m)
    assert once.equals(fill_missing(once))
    assert np.array_equal(once.timestamps, m.timestamps)
    observed = ~np.isnan(values)
    assert np.array_equal(once.values[observed], values[observed])


# -- normaliser -------------------------------------------------------------

def test_normaliser_example():
    m = fm([2, 4, 5])
    p = fit_normalizer(m, range(0, 2))
    assert p.mean[0] == 3.0 and p.std[0] == 1.0
    assert apply_normalizer(m, p).values[2, 0] == 2.0


def test_normaliser_train_rows_mean_zero():
    rng = np.random.default_rng(3)
    m = fm(*rng.normal(5, 3, size=(4, 50)))
    p = fit_normalizer(m, range(0, 40))
    z = apply_normalizer(m, p).values[:40]
    assert np.abs(z.mean(axis=0)).max() < 1e-9


def test_constant_feature_zero_and_flagged():
    m = fm([7, 7, 7], [1, 2, 3])
    p = fit_normalizer(m, range(3))
    assert p.constant.tolist() == [True, False]
    assert apply_normalizer(m, p).values[:, 0].tolist() == [0, 0, 0]


def test_empty_training_range():
    with pytest.raises(ValueError):
        fit_normalizer(fm([1, 2]), range(0, 0))


@given(st.integers(0, 2 ** 32))
def test_normaliser_no_leakage(seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(30, 3))
    a = fm(*values.T)
    perturbed = values.copy()
    perturbed[20:] = rng.normal(100, 50, size=(10, 3))
    b = fm(*perturbed.T)
    pa, pb = fit_normalizer(a, range(20)), fit_normalizer(b, range(20))
    assert np.array_equal(pa.mean, pb.mean) and np.array_equal(pa.std, pb.std)
    np.testing.assert_array_equal(apply_normalizer(a, pa).values[:20], apply_normalizer(b, pb).values[:20])


# -- extract_features -------------------------------------------------------

def test_log_return_example():
    close = [100, 110] + [110] * 23
    feats = extract_features(price_matrix(close, [1000.0 + k for k in range(25)]))
    lr = feats.column("C.log_return")
    assert lr[1] == pytest.approx(math.log(1.1), abs=1e-12)
    assert lr[1] == pytest.approx(0.0953, abs=1e-4)


def test_constant_prices_zero_features():
    feats = extract_features(price_matrix([50.0] * 30, [10.0] * 30))
    for name in ("log_return", "volatility_20", "momentum_5", "momentum_20"):
        assert np.all(feats.column(f"C.{name}") == 0.0)


def test_too_few_rows_for_window():
    with pytest.raises(InsufficientDataError):
        extract_features(price_matrix([1.0 + k for k in range(10)]))


def test_extract_from_records(small_records):
    feats = extract_features(small_records)
    assert not feats.missing_mask.any()
    assert "market.dispersion" in feats.feature_names
    assert "MACRO.policy_rate" in feats.feature_names
    assert "NEWS.sentiment_score" in feats.feature_names


# -- make_samples -----------------------------------------------------------

def test_sample_count_formula():
    m = fm(np.arange(100.0))
    s = make_samples(m, np.zeros((100, N_RISK_TYPES), bool), 30, 30)
    assert len(s) == 40
    assert s.inputs.shape == (40, 30, 1)
    assert not s.labels.any()


def test_event_at_t_plus_one_labels_anchor_t():
    labels = np.zeros((100, N_RISK_TYPES), bool)
    labels[50, 1] = True
    s = make_samples(fm(np.arange(100.0)), labels, 30, 30)
    anchor_rows = np.arange(30, 70)
    hit = s.labels[:, 1].astype(bool)
    assert hit[anchor_rows == 49][0]
    assert not hit[anchor_rows == 50][0]
    # rows (t, t+30] contain 50 iff 20 <= t <= 49
    assert np.array_equal(hit, (anchor_rows >= 20) & (anchor_rows <= 49))


def test_insufficient_rows():
    with pytest.raises(InsufficientDataError):
        make_samples(fm(np.arange(60.0)), np.zeros((60, N_RISK_TYPES), bool), 30, 30)


@given(n=st.integers(10, 80), lookback=st.integers(1, 20), horizon=st.integers(1, 20))
def test_samples_windows_do_not_overlap(n, lookback, horizon):
    if n - lookback - horizon < 1:
        return
    m = fm(np.arange(float(n)))
    s = make_samples(m, np.zeros((n, N_RISK_TYPES), bool), lookback, horizon)
    assert len(s) == n - lookback - horizon
    # the input window ends at the anchor, the label window starts the day after
    assert np.array_equal(s.inputs[:, -1, 0].astype(int), np.arange(lookback, n - horizon))
    assert (s.horizon_end > s.anchor_timestamps).all()
    assert (np.diff(s.anchor_timestamps).astype(int) > 0).all()


def test_sampleset_round_trip(tmp_path):
    labels = np.zeros((50, N_RISK_TYPES), bool)
    labels[40, 0] = True
    s = make_samples(fm(np.arange(50.0), np.linspace(0, 1, 50)), labels, 5, 5)
    s.write(tmp_path / "s")
    back = SampleSet.read(tmp_path / "s")
    assert np.array_equal(back.inputs, s.inputs) and np.array_equal(back.labels, s.labels)
    assert np.array_equal(back.anchor_timestamps, s.anchor_timestamps)
    assert back.feature_names == s.feature_names and back.lookback == 5


def test_feature_matrix_csv_round_trip(tmp_path):
    m = fm([1.5, nan, 3.0], [0.1, 0.2, 0.3])
    m.to_csv(tmp_path / "m.csv")
    assert FeatureMatrix.read_csv(tmp_path / "m.csv").equals(m)


def test_prepare_pipeline(small_records):
    p = prepare(small_records, lookback=10, horizon=5)
    assert not p.features.missing_mask.any()
    assert len(p.samples) == len(p.features) - 15
    assert np.abs(p.features.values[: p.train_rows].mean(axis=0)).max() < 1e-9
