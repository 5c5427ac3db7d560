"""Scoring pipeline tests: oracles, calibration, metrics, CSV round trip."""

import math

import numpy as np
import pytest

from tsgad import scoring as sc
from tsgad.data import (
    DataError,
    TEST,
    VAL,
    TimeSeriesDataset,
    assign_splits,
    synth_generate,
)
from tsgad.model import Detector, ModelConfig


# --- independent oracle -------------------------------------------------------


def _quantile(vals, p):
    """Linear-interpolation order statistic, written from scratch."""
    vals = sorted(float(v) for v in vals)
    k = (len(vals) - 1) * p
    lo = math.floor(k)
    hi = math.ceil(k)
    if lo == hi:
        return vals[int(k)]
    return vals[lo] * (hi - k) + vals[hi] * (k - lo)


def _brute_scores(val_errs, test_errs):
    """A(t) by explicit loops over sensors and heads."""
    m = next(e.shape[0] for e in test_errs if e is not None)
    out = np.full(m, -np.inf)
    for head_val, head_test in zip(val_errs, test_errs):
        if head_test is None:
            continue
        n = head_test.shape[1]
        for i in range(n):
            med = _quantile(head_val[:, i], 0.5)
            iqr = _quantile(head_val[:, i], 0.75) - _quantile(head_val[:, i], 0.25)
            denom = max(iqr, 1e-6)
            for t in range(m):
                out[t] = max(out[t], (head_test[t, i] - med) / denom)
    return out


def _pipeline_scores(val_pred, val_recon, test_pred, test_recon, times_v, times_t):
    val = sc.ErrSeries(times_v, val_pred, val_recon)
    test = sc.ErrSeries(times_t, test_pred, test_recon)
    stats = sc.robust_stats(val)
    return sc.aggregate(sc.robust_normalize(test, stats))


def test_pipeline_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(2, 6))
        mv = int(rng.integers(5, 30))
        mt = int(rng.integers(3, 20))
        vp = np.abs(rng.normal(size=(mv, n)))
        vr = np.abs(rng.normal(size=(mv, n)))
        tp_ = np.abs(rng.normal(size=(mt, n)))
        tr_ = np.abs(rng.normal(size=(mt, n)))
        # every third trial drops one head
        if trial % 3 == 1:
            vr = tr_ = None
        if trial % 3 == 2:
            vp = tp_ = None
        got = _pipeline_scores(vp, vr, tp_, tr_, np.arange(mv), np.arange(mt))
        want = _brute_scores((vp, vr), (tp_, tr_))
        assert np.max(np.abs(got - want)) <= 1e-12


def test_median_iqr_worked_example():
    val = sc.ErrSeries(np.arange(5), np.array([[1.0], [2.0], [3.0], [4.0], [5.0]]), None)
    stats = sc.robust_stats(val)
    assert stats.pred_med[0] == 3.0 and stats.pred_iqr[0] == 2.0
    test = sc.ErrSeries(np.array([0]), np.array([[5.0]]), None)
    scores = sc.robust_normalize(test, stats)
    assert scores.pred[0, 0] == 1.0
    # an error equal to the median normalizes to zero
    mid = sc.robust_normalize(sc.ErrSeries(np.array([0]), np.array([[3.0]]), None), stats)
    assert mid.pred[0, 0] == 0.0


def test_iqr_floor_on_constant_errors():
    val = sc.ErrSeries(np.arange(4), np.full((4, 1), 2.0), None)
    stats = sc.robust_stats(val)
    assert stats.pred_iqr[0] == 0.0
    s = sc.robust_normalize(sc.ErrSeries(np.array([0]), np.array([[2.0 + 1e-6]]), None), stats)
    assert abs(s.pred[0, 0] - 1.0) < 1e-9  # divided by the 1e-6 floor


def test_aggregate_examples():
    scores = sc.ErrSeries(
        np.arange(2),
        np.array([[-1.0, 2.3], [-0.5, -0.2]]),
        np.array([[-2.0, 0.1], [-3.0, -1.0]]),
    )
    assert np.array_equal(sc.aggregate(scores), [2.3, -0.2])
    only_recon = sc.ErrSeries(np.arange(2), None, np.array([[0.7, 0.1], [0.2, 0.4]]))
    assert np.array_equal(sc.aggregate(only_recon), [0.7, 0.4])
    with pytest.raises(DataError):
        sc.aggregate(sc.ErrSeries(np.arange(2), None, None))


def test_threshold_and_verdicts():
    assert sc.calibrate_threshold(np.array([0.1, 0.9, 0.4])) == 0.9
    assert np.array_equal(sc.verdicts(np.array([0.9, 0.91, 0.89]), 0.9), [0, 1, 0])
    with pytest.raises(DataError):
        sc.calibrate_threshold(np.array([]))


def test_validation_containing_global_max_gives_no_alarms():
    rng = np.random.default_rng(3)
    series = rng.normal(size=50)
    series[20] = series.max() + 1.0  # global max sits inside the calibration part
    threshold = sc.calibrate_threshold(series[:30])
    assert sc.verdicts(series, threshold).sum() == 0


def test_score_monotonicity():
    rng = np.random.default_rng(5)
    val = sc.ErrSeries(np.arange(10), np.abs(rng.normal(size=(10, 3))), None)
    stats = sc.robust_stats(val)
    test = np.abs(rng.normal(size=(6, 3)))
    base = sc.aggregate(sc.robust_normalize(sc.ErrSeries(np.arange(6), test, None), stats))
    bumped = test.copy()
    bumped[2, 1] += 0.5
    after = sc.aggregate(
        sc.robust_normalize(sc.ErrSeries(np.arange(6), bumped, None), stats)
    )
    assert after[2] >= base[2]
    mask = np.ones(6, dtype=bool)
    mask[2] = False
    assert np.array_equal(after[mask], base[mask])


def test_scoring_invariant_to_sensor_order():
    rng = np.random.default_rng(7)
    perm = rng.permutation(4)
    vp = np.abs(rng.normal(size=(12, 4)))
    vr = np.abs(rng.normal(size=(12, 4)))
    tp_ = np.abs(rng.normal(size=(8, 4)))
    tr_ = np.abs(rng.normal(size=(8, 4)))
    a = _pipeline_scores(vp, vr, tp_, tr_, np.arange(12), np.arange(8))
    b = _pipeline_scores(
        vp[:, perm], vr[:, perm], tp_[:, perm], tr_[:, perm], np.arange(12), np.arange(8)
    )
    assert np.allclose(a, b, atol=1e-15)


def test_perfect_model_scores_constant_per_sensor():
    rng = np.random.default_rng(9)
    val = sc.ErrSeries(np.arange(20), np.abs(rng.normal(size=(20, 3))), None)
    stats = sc.robust_stats(val)
    zero = sc.robust_normalize(sc.ErrSeries(np.arange(5), np.zeros((5, 3)), None), stats)
    expect = -stats.pred_med / np.maximum(stats.pred_iqr, sc.IQR_FLOOR)
    assert np.allclose(zero.pred, np.broadcast_to(expect, (5, 3)), atol=1e-15)


# --- metrics -------------------------------------------------------------------


def test_metrics_trivial_cases():
    perfect = sc.metrics(np.array([1, 0, 1]), np.array([1, 0, 1]))
    assert (perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0)
    empty = sc.metrics(np.zeros(5, dtype=int), np.array([1, 1, 0, 0, 0]))
    assert (empty.precision, empty.recall, empty.f1) == (0.0, 0.0, 0.0)
    with pytest.raises(DataError):
        sc.metrics(np.zeros(3), np.zeros(4))


def test_metrics_exact_counts():
    tp, fp, fn, tn = 306261, 1539, 91739, 1000
    verdict = np.concatenate(
        [np.ones(tp + fp, dtype=int), np.zeros(fn + tn, dtype=int)]
    )
    labels = np.concatenate(
        [np.ones(tp, dtype=int), np.zeros(fp, dtype=int), np.ones(fn, dtype=int), np.zeros(tn, dtype=int)]
    )
    m = sc.metrics(verdict, labels)
    assert (m.tp, m.fp, m.fn, m.tn) == (tp, fp, fn, tn)
    assert abs(m.precision - 0.9950) < 1e-12
    assert abs(m.recall - 0.7695) < 1e-12
    assert abs(m.f1 - 0.8678) <= 5e-4


# --- model sweep alignment ------------------------------------------------------


def _tiny_setup(seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(30, 3))
    ds = assign_splits(
        TimeSeriesDataset(["a", "b", "c"], values, labels=np.zeros(30, dtype=np.int64)),
        0.5,
        0.25,
    )
    det = Detector.build(
        ModelConfig(n_sensors=3, window=4, neighbors=1, embed_dim=2, latent=2), seed
    )
    return det, ds


def test_head_outputs_alignment():
    det, ds = _tiny_setup()
    out = sc.head_outputs(det, ds, TEST)
    s, e = 22, 29  # 30 rows, fracs 0.5/0.25 -> test split is rows 22..29
    assert np.array_equal(out.times, np.arange(s + 4, e + 1))
    assert out.pred.shape == out.recon.shape == (len(out.times), 3)
    mask = det.structure()[0]
    for idx, t in enumerate(out.times):
        single = det.forward(ds.values[t - 4 : t].T[None], record=False, mask=mask)
        assert np.allclose(out.pred[idx], single.pred.data[0], atol=1e-12)
        ending_here = det.forward(ds.values[t - 3 : t + 1].T[None], record=False, mask=mask)
        assert np.allclose(out.recon[idx], ending_here.recon.data[0, -1], atol=1e-12)
        assert np.array_equal(out.truth[idx], ds.values[t])


def test_head_outputs_split_too_short():
    det, ds = _tiny_setup()
    short = TimeSeriesDataset(
        ds.sensor_names, ds.values[:10], split=np.array([0] * 6 + [1] * 2 + [2] * 2)
    )
    with pytest.raises(DataError):
        sc.head_outputs(det, short, VAL)


def test_score_dataset_val_is_alarm_free():
    det, ds = _tiny_setup(seed=3)
    res = sc.score_dataset(det, ds, which=VAL)
    assert res.verdict.sum() == 0
    res_test = sc.score_dataset(det, ds, which=TEST)
    assert res_test.scores.shape == res_test.verdict.shape
    assert res_test.labels is not None


def test_score_dataset_ablation_uses_single_head():
    rng = np.random.default_rng(11)
    ds = assign_splits(
        TimeSeriesDataset(["a", "b", "c"], rng.normal(size=(40, 3))), 0.5, 0.25
    )
    det = Detector.build(
        ModelConfig(n_sensors=3, window=4, neighbors=1, embed_dim=2, latent=2, no_pred=True),
        5,
    )
    res = sc.score_dataset(det, ds)
    assert res.a_pred is None and res.a_recon is not None


# --- score CSV -------------------------------------------------------------------


def test_score_csv_round_trip(tmp_path):
    det, ds = _tiny_setup(seed=7)
    res = sc.score_dataset(det, ds)
    p = str(tmp_path / "scores.csv")
    sc.write_scores(p, res, ds.sensor_names)
    threshold, rows = sc.read_scores(p)
    assert threshold == res.threshold  # repr round trip is exact
    assert [r["t"] for r in rows] == list(res.times)
    assert np.array_equal([r["A"] for r in rows], res.scores)
    assert [r["verdict"] for r in rows] == list(res.verdict)
    assert all("label" in r for r in rows)


def test_score_csv_per_sensor_columns(tmp_path):
    det, ds = _tiny_setup(seed=9)
    res = sc.score_dataset(det, ds)
    p = str(tmp_path / "scores.csv")
    sc.write_scores(p, res, ds.sensor_names, per_sensor=True)
    header = open(p).readlines()[1].strip().split(",")
    assert header == (
        ["t", "A", "verdict", "label"]
        + [f"pred_{s}" for s in ds.sensor_names]
        + [f"recon_{s}" for s in ds.sensor_names]
    )


def test_score_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,A,verdict\n")
    with pytest.raises(DataError):
        sc.read_scores(str(p))
    p.write_text("# threshold=0.5\nt,A,verdict\n")
    with pytest.raises(DataError):
        sc.read_scores(str(p))  # headers only, no rows
    p.write_text("# threshold=oops\nt,A,verdict\n1,0.5,0\n")
    with pytest.raises(DataError):
        sc.read_scores(str(p))


def test_scoring_e2e_on_synthetic_labels():
    # not a quality gate, just shape/flow: labels line up with scored times
    ds = synth_generate(4, 400, 0.05, seed=21)
    det = Detector.build(
        ModelConfig(n_sensors=4, window=5, neighbors=2, embed_dim=3, latent=2), 1
    )
    res = sc.score_dataset(det, ds)
    assert res.labels.shape == res.scores.shape
    m = sc.metrics(res.verdict, res.labels)
    assert 0.0 <= m.f1 <= 1.0
