"""Chromophore inversion, trial segmentation, polyphase resampling, scaling."""

import pickle

import numpy as np
import pytest
from helpers import build_pairs
from numpy.testing import assert_allclose, assert_array_equal

from hdnirs.core import Event, NumericalError, TrialFeatures, ValidationError
from hdnirs.features import (ExtinctionTable, assemble_features,
                             chromophore_forward, pair_transforms,
                             resample_kernel, resample_trial, segment_trials,
                             to_chromophores, zscore_apply, zscore_fit)


def make_trial(x, label=0, trial_id=0, block=0, task_set=0, condition=0):
    return TrialFeatures(x=np.asarray(x, float), label=label, session_id="s",
                         trial_id=trial_id, block=block, task_set=task_set,
                         condition=condition)


def test_pair_transform_hand_values():
    m = build_pairs([(0.0, 0.0), (40.0, 0.0)])  # 30 mm = 3 cm pairs
    fwd, inv = pair_transforms(m)
    row680 = np.array([0.2906, 2.4078]) * 3.0 * 6.0
    row850 = np.array([1.0580, 0.6913]) * 3.0 * 6.0
    for p in range(2):
        assert_allclose(fwd[p, 0], row680, atol=1e-12)
        assert_allclose(fwd[p, 1], row850, atol=1e-12)
        assert_allclose(inv[p] @ fwd[p], np.eye(2), atol=1e-12)


def test_mbll_round_trip():
    rng = np.random.default_rng(0)
    m = build_pairs([(0.0, 0.0), (40.0, 0.0), (80.0, 0.0)])
    conc = 1e-3 * rng.standard_normal((50, 3, 2))
    od = chromophore_forward(conc, m)
    assert od.shape == (50, 6)
    back = to_chromophores(od, m)
    assert_allclose(back, conc, atol=1e-10)


def test_extinction_table_contract():
    t = ExtinctionTable()
    assert t.row(680.0) == (0.2906, 2.4078)
    with pytest.raises(ValidationError, match="705"):
        t.row(705.0)
    with pytest.raises(ValidationError, match="positive"):
        ExtinctionTable(dpf=0.0)
    with pytest.raises(TypeError):
        t.coefficients[680.0] = (1.0, 1.0)
    clone = pickle.loads(pickle.dumps(t))
    assert dict(clone.coefficients) == dict(t.coefficients)
    assert clone.dpf == t.dpf


def test_degenerate_extinction_rejected():
    m = build_pairs([(0.0, 0.0)])
    flat = ExtinctionTable(coefficients={680: (1.0, 2.0), 850: (1.0, 2.0)})
    with pytest.raises(NumericalError, match="pair 0"):
        pair_transforms(m, flat)


def test_segment_trials_window_and_order():
    stream = np.arange(40.0)[:, None] * np.array([1.0, 10.0])
    events = (Event(sample=10, condition=0, block=0, task_set=0),
              Event(sample=30, condition=2, block=1, task_set=1))
    segs = segment_trials(stream, events, fs=2.0, window_s=(-1.0, 2.0))
    assert [k for k, _, _ in segs] == [0, 1]
    seg = segs[0][2]
    assert seg.shape == (2, 6)  # lo -2, hi +4 at fs 2
    assert_array_equal(seg[0], np.arange(8.0, 14.0))
    assert_array_equal(seg[1], 10.0 * np.arange(8.0, 14.0))


def test_segment_trials_skips_out_of_bounds():
    stream = np.zeros((20, 1))
    events = (Event(sample=1, condition=0, block=0, task_set=0),
              Event(sample=10, condition=0, block=0, task_set=0),
              Event(sample=19, condition=0, block=0, task_set=0))
    with pytest.warns(UserWarning) as rec:
        segs = segment_trials(stream, events, fs=1.0, window_s=(-2.0, 2.0))
    assert sorted("trial 0" in str(w.message) or "trial 2" in str(w.message)
                  for w in rec) == [True, True]
    assert [k for k, _, _ in segs] == [1]
    with pytest.raises(ValidationError, match="positive length"):
        segment_trials(stream, events, fs=1.0, window_s=(2.0, 2.0))


def test_resample_kernel_properties():
    h = resample_kernel(10, 349)
    assert h.size == 2 * 10 * 349 + 1
    assert_allclose(h.sum(), 1.0, atol=1e-12)
    assert_allclose(h, h[::-1], atol=1e-16)


def test_resample_constant_preserved():
    x = np.full((3, 384), 7.5)
    y = resample_trial(x, fs=6.98, target_hz=0.2)
    assert y.shape == (3, 12)
    assert_allclose(y, 7.5, atol=1e-3)


def test_resample_lands_on_output_grid():
    # 6.98 Hz to 0.2 Hz is exactly 10/349: output j sits at 5 * j seconds.
    # Reflection leakage spans the kernel half width, 10 output samples, so
    # the exact-grid check applies to the interior of a long segment.
    fs, f = 6.98, 0.02
    t = np.arange(3840) / fs
    x = np.sin(2 * np.pi * f * t)
    y = resample_trial(x, fs, 0.2)
    assert y.size == 111  # ceil(3840 * 10 / 349)
    expect = np.sin(2 * np.pi * f * 5.0 * np.arange(111))
    assert_allclose(y[12:-12], expect[12:-12], atol=1e-4)
    ramp = resample_trial(np.arange(3840.0), fs, 0.2)
    assert_allclose(ramp[12:-12], 34.9 * np.arange(111)[12:-12], atol=1e-3)


def test_resample_integer_ratio_and_validation():
    fs = 1.0
    t = np.arange(100) / fs
    x = np.sin(2 * np.pi * 0.01 * t)
    y = resample_trial(x, fs, 0.5)
    assert y.size == 50
    assert_allclose(y[10:-10], x[::2][10:-10], atol=1e-3)
    with pytest.raises(ValidationError, match="too short"):
        resample_trial(np.zeros(300), 6.98, 0.2)  # needs > 349 samples


def test_assemble_features_contrast_and_labels():
    arrs = []
    for idx, cond in enumerate((0, 1, 2, 0)):
        ev = Event(sample=0, condition=cond, block=idx, task_set=idx % 2)
        arrs.append((idx, ev, np.full((3, 2, 4), float(idx))))
    trials = assemble_features("ses-00", arrs, contrast=(0, 2))
    assert [t.trial_id for t in trials] == [0, 2, 3]
    assert [t.label for t in trials] == [0, 1, 0]
    assert trials[0].x.shape == (3, 8)
    assert trials[0].flat.shape == (24,)


def test_assemble_features_validation():
    ev = Event(sample=0, condition=0, block=0, task_set=0)
    good = (0, ev, np.zeros((2, 2, 3)))
    with pytest.raises(ValidationError, match="duplicate trial id 0"):
        assemble_features("s", [good, good])
    with pytest.raises(ValidationError, match="selects no trials"):
        assemble_features("s", [(0, Event(sample=0, condition=1, block=0,
                                          task_set=0), np.zeros((2, 2, 3)))])
    with pytest.raises(ValidationError, match="distinct"):
        assemble_features("s", [good], contrast=(1, 1))
    with pytest.raises(ValidationError, match="channels, 2, time"):
        assemble_features("s", [(0, ev, np.zeros((2, 3)))])


def test_zscore_fit_population_stats():
    a = make_trial([[0.0, 2.0]], label=0, trial_id=0)
    b = make_trial([[4.0, 2.0]], label=1, trial_id=1, condition=2)
    with pytest.warns(UserWarning, match="1 features have zero variance"):
        mu, sigma = zscore_fit([a, b])
    assert_array_equal(mu, [2.0, 2.0])
    assert_array_equal(sigma, [2.0, 1.0])  # ddof 0; zero variance forced to 1
    z = zscore_apply(a, mu, sigma)
    assert_array_equal(z.flat, [-1.0, 0.0])
    assert z.label == a.label and z.trial_id == a.trial_id


def test_zscore_validation():
    a = make_trial([[0.0, 2.0]])
    with pytest.raises(ValidationError, match="zero trials"):
        zscore_fit([])
    with pytest.raises(ValidationError, match="length"):
        zscore_apply(a, np.zeros(3), np.ones(3))
    with pytest.raises(ValidationError, match="positive"):
        zscore_apply(a, np.zeros(2), np.array([1.0, 0.0]))
