"""Robust pooled covariance and bad-channel reconstruction."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hdnirs.core import FormatError, QualityMask, ValidationError
from hdnirs.covariance import (GrandCovariance, fit_imputation,
                               huber_mean_covariance, impute,
                               leave_session_out_covariance, load_covariance,
                               save_covariance, windowed_covariances,
                               with_noise_scale)


def clean_mask(n_windows, n_channels, window_s=5.0):
    return QualityMask(bad_channels=np.array([], int),
                       window_mask=np.zeros((n_windows, n_channels), bool),
                       window_s=window_s)


def make_windows(rng, n_windows, n_channels, scale=1.0):
    c0 = np.eye(n_channels)
    out = []
    for _ in range(n_windows):
        jitter = rng.standard_normal((n_channels, n_channels)) * scale
        c = c0 + 0.5 * (jitter + jitter.T)
        out.append((c, np.zeros((n_channels, n_channels), bool)))
    return out


def test_windowed_covariances_match_numpy():
    rng = np.random.default_rng(0)
    fs, w_s = 2.0, 5.0
    od = rng.standard_normal((47, 3))
    covs = windowed_covariances(od, clean_mask(10, 3), fs, w_s)
    assert len(covs) == 4  # 47 // 10 windows, trailing partial dropped
    for k, (c, m) in enumerate(covs):
        assert_allclose(c, np.cov(od[k * 10:(k + 1) * 10], rowvar=False))
        assert not m.any()


def test_window_mask_propagates_to_entries():
    rng = np.random.default_rng(1)
    od = rng.standard_normal((40, 3))
    # quality windows are 5 samples at fs 1; flag channel 1 in windows 2-3,
    # which overlap the first 10-sample covariance window on its second half
    qmask = np.zeros((8, 3), bool)
    qmask[2:4, 1] = True
    qm = QualityMask(bad_channels=np.array([], int), window_mask=qmask,
                     window_s=5.0)
    covs = windowed_covariances(od, qm, fs=1.0, window_s=10.0)
    m0, m1 = covs[0][1], covs[1][1]
    assert not m0.any()
    assert m1[1].all() and m1[:, 1].all()
    assert not m1[np.ix_([0, 2], [0, 2])].any()


def test_huber_mean_identity_on_identical_windows():
    c = np.array([[2.0, 0.3], [0.3, 1.0]])
    covs = [(c.copy(), np.zeros((2, 2), bool)) for _ in range(5)]
    gc = huber_mean_covariance(covs)
    assert_allclose(gc.cov, c, atol=1e-15)


def test_huber_mean_resists_outlier_window():
    rng = np.random.default_rng(2)
    covs = make_windows(rng, 30, 4, scale=0.01)
    target = np.mean([c for c, _ in covs], axis=0)
    covs.append((np.full((4, 4), 1000.0), np.zeros((4, 4), bool)))
    naive = np.mean([c for c, _ in covs], axis=0)
    gc = huber_mean_covariance(covs)
    assert np.linalg.norm(gc.cov - target) < 0.02
    assert np.linalg.norm(naive - target) > 20.0


def test_huber_mean_masked_entries_excluded():
    rng = np.random.default_rng(3)
    covs = make_windows(rng, 12, 3, scale=0.0)
    # corrupt entry (0, 1) in half the windows but mask it there
    for k in range(6):
        c, m = covs[k]
        c[0, 1] = c[1, 0] = 50.0
        m[0, 1] = m[1, 0] = True
    gc = huber_mean_covariance(covs)
    assert abs(gc.cov[0, 1]) < 1e-12


def test_huber_mean_structural_zeros_and_symmetry():
    rng = np.random.default_rng(4)
    covs = make_windows(rng, 10, 4, scale=0.2)
    mods = np.array([0, 0, 1, 1])
    gc = huber_mean_covariance(covs, module_of_channel=mods)
    assert_array_equal(gc.cov[np.ix_([0, 1], [2, 3])], 0.0)
    assert_array_equal(gc.cov, gc.cov.T)
    assert gc.dispersion >= 0


def test_huber_mean_names_empty_pair():
    rng = np.random.default_rng(5)
    covs = make_windows(rng, 4, 3)
    for _, m in covs:
        m[0, 2] = m[2, 0] = True
    with pytest.raises(ValidationError, match=r"\(0, 2\)"):
        huber_mean_covariance(covs)
    with pytest.raises(ValidationError, match="at least 2"):
        huber_mean_covariance(covs[:1])


def test_leave_session_out_ignores_target_contents():
    rng = np.random.default_rng(6)
    windows = {
        "a": make_windows(rng, 6, 3),
        "b": make_windows(rng, 6, 3),
        "c": make_windows(rng, 6, 3),
    }
    ref = leave_session_out_covariance(windows, "a")
    windows["a"] = [(c + 1e6, m) for c, m in windows["a"]]
    perturbed = leave_session_out_covariance(windows, "a")
    assert ref.cov.tobytes() == perturbed.cov.tobytes()
    assert ref.provenance == ("b", "c")
    with pytest.raises(ValidationError, match="at least 2 sessions"):
        leave_session_out_covariance({"a": windows["a"]}, "a")


def test_imputation_recovers_duplicated_channel():
    rng = np.random.default_rng(7)
    base = rng.standard_normal((600, 3))
    x = np.column_stack([base, base[:, 1]])  # channel 3 duplicates channel 1
    covs = windowed_covariances(x, clean_mask(60, 4), fs=1.0, window_s=10.0)
    gc = huber_mean_covariance(covs)
    model = fit_imputation(gc, bad=np.array([3]))
    corrupted = x.copy()
    corrupted[:, 3] = -99.0
    fixed = impute(corrupted, model)  # no rng: noiseless pass
    err = np.abs(fixed[:, 3] - x[:, 1]).max() / np.abs(x[:, 1]).max()
    assert err < 1e-6
    assert_array_equal(fixed[:, :3], corrupted[:, :3])


def test_imputation_respects_module_blocks():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((400, 4))
    x[:, 1] = x[:, 0]
    x[:, 3] = x[:, 2]
    mods = np.array([0, 0, 1, 1])
    covs = windowed_covariances(x, clean_mask(40, 4), fs=1.0, window_s=10.0)
    gc = huber_mean_covariance(covs, module_of_channel=mods)
    model = fit_imputation(gc, bad=np.array([1, 3]), module_of_channel=mods)
    # rows are ordered by bad channel; good channels are [0, 2]
    assert abs(model.R[0, 0] - 1.0) < 1e-6 and abs(model.R[0, 1]) < 1e-12
    assert abs(model.R[1, 1] - 1.0) < 1e-6 and abs(model.R[1, 0]) < 1e-12
    with pytest.raises(ValidationError, match="range"):
        fit_imputation(gc, bad=np.array([9]))


def test_impute_noise_is_seeded_and_scaled():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((500, 3))
    x[:, 2] = 2.0 * x[:, 0]
    covs = windowed_covariances(x, clean_mask(50, 3), fs=1.0, window_s=10.0)
    gc = huber_mean_covariance(covs)
    model = with_noise_scale(fit_imputation(gc, bad=np.array([2])), x)
    assert_allclose(model.noise_scale,
                    (x[:, [0, 1]] @ model.R.T).std(axis=0))
    a = impute(x, model, np.random.default_rng(5))
    b = impute(x, model, np.random.default_rng(5))
    c = impute(x, model, np.random.default_rng(6))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # the dithering stays three orders of magnitude below the signal
    assert np.abs(a[:, 2] - 2.0 * x[:, 0]).max() < 0.01 * x[:, 0].std()


def test_impute_single_sample_matches_matrix_form():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((300, 3))
    x[:, 1] = x[:, 0] - 0.5 * x[:, 2]
    covs = windowed_covariances(x, clean_mask(30, 3), fs=1.0, window_s=10.0)
    model = fit_imputation(huber_mean_covariance(covs), bad=np.array([1]))
    full = impute(x, model)
    row = impute(x[17], model)
    assert_allclose(row, full[17])


def test_covariance_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    a = rng.standard_normal((4, 4)).astype(np.float32).astype(float)
    gc = GrandCovariance(cov=a @ a.T, dispersion=0.5,
                         provenance=("ses-00", "ses-01"),
                         module_of_channel=np.array([0, 0, 1, 1]))
    save_covariance(gc, tmp_path)
    clone = load_covariance(tmp_path)
    assert clone.provenance == gc.provenance
    assert clone.dispersion == 0.5
    assert_array_equal(clone.module_of_channel, gc.module_of_channel)
    assert_allclose(clone.cov, gc.cov, atol=1e-5)  # float32 payload
    assert_array_equal(clone.cov, clone.cov.T)
    with pytest.raises(FormatError, match="covariance.json"):
        load_covariance(tmp_path / "nope")
