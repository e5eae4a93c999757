"""Tests for the session pipeline: prep, fold streams, whitening, training."""

from dataclasses import replace

import numpy as np
import pytest

from hdnirs.core import Event, ValidationError
from hdnirs.covariance import huber_mean_covariance
from hdnirs.pipeline import (
    PipelineConfig,
    _check_homogeneous,
    _whitening_schedule,
    assemble_fold,
    build_fold_streams,
    build_penalty_operators,
    derive_rng,
    eval_fold,
    fit_fold,
    predict_session,
    prepare_session,
    train_decoder,
)
from hdnirs.zca import shrink, whitening_transform


@pytest.fixture(scope="module")
def mini_preps(mini_corpus):
    cfg = PipelineConfig()
    return cfg, {r.session_id: prepare_session(r, cfg) for r in mini_corpus.recordings}


@pytest.fixture(scope="module")
def mini_streams(mini_preps):
    cfg, preps = mini_preps
    return build_fold_streams(preps, cfg)


def test_derive_rng_deterministic():
    a = derive_rng(7, "impute", "ses-00").standard_normal(4)
    b = derive_rng(7, "impute", "ses-00").standard_normal(4)
    assert np.array_equal(a, b)
    c = derive_rng(7, "impute", "ses-01").standard_normal(4)
    d = derive_rng(8, "impute", "ses-00").standard_normal(4)
    e = derive_rng(7, "impute", 3).standard_normal(4)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert not np.array_equal(a, e)


def test_prepare_session_contract(mini_corpus, mini_preps):
    _, preps = mini_preps
    rec = mini_corpus.recordings[0]
    prep = preps[rec.session_id]
    n = prep.selected.size
    assert prep.od_band.shape == (rec.n_times, n)
    assert prep.od_high.shape == (rec.n_times, n)
    # the two streams carry different filters
    assert not np.allclose(prep.od_band, prep.od_high)
    assert len(prep.extents) == len(rec.events)
    widths = {b - a for a, b in prep.extents}
    assert widths == {round(55.0 * rec.fs_hz)}
    starts = [a for a, _ in prep.extents]
    assert starts == sorted(starts)
    # consecutive trial segments tile without overlap
    for (_, b), (a2, _) in zip(prep.extents, prep.extents[1:]):
        assert b <= a2
    plan = mini_corpus.truth["sessions"][rec.session_id]["plan"]
    assert sorted(prep.mask.bad_channels) == sorted(set(plan["dead"]) | set(plan["noisy"]))
    assert prep.module_of_channel.shape == (n,)
    ids = prep.trial_ids([0, 5])
    assert ids == frozenset({(rec.session_id, 0), (rec.session_id, 5)})


def test_prepare_session_rejects_bad_segments(mini_corpus):
    # windows wider than the recording contract trip the pipeline guards
    rec = mini_corpus.recordings[0]
    wide = PipelineConfig(segment_window_s=(-41.0, 40.0))
    with pytest.raises(ValidationError, match="outside recording"):
        prepare_session(rec, wide)
    long = PipelineConfig(segment_window_s=(-15.0, 41.0))
    with pytest.raises(ValidationError, match="segments overlap"):
        prepare_session(rec, long)


def test_build_penalty_operators_shapes(mini_preps):
    cfg, preps = mini_preps
    prep = next(iter(preps.values()))
    ops = build_penalty_operators(prep, cfg, 12)
    pair_channels, _ = prep.montage.pair_table()
    n_pairs = pair_channels.shape[0]
    assert ops.spatial.graph.shape == (n_pairs, n_pairs)
    assert ops.temporal.shape == (12, 12)


def test_fold_streams_full(mini_preps, mini_streams):
    cfg, preps = mini_preps
    fs = mini_streams
    sids = sorted(preps)
    assert fs.n_time_samples == 12
    for sid in sids:
        prep = preps[sid]
        others = tuple(s for s in sids if s != sid)
        assert fs.covariances[sid].provenance == others
        expected_ids = frozenset().union(*(preps[s].trial_ids() for s in others))
        assert fs.cov_ids[sid] == expected_ids
        stream = fs.streams[sid]
        bad = prep.mask.bad_channels
        good = np.setdiff1d(np.arange(stream.shape[1]), bad)
        assert np.array_equal(stream[:, good], prep.od_band[:, good])
        assert not np.allclose(stream[:, bad], prep.od_band[:, bad])
        assert fs.resampled[sid][0].shape == (stream.shape[1], 12)
        s0, c0 = fs.trial_sums[sid][0]
        assert c0 == prep.extents[0][1] - prep.extents[0][0]
        a, b = prep.extents[0]
        assert np.allclose(s0, stream[a:b].T @ stream[a:b])


def test_fold_streams_loso_and_exclusions(mini_preps):
    cfg, preps = mini_preps
    sids = sorted(preps)
    target = sids[0]
    fs = build_fold_streams(preps, cfg, loso_target=target)
    for sid in sids:
        assert target not in {s for s, _ in fs.cov_ids[sid]}
    assert fs.covariances[sids[1]].provenance == tuple(
        s for s in sids if s not in (sids[1], target))

    held = {sids[1]: [0, 1, 2]}
    part = build_fold_streams(preps, cfg, exclude_map=held)
    for k in held[sids[1]]:
        assert (sids[1], k) not in part.cov_ids[sids[0]]
    full = build_fold_streams(preps, cfg)
    assert not np.allclose(part.covariances[sids[0]].cov,
                           full.covariances[sids[0]].cov)

    lone = {target: preps[target]}
    with pytest.raises(ValidationError, match="no session left"):
        build_fold_streams(lone, cfg, loso_target=target)


def test_whitening_schedule_progression(mini_preps, mini_streams):
    cfg, preps = mini_preps
    sid = sorted(preps)[0]
    prep = preps[sid]
    stream = mini_streams.streams[sid]
    sums = mini_streams.trial_sums[sid]
    init = set(range(18))
    prog = [18, 19, 20]
    w_init, w_map = _whitening_schedule(prep, stream, sums, cfg, init, prog)
    # first progressive trial sees exactly the init transform
    assert np.array_equal(w_map[18], w_init)
    assert not np.array_equal(w_map[19], w_map[18])

    include = np.ones(prep.n_times, bool)
    for a, b in prep.extents:
        include[a:b] = False
    for k in init:
        a, b = prep.extents[k]
        include[a:b] = True
    x = stream[include]
    s0, c0 = x.T @ x, x.shape[0]
    assert np.allclose(w_init, whitening_transform(shrink(s0 / c0, cfg.zca_lambda)),
                       atol=1e-12)
    s1 = s0 + sums[18][0]
    c1 = c0 + sums[18][1]
    assert np.allclose(w_map[19], whitening_transform(shrink(s1 / c1, cfg.zca_lambda)),
                       atol=1e-12)


def test_assemble_fold_structure(mini_preps, mini_streams):
    cfg, preps = mini_preps
    train_map = {sid: {0, 1, 2} for sid in preps}
    test_map = {sid: {3} for sid in preps}
    fold = assemble_fold(preps, cfg, mini_streams, train_map, test_map)
    # contrast keeps conditions 0 and 2: six trials per task set
    assert len(fold.train) == 5 * 3 * 6
    assert len(fold.test) == 5 * 6
    assert len(fold.test_ids) == 30
    train_ids = {(t.session_id, t.trial_id) for t in fold.train}
    assert fold.artifacts["zscore"] == frozenset(train_ids)
    assert fold.artifacts["weights"] == fold.artifacts["zscore"]
    assert not train_ids & set(fold.test_ids)
    for sid in preps:
        assert fold.artifacts[f"zca:{sid}"] == preps[sid].trial_ids(
            sorted(k for k in range(36) if preps[sid].events[k].task_set < 3))
        assert f"covariance:{sid}" in fold.artifacts
    assert np.all(fold.sigma > 0)
    assert fold.covariance_provenance == tuple(sorted(preps))

    with pytest.raises(ValidationError, match="empty training split"):
        assemble_fold(preps, cfg, mini_streams, {}, test_map)


def test_assemble_fold_without_zca(mini_preps, mini_streams):
    cfg, preps = mini_preps
    plain = replace(cfg, enable_zca=False)
    fold = assemble_fold(preps, plain, mini_streams,
                         {sid: {0, 1, 2} for sid in preps},
                         {sid: {3} for sid in preps})
    assert not any(k.startswith("zca:") for k in fold.artifacts)
    assert len(fold.train) == 90


def test_fit_and_eval_fold(mini_preps, mini_streams):
    cfg, preps = mini_preps
    fold = assemble_fold(preps, cfg, mini_streams,
                         {sid: {0, 1, 2} for sid in preps},
                         {sid: {3} for sid in preps})
    ops = build_penalty_operators(next(iter(preps.values())), cfg,
                                  mini_streams.n_time_samples)
    model = fit_fold(fold, cfg, 0.1, 0.1, 0.1, ops)
    assert sorted(model.session_weights) == sorted(preps)
    report = eval_fold(model, fold)
    assert set(report["per_session"]) == set(preps)
    assert len(report["rows"]) == 30
    assert report["accuracy"] >= 0.6
    for row in report["rows"]:
        assert row["pred"] in (0, 1)
        assert 0.0 <= row["prob"] <= 1.0


def test_train_and_predict_round_trip(mini_corpus):
    cfg = PipelineConfig()
    model, pooled, artifacts = train_decoder(mini_corpus.recordings, cfg,
                                             0.1, 0.1, 0.1)
    sids = sorted(r.session_id for r in mini_corpus.recordings)
    assert sorted(model.session_weights) == sids
    assert pooled.provenance == tuple(sids)
    assert artifacts["zscore"]

    rows = predict_session(mini_corpus.recordings[0], model, pooled, cfg)
    assert len(rows) == 24
    hits = np.mean([r["pred"] == r["label"] for r in rows])
    assert hits >= 0.7

    unseen = replace(mini_corpus.recordings[0], session_id="ses-99")
    rows = predict_session(unseen, model, pooled, cfg)
    assert len(rows) == 24
    assert all(0.0 <= r["prob"] <= 1.0 for r in rows)


def test_check_homogeneous(mini_preps):
    _, preps = mini_preps
    sids = sorted(preps)
    broken = dict(preps)
    broken[sids[1]] = replace(preps[sids[1]], fs=99.0)
    with pytest.raises(ValidationError, match="different sampling rates"):
        _check_homogeneous(broken)
    broken[sids[1]] = replace(preps[sids[1]],
                              selected=preps[sids[1]].selected[:-1])
    with pytest.raises(ValidationError, match="different channel sets"):
        _check_homogeneous(broken)


def test_imputation_toggle(mini_preps):
    cfg, preps = mini_preps
    off = replace(cfg, enable_imputation=False)
    fs = build_fold_streams(preps, off)
    for sid, prep in preps.items():
        assert fs.streams[sid] is prep.od_band
