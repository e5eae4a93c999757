"""End-to-end assembly: recordings to trial features to fitted decoders.

The stages are deliberately fold-aware.  Grand covariances only ever see
windows outside the held-out extents, whitening is initialized on training
extents and continued incrementally across held-out trials, and z-score
statistics come from training trials alone, so every fitted artifact can
state the exact trial set it was derived from.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (DecoderModel, Event, Montage, SessionRecording,
                   TrialFeatures, ValidationError)
from .covariance import (GrandCovariance, fit_imputation,
                         huber_mean_covariance, impute,
                         leave_session_out_covariance, windowed_covariances,
                         with_noise_scale)
from .decoder import (MtlProblem, PenaltyOperators, SolverConfig,
                      build_spatial_operator, displaced_midpoints,
                      predict_label, predict_proba, solve, temporal_matrix)
from .features import (ExtinctionTable, assemble_features, resample_trial,
                       to_chromophores, zscore_fit)
from .preprocess import (PreprocConfig, ambient_correct, bandpass_zero_phase,
                         highpass_zero_phase, quality_mask, select_channels,
                         shift_noise_floor, to_delta_od)
from .zca import shrink, whitening_transform


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the decode chain needs besides the data itself."""

    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    cov_window_s: float = 10.0
    cov_highpass_hz: float = 0.01
    cov_filter_order: int = 5
    zca_lambda: float = 0.5
    enable_zca: bool = True
    enable_imputation: bool = True
    contrast: tuple[int, int] = (0, 2)
    segment_window_s: tuple[float, float] = (-15.0, 40.0)
    target_hz: float = 0.2
    extinction: ExtinctionTable = field(default_factory=ExtinctionTable)
    spatial_radius_mm: float = 15.0
    normal_ratio: float = 1.5
    mode: str = "subject-specific"
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Deterministic generator from a seed and a path of string/int tags."""
    entropy = [seed & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, (int, np.integer)):
            entropy.append(int(t) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(t).encode()))
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# Per-session preprocessing
# ---------------------------------------------------------------------------

@dataclass
class SessionPrep:
    """Preprocessed decode and covariance streams for one session."""

    session_id: str
    subject_id: str
    fs: float
    selected: np.ndarray          # channel indices into the full montage
    montage: Montage              # restricted to selected channels
    mask: object                  # QualityMask over selected channels
    od_band: np.ndarray           # (time, n) decode-path OD
    od_high: np.ndarray           # (time, n) covariance-path OD
    events: tuple[Event, ...]
    extents: list[tuple[int, int]]  # per-trial [start, stop) sample ranges
    module_of_channel: np.ndarray

    @property
    def n_times(self) -> int:
        return self.od_band.shape[0]

    def trial_ids(self, trial_idx=None) -> frozenset:
        idx = range(len(self.events)) if trial_idx is None else trial_idx
        return frozenset((self.session_id, int(k)) for k in idx)


def prepare_session(rec: SessionRecording, cfg: PipelineConfig) -> SessionPrep:
    """Ambient correction through both filtered OD streams."""
    pp = cfg.preproc
    sel = select_channels(rec.montage, pp)
    sub = rec.montage.subset(sel)
    x = ambient_correct(rec)[:, sel]
    x = shift_noise_floor(x, pp, derive_rng(pp.seed, "dither", rec.session_id))
    mask = quality_mask(x, sub, pp, rec.fs_hz)
    od = to_delta_od(x, good_channels=mask.good_channels())
    od_band = bandpass_zero_phase(od, pp, rec.fs_hz)
    od_high = highpass_zero_phase(od, cfg.cov_highpass_hz, rec.fs_hz,
                                  order=cfg.cov_filter_order)
    lo = int(round(cfg.segment_window_s[0] * rec.fs_hz))
    hi = int(round(cfg.segment_window_s[1] * rec.fs_hz))
    extents = [(e.sample + lo, e.sample + hi) for e in rec.events]
    for k, (a, b) in enumerate(extents):
        if a < 0 or b > rec.n_times:
            raise ValidationError(f"trial {k} segment outside recording")
    if any(b > extents[k + 1][0] for k, (_, b) in enumerate(extents[:-1])):
        raise ValidationError("trial segments overlap; streams cannot be tiled")
    return SessionPrep(
        session_id=rec.session_id, subject_id=rec.subject_id, fs=rec.fs_hz,
        selected=sel, montage=sub, mask=mask, od_band=od_band.od,
        od_high=od_high.od, events=rec.events, extents=extents,
        module_of_channel=sub.channel_module())


def build_penalty_operators(prep: SessionPrep, cfg: PipelineConfig,
                            n_time_samples: int) -> PenaltyOperators:
    spatial = build_spatial_operator(
        displaced_midpoints(prep.montage, cfg.normal_ratio),
        cfg.spatial_radius_mm)
    return PenaltyOperators(spatial=spatial,
                            temporal=temporal_matrix(n_time_samples))


# ---------------------------------------------------------------------------
# Fold-restricted covariance and imputation
# ---------------------------------------------------------------------------

def _restricted_windows(prep: SessionPrep, cfg: PipelineConfig,
                        exclude: list[tuple[int, int]]):
    """Windowed covariances from windows that overlap no excluded extent."""
    w = int(round(cfg.cov_window_s * prep.fs))
    wins = windowed_covariances(prep.od_high, prep.mask, prep.fs,
                                cfg.cov_window_s)
    if not exclude:
        return wins
    kept = []
    for k, cw in enumerate(wins):
        a, b = k * w, (k + 1) * w
        if any(a < y and x < b for x, y in exclude):
            continue
        kept.append(cw)
    return kept


@dataclass
class FoldStreams:
    """Per-outer-fold fitted data: covariances, imputed streams, trial sums."""

    streams: dict                    # sid -> imputed band OD (time, n)
    resampled: dict                  # sid -> {trial idx -> (n, T)}
    trial_sums: dict                 # sid -> {trial idx -> (S, count)}
    covariances: dict                # sid -> GrandCovariance used for it
    cov_ids: dict                    # sid -> frozenset of provenance trial ids
    n_time_samples: int


def build_fold_streams(preps: dict, cfg: PipelineConfig,
                       exclude_map: dict | None = None,
                       loso_target: str | None = None,
                       tag: str = "full") -> FoldStreams:
    """Impute every session against a leave-session-out grand covariance.

    exclude_map gives per-session held-out trial indices; a covariance
    window overlapping any held-out trial's extent is dropped.  For a
    leave-one-session-out split the target session contributes no windows
    at all.
    """
    exclude_map = exclude_map or {}
    sids = sorted(preps)
    windows = {}
    for sid in sids:
        if sid == loso_target:
            windows[sid] = []
            continue
        excl = [preps[sid].extents[k] for k in exclude_map.get(sid, [])]
        windows[sid] = _restricted_windows(preps[sid], cfg, excl)

    mods = preps[sids[0]].module_of_channel
    train_ids = {}
    for sid in sids:
        held = set(exclude_map.get(sid, []))
        if sid == loso_target:
            held = set(range(len(preps[sid].events)))
        train_ids[sid] = preps[sid].trial_ids(
            [k for k in range(len(preps[sid].events)) if k not in held])

    streams, resampled, trial_sums, covariances, cov_ids = {}, {}, {}, {}, {}
    for sid in sids:
        prep = preps[sid]
        contributors = [s for s in sids if s != sid and windows[s]]
        if not contributors:
            raise ValidationError("no session left to estimate the covariance from")
        pooled = [cw for s in contributors for cw in windows[s]]
        cbar = huber_mean_covariance(pooled, module_of_channel=mods,
                                     provenance=tuple(contributors))
        covariances[sid] = cbar
        cov_ids[sid] = frozenset().union(*(train_ids[s] for s in contributors))

        if cfg.enable_imputation and prep.mask.bad_channels.size:
            model = fit_imputation(cbar, prep.mask.bad_channels, mods)
            model = with_noise_scale(model, prep.od_band)
            stream = impute(prep.od_band, model,
                            derive_rng(cfg.seed, "impute", tag, sid))
        else:
            stream = prep.od_band
        streams[sid] = stream

        res, sums = {}, {}
        for k, (a, b) in enumerate(prep.extents):
            seg = stream[a:b].T
            res[k] = resample_trial(seg, prep.fs, cfg.target_hz)
            sums[k] = (stream[a:b].T @ stream[a:b], b - a)
        resampled[sid] = res
        trial_sums[sid] = sums

    n_t = next(iter(resampled[sids[0]].values())).shape[-1] if resampled[sids[0]] else 0
    return FoldStreams(streams=streams, resampled=resampled,
                       trial_sums=trial_sums, covariances=covariances,
                       cov_ids=cov_ids, n_time_samples=n_t)


# ---------------------------------------------------------------------------
# Whitening schedules and feature assembly
# ---------------------------------------------------------------------------

def _masked_moment(stream: np.ndarray, include: np.ndarray) -> tuple[np.ndarray, int]:
    x = stream[include]
    if x.shape[0] == 0:
        raise ValidationError("whitening init extent is empty")
    return x.T @ x, x.shape[0]


def _whitening_schedule(prep: SessionPrep, stream: np.ndarray,
                        sums: dict, cfg: PipelineConfig,
                        init_trials: set, progressive_trials: list,
                        init_rest: bool = True,
                        lead_in_only: bool = False):
    """Init transform on the chosen extents, then per-trial refreshes.

    Returns (w_init, {trial idx -> transform at that trial's start}).
    The moment matrix folds in each progressive trial after its features
    are read, matching a sample-by-sample stream with refreshes at segment
    boundaries.
    """
    include = np.zeros(prep.n_times, bool)
    if lead_in_only:
        first = min(a for a, _ in prep.extents) if prep.extents else prep.n_times
        include[:first] = True
    else:
        if init_rest:
            include[:] = True
            for a, b in prep.extents:
                include[a:b] = False
        for k in init_trials:
            a, b = prep.extents[k]
            include[a:b] = True
    s0, c0 = _masked_moment(stream, include)
    w_init = whitening_transform(shrink(s0 / c0, cfg.zca_lambda))
    w_map = {}
    cum_s, cum_c = s0, c0
    w_cur = w_init
    for k in sorted(progressive_trials, key=lambda k: prep.extents[k][0]):
        w_map[k] = w_cur
        sk, ck = sums[k]
        cum_s = cum_s + sk
        cum_c = cum_c + ck
        w_cur = whitening_transform(shrink(cum_s / cum_c, cfg.zca_lambda))
    return w_init, w_map


def _trial_features(prep: SessionPrep, resampled: dict, cfg: PipelineConfig,
                    trial_idx: list, w_of_trial) -> list[TrialFeatures]:
    """Whiten cached resampled trials and convert to chromophore features."""
    entries = []
    for k in trial_idx:
        m = resampled[k]
        w = w_of_trial(k)
        m = w @ m if w is not None else m
        chrom = to_chromophores(m.T, prep.montage, cfg.extinction)
        entries.append((k, prep.events[k], np.moveaxis(chrom, 0, -1)))
    return assemble_features(prep.session_id, entries, cfg.contrast)


@dataclass
class FoldData:
    """Feature sets plus the provenance of every fitted artifact."""

    train: list
    test: list
    mu: np.ndarray
    sigma: np.ndarray
    artifacts: dict
    test_ids: frozenset
    covariance_provenance: tuple


def assemble_fold(preps: dict, cfg: PipelineConfig, streams: FoldStreams,
                  train_map: dict, test_map: dict,
                  loso_target: str | None = None) -> FoldData:
    """Features for one train/test split on already-imputed streams.

    train_map / test_map give per-session sets of task-set ids; a session
    equal to loso_target streams through all its trials incrementally from
    a lead-in-only initialization.
    """
    train_feats, test_feats = [], []
    artifacts = {}
    test_ids = set()
    for sid in sorted(preps):
        prep = preps[sid]
        by_set = {}
        for k, ev in enumerate(prep.events):
            by_set.setdefault(ev.task_set, []).append(k)
        train_sets = train_map.get(sid, set())
        test_sets = test_map.get(sid, set())
        train_trials = sorted(k for s in train_sets for k in by_set.get(s, []))
        test_trials = sorted(k for s in test_sets for k in by_set.get(s, []))
        if not train_trials and not test_trials:
            continue

        if cfg.enable_zca:
            w_init, w_map = _whitening_schedule(
                prep, streams.streams[sid], streams.trial_sums[sid], cfg,
                init_trials=set(train_trials), progressive_trials=test_trials,
                init_rest=sid != loso_target,
                lead_in_only=sid == loso_target)
            w_train = lambda k, w=w_init: w
            w_test = lambda k, m=w_map: m[k]
            init_ids = prep.trial_ids(train_trials)
            artifacts[f"zca:{sid}"] = init_ids
        else:
            w_train = w_test = lambda k: None

        if train_trials:
            train_feats += _trial_features(prep, streams.resampled[sid], cfg,
                                           train_trials, w_train)
        if test_trials:
            feats = _trial_features(prep, streams.resampled[sid], cfg,
                                    test_trials, w_test)
            test_feats += feats
            test_ids |= {(f.session_id, f.trial_id) for f in feats}
        artifacts[f"covariance:{sid}"] = streams.cov_ids[sid]

    if not train_feats:
        raise ValidationError("empty training split")
    mu, sigma = zscore_fit(train_feats)
    artifacts["zscore"] = frozenset(
        (f.session_id, f.trial_id) for f in train_feats)
    artifacts["weights"] = artifacts["zscore"]
    cov_sessions = tuple(sorted(
        {s for sid in sorted(preps) for s in streams.covariances[sid].provenance}))
    return FoldData(train=train_feats, test=test_feats, mu=mu, sigma=sigma,
                    artifacts=artifacts, test_ids=frozenset(test_ids),
                    covariance_provenance=cov_sessions)


def fit_fold(fold: FoldData, cfg: PipelineConfig, alpha: float, beta: float,
             gamma: float, ops: PenaltyOperators,
             solver: SolverConfig | None = None) -> DecoderModel:
    """Standardize training trials and run the joint solve."""
    z = [(t.flat - fold.mu) / fold.sigma for t in fold.train]
    x = np.stack(z).reshape(len(z), *fold.train[0].x.shape)
    y = np.array([t.label for t in fold.train])
    problem = MtlProblem(
        x=x, y=y,
        session_of_trial=_session_index(fold.train),
        session_ids=tuple(sorted({t.session_id for t in fold.train})),
        alpha=alpha, beta=beta, gamma=gamma, mode=cfg.mode)
    return solve(problem, ops, solver or cfg.solver, mu=fold.mu,
                 sigma=fold.sigma,
                 covariance_provenance=fold.covariance_provenance)


def _session_index(trials: list) -> np.ndarray:
    sids = tuple(sorted({t.session_id for t in trials}))
    pos = {s: k for k, s in enumerate(sids)}
    return np.array([pos[t.session_id] for t in trials])


def eval_fold(model: DecoderModel, fold: FoldData,
              allow_fallback: bool = False) -> dict:
    """Per-session accuracy and per-trial predictions on the test split."""
    per_session = {}
    rows = []
    for t in fold.test:
        p = predict_proba_safe(model, t, allow_fallback)
        pred = int(p > 0.5)
        rows.append({"session": t.session_id, "trial": t.trial_id,
                     "label": t.label, "prob": p, "pred": pred})
        per_session.setdefault(t.session_id, []).append(pred == t.label)
    acc = {sid: float(np.mean(v)) for sid, v in sorted(per_session.items())}
    return {"per_session": acc, "rows": rows,
            "accuracy": float(np.mean([r["pred"] == r["label"] for r in rows]))}


def predict_proba_safe(model: DecoderModel, trial: TrialFeatures,
                       allow_fallback: bool) -> float:
    from scipy.special import expit
    w, b = model.effective_weights(trial.session_id, allow_fallback=allow_fallback)
    z = (trial.flat - model.mu.astype(float)) / model.sigma.astype(float)
    return float(expit(z @ w.reshape(-1) + b))


# ---------------------------------------------------------------------------
# Plain training / prediction entry points (no cross-validation)
# ---------------------------------------------------------------------------

def train_decoder(recordings: list[SessionRecording], cfg: PipelineConfig,
                  alpha: float, beta: float, gamma: float
                  ) -> tuple[DecoderModel, GrandCovariance, dict]:
    """Fit on everything; returns the model and a pooled covariance.

    Imputation still uses leave-session-out covariances per session; the
    pooled covariance over all sessions is returned for use on future
    sessions.
    """
    preps = {r.session_id: prepare_session(r, cfg) for r in recordings}
    _check_homogeneous(preps)
    streams = build_fold_streams(preps, cfg, tag="train")
    all_sets = {sid: {e.task_set for e in preps[sid].events} for sid in preps}
    fold = assemble_fold(preps, cfg, streams, train_map=all_sets, test_map={})
    ops = build_penalty_operators(next(iter(preps.values())), cfg,
                                  streams.n_time_samples)
    model = fit_fold(fold, cfg, alpha, beta, gamma, ops)
    pooled_windows = [cw for sid in sorted(preps)
                      for cw in _restricted_windows(preps[sid], cfg, [])]
    pooled = huber_mean_covariance(
        pooled_windows,
        module_of_channel=next(iter(preps.values())).module_of_channel,
        provenance=tuple(sorted(preps)))
    return model, pooled, fold.artifacts


def predict_session(rec: SessionRecording, model: DecoderModel,
                    cbar: GrandCovariance, cfg: PipelineConfig) -> list[dict]:
    """Score every contrast trial of a session with a trained model.

    The session is treated as unseen: covariance comes from the training
    corpus, whitening initializes on the lead-in and continues across
    trials, and unknown sessions fall back to the shared weights.
    """
    prep = prepare_session(rec, cfg)
    if cfg.enable_imputation and prep.mask.bad_channels.size:
        imodel = fit_imputation(cbar, prep.mask.bad_channels,
                                prep.module_of_channel)
        imodel = with_noise_scale(imodel, prep.od_band)
        stream = impute(prep.od_band, imodel,
                        derive_rng(cfg.seed, "impute", "predict", rec.session_id))
    else:
        stream = prep.od_band
    res, sums = {}, {}
    for k, (a, b) in enumerate(prep.extents):
        res[k] = resample_trial(stream[a:b].T, prep.fs, cfg.target_hz)
        sums[k] = (stream[a:b].T @ stream[a:b], b - a)
    all_trials = list(range(len(prep.events)))
    if cfg.enable_zca:
        _, w_map = _whitening_schedule(prep, stream, sums, cfg,
                                       init_trials=set(),
                                       progressive_trials=all_trials,
                                       lead_in_only=True)
        w_of = lambda k: w_map[k]
    else:
        w_of = lambda k: None
    contrast_trials = [k for k in all_trials
                       if prep.events[k].condition in cfg.contrast]
    feats = _trial_features(prep, res, cfg, contrast_trials, w_of)
    known = rec.session_id in model.session_weights
    out = []
    for t in feats:
        p = predict_proba_safe(model, t, allow_fallback=not known)
        out.append({"session": t.session_id, "trial": t.trial_id,
                    "condition": t.condition, "label": t.label,
                    "prob": p, "pred": int(p > 0.5)})
    return out


def _check_homogeneous(preps: dict) -> None:
    sids = sorted(preps)
    first = preps[sids[0]]
    for sid in sids[1:]:
        p = preps[sid]
        if not np.array_equal(p.selected, first.selected):
            raise ValidationError("sessions select different channel sets")
        if p.fs != first.fs:
            raise ValidationError("sessions have different sampling rates")
