"""Synthetic raw-count corpus with known ground truth.

Generates blocked working-memory sessions through the full forward chain:
hemodynamic responses on a compact channel blob, pink and shared-subspace
noise, cardiac and drift nuisance, conversion to optical density, then
integer detector counts with per-detector ambient light.  Ground truth
(pattern, amplitudes, artifact plan, ideal-observer accuracy) rides along
so recovery can be scored exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.stats import norm

from .core import Event, Montage, SessionRecording, ValidationError, save_session, load_session
from .features import ExtinctionTable, chromophore_forward
from .montage import desk_montage

HBR_EFFECT_RATIO = -1.0 / 3.0


@dataclass(frozen=True)
class SimConfig:
    """Generator knobs; defaults give the small benchtop corpus."""

    n_pairs: int = 60
    n_sessions: int = 6
    fs_hz: float = 6.98
    task_sets: int = 4
    blocks_per_set: int = 3
    trials_per_block: int = 3
    amplitude_scale: tuple[float, ...] = (0.0, 0.5, 1.0)
    # calibrated so the matched-filter bound sits near 0.98 on the default corpus
    effect_amp_mm: float = 4.0e-4
    effect_width_mm: float = 8.0
    pink_sd_mm: float = 1.5e-4
    hbr_pink_ratio: float = 0.45
    shared_sd_mm: float = 2.0e-4
    n_shared: int = 3
    hbr_shared_ratio: float = 0.4
    # False redraws the shared-subspace projection every session; True keeps
    # one projection for the whole corpus, the regime where a covariance
    # pooled across sessions transfers to each of them
    stable_shared_mixing: bool = False
    cardiac_sd_mm: float = 1.0e-4
    cardiac_hz: float = 1.2
    hbr_cardiac_ratio: float = 0.3
    drift_sd_mm: float = 3.0e-4
    hbr_drift_ratio: float = 0.3
    hrf_peak_s: float = 6.0
    hrf_undershoot_s: float = 16.0
    hrf_undershoot_ratio: float = 1.0 / 6.0
    lead_in_s: float = 25.0
    pre_onset_s: float = 15.0
    task_s: float = 40.0
    trial_spacing_s: float = 55.0
    lead_out_s: float = 10.0
    i0_base: float = 2000.0
    i0_jitter: float = 0.1
    ambient_base: float = 4200.0
    ambient_jitter: float = 0.05
    ambient_ramp: float = 30.0
    quantize: bool = True
    dead_per_session: int = 2
    noisy_per_session: int = 1
    # spike windows force negative-going excursions that the decode path's
    # positivity contract rejects on retained channels, so the end-to-end
    # corpus defaults to none; quality-mask tests plant them explicitly
    spikes_per_session: int = 0
    artifacts_on_effect: bool = False
    artifact_window_s: float = 5.0
    bayes_mc_trials: int = 240
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 4 or self.n_sessions < 2:
            raise ValidationError("corpus needs at least 4 pairs and 2 sessions")
        if self.fs_hz <= 0 or self.effect_amp_mm < 0:
            raise ValidationError("rates and amplitudes must be nonnegative")
        if self.task_sets < 2 or self.blocks_per_set < 1 or self.trials_per_block < 1:
            raise ValidationError("need at least 2 task sets with 1+ blocks")
        if len(self.amplitude_scale) != 3:
            raise ValidationError("three condition amplitudes expected")

    @property
    def trials_per_session(self) -> int:
        return self.task_sets * self.blocks_per_set * self.trials_per_block

    def onsets_s(self) -> np.ndarray:
        first = self.lead_in_s + self.pre_onset_s
        return first + self.trial_spacing_s * np.arange(self.trials_per_session)

    def onset_samples(self) -> np.ndarray:
        # uniform integer-sample grid so peri-onset segments tile exactly
        first = int(round((self.lead_in_s + self.pre_onset_s) * self.fs_hz))
        step = int(round(self.trial_spacing_s * self.fs_hz))
        return first + step * np.arange(self.trials_per_session)

    @property
    def duration_s(self) -> float:
        return float(self.onsets_s()[-1] + self.task_s + self.lead_out_s)

    @property
    def n_times(self) -> int:
        return int(self.onset_samples()[-1]
                   + round(self.task_s * self.fs_hz)
                   + round(self.lead_out_s * self.fs_hz))


@dataclass(frozen=True)
class Corpus:
    recordings: tuple[SessionRecording, ...]
    montage: Montage
    truth: dict = field(repr=False)


def stress_config(seed: int = 0) -> SimConfig:
    """Corpus recipe where artifact repair and whitening carry weight.

    Strong shared-subspace noise and a thick bad-channel plan aimed at the
    effect support push the decodable margin down from the benchtop
    defaults; imputation and ZCA removals then cost accuracy instead of
    hiding at ceiling.  Built for pooled blockwise evaluation.
    """
    return SimConfig(effect_amp_mm=2.4e-4, shared_sd_mm=6.0e-4,
                     dead_per_session=7, noisy_per_session=3,
                     artifacts_on_effect=True, stable_shared_mixing=True,
                     seed=seed)


def double_gamma_hrf(t_s: np.ndarray, peak_s: float = 6.0,
                     undershoot_s: float = 16.0,
                     undershoot_ratio: float = 1.0 / 6.0) -> np.ndarray:
    """Canonical two-gamma impulse response, unit peak, zero for t < 0."""
    t = np.asarray(t_s, float)
    a1, a2 = peak_s, undershoot_s
    h = (np.power(np.maximum(t, 0), a1 - 1) * np.exp(-np.maximum(t, 0))
         / gamma_fn(a1)
         - undershoot_ratio * np.power(np.maximum(t, 0), a2 - 1)
         * np.exp(-np.maximum(t, 0)) / gamma_fn(a2))
    h = np.where(t < 0, 0.0, h)
    m = h.max()
    if m > 0:
        h = h / m
    return h


def _pink(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    """m series of 1/f-amplitude noise, unit sd, shape (m, n)."""
    freqs = np.fft.rfftfreq(n)
    scale = np.zeros_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    spec = (rng.standard_normal((m, freqs.size))
            + 1j * rng.standard_normal((m, freqs.size))) * scale
    x = np.fft.irfft(spec, n=n, axis=1)
    sd = x.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    return x / sd


def effect_pattern(montage: Montage, width_mm: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Compact Gaussian blob over pair midpoints; support cut at 2 widths.

    Returns (pattern (n_pairs,), support indices).  The blob center is one
    of the interior midpoints, chosen by the generator stream.
    """
    pair_channels, _ = montage.pair_table()
    mids = montage.midpoints()[pair_channels[:, 0]]
    center_of_mass = mids.mean(axis=0)
    inner = np.argsort(np.linalg.norm(mids - center_of_mass, axis=1))
    center = mids[inner[int(rng.integers(0, max(1, len(inner) // 4)))]]
    d = np.linalg.norm(mids - center, axis=1)
    pattern = np.exp(-d ** 2 / (2.0 * width_mm ** 2))
    pattern[d > 2.0 * width_mm] = 0.0
    support = np.flatnonzero(pattern > 0)
    return pattern, support


def _zero_mean_pattern(n: int) -> np.ndarray:
    """Deterministic zero-mean oscillation with period 5 samples."""
    base = np.array([1.0, -1.0, 1.0, -1.0, 0.0])
    reps = -(-n // 5)
    return np.tile(base, reps)[:n]


def plant_artifacts(rec: SessionRecording, plan: dict,
                    rng: np.random.Generator,
                    window_s: float = 5.0,
                    quantize: bool = True) -> SessionRecording:
    """Inject dead channels, continuously noisy channels, and spike windows.

    plan keys: "dead" (channel list), "noisy" (channel list), "spikes"
    (list of [channel, window_index]).  An empty plan returns the recording
    unchanged.  Noisy channels keep a mean above the dead-channel cut but
    oscillate around their own ambient level; spikes pull one window's mean
    to the ambient level so only that window trips the quality threshold.
    """
    montage = rec.montage
    dead = [int(c) for c in plan.get("dead", ())]
    noisy = [int(c) for c in plan.get("noisy", ())]
    spikes = [(int(c), int(w)) for c, w in plan.get("spikes", ())]
    if not dead and not noisy and not spikes:
        return rec
    n_ch = montage.n_channels
    for c in dead + noisy + [c for c, _ in spikes]:
        if not 0 <= c < n_ch:
            raise ValidationError(f"artifact plan references channel {c}")
    w = int(round(window_s * rec.fs_hz))
    n_win = rec.intensity.shape[0] // w
    for _, widx in spikes:
        if not 0 <= widx < n_win:
            raise ValidationError(f"artifact plan references window {widx}")

    intensity = rec.intensity.astype(float)
    ambient = rec.ambient.astype(float)
    det_of_channel = montage.channel_detector
    t_len = intensity.shape[0]
    osc = _zero_mean_pattern(t_len)

    for c in dead:
        amb = ambient[:, det_of_channel[c]]
        intensity[:, c] = amb + np.maximum(0.0, 2.0 + 0.6 * rng.standard_normal(t_len))
    for c in noisy:
        det = det_of_channel[c]
        # lift this detector's ambient so counts stay nonnegative
        ambient[:, det] = np.maximum(ambient[:, det], 4100.0)
        intensity[:, c] = ambient[:, det] + 20.0 + 4000.0 * osc
    for c, widx in spikes:
        sl = slice(widx * w, (widx + 1) * w)
        amb = ambient[sl, det_of_channel[c]]
        intensity[sl, c] = amb + 1000.0 * osc[sl]
    if quantize:
        intensity = np.round(intensity)
        ambient = np.round(ambient)
    if intensity.min() < 0:
        raise ValidationError("artifact plan drove counts negative")
    return replace(rec, intensity=intensity.astype(np.float32),
                   ambient=ambient.astype(np.float32))


def _draw_mixing(cfg: SimConfig, n_p: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-column projection of the shared latents onto channel pairs."""
    mix = rng.standard_normal((n_p, cfg.n_shared))
    mix /= np.linalg.norm(mix, axis=0, keepdims=True) * math.sqrt(cfg.n_shared)
    return mix


def _session_concentrations(cfg: SimConfig, montage: Montage,
                            pattern: np.ndarray, conditions: np.ndarray,
                            rng: np.random.Generator,
                            shared_mix: np.ndarray | None = None) -> np.ndarray:
    """Chromophore series (T, n_pairs, 2) in mM for one session."""
    n_t = cfg.n_times
    n_p = pattern.size
    t_axis = np.arange(n_t) / cfg.fs_hz

    tail_s = 30.0
    kernel_t = np.arange(0.0, cfg.task_s + tail_s, 1.0 / cfg.fs_hz)
    h = double_gamma_hrf(np.arange(0.0, tail_s, 1.0 / cfg.fs_hz),
                         cfg.hrf_peak_s, cfg.hrf_undershoot_s,
                         cfg.hrf_undershoot_ratio)
    box = np.ones(int(round(cfg.task_s * cfg.fs_hz)))
    g = np.convolve(box, h)[:kernel_t.size]
    m = g.max()
    if m > 0:
        g = g / m

    drive = np.zeros(n_t)
    amps = np.asarray(cfg.amplitude_scale) * cfg.effect_amp_mm
    for k, cond in zip(cfg.onset_samples(), conditions):
        stop = min(int(k) + g.size, n_t)
        drive[int(k):stop] += amps[cond] * g[:stop - int(k)]

    hbo = pattern[None, :] * drive[:, None]

    hbo = hbo + cfg.pink_sd_mm * _pink(rng, n_t, n_p).T
    hbr = HBR_EFFECT_RATIO * pattern[None, :] * drive[:, None]
    hbr = hbr + cfg.hbr_pink_ratio * cfg.pink_sd_mm * _pink(rng, n_t, n_p).T

    if cfg.n_shared > 0 and cfg.shared_sd_mm > 0:
        latent = _pink(rng, n_t, cfg.n_shared)
        mix = shared_mix if shared_mix is not None else _draw_mixing(cfg, n_p, rng)
        common = (mix @ latent).T * (cfg.shared_sd_mm * math.sqrt(n_p))
        hbo = hbo + common
        hbr = hbr + cfg.hbr_shared_ratio * common

    phase = rng.uniform(0, 2 * np.pi)
    card_gain = 1.0 + 0.15 * rng.standard_normal(n_p)
    card = np.sin(2 * np.pi * cfg.cardiac_hz * t_axis + phase)
    hbo = hbo + cfg.cardiac_sd_mm * math.sqrt(2.0) * card[:, None] * card_gain[None, :]
    hbr = hbr + cfg.hbr_cardiac_ratio * cfg.cardiac_sd_mm * math.sqrt(2.0) \
        * card[:, None] * card_gain[None, :]

    slope = rng.standard_normal(n_p)
    f_d = rng.uniform(0.0008, 0.003, n_p)
    ph_d = rng.uniform(0, 2 * np.pi, n_p)
    lin = (2.0 * t_axis / t_axis[-1] - 1.0)[:, None] * slope[None, :]
    sine = np.sin(2 * np.pi * f_d[None, :] * t_axis[:, None] + ph_d[None, :])
    drift = cfg.drift_sd_mm * (lin + sine) / math.sqrt(2.0)
    hbo = hbo + drift
    hbr = hbr + cfg.hbr_drift_ratio * drift

    return np.stack([hbo, hbr], axis=-1)


def _session_events(cfg: SimConfig, rng: np.random.Generator) -> tuple[tuple[Event, ...], np.ndarray]:
    conditions = np.empty(cfg.trials_per_session, int)
    per_set = cfg.blocks_per_set * cfg.trials_per_block
    for s in range(cfg.task_sets):
        block_conditions = rng.permutation(3)
        for b in range(cfg.blocks_per_set):
            lo = s * per_set + b * cfg.trials_per_block
            conditions[lo:lo + cfg.trials_per_block] = block_conditions[b % 3]
    onsets = cfg.onset_samples()
    events = tuple(
        Event(sample=int(onsets[k]), condition=int(conditions[k]),
              block=k // cfg.trials_per_block,
              task_set=k // per_set)
        for k in range(cfg.trials_per_session))
    return events, conditions


def _artifact_plan(cfg: SimConfig, montage: Montage, support_pairs: np.ndarray,
                   rng: np.random.Generator) -> dict:
    """Per-session bad channels leaving every channel pair jointly clean.

    Off-effect plans are disjoint across sessions.  With artifacts_on_effect
    the effect-bearing channels fill the plan first and may each go bad in
    up to two sessions, so artifact repair stays load bearing while any two
    channels remain jointly good in at least one pooled session.
    """
    pair_channels, _ = montage.pair_table()
    support_channels = set(pair_channels[support_pairs].ravel().tolist())
    n = montage.n_channels
    per = cfg.dead_per_session + cfg.noisy_per_session
    need = per * cfg.n_sessions
    if cfg.artifacts_on_effect:
        base = list(rng.permutation(sorted(support_channels)))
        if per > len(base):
            raise ValidationError("artifact plan thicker than effect support")
        eligible = base + base
        eligible += list(rng.permutation(
            [c for c in range(n) if c not in support_channels]))
    else:
        eligible = list(rng.permutation(
            [c for c in range(n) if c not in support_channels]))
    if need > len(eligible):
        raise ValidationError("artifact plan larger than eligible channel pool")
    plans = {}
    n_win = cfg.n_times // int(round(cfg.artifact_window_s * cfg.fs_hz))
    for s in range(cfg.n_sessions):
        chunk = eligible[s * per:(s + 1) * per]
        dead = chunk[:cfg.dead_per_session]
        noisy = chunk[cfg.dead_per_session:]
        good = [c for c in range(n) if c not in chunk]
        spikes = [[int(rng.choice(good)), int(rng.integers(0, n_win))]
                  for _ in range(cfg.spikes_per_session)]
        plans[f"ses-{s:02d}"] = {"dead": [int(c) for c in dead],
                                 "noisy": [int(c) for c in noisy],
                                 "spikes": spikes}
    return plans


def bayes_accuracy(cfg: SimConfig, montage: Montage, pattern: np.ndarray,
                   rng: np.random.Generator,
                   shared_mix: np.ndarray | None = None) -> float:
    """Ideal-observer accuracy of the extreme-condition contrast.

    Monte-Carlo matched filter at the concentration level: the statistic is
    the inner product of the planted spatio-temporal template with a noisy
    single-trial window drawn from the same noise recipe.  Accuracy is
    Phi(d / 2) for the resulting standardized separation d.
    """
    win = np.arange(0.0, cfg.task_s + 15.0, 1.0 / cfg.fs_hz)
    h = double_gamma_hrf(np.arange(0.0, 30.0, 1.0 / cfg.fs_hz),
                         cfg.hrf_peak_s, cfg.hrf_undershoot_s,
                         cfg.hrf_undershoot_ratio)
    box = np.ones(int(round(cfg.task_s * cfg.fs_hz)))
    g = np.convolve(box, h)[:win.size]
    m = g.max()
    if m > 0:
        g = g / m
    template = pattern[:, None] * g[None, :]
    t_norm2 = float((template ** 2).sum())
    amps = np.asarray(cfg.amplitude_scale) * cfg.effect_amp_mm
    delta_mu = (amps[2] - amps[0]) * t_norm2

    n_p = pattern.size
    n_t = win.size
    stats = np.empty(cfg.bayes_mc_trials)
    t_axis = win
    for i in range(cfg.bayes_mc_trials):
        noise = cfg.pink_sd_mm * _pink(rng, n_t, n_p)
        if cfg.n_shared > 0 and cfg.shared_sd_mm > 0:
            latent = _pink(rng, n_t, cfg.n_shared)
            mix = shared_mix if shared_mix is not None else _draw_mixing(cfg, n_p, rng)
            noise = noise + (mix @ latent) * (cfg.shared_sd_mm * math.sqrt(n_p))
        card = np.sin(2 * np.pi * cfg.cardiac_hz * t_axis + rng.uniform(0, 2 * np.pi))
        noise = noise + cfg.cardiac_sd_mm * math.sqrt(2.0) * card[None, :] \
            * (1.0 + 0.15 * rng.standard_normal((n_p, 1)))
        f_d = rng.uniform(0.0008, 0.003, (n_p, 1))
        ph_d = rng.uniform(0, 2 * np.pi, (n_p, 1))
        drift = cfg.drift_sd_mm / math.sqrt(2.0) * (
            rng.standard_normal((n_p, 1)) * (2 * t_axis / t_axis[-1] - 1)[None, :]
            + np.sin(2 * np.pi * f_d * t_axis[None, :] + ph_d))
        stats[i] = float((template * (noise + drift)).sum())
    sd = float(stats.std(ddof=1))
    if sd == 0:
        return 1.0
    return float(norm.cdf(delta_mu / (2.0 * sd)))


def generate_corpus(cfg: SimConfig | None = None) -> Corpus:
    """Deterministic corpus from a seed: recordings, montage, ground truth."""
    cfg = cfg or SimConfig()
    cols = max(c for c in range(1, min(10, cfg.n_pairs) + 1)
               if cfg.n_pairs % c == 0)
    montage = desk_montage(n_pairs=cfg.n_pairs, cols=cols)
    root = np.random.SeedSequence(cfg.seed)
    ss_pattern, ss_plan, ss_bayes, *ss_sessions = root.spawn(3 + cfg.n_sessions)

    pattern, support = effect_pattern(montage, cfg.effect_width_mm,
                                      np.random.default_rng(ss_pattern))
    plans = _artifact_plan(cfg, montage, support, np.random.default_rng(ss_plan))
    shared_mix = None
    if cfg.stable_shared_mixing and cfg.n_shared > 0 and cfg.shared_sd_mm > 0:
        # spawned after the fixed children so corpora without the flag keep
        # their exact streams
        (ss_mix,) = root.spawn(1)
        shared_mix = _draw_mixing(cfg, cfg.n_pairs, np.random.default_rng(ss_mix))
    bayes = bayes_accuracy(cfg, montage, pattern, np.random.default_rng(ss_bayes),
                           shared_mix=shared_mix)

    table = ExtinctionTable()
    recordings = []
    truth_sessions = {}
    n_det = montage.detectors.shape[0]
    for s in range(cfg.n_sessions):
        sid = f"ses-{s:02d}"
        rng = np.random.default_rng(ss_sessions[s])
        events, conditions = _session_events(cfg, rng)
        conc = _session_concentrations(cfg, montage, pattern, conditions, rng,
                                       shared_mix=shared_mix)
        od = chromophore_forward(conc, montage, table)

        i0 = cfg.i0_base * np.exp(cfg.i0_jitter * rng.standard_normal(montage.n_channels))
        amb_level = cfg.ambient_base * (
            1.0 + cfg.ambient_jitter * rng.standard_normal(n_det))
        t_axis = np.arange(cfg.n_times) / cfg.fs_hz
        ramp = cfg.ambient_ramp * (t_axis / t_axis[-1])[:, None]
        phases = rng.uniform(0, 2 * np.pi, n_det)
        slow = 5.0 * np.sin(2 * np.pi * 0.002 * t_axis[:, None] + phases[None, :])
        ambient = amb_level[None, :] + ramp + slow
        intensity = i0[None, :] * np.power(10.0, -od) \
            + ambient[:, montage.channel_detector]
        if cfg.quantize:
            intensity = np.round(intensity)
            ambient = np.round(ambient)
        rec = SessionRecording(
            montage=montage,
            intensity=intensity.astype(np.float32),
            ambient=ambient.astype(np.float32),
            events=events, fs_hz=cfg.fs_hz, session_id=sid,
            subject_id=f"sub-{s:02d}")
        rec = plant_artifacts(rec, plans[sid], rng,
                              window_s=cfg.artifact_window_s,
                              quantize=cfg.quantize)
        recordings.append(rec)
        truth_sessions[sid] = {"conditions": conditions.tolist(),
                               "plan": plans[sid]}

    pair_channels, _ = montage.pair_table()
    truth = {
        "pattern": pattern.tolist(),
        "support_pairs": support.tolist(),
        "support_channels": sorted(set(pair_channels[support].ravel().tolist())),
        "effect_amp_mm": cfg.effect_amp_mm,
        "amplitude_scale": list(cfg.amplitude_scale),
        "bayes_accuracy": bayes,
        "sessions": truth_sessions,
        "seed": cfg.seed,
    }
    return Corpus(recordings=tuple(recordings), montage=montage, truth=truth)


def save_corpus(corpus: Corpus, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "montage.json").write_text(
        json.dumps(corpus.montage.to_dict(), sort_keys=True, indent=1))
    (root / "truth.json").write_text(
        json.dumps(corpus.truth, sort_keys=True, indent=1))
    for rec in corpus.recordings:
        save_session(rec, root / rec.session_id)


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    montage = Montage.from_dict(json.loads((root / "montage.json").read_text()))
    truth_path = root / "truth.json"
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else {}
    recs = []
    for p in sorted(root.iterdir()):
        if p.is_dir() and (p / "session.json").exists():
            recs.append(load_session(p))
    if not recs:
        raise ValidationError(f"{root}: no sessions found")
    return Corpus(recordings=tuple(recs), montage=montage, truth=truth)
