"""Raw-intensity conditioning, quality masking, and temporal filtering.

The decode path is: ambient correction, noise-floor shift, channel selection
by source-detector separation, CoV/intensity quality masking, conversion to
optical-density changes, and zero-phase Butterworth band-pass filtering.  The
covariance path uses a high-pass instead of the band-pass so that channel
correlation structure is kept across a broader frequency range.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal

from .core import Montage, QualityMask, SessionRecording, ValidationError


@dataclass(frozen=True)
class PreprocConfig:
    """Thresholds and filter parameters for the preprocessing stage.

    cov_threshold applies to the window CoV divided by the channel length in
    cm; a channel is bad when more than bad_fraction of its windows exceed
    that, or when its mean intensity falls below min_intensity ADC counts.
    """

    offset: float = 1.0
    dither_sd: float = 0.5
    min_sep: float = 10.0
    max_sep: float = 50.0
    cov_threshold: float = 30.0
    cov_window: float = 5.0
    bad_fraction: float = 0.5
    min_intensity: float = 15.0
    bp_low: float = 0.01
    bp_high: float = 0.9
    filter_order: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.bp_low < self.bp_high):
            raise ValidationError("need 0 < bp_low < bp_high")
        if self.min_sep >= self.max_sep:
            raise ValidationError("need min_sep < max_sep")
        for name in ("cov_threshold", "cov_window", "bad_fraction", "min_intensity",
                     "filter_order"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.dither_sd < 0 or self.offset < 0:
            raise ValidationError("offset and dither_sd must be nonnegative")


@dataclass(frozen=True)
class OpticalDensitySeries:
    """Optical-density changes, referenced to the within-session OD mean.

    od is (time x channels); i0 holds the per-channel session-mean intensity
    the reference was derived from.
    """

    od: np.ndarray
    i0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "od", np.asarray(self.od, float))
        object.__setattr__(self, "i0", np.asarray(self.i0, float))
        if self.od.ndim != 2 or self.i0.shape != (self.od.shape[1],):
            raise ValidationError("od must be (time x channels) with one i0 per channel")


def ambient_correct(rec: SessionRecording) -> np.ndarray:
    """Subtract each detector's ambient reading from its channels.

    Output may be <= 0; the noise-floor shift handles that downstream.
    """
    det = rec.montage.channel_detector
    return rec.intensity.astype(float) - rec.ambient.astype(float)[:, det]


def shift_noise_floor(x: np.ndarray, cfg: PreprocConfig,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Shift the noise floor up by cfg.offset plus Gaussian dither.

    The dither keeps quantized counts from collapsing onto few levels; it is
    drawn independently per entry and is deterministic for a fixed rng seed.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out = x + cfg.offset
    if cfg.dither_sd > 0:
        out = out + rng.normal(0.0, cfg.dither_sd, size=x.shape)
    return out


def select_channels(montage: Montage, cfg: PreprocConfig) -> np.ndarray:
    """Indices of channels with separation in [min_sep, max_sep].

    Both wavelengths of a pair share the same optodes, hence the same
    separation, so pairs are kept or dropped together.
    """
    sep = montage.separations()
    idx = np.flatnonzero((sep >= cfg.min_sep) & (sep <= cfg.max_sep))
    if idx.size == 0:
        raise ValidationError(
            f"no channel separation falls inside [{cfg.min_sep}, {cfg.max_sep}] mm")
    return idx


def sliding_cov(x: np.ndarray, window_s: float, fs: float) -> np.ndarray:
    """Coefficient of variation per non-overlapping window and channel.

    CoV = sample std (ddof 1) / |sample mean|; a zero-mean window reports
    +inf, which always exceeds any threshold.  A trailing partial window is
    dropped.
    """
    w = int(round(window_s * fs))
    if w < 2:
        raise ValidationError("CoV window must span at least 2 samples")
    n_win = x.shape[0] // w
    if n_win == 0:
        raise ValidationError("signal shorter than one CoV window")
    blocks = x[:n_win * w].reshape(n_win, w, x.shape[1])
    mean = blocks.mean(axis=1)
    std = blocks.std(axis=1, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cov = std / np.abs(mean)
    cov[np.abs(mean) == 0] = np.inf
    # 0/0 (constant zero window) counts as a violation too
    cov[np.isnan(cov)] = np.inf
    return cov


def quality_mask(x: np.ndarray, montage: Montage, cfg: PreprocConfig,
                 fs: float) -> QualityMask:
    """Flag bad channels and bad windows from CoV and mean-intensity criteria.

    x must be ambient-corrected and floor-shifted, one column per montage
    channel.  A window is masked when its CoV divided by the channel length
    in cm exceeds cfg.cov_threshold; a channel is bad when the violating
    fraction exceeds cfg.bad_fraction or its session-mean intensity is below
    cfg.min_intensity.
    """
    if x.shape[1] != montage.n_channels:
        raise ValidationError("intensity column count does not match the montage")
    cov = sliding_cov(x, cfg.cov_window, fs)
    length_cm = montage.separations() / 10.0
    violations = (cov / length_cm[np.newaxis, :]) > cfg.cov_threshold
    frac = violations.mean(axis=0)
    dim = x.mean(axis=0) < cfg.min_intensity
    bad = np.flatnonzero((frac > cfg.bad_fraction) | dim)
    if bad.size == montage.n_channels:
        raise ValidationError("every channel failed the quality criteria")
    window_mask = violations.copy()
    window_mask[:, bad] = True
    return QualityMask(bad_channels=bad, window_mask=window_mask,
                       window_s=cfg.cov_window)


def to_delta_od(x: np.ndarray,
                good_channels: np.ndarray | None = None) -> OpticalDensitySeries:
    """Optical-density change relative to the within-session OD average.

    od[t, c] = -log10(x[t, c]) + mean_t log10(x[:, c]); column means are 0 by
    construction.  Non-positive intensity on a good channel is an error.  On
    channels outside good_channels the intensity is clipped to a tiny
    positive value first; their OD is placeholder data that imputation
    replaces downstream.
    """
    x = np.asarray(x, float)
    n = x.shape[1]
    good = np.arange(n) if good_channels is None else np.asarray(good_channels, int)
    nonpos = x[:, good] <= 0
    if nonpos.any():
        t, j = np.argwhere(nonpos)[0]
        raise ValidationError(
            f"non-positive intensity on good channel {int(good[j])} at sample {int(t)}")
    od = -np.log10(np.maximum(x, 1e-12))
    od -= od.mean(axis=0, keepdims=True)
    i0 = x.mean(axis=0)
    return OpticalDensitySeries(od=od, i0=i0)


# ---------------------------------------------------------------------------
# Zero-phase filtering
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _design(kind: str, order: int, lo: float, hi: float, fs: float):
    nyq = fs / 2.0
    edges = (lo, hi) if kind == "bandpass" else (lo,)
    if any(f >= nyq for f in edges):
        raise ValidationError(f"filter edge at or above Nyquist ({nyq} Hz)")
    wn = [lo / nyq, hi / nyq] if kind == "bandpass" else lo / nyq
    return signal.butter(order, wn, btype=kind, output="sos")


@lru_cache(maxsize=32)
def _settle_length(sos_key: tuple, tol: float = 1e-4) -> int:
    """Samples until the filter's step response stays within tol of its
    final value; used to size the edge padding."""
    sos = np.array(sos_key).reshape(-1, 6)
    n = 4096
    while True:
        resp = signal.sosfilt(sos, np.ones(n))
        final = resp[-1]
        beyond = np.flatnonzero(np.abs(resp - final) > tol)
        # demand a settled tail at least half the horizon long, else extend
        if beyond.size == 0:
            return 1
        if beyond[-1] < n // 2:
            return int(beyond[-1]) + 1
        if n > 2 ** 22:
            raise ValidationError("filter does not settle; check design")
        n *= 2


def _zero_phase(od: OpticalDensitySeries, sos: np.ndarray) -> OpticalDensitySeries:
    settle = _settle_length(tuple(sos.reshape(-1)))
    padlen = 3 * settle
    if od.od.shape[0] <= padlen:
        raise ValidationError(
            f"signal of {od.od.shape[0]} samples too short for zero-phase "
            f"filtering (needs > {padlen})")
    out = signal.sosfiltfilt(sos, od.od, axis=0, padtype="odd", padlen=padlen)
    return OpticalDensitySeries(od=out, i0=od.i0)


def bandpass_zero_phase(od: OpticalDensitySeries, cfg: PreprocConfig,
                        fs: float) -> OpticalDensitySeries:
    """Forward-backward Butterworth band-pass; zero phase shift, DC removed."""
    sos = _design("bandpass", cfg.filter_order, cfg.bp_low, cfg.bp_high, fs)
    return _zero_phase(od, sos)


def highpass_zero_phase(od: OpticalDensitySeries, cutoff: float, fs: float,
                        order: int = 5) -> OpticalDensitySeries:
    """Forward-backward Butterworth high-pass (the covariance-path filter)."""
    sos = _design("highpass", order, cutoff, 0.0, fs)
    return _zero_phase(od, sos)
