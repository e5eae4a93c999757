"""Linear spatio-temporal feature extraction.

Optical density becomes chromophore concentrations through per-pair 2x2
inverse pathlength blocks, trials are cut on a fixed peri-onset window,
low-pass resampled onto a coarse grid by an exact-ratio polyphase stage,
then flattened channel-major and z-scored with training-set statistics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType

import numpy as np
from scipy.signal import firwin, upfirdn

from .core import (DEFAULT_SEGMENT_WINDOW, Event, Montage, NumericalError,
                   TrialFeatures, ValidationError)

# Molar extinction, 1/(mM cm), (HbO, HbR) per wavelength.
DEFAULT_EXTINCTION_1_MM_CM = {
    680.0: (0.2906, 2.4078),
    850.0: (1.0580, 0.6913),
}
DEFAULT_DPF = 6.0
DEFAULT_TARGET_HZ = 0.2
MAX_BLOCK_CONDITION = 100.0
FILTER_HALF_ORDER = 10  # taps per side, in units of the downsampling factor
KAISER_BETA = 8.6


@dataclass(frozen=True)
class ExtinctionTable:
    """Extinction coefficients and differential pathlength factor."""

    coefficients: dict = field(
        default_factory=lambda: dict(DEFAULT_EXTINCTION_1_MM_CM))
    dpf: float = DEFAULT_DPF

    def __post_init__(self):
        coeff = {float(k): (float(v[0]), float(v[1]))
                 for k, v in self.coefficients.items()}
        object.__setattr__(self, "coefficients", MappingProxyType(coeff))
        if self.dpf <= 0:
            raise ValidationError("differential pathlength factor must be positive")

    def __reduce__(self):
        # the read-only coefficient view does not pickle
        return (ExtinctionTable, (dict(self.coefficients), self.dpf))

    def row(self, wavelength_nm: float) -> tuple[float, float]:
        try:
            return self.coefficients[float(wavelength_nm)]
        except KeyError:
            raise ValidationError(
                f"no extinction coefficients for {wavelength_nm} nm") from None


def pair_transforms(montage: Montage, table: ExtinctionTable | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Forward and inverse 2x2 pathlength blocks per dual-wavelength pair.

    Row r of the forward block maps (HbO, HbR) in mM to optical density at
    the pair's r-th wavelength: entries eps * L_cm * dpf.  Returns
    (forward (C,2,2), inverse (C,2,2)); blocks with condition number at or
    above 100 are rejected.
    """
    table = table or ExtinctionTable()
    pair_channels, _ = montage.pair_table()
    sep_cm = montage.separations() / 10.0
    fwd = np.empty((pair_channels.shape[0], 2, 2))
    for p, (lo, hi) in enumerate(pair_channels):
        length = sep_cm[lo]
        for r, ch in enumerate((lo, hi)):
            e_hbo, e_hbr = table.row(montage.channel_wavelength[ch])
            fwd[p, r] = (e_hbo * length * table.dpf, e_hbr * length * table.dpf)
    conds = np.linalg.cond(fwd)
    if np.any(conds >= MAX_BLOCK_CONDITION):
        worst = int(np.argmax(conds))
        raise NumericalError(
            f"extinction block for pair {worst} ill-conditioned (cond={conds[worst]:.1f})")
    return fwd, np.linalg.inv(fwd)


def to_chromophores(od: np.ndarray, montage: Montage,
                    table: ExtinctionTable | None = None) -> np.ndarray:
    """Invert the pathlength blocks: (..., n_channels) -> (..., C, 2).

    The chromophore axis is (HbO, HbR) in mM.
    """
    _, inv = pair_transforms(montage, table)
    od = np.asarray(od, float)
    pair_channels, _ = montage.pair_table()
    od_pairs = od[..., pair_channels]  # (..., C, 2)
    return np.einsum("pij,...pj->...pi", inv, od_pairs)


def chromophore_forward(conc: np.ndarray, montage: Montage,
                        table: ExtinctionTable | None = None) -> np.ndarray:
    """Forward map (..., C, 2) concentrations -> (..., n_channels) OD."""
    fwd, _ = pair_transforms(montage, table)
    conc = np.asarray(conc, float)
    pair_channels, _ = montage.pair_table()
    od_pairs = np.einsum("pij,...pj->...pi", fwd, conc)
    out = np.empty(conc.shape[:-2] + (montage.n_channels,))
    out[..., pair_channels[:, 0]] = od_pairs[..., 0]
    out[..., pair_channels[:, 1]] = od_pairs[..., 1]
    return out


def segment_trials(stream: np.ndarray, events: tuple[Event, ...], fs: float,
                   window_s: tuple[float, float] = DEFAULT_SEGMENT_WINDOW
                   ) -> list[tuple[int, Event, np.ndarray]]:
    """Cut peri-onset segments; time moves to the last axis.

    stream is (time, ...); each trial yields (event_index, event, segment)
    with segment (..., L).  The window is [start, stop) relative to onset
    in seconds.  Out-of-bounds trials are skipped with a warning.
    """
    stream = np.asarray(stream)
    lo = int(round(window_s[0] * fs))
    hi = int(round(window_s[1] * fs))
    if hi <= lo:
        raise ValidationError("segment window must have positive length")
    out = []
    for k, ev in enumerate(events):
        a, b = ev.sample + lo, ev.sample + hi
        if a < 0 or b > stream.shape[0]:
            warnings.warn(f"trial {k} window [{a}, {b}) outside recording, skipped",
                          stacklevel=2)
            continue
        out.append((k, ev, np.moveaxis(stream[a:b], 0, -1)))
    return out


def _resample_ratio(fs: float, target_hz: float) -> tuple[int, int]:
    frac = Fraction(str(target_hz)) / Fraction(str(fs))
    frac = frac.limit_denominator(10_000)
    return frac.numerator, frac.denominator


def resample_kernel(up: int, down: int) -> np.ndarray:
    """Windowed-sinc low-pass for the polyphase stage, unity DC gain.

    Cutoff sits at 90% of the target Nyquist; in units normalized to the
    upsampled Nyquist that is 0.9 / down regardless of the rates.
    """
    numtaps = 2 * FILTER_HALF_ORDER * down + 1
    return firwin(numtaps, 0.9 / down, window=("kaiser", KAISER_BETA))


def resample_trial(segment: np.ndarray, fs: float,
                   target_hz: float = DEFAULT_TARGET_HZ) -> np.ndarray:
    """Polyphase resampling of (..., L) onto the coarse output grid.

    The rational ratio is derived exactly from the two rates; the segment
    is reflect-padded by one downsampling factor per side so every output
    window sits fully inside padded data, and outputs are cropped so sample
    j lands exactly at j * (fs / target) input samples from trial onset.
    """
    x = np.asarray(segment, float)
    up, down = _resample_ratio(fs, target_hz)
    length = x.shape[-1]
    if length <= down:
        raise ValidationError(
            f"trial of {length} samples too short to resample by {up}/{down}")
    pad = [(0, 0)] * (x.ndim - 1) + [(down, down)]
    padded = np.pad(x, pad, mode="reflect")
    h = resample_kernel(up, down) * up
    y = upfirdn(h, padded, up=up, down=down, axis=-1)
    # conv delay (len(h)-1)/2 plus pad*up is an exact multiple of down
    start = (pad[-1][0] * up + (len(h) - 1) // 2) // down
    t_out = -((-length * up) // down)
    if y.shape[-1] < start + t_out:
        raise NumericalError("resampler output shorter than expected")
    return y[..., start:start + t_out]


def assemble_features(session_id: str,
                      trials: list[tuple[int, Event, np.ndarray]],
                      contrast: tuple[int, int] = (0, 2)
                      ) -> list[TrialFeatures]:
    """Flatten resampled trials into labelled feature vectors.

    Each entry carries (event_index, event, array (C, 2, T)).  Flattening
    is channel-major, chromophore, then time: flat index c*2*T + w*T + t.
    Trials whose condition is outside the contrast are dropped; the first
    contrast condition maps to label 0, the second to label 1.
    """
    if len(contrast) != 2 or contrast[0] == contrast[1]:
        raise ValidationError("contrast must name two distinct conditions")
    out = []
    seen = set()
    for idx, ev, arr in trials:
        if ev.condition not in contrast:
            continue
        if idx in seen:
            raise ValidationError(f"duplicate trial id {idx} in session {session_id}")
        seen.add(idx)
        arr = np.asarray(arr, float)
        if arr.ndim != 3 or arr.shape[1] != 2:
            raise ValidationError("trial array must be (channels, 2, time)")
        out.append(TrialFeatures(
            x=arr.reshape(arr.shape[0], -1), label=contrast.index(ev.condition),
            session_id=session_id, trial_id=idx, block=ev.block,
            task_set=ev.task_set, condition=ev.condition))
    if not out:
        raise ValidationError(
            f"contrast {contrast} selects no trials in session {session_id}")
    return out


def zscore_fit(trials: list[TrialFeatures]) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population sd over pooled training trials.

    Zero-variance features get sd 1 with a warning so they pass through
    centered but unscaled.
    """
    if not trials:
        raise ValidationError("cannot fit statistics on zero trials")
    x = np.stack([t.flat for t in trials])
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    n_zero = int(np.count_nonzero(sigma == 0))
    if n_zero:
        warnings.warn(f"{n_zero} features have zero variance; sd forced to 1",
                      stacklevel=2)
        sigma = np.where(sigma == 0, 1.0, sigma)
    return mu, sigma


def zscore_apply(trial: TrialFeatures, mu: np.ndarray,
                 sigma: np.ndarray) -> TrialFeatures:
    """Standardize one trial with training statistics."""
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    if mu.shape != (trial.flat.size,) or sigma.shape != mu.shape:
        raise ValidationError("statistics length does not match features")
    if np.any(sigma <= 0):
        raise ValidationError("scale must be strictly positive")
    z = (trial.flat - mu) / sigma
    return TrialFeatures(x=z.reshape(trial.x.shape), label=trial.label,
                         session_id=trial.session_id, trial_id=trial.trial_id,
                         block=trial.block, task_set=trial.task_set,
                         condition=trial.condition)
