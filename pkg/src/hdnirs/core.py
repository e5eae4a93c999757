"""Domain types and on-disk formats shared by the whole toolchain.

All types are immutable after construction (arrays are frozen) and safe to
share between threads.  Sessions and models are persisted as a JSON metadata
sidecar plus little-endian float32 row-major binaries, format version
"hdnirs/1".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "hdnirs/1"

#: default trial segment window (s, relative to task performance onset) used
#: when validating that every event's segment lies inside the recording
DEFAULT_SEGMENT_WINDOW = (-15.0, 40.0)


class ValidationError(ValueError):
    """An input violates a documented type invariant or file schema."""


class FormatError(ValidationError):
    """A persisted file is malformed or has an unknown format version."""


class NumericalError(RuntimeError):
    """A numerical routine failed (divergence, singularity, non-finite)."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _as_unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms <= 0):
        raise ValidationError("zero-length normal vector")
    return v / norms


# ---------------------------------------------------------------------------
# Montage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Montage:
    """Optode geometry and channel wiring.

    Parameters
    ----------
    sources, detectors : (n_src, 3), (n_det, 3) float arrays
        Optode positions in mm.
    channel_source, channel_detector : (n,) int arrays
        Per-channel optode indices.
    channel_wavelength : (n,) float array
        Wavelength in nm; every physical source-detector pair must appear at
        exactly two distinct wavelengths (dual-wavelength channels).
    source_module, detector_module : (n_src,), (n_det,) int arrays
        Module id per optode.  Channels may not span modules.
    normals : (n, 3) float array or None
        Unit surface normal per channel.  When None, the per-module optode
        plane normal is used.
    """

    sources: np.ndarray
    detectors: np.ndarray
    channel_source: np.ndarray
    channel_detector: np.ndarray
    channel_wavelength: np.ndarray
    source_module: np.ndarray
    detector_module: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "sources", _freeze(np.asarray(self.sources, float)))
        object.__setattr__(self, "detectors", _freeze(np.asarray(self.detectors, float)))
        object.__setattr__(self, "channel_source", _freeze(np.asarray(self.channel_source, int)))
        object.__setattr__(self, "channel_detector", _freeze(np.asarray(self.channel_detector, int)))
        object.__setattr__(self, "channel_wavelength", _freeze(np.asarray(self.channel_wavelength, float)))
        object.__setattr__(self, "source_module", _freeze(np.asarray(self.source_module, int)))
        object.__setattr__(self, "detector_module", _freeze(np.asarray(self.detector_module, int)))
        self._validate()
        if self.normals is None:
            object.__setattr__(self, "normals", _freeze(self._plane_normals()))
        else:
            norm = _as_unit_rows(np.asarray(self.normals, float))
            if norm.shape != (self.n_channels, 3):
                raise ValidationError(
                    f"normals shape {norm.shape} != ({self.n_channels}, 3)")
            object.__setattr__(self, "normals", _freeze(norm))

    # -- invariants ---------------------------------------------------------

    def _validate(self):
        n = self.n_channels
        if not (len(self.channel_detector) == len(self.channel_wavelength) == n):
            raise ValidationError("channel arrays have mismatched lengths")
        if len(self.source_module) != len(self.sources):
            raise ValidationError("source_module length != number of sources")
        if len(self.detector_module) != len(self.detectors):
            raise ValidationError("detector_module length != number of detectors")
        if n == 0:
            raise ValidationError("montage has no channels")
        if self.channel_source.min() < 0 or self.channel_source.max() >= len(self.sources):
            raise ValidationError("channel references invalid source index")
        if self.channel_detector.min() < 0 or self.channel_detector.max() >= len(self.detectors):
            raise ValidationError("channel references invalid detector index")
        # each physical pair appears once per wavelength, two wavelengths
        pairs: dict[tuple[int, int], set[float]] = {}
        for s, d, w in zip(self.channel_source, self.channel_detector, self.channel_wavelength):
            key = (int(s), int(d))
            seen = pairs.setdefault(key, set())
            if float(w) in seen:
                raise ValidationError(f"pair {key} repeats wavelength {w}")
            seen.add(float(w))
        for key, wls in pairs.items():
            if len(wls) != 2:
                raise ValidationError(
                    f"pair {key} has {len(wls)} wavelengths, expected a dual-wavelength pair")
        if np.any(self.separations() <= 0):
            raise ValidationError("non-positive source-detector separation")
        src_mod = self.source_module[self.channel_source]
        det_mod = self.detector_module[self.channel_detector]
        if np.any(src_mod != det_mod):
            raise ValidationError("channel spans two modules")

    # -- derived geometry ---------------------------------------------------

    @property
    def n_channels(self) -> int:
        return len(self.channel_source)

    def separations(self) -> np.ndarray:
        """Euclidean source-detector distance per channel (mm)."""
        return np.linalg.norm(
            self.sources[self.channel_source] - self.detectors[self.channel_detector],
            axis=1)

    def channel_module(self) -> np.ndarray:
        """Module id per channel."""
        return self.source_module[self.channel_source]

    def midpoints(self) -> np.ndarray:
        """Plain channel midpoints (s + d) / 2, per channel (mm)."""
        return 0.5 * (self.sources[self.channel_source]
                      + self.detectors[self.channel_detector])

    def pair_table(self) -> tuple[np.ndarray, np.ndarray]:
        """Dual-wavelength pair structure.

        Returns
        -------
        pair_channels : (C, 2) int array
            Channel indices per pair, sorted by wavelength (low, high).
            Pairs are ordered by first occurrence in the channel list.
        pair_of_channel : (n,) int array
            Pair index of every channel.
        """
        order: dict[tuple[int, int], int] = {}
        members: list[list[int]] = []
        for i, (s, d) in enumerate(zip(self.channel_source, self.channel_detector)):
            key = (int(s), int(d))
            if key not in order:
                order[key] = len(members)
                members.append([])
            members[order[key]].append(i)
        pair_channels = np.empty((len(members), 2), int)
        pair_of_channel = np.empty(self.n_channels, int)
        for p, idx in enumerate(members):
            lo, hi = sorted(idx, key=lambda i: self.channel_wavelength[i])
            pair_channels[p] = (lo, hi)
            pair_of_channel[lo] = pair_of_channel[hi] = p
        return pair_channels, pair_of_channel

    def subset(self, channel_idx: np.ndarray) -> "Montage":
        """Montage restricted to the given channel indices (optodes kept)."""
        idx = np.asarray(channel_idx, int)
        return Montage(
            sources=self.sources,
            detectors=self.detectors,
            channel_source=self.channel_source[idx],
            channel_detector=self.channel_detector[idx],
            channel_wavelength=self.channel_wavelength[idx],
            source_module=self.source_module,
            detector_module=self.detector_module,
            normals=self.normals[idx],
        )

    def _plane_normals(self) -> np.ndarray:
        """Per-module optode-plane normal, assigned to every channel.

        The plane is fit to all optodes of the module (least-variance
        direction); the sign points away from the global optode centroid,
        falling back to positive z (then x) when that is degenerate.
        """
        all_pos = np.vstack([self.sources, self.detectors])
        modules = np.concatenate([self.source_module, self.detector_module])
        global_centroid = all_pos.mean(axis=0)
        per_module: dict[int, np.ndarray] = {}
        for m in np.unique(modules):
            pos = all_pos[modules == m]
            centered = pos - pos.mean(axis=0)
            _, _, vt = np.linalg.svd(centered, full_matrices=False)
            normal = vt[-1]
            outward = pos.mean(axis=0) - global_centroid
            sign = np.dot(normal, outward)
            if abs(sign) < 1e-9:
                for axis in (2, 0, 1):
                    if abs(normal[axis]) > 1e-9:
                        sign = normal[axis]
                        break
            if sign < 0:
                normal = -normal
            per_module[int(m)] = normal
        ch_mod = self.channel_module()
        return np.array([per_module[int(m)] for m in ch_mod])

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "sources": self.sources.tolist(),
            "detectors": self.detectors.tolist(),
            "channel_source": self.channel_source.tolist(),
            "channel_detector": self.channel_detector.tolist(),
            "channel_wavelength": self.channel_wavelength.tolist(),
            "source_module": self.source_module.tolist(),
            "detector_module": self.detector_module.tolist(),
            "normals": np.asarray(self.normals).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Montage":
        try:
            return cls(
                sources=np.array(d["sources"], float),
                detectors=np.array(d["detectors"], float),
                channel_source=np.array(d["channel_source"], int),
                channel_detector=np.array(d["channel_detector"], int),
                channel_wavelength=np.array(d["channel_wavelength"], float),
                source_module=np.array(d["source_module"], int),
                detector_module=np.array(d["detector_module"], int),
                normals=np.array(d["normals"], float) if d.get("normals") is not None else None,
            )
        except KeyError as e:
            raise FormatError(f"montage metadata missing field {e}") from e


# ---------------------------------------------------------------------------
# SessionRecording
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    """One trial marker: sample index of task onset plus CV bookkeeping ids."""

    sample: int
    condition: int
    block: int
    task_set: int

    def to_list(self) -> list[int]:
        return [int(self.sample), int(self.condition), int(self.block), int(self.task_set)]


@dataclass(frozen=True)
class SessionRecording:
    """Raw per-channel intensity time series with ambient readings and events.

    ``intensity`` is (time x channels) and ``ambient`` (time x detectors),
    both in ADC counts; columns of ``intensity`` follow
    ``montage.channel_*`` order.
    """

    montage: Montage
    intensity: np.ndarray
    ambient: np.ndarray
    events: tuple[Event, ...]
    fs_hz: float
    session_id: str
    subject_id: str

    def __post_init__(self):
        object.__setattr__(self, "intensity", _freeze(np.asarray(self.intensity, np.float32)))
        object.__setattr__(self, "ambient", _freeze(np.asarray(self.ambient, np.float32)))
        object.__setattr__(self, "events", tuple(self.events))
        self._validate()

    def _validate(self):
        t, n = self.intensity.shape
        if self.ambient.shape[0] != t:
            raise ValidationError(
                f"intensity has {t} samples but ambient has {self.ambient.shape[0]}")
        if n != self.montage.n_channels:
            raise ValidationError(
                f"intensity has {n} channels but montage has {self.montage.n_channels}")
        if self.ambient.shape[1] != len(self.montage.detectors):
            raise ValidationError(
                f"ambient has {self.ambient.shape[1]} columns but montage has "
                f"{len(self.montage.detectors)} detectors")
        if self.fs_hz <= 0:
            raise ValidationError("sampling rate must be positive")
        samples = [e.sample for e in self.events]
        if any(b <= a for a, b in zip(samples, samples[1:])):
            raise ValidationError("event sample indices must be strictly increasing")
        lo = int(round(DEFAULT_SEGMENT_WINDOW[0] * self.fs_hz))
        hi = int(round(DEFAULT_SEGMENT_WINDOW[1] * self.fs_hz))
        for e in self.events:
            if not (0 <= e.sample < t):
                raise ValidationError(f"event at sample {e.sample} outside recording")
            if e.sample + lo < 0 or e.sample + hi > t:
                raise ValidationError(
                    f"segment window of event at sample {e.sample} leaves the recording")

    @property
    def n_times(self) -> int:
        return self.intensity.shape[0]

    @property
    def n_trials(self) -> int:
        return len(self.events)


# ---------------------------------------------------------------------------
# QualityMask
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QualityMask:
    """Per-channel bad set and per-window mask (True = masked).

    ``window_mask`` has one row per non-overlapping CoV window; a channel in
    ``bad_channels`` has its entire column masked.
    """

    bad_channels: np.ndarray
    window_mask: np.ndarray
    window_s: float

    def __post_init__(self):
        bad = np.unique(np.asarray(self.bad_channels, int))
        object.__setattr__(self, "bad_channels", _freeze(bad))
        object.__setattr__(self, "window_mask", _freeze(np.asarray(self.window_mask, bool)))
        n = self.window_mask.shape[1]
        if bad.size and (bad.min() < 0 or bad.max() >= n):
            raise ValidationError("bad channel index out of range")
        if bad.size and not self.window_mask[:, bad].all():
            raise ValidationError("bad channel has unmasked windows")

    @property
    def n_channels(self) -> int:
        return self.window_mask.shape[1]

    def good_channels(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_channels), self.bad_channels)


# ---------------------------------------------------------------------------
# TrialFeatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialFeatures:
    """One trial's z-scored feature matrix (C dual channels x W*T)."""

    x: np.ndarray
    label: int
    session_id: str
    trial_id: int
    block: int
    task_set: int
    condition: int

    def __post_init__(self):
        object.__setattr__(self, "x", _freeze(np.asarray(self.x, float)))
        if not np.all(np.isfinite(self.x)):
            raise ValidationError(
                f"trial {self.trial_id} of session {self.session_id} has non-finite features")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label}")

    @property
    def flat(self) -> np.ndarray:
        """Feature vector in the normative flattening order.

        Channel-major, then wavelength/chromophore, then time: the entry for
        (channel c, chromophore w, time t) sits at ``c*W*T + w*T + t``.
        """
        return self.x.reshape(-1)


# ---------------------------------------------------------------------------
# DecoderModel
# ---------------------------------------------------------------------------

FLATTENING_ORDER = "channel-major, then wavelength/chromophore, then time"


@dataclass(frozen=True)
class DecoderModel:
    """Trained decoder weights plus the preprocessing statistics.

    Numeric payloads are stored as float32 so that the on-disk format
    (weights.f32) round-trips bit-exactly.  The effective decoder for session
    s is ``vec(W_s + W_0)`` with intercept ``b_s``.
    """

    W0: np.ndarray                     # (C, W*T)
    session_weights: dict              # session id -> (C, W*T)
    intercepts: dict                   # session id -> float
    intercept0: float
    mu: np.ndarray                     # (D,)
    sigma: np.ndarray                  # (D,)
    alpha: float
    beta: float
    gamma: float
    mode: str                          # "subject-specific" | "subject-independent"
    config: dict = field(default_factory=dict)
    covariance_provenance: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "W0", _freeze(np.asarray(self.W0, np.float32)))
        sw = {str(k): _freeze(np.asarray(v, np.float32))
              for k, v in self.session_weights.items()}
        object.__setattr__(self, "session_weights", sw)
        object.__setattr__(self, "intercepts",
                           {str(k): float(v) for k, v in self.intercepts.items()})
        object.__setattr__(self, "mu", _freeze(np.asarray(self.mu, np.float32)))
        object.__setattr__(self, "sigma", _freeze(np.asarray(self.sigma, np.float32)))
        object.__setattr__(self, "covariance_provenance", tuple(self.covariance_provenance))
        self._validate()

    def _validate(self):
        if self.mode not in ("subject-specific", "subject-independent"):
            raise ValidationError(f"unknown decoder mode {self.mode!r}")
        D = self.W0.size
        if self.mu.shape != (D,) or self.sigma.shape != (D,):
            raise ValidationError("z-score statistics do not match weight dimension")
        if not np.all(self.sigma > 0):
            raise ValidationError("sigma must be positive elementwise")
        arrays = [self.W0, self.mu, self.sigma, *self.session_weights.values()]
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValidationError("model contains non-finite values")
        for k, w in self.session_weights.items():
            if w.shape != self.W0.shape:
                raise ValidationError(f"session {k} weight shape mismatch")
            if k not in self.intercepts:
                raise ValidationError(f"session {k} has weights but no intercept")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def effective_weights(self, session_id: str | None = None,
                          allow_fallback: bool = False) -> tuple[np.ndarray, float]:
        """(W_s + W_0, b_s) for a session, in float64.

        In subject-independent mode the session id is ignored.  In
        subject-specific mode an unknown session raises unless
        ``allow_fallback`` opts in to the shared model with the mean
        intercept.
        """
        W0 = self.W0.astype(float)
        if self.mode == "subject-independent":
            return W0, float(self.intercept0)
        key = str(session_id)
        if key in self.session_weights:
            return W0 + self.session_weights[key].astype(float), self.intercepts[key]
        if allow_fallback:
            b = float(np.mean(list(self.intercepts.values()))) if self.intercepts else self.intercept0
            return W0, b
        raise ValidationError(
            f"session {session_id!r} unknown to subject-specific model "
            "(pass allow_fallback=True to use the shared weights)")


# ---------------------------------------------------------------------------
# Binary + JSON I/O helpers
# ---------------------------------------------------------------------------

def write_f32(path: Path, arr: np.ndarray) -> None:
    """Write a row-major little-endian float32 binary."""
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise FormatError(
            f"{path.name}: found {data.size} float32 values, metadata expects {expected}")
    return data.reshape(shape)


def _check_version(meta: dict, path: Path) -> None:
    version = meta.get("format")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown format version {version!r}")


def save_session(rec: SessionRecording, path: str | Path) -> None:
    """Persist a recording as session.json + intensity.f32 + ambient.f32."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_VERSION,
        "session_id": rec.session_id,
        "subject_id": rec.subject_id,
        "fs_hz": rec.fs_hz,
        "n_times": rec.n_times,
        "n_channels": rec.montage.n_channels,
        "n_detectors": len(rec.montage.detectors),
        "units": {"intensity": "adc_counts", "ambient": "adc_counts",
                  "positions": "mm"},
        "events": [e.to_list() for e in rec.events],
        "montage": rec.montage.to_dict(),
    }
    (path / "session.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    write_f32(path / "intensity.f32", rec.intensity)
    write_f32(path / "ambient.f32", rec.ambient)


def load_session(path: str | Path) -> SessionRecording:
    """Load and validate a session directory written by :func:`save_session`."""
    path = Path(path)
    meta_path = path / "session.json"
    if not meta_path.exists():
        raise FormatError(f"{path}: no session.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{meta_path}: invalid JSON ({e})") from e
    _check_version(meta, meta_path)
    montage = Montage.from_dict(meta["montage"])
    t = int(meta["n_times"])
    intensity = read_f32(path / "intensity.f32", (t, int(meta["n_channels"])))
    ambient = read_f32(path / "ambient.f32", (t, int(meta["n_detectors"])))
    events = tuple(Event(*map(int, row)) for row in meta["events"])
    return SessionRecording(
        montage=montage, intensity=intensity, ambient=ambient, events=events,
        fs_hz=float(meta["fs_hz"]), session_id=str(meta["session_id"]),
        subject_id=str(meta["subject_id"]))


def save_model(model: DecoderModel, path: str | Path) -> None:
    """Persist a decoder as model.json + weights.f32."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    session_ids = sorted(model.session_weights)
    blocks = [("W0", model.W0), ("mu", model.mu), ("sigma", model.sigma)]
    blocks += [(f"W:{sid}", model.session_weights[sid]) for sid in session_ids]
    layout = []
    offset = 0
    parts = []
    for name, arr in blocks:
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        parts.append(np.asarray(arr, "<f4").reshape(-1))
    meta = {
        "format": FORMAT_VERSION,
        "kind": "decoder-model",
        "mode": model.mode,
        "shape": list(model.W0.shape),
        "flattening_order": FLATTENING_ORDER,
        "alpha": model.alpha, "beta": model.beta, "gamma": model.gamma,
        "intercept0": model.intercept0,
        "intercepts": {sid: model.intercepts[sid] for sid in session_ids},
        "config": model.config,
        "covariance_provenance": list(model.covariance_provenance),
        "layout": layout,
        "n_values": offset,
    }
    (path / "model.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    write_f32(path / "weights.f32", np.concatenate(parts) if parts else np.empty(0))


def load_model(path: str | Path) -> DecoderModel:
    path = Path(path)
    meta_path = path / "model.json"
    if not meta_path.exists():
        raise FormatError(f"{path}: no model.json")
    meta = json.loads(meta_path.read_text())
    _check_version(meta, meta_path)
    data = read_f32(path / "weights.f32", (int(meta["n_values"]),))
    arrays = {}
    for entry in meta["layout"]:
        size = int(np.prod(entry["shape"]))
        start = int(entry["offset"])
        arrays[entry["name"]] = data[start:start + size].reshape(entry["shape"])
    session_weights = {name[2:]: arr for name, arr in arrays.items()
                       if name.startswith("W:")}
    return DecoderModel(
        W0=arrays["W0"], session_weights=session_weights,
        intercepts=meta["intercepts"], intercept0=float(meta["intercept0"]),
        mu=arrays["mu"], sigma=arrays["sigma"],
        alpha=float(meta["alpha"]), beta=float(meta["beta"]), gamma=float(meta["gamma"]),
        mode=meta["mode"], config=meta.get("config", {}),
        covariance_provenance=tuple(meta.get("covariance_provenance", ())))
