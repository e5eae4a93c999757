"""Robust grand-average spatial covariance and bad-channel imputation.

The grand covariance is a masked Huber mean of short-window covariance
matrices pooled across sessions; it drives least-squares reconstruction of
bad channels from good ones, solved independently per module block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (FORMAT_VERSION, FormatError, NumericalError, QualityMask,
                   ValidationError, read_f32, write_f32)

HUBER_ETA = 0.75
MAD_SCALE = 1.4826
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 500
RIDGE_SCALE = 1e-9
IMPUTE_NOISE_REL_SD = 1e-3


@dataclass(frozen=True)
class GrandCovariance:
    """Huber-mean spatial covariance with provenance.

    cov is symmetric n x n and block-diagonal across modules (cross-module
    entries are structural zeros).  dispersion is the robust scale of the
    per-window deviations the Huber weights were derived from.
    """

    cov: np.ndarray
    dispersion: float
    provenance: tuple[str, ...]
    module_of_channel: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.cov, float)
        object.__setattr__(self, "cov", c)
        object.__setattr__(self, "provenance", tuple(self.provenance))
        if self.module_of_channel is not None:
            object.__setattr__(self, "module_of_channel",
                               np.asarray(self.module_of_channel, int))
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValidationError("covariance must be square")
        if np.abs(c - c.T).max(initial=0.0) != 0.0:
            raise ValidationError("covariance must be exactly symmetric")

    @property
    def n_channels(self) -> int:
        return self.cov.shape[0]

    def channel_dispersion(self) -> np.ndarray:
        """Per-channel scale, the square root of the diagonal."""
        return np.sqrt(np.maximum(self.cov.diagonal(), 0.0))


@dataclass(frozen=True)
class ImputationModel:
    """Per-session linear reconstruction of bad channels from good ones.

    Rows of R correspond 1:1 to bad (in B order); columns to good (in G
    order).  noise_scale holds the post-interpolation standard deviation per
    bad channel once estimated (None before the noiseless first pass).
    """

    R: np.ndarray
    bad: np.ndarray
    good: np.ndarray
    noise_scale: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, float))
        object.__setattr__(self, "bad", np.asarray(self.bad, int))
        object.__setattr__(self, "good", np.asarray(self.good, int))
        if self.R.shape != (len(self.bad), len(self.good)):
            raise ValidationError("R shape does not match bad/good sets")
        if not np.all(np.isfinite(self.R)):
            raise ValidationError("imputation matrix has non-finite entries")
        if self.noise_scale is not None:
            ns = np.asarray(self.noise_scale, float)
            if ns.shape != (len(self.bad),):
                raise ValidationError("noise_scale length must match bad set")
            object.__setattr__(self, "noise_scale", ns)


def _mask_windows_for_channels(mask: QualityMask, fs: float, n_times: int,
                               window_samples: int) -> np.ndarray:
    """Channel-masked flags per covariance window (windows x channels).

    A channel is masked in a covariance window when any overlapping quality
    window is masked for it.
    """
    q = int(round(mask.window_s * fs))
    n_win = n_times // window_samples
    out = np.zeros((n_win, mask.n_channels), bool)
    n_q = mask.window_mask.shape[0]
    for w in range(n_win):
        lo = (w * window_samples) // q
        hi = min(((w + 1) * window_samples - 1) // q, n_q - 1)
        out[w] = mask.window_mask[lo:hi + 1].any(axis=0)
    return out


def windowed_covariances(od: np.ndarray, mask: QualityMask, fs: float,
                         window_s: float = 10.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sample covariance per non-overlapping window, with entry masks.

    od is (time x channels), high-pass filtered rather than band-passed so
    broadband channel correlation is retained.  An entry (i, j) is masked
    when channel i or j is masked in that window.  A trailing partial window
    is dropped.
    """
    od = np.asarray(od, float)
    w = int(round(window_s * fs))
    if w < 2:
        raise ValidationError("covariance window must span at least 2 samples")
    n_win = od.shape[0] // w
    ch_masked = _mask_windows_for_channels(mask, fs, od.shape[0], w)
    out = []
    for k in range(n_win):
        block = od[k * w:(k + 1) * w]
        c = np.cov(block, rowvar=False)
        m = ch_masked[k]
        entry_mask = m[:, None] | m[None, :]
        out.append((c, entry_mask))
    return out


def _structural_mask(n: int, module_of_channel: np.ndarray | None) -> np.ndarray:
    """True at cross-module entries, which are excluded from every sum."""
    if module_of_channel is None:
        return np.zeros((n, n), bool)
    m = np.asarray(module_of_channel, int)
    return m[:, None] != m[None, :]


def huber_mean_covariance(covs: list[tuple[np.ndarray, np.ndarray]],
                          module_of_channel: np.ndarray | None = None,
                          provenance: tuple[str, ...] = ()) -> GrandCovariance:
    """Masked robust Huber mean of windowed covariance matrices.

    Steps: (1) elementwise masked median M; (2) robust dispersion
    sigma = 1.4826 * median_w ||C_w - M||_F over unmasked entries;
    (3) iteratively reweighted averaging with per-window weight
    min(1, delta / ||C_w - M||_F), delta = 0.75 * sigma, iterated to
    relative change < 1e-8.  Masked entries are excluded from every sum;
    cross-module entries are structural zeros.
    """
    if len(covs) < 2:
        raise ValidationError("need at least 2 windows for a robust mean")
    stack = np.stack([c for c, _ in covs])
    n = stack.shape[1]
    struct = _structural_mask(n, module_of_channel)
    masked = np.stack([m for _, m in covs]) | struct[None, :, :]
    valid = ~masked

    counts = valid.sum(axis=0)
    empty = (counts == 0) & ~struct
    if empty.any():
        i, j = np.argwhere(empty)[0]
        raise ValidationError(
            f"channel pair ({int(i)}, {int(j)}) has no unmasked window")

    vals = np.where(valid, stack, np.nan)
    vals[:, struct] = 0.0  # all-NaN structural slices; zeroed again below
    m = np.nanmedian(vals, axis=0)
    m = np.where(struct, 0.0, m)

    def residual_norms(center: np.ndarray) -> np.ndarray:
        d = np.where(valid, stack - center[None, :, :], 0.0)
        return np.sqrt((d * d).sum(axis=(1, 2)))

    r = residual_norms(m)
    sigma = MAD_SCALE * np.median(r)
    delta = HUBER_ETA * sigma

    for _ in range(IRLS_MAX_ITER):
        r = residual_norms(m)
        w = np.where(r <= delta, 1.0, np.divide(delta, r, out=np.ones_like(r),
                                                where=r > 0))
        num = np.einsum("w,wij->ij", w, np.where(valid, stack, 0.0))
        den = np.einsum("w,wij->ij", w, valid.astype(float))
        m_new = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        m_new = np.where(struct, 0.0, m_new)
        change = np.linalg.norm(m_new - m) / max(np.linalg.norm(m), 1e-300)
        m = m_new
        if change < IRLS_TOL:
            break
    else:
        raise NumericalError(
            f"Huber mean did not converge in {IRLS_MAX_ITER} iterations")

    m = 0.5 * (m + m.T)  # exact symmetry against masked-count asymmetries
    return GrandCovariance(cov=m, dispersion=float(sigma),
                           provenance=provenance,
                           module_of_channel=module_of_channel)


def leave_session_out_covariance(
        session_windows: dict, target: str,
        module_of_channel: np.ndarray | None = None) -> GrandCovariance:
    """Huber mean over the pooled windows of every session except target.

    session_windows maps session id to the output of windowed_covariances;
    pooling order is sorted session id then window index, so the result
    never depends on the target session's contents.
    """
    others = sorted(sid for sid in session_windows if sid != target)
    if not others:
        raise ValidationError("leave-session-out needs at least 2 sessions")
    pooled = [cw for sid in others for cw in session_windows[sid]]
    return huber_mean_covariance(pooled, module_of_channel=module_of_channel,
                                 provenance=tuple(others))


def fit_imputation(cbar: GrandCovariance, bad: np.ndarray,
                   module_of_channel: np.ndarray | None = None) -> ImputationModel:
    """Least-squares reconstruction weights for the bad channels.

    Solves R = C[B,G] (C[G,G] + eps I)^-1 independently per module block,
    with ridge eps = 1e-9 * trace(C[G,G]) / |G| per block.  Equivalent to
    the square-root least-squares formulation because C is PSD.
    """
    n = cbar.n_channels
    bad = np.unique(np.asarray(bad, int))
    if bad.size and (bad.min() < 0 or bad.max() >= n):
        raise ValidationError("bad channel index out of range")
    good = np.setdiff1d(np.arange(n), bad)
    if good.size == 0:
        raise ValidationError("no good channels to impute from")
    modules = module_of_channel
    if modules is None:
        modules = cbar.module_of_channel
    if modules is None:
        modules = np.zeros(n, int)
    modules = np.asarray(modules, int)

    R = np.zeros((bad.size, good.size))
    pos_b = {int(c): k for k, c in enumerate(bad)}
    pos_g = {int(c): k for k, c in enumerate(good)}
    for mod in np.unique(modules):
        b_m = [c for c in bad if modules[c] == mod]
        g_m = [c for c in good if modules[c] == mod]
        if not b_m:
            continue
        if not g_m:
            raise ValidationError(f"module {mod} has no good channels")
        c_gg = cbar.cov[np.ix_(g_m, g_m)]
        c_bg = cbar.cov[np.ix_(b_m, g_m)]
        eps = RIDGE_SCALE * np.trace(c_gg) / len(g_m)
        try:
            sol = np.linalg.solve(c_gg + eps * np.eye(len(g_m)), c_bg.T).T
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"singular good-channel block in module {mod}") from e
        if not np.all(np.isfinite(sol)):
            raise NumericalError(f"non-finite imputation weights in module {mod}")
        rows = [pos_b[c] for c in b_m]
        cols = [pos_g[c] for c in g_m]
        R[np.ix_(rows, cols)] = sol
    return ImputationModel(R=R, bad=bad, good=good)


def with_noise_scale(model: ImputationModel, od: np.ndarray) -> ImputationModel:
    """Estimate per-channel noise scales from a noiseless imputation pass.

    The scale of channel i is the standard deviation of its reconstructed
    series over the session.
    """
    if model.bad.size == 0:
        return ImputationModel(R=model.R, bad=model.bad, good=model.good,
                               noise_scale=np.zeros(0))
    recon = np.asarray(od, float)[:, model.good] @ model.R.T
    return ImputationModel(R=model.R, bad=model.bad, good=model.good,
                           noise_scale=recon.std(axis=0))


def impute(o: np.ndarray, model: ImputationModel,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Replace bad entries by their least-squares reconstruction.

    Accepts a single sample (n,) or a (time x n) matrix.  When rng is given
    and noise scales are fitted, Gaussian noise with sd 1e-3 times the
    channel's post-interpolation sd is added to keep the data full rank;
    omit rng for the noiseless pass.
    """
    o = np.asarray(o, float)
    out = o.copy()
    if model.bad.size == 0:
        return out
    recon = o[..., model.good] @ model.R.T
    if rng is not None and model.noise_scale is not None:
        recon = recon + rng.normal(
            0.0, 1.0, size=recon.shape) * (IMPUTE_NOISE_REL_SD * model.noise_scale)
    out[..., model.bad] = recon
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_covariance(gc: GrandCovariance, path: str | Path) -> None:
    """Persist as covariance.f32 (little-endian float32) + JSON provenance."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_VERSION,
        "kind": "grand-covariance",
        "n_channels": gc.n_channels,
        "dispersion": gc.dispersion,
        "provenance": list(gc.provenance),
        "module_of_channel": (gc.module_of_channel.tolist()
                              if gc.module_of_channel is not None else None),
    }
    (path / "covariance.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    write_f32(path / "covariance.f32", gc.cov)


def load_covariance(path: str | Path) -> GrandCovariance:
    path = Path(path)
    meta_path = path / "covariance.json"
    if not meta_path.exists():
        raise FormatError(f"{path}: no covariance.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != FORMAT_VERSION:
        raise FormatError(f"{meta_path}: unknown format version {meta.get('format')!r}")
    n = int(meta["n_channels"])
    cov = read_f32(path / "covariance.f32", (n, n)).astype(float)
    cov = 0.5 * (cov + cov.T)
    mods = meta.get("module_of_channel")
    return GrandCovariance(cov=cov, dispersion=float(meta["dispersion"]),
                           provenance=tuple(meta["provenance"]),
                           module_of_channel=np.array(mods, int) if mods else None)
