"""Incremental ZCA whitening with shrinkage.

The running second-moment matrix is updated every sample; the whitening
transform itself is recomputed only at declared boundaries (trial edges),
so the map applied within a trial is constant and linear.
"""

from __future__ import annotations

import bisect
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, ValidationError

DEFAULT_SHRINKAGE = 0.5
EIG_FLOOR_REL = 1e-12


def shrink(cov: np.ndarray, lam: float) -> np.ndarray:
    """Shrink toward the diagonal: (1 - lam) * C + lam * diag(C)."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"shrinkage {lam} outside [0, 1]")
    cov = np.asarray(cov, float)
    return (1.0 - lam) * cov + lam * np.diag(np.diag(cov))


def whitening_transform(cov: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root with a relative eigenvalue floor.

    Eigenvalues are clipped at 1e-12 times the largest before inversion so
    near-singular directions are damped instead of exploding.
    """
    cov = np.asarray(cov, float)
    cov = 0.5 * (cov + cov.T)
    e, u = np.linalg.eigh(cov)
    lam_max = e[-1]
    if not np.isfinite(lam_max) or lam_max <= 0:
        raise NumericalError("second-moment matrix has no positive eigenvalue")
    e = np.maximum(e, EIG_FLOOR_REL * lam_max)
    w = (u * (1.0 / np.sqrt(e))) @ u.T
    return 0.5 * (w + w.T)


@dataclass
class ZcaState:
    """Mutable whitening state: running moment, count, current transform.

    boundaries holds the cumulative sample counts after which the transform
    is refreshed; updates between boundaries only touch the moment matrix.
    """

    cov: np.ndarray
    count: int
    w: np.ndarray
    lam: float
    boundaries: tuple[int, ...] = ()
    _next_boundary: int = field(default=0, repr=False)

    def refresh(self) -> None:
        """Recompute the transform from the current shrunk moment matrix."""
        self.w = whitening_transform(shrink(self.cov, self.lam))


def zca_init(train: np.ndarray, lam: float = DEFAULT_SHRINKAGE,
             boundaries: tuple[int, ...] = ()) -> ZcaState:
    """Initial state from a block of samples (time x channels).

    The moment matrix is the uncentered mean of sample outer products.
    Counts below a tenth of the channel count draw a warning; zero samples
    are an error.
    """
    train = np.asarray(train, float)
    if train.ndim != 2:
        raise ValidationError("training block must be (time x channels)")
    t, n = train.shape
    if t == 0:
        raise ValidationError("cannot initialize whitening from zero samples")
    if t < n / 10:
        warnings.warn(f"whitening initialized from {t} samples for {n} channels",
                      stacklevel=2)
    bounds = tuple(sorted(int(b) for b in boundaries))
    cov = train.T @ train / t
    state = ZcaState(cov=cov, count=t, w=np.empty(0), lam=lam, boundaries=bounds,
                     _next_boundary=bisect.bisect_right(bounds, t))
    state.refresh()
    return state


def zca_update(state: ZcaState, sample: np.ndarray) -> None:
    """Fold one sample into the running moment; refresh at boundaries.

    C_t = ((t - 1) C_{t-1} + o o^T) / t with t the new total count.
    """
    o = np.asarray(sample, float)
    if o.shape != (state.cov.shape[0],):
        raise ValidationError("sample length does not match state")
    t = state.count + 1
    state.cov = ((t - 1) * state.cov + np.outer(o, o)) / t
    state.count = t
    if (state._next_boundary < len(state.boundaries)
            and state.boundaries[state._next_boundary] == t):
        state._next_boundary += 1
        state.refresh()


def whiten(state: ZcaState, x: np.ndarray) -> np.ndarray:
    """Apply the current transform to a sample (n,) or block (time x n)."""
    x = np.asarray(x, float)
    if x.ndim == 1:
        return state.w @ x
    return x @ state.w.T
