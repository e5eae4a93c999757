"""Multi-task logistic decoder with trace-norm and structured Tikhonov terms.

One weight matrix per session plus a shared matrix, coupled by a trace norm
on the stacked session weights and smoothed by a compactly supported
spatial Laplacian and a second-difference temporal operator.  The problem
is jointly convex; it is solved by FISTA with backtracking, a singular
value soft-threshold proximal step, and function-value restarts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .core import (DecoderModel, Montage, NumericalError, TrialFeatures,
                   ValidationError)

SPATIAL_RADIUS_MM = 15.0
NORMAL_DISPLACEMENT_RATIO = 1.5
MODES = ("subject-specific", "subject-independent")


# ---------------------------------------------------------------------------
# Spatial operator
# ---------------------------------------------------------------------------

def compactly_supported_correlation(r: np.ndarray) -> np.ndarray:
    """Wendland-type C^4 correlation on normalized distance.

    Polynomial (1-r)^6 (6 + 36 r + 82 r^2 + 72 r^3 + 30 r^4 + 5 r^5) / 6 on
    [0, 1], zero beyond; positive definite in up to three dimensions.
    Negative input is an error.
    """
    r = np.asarray(r, float)
    if np.any(r < 0):
        raise ValidationError("normalized distance must be nonnegative")
    p = (6.0 + r * (36.0 + r * (82.0 + r * (72.0 + r * (30.0 + 5.0 * r))))) / 6.0
    return np.where(r < 1.0, (1.0 - r) ** 6 * p, 0.0)


def displaced_midpoints(montage: Montage,
                        ratio: float = NORMAL_DISPLACEMENT_RATIO) -> np.ndarray:
    """Per-pair midpoints pushed along the inward module normal.

    The displacement is separation / ratio, a crude depth proxy placing
    long channels deeper than short ones.  Returns (C, 3) in mm.
    """
    pair_channels, _ = montage.pair_table()
    lo = pair_channels[:, 0]
    mid = montage.midpoints()[lo]
    sep = montage.separations()[lo]
    if np.any(sep <= 0):
        raise ValidationError("zero-length channel")
    normals = np.asarray(montage.normals)[lo]
    return mid - normals * (sep / ratio)[:, None]


@dataclass(frozen=True)
class SpatialOperator:
    """Normalized Laplacian-type smoother on displaced channel positions.

    graph holds the unnormalized matrix, whose rows sum to zero exactly;
    laplacian is graph divided by the normalizer.
    """

    laplacian: sp.csr_matrix
    graph: sp.csr_matrix
    gram: sp.csr_matrix
    radius_mm: float
    denominator: float

    @property
    def n_channels(self) -> int:
        return self.laplacian.shape[0]


def correlation_matrix(positions: np.ndarray,
                       radius_mm: float = SPATIAL_RADIUS_MM) -> np.ndarray:
    """Pairwise compact correlation of positions (C, 3); unit diagonal."""
    pos = np.asarray(positions, float)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValidationError("positions must be (channels, 3)")
    if radius_mm <= 0:
        raise ValidationError("support radius must be positive")
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    return compactly_supported_correlation(d / radius_mm)


def build_spatial_operator(positions: np.ndarray,
                           radius_mm: float = SPATIAL_RADIUS_MM) -> SpatialOperator:
    """L = (Omega - D) / (1 - sum(Omega) / C), D = diag of row sums.

    Rows of Omega - D sum to zero exactly by construction.  A geometry
    where every channel is isolated makes the normalizer vanish and is
    rejected.
    """
    omega = correlation_matrix(positions, radius_mm)
    c = omega.shape[0]
    den = 1.0 - omega.sum() / c
    if abs(den) < 1e-12:
        raise ValidationError("degenerate geometry: correlation mass equals channel count")
    # Omega - D written with the diagonal as the negated float sum of its own
    # off-diagonal row, so every row sums to zero exactly
    a = omega.copy()
    np.fill_diagonal(a, 0.0)
    idx = np.arange(c)
    a[idx, idx] = -a.sum(axis=1)
    graph = sp.csr_matrix(a)
    graph.eliminate_zeros()
    lap_s = sp.csr_matrix(a / den)
    lap_s.eliminate_zeros()
    gram = (lap_s.T @ lap_s).tocsr()
    return SpatialOperator(laplacian=lap_s, graph=graph, gram=gram,
                           radius_mm=radius_mm, denominator=den)


def temporal_matrix(n: int) -> np.ndarray:
    """Second-difference operator with clamped ends, tridiag(-1, 2, -1).

    Strictly positive definite for any size.
    """
    if n < 1:
        raise ValidationError("temporal operator needs at least one sample")
    t = 2.0 * np.eye(n)
    idx = np.arange(n - 1)
    t[idx, idx + 1] = -1.0
    t[idx + 1, idx] = -1.0
    return t


@dataclass(frozen=True)
class PenaltyOperators:
    """Structured penalty operators; None disables the matching term."""

    spatial: SpatialOperator | None = None
    temporal: np.ndarray | None = None

    def temporal_gram(self) -> np.ndarray | None:
        if self.temporal is None:
            return None
        return self.temporal.T @ self.temporal


# ---------------------------------------------------------------------------
# Problem definition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MtlProblem:
    """Standardized trials stacked for the joint solve.

    x is (N, C, F) with F = chromophores * time; y holds 0/1 labels;
    session_of_trial indexes into session_ids.  Trials are ordered by
    (session, trial id) so the solve is deterministic.
    """

    x: np.ndarray
    y: np.ndarray
    session_of_trial: np.ndarray
    session_ids: tuple[str, ...]
    alpha: float
    beta: float
    gamma: float
    mode: str = "subject-specific"

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float))
        object.__setattr__(self, "y", np.asarray(self.y, int))
        object.__setattr__(self, "session_of_trial",
                           np.asarray(self.session_of_trial, int))
        object.__setattr__(self, "session_ids", tuple(self.session_ids))
        if self.x.ndim != 3:
            raise ValidationError("features must be (trials, channels, F)")
        n = self.x.shape[0]
        if self.y.shape != (n,) or self.session_of_trial.shape != (n,):
            raise ValidationError("labels and session index must match trials")
        if n == 0:
            raise ValidationError("no trials")
        if not np.all(np.isfinite(self.x)):
            raise ValidationError("features contain non-finite values")
        if not np.all(np.isin(self.y, (0, 1))):
            raise ValidationError("labels must be 0 or 1")
        for v, name in ((self.alpha, "alpha"), (self.beta, "beta"),
                        (self.gamma, "gamma")):
            if not np.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and nonnegative")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}")
        s = len(self.session_ids)
        if self.session_of_trial.min() < 0 or self.session_of_trial.max() >= s:
            raise ValidationError("session index out of range")
        for k in range(s):
            ys = self.y[self.session_of_trial == k]
            if ys.size == 0:
                raise ValidationError(f"session {self.session_ids[k]} has no trials")
            if ys.min() == ys.max():
                raise ValidationError(
                    f"session {self.session_ids[k]} has a single class")

    @classmethod
    def from_trials(cls, trials: list[TrialFeatures], alpha: float, beta: float,
                    gamma: float, mode: str = "subject-specific") -> "MtlProblem":
        if not trials:
            raise ValidationError("no trials")
        order = sorted(range(len(trials)),
                       key=lambda i: (trials[i].session_id, trials[i].trial_id))
        sids = tuple(sorted({t.session_id for t in trials}))
        pos = {s: k for k, s in enumerate(sids)}
        x = np.stack([trials[i].x for i in order]).astype(float)
        y = np.array([trials[i].label for i in order])
        sess = np.array([pos[trials[i].session_id] for i in order])
        return cls(x=x, y=y, session_of_trial=sess, session_ids=sids,
                   alpha=alpha, beta=beta, gamma=gamma, mode=mode)

    @property
    def n_trials(self) -> int:
        return self.x.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape[1], self.x.shape[2]


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-7
    max_iter: int = 5000
    backtrack_growth: float = 2.0
    power_iterations: int = 30

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.backtrack_growth <= 1:
            raise ValidationError("invalid solver configuration")


# ---------------------------------------------------------------------------
# Objective pieces on packed variables
# ---------------------------------------------------------------------------

class _Packing:
    """Flat-vector packing of (W_0, W_1..W_S, intercepts)."""

    def __init__(self, problem: MtlProblem):
        c, f = problem.shape
        self.c, self.f = c, f
        self.joint = problem.mode == "subject-specific"
        self.n_sessions = len(problem.session_ids) if self.joint else 0
        self.n_intercepts = len(problem.session_ids) if self.joint else 1
        self.size = (1 + self.n_sessions) * c * f + self.n_intercepts

    def w0(self, v: np.ndarray) -> np.ndarray:
        return v[:self.c * self.f].reshape(self.c, self.f)

    def ws(self, v: np.ndarray) -> np.ndarray:
        n = self.c * self.f
        return v[n:n * (1 + self.n_sessions)].reshape(self.n_sessions, self.c, self.f)

    def intercepts(self, v: np.ndarray) -> np.ndarray:
        return v[(1 + self.n_sessions) * self.c * self.f:]


def _tikhonov(w: np.ndarray, beta: float, gamma: float,
              spatial_gram, temporal_gram, c: int, f: int) -> tuple[float, np.ndarray]:
    """beta ||L W||_F^2 + gamma ||W x_t T||^2 + ||W||_F^2 and its gradient."""
    val = float(np.vdot(w, w))
    grad = 2.0 * w
    if beta > 0:
        aw = spatial_gram @ w
        val += beta * float(np.vdot(w, aw))
        grad = grad + (2.0 * beta) * aw
    if gamma > 0:
        w3 = w.reshape(c, 2, -1)
        q = w3 @ temporal_gram
        val += gamma * float(np.vdot(w3, q))
        grad = grad + (2.0 * gamma) * q.reshape(c, f)
    return val, grad


class _Objective:
    def __init__(self, problem: MtlProblem, ops: PenaltyOperators):
        self.p = problem
        self.pack = _Packing(problem)
        c, f = problem.shape
        if problem.beta > 0:
            if ops.spatial is None:
                raise ValidationError("spatial penalty requested without an operator")
            if ops.spatial.n_channels != c:
                raise ValidationError("spatial operator size does not match channels")
            self.spatial_gram = ops.spatial.gram
        else:
            self.spatial_gram = None
        if problem.gamma > 0:
            if ops.temporal is None:
                raise ValidationError("temporal penalty requested without an operator")
            if ops.temporal.shape[0] * 2 != f:
                raise ValidationError("temporal operator size does not match features")
            self.temporal_gram = ops.temporal.T @ ops.temporal
        else:
            self.temporal_gram = None
        self.slices = [np.flatnonzero(problem.session_of_trial == k)
                       for k in range(len(problem.session_ids))]
        self.y_pm = 2.0 * problem.y - 1.0
        self.xmat = np.ascontiguousarray(
            problem.x.reshape(problem.n_trials, -1))

    def _scores(self, v: np.ndarray) -> np.ndarray:
        p, pack = self.p, self.pack
        w0 = pack.w0(v)
        b = pack.intercepts(v)
        if pack.joint:
            ws = pack.ws(v)
            scores = np.empty(p.n_trials)
            for k, idx in enumerate(self.slices):
                e = (w0 + ws[k]).reshape(-1)
                scores[idx] = self.xmat[idx] @ e + b[k]
        else:
            scores = self.xmat @ w0.reshape(-1) + b[0]
        return scores

    def smooth(self, v: np.ndarray, need_grad: bool = True):
        """Loss plus Tikhonov terms; optionally the gradient."""
        p, pack = self.p, self.pack
        c, f = p.shape
        w0 = pack.w0(v)
        scores = self._scores(v)
        m = self.y_pm * scores
        val = float(np.logaddexp(0.0, -m).sum() / p.n_trials)
        t0, g0 = _tikhonov(w0, p.beta, p.gamma, self.spatial_gram,
                           self.temporal_gram, c, f)
        val += t0
        gws = None
        if pack.joint:
            ws = pack.ws(v)
            for k in range(pack.n_sessions):
                tk, gk = _tikhonov(ws[k], p.beta, p.gamma, self.spatial_gram,
                                   self.temporal_gram, c, f)
                val += tk
                if need_grad:
                    if gws is None:
                        gws = np.empty_like(ws)
                    gws[k] = gk
        if not need_grad:
            return val
        dz = -self.y_pm * expit(-m) / p.n_trials
        grad = np.zeros_like(v)
        gv0 = self.pack.w0(grad)
        gvb = self.pack.intercepts(grad)
        if pack.joint:
            gvs = self.pack.ws(grad)
            for k, idx in enumerate(self.slices):
                gk = (self.xmat[idx].T @ dz[idx]).reshape(c, f)
                gv0 += gk
                gvs[k] = gk + gws[k]
                gvb[k] = dz[idx].sum()
        else:
            gv0 += (self.xmat.T @ dz).reshape(c, f)
            gvb[0] = dz.sum()
        gv0 += g0
        return val, grad

    def nuclear(self, v: np.ndarray) -> float:
        if not self.pack.joint or self.p.alpha == 0 or self.pack.n_sessions == 0:
            return 0.0
        m = self.pack.ws(v).reshape(self.pack.n_sessions, -1).T
        return self.p.alpha * float(np.linalg.svd(m, compute_uv=False).sum())

    def prox(self, v: np.ndarray, step: float) -> np.ndarray:
        """Soft-threshold the singular values of the stacked session weights."""
        if not self.pack.joint or self.p.alpha == 0:
            return v
        out = v.copy()
        ws = self.pack.ws(out)
        m = ws.reshape(self.pack.n_sessions, -1).T
        u, s, vt = np.linalg.svd(m, full_matrices=False)
        s = np.maximum(s - self.p.alpha * step, 0.0)
        m_new = (u * s) @ vt
        ws[...] = m_new.T.reshape(ws.shape)
        return out

    def lipschitz_estimate(self, n_iter: int) -> float:
        """Warm-start curvature bound via power iteration on the data Gram."""
        p = self.p
        xmat = self.xmat
        rng = np.random.default_rng(0)
        v = rng.standard_normal(xmat.shape[1])
        v /= np.linalg.norm(v)
        lam = 1.0
        for _ in range(n_iter):
            w = xmat.T @ (xmat @ v)
            lam = float(np.linalg.norm(w))
            if lam == 0:
                break
            v = w / lam
        total = 0.25 * lam / p.n_trials + 2.0
        if p.beta > 0:
            u = rng.standard_normal(self.spatial_gram.shape[0])
            u /= np.linalg.norm(u)
            mu = 0.0
            for _ in range(n_iter):
                w = self.spatial_gram @ u
                mu = float(np.linalg.norm(w))
                if mu == 0:
                    break
                u = w / mu
            total += 2.0 * p.beta * mu
        if p.gamma > 0:
            total += 2.0 * p.gamma * float(
                np.linalg.eigvalsh(self.temporal_gram)[-1])
        return total


# ---------------------------------------------------------------------------
# FISTA
# ---------------------------------------------------------------------------

def solve(problem: MtlProblem, ops: PenaltyOperators | None = None,
          cfg: SolverConfig | None = None, mu: np.ndarray | None = None,
          sigma: np.ndarray | None = None,
          covariance_provenance: tuple[str, ...] = ()) -> DecoderModel:
    """Accelerated proximal gradient with backtracking and restarts.

    Starts from zeros (objective log 2), halves the step until the local
    quadratic model majorizes the smooth part, soft-thresholds singular
    values, and resets momentum whenever the objective rises.  Stops at
    relative objective change below tol; a non-finite objective raises
    NumericalError; hitting max_iter warns and returns the last iterate.
    """
    ops = ops or PenaltyOperators()
    cfg = cfg or SolverConfig()
    obj = _Objective(problem, ops)
    pack = obj.pack
    c, f = problem.shape

    x = np.zeros(pack.size)
    yv = x.copy()
    t_mom = 1.0
    lip = max(obj.lipschitz_estimate(cfg.power_iterations), 1e-12)
    f_prev = obj.smooth(x, need_grad=False) + obj.nuclear(x)
    f0 = f_prev
    n_iter = 0
    converged = False

    for n_iter in range(1, cfg.max_iter + 1):
        fy, gy = obj.smooth(yv)
        while True:
            step = 1.0 / lip
            x_new = obj.prox(yv - step * gy, step)
            diff = x_new - yv
            f_smooth = obj.smooth(x_new, need_grad=False)
            bound = fy + float(np.vdot(gy, diff)) + 0.5 * lip * float(np.vdot(diff, diff))
            if not np.isfinite(f_smooth):
                raise NumericalError("objective diverged to a non-finite value")
            if f_smooth <= bound + 1e-12 * max(1.0, abs(bound)):
                break
            lip *= cfg.backtrack_growth
            if lip > 1e18:
                raise NumericalError("backtracking failed; step underflow")
        f_new = f_smooth + obj.nuclear(x_new)
        if not np.isfinite(f_new):
            raise NumericalError("objective diverged to a non-finite value")
        if f_new > 10.0 * f0 + 10.0:
            raise NumericalError("objective diverged")

        if f_new > f_prev:
            # function-value restart: drop momentum, re-anchor at x_new
            t_mom = 1.0
            yv = x_new.copy()
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            yv = x_new + ((t_mom - 1.0) / t_next) * (x_new - x)
            t_mom = t_next
        rel = abs(f_new - f_prev) / max(abs(f_prev), 1e-12)
        x = x_new
        f_prev = f_new
        if rel < cfg.tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"solver stopped at max_iter={cfg.max_iter} "
                      f"(last relative change {rel:.2e})", stacklevel=2)

    if mu is None:
        mu = np.zeros(c * f)
    if sigma is None:
        sigma = np.ones(c * f)
    w0 = pack.w0(x)
    intercepts = {}
    session_weights = {}
    if pack.joint:
        ws = pack.ws(x)
        b = pack.intercepts(x)
        for k, sid in enumerate(problem.session_ids):
            session_weights[sid] = ws[k].astype(np.float32)
            intercepts[sid] = float(b[k])
        intercept0 = 0.0
    else:
        intercept0 = float(pack.intercepts(x)[0])
    return DecoderModel(
        W0=w0.astype(np.float32), session_weights=session_weights,
        intercepts=intercepts, intercept0=intercept0,
        mu=np.asarray(mu, np.float32), sigma=np.asarray(sigma, np.float32),
        alpha=problem.alpha, beta=problem.beta, gamma=problem.gamma,
        mode=problem.mode,
        config={"iterations": n_iter, "objective": float(f_prev),
                "converged": bool(converged)},
        covariance_provenance=tuple(covariance_provenance))


def objective_value(problem: MtlProblem, ops: PenaltyOperators,
                    v: np.ndarray) -> float:
    """Full objective at a packed variable vector (testing hook)."""
    obj = _Objective(problem, ops)
    return obj.smooth(v, need_grad=False) + obj.nuclear(v)


def smooth_gradient(problem: MtlProblem, ops: PenaltyOperators,
                    v: np.ndarray) -> tuple[float, np.ndarray]:
    """Smooth part and its gradient at a packed vector (testing hook)."""
    obj = _Objective(problem, ops)
    return obj.smooth(v)


def packed_size(problem: MtlProblem) -> int:
    return _Packing(problem).size


def prox_trace_norm(problem: MtlProblem, v: np.ndarray, step: float) -> np.ndarray:
    """Proximal map of the trace-norm term at the given step (testing hook)."""
    obj = _Objective(problem, PenaltyOperators())
    return obj.prox(v, step)


# ---------------------------------------------------------------------------
# Prediction and interpretation
# ---------------------------------------------------------------------------

def _standardize(model: DecoderModel, x: np.ndarray) -> np.ndarray:
    flat = np.asarray(x, float).reshape(-1)
    mu = model.mu.astype(float)
    sigma = model.sigma.astype(float)
    if flat.shape != mu.shape:
        raise ValidationError("feature length does not match model")
    return (flat - mu) / sigma


def decision_value(model: DecoderModel, x: np.ndarray,
                   session_id: str | None = None) -> float:
    """Linear score for one raw (unstandardized) trial (C, F) or flat."""
    w, b = model.effective_weights(session_id)
    z = _standardize(model, x)
    return float(z @ w.reshape(-1) + b)


def predict_proba(model: DecoderModel, x: np.ndarray,
                  session_id: str | None = None) -> float:
    """P(label = 1) for one raw trial."""
    return float(expit(decision_value(model, x, session_id)))


def predict_label(model: DecoderModel, x: np.ndarray,
                  session_id: str | None = None) -> int:
    """Hard label at threshold 0.5; an exact tie resolves to class 0."""
    return int(predict_proba(model, x, session_id) > 0.5)


def haufe_activation(model: DecoderModel, trials: list[TrialFeatures],
                     session_id: str | None = None) -> np.ndarray:
    """Forward-model activation pattern a = Cov(X) w, matrix-free.

    X is the standardized trial matrix; the covariance is never formed,
    a = X_c^T (X_c w) / (N - 1) with X_c column-centered.  Returns (C, F).
    """
    if len(trials) < 2:
        raise ValidationError("activation needs at least 2 trials")
    w, _ = model.effective_weights(session_id)
    z = np.stack([_standardize(model, t.x) for t in trials])
    z = z - z.mean(axis=0)
    a = z.T @ (z @ w.reshape(-1)) / (len(trials) - 1)
    return a.reshape(w.shape)


DEFAULT_SEPARATION_BANDS_MM = ((10.0, 27.5), (27.5, 50.0))


def summarize_weights(model: DecoderModel, montage: Montage,
                      session_id: str | None = None,
                      bands_mm: tuple = DEFAULT_SEPARATION_BANDS_MM) -> dict:
    """Aggregate absolute decoder weight by channel, time, and separation.

    Bands are [lo, hi) in mm over source-detector separation; an empty band
    tuple is an error.  Time and chromophore profiles are summed over
    channels.
    """
    if not bands_mm:
        raise ValidationError("at least one separation band required")
    # no named session -> summarize the shared component
    w, _ = model.effective_weights(session_id,
                                   allow_fallback=session_id is None)
    c = w.shape[0]
    w3 = np.abs(w.reshape(c, 2, -1))
    pair_channels, _ = montage.pair_table()
    sep = montage.separations()[pair_channels[:, 0]]
    per_channel = w3.sum(axis=(1, 2))
    total = float(per_channel.sum())
    band_mass = {}
    for lo, hi in bands_mm:
        sel = (sep >= lo) & (sep < hi)
        band_mass[f"{lo:g}-{hi:g}mm"] = (
            float(per_channel[sel].sum()) / total if total > 0 else 0.0)
    return {
        "per_channel": per_channel,
        "per_time": w3.sum(axis=(0, 1)),
        "per_chromophore": w3.sum(axis=(0, 2)),
        "separation_mm": sep,
        "band_mass": band_mass,
    }
