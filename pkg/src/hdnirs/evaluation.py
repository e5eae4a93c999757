"""Cross-validated evaluation, hyper-parameter search, and reporting.

Two schemes: blockwise (folds are the four task sets, order permuted per
session) and leave-one-session-out.  Hyper-parameters come from a nested
3-fold inner search; every fitted artifact carries the trial ids it was
derived from, and the audit hard-fails if any of them intersects an outer
test fold.
"""

from __future__ import annotations

import json
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import stats as sstats

from .core import Event, SessionRecording, ValidationError
from .features import segment_trials, to_chromophores
from .pipeline import (FoldData, PipelineConfig, assemble_fold,
                       build_fold_streams, build_penalty_operators,
                       derive_rng, eval_fold, fit_fold, prepare_session,
                       _check_homogeneous)

SCHEMES = ("blockwise", "loso")
BLOCKWISE_SETS = 4
ABLATION_COMPONENTS = ("zca", "imputation", "noise-floor-shift",
                       "mtl-coupling", "trace-norm", "spatial-tikhonov",
                       "temporal-tikhonov")
BASELINE_S = 5.0


class LeakageError(RuntimeError):
    """A fitted artifact's provenance intersects its outer test fold."""


@dataclass(frozen=True)
class SearchConfig:
    """Log-uniform random search over (alpha, beta, gamma).

    budget 0 evaluates the single log-range midpoint, which keeps the
    nested structure with minimal cost.
    """

    budget: int = 30
    lo: float = 1e-4
    hi: float = 1e2
    inner_tol: float = 1e-5
    inner_max_iter: int = 1200

    def __post_init__(self):
        if self.budget < 0 or not 0 < self.lo < self.hi:
            raise ValidationError("invalid search configuration")

    def candidates(self, rng: np.random.Generator) -> list[tuple[float, float, float]]:
        if self.budget == 0:
            mid = float(np.sqrt(self.lo * self.hi))
            return [(mid, mid, mid)]
        lo, hi = np.log10(self.lo), np.log10(self.hi)
        draws = 10.0 ** rng.uniform(lo, hi, size=(self.budget, 3))
        return [tuple(map(float, row)) for row in draws]


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CvPlan:
    """Outer fold assignments plus per-session task-set permutations.

    outer is a tuple of (train_map, test_map); each map sends a session id
    to the task sets it contributes.  A leave-one-session-out fold also
    names its held-out session.
    """

    scheme: str
    outer: tuple
    perms: dict
    targets: tuple = ()

    def __post_init__(self):
        for train_map, test_map in self.outer:
            for sid in test_map:
                if train_map.get(sid, set()) & test_map[sid]:
                    raise ValidationError("train and test task sets overlap")


def _events_by_session(recordings) -> dict:
    if isinstance(recordings, dict):
        return {sid: p.events for sid, p in recordings.items()}
    return {r.session_id: r.events for r in recordings}


def make_folds(recordings, scheme: str, seed: int = 0) -> CvPlan:
    """Fold plan for a scheme; blockwise needs exactly 4 task sets."""
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown scheme {scheme!r}")
    events = _events_by_session(recordings)
    sids = sorted(events)
    sets_of = {sid: sorted({e.task_set for e in events[sid]}) for sid in sids}
    if scheme == "blockwise":
        for sid in sids:
            if len(sets_of[sid]) != BLOCKWISE_SETS:
                raise ValidationError(
                    f"session {sid} has {len(sets_of[sid])} task sets; "
                    f"blockwise folds need {BLOCKWISE_SETS}")
    perms = {}
    for sid in sids:
        rng = derive_rng(seed, "folds", scheme, sid)
        sets = sets_of[sid]
        perms[sid] = [sets[i] for i in rng.permutation(len(sets))]
    if scheme == "blockwise":
        outer = []
        for f in range(BLOCKWISE_SETS):
            test_map = {sid: {perms[sid][f]} for sid in sids}
            train_map = {sid: set(perms[sid]) - test_map[sid] for sid in sids}
            outer.append((train_map, test_map))
        return CvPlan(scheme=scheme, outer=tuple(outer), perms=perms)
    if len(sids) < 2:
        raise ValidationError("leave-one-session-out needs at least 2 sessions")
    outer = []
    for target in sids:
        train_map = {sid: set(sets_of[sid]) for sid in sids if sid != target}
        test_map = {target: set(sets_of[target])}
        outer.append((train_map, test_map))
    return CvPlan(scheme=scheme, outer=tuple(outer), perms=perms,
                  targets=tuple(sids))


def blockwise_inner(perm: list[int], outer_f: int) -> list[tuple[set, set]]:
    """Each remaining task set becomes one inner test fold."""
    remaining = [s for i, s in enumerate(perm) if i != outer_f]
    return [({s for s in remaining if s != t}, {t}) for t in remaining]


def loso_inner(perm: list[int], n_inner: int = 3) -> list[tuple[set, set]]:
    """Round-robin the session's task sets into n_inner inner folds."""
    folds = []
    for j in range(n_inner):
        test = {perm[i] for i in range(len(perm)) if i % n_inner == j}
        folds.append((set(perm) - test, test))
    return folds


# ---------------------------------------------------------------------------
# Leakage audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditRecord:
    scheme: str
    fold: str
    artifact: str
    fit_ids: frozenset
    test_ids: frozenset


def audit_leakage(records: list[AuditRecord]) -> list[dict]:
    """Intersection check between fit provenance and outer test trials."""
    violations = []
    for r in records:
        overlap = r.fit_ids & r.test_ids
        if overlap:
            violations.append({
                "scheme": r.scheme, "fold": r.fold, "artifact": r.artifact,
                "n_overlap": len(overlap),
                "examples": sorted(map(list, list(overlap)[:3]))})
    return violations


def _record_fold(records: list, scheme: str, fold_tag: str, fold: FoldData,
                 outer_test_ids: frozenset) -> None:
    for name, ids in fold.artifacts.items():
        records.append(AuditRecord(scheme=scheme, fold=fold_tag,
                                   artifact=name, fit_ids=ids,
                                   test_ids=outer_test_ids))


# ---------------------------------------------------------------------------
# Nested search
# ---------------------------------------------------------------------------

def _score_candidate(args):
    inner_folds, cfg, hyper, ops, solver = args
    accs = []
    for fd in inner_folds:
        model = fit_fold(fd, cfg, *hyper, ops, solver)
        accs.append(eval_fold(model, fd)["accuracy"])
    return float(np.mean(accs))


def hyper_search(inner_folds: list[FoldData], cfg: PipelineConfig,
                 candidates: list, ops, search: SearchConfig,
                 jobs: int = 1) -> tuple[tuple[float, float, float], float]:
    """Best candidate by mean inner-fold accuracy.

    Ties go to the largest total regularization, i.e. the most conservative
    model among the equally accurate ones.
    """
    solver = replace(cfg.solver, tol=search.inner_tol,
                     max_iter=search.inner_max_iter)
    tasks = [(inner_folds, cfg, h, ops, solver) for h in candidates]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            scores = list(ex.map(_score_candidate, tasks))
    else:
        scores = [_score_candidate(t) for t in tasks]
    best = max(range(len(candidates)),
               key=lambda i: (scores[i], sum(candidates[i])))
    return candidates[best], scores[best]


def _force_hyper(hyper: tuple[float, float, float],
                 forced: dict) -> tuple[float, float, float]:
    a, b, g = hyper
    return (forced.get("alpha", a), forced.get("beta", b),
            forced.get("gamma", g))


# ---------------------------------------------------------------------------
# Cross-validation driver
# ---------------------------------------------------------------------------

def run_cv(recordings: list[SessionRecording], cfg: PipelineConfig | None = None,
           scheme: str = "blockwise", search: SearchConfig | None = None,
           plan: CvPlan | None = None, jobs: int = 1,
           forced_hyper: dict | None = None) -> dict:
    """Nested cross-validated accuracy with a per-fold hyper search.

    forced_hyper pins individual penalties (e.g. {"alpha": 0.0}) both in
    the search candidates and the final fit, which is how the ablations
    remove one regularizer without touching the protocol.  The returned
    dict carries the fitted outer-fold models under "models"; report
    writers drop that key.
    """
    cfg = cfg or PipelineConfig()
    search = search or SearchConfig()
    forced_hyper = forced_hyper or {}
    if len(recordings) < 2:
        raise ValidationError("cross-validation needs at least 2 sessions")
    preps = {r.session_id: prepare_session(r, cfg) for r in recordings}
    _check_homogeneous(preps)
    plan = plan or make_folds(preps, scheme, cfg.seed)
    if plan.scheme != scheme:
        raise ValidationError("plan scheme does not match requested scheme")
    sids = sorted(preps)

    records: list[AuditRecord] = []
    fold_reports = []
    predictions = []
    models = []
    ops = None

    for f, (train_map, test_map) in enumerate(plan.outer):
        if scheme == "blockwise":
            tag = f"blockwise:{f}"
            loso_target = None
            exclude = {sid: [k for k, e in enumerate(preps[sid].events)
                             if e.task_set in test_map[sid]] for sid in sids}
            streams = build_fold_streams(preps, cfg, exclude_map=exclude,
                                         tag=tag)
            inner_splits = []
            for j in range(BLOCKWISE_SETS - 1):
                itrain, itest = {}, {}
                for sid in sids:
                    itrain[sid], itest[sid] = blockwise_inner(plan.perms[sid], f)[j]
                inner_splits.append((itrain, itest))
        else:
            loso_target = plan.targets[f]
            tag = f"loso:{loso_target}"
            streams = build_fold_streams(preps, cfg, loso_target=loso_target,
                                         tag=tag)
            train_sids = [s for s in sids if s != loso_target]
            inner_splits = []
            for j in range(3):
                itrain, itest = {}, {}
                for sid in train_sids:
                    itrain[sid], itest[sid] = loso_inner(plan.perms[sid])[j]
                inner_splits.append((itrain, itest))

        if ops is None:
            ops = build_penalty_operators(preps[sids[0]], cfg,
                                          streams.n_time_samples)
        inner_folds = [assemble_fold(preps, cfg, streams, tr, te)
                       for tr, te in inner_splits]
        candidates = [_force_hyper(h, forced_hyper)
                      for h in search.candidates(derive_rng(cfg.seed, "search", tag))]
        hyper, inner_acc = hyper_search(inner_folds, cfg, candidates,
                                        ops, search, jobs)
        fold = assemble_fold(preps, cfg, streams, train_map, test_map,
                             loso_target=loso_target)
        model = fit_fold(fold, cfg, *hyper, ops)
        result = eval_fold(model, fold, allow_fallback=scheme == "loso")
        _record_fold(records, scheme, tag, fold, fold.test_ids)
        for fd in inner_folds:
            _record_fold(records, scheme, tag + ":inner", fd, fold.test_ids)
        records.append(AuditRecord(scheme, tag, "hyperparams",
                                   fold.artifacts["zscore"], fold.test_ids))
        fold_reports.append({
            "fold": tag, "hyper": dict(zip(("alpha", "beta", "gamma"), hyper)),
            "inner_accuracy": inner_acc, "accuracy": result["accuracy"],
            "per_session": result["per_session"],
            "n_test": len(fold.test),
            "solver": model.config})
        predictions.extend(result["rows"])
        models.append(model)

    violations = audit_leakage(records)
    if violations:
        raise LeakageError(f"{len(violations)} leakage violations: {violations[:3]}")

    per_session: dict[str, list[float]] = {}
    for rep in fold_reports:
        for sid, acc in rep["per_session"].items():
            per_session.setdefault(sid, []).append(acc)
    session_means = {sid: float(np.mean(v))
                     for sid, v in sorted(per_session.items())}
    fold_accs = [rep["accuracy"] for rep in fold_reports]
    q25, q75 = np.percentile(list(session_means.values()), [25, 75])
    return {
        "format": "hdnirs/1",
        "scheme": scheme,
        "mode": cfg.mode,
        "contrast": list(cfg.contrast),
        "n_sessions": len(sids),
        "folds": fold_reports,
        "fold_order": [rep["fold"] for rep in fold_reports],
        "per_session_accuracy": session_means,
        "mean_accuracy": float(np.mean(fold_accs)),
        "sd_accuracy": float(np.std(fold_accs, ddof=1)) if len(fold_accs) > 1 else 0.0,
        "iqr_accuracy": [float(q25), float(q75)],
        "predictions": sorted(predictions,
                              key=lambda r: (r["session"], r["trial"])),
        "audit": {"n_records": len(records), "violations": violations},
        "search": {"budget": search.budget, "lo": search.lo, "hi": search.hi},
        "forced_hyper": forced_hyper,
        "seed": cfg.seed,
        "models": models,
    }


# ---------------------------------------------------------------------------
# Metrics and statistics
# ---------------------------------------------------------------------------

def metrics(labels, probabilities) -> dict:
    """Accuracy at threshold 0.5 plus confusion counts.

    p == 0.5 goes to class 0 by convention.
    """
    y = np.asarray(labels, int)
    p = np.asarray(probabilities, float)
    if y.shape != p.shape or y.ndim != 1:
        raise ValidationError("labels and predictions must be equal-length vectors")
    pred = (p > 0.5).astype(int)
    return {
        "n": int(y.size),
        "accuracy": float(np.mean(pred == y)) if y.size else 0.0,
        "counts": {
            "tp": int(np.sum((pred == 1) & (y == 1))),
            "tn": int(np.sum((pred == 0) & (y == 0))),
            "fp": int(np.sum((pred == 1) & (y == 0))),
            "fn": int(np.sum((pred == 0) & (y == 1))),
        },
    }


def bonferroni(p: float, m: int) -> float:
    if m < 1:
        raise ValidationError("number of comparisons must be >= 1")
    return float(min(1.0, p * m))


def paired_accuracy_tests(a, b, n_comparisons: int = 1) -> dict:
    """Paired t and Wilcoxon tests with Bonferroni-adjusted p values."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValidationError("need two equal-length accuracy vectors")
    if np.allclose(a, b):
        # zero-variance differences make both tests degenerate
        t_stat, t_p = 0.0, 1.0
        w_stat, w_p = 0.0, 1.0
    else:
        t_stat, t_p = sstats.ttest_rel(a, b)
        w_stat, w_p = sstats.wilcoxon(a, b)
    return {
        "t": float(t_stat), "t_p": float(t_p),
        "t_p_adjusted": bonferroni(float(t_p), n_comparisons),
        "wilcoxon": float(w_stat), "wilcoxon_p": float(w_p),
        "wilcoxon_p_adjusted": bonferroni(float(w_p), n_comparisons),
        "n": int(a.size), "mean_difference": float(np.mean(a - b)),
    }


# ---------------------------------------------------------------------------
# Label shuffling and ablations
# ---------------------------------------------------------------------------

def permute_labels(recordings: list[SessionRecording],
                   seed: int) -> list[SessionRecording]:
    """Permute conditions across blocks within each session.

    Conditions are assigned at block granularity in the task design, so the
    chance-level control permutes whole blocks; trial-level shuffling would
    put conflicting labels on strongly correlated neighboring trials, which
    biases blocked cross-validation below chance instead of to it.  Blocks
    are permuted within their task set, which keeps every task set's
    condition multiset intact, so any split valid for the true labels stays
    valid for the shuffled ones.
    """
    out = []
    for rec in recordings:
        rng = derive_rng(seed, "shuffle", rec.session_id)
        cond_of = {}
        set_of = {}
        for e in rec.events:
            cond_of.setdefault(e.block, e.condition)
            set_of.setdefault(e.block, e.task_set)
        new_cond = {}
        for ts in sorted({e.task_set for e in rec.events}):
            blocks = sorted(b for b in cond_of if set_of[b] == ts)
            perm = rng.permutation(len(blocks))
            for i, b in enumerate(blocks):
                new_cond[b] = cond_of[blocks[perm[i]]]
        events = tuple(
            Event(sample=e.sample, condition=int(new_cond[e.block]),
                  block=e.block, task_set=e.task_set)
            for e in rec.events)
        out.append(replace(rec, events=events))
    return out


def apply_ablation(cfg: PipelineConfig, component: str
                   ) -> tuple[PipelineConfig, dict]:
    """Pipeline config and forced hyper-parameters with one component removed."""
    if component == "zca":
        return replace(cfg, enable_zca=False), {}
    if component == "imputation":
        return replace(cfg, enable_imputation=False), {}
    if component == "noise-floor-shift":
        return replace(cfg, preproc=replace(cfg.preproc, offset=0.0,
                                            dither_sd=0.0)), {}
    if component == "mtl-coupling":
        return replace(cfg, mode="subject-independent"), {}
    if component == "trace-norm":
        return cfg, {"alpha": 0.0}
    if component == "spatial-tikhonov":
        return cfg, {"beta": 0.0}
    if component == "temporal-tikhonov":
        return cfg, {"gamma": 0.0}
    raise ValidationError(f"unknown ablation component {component!r}")


def ablate(recordings: list[SessionRecording], cfg: PipelineConfig | None = None,
           components: tuple[str, ...] = ("zca", "imputation"),
           scheme: str = "blockwise", search: SearchConfig | None = None,
           jobs: int = 1) -> list[dict]:
    """Baseline row, then cumulative removals in the given order.

    Row k re-runs the full cross-validation with the first k components
    disabled; an empty component list reproduces the baseline alone.
    """
    cfg = cfg or PipelineConfig()
    base = run_cv(recordings, cfg, scheme=scheme, search=search, jobs=jobs)
    rows = [{"removed": "", "mean_accuracy": base["mean_accuracy"],
             "per_session": base["per_session_accuracy"],
             "per_fold": [f["accuracy"] for f in base["folds"]]}]
    acfg, forced = cfg, {}
    for k, comp in enumerate(components):
        acfg, extra = apply_ablation(acfg, comp)
        forced = {**forced, **extra}
        res = run_cv(recordings, acfg, scheme=scheme, search=search, jobs=jobs,
                     forced_hyper=forced)
        rows.append({"removed": "+".join(components[:k + 1]),
                     "mean_accuracy": res["mean_accuracy"],
                     "per_session": res["per_session_accuracy"],
                     "per_fold": [f["accuracy"] for f in res["folds"]]})
    return rows


# ---------------------------------------------------------------------------
# Block averages
# ---------------------------------------------------------------------------

def block_average(recordings: list[SessionRecording],
                  cfg: PipelineConfig | None = None,
                  conditions: tuple[int, ...] | None = None,
                  baseline_s: float = BASELINE_S) -> dict:
    """Mean chromophore response per condition over all sessions' trials.

    Each segment has its mean over the baseline_s seconds before onset
    subtracted per channel and chromophore.  Uses the imputed decode-path
    stream at the full sampling rate with no whitening or standardization,
    so the curves stay in concentration units.
    """
    cfg = cfg or PipelineConfig()
    preps = {r.session_id: prepare_session(r, cfg) for r in recordings}
    _check_homogeneous(preps)
    streams = build_fold_streams(preps, cfg, tag="block-average")
    fs = next(iter(preps.values())).fs
    lo_s = cfg.segment_window_s[0]
    if lo_s > -baseline_s:
        raise ValidationError("segment window does not cover the baseline")
    b0 = int(round((-baseline_s - lo_s) * fs))
    b1 = int(round(-lo_s * fs))
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for sid in sorted(preps):
        prep = preps[sid]
        trials = segment_trials(streams.streams[sid], prep.events, prep.fs,
                                cfg.segment_window_s)
        for _, ev, seg in trials:
            if conditions is not None and ev.condition not in conditions:
                continue
            chrom = to_chromophores(seg.T, prep.montage, cfg.extinction)
            arr = np.moveaxis(chrom, 0, -1)  # (C, 2, L)
            arr = arr - arr[..., b0:b1].mean(axis=-1, keepdims=True)
            if ev.condition not in sums:
                sums[ev.condition] = np.zeros_like(arr)
                counts[ev.condition] = 0
            sums[ev.condition] += arr
            counts[ev.condition] += 1
    if conditions is not None:
        missing = [c for c in conditions if c not in counts]
        if missing:
            raise ValidationError(f"no trials for conditions {missing}")
    if not counts:
        raise ValidationError("no trials to average")
    n_l = next(iter(sums.values())).shape[-1]
    return {
        "time_s": lo_s + np.arange(n_l) / fs,
        "conditions": {c: sums[c] / counts[c] for c in sorted(sums)},
        "n_trials": {c: counts[c] for c in sorted(counts)},
    }


# ---------------------------------------------------------------------------
# Deterministic reports
# ---------------------------------------------------------------------------

def _write_sidecar(path: Path) -> None:
    meta = {
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "platform": platform.platform(),
        "numpy": np.__version__,
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=1))


def write_cv_report(result: dict, path: str | Path) -> None:
    """cv_results.json: key-sorted, timestamp-free, byte-reproducible."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {k: v for k, v in result.items() if k != "models"}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))
    _write_sidecar(path)


def write_ablation_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sessions = sorted(rows[0]["per_session"]) if rows else []
    lines = ["removed,mean_accuracy," + ",".join(f"acc_{s}" for s in sessions)]
    for r in rows:
        cells = [r["removed"], f"{r['mean_accuracy']:.6f}"]
        cells += [f"{r['per_session'][s]:.6f}" for s in sessions]
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")
    _write_sidecar(path)


def write_block_average_csv(ba: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["condition,pair,chromophore,time_s,concentration_mm"]
    time_s = ba["time_s"]
    for cond in sorted(ba["conditions"]):
        arr = ba["conditions"][cond]
        for p in range(arr.shape[0]):
            for w, name in enumerate(("hbo", "hbr")):
                for t in range(arr.shape[2]):
                    lines.append(f"{cond},{p},{name},{time_s[t]:.6f},"
                                 f"{arr[p, w, t]:.9e}")
    path.write_text("\n".join(lines) + "\n")
    _write_sidecar(path)
