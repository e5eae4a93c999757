"""Command-line front end: simulate, preprocess, train, predict, cv,
ablate, block-average, export-weights.

One JSON/TOML config document carries per-module sections (preproc,
pipeline, solver, search, sim); flags override config fields, and the
resolved configuration is echoed next to every report.  Exit codes: 0
success, 1 validation (including usage errors), 2 numerical/runtime
failure, with a machine-readable error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .core import (FormatError, NumericalError, ValidationError,
                   load_model, save_model)
from .covariance import load_covariance, save_covariance
from .decoder import SolverConfig, summarize_weights
from .evaluation import (ABLATION_COMPONENTS, SearchConfig, ablate,
                         block_average, metrics, permute_labels, run_cv,
                         write_ablation_csv, write_block_average_csv,
                         write_cv_report, _write_sidecar)
from .features import ExtinctionTable
from .pipeline import PipelineConfig, predict_session, prepare_session, train_decoder
from .preprocess import PreprocConfig
from .synthetic import Corpus, SimConfig, generate_corpus, load_corpus, save_corpus


class _Parser(argparse.ArgumentParser):
    """Usage problems are validation errors: usage text, JSON report, exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message}),
              file=sys.stderr)
        raise SystemExit(1)


def _log(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def _load_config_doc(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _build(cls, section: dict, what: str):
    try:
        return cls(**section)
    except TypeError as e:
        raise ValidationError(f"bad {what} config: {e}") from None


def resolve_configs(args) -> tuple[PipelineConfig, SearchConfig, SimConfig]:
    """Config document -> dataclasses, then flag overrides on top."""
    doc = _load_config_doc(getattr(args, "config", None))
    unknown = set(doc) - {"preproc", "pipeline", "solver", "search", "sim"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")

    preproc = _build(PreprocConfig, doc.get("preproc", {}), "preproc")
    solver = _build(SolverConfig, doc.get("solver", {}), "solver")
    psec = dict(doc.get("pipeline", {}))
    ext = psec.pop("extinction", None)
    if ext is not None:
        table = ExtinctionTable(
            coefficients={float(k): tuple(v)
                          for k, v in ext.get("coefficients", {}).items()},
            dpf=float(ext.get("dpf", ExtinctionTable().dpf)))
    else:
        table = ExtinctionTable()
    for key in ("contrast", "segment_window_s"):
        if key in psec:
            psec[key] = tuple(psec[key])
    pipeline = _build(
        lambda **kw: PipelineConfig(preproc=preproc, solver=solver,
                                    extinction=table, **kw),
        psec, "pipeline")
    search = _build(SearchConfig, doc.get("search", {}), "search")
    sim = _build(SimConfig, doc.get("sim", {}), "sim")

    if getattr(args, "seed", None) is not None:
        pipeline = replace(pipeline, seed=args.seed,
                           preproc=replace(pipeline.preproc, seed=args.seed))
        sim = replace(sim, seed=args.seed)
    if getattr(args, "budget", None) is not None:
        search = replace(search, budget=args.budget)
    if getattr(args, "mode", None):
        pipeline = replace(pipeline, mode=args.mode)
    return pipeline, search, sim


def config_payload(cfg: PipelineConfig, search: SearchConfig | None = None,
                   sim: SimConfig | None = None) -> dict:
    """JSON-able resolved configuration for report provenance."""
    out = {
        "preproc": asdict(cfg.preproc),
        "solver": asdict(cfg.solver),
        "pipeline": {
            "cov_window_s": cfg.cov_window_s,
            "cov_highpass_hz": cfg.cov_highpass_hz,
            "cov_filter_order": cfg.cov_filter_order,
            "zca_lambda": cfg.zca_lambda,
            "enable_zca": cfg.enable_zca,
            "enable_imputation": cfg.enable_imputation,
            "contrast": list(cfg.contrast),
            "segment_window_s": list(cfg.segment_window_s),
            "target_hz": cfg.target_hz,
            "spatial_radius_mm": cfg.spatial_radius_mm,
            "normal_ratio": cfg.normal_ratio,
            "mode": cfg.mode,
            "seed": cfg.seed,
            "extinction": {
                "coefficients": {str(k): list(v)
                                 for k, v in cfg.extinction.coefficients.items()},
                "dpf": cfg.extinction.dpf,
            },
        },
    }
    if search is not None:
        out["search"] = asdict(search)
    if sim is not None:
        out["sim"] = asdict(sim)
    return out


def _write_config_echo(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1))


def _out_path(args, default_name: str) -> Path:
    out = Path(args.out)
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    out.mkdir(parents=True, exist_ok=True)
    return out / default_name


def _load_recordings(path: str) -> Corpus:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"corpus not found: {p}")
    return load_corpus(p)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, search, sim = resolve_configs(args)
    if args.sessions is not None:
        sim = replace(sim, n_sessions=args.sessions)
    if args.pairs is not None:
        sim = replace(sim, n_pairs=args.pairs)
    if args.effect_amp is not None:
        sim = replace(sim, effect_amp_mm=args.effect_amp)
    _log(args, f"simulating {sim.n_sessions} sessions x "
               f"{sim.trials_per_session} trials, {sim.n_pairs} pairs")
    corpus = generate_corpus(sim)
    out = Path(args.out)
    save_corpus(corpus, out)
    _write_config_echo(out, config_payload(cfg, sim=sim))
    summary = {"out": str(out), "n_sessions": sim.n_sessions,
               "n_pairs": sim.n_pairs,
               "n_trials": sim.trials_per_session,
               "bayes_accuracy": corpus.truth.get("bayes_accuracy")}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_preprocess(args) -> int:
    cfg, _, _ = resolve_configs(args)
    corpus = _load_recordings(args.data)
    report = {"format": "hdnirs/1", "sessions": {}}
    for rec in corpus.recordings:
        prep = prepare_session(rec, cfg)
        bad = prep.mask.bad_channels
        report["sessions"][rec.session_id] = {
            "n_selected": int(prep.selected.size),
            "n_bad": int(bad.size),
            "bad_channels": [int(b) for b in bad],
            "n_good": int(prep.mask.good_channels().size),
            "n_trials": len(rec.events),
        }
        _log(args, f"{rec.session_id}: {prep.selected.size} channels, "
                   f"{bad.size} bad")
    out = _out_path(args, "preprocess_report.json")
    out.write_text(json.dumps(report, sort_keys=True, indent=1))
    _write_sidecar(out)
    _write_config_echo(out.parent, config_payload(cfg))
    return 0


def cmd_train(args) -> int:
    cfg, search, _ = resolve_configs(args)
    corpus = _load_recordings(args.data)
    _log(args, f"training on {len(corpus.recordings)} sessions "
               f"(alpha={args.alpha}, beta={args.beta}, gamma={args.gamma})")
    model, cbar, artifacts = train_decoder(list(corpus.recordings), cfg,
                                           args.alpha, args.beta, args.gamma)
    out = Path(args.out)
    save_model(model, out / "model")
    save_covariance(cbar, out / "covariance")
    prov = {"artifacts": {k: sorted(map(list, v))
                          for k, v in artifacts.items()},
            "sessions": sorted(r.session_id for r in corpus.recordings),
            "solver": model.config}
    (out / "training_provenance.json").write_text(
        json.dumps(prov, sort_keys=True, indent=1))
    _write_config_echo(out, config_payload(cfg, search=search))
    _log(args, f"model written to {out}")
    return 0


def cmd_predict(args) -> int:
    cfg, _, _ = resolve_configs(args)
    corpus = _load_recordings(args.data)
    model_dir = Path(args.model)
    model = load_model(model_dir / "model")
    cbar = load_covariance(model_dir / "covariance")
    recs = list(corpus.recordings)
    if args.session:
        recs = [r for r in recs if r.session_id == args.session]
        if not recs:
            raise ValidationError(f"session {args.session!r} not in corpus")
    rows = []
    for rec in recs:
        rows.extend(predict_session(rec, model, cbar, cfg))
    scored = metrics([r["label"] for r in rows], [r["prob"] for r in rows])
    payload = {"format": "hdnirs/1", "predictions": rows, "metrics": scored}
    out = _out_path(args, "predictions.json")
    out.write_text(json.dumps(payload, sort_keys=True, indent=1))
    _write_sidecar(out)
    _write_config_echo(out.parent, config_payload(cfg))
    _log(args, f"{scored['n']} trials, accuracy {scored['accuracy']:.3f}")
    return 0


def cmd_cv(args) -> int:
    cfg, search, _ = resolve_configs(args)
    corpus = _load_recordings(args.data)
    recs = list(corpus.recordings)
    if args.shuffle:
        _log(args, "shuffling labels within sessions")
        recs = permute_labels(recs, cfg.seed)
    _log(args, f"{args.scheme} cross-validation, budget {search.budget}, "
               f"jobs {args.jobs}")
    result = run_cv(recs, cfg, scheme=args.scheme, search=search,
                    jobs=args.jobs)
    result["config"] = config_payload(cfg, search=search)
    result["shuffled"] = bool(args.shuffle)
    out = _out_path(args, "cv_results.json")
    write_cv_report(result, out)
    _write_config_echo(out.parent, result["config"])
    _log(args, f"mean accuracy {result['mean_accuracy']:.3f} "
               f"(sd {result['sd_accuracy']:.3f})")
    return 0


def cmd_ablate(args) -> int:
    cfg, search, _ = resolve_configs(args)
    corpus = _load_recordings(args.data)
    components = tuple(c for c in args.components.split(",") if c)
    for c in components:
        if c not in ABLATION_COMPONENTS:
            raise ValidationError(
                f"unknown component {c!r}; choose from {ABLATION_COMPONENTS}")
    _log(args, f"ablating {components or '(baseline only)'}")
    rows = ablate(list(corpus.recordings), cfg, components=components,
                  scheme=args.scheme, search=search, jobs=args.jobs)
    out = _out_path(args, "ablation.csv")
    write_ablation_csv(rows, out)
    _write_config_echo(out.parent, config_payload(cfg, search=search))
    for r in rows:
        _log(args, f"  removed [{r['removed']}] -> {r['mean_accuracy']:.3f}")
    return 0


def cmd_block_average(args) -> int:
    cfg, _, _ = resolve_configs(args)
    corpus = _load_recordings(args.data)
    conditions = None
    if args.conditions:
        conditions = tuple(int(c) for c in args.conditions.split(","))
    ba = block_average(list(corpus.recordings), cfg, conditions=conditions)
    out = _out_path(args, "block_averages.csv")
    write_block_average_csv(ba, out)
    _write_config_echo(out.parent, config_payload(cfg))
    _log(args, f"averaged conditions {sorted(ba['n_trials'])} to {out}")
    return 0


def cmd_export_weights(args) -> int:
    cfg, _, _ = resolve_configs(args)
    corpus = _load_recordings(args.data)
    model = load_model(Path(args.model) / "model")
    rec = corpus.recordings[0]
    prep = prepare_session(rec, cfg)
    summary = summarize_weights(model, prep.montage, session_id=args.session)
    payload = {
        "format": "hdnirs/1",
        "session": args.session,
        "per_channel_abs": summary["per_channel"].tolist(),
        "per_time_abs": summary["per_time"].tolist(),
        "per_chromophore_abs": summary["per_chromophore"].tolist(),
        "separation_mm": summary["separation_mm"].tolist(),
        "band_mass": summary["band_mass"],
    }
    out = _out_path(args, "weight_summary.json")
    out.write_text(json.dumps(payload, sort_keys=True, indent=1))
    _write_sidecar(out)
    _write_config_echo(out.parent, config_payload(cfg))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML config document")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdnirs",
                     description="Working-memory decoding from "
                                 "high-channel-count optical recordings")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--sessions", type=int, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--effect-amp", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("preprocess", help="quality report for a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="fit a decoder on all sessions")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--mode", choices=("subject-specific",
                                      "subject-independent"), default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score trials with a trained decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--session", default=None)
    p.add_argument("--mode", choices=("subject-specific",
                                      "subject-independent"), default=None)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("cv", help="nested cross-validated accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=("blockwise", "loso"),
                   default="blockwise")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--shuffle", action="store_true",
                   help="permute labels within sessions first")
    p.add_argument("--mode", choices=("subject-specific",
                                      "subject-independent"), default=None)
    _add_common(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("ablate", help="cumulative component removal table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--components", default="zca,imputation")
    p.add_argument("--scheme", choices=("blockwise", "loso"),
                   default="blockwise")
    p.add_argument("--budget", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("block-average",
                       help="per-condition mean chromophore time courses")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conditions", default=None,
                   help="comma-separated condition ids")
    _add_common(p)
    p.set_defaults(func=cmd_block_average)

    p = sub.add_parser("export-weights",
                       help="marginal weight summaries for plotting")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--session", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_export_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (ValidationError, FormatError, FileNotFoundError,
            json.JSONDecodeError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1
    except (NumericalError, np.linalg.LinAlgError, RuntimeError,
            FloatingPointError, MemoryError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
