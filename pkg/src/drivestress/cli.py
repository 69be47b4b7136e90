"""The `stressor` command line: synth, preprocess, features, experiment, shap.

Every command writes its artifacts plus a manifest.json into the output
directory. The manifest records the resolved master seed, config file
digest, package versions, input file digests, and the artifact paths, so
each output can be traced to the exact run that produced it; JSON reports
name the manifest explicitly. Runs are deterministic: repeating a command
with identical inputs and seed yields digest-identical files.

Errors exit nonzero with one machine-readable JSON record on stderr.
The STRESSOR_SEED environment variable overrides any seed from flags or
the config file.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .errors import ConfigValidationError, PipelineError, SessionParseError
from .experiments import (
    ALL_SESSION_LETTERS,
    PHYSIO_MODALITIES,
    behavior_association,
    build_behavior_frame,
    cross_session_matrix,
    event_sensitivity,
    prepare_frames,
    recovery_analysis,
    run_loso,
    write_predictions_csv,
)
from .features import LABEL_STRESS, build_feature_frame
from .gbt import GbtConfig, fit, shap_summary
from .io import (
    META_FILE,
    file_digest,
    preprocess_session,
    read_session,
    write_feature_frame,
    write_session,
)
from .signals import RSP_FUSED
from .synth import SynthConfig, generate_session

SEED_ENV = "STRESSOR_SEED"
MANIFEST_FILE = "manifest.json"
EXPERIMENTS = ("loso", "matrix", "events", "behavior", "recovery")


@dataclasses.dataclass
class RunManifest:
    """Provenance record written alongside every command's outputs."""

    command: str
    master_seed: int | None
    config_digest: str | None
    versions: dict[str, str]
    input_digests: dict[str, str]
    output_paths: list[str]

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_FILE
        path.write_text(json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n")
        return path


def _versions() -> dict[str, str]:
    return {
        "drivestress": __version__,
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
    }


def _load_config(path: str | None) -> tuple[dict, str | None]:
    if path is None:
        return {}, None
    p = Path(path)
    if not p.is_file():
        raise ConfigValidationError(f"config file '{path}' does not exist", fields=("config",))
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(
            f"config file is not valid JSON: {exc}", fields=("config",)
        ) from None
    if not isinstance(obj, dict):
        raise ConfigValidationError("config file must hold a JSON object", fields=("config",))
    return obj, file_digest(p)


def _build_config(cls, section: dict, overrides: dict, name: str):
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    known = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(merged) - known)
    if bad:
        raise ConfigValidationError(
            f"unknown {name} option(s): {', '.join(bad)}", fields=tuple(bad)
        )
    return cls(**merged)


def _resolve_seed(flag_value: int | None, config_value, default: int) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigValidationError(
                f"{SEED_ENV} must be an integer, got '{env}'", fields=(SEED_ENV,)
            ) from None
    if flag_value is not None:
        return flag_value
    if config_value is not None:
        return int(config_value)
    return default


def _parallel(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _session_dirs(root: str) -> list[Path]:
    base = Path(root)
    if (base / META_FILE).is_file():
        return [base]
    if not base.is_dir():
        raise SessionParseError(f"input directory '{root}' does not exist", path=str(root))
    found = sorted(d for d in base.iterdir() if d.is_dir() and (d / META_FILE).is_file())
    if not found:
        raise SessionParseError(
            "no session directories found (expected subdirectories with meta.json)",
            path=str(root),
        )
    return found


def _load_sessions(dirs: list[Path], jobs: int):
    """Read sessions, preprocessing any that are still raw (no fused RSP)."""

    def load(d: Path):
        session, _ = read_session(d)
        if RSP_FUSED not in session.traces:
            session = preprocess_session(session)
        return session

    return _parallel(load, dirs, jobs)


def _digest_dirs(dirs: list[Path]) -> dict[str, str]:
    out: dict[str, str] = {}
    for d in dirs:
        for f in sorted(d.iterdir()):
            if f.is_file():
                out[str(f)] = file_digest(f)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")
    return path


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> Path:
    pd.DataFrame(rows, columns=columns).to_csv(
        path, index=False, float_format="%.10g", lineterminator="\n"
    )
    return path


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    cfg, digest = _load_config(args.config)
    section = dict(cfg.get("synth", {}))
    if "session_kinds" in section:
        section["session_kinds"] = tuple(section["session_kinds"])
    seed = _resolve_seed(args.seed, section.pop("seed", None), 0)
    config = _build_config(
        SynthConfig, section, {"n_subjects": args.subjects, "seed": seed}, "synth"
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def make(index: int) -> Path:
        session, truth = generate_session(config, index)
        return write_session(out / f"{session.subject_id}_{session.session_kind}", session, truth)

    written = _parallel(make, list(range(config.n_subjects)), args.jobs)
    outputs = sorted(str(f.relative_to(out)) for d in written for f in sorted(d.iterdir()))
    RunManifest(
        command="synth",
        master_seed=seed,
        config_digest=digest,
        versions=_versions(),
        input_digests={args.config: digest} if args.config else {},
        output_paths=outputs,
    ).write(out)


def cmd_preprocess(args) -> None:
    dirs = _session_dirs(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def process(d: Path) -> Path:
        session, truth = read_session(d)
        clean = preprocess_session(session, mains_hz=args.mains)
        return write_session(out / d.name, clean, truth)

    written = _parallel(process, dirs, args.jobs)
    outputs = sorted(str(f.relative_to(out)) for d in written for f in sorted(d.iterdir()))
    RunManifest(
        command="preprocess",
        master_seed=None,
        config_digest=None,
        versions=_versions(),
        input_digests=_digest_dirs(dirs),
        output_paths=outputs,
    ).write(out)


def cmd_features(args) -> None:
    dirs = _session_dirs(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def featurize(d: Path) -> Path:
        session, _ = read_session(d)
        frame = build_feature_frame(
            session,
            include_vehicle=args.vehicle,
            window_s=args.window,
            hop_s=args.hop,
        )
        return write_feature_frame(out / f"{d.name}.csv", frame)

    written = _parallel(featurize, dirs, args.jobs)
    RunManifest(
        command="features",
        master_seed=None,
        config_digest=None,
        versions=_versions(),
        input_digests=_digest_dirs(dirs),
        output_paths=sorted(str(p.relative_to(out)) for p in written),
    ).write(out)


def cmd_experiment(args) -> None:
    cfg, digest = _load_config(args.config)
    exp = dict(cfg.get("experiment", {}))
    gbt_config = _build_config(GbtConfig, dict(cfg.get("gbt", {})), {}, "gbt")
    master_seed = _resolve_seed(args.master_seed, exp.get("master_seed"), 0)
    n_seeds = args.seeds if args.seeds is not None else int(exp.get("n_seeds", 10))
    modalities = (
        tuple(args.modalities.split(","))
        if args.modalities
        else tuple(exp.get("modalities", PHYSIO_MODALITIES))
    )
    sessions = (
        tuple(args.sessions.split(","))
        if args.sessions
        else tuple(exp.get("sessions", ALL_SESSION_LETTERS))
    )
    alpha = args.alpha if args.alpha is not None else float(exp.get("alpha", 0.05))

    dirs = _session_dirs(args.input)
    dataset = _load_sessions(dirs, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    report: dict = {
        "experiment": args.experiment,
        "manifest": MANIFEST_FILE,
        "master_seed": master_seed,
        "n_seeds": n_seeds,
    }

    try:
        _run_experiment(args, dataset, gbt_config, master_seed, n_seeds,
                        modalities, sessions, alpha, out, outputs, report)
    except PipelineError as exc:
        if not getattr(exc, "context", ""):
            exc.context = f"{args.experiment} experiment"
        raise

    outputs.append(_write_json(out / "report.json", report))
    RunManifest(
        command=f"experiment.{args.experiment}",
        master_seed=master_seed,
        config_digest=digest,
        versions=_versions(),
        input_digests=_digest_dirs(dirs),
        output_paths=sorted(str(p.relative_to(out)) for p in outputs),
    ).write(out)


def _run_experiment(
    args, dataset, gbt_config, master_seed, n_seeds, modalities, sessions, alpha, out, outputs, report
) -> None:
    if args.experiment == "matrix":
        matrix = cross_session_matrix(
            dataset, config=gbt_config, n_seeds=n_seeds, master_seed=master_seed
        )
        cells = []
        for i, train in enumerate(matrix.order):
            for j, test in enumerate(matrix.order):
                ok = bool(matrix.available[i, j])
                cells.append(
                    {
                        "train_sessions": train,
                        "test_sessions": test,
                        "auroc": float(matrix.auroc[i, j]) if ok else None,
                        "mean_train_rows": float(matrix.n_train_rows[i, j]) if ok else None,
                        "available": ok,
                    }
                )
        outputs.append(
            _write_csv(
                out / "matrix.csv",
                cells,
                ["train_sessions", "test_sessions", "auroc", "mean_train_rows", "available"],
            )
        )
        report["cells"] = cells
    else:
        predictions, eval_report = run_loso(
            dataset,
            config=gbt_config,
            n_seeds=n_seeds,
            modalities=modalities,
            sessions=sessions,
            master_seed=master_seed,
            n_jobs=args.jobs,
        )
        pred_path = out / "predictions.csv"
        write_predictions_csv(predictions, pred_path)
        outputs.append(pred_path)
        report["loso"] = eval_report.to_dict()
        report["audits"] = [dataclasses.asdict(a) for a in eval_report.audits]

        if args.experiment == "events":
            results = event_sensitivity(predictions, dataset, alpha=alpha)
            rows = [
                {
                    "event": r.event_name,
                    "n_subjects": len(r.slope_by_subject),
                    "mean_auroc": (
                        float(np.mean(list(r.auroc_by_subject.values())))
                        if r.auroc_by_subject
                        else None
                    ),
                    "mean_slope": (
                        float(np.mean(list(r.slope_by_subject.values())))
                        if r.slope_by_subject
                        else None
                    ),
                    "wilcoxon_p": r.wilcoxon_p,
                    "fdr_flag": r.fdr_flag,
                    "truncated": r.truncated,
                }
                for r in results
            ]
            outputs.append(
                _write_csv(
                    out / "events.csv",
                    rows,
                    [
                        "event",
                        "n_subjects",
                        "mean_auroc",
                        "mean_slope",
                        "wilcoxon_p",
                        "fdr_flag",
                        "truncated",
                    ],
                )
            )
            report["events"] = rows
        elif args.experiment == "behavior":
            vehicle_frames = [build_behavior_frame(s) for s in dataset]
            rows, skipped = [], {}
            for kind in sorted({s.session_kind for s in dataset}):
                try:
                    rep = behavior_association(predictions, vehicle_frames, kind, alpha=alpha)
                except PipelineError as exc:
                    exc.context = f"behavior association for {kind} sessions"
                    raise
                skipped[kind] = rep.skipped
                for metric in sorted(rep.fits):
                    lmm = rep.fits[metric]
                    rows.append(
                        {
                            "session": kind,
                            "metric": metric,
                            "beta_stress": float(lmm.beta[1]),
                            "ci_low": float(lmm.beta_ci[1][0]),
                            "ci_high": float(lmm.beta_ci[1][1]),
                            "p": float(lmm.beta_p[1]),
                            "p_adjusted": rep.p_adjusted[metric],
                            "flag": rep.flags[metric],
                        }
                    )
            outputs.append(
                _write_csv(
                    out / "behavior.csv",
                    rows,
                    [
                        "session",
                        "metric",
                        "beta_stress",
                        "ci_low",
                        "ci_high",
                        "p",
                        "p_adjusted",
                        "flag",
                    ],
                )
            )
            report["behavior"] = rows
            report["skipped"] = skipped
        elif args.experiment == "recovery":
            rows = [dataclasses.asdict(r) for r in recovery_analysis(predictions, dataset)]
            outputs.append(
                _write_csv(
                    out / "recovery.csv",
                    rows,
                    ["subject_id", "session_kind", "category", "rho", "p_fdr", "start_level"],
                )
            )
            report["recovery"] = rows


def cmd_shap(args) -> None:
    cfg, digest = _load_config(args.config)
    master_seed = _resolve_seed(
        args.master_seed, cfg.get("experiment", {}).get("master_seed"), 0
    )
    gbt_config = _build_config(
        GbtConfig, dict(cfg.get("gbt", {})), {"seed": master_seed % 2**31}, "gbt"
    )

    dirs = _session_dirs(args.input)
    dataset = _load_sessions(dirs, args.jobs)
    prepared = prepare_frames(dataset, include_vehicle=args.vehicle)
    frames = [f for subject in prepared.subjects for f in prepared.frames_by_subject[subject]]
    if not frames:
        raise SessionParseError("no usable sessions for attribution", path=args.input)
    X = np.vstack([f.values[f.training_mask()] for f in frames])
    y = np.concatenate(
        [(f.labels[f.training_mask()] == LABEL_STRESS).astype(np.float64) for f in frames]
    )
    model = fit(X, y, config=gbt_config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    base = 0.0
    for frame in frames:
        summary = shap_summary(model, frame)
        base = summary.base
        mask = frame.training_mask()
        times = frame.timestamps_s[mask]
        values = frame.values[mask]
        for i, t in enumerate(times):
            for j, column in enumerate(summary.columns):
                rows.append(
                    {
                        "subject": frame.subject_id,
                        "session": frame.session_kind,
                        "time_s": float(t),
                        "feature": column,
                        "value": float(values[i, j]),
                        "shap": float(summary.values[i, j]),
                    }
                )
    outputs = [
        _write_csv(
            out / "shap.csv",
            rows,
            ["subject", "session", "time_s", "feature", "value", "shap"],
        )
    ]
    table = pd.DataFrame(rows)
    mean_abs = {
        name: float(np.mean(np.abs(group["shap"].to_numpy())))
        for name, group in table.groupby("feature")
    }
    ranking = sorted(mean_abs.items(), key=lambda kv: (-kv[1], kv[0]))
    outputs.append(
        _write_json(
            out / "report.json",
            {
                "manifest": MANIFEST_FILE,
                "master_seed": master_seed,
                "base_value": base,
                "n_rows": len(X),
                "mean_abs_shap": mean_abs,
                "ranking": [list(pair) for pair in ranking],
            },
        )
    )
    RunManifest(
        command="shap",
        master_seed=master_seed,
        config_digest=digest,
        versions=_versions(),
        input_digests=_digest_dirs(dirs),
        output_paths=sorted(str(p.relative_to(out)) for p in outputs),
    ).write(out)


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    """Usage errors follow the same stderr JSON contract as pipeline errors."""

    def error(self, message: str):
        print(
            json.dumps({"error": "UsageError", "message": message}, sort_keys=True),
            file=sys.stderr,
        )
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stressor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="generate a synthetic cohort with ground truth")
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.add_argument("--config", help="JSON config file (synth section)")
    synth.add_argument("--subjects", type=int, help="override subject count")
    synth.add_argument("--seed", type=int, help="generator seed")
    synth.add_argument("--jobs", type=int, default=1, help="parallel workers")
    synth.set_defaults(handler=cmd_synth)

    prep = sub.add_parser("preprocess", help="filter, fuse, and decimate raw sessions")
    prep.add_argument("--in", dest="input", required=True, help="raw dataset directory")
    prep.add_argument("--out", required=True, help="preprocessed output directory")
    prep.add_argument("--mains", type=float, default=60.0, help="powerline frequency, Hz")
    prep.add_argument("--jobs", type=int, default=1)
    prep.set_defaults(handler=cmd_preprocess)

    feats = sub.add_parser("features", help="per-window feature CSV per session")
    feats.add_argument("--in", dest="input", required=True, help="preprocessed dataset directory")
    feats.add_argument("--out", required=True)
    feats.add_argument("--vehicle", action="store_true", help="append vehicle columns")
    feats.add_argument("--window", type=float, default=30.0, help="window length, seconds")
    feats.add_argument("--hop", type=float, default=1.0, help="hop between windows, seconds")
    feats.add_argument("--jobs", type=int, default=1)
    feats.set_defaults(handler=cmd_features)

    exp = sub.add_parser("experiment", help="run a study and write reports")
    exp.add_argument("experiment", choices=EXPERIMENTS)
    exp.add_argument("--in", dest="input", required=True, help="dataset directory (raw or preprocessed)")
    exp.add_argument("--out", required=True)
    exp.add_argument("--config", help="JSON config file (gbt + experiment sections)")
    exp.add_argument("--seeds", type=int, help="training repeats per fold")
    exp.add_argument("--master-seed", type=int, help="top-level seed for fold derivation")
    exp.add_argument("--modalities", help="comma-separated subset, e.g. ECG,EDA")
    exp.add_argument("--sessions", help="comma-separated session letters, e.g. I,M")
    exp.add_argument("--alpha", type=float, help="FDR level for events/behavior")
    exp.add_argument("--jobs", type=int, default=1)
    exp.set_defaults(handler=cmd_experiment)

    shap = sub.add_parser("shap", help="per-row attribution CSV from one pooled model")
    shap.add_argument("--in", dest="input", required=True)
    shap.add_argument("--out", required=True)
    shap.add_argument("--config", help="JSON config file (gbt section)")
    shap.add_argument("--master-seed", type=int)
    shap.add_argument("--vehicle", action="store_true", help="include vehicle columns")
    shap.add_argument("--jobs", type=int, default=1)
    shap.set_defaults(handler=cmd_shap)
    return parser


def _print_error(exc: Exception) -> None:
    record: dict = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("context", "path", "line", "field", "fields"):
        value = getattr(exc, attr, None)
        if value not in (None, "", -1, ()):
            record[attr] = list(value) if isinstance(value, tuple) else value
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.handler(args)
    except SystemExit:
        raise
    except PipelineError as exc:
        _print_error(exc)
        return 1
    except Exception as exc:  # the exit contract covers unexpected faults too
        _print_error(exc)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
