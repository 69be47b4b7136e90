"""Evaluation experiments over cohorts of sessions.

Everything here consumes preprocessed sessions and produces per-second
stress probabilities plus summary statistics:

  run_loso             leave-one-subject-out CV with resampled training pools
  cross_session_matrix train-kind x test-kind AUROC grid
  event_sensitivity    post-onset probability response per stressor event
  behavior_association mixed models linking stress scores to vehicle metrics
  recovery_analysis    per-session stress trend over the recovery phase

Subjects are the cross-validation unit: all sessions of a held-out
subject leave the training pool together. Per-subject normalization uses
only that subject's own baseline window, so no cross-subject statistics
leak between folds; fold fingerprints make that auditable.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from . import stats
from .errors import (
    ConfigValidationError,
    InsufficientDataError,
    InsufficientRecoveryError,
    UndefinedTestError,
    UnimputableColumnError,
)
from .features import (
    LABEL_EXCLUDED,
    LABEL_FREE,
    LABEL_STRESS,
    PHYSIO_COLUMNS,
    VEHICLE_COLUMNS,
    FeatureFrame,
    Session,
    build_feature_frame,
    knn_impute,
    vehicle_features,
    zscore_baseline,
)
from .gbt import GbtConfig, fit, predict_proba
from .signals import linear_slope

BASELINE_S = 60.0          # per-subject normalization window at free-driving start
EVENT_WINDOW_S = 15.0
RECOVERY_MIN_S = 60.0
RECOVERY_START_S = 30.0
RECOVERY_ALPHA = 0.001

SESSION_LETTER = {"Irritation": "I", "Impatience": "M", "Surprise": "S"}
LETTER_KIND = {v: k for k, v in SESSION_LETTER.items()}
ALL_SESSION_LETTERS = ("I", "M", "S")
PHYSIO_MODALITIES = ("ECG", "EDA", "RSP", "SKT")

MODALITY_COLUMNS: dict[str, tuple[str, ...]] = {
    "ECG": ("hr_bpm", "rsa_s"),
    "EDA": (
        "scl_mean_us",
        "scl_slope_us_per_s",
        "scr_frequency_per_min",
        "scr_amplitude_us",
        "scr_rise_time_s",
    ),
    "RSP": ("rsp_period_s", "rsp_depth", "rsp_rvt"),
    "SKT": ("skt_mean_c", "skt_slope_c_per_s"),
    "VEHICLE": VEHICLE_COLUMNS,
}

BEHAVIOR_METRICS = (
    "speed_mean_kmh",
    "steering_std_deg",
    "throttle_rate_pct",
    "throttle_magnitude",
    "throttle_entropy",
    "brake_rate_pct",
    "brake_magnitude",
    "brake_entropy",
)


@dataclass(frozen=True)
class LosoPlan:
    """One fold x seed: who is held out and which subjects train."""

    held_out_subject: str
    train_subjects: tuple[str, ...]
    seed: int
    modality_subset: tuple[str, ...] = PHYSIO_MODALITIES
    session_subset: tuple[str, ...] = ALL_SESSION_LETTERS

    def __post_init__(self):
        if self.held_out_subject in self.train_subjects:
            raise ConfigValidationError(
                "held-out subject appears in the training multiset",
                fields=("train_subjects",),
            )
        bad = [m for m in self.modality_subset if m not in MODALITY_COLUMNS]
        bad += [s for s in self.session_subset if s not in LETTER_KIND]
        if bad:
            raise ConfigValidationError(f"unknown subset entries {bad}", fields=tuple(bad))


@dataclass
class PredictionTable:
    """Flat per-second predictions: one row per (subject, session, seed, t)."""

    subject: np.ndarray
    session: np.ndarray
    seed: np.ndarray
    time_s: np.ndarray
    p_stress: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.time_s)

    def averaged_over_seeds(self) -> "PredictionTable":
        """Mean probability per (subject, session, t); seed column becomes -1."""
        key = np.char.add(np.char.add(self.subject.astype(str), "\x1f"), self.session.astype(str))
        subs, sess, seeds, times, probs, labels = [], [], [], [], [], []
        for k in np.unique(key):
            m = key == k
            t = self.time_s[m]
            uniq, inv = np.unique(t, return_inverse=True)
            mean_p = np.bincount(inv, weights=self.p_stress[m]) / np.bincount(inv)
            first = np.zeros(uniq.size, dtype=np.int64)
            first[inv[::-1]] = np.flatnonzero(m)[::-1]
            subs.append(self.subject[first])
            sess.append(self.session[first])
            labels.append(self.label[first])
            seeds.append(np.full(uniq.size, -1, dtype=np.int64))
            times.append(uniq)
            probs.append(mean_p)
        return PredictionTable(
            subject=np.concatenate(subs),
            session=np.concatenate(sess),
            seed=np.concatenate(seeds),
            time_s=np.concatenate(times),
            p_stress=np.concatenate(probs),
            label=np.concatenate(labels),
        )

    def session_frames(self) -> list[FeatureFrame]:
        """One single-column pseudo-frame per (subject, session) for the
        permutation machinery; call on a seed-averaged table."""
        key = np.char.add(np.char.add(self.subject.astype(str), "\x1f"), self.session.astype(str))
        frames = []
        for k in np.unique(key):
            m = key == k
            subject, kind = k.split("\x1f")
            order = np.argsort(self.time_s[m], kind="stable")
            frames.append(
                FeatureFrame(
                    timestamps_s=self.time_s[m][order],
                    values=self.p_stress[m][order, None],
                    columns=("p_stress",),
                    labels=self.label[m][order],
                    subject_id=subject,
                    session_kind=kind,
                )
            )
        return frames


@dataclass
class FoldAudit:
    """Provenance of one trained fold, for leakage audits."""

    held_out_subject: str
    seed_index: int
    train_subjects: tuple[str, ...]
    n_train_rows: int
    train_fingerprint: str


@dataclass
class EvalReport:
    auroc: float
    auroc_ci: tuple[float, float]
    permutation_p: float
    mean_p_free: float
    mean_p_stress: float
    per_subject_auroc: dict[str, float]
    n_subjects: int
    n_seeds: int
    modalities: tuple[str, ...]
    sessions: tuple[str, ...]
    feature_columns: tuple[str, ...]
    warnings: list[str] = field(default_factory=list)
    audits: list[FoldAudit] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "auroc_ci": list(self.auroc_ci),
            "permutation_p": self.permutation_p,
            "mean_p_free": self.mean_p_free,
            "mean_p_stress": self.mean_p_stress,
            "per_subject_auroc": dict(sorted(self.per_subject_auroc.items())),
            "n_subjects": self.n_subjects,
            "n_seeds": self.n_seeds,
            "modalities": list(self.modalities),
            "sessions": list(self.sessions),
            "feature_columns": list(self.feature_columns),
            "warnings": list(self.warnings),
        }


@dataclass
class EventWindowStats:
    event_name: str
    auroc_by_subject: dict[str, float]
    slope_by_subject: dict[str, float]
    wilcoxon_p: float
    fdr_flag: bool
    truncated: bool = False


@dataclass
class BehaviorReport:
    fits: dict[str, stats.LmmFit]
    p_adjusted: dict[str, float]
    flags: dict[str, bool]
    skipped: list[str]
    session_kind: str


@dataclass
class RecoveryResult:
    subject_id: str
    session_kind: str
    category: str  # Increase | Decrease | Stable
    rho: float
    p_fdr: float
    start_level: float


@dataclass
class PreparedDataset:
    """Per-subject normalized, imputed feature frames plus source sessions."""

    frames_by_subject: dict[str, list[FeatureFrame]]
    sessions_by_subject: dict[str, list[Session]]
    warnings: list[str]

    @property
    def subjects(self) -> tuple[str, ...]:
        return tuple(sorted(self.frames_by_subject))


def _fold_seed(master_seed: int, subject_id: str, seed_index: int) -> int:
    digest = hashlib.sha256(f"{master_seed}|{subject_id}|{seed_index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def prepare_frames(dataset: list[Session], include_vehicle: bool) -> PreparedDataset:
    """Build, normalize, and impute one frame per usable session.

    Normalization is per subject against the first 60 s of their own free
    driving, so prepared frames are fold-independent. Sessions without a
    free-driving phase are skipped with a warning record, as are columns
    that cannot be imputed (left missing; the classifier routes NaN).
    """
    frames: dict[str, list[FeatureFrame]] = {}
    sessions: dict[str, list[Session]] = {}
    warnings: list[str] = []
    for session in dataset:
        tag = f"{session.subject_id}/{session.session_kind}"
        if "free_driving" not in session.phases:
            warnings.append(f"{tag}: no free-driving phase; session skipped")
            continue
        f0, f1 = session.phases["free_driving"]
        frame = build_feature_frame(session, include_vehicle=include_vehicle)
        frame = zscore_baseline(frame, (f0, min(f0 + BASELINE_S, f1)))
        try:
            frame = knn_impute(frame)
        except UnimputableColumnError as exc:
            warnings.append(f"{tag}: {exc}; column left missing")
        frames.setdefault(session.subject_id, []).append(frame)
        sessions.setdefault(session.subject_id, []).append(session)
    return PreparedDataset(frames, sessions, warnings)


def _columns_for(modalities: tuple[str, ...]) -> tuple[str, ...]:
    cols: list[str] = []
    for m in modalities:
        if m not in MODALITY_COLUMNS:
            raise ConfigValidationError(f"unknown modality '{m}'", fields=(m,))
        cols.extend(MODALITY_COLUMNS[m])
    return tuple(cols)


def _stack_training(
    prepared: PreparedDataset,
    plan: LosoPlan,
    columns: tuple[str, ...],
) -> tuple[np.ndarray, np.ndarray]:
    kinds = {LETTER_KIND[s] for s in plan.session_subset}
    blocks, labels = [], []
    for subject in plan.train_subjects:
        for frame in prepared.frames_by_subject[subject]:
            if frame.session_kind not in kinds:
                continue
            mask = frame.training_mask()
            idx = [frame.columns.index(c) for c in columns]
            blocks.append(frame.values[mask][:, idx])
            labels.append((frame.labels[mask] == LABEL_STRESS).astype(np.float64))
    if not blocks:
        return np.zeros((0, len(columns))), np.zeros(0)
    return np.vstack(blocks), np.concatenate(labels)


def _run_fold(
    prepared: PreparedDataset,
    plan: LosoPlan,
    config: GbtConfig,
    columns: tuple[str, ...],
    test_kinds: set[str],
    seed_index: int,
):
    X, y = _stack_training(prepared, plan, columns)
    model = fit(X, y, replace(config, seed=plan.seed % (2**31)))
    audit = FoldAudit(
        held_out_subject=plan.held_out_subject,
        seed_index=seed_index,
        train_subjects=plan.train_subjects,
        n_train_rows=X.shape[0],
        train_fingerprint=hashlib.sha256(np.ascontiguousarray(X).tobytes()).hexdigest(),
    )
    rows = []
    for frame in prepared.frames_by_subject[plan.held_out_subject]:
        if frame.session_kind not in test_kinds:
            continue
        idx = [frame.columns.index(c) for c in columns]
        probs = predict_proba(model, frame.values[:, idx])
        rows.append((frame.session_kind, frame.timestamps_s, probs, frame.labels))
    return audit, rows


def _assemble_predictions(results: list) -> PredictionTable:
    subs, sess, seeds, times, probs, labels = [], [], [], [], [], []
    for subject, seed_index, fold_rows in results:
        for kind, t, p, lab in fold_rows:
            n = len(t)
            subs.append(np.full(n, subject))
            sess.append(np.full(n, kind))
            seeds.append(np.full(n, seed_index, dtype=np.int64))
            times.append(t)
            probs.append(p)
            labels.append(lab)
    if not subs:
        return PredictionTable(*(np.zeros(0, dtype=object),) * 2, np.zeros(0, dtype=np.int64),
                               np.zeros(0), np.zeros(0), np.zeros(0, dtype=object))
    return PredictionTable(
        subject=np.concatenate(subs),
        session=np.concatenate(sess),
        seed=np.concatenate(seeds),
        time_s=np.concatenate(times),
        p_stress=np.concatenate(probs),
        label=np.concatenate(labels),
    )


def scores_and_labels(frames: list[FeatureFrame]) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (score, is-stress) pairs over the labeled rows of score frames."""
    scores, labels = [], []
    for f in frames:
        mask = f.training_mask()
        scores.append(f.values[mask, 0])
        labels.append(f.labels[mask] == LABEL_STRESS)
    return np.concatenate(scores), np.concatenate(labels)


def run_loso(
    dataset: list[Session],
    config: GbtConfig | None = None,
    n_seeds: int = 10,
    modalities: tuple[str, ...] = PHYSIO_MODALITIES,
    sessions: tuple[str, ...] = ALL_SESSION_LETTERS,
    master_seed: int = 0,
    n_jobs: int = 1,
    prepared: PreparedDataset | None = None,
) -> tuple[PredictionTable, EvalReport]:
    """Leave-one-subject-out evaluation with resampled training pools.

    Per fold and seed, the training multiset draws N-1 subjects with
    replacement from everyone but the held-out subject; frames are
    normalized per subject, imputed, and fit; the held-out subject gets
    per-second probabilities for every frame row (all phases). The
    report's AUROC, CI, and permutation p are computed on seed-averaged
    per-second probabilities pooled across subjects and sessions.
    """
    config = GbtConfig() if config is None else config
    columns = _columns_for(modalities)
    if prepared is None:
        prepared = prepare_frames(dataset, include_vehicle="VEHICLE" in modalities)
    subjects = prepared.subjects
    if len(subjects) < 3:
        raise InsufficientDataError(f"LOSO needs at least 3 usable subjects, got {len(subjects)}")
    test_kinds = {LETTER_KIND[s] for s in sessions}

    jobs = []
    for subject in subjects:
        pool = [s for s in subjects if s != subject]
        for k in range(n_seeds):
            fold_seed = _fold_seed(master_seed, subject, k)
            rng = np.random.default_rng(fold_seed)
            multiset = tuple(sorted(rng.choice(pool, size=len(pool), replace=True).tolist()))
            plan = LosoPlan(
                held_out_subject=subject,
                train_subjects=multiset,
                seed=fold_seed,
                modality_subset=tuple(modalities),
                session_subset=tuple(sessions),
            )
            jobs.append((subject, k, plan))

    def work(job):
        subject, k, plan = job
        audit, rows = _run_fold(prepared, plan, config, columns, test_kinds, k)
        return subject, k, audit, rows

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool_exec:
            raw = list(pool_exec.map(work, jobs))
    else:
        raw = [work(j) for j in jobs]
    raw.sort(key=lambda r: (r[0], r[1]))

    audits = [r[2] for r in raw]
    table = _assemble_predictions([(r[0], r[1], r[3]) for r in raw])

    averaged = table.averaged_over_seeds()
    frames = averaged.session_frames()
    scores, labels = scores_and_labels(frames)
    if labels.all() or not labels.any():
        raise InsufficientDataError("evaluation rows cover only one class")
    result = stats.auroc_result(scores[labels], scores[~labels], seed=master_seed)
    perm_p = stats.permutation_pvalue(frames, scores_and_labels, seed=master_seed)

    per_subject: dict[str, float] = {}
    for subject in subjects:
        fsub = [f for f in frames if f.subject_id == subject]
        if not fsub:
            continue
        s, l = scores_and_labels(fsub)
        if l.any() and not l.all():
            per_subject[subject] = stats.auroc(s[l], s[~l])

    report = EvalReport(
        auroc=result.auroc,
        auroc_ci=(result.ci_low, result.ci_high),
        permutation_p=perm_p,
        mean_p_free=float(np.mean(scores[~labels])),
        mean_p_stress=float(np.mean(scores[labels])),
        per_subject_auroc=per_subject,
        n_subjects=len(subjects),
        n_seeds=n_seeds,
        modalities=tuple(modalities),
        sessions=tuple(sessions),
        feature_columns=columns,
        warnings=list(prepared.warnings),
        audits=audits,
    )
    return table, report


@dataclass
class CrossSessionMatrix:
    order: tuple[str, ...]
    auroc: np.ndarray          # rows: train selection, cols: test selection
    n_train_rows: np.ndarray   # mean training rows per fitted fold
    available: np.ndarray

    def cell(self, train: str, test: str) -> float:
        return float(self.auroc[self.order.index(train), self.order.index(test)])


def cross_session_matrix(
    dataset: list[Session],
    config: GbtConfig | None = None,
    n_seeds: int = 10,
    master_seed: int = 0,
    prepared: PreparedDataset | None = None,
) -> CrossSessionMatrix:
    """Train-kind x test-kind AUROC grid over {I, M, S, All}.

    Every cell reuses the same folds and training multisets (fold seeds
    depend only on master seed, subject, and seed index), restricted to
    the cell's train/test session kinds. Cells with no test rows or a
    single-class training set are marked unavailable.
    """
    config = GbtConfig() if config is None else config
    if prepared is None:
        prepared = prepare_frames(dataset, include_vehicle=False)
    subjects = prepared.subjects
    if len(subjects) < 3:
        raise InsufficientDataError(f"cross-session matrix needs >= 3 subjects, got {len(subjects)}")
    columns = _columns_for(PHYSIO_MODALITIES)
    order = ("I", "M", "S", "All")
    selections = {sel: (sel,) if sel in LETTER_KIND else ALL_SESSION_LETTERS for sel in order}

    grid = np.full((4, 4), np.nan)
    rows_grid = np.zeros((4, 4))
    avail = np.zeros((4, 4), dtype=bool)
    for i, train_sel in enumerate(order):
        for j, test_sel in enumerate(order):
            test_kinds = {LETTER_KIND[s] for s in selections[test_sel]}
            pooled_scores, pooled_labels, nrows = [], [], []
            for subject in subjects:
                pool = [s for s in subjects if s != subject]
                per_seed = []
                for k in range(n_seeds):
                    fold_seed = _fold_seed(master_seed, subject, k)
                    rng = np.random.default_rng(fold_seed)
                    multiset = tuple(sorted(rng.choice(pool, size=len(pool), replace=True).tolist()))
                    plan = LosoPlan(
                        held_out_subject=subject,
                        train_subjects=multiset,
                        seed=fold_seed,
                        session_subset=selections[train_sel],
                    )
                    X, y = _stack_training(prepared, plan, columns)
                    if X.shape[0] == 0 or len(np.unique(y)) < 2 or min(
                        np.sum(y == 0), np.sum(y == 1)
                    ) < 2:
                        continue
                    model = fit(X, y, replace(config, seed=plan.seed % (2**31)))
                    nrows.append(X.shape[0])
                    for frame in prepared.frames_by_subject[subject]:
                        if frame.session_kind not in test_kinds:
                            continue
                        idx = [frame.columns.index(c) for c in columns]
                        per_seed.append(
                            (
                                frame.session_kind,
                                frame.timestamps_s,
                                predict_proba(model, frame.values[:, idx]),
                                frame.labels,
                            )
                        )
                if not per_seed:
                    continue
                # seed-average per (session, t)
                by_key: dict = {}
                for kind, t, p, lab in per_seed:
                    acc = by_key.setdefault(kind, [t, np.zeros_like(p), 0, lab])
                    acc[1] = acc[1] + p
                    acc[2] += 1
                for kind, (t, psum, cnt, lab) in by_key.items():
                    keep = lab != LABEL_EXCLUDED
                    pooled_scores.append(psum[keep] / cnt)
                    pooled_labels.append(lab[keep] == LABEL_STRESS)
            if pooled_scores:
                scores = np.concatenate(pooled_scores)
                labels = np.concatenate(pooled_labels)
                if labels.any() and not labels.all():
                    grid[i, j] = stats.auroc(scores[labels], scores[~labels])
                    rows_grid[i, j] = float(np.mean(nrows)) if nrows else 0.0
                    avail[i, j] = True
    return CrossSessionMatrix(order=order, auroc=grid, n_train_rows=rows_grid, available=avail)


def event_sensitivity(
    predictions: PredictionTable,
    sessions: list[Session],
    alpha: float = 0.05,
) -> list[EventWindowStats]:
    """Post-onset probability response per stressor event.

    Probabilities are averaged over seeds per subject before scoring
    (other analyses share this convention). Per subject and event, the
    15 one-second samples in [onset, onset + 15) are compared to the
    whole free-driving phase by AUROC, and their trend is summarized by
    an OLS slope; a one-sided signed-rank test asks whether slopes are
    positive across subjects, FDR-corrected across events.
    """
    averaged = predictions.averaged_over_seeds()
    by_session = {
        (f.subject_id, f.session_kind): f for f in averaged.session_frames()
    }
    events: dict[str, dict[str, tuple[float, float]]] = {}
    truncated: dict[str, bool] = {}
    for session in sessions:
        key = (session.subject_id, session.session_kind)
        if key not in by_session:
            continue
        frame = by_session[key]
        end = float(frame.timestamps_s[-1]) + 1.0
        for ev in session.events:
            win_end = ev.onset_time_s + EVENT_WINDOW_S
            was_truncated = win_end > end
            entry = events.setdefault(ev.name, {})
            entry[session.subject_id] = (ev.onset_time_s, min(win_end, end))
            truncated[ev.name] = truncated.get(ev.name, False) or was_truncated

    results: list[EventWindowStats] = []
    pvals: list[float] = []
    for name in sorted(events):
        aurocs: dict[str, float] = {}
        slopes: dict[str, float] = {}
        for (subject, kind), frame in sorted(by_session.items()):
            if subject not in events[name]:
                continue
            onset, win_end = events[name][subject]
            t = frame.timestamps_s
            p = frame.values[:, 0]
            in_window = (t >= onset) & (t < win_end)
            free = frame.labels == LABEL_FREE
            if in_window.sum() < 2 or free.sum() == 0:
                continue
            aurocs[subject] = stats.auroc(p[in_window], p[free])
            slopes[subject] = linear_slope(p[in_window], dt_s=1.0)
        if slopes and np.any(np.asarray(list(slopes.values())) != 0.0):
            try:
                p_w = stats.wilcoxon_signed_rank(list(slopes.values()), alternative="greater")
            except UndefinedTestError:
                p_w = 1.0  # too few contributing subjects to reach significance
        else:
            p_w = 1.0
        pvals.append(p_w)
        results.append(
            EventWindowStats(
                event_name=name,
                auroc_by_subject=aurocs,
                slope_by_subject=slopes,
                wilcoxon_p=p_w,
                fdr_flag=False,
                truncated=truncated.get(name, False),
            )
        )
    if results:
        flags, _ = stats.fdr_bh(pvals, alpha=alpha)
        for r, f in zip(results, flags):
            r.fdr_flag = bool(f)
    return results


def build_behavior_frame(session: Session) -> FeatureFrame:
    """Per-second frame of the eight vehicle-control metrics."""
    base = build_feature_frame(session, include_vehicle=False)
    v = session.vehicle
    if v is None:
        raise InsufficientDataError(f"session {session.subject_id} has no vehicle telemetry")
    rows = np.full((len(base), len(BEHAVIOR_METRICS)), np.nan)
    for i, t in enumerate(base.timestamps_s):
        metrics = vehicle_features(v, (t - 15.0, t + 15.0))
        rows[i] = [metrics[m] for m in BEHAVIOR_METRICS]
    return FeatureFrame(
        timestamps_s=base.timestamps_s,
        values=rows,
        columns=BEHAVIOR_METRICS,
        labels=base.labels,
        subject_id=session.subject_id,
        session_kind=session.session_kind,
    )


def behavior_association(
    predictions: PredictionTable,
    vehicle_frames: list[FeatureFrame],
    session_kind: str,
    alpha: float = 0.05,
) -> BehaviorReport:
    """Mixed models: metric ~ stress score with a subject random intercept.

    Scores and metrics align per second within the given session kind.
    Metrics with no finite value are skipped with a record; p-values for
    the stress coefficient are FDR-adjusted across the metric family.
    """
    averaged = predictions.averaged_over_seeds()
    scores_by_subject: dict[str, dict[float, float]] = {}
    mask = averaged.session == session_kind
    for subject in np.unique(averaged.subject[mask]):
        m = mask & (averaged.subject == subject)
        scores_by_subject[str(subject)] = dict(
            zip(averaged.time_s[m].tolist(), averaged.p_stress[m].tolist())
        )

    ys: dict[str, list] = {m: [] for m in BEHAVIOR_METRICS}
    xs: dict[str, list] = {m: [] for m in BEHAVIOR_METRICS}
    gs: dict[str, list] = {m: [] for m in BEHAVIOR_METRICS}
    for frame in vehicle_frames:
        if frame.session_kind != session_kind or frame.subject_id not in scores_by_subject:
            continue
        lookup = scores_by_subject[frame.subject_id]
        for m in BEHAVIOR_METRICS:
            col = frame.values[:, frame.columns.index(m)]
            for t, value in zip(frame.timestamps_s.tolist(), col):
                if np.isfinite(value) and t in lookup:
                    ys[m].append(value)
                    xs[m].append(lookup[t])
                    gs[m].append(frame.subject_id)

    fits: dict[str, stats.LmmFit] = {}
    skipped: list[str] = []
    for m in BEHAVIOR_METRICS:
        if not ys[m]:
            skipped.append(m)
            continue
        fits[m] = stats.lmm_fit(np.asarray(ys[m]), np.asarray(xs[m]), np.asarray(gs[m]))
    names = sorted(fits)
    flags, adjusted = stats.fdr_bh([fits[m].beta_p[1] for m in names], alpha=alpha)
    return BehaviorReport(
        fits=fits,
        p_adjusted={m: float(a) for m, a in zip(names, adjusted)},
        flags={m: bool(f) for m, f in zip(names, flags)},
        skipped=skipped,
        session_kind=session_kind,
    )


def recovery_analysis(
    predictions: PredictionTable,
    sessions: list[Session],
) -> list[RecoveryResult]:
    """Stress trend over the recovery phase, categorized per session.

    Spearman rho of the seed-averaged probability against time within
    recovery; p-values are FDR-adjusted across sessions and a session is
    Increase/Decrease only when its adjusted p stays under 0.001.
    start_level is the mean probability over the first 30 s of recovery.
    """
    averaged = predictions.averaged_over_seeds()
    by_session = {(f.subject_id, f.session_kind): f for f in averaged.session_frames()}
    rows = []
    for session in sessions:
        key = (session.subject_id, session.session_kind)
        if key not in by_session:
            continue
        if "recovery" not in session.phases:
            continue  # skipped, recorded by absence from the output
        r0, r1 = session.phases["recovery"]
        if r1 - r0 < RECOVERY_MIN_S:
            raise InsufficientRecoveryError(
                f"{session.subject_id}/{session.session_kind}: recovery lasts "
                f"{r1 - r0:.0f} s, need >= {RECOVERY_MIN_S:.0f}"
            )
        frame = by_session[key]
        t = frame.timestamps_s
        p = frame.values[:, 0]
        in_rec = (t >= r0) & (t < r1)
        if in_rec.sum() < 3:
            continue
        try:
            rho, p_val = stats.spearman_rho(t[in_rec], p[in_rec])
        except UndefinedTestError:
            rho, p_val = 0.0, 1.0  # constant trajectory carries no trend evidence
        start_mask = in_rec & (t < r0 + RECOVERY_START_S)
        start = float(np.mean(p[start_mask])) if start_mask.any() else float("nan")
        rows.append([session.subject_id, session.session_kind, rho, p_val, start])

    if not rows:
        return []
    _, adjusted = stats.fdr_bh([r[3] for r in rows])
    results = []
    for (subject, kind, rho, _, start), p_adj in zip(rows, adjusted):
        if p_adj < RECOVERY_ALPHA and rho > 0:
            category = "Increase"
        elif p_adj < RECOVERY_ALPHA and rho < 0:
            category = "Decrease"
        else:
            category = "Stable"
        results.append(
            RecoveryResult(
                subject_id=subject,
                session_kind=kind,
                category=category,
                rho=float(rho),
                p_fdr=float(p_adj),
                start_level=start,
            )
        )
    return results


def write_predictions_csv(table: PredictionTable, path) -> None:
    frame = pd.DataFrame(
        {
            "subject": table.subject,
            "session": table.session,
            "seed": table.seed,
            "time_s": table.time_s,
            "p_stress": table.p_stress,
            "label": table.label,
        }
    )
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def read_predictions_csv(path) -> PredictionTable:
    frame = pd.read_csv(path)
    return PredictionTable(
        subject=frame["subject"].to_numpy(dtype=object),
        session=frame["session"].to_numpy(dtype=object),
        seed=frame["seed"].to_numpy(dtype=np.int64),
        time_s=frame["time_s"].to_numpy(dtype=np.float64),
        p_stress=frame["p_stress"].to_numpy(dtype=np.float64),
        label=frame["label"].to_numpy(dtype=object),
    )
