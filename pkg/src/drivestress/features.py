"""Per-second feature matrix assembly.

Features are extracted from 30 s windows centered on each whole second
(15 s before and after), hopping 1 s, giving one row per covered second.
Each row carries the 12 physiological features in the canonical column
order plus, optionally, 6 vehicle features. Rows are labeled free/stress
by the phase containing the window center; everything else is excluded
from training but kept for recovery analysis. Downstream normalization is
per subject against the first minute of free driving, followed by k-NN
imputation of missing cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .cardiac import detect_r_peaks, heart_rate, rsa_p2t
from .eda import cvxeda_decompose, eda_features, extract_scr_events
from .errors import (
    InvalidBaselineError,
    InvalidIntervalError,
    MissingChannelError,
    ShapeMismatchError,
    UnimputableColumnError,
)
from .respiration import detect_breath_cycles, rsp_features
from .signals import ECG, EDA, RSP_FUSED, SKT, SignalTrace, linear_slope

WINDOW_S = 30.0
HALF_WINDOW_S = WINDOW_S / 2.0
HOP_S = 1.0
BASELINE_S = 60.0        # normalization window: first minute of free driving
MIN_BASELINE_ROWS = 30
KNN_K = 5
PRESS_THRESHOLD = 0.05   # normalized pedal value counting as an active press
ENTROPY_RATE_HZ = 10.0
SAMPEN_M = 2
SAMPEN_R_FRACTION = 0.2

SESSION_KINDS = ("Irritation", "Impatience", "Surprise")
PHASE_ORDER = ("baseline_video", "practice", "free_driving", "stressor_driving", "recovery")

LABEL_FREE = "free"
LABEL_STRESS = "stress"
LABEL_EXCLUDED = "excluded"

PHYSIO_COLUMNS = (
    "hr_bpm",
    "rsa_s",
    "scl_mean_us",
    "scl_slope_us_per_s",
    "scr_frequency_per_min",
    "scr_amplitude_us",
    "scr_rise_time_s",
    "rsp_period_s",
    "rsp_depth",
    "rsp_rvt",
    "skt_mean_c",
    "skt_slope_c_per_s",
)
VEHICLE_COLUMNS = (
    "speed_mean_kmh",
    "steering_std_deg",
    "throttle_magnitude",
    "throttle_entropy",
    "brake_magnitude",
    "brake_entropy",
)


@dataclass
class StressorEvent:
    name: str
    onset_time_s: float


@dataclass
class VehicleTelemetry:
    """Simulator channels: speed (km/h), steering angle (deg), pedals (0-1)."""

    speed: SignalTrace
    steering_angle: SignalTrace
    throttle: SignalTrace
    brake: SignalTrace

    def __post_init__(self):
        traces = (self.speed, self.steering_angle, self.throttle, self.brake)
        rates = {t.sample_rate_hz for t in traces}
        if len(rates) != 1:
            raise ShapeMismatchError(f"vehicle channels disagree on sample rate: {sorted(rates)}")
        for name, tr in (("throttle", self.throttle), ("brake", self.brake)):
            if len(tr) and (tr.samples.min() < -1e-9 or tr.samples.max() > 1.0 + 1e-9):
                raise ShapeMismatchError(f"{name} values must lie in [0, 1]")

    @property
    def sample_rate_hz(self) -> float:
        return self.speed.sample_rate_hz


@dataclass
class Session:
    """One recording: preprocessed biosignals, telemetry, phases, events.

    Phases are half-open [start, end) intervals keyed by the five protocol
    names, non-overlapping and in protocol order. Event onsets must lie in
    stressor driving or recovery.
    """

    subject_id: str
    session_kind: str
    traces: dict[str, SignalTrace]
    phases: dict[str, tuple[float, float]]
    events: list[StressorEvent] = field(default_factory=list)
    vehicle: VehicleTelemetry | None = None

    def __post_init__(self):
        if self.session_kind not in SESSION_KINDS:
            raise ShapeMismatchError(
                f"unknown session kind '{self.session_kind}'; expected one of {SESSION_KINDS}"
            )
        for label, tr in self.traces.items():
            if tr.label != label:
                raise ShapeMismatchError(f"trace under key '{label}' is labeled '{tr.label}'")
        unknown = set(self.phases) - set(PHASE_ORDER)
        if unknown:
            raise InvalidIntervalError(f"unknown phase names: {sorted(unknown)}")
        prev_end = -np.inf
        for name in PHASE_ORDER:
            if name not in self.phases:
                continue
            s, e = self.phases[name]
            if not (e > s):
                raise InvalidIntervalError(f"phase '{name}' has non-positive duration")
            if s < prev_end - 1e-9:
                raise InvalidIntervalError(f"phase '{name}' overlaps the previous phase")
            prev_end = e
        for ev in self.events:
            if not self._in_phase(ev.onset_time_s, "stressor_driving") and not self._in_phase(
                ev.onset_time_s, "recovery"
            ):
                raise InvalidIntervalError(
                    f"event '{ev.name}' at {ev.onset_time_s} s lies outside "
                    "stressor driving and recovery"
                )

    def _in_phase(self, t: float, name: str) -> bool:
        if name not in self.phases:
            return False
        s, e = self.phases[name]
        return s <= t < e

    def label_at(self, t: float) -> str:
        if self._in_phase(t, "free_driving"):
            return LABEL_FREE
        if self._in_phase(t, "stressor_driving"):
            return LABEL_STRESS
        return LABEL_EXCLUDED


@dataclass
class FeatureFrame:
    """Per-second feature rows for one session. NaN cells are missing."""

    timestamps_s: np.ndarray
    values: np.ndarray
    columns: tuple[str, ...]
    labels: np.ndarray
    subject_id: str
    session_kind: str
    degenerate_columns: tuple[str, ...] = ()

    def __post_init__(self):
        self.timestamps_s = np.asarray(self.timestamps_s, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.columns = tuple(self.columns)
        if self.values.shape != (len(self.timestamps_s), len(self.columns)):
            raise ShapeMismatchError(
                f"feature values shaped {self.values.shape}, expected "
                f"({len(self.timestamps_s)}, {len(self.columns)})"
            )
        if self.labels.shape != self.timestamps_s.shape:
            raise ShapeMismatchError("labels length does not match timestamps")

    def __len__(self) -> int:
        return len(self.timestamps_s)

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def training_mask(self) -> np.ndarray:
        return self.labels != LABEL_EXCLUDED


def sample_entropy(x: np.ndarray, m: int = SAMPEN_M, r_fraction: float = SAMPEN_R_FRACTION) -> float:
    """SampEn(m, r_fraction * std) with the Richman-Moorman template count.

    Conventions: a constant series scores 0; no template matches at length
    m also scores 0 (the series carries no repeat structure to lose); no
    matches at length m+1 only gives NaN, treated as a missing cell.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n and (np.ptp(x) == 0.0 or np.std(x) < 1e-12):
        return 0.0
    if n < m + 3:
        return float("nan")
    r = r_fraction * float(np.std(x))
    nt = n - m  # templates of length m that extend to m+1
    dist = np.zeros((nt, nt))
    for k in range(m):
        seg = x[k : k + nt]
        dist = np.maximum(dist, np.abs(seg[:, None] - seg[None, :]))
    b = (int(np.count_nonzero(dist <= r)) - nt) // 2
    seg = x[m : m + nt]
    dist = np.maximum(dist, np.abs(seg[:, None] - seg[None, :]))
    a = (int(np.count_nonzero(dist <= r)) - nt) // 2
    if b == 0:
        return 0.0
    if a == 0:
        return float("nan")
    return float(-np.log(a / b))


def skt_features(skt: SignalTrace, window: tuple[float, float]) -> dict[str, float]:
    """Mean and linear slope of the raw temperature inside the window."""
    start, end = window
    seg = skt.segment(start, end)
    if len(seg) == 0:
        return {"skt_mean_c": float("nan"), "skt_slope_c_per_s": float("nan")}
    return {
        "skt_mean_c": float(np.mean(seg)),
        "skt_slope_c_per_s": linear_slope(seg, 1.0 / skt.sample_rate_hz),
    }


def vehicle_features(vehicle: VehicleTelemetry, window: tuple[float, float]) -> dict[str, float]:
    """Speed, steering, and per-pedal usage metrics over a window.

    Per pedal: rate = percentage of samples pressed past the threshold,
    magnitude = mean value over pressed samples (NaN when never pressed),
    entropy = sample entropy of the pedal trace stride-decimated to 10 Hz.
    """
    start, end = window
    speed = vehicle.speed.segment(start, end)
    steering = vehicle.steering_angle.segment(start, end)
    out = {
        "speed_mean_kmh": float(np.mean(speed)) if len(speed) else float("nan"),
        "steering_std_deg": float(np.std(steering)) if len(steering) else float("nan"),
    }
    for name, tr in (("throttle", vehicle.throttle), ("brake", vehicle.brake)):
        seg = tr.segment(start, end)
        if len(seg) == 0:
            out[f"{name}_rate_pct"] = float("nan")
            out[f"{name}_magnitude"] = float("nan")
            out[f"{name}_entropy"] = float("nan")
            continue
        pressed = seg > PRESS_THRESHOLD
        out[f"{name}_rate_pct"] = 100.0 * float(np.mean(pressed))
        out[f"{name}_magnitude"] = float(np.mean(seg[pressed])) if np.any(pressed) else float("nan")
        # stride decimation keeps the raw press levels the entropy measures
        stride = max(1, int(round(tr.sample_rate_hz / ENTROPY_RATE_HZ)))
        out[f"{name}_entropy"] = sample_entropy(seg[::stride])
    return out


def build_feature_frame(
    session: Session,
    include_vehicle: bool = False,
    window_s: float = WINDOW_S,
    hop_s: float = HOP_S,
) -> FeatureFrame:
    """One row per hop at center t whose window [t-w/2, t+w/2] fits.

    Raises:
        MissingChannelError: a required biosignal channel (or the vehicle
            telemetry, when requested) is absent.
        InvalidIntervalError: non-positive window or hop, or a session too
            short to fit a single window.
    """
    if window_s <= 0 or hop_s <= 0:
        raise InvalidIntervalError("window and hop must be positive")
    for channel in (ECG, EDA, RSP_FUSED, SKT):
        if channel not in session.traces:
            raise MissingChannelError(f"session is missing required channel '{channel}'")
    if include_vehicle and session.vehicle is None:
        raise MissingChannelError("session has no vehicle telemetry")

    traces = [session.traces[c] for c in (ECG, EDA, RSP_FUSED, SKT)]
    if include_vehicle:
        traces += [session.vehicle.speed, session.vehicle.steering_angle,
                   session.vehicle.throttle, session.vehicle.brake]
    start = max(tr.start_time_s for tr in traces)
    end = min(tr.end_time_s for tr in traces)
    if end - start < window_s:
        raise InvalidIntervalError(
            f"session covers {end - start:.1f} s; need at least {window_s:.0f} s"
        )

    peaks = detect_r_peaks(session.traces[ECG])
    ibis = peaks.ibis()
    cycles = detect_breath_cycles(session.traces[RSP_FUSED])
    decomp = cvxeda_decompose(session.traces[EDA])
    scrs = extract_scr_events(decomp)

    half = window_s / 2.0
    times = []
    t = start + half
    while t + half <= end + 1e-9:
        times.append(t)
        t += hop_s
    columns = PHYSIO_COLUMNS + (VEHICLE_COLUMNS if include_vehicle else ())
    values = np.full((len(times), len(columns)), np.nan)
    labels = np.empty(len(times), dtype="<U8")
    for i, tc in enumerate(times):
        window = (tc - half, tc + half)
        row = {
            "hr_bpm": heart_rate(peaks, window),
            "rsa_s": rsa_p2t(ibis, cycles, window),
        }
        row.update(eda_features(decomp, scrs, window))
        row.update(rsp_features(cycles, window))
        row.update(skt_features(session.traces[SKT], window))
        if include_vehicle:
            row.update(vehicle_features(session.vehicle, window))
        values[i] = [row[c] for c in columns]
        labels[i] = session.label_at(tc)
    return FeatureFrame(
        timestamps_s=np.asarray(times),
        values=values,
        columns=columns,
        labels=labels,
        subject_id=session.subject_id,
        session_kind=session.session_kind,
    )


def zscore_baseline(frame: FeatureFrame, baseline: tuple[float, float]) -> FeatureFrame:
    """Normalize every column against its baseline-window mean and std.

    Columns whose baseline std falls below 1e-12 are centered only and
    flagged in degenerate_columns; columns with no baseline observations
    pass through untouched, also flagged.

    Raises:
        InvalidBaselineError: baseline interval empty, holding fewer than
            MIN_BASELINE_ROWS rows, or degenerate in every column.
    """
    b0, b1 = baseline
    if not (b1 > b0):
        raise InvalidBaselineError(f"baseline [{b0}, {b1}) has non-positive duration")
    sel = (frame.timestamps_s >= b0) & (frame.timestamps_s < b1)
    n_rows = int(np.count_nonzero(sel))
    if n_rows < MIN_BASELINE_ROWS:
        raise InvalidBaselineError(
            f"baseline holds {n_rows} rows; need at least {MIN_BASELINE_ROWS}"
        )
    out = frame.values.copy()
    flags = []
    informative = 0
    for j, col in enumerate(frame.columns):
        obs = frame.values[sel, j]
        obs = obs[~np.isnan(obs)]
        if len(obs) == 0:
            flags.append(col)
            continue
        mu = float(np.mean(obs))
        sd = float(np.std(obs))
        if sd < 1e-12:
            out[:, j] = frame.values[:, j] - mu
            flags.append(col)
            continue
        out[:, j] = (frame.values[:, j] - mu) / sd
        informative += 1
    if informative == 0:
        raise InvalidBaselineError("every column is degenerate over the baseline window")
    return replace(frame, values=out, degenerate_columns=tuple(flags))


def knn_impute(frame: FeatureFrame, k: int = KNN_K) -> FeatureFrame:
    """Fill missing cells from the k nearest rows holding that column.

    Distance is Euclidean over the columns observed in both rows, the
    target column excluded; ties break on row index. All fills derive from
    the original observed cells, so the operation is idempotent.

    Raises:
        UnimputableColumnError: a column has no observed value at all.
    """
    miss = frame.missing_mask
    values = frame.values.copy()
    if not miss.any():
        return replace(frame, values=values)
    obs = ~miss
    for j, col in enumerate(frame.columns):
        if not obs[:, j].any():
            raise UnimputableColumnError(f"column '{col}' has no observed values")
    for j in range(len(frame.columns)):
        rows = np.flatnonzero(miss[:, j])
        if len(rows) == 0:
            continue
        cand = np.flatnonzero(obs[:, j])
        for i in rows:
            mutual = obs[i][None, :] & obs[cand]
            mutual[:, j] = False
            diff = np.where(mutual, frame.values[i][None, :] - frame.values[cand], 0.0)
            d2 = np.einsum("ij,ij->i", diff, diff)
            d2[~mutual.any(axis=1)] = np.inf
            order = np.lexsort((cand, d2))
            take = cand[order[: min(k, len(cand))]]
            values[i, j] = float(np.mean(frame.values[take, j]))
    return replace(frame, values=values)
