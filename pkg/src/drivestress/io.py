"""Session persistence and the raw-to-analysis preprocessing composite.

A session on disk is a directory:

    channels.csv       time_s + one column per biosignal channel, one rate
    vehicle.csv        time_s, SPEED, STEERING, THROTTLE, BRAKE (optional)
    meta.json          subject, session kind, rates, phases, events
    ground_truth.json  generator answer key (optional, synthetic data only)

The same layout holds raw recordings (2 kHz) and preprocessed output
(250 Hz, fused respiration), so every downstream command is agnostic to
where its input came from.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import MissingChannelError, SessionParseError
from .features import FeatureFrame, Session, StressorEvent, VehicleTelemetry
from .signals import (
    BRAKE,
    ECG,
    EDA,
    RSP_ABDOMINAL,
    RSP_THORACIC,
    SKT,
    SPEED,
    STEERING,
    THROTTLE,
    IirFilterSpec,
    SignalTrace,
    design_butterworth,
    downsample,
    fuse_respiration,
    remove_powerline,
    zero_phase_filter,
)
from .synth import GroundTruth

# per-channel cleanup applied before decimation
ECG_DETREND = IirFilterSpec(kind="highpass", order=5, cutoff_hz=0.5)
EDA_SMOOTH = IirFilterSpec(kind="lowpass", order=4, cutoff_hz=3.0)
RSP_BAND = IirFilterSpec(kind="bandpass", order=2, cutoff_hz=(0.05, 3.0))
ANALYSIS_RATE_HZ = 250.0

CHANNELS_FILE = "channels.csv"
VEHICLE_FILE = "vehicle.csv"
META_FILE = "meta.json"
TRUTH_FILE = "ground_truth.json"
FLOAT_FORMAT = "%.10g"


def preprocess_session(raw: Session, mains_hz: float = 60.0, target_hz: float = ANALYSIS_RATE_HZ) -> Session:
    """Filter, fuse, and decimate a raw session into analysis form.

    ECG is detrended and notch-cleaned, EDA low-passed, the two
    respiration belts are band-passed then averaged into RSP_FUSED, and
    skin temperature passes through untouched; everything is then
    decimated to target_hz. Vehicle telemetry, phases, and events are
    carried over unchanged.
    """
    required = (ECG, EDA, RSP_THORACIC, RSP_ABDOMINAL, SKT)
    for label in required:
        if label not in raw.traces:
            raise MissingChannelError(f"session is missing required channel '{label}'")

    def run(label: str, spec: IirFilterSpec | None) -> SignalTrace:
        tr = raw.traces[label]
        if spec is not None:
            tr = zero_phase_filter(tr, design_butterworth(spec, tr.sample_rate_hz))
        return tr

    ecg = run(ECG, ECG_DETREND)
    ecg = remove_powerline(ecg, mains_hz=mains_hz)
    eda = run(EDA, EDA_SMOOTH)
    fused = fuse_respiration(run(RSP_THORACIC, RSP_BAND), run(RSP_ABDOMINAL, RSP_BAND))
    skt = raw.traces[SKT]

    traces = {tr.label: downsample(tr, target_hz) for tr in (ecg, eda, fused, skt)}
    return Session(
        subject_id=raw.subject_id,
        session_kind=raw.session_kind,
        traces=traces,
        phases=dict(raw.phases),
        events=list(raw.events),
        vehicle=raw.vehicle,
    )


def _write_table(path: Path, columns: dict[str, np.ndarray], rate_hz: float) -> None:
    n = len(next(iter(columns.values())))
    frame = pd.DataFrame({"time_s": np.arange(n) / rate_hz, **columns})
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_session(directory: str | Path, session: Session, truth: GroundTruth | None = None) -> Path:
    """Write one session directory; returns its path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)

    rates = {tr.sample_rate_hz for tr in session.traces.values()}
    if len(rates) != 1:
        raise SessionParseError("biosignal channels must share one rate to serialize", path=str(out))
    rate = rates.pop()
    _write_table(
        out / CHANNELS_FILE,
        {label: session.traces[label].samples for label in sorted(session.traces)},
        rate,
    )

    meta = {
        "subject_id": session.subject_id,
        "session_kind": session.session_kind,
        "sample_rate_hz": rate,
        "phases": {k: list(v) for k, v in session.phases.items()},
        "events": [{"name": e.name, "onset_time_s": e.onset_time_s} for e in session.events],
    }
    if session.vehicle is not None:
        v = session.vehicle
        meta["vehicle_rate_hz"] = v.sample_rate_hz
        _write_table(
            out / VEHICLE_FILE,
            {
                SPEED: v.speed.samples,
                STEERING: v.steering_angle.samples,
                THROTTLE: v.throttle.samples,
                BRAKE: v.brake.samples,
            },
            v.sample_rate_hz,
        )
    (out / META_FILE).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")

    if truth is not None:
        payload = {
            "latent_stress": truth.latent_stress.tolist(),
            "beat_times_s": truth.beat_times_s.tolist(),
            "scr_times_s": truth.scr_times_s.tolist(),
            "scr_amplitudes_us": truth.scr_amplitudes_us.tolist(),
            "breath_times_s": truth.breath_times_s.tolist(),
        }
        (out / TRUTH_FILE).write_text(json.dumps(payload, sort_keys=True) + "\n")
    return out


def _require(meta: dict, key: str, path: Path):
    if key not in meta:
        raise SessionParseError(f"meta.json missing key '{key}'", path=str(path), field=key)
    return meta[key]


def read_session(directory: str | Path) -> tuple[Session, GroundTruth | None]:
    """Read a session directory written by write_session (or by hand)."""
    src = Path(directory)
    meta_path = src / META_FILE
    if not meta_path.exists():
        raise SessionParseError("missing meta.json", path=str(src), field=META_FILE)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SessionParseError(f"meta.json is not valid JSON: {exc}", path=str(meta_path)) from exc

    rate = float(_require(meta, "sample_rate_hz", meta_path))
    table_path = src / CHANNELS_FILE
    if not table_path.exists():
        raise SessionParseError("missing channels.csv", path=str(src), field=CHANNELS_FILE)
    try:
        table = pd.read_csv(table_path)
    except (pd.errors.ParserError, ValueError) as exc:
        raise SessionParseError(f"channels.csv unreadable: {exc}", path=str(table_path)) from exc
    if "time_s" not in table.columns:
        raise SessionParseError("channels.csv lacks a time_s column", path=str(table_path), field="time_s")
    traces = {}
    for label in table.columns:
        if label == "time_s":
            continue
        values = table[label].to_numpy(dtype=np.float64)
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise SessionParseError(
                f"channel '{label}' has a non-finite value",
                path=str(table_path),
                line=bad + 2,  # header is line 1
                field=label,
            )
        traces[label] = SignalTrace(values, rate, label)

    vehicle = None
    veh_path = src / VEHICLE_FILE
    if veh_path.exists():
        vrate = float(_require(meta, "vehicle_rate_hz", meta_path))
        vtab = pd.read_csv(veh_path)
        missing = [c for c in (SPEED, STEERING, THROTTLE, BRAKE) if c not in vtab.columns]
        if missing:
            raise SessionParseError(
                f"vehicle.csv lacks columns {missing}", path=str(veh_path), field=missing[0]
            )
        vehicle = VehicleTelemetry(
            speed=SignalTrace(vtab[SPEED].to_numpy(np.float64), vrate, SPEED),
            steering_angle=SignalTrace(vtab[STEERING].to_numpy(np.float64), vrate, STEERING),
            throttle=SignalTrace(np.clip(vtab[THROTTLE].to_numpy(np.float64), 0.0, 1.0), vrate, THROTTLE),
            brake=SignalTrace(np.clip(vtab[BRAKE].to_numpy(np.float64), 0.0, 1.0), vrate, BRAKE),
        )

    phases = {k: (float(v[0]), float(v[1])) for k, v in _require(meta, "phases", meta_path).items()}
    events = [
        StressorEvent(str(e["name"]), float(e["onset_time_s"]))
        for e in meta.get("events", [])
    ]
    session = Session(
        subject_id=str(_require(meta, "subject_id", meta_path)),
        session_kind=str(_require(meta, "session_kind", meta_path)),
        traces=traces,
        phases=phases,
        events=events,
        vehicle=vehicle,
    )

    truth = None
    truth_path = src / TRUTH_FILE
    if truth_path.exists():
        raw = json.loads(truth_path.read_text())
        truth = GroundTruth(
            latent_stress=np.asarray(raw["latent_stress"], dtype=np.float64),
            beat_times_s=np.asarray(raw["beat_times_s"], dtype=np.float64),
            scr_times_s=np.asarray(raw["scr_times_s"], dtype=np.float64),
            scr_amplitudes_us=np.asarray(raw["scr_amplitudes_us"], dtype=np.float64),
            breath_times_s=np.asarray(raw["breath_times_s"], dtype=np.float64),
        )
    return session, truth


META_COLUMNS = ("subject", "session", "time_s", "label")


def write_feature_frame(path: str | Path, frame: FeatureFrame) -> Path:
    """Feature rows as tidy CSV: subject, session, time_s, label, features."""
    out = Path(path)
    table = pd.DataFrame(
        {
            "subject": np.full(len(frame), frame.subject_id, dtype=object),
            "session": np.full(len(frame), frame.session_kind, dtype=object),
            "time_s": frame.timestamps_s,
            "label": frame.labels,
        }
    )
    for j, name in enumerate(frame.columns):
        table[name] = frame.values[:, j]
    table.to_csv(out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return out


def read_feature_frame(path: str | Path) -> FeatureFrame:
    src = Path(path)
    table = pd.read_csv(src)
    if len(table) == 0:
        raise SessionParseError("feature CSV has no rows", path=str(src))
    missing = [c for c in META_COLUMNS if c not in table.columns]
    if missing:
        raise SessionParseError(
            f"feature CSV lacks columns {missing}", path=str(src), field=missing[0]
        )
    for key in ("subject", "session"):
        if table[key].nunique() > 1:
            raise SessionParseError(
                f"feature CSV mixes multiple {key} values", path=str(src), field=key
            )
    features = [c for c in table.columns if c not in META_COLUMNS]
    return FeatureFrame(
        timestamps_s=table["time_s"].to_numpy(np.float64),
        values=table[features].to_numpy(np.float64),
        columns=tuple(features),
        labels=table["label"].to_numpy(dtype=object),
        subject_id=str(table["subject"].iloc[0]),
        session_kind=str(table["session"].iloc[0]),
    )


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
