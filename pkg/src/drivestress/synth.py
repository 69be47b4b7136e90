"""Synthetic driving-session generator with known ground truth.

Produces whole recording sessions (raw 2 kHz biosignals, 50 Hz vehicle
telemetry, phase schedule, stressor events) from a latent per-sample
stress level, together with the event times that produced them. Every
downstream stage can therefore be scored against an exact answer key:
beat times for the R-peak detector, sudomotor impulse times for the
EDA decomposition, breath boundaries for the cycle detector, and the
latent stress series for the classifier experiments.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .eda import TAU_FAST_S, TAU_SLOW_S
from .errors import ConfigValidationError
from .features import SESSION_KINDS, Session, StressorEvent, VehicleTelemetry
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
    SignalTrace,
)

EMIT_RATE_HZ = 2000.0    # biosignal output rate; exercises the decimation path
VEHICLE_RATE_HZ = 50.0   # simulator telemetry bus rate
MODEL_RATE_HZ = 50.0     # internal rate for latent-stress and envelope modeling

# Stressor scripts per session kind, in scenario order.
STRESSOR_SCHEDULE: dict[str, tuple[str, ...]] = {
    "Impatience": ("Timer, Pace Car", "Delivery Van", "Construction"),
    "Surprise": ("Car Crash", "Barrel Explosion"),
    "Irritation": ("Dense Fog", "Slow Parallel Cars", "Sudden Braking"),
}

# Kernel constants for the mismatched-generation robustness mode.
MISMATCH_TAU_FAST_S = 1.0
MISMATCH_TAU_SLOW_S = 3.0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for cohort generation.

    Effect-size fields are expressed per unit latent stress and are all
    multiplied by effect_scale, so effect_scale=0 yields a null world in
    which recordings carry no stress information while phase labels stay
    intact.
    """

    n_subjects: int = 31
    session_kinds: tuple[str, ...] = SESSION_KINDS

    # phase durations, seconds
    baseline_video_s: float = 60.0
    practice_s: float = 30.0
    free_driving_s: float = 300.0
    stressor_driving_s: float = 240.0
    recovery_s: float = 120.0

    # latent stress dynamics
    stress_base: float = 0.05
    event_transient: float = 0.45      # bump height per scheduled event
    event_cumulative: float = 0.12     # persistent step per scheduled event
    transient_rise_s: float = 15.0
    transient_decay_s: float = 30.0
    recovery_decay_s: float = 45.0

    # cardiac
    hr_base_bpm: float = 72.0
    hr_delta_bpm: float = 14.0
    rsa_amplitude_s: float = 0.05
    rsa_damping: float = 0.6           # fraction of RSA lost at full stress

    # electrodermal
    scl_base_us: float = 4.0
    scl_slope_delta_us_per_s: float = 0.008
    scr_base_rate_per_min: float = 3.0
    scr_rate_delta_per_min: float = 8.0
    scr_amplitude_range_us: tuple[float, float] = (0.25, 0.9)
    kernel_mismatch: bool = False      # generate SCRs with a kernel the solver does not assume

    # respiration
    rsp_base_period_s: float = 4.2
    rsp_period_delta_s: float = -1.2
    rsp_depth: float = 1.0

    # skin temperature
    skt_base_c: float = 33.5
    skt_ambient_amp_c: float = 0.08    # slow thermoregulatory wander, random phase/period
    skt_slope_delta_c_per_s: float = -0.004

    # vehicle couplings
    speed_base_kmh: float = 65.0
    speed_beta_kmh: float = -0.372     # km/h per unit latent stress
    speed_wander_kmh: float = 0.35     # slow drift amplitude around the setpoint
    steering_base_std_deg: float = 2.0
    steering_beta_deg: float = 3.0
    throttle_base: float = 0.35
    throttle_beta: float = 0.12
    brake_base_rate_per_min: float = 1.5
    brake_beta_rate_per_min: float = 4.0

    # noise levels
    ecg_noise: float = 0.03
    eda_noise_us: float = 0.01
    rsp_noise: float = 0.05
    skt_noise_c: float = 0.02
    speed_noise_kmh: float = 1.2
    rr_jitter_s: float = 0.004

    subject_sigma: float = 1.0         # scales per-subject baseline offsets
    effect_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        bad: list[str] = []
        if self.n_subjects < 1:
            bad.append("n_subjects")
        if not self.session_kinds or any(k not in SESSION_KINDS for k in self.session_kinds):
            bad.append("session_kinds")
        for name in (
            "baseline_video_s",
            "practice_s",
            "free_driving_s",
            "stressor_driving_s",
            "recovery_s",
            "transient_rise_s",
            "transient_decay_s",
            "recovery_decay_s",
        ):
            if not (getattr(self, name) > 0):
                bad.append(name)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not np.isfinite(v):
                bad.append(f.name)
        lo, hi = self.scr_amplitude_range_us
        if not (0 < lo <= hi):
            bad.append("scr_amplitude_range_us")
        for name in (
            "ecg_noise",
            "eda_noise_us",
            "rsp_noise",
            "skt_noise_c",
            "speed_noise_kmh",
            "rr_jitter_s",
            "subject_sigma",
        ):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.effect_scale < 0:
            bad.append("effect_scale")
        if not (0 <= self.stress_base < 1):
            bad.append("stress_base")
        if bad:
            raise ConfigValidationError("invalid generator config", fields=sorted(set(bad)))

    @property
    def duration_s(self) -> float:
        return (
            self.baseline_video_s
            + self.practice_s
            + self.free_driving_s
            + self.stressor_driving_s
            + self.recovery_s
        )

    def phases(self) -> dict[str, tuple[float, float]]:
        edges = np.cumsum(
            [
                0.0,
                self.baseline_video_s,
                self.practice_s,
                self.free_driving_s,
                self.stressor_driving_s,
                self.recovery_s,
            ]
        )
        names = ("baseline_video", "practice", "free_driving", "stressor_driving", "recovery")
        return {n: (float(edges[i]), float(edges[i + 1])) for i, n in enumerate(names)}

    def events_for(self, kind: str) -> list[StressorEvent]:
        """Scheduled stressors, spread evenly through the stressor phase."""
        names = STRESSOR_SCHEDULE[kind]
        start, end = self.phases()["stressor_driving"]
        span = end - start
        return [
            StressorEvent(name, start + (k + 0.5) * span / len(names))
            for k, name in enumerate(names)
        ]


@dataclass
class GroundTruth:
    """Answer key for one generated session.

    latent_stress holds one value per whole second (mean of the dense
    latent series over [k, k+1)).
    """

    latent_stress: np.ndarray
    beat_times_s: np.ndarray
    scr_times_s: np.ndarray
    scr_amplitudes_us: np.ndarray
    breath_times_s: np.ndarray

    def phase_mean(self, phases: dict[str, tuple[float, float]], name: str) -> float:
        s, e = phases[name]
        return float(np.mean(self.latent_stress[int(s) : int(e)]))


def _stream_rng(seed: int, subject_index: int, kind: str, stream: str) -> np.random.Generator:
    # platform-independent derivation: one generator per named stream
    digest = hashlib.sha256(f"{seed}|{subject_index}|{kind}|{stream}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "big"))


def _latent_stress(cfg: SynthConfig, events: list[StressorEvent], t: np.ndarray) -> np.ndarray:
    s = np.full(t.size, cfg.stress_base)
    for ev in events:
        rel = t - ev.onset_time_s
        ramp = np.clip(rel / cfg.transient_rise_s, 0.0, 1.0)
        decay = np.exp(-np.maximum(rel - cfg.transient_rise_s, 0.0) / cfg.transient_decay_s)
        active = rel >= 0.0
        s += np.where(active, cfg.event_transient * ramp * decay, 0.0)
        s += np.where(active, cfg.event_cumulative * ramp, 0.0)
    r0, _ = cfg.phases()["recovery"]
    rec = t >= r0
    s[rec] = cfg.stress_base + (s[rec] - cfg.stress_base) * np.exp(-(t[rec] - r0) / cfg.recovery_decay_s)
    return np.clip(s, 0.0, 1.0)


def _slow_noise(rng: np.random.Generator, t: np.ndarray, knot_s: float, amp: float) -> np.ndarray:
    """Stationary wander: independent knots every knot_s, linearly bridged.

    Correlation time stays well under a minute, so a baseline window sees
    the process's full range and windowed z-scores carry no elapsed-time
    information. A slow trend here would hand any classifier a clock.
    """
    n_knots = int(t[-1] / knot_s) + 2
    knots = amp * rng.standard_normal(n_knots)
    return np.interp(t, np.arange(n_knots) * knot_s, knots)


def _poisson_times(
    rng: np.random.Generator, rate_per_s: np.ndarray, dt: float, dead_time_s: float
) -> np.ndarray:
    """Inhomogeneous Poisson draws on a dense grid with a refractory gap."""
    hits = np.flatnonzero(rng.random(rate_per_s.size) < rate_per_s * dt)
    kept: list[int] = []
    last = -np.inf
    for i in hits:
        if i * dt - last >= dead_time_s:
            kept.append(i)
            last = i * dt
    return np.asarray(kept, dtype=np.int64)


def _upsample(x50: np.ndarray, t50: np.ndarray, t_out: np.ndarray) -> np.ndarray:
    return np.interp(t_out, t50, x50)


def _beat_times(
    cfg: SynthConfig,
    rng: np.random.Generator,
    s50: np.ndarray,
    rsp_phase50: np.ndarray,
    hr_base: float,
    duration: float,
    dt: float,
) -> np.ndarray:
    beats = []
    scale = cfg.effect_scale
    t = float(rng.uniform(0.2, 0.8))
    n = s50.size
    while t < duration - 0.1:
        beats.append(t)
        i = min(int(t / dt), n - 1)
        hr = max(hr_base + scale * cfg.hr_delta_bpm * s50[i], 30.0)
        rr = 60.0 / hr
        rr += cfg.rsa_amplitude_s * (1.0 - scale * cfg.rsa_damping * s50[i]) * np.sin(rsp_phase50[i])
        rr += rng.normal(0.0, cfg.rr_jitter_s)
        t += float(min(max(rr, 0.35), 1.9))
    return np.asarray(beats)


def _bump_train(times_s: np.ndarray, n: int, rate_hz: float, sigma_s: float) -> np.ndarray:
    out = np.zeros(n)
    half = int(round(5 * sigma_s * rate_hz))
    off = np.arange(-half, half + 1)
    bump = np.exp(-0.5 * (off / (sigma_s * rate_hz)) ** 2)
    centers = np.round(times_s * rate_hz).astype(np.int64)
    for c in centers:
        lo = max(c - half, 0)
        hi = min(c + half + 1, n)
        if hi <= lo:
            continue
        out[lo:hi] += bump[lo - (c - half) : bump.size - ((c + half + 1) - hi)]
    return out


def generate_session(config: SynthConfig, subject_index: int) -> tuple[Session, GroundTruth]:
    """Generate one raw session plus its answer key.

    Biosignals come out at 2 kHz, telemetry at 50 Hz; run the preprocessing
    step before feature extraction, exactly as for recorded data.
    """
    config.validate()
    if not (0 <= subject_index < config.n_subjects):
        raise ConfigValidationError(
            f"subject_index {subject_index} outside [0, {config.n_subjects})",
            fields=["subject_index"],
        )
    kind = config.session_kinds[subject_index % len(config.session_kinds)]
    subject_id = f"synth{subject_index:02d}"
    phases = config.phases()
    events = config.events_for(kind)
    duration = config.duration_s
    scale = config.effect_scale

    dt = 1.0 / MODEL_RATE_HZ
    n50 = int(round(duration * MODEL_RATE_HZ))
    t50 = np.arange(n50) * dt
    n2k = int(round(duration * EMIT_RATE_HZ))
    t2k = np.arange(n2k) / EMIT_RATE_HZ

    s50 = _latent_stress(config, events, t50)

    def rng(stream: str) -> np.random.Generator:
        return _stream_rng(config.seed, subject_index, kind, stream)

    # per-subject baseline offsets
    z = rng("subject").standard_normal(6) * config.subject_sigma
    hr_base = config.hr_base_bpm + 4.0 * z[0]
    scl_base = max(config.scl_base_us + 0.7 * z[1], 0.5)
    skt_base = config.skt_base_c + 0.4 * z[2]
    rsp_period_base = max(config.rsp_base_period_s + 0.35 * z[3], 2.0)
    speed_base = config.speed_base_kmh + 4.0 * z[4]
    throttle_base = float(np.clip(config.throttle_base + 0.05 * z[5], 0.1, 0.7))

    # respiration: integrate phase so the period tracks stress
    period50 = np.clip(rsp_period_base + scale * config.rsp_period_delta_s * s50, 1.6, 15.0)
    phase_rng = rng("rsp")
    phase0 = float(phase_rng.uniform(0.0, 2 * np.pi))
    rsp_phase50 = phase0 + 2 * np.pi * np.concatenate(([0.0], np.cumsum(dt / period50[:-1])))
    phase2k = _upsample(rsp_phase50, t50, t2k)
    # breath-to-breath amplitude variability, shared by both belts
    envelope2k = 1.0 + 0.05 * _upsample(_slow_noise(phase_rng, t50, 4.0, 1.0), t50, t2k)
    thoracic = config.rsp_depth * envelope2k * np.sin(phase2k) + config.rsp_noise * phase_rng.standard_normal(n2k)
    abdominal = 0.85 * config.rsp_depth * envelope2k * np.sin(phase2k) + config.rsp_noise * rng(
        "rsp_abd"
    ).standard_normal(n2k)
    # breath boundaries: sine troughs, i.e. phase = 3pi/2 (mod 2pi)
    k_lo = int(np.ceil((rsp_phase50[0] - 1.5 * np.pi) / (2 * np.pi)))
    k_hi = int(np.floor((rsp_phase50[-1] - 1.5 * np.pi) / (2 * np.pi)))
    targets = 1.5 * np.pi + 2 * np.pi * np.arange(k_lo, k_hi + 1)
    breath_times = np.interp(targets, rsp_phase50, t50)
    breath_times = breath_times[(breath_times > 0.5) & (breath_times < duration - 0.5)]

    # cardiac
    ecg_rng = rng("ecg")
    beat_times = _beat_times(config, ecg_rng, s50, rsp_phase50, hr_base, duration, dt)
    ecg = _bump_train(beat_times, n2k, EMIT_RATE_HZ, sigma_s=0.012)
    ecg += config.ecg_noise * ecg_rng.standard_normal(n2k)

    # electrodermal: tonic drift plus sparse phasic pulses
    eda_rng = rng("eda")
    scr_rate = (config.scr_base_rate_per_min + scale * config.scr_rate_delta_per_min * s50) / 60.0
    scr_idx = _poisson_times(eda_rng, scr_rate, dt, dead_time_s=2.0)
    scr_times = scr_idx * dt
    lo, hi = config.scr_amplitude_range_us
    scr_amps = eda_rng.uniform(lo, hi, scr_idx.size)
    driver50 = np.zeros(n50)
    driver50[scr_idx] = scr_amps
    if config.kernel_mismatch:
        tau_f, tau_s = MISMATCH_TAU_FAST_S, MISMATCH_TAU_SLOW_S
    else:
        tau_f, tau_s = TAU_FAST_S, TAU_SLOW_S
    tk = np.arange(0.0, 10.0 * tau_s, dt)
    kernel = np.exp(-tk / tau_s) - np.exp(-tk / tau_f)
    kernel /= kernel.max()
    phasic50 = np.convolve(driver50, kernel)[:n50]
    cum_stress50 = np.cumsum(s50) * dt
    tonic50 = (
        scl_base
        + _slow_noise(eda_rng, t50, 20.0, 0.015)
        + scale * config.scl_slope_delta_us_per_s * cum_stress50
    )
    eda = _upsample(tonic50 + phasic50, t50, t2k) + config.eda_noise_us * eda_rng.standard_normal(n2k)

    # skin temperature: ambient wander, stress pushes the slope negative
    skt_rng = rng("skt")
    skt50 = (
        skt_base
        + _slow_noise(skt_rng, t50, 2.5, config.skt_ambient_amp_c)
        + scale * config.skt_slope_delta_c_per_s * cum_stress50
    )
    skt = _upsample(skt50, t50, t2k) + config.skt_noise_c * skt_rng.standard_normal(n2k)

    # vehicle telemetry at bus rate
    nv = int(round(duration * VEHICLE_RATE_HZ))
    tv = np.arange(nv) / VEHICLE_RATE_HZ
    sv = np.interp(tv, t50, s50)
    veh_rng = rng("vehicle")
    n_sec = int(np.ceil(duration))
    per_second = np.repeat(veh_rng.normal(0.0, config.speed_noise_kmh, n_sec), int(VEHICLE_RATE_HZ))[:nv]
    speed = (
        speed_base
        + scale * config.speed_beta_kmh * sv
        + _slow_noise(veh_rng, tv, 30.0, config.speed_wander_kmh)
        + per_second
    )
    steering_std = config.steering_base_std_deg + scale * config.steering_beta_deg * sv
    steering = steering_std * veh_rng.standard_normal(nv)

    brake_rate = (config.brake_base_rate_per_min + scale * config.brake_beta_rate_per_min * sv) / 60.0
    brake_idx = _poisson_times(veh_rng, brake_rate, 1.0 / VEHICLE_RATE_HZ, dead_time_s=3.0)
    brake = np.zeros(nv)
    for i in brake_idx:
        width = int(round(float(veh_rng.uniform(0.8, 1.6)) * VEHICLE_RATE_HZ))
        mag = float(veh_rng.uniform(0.3, 0.7))
        brake[i : min(i + width, nv)] = mag
    brake = np.clip(brake + 0.01 * veh_rng.standard_normal(nv) * (brake > 0), 0.0, 1.0)

    throttle = (
        throttle_base
        + 0.18 * np.sin(2 * np.pi * tv / 11.0 + float(veh_rng.uniform(0, 2 * np.pi)))
        + 0.04 * veh_rng.standard_normal(nv)
        + scale * config.throttle_beta * sv * veh_rng.standard_normal(nv)
    )
    throttle = np.clip(throttle, 0.0, 1.0)
    throttle[brake > 0.02] = 0.0

    vehicle = VehicleTelemetry(
        speed=SignalTrace(speed, VEHICLE_RATE_HZ, SPEED),
        steering_angle=SignalTrace(steering, VEHICLE_RATE_HZ, STEERING),
        throttle=SignalTrace(throttle, VEHICLE_RATE_HZ, THROTTLE),
        brake=SignalTrace(brake, VEHICLE_RATE_HZ, BRAKE),
    )
    session = Session(
        subject_id=subject_id,
        session_kind=kind,
        traces={
            ECG: SignalTrace(ecg, EMIT_RATE_HZ, ECG),
            EDA: SignalTrace(eda, EMIT_RATE_HZ, EDA),
            RSP_THORACIC: SignalTrace(thoracic, EMIT_RATE_HZ, RSP_THORACIC),
            RSP_ABDOMINAL: SignalTrace(abdominal, EMIT_RATE_HZ, RSP_ABDOMINAL),
            SKT: SignalTrace(skt, EMIT_RATE_HZ, SKT),
        },
        phases=phases,
        events=events,
        vehicle=vehicle,
    )

    n_sec_floor = int(np.floor(duration))
    usable = n_sec_floor * int(MODEL_RATE_HZ)
    latent_1hz = s50[:usable].reshape(n_sec_floor, int(MODEL_RATE_HZ)).mean(axis=1)
    truth = GroundTruth(
        latent_stress=latent_1hz,
        beat_times_s=beat_times,
        scr_times_s=scr_times,
        scr_amplitudes_us=scr_amps,
        breath_times_s=breath_times,
    )
    return session, truth


def generate_cohort(config: SynthConfig) -> tuple[list[Session], list[GroundTruth]]:
    """Generate all subjects; kinds rotate through config.session_kinds."""
    config.validate()
    sessions: list[Session] = []
    truths: list[GroundTruth] = []
    for i in range(config.n_subjects):
        sess, truth = generate_session(config, i)
        sessions.append(sess)
        truths.append(truth)
    return sessions, truths
