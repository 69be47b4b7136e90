"""Core signal containers and filtering primitives.

Everything downstream (cardiac, electrodermal, respiration, feature
extraction) works on SignalTrace objects and the zero-phase IIR filters
defined here. Filters are designed as second-order-section cascades and
applied forward-backward, so they add no phase distortion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import (
    FilterSpecError,
    InsufficientDataError,
    InvalidIntervalError,
    ShapeMismatchError,
    SignalTooShortError,
    UnsupportedRatioError,
)

# Canonical channel labels. Physiological channels first, vehicle channels after.
ECG = "ECG"
EDA = "EDA"
RSP_THORACIC = "RSP_THORACIC"
RSP_ABDOMINAL = "RSP_ABDOMINAL"
RSP_FUSED = "RSP_FUSED"
SKT = "SKT"
SPEED = "SPEED"
STEERING = "STEERING"
THROTTLE = "THROTTLE"
BRAKE = "BRAKE"

CHANNEL_LABELS = frozenset(
    {ECG, EDA, RSP_THORACIC, RSP_ABDOMINAL, RSP_FUSED, SKT, SPEED, STEERING, THROTTLE, BRAKE}
)

# Anti-alias cutoff as a fraction of the target rate when decimating.
ANTIALIAS_FRACTION = 0.45
ANTIALIAS_ORDER = 8


@dataclass
class SignalTrace:
    """A uniformly sampled channel.

    Attributes:
        samples: 1-D float array; must be finite everywhere.
        sample_rate_hz: sampling rate, > 0.
        label: one of CHANNEL_LABELS.
        start_time_s: session-clock time of samples[0].
        valid: optional per-sample validity mask (no automatic rejection
            is performed anywhere; the mask just travels with the trace).
    """

    samples: np.ndarray
    sample_rate_hz: float
    label: str
    start_time_s: float = 0.0
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeMismatchError(f"trace samples must be 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ShapeMismatchError(f"trace '{self.label}' contains non-finite samples")
        if not (self.sample_rate_hz > 0):
            raise FilterSpecError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.label not in CHANNEL_LABELS:
            raise ShapeMismatchError(f"unknown channel label '{self.label}'")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.samples.shape:
                raise ShapeMismatchError("validity mask length does not match samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    @property
    def end_time_s(self) -> float:
        return self.start_time_s + self.duration_s

    def times(self) -> np.ndarray:
        return self.start_time_s + np.arange(len(self)) / self.sample_rate_hz

    def segment(self, start_s: float, end_s: float) -> np.ndarray:
        """Samples with time in [start_s, end_s). Bounds are session-clock times."""
        if not (end_s > start_s):
            raise InvalidIntervalError(f"interval [{start_s}, {end_s}) has non-positive duration")
        i0 = int(np.ceil((start_s - self.start_time_s) * self.sample_rate_hz - 1e-9))
        i1 = int(np.ceil((end_s - self.start_time_s) * self.sample_rate_hz - 1e-9))
        i0 = max(i0, 0)
        i1 = min(max(i1, i0), len(self))
        return self.samples[i0:i1]

    def with_samples(self, samples: np.ndarray, sample_rate_hz: float | None = None,
                     label: str | None = None) -> "SignalTrace":
        return SignalTrace(
            samples=samples,
            sample_rate_hz=self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
            label=self.label if label is None else label,
            start_time_s=self.start_time_s,
        )


@dataclass(frozen=True)
class IirFilterSpec:
    """Butterworth filter specification.

    kind is one of "lowpass", "highpass", "bandpass"; cutoff_hz is a single
    frequency for lowpass/highpass and a (low, high) pair for bandpass.
    """

    kind: str
    order: int
    cutoff_hz: float | tuple[float, float]

    def validate(self, sample_rate_hz: float) -> None:
        nyquist = sample_rate_hz / 2.0
        if self.kind not in ("lowpass", "highpass", "bandpass"):
            raise FilterSpecError(f"unknown filter kind '{self.kind}'")
        if self.order < 1:
            raise FilterSpecError(f"filter order must be >= 1, got {self.order}")
        if self.kind == "bandpass":
            try:
                low, high = self.cutoff_hz  # type: ignore[misc]
            except TypeError:
                raise FilterSpecError("bandpass cutoff must be a (low, high) pair") from None
            if not (0 < low < high):
                raise FilterSpecError(f"bandpass cutoffs must satisfy 0 < low < high, got {self.cutoff_hz}")
            if high >= nyquist:
                raise FilterSpecError(f"cutoff {high} Hz at or above Nyquist ({nyquist} Hz)")
        else:
            cut = float(self.cutoff_hz)  # type: ignore[arg-type]
            if not (0 < cut):
                raise FilterSpecError(f"cutoff must be positive, got {cut}")
            if cut >= nyquist:
                raise FilterSpecError(f"cutoff {cut} Hz at or above Nyquist ({nyquist} Hz)")


@dataclass
class BiquadCascade:
    """IIR filter as a cascade of second-order sections.

    sections has shape (n_sections, 6) in scipy SOS layout; order is the
    analog prototype order and controls the reflection padding used by
    zero_phase_filter.
    """

    sections: np.ndarray
    order: int
    description: str = ""

    def __post_init__(self):
        self.sections = np.atleast_2d(np.asarray(self.sections, dtype=np.float64))
        if self.sections.shape[1] != 6:
            raise FilterSpecError(f"SOS sections must have 6 columns, got {self.sections.shape}")

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def is_stable(self) -> bool:
        """True when every pole of every section lies strictly inside the unit circle."""
        for sec in self.sections:
            poles = np.roots(sec[3:6])
            if poles.size and np.max(np.abs(poles)) >= 1.0:
                return False
        return True

    def frequency_response(self, freqs_hz: np.ndarray, sample_rate_hz: float) -> np.ndarray:
        """Complex response at the given frequencies (Hz)."""
        _, h = sps.sosfreqz(self.sections, worN=np.asarray(freqs_hz, dtype=float), fs=sample_rate_hz)
        return h

    def gain_db(self, freqs_hz: np.ndarray, sample_rate_hz: float) -> np.ndarray:
        h = self.frequency_response(freqs_hz, sample_rate_hz)
        return 20.0 * np.log10(np.maximum(np.abs(h), 1e-300))


def design_butterworth(spec: IirFilterSpec, sample_rate_hz: float) -> BiquadCascade:
    """Design a Butterworth filter as a biquad cascade.

    Args:
        spec: filter kind, order, and cutoff(s).
        sample_rate_hz: rate of the signal the filter will run at.

    Returns:
        A stable BiquadCascade; raises FilterSpecError on an invalid spec.
    """
    spec.validate(sample_rate_hz)
    sos = sps.butter(spec.order, spec.cutoff_hz, btype=spec.kind, fs=sample_rate_hz, output="sos")
    cascade = BiquadCascade(
        sections=sos,
        order=spec.order,
        description=f"butter-{spec.kind}-{spec.order} @ {spec.cutoff_hz} Hz",
    )
    if not cascade.is_stable():
        raise FilterSpecError(f"designed filter is unstable: {cascade.description}")
    return cascade


def design_notch(freq_hz: float, q: float, sample_rate_hz: float) -> BiquadCascade:
    """Single-biquad notch at freq_hz with quality factor q."""
    if not (0 < freq_hz < sample_rate_hz / 2.0):
        raise FilterSpecError(f"notch frequency {freq_hz} Hz outside (0, Nyquist)")
    b, a = sps.iirnotch(freq_hz, q, fs=sample_rate_hz)
    sec = np.hstack([b, a])[None, :]
    return BiquadCascade(sections=sec, order=2, description=f"notch @ {freq_hz} Hz (Q={q})")


def _padlen(cascade: BiquadCascade) -> int:
    # Reflection padding: 3 x max(order, 12) samples on each side.
    return 3 * max(cascade.order, 12)


def zero_phase_filter(trace: SignalTrace, cascade: BiquadCascade) -> SignalTrace:
    """Apply the cascade forward and backward (zero net phase).

    Edge transients are controlled by odd-reflection padding of length
    3 x max(order, 12) samples. The trace must be longer than the pad.
    """
    pad = _padlen(cascade)
    if len(trace) <= pad:
        raise SignalTooShortError(
            f"trace '{trace.label}' has {len(trace)} samples; needs more than {pad} for settling"
        )
    out = sps.sosfiltfilt(cascade.sections, trace.samples, padtype="odd", padlen=pad)
    return trace.with_samples(out)


def remove_powerline(trace: SignalTrace, mains_hz: float = 60.0, q: float = 30.0) -> SignalTrace:
    """Zero-phase notch at the mains frequency (default 60 Hz, Q=30)."""
    cascade = design_notch(mains_hz, q, trace.sample_rate_hz)
    return zero_phase_filter(trace, cascade)


def downsample(trace: SignalTrace, target_hz: float) -> SignalTrace:
    """Decimate to target_hz after an anti-alias lowpass.

    The rate ratio must be a positive integer. An 8th-order Butterworth
    lowpass at 0.45 x target_hz runs (zero-phase) before every-k-th-sample
    slicing, so output length is ceil(n / ratio).
    """
    ratio_f = trace.sample_rate_hz / target_hz
    ratio = int(round(ratio_f))
    if ratio < 1 or abs(ratio_f - ratio) > 1e-9:
        raise UnsupportedRatioError(
            f"rate ratio {trace.sample_rate_hz}/{target_hz} = {ratio_f} is not a positive integer"
        )
    if ratio == 1:
        return trace.with_samples(trace.samples.copy())
    aa = design_butterworth(
        IirFilterSpec(kind="lowpass", order=ANTIALIAS_ORDER, cutoff_hz=ANTIALIAS_FRACTION * target_hz),
        trace.sample_rate_hz,
    )
    smooth = zero_phase_filter(trace, aa)
    return SignalTrace(
        samples=smooth.samples[::ratio],
        sample_rate_hz=target_hz,
        label=trace.label,
        start_time_s=trace.start_time_s,
    )


def linear_slope(values: np.ndarray, dt_s: float) -> float:
    """Ordinary-least-squares slope of values against time.

    Non-finite entries are ignored (their time slots are kept, so gaps do
    not compress the time axis). Needs at least two finite values.
    """
    y = np.asarray(values, dtype=np.float64)
    if dt_s <= 0:
        raise InvalidIntervalError(f"dt must be positive, got {dt_s}")
    mask = np.isfinite(y)
    if mask.sum() < 2:
        raise InsufficientDataError(f"linear_slope needs >= 2 finite values, got {int(mask.sum())}")
    t = np.arange(len(y), dtype=np.float64)[mask] * dt_s
    yv = y[mask]
    t0 = t - t.mean()
    denom = np.dot(t0, t0)
    if denom <= 0:
        raise InsufficientDataError("time axis has zero variance")
    return float(np.dot(t0, yv - yv.mean()) / denom)


def fuse_respiration(thoracic: SignalTrace, abdominal: SignalTrace) -> SignalTrace:
    """Point-wise average of the two respiration belts, labeled RSP_FUSED."""
    if len(thoracic) != len(abdominal):
        raise ShapeMismatchError(
            f"belt lengths differ: {len(thoracic)} vs {len(abdominal)}"
        )
    if abs(thoracic.sample_rate_hz - abdominal.sample_rate_hz) > 1e-9:
        raise ShapeMismatchError(
            f"belt rates differ: {thoracic.sample_rate_hz} vs {abdominal.sample_rate_hz}"
        )
    fused = 0.5 * (thoracic.samples + abdominal.samples)
    return SignalTrace(
        samples=fused,
        sample_rate_hz=thoracic.sample_rate_hz,
        label=RSP_FUSED,
        start_time_s=thoracic.start_time_s,
    )
