"""R-peak detection, heart rate, and respiratory sinus arrhythmia.

The detector follows the classic energy-envelope recipe: bandpass to the
QRS band, differentiate, square, integrate over a short moving window, then
pick envelope peaks against an adaptive threshold (half the running median
of the last eight accepted envelope heights) with a 250 ms refractory
period. Peak times are refined to the band-passed waveform maximum, which
is symmetric around the QRS center because filtering is zero-phase.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import InsufficientDataError, InvalidIntervalError, NoSignalError
from .respiration import BreathCycleSeries
from .signals import IirFilterSpec, SignalTrace, design_butterworth, zero_phase_filter

QRS_BAND_HZ = (5.0, 15.0)
INTEGRATION_WINDOW_S = 0.150
REFRACTORY_S = 0.250
THRESHOLD_FRACTION = 0.5
THRESHOLD_MEMORY = 8      # running median over this many accepted peaks
REFINE_RADIUS_S = 0.100
IBI_GATE_S = (0.3, 2.0)   # physiological inter-beat-interval range
MIN_DURATION_S = 5.0


@dataclass
class IbiSeries:
    """Inter-beat intervals; onset_times_s[i] is where intervals_s[i] starts."""

    onset_times_s: np.ndarray
    intervals_s: np.ndarray

    def __post_init__(self):
        self.onset_times_s = np.asarray(self.onset_times_s, dtype=np.float64)
        self.intervals_s = np.asarray(self.intervals_s, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.intervals_s)


@dataclass
class RPeakSeries:
    """Strictly increasing R-peak times (seconds, session clock)."""

    peak_times_s: np.ndarray

    def __post_init__(self):
        self.peak_times_s = np.asarray(self.peak_times_s, dtype=np.float64)
        if np.any(np.diff(self.peak_times_s) <= 0):
            raise InvalidIntervalError("peak times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.peak_times_s)

    def ibis(self) -> IbiSeries:
        """Consecutive differences gated to the physiological IBI range."""
        if len(self) < 2:
            return IbiSeries(np.array([]), np.array([]))
        diffs = np.diff(self.peak_times_s)
        keep = (diffs >= IBI_GATE_S[0]) & (diffs <= IBI_GATE_S[1])
        return IbiSeries(self.peak_times_s[:-1][keep], diffs[keep])


def detect_r_peaks(ecg: SignalTrace) -> RPeakSeries:
    """Detect R peaks on a preprocessed ECG trace.

    Args:
        ecg: high-passed ECG; any rate >= ~100 Hz works.

    Returns:
        RPeakSeries with refractory-respecting, refined peak times.

    Raises:
        InsufficientDataError: trace shorter than 5 s.
        NoSignalError: flat trace.
    """
    if ecg.duration_s < MIN_DURATION_S:
        raise InsufficientDataError(
            f"ECG duration {ecg.duration_s:.2f} s below minimum {MIN_DURATION_S} s"
        )
    if np.ptp(ecg.samples) < 1e-12:
        raise NoSignalError("ECG trace is flat")
    fs = ecg.sample_rate_hz

    band = design_butterworth(IirFilterSpec("bandpass", 2, QRS_BAND_HZ), fs)
    bp = zero_phase_filter(ecg, band).samples
    deriv = np.gradient(bp) * fs
    sq = deriv * deriv
    win = max(1, int(round(INTEGRATION_WINDOW_S * fs)))
    # 'same' keeps the envelope centered on the QRS rather than lagging it.
    integ = np.convolve(sq, np.full(win, 1.0 / win), mode="same")

    refractory = max(1, int(round(REFRACTORY_S * fs)))
    cand, _ = sps.find_peaks(integ, distance=refractory)
    if len(cand) == 0:
        raise NoSignalError("no QRS envelope peaks found")
    heights = integ[cand]

    # Seed the running median from the strongest early candidates so the
    # threshold starts near real QRS energy, then adapt as peaks accrue.
    early = heights[cand < 10.0 * fs]
    if len(early) == 0:
        early = heights
    seed = np.sort(early)[-THRESHOLD_MEMORY:]
    buffer: deque[float] = deque(seed.tolist(), maxlen=THRESHOLD_MEMORY)

    accepted = []
    for idx, h in zip(cand, heights):
        if h >= THRESHOLD_FRACTION * float(np.median(buffer)):
            accepted.append(idx)
            buffer.append(float(h))
    if not accepted:
        raise NoSignalError("no peaks passed the adaptive threshold")

    # Refine each envelope peak to the nearby band-passed maximum.
    radius = max(1, int(round(REFINE_RADIUS_S * fs)))
    refined = []
    for idx in accepted:
        lo = max(0, idx - radius)
        hi = min(len(bp), idx + radius + 1)
        refined.append(lo + int(np.argmax(bp[lo:hi])))

    # Deduplicate refined positions that collapsed inside the refractory
    # period, keeping the stronger waveform peak.
    refined = sorted(set(refined))
    kept: list[int] = []
    for idx in refined:
        if kept and idx - kept[-1] < refractory:
            if bp[idx] > bp[kept[-1]]:
                kept[-1] = idx
        else:
            kept.append(idx)

    times = ecg.start_time_s + np.asarray(kept, dtype=np.float64) / fs
    return RPeakSeries(peak_times_s=times)


def heart_rate(peaks: RPeakSeries, window: tuple[float, float]) -> float:
    """Beats per minute as peak count in [start, end) over window minutes.

    Returns NaN when fewer than two peaks fall in the window.
    """
    start, end = window
    if not (end > start):
        raise InvalidIntervalError(f"window [{start}, {end}) has non-positive duration")
    n = int(np.count_nonzero((peaks.peak_times_s >= start) & (peaks.peak_times_s < end)))
    if n < 2:
        return float("nan")
    return n / ((end - start) / 60.0)


def rsa_p2t(
    ibis: IbiSeries,
    cycles: BreathCycleSeries,
    window: tuple[float, float],
    min_ibis_per_cycle: int = 3,
) -> float:
    """Peak-to-trough respiratory sinus arrhythmia over a window.

    For every breath cycle lying wholly inside the window, takes the range
    (max - min) of the IBIs whose onsets fall in that cycle, then averages
    across cycles. Cycles with fewer than min_ibis_per_cycle IBIs are
    skipped; returns NaN when no cycle qualifies.
    """
    start, end = window
    if not (end > start):
        raise InvalidIntervalError(f"window [{start}, {end}) has non-positive duration")
    ranges = []
    for c0, c1 in cycles.cycle_bounds():
        if c0 < start or c1 > end:
            continue
        sel = (ibis.onset_times_s >= c0) & (ibis.onset_times_s < c1)
        if int(sel.sum()) < min_ibis_per_cycle:
            continue
        vals = ibis.intervals_s[sel]
        ranges.append(float(np.max(vals) - np.min(vals)))
    if not ranges:
        return float("nan")
    return float(np.mean(ranges))
