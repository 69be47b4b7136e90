"""Breath-cycle detection and respiration features.

A cycle runs trough to trough on the fused respiration belt: the trough is
the inhale onset, the peak between two troughs gives the cycle's depth.
Detection works on a 0.5 s moving-average smoothed copy of the signal; the
extrema come from sign changes of its derivative with alternation enforced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidIntervalError, NoSignalError
from .signals import SignalTrace

SMOOTH_WINDOW_S = 0.5
MIN_CYCLE_S = 1.0   # gating: cycles shorter than this are merged away
MAX_CYCLE_S = 20.0  # gating: cycles longer than this are excluded from features
SWING_FRACTION = 0.10  # extrema pairs swinging less than this fraction of the excursion are noise


@dataclass
class BreathCycleSeries:
    """Detected breath cycles.

    onset_times_s holds m trough times (ascending); cycle i spans
    [onset[i], onset[i+1]) so there are m-1 complete cycles, with
    peak_times_s[i] inside cycle i and depths[i] = peak - preceding trough.
    """

    onset_times_s: np.ndarray
    peak_times_s: np.ndarray
    depths: np.ndarray

    def __post_init__(self):
        self.onset_times_s = np.asarray(self.onset_times_s, dtype=np.float64)
        self.peak_times_s = np.asarray(self.peak_times_s, dtype=np.float64)
        self.depths = np.asarray(self.depths, dtype=np.float64)

    @property
    def n_cycles(self) -> int:
        return len(self.peak_times_s)

    def durations(self) -> np.ndarray:
        return np.diff(self.onset_times_s)

    def cycle_bounds(self) -> np.ndarray:
        """(n_cycles, 2) array of [onset, next_onset) pairs."""
        return np.column_stack([self.onset_times_s[:-1], self.onset_times_s[1:]])


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    # Reflect-pad so the edges are averaged over real data, not zeros.
    width = max(1, width)
    half = width // 2
    padded = np.pad(x, (half, width - 1 - half), mode="reflect")
    kernel = np.full(width, 1.0 / width)
    return np.convolve(padded, kernel, mode="valid")


def _alternating_extrema(sm: np.ndarray):
    """Indices of alternating (trough, peak, trough, ...) extrema of sm."""
    d = np.diff(sm)
    s = np.sign(d)
    # Carry the last nonzero sign across plateaus.
    for i in range(1, len(s)):
        if s[i] == 0:
            s[i] = s[i - 1]
    flips = np.nonzero(np.diff(s))[0]
    extrema = []  # (index, kind) with kind +1 peak, -1 trough
    for f in flips:
        kind = 1 if s[f] > 0 else -1
        extrema.append((f + 1, kind))
    # Collapse runs of the same kind, keeping the more extreme point.
    cleaned: list[tuple[int, int]] = []
    for idx, kind in extrema:
        if cleaned and cleaned[-1][1] == kind:
            prev_idx = cleaned[-1][0]
            better = idx if (kind == 1 and sm[idx] > sm[prev_idx]) or (
                kind == -1 and sm[idx] < sm[prev_idx]
            ) else prev_idx
            cleaned[-1] = (better, kind)
        else:
            cleaned.append((idx, kind))
    return cleaned


def detect_breath_cycles(rsp: SignalTrace) -> BreathCycleSeries:
    """Detect trough-to-trough breath cycles on a fused respiration trace.

    Args:
        rsp: preprocessed (band-limited) respiration signal.

    Returns:
        BreathCycleSeries with onsets, in-cycle peaks, and depths. Depths are
        measured on the raw samples at the located extrema.

    Raises:
        NoSignalError: if the trace is flat or yields no oscillation.
    """
    x = rsp.samples
    if len(x) < 4 or np.ptp(x) < 1e-12:
        raise NoSignalError(f"respiration trace '{rsp.label}' is flat or empty")
    fs = rsp.sample_rate_hz
    sm = _moving_average(x, int(round(SMOOTH_WINDOW_S * fs)))
    extrema = _alternating_extrema(sm)
    if len(extrema) < 3:
        raise NoSignalError("no breathing oscillation found")

    # Drop adjacent extrema pairs whose swing is negligible against the
    # overall excursion; they are noise riding on a monotone stretch.
    thresh = SWING_FRACTION * float(np.percentile(sm, 95) - np.percentile(sm, 5))
    changed = True
    while changed and len(extrema) >= 2:
        changed = False
        best_j, best_d = -1, thresh
        for j in range(len(extrema) - 1):
            d = abs(sm[extrema[j + 1][0]] - sm[extrema[j][0]])
            if d < best_d:
                best_j, best_d = j, d
        if best_j >= 0:
            del extrema[best_j:best_j + 2]
            changed = True
    if len(extrema) < 3:
        raise NoSignalError("no breathing oscillation found")

    # Start at a trough; end patterns are handled by pairing below.
    if extrema[0][1] == 1:
        extrema = extrema[1:]

    # Merge troughs closer than the minimum cycle duration: drop the
    # shallower trough and whichever peak between them is lower.
    min_gap = MIN_CYCLE_S * fs

    def merge_pass(ext):
        troughs = [(i, k) for i, k in ext if k == -1]
        for a in range(len(troughs) - 1):
            i0, i1 = troughs[a][0], troughs[a + 1][0]
            if i1 - i0 < min_gap:
                drop = i0 if sm[i0] > sm[i1] else i1
                pos = ext.index((drop, -1))
                new = [e for e in ext if e != (drop, -1)]
                # Removing a trough leaves two adjacent peaks; keep the higher.
                out = []
                for idx, kind in new:
                    if out and out[-1][1] == kind:
                        prev = out[-1][0]
                        keep = idx if (kind == 1 and sm[idx] > sm[prev]) or (
                            kind == -1 and sm[idx] < sm[prev]
                        ) else prev
                        out[-1] = (keep, kind)
                    else:
                        out.append((idx, kind))
                return out, True
        return ext, False

    changed = True
    while changed:
        extrema, changed = merge_pass(extrema)

    trough_idx = [i for i, k in extrema if k == -1]
    if len(trough_idx) < 2:
        raise NoSignalError("fewer than two breath onsets found")

    onsets = rsp.start_time_s + np.asarray(trough_idx) / fs
    peak_times = []
    depths = []
    for a in range(len(trough_idx) - 1):
        i0, i1 = trough_idx[a], trough_idx[a + 1]
        between = [i for i, k in extrema if k == 1 and i0 < i < i1]
        if between:
            p = max(between, key=lambda i: sm[i])
        else:
            p = i0 + 1 + int(np.argmax(x[i0 + 1:i1]))
        peak_times.append(rsp.start_time_s + p / fs)
        depths.append(x[p] - x[i0])
    return BreathCycleSeries(
        onset_times_s=onsets,
        peak_times_s=np.asarray(peak_times),
        depths=np.asarray(depths),
    )


def rsp_features(cycles: BreathCycleSeries, window: tuple[float, float]) -> dict[str, float]:
    """Mean period, depth, and respiratory volume per time over a window.

    Uses complete cycles whose onset lies in [start, end) and whose duration
    falls inside the physiological gate. Returns NaNs when no cycle qualifies.
    """
    start, end = window
    if not (end > start):
        raise InvalidIntervalError(f"window [{start}, {end}) has non-positive duration")
    durations = cycles.durations()
    onsets = cycles.onset_times_s[:-1] if len(cycles.onset_times_s) else np.array([])
    use = (
        (onsets >= start)
        & (onsets < end)
        & (durations >= MIN_CYCLE_S)
        & (durations <= MAX_CYCLE_S)
    )
    if not np.any(use):
        return {"rsp_period_s": np.nan, "rsp_depth": np.nan, "rsp_rvt": np.nan}
    period = float(np.mean(durations[use]))
    depth = float(np.mean(cycles.depths[use]))
    return {"rsp_period_s": period, "rsp_depth": depth, "rsp_rvt": depth / period}
