import numpy as np
import pytest

from drivestress import respiration as rsp
from drivestress.errors import NoSignalError
from drivestress.signals import RSP_FUSED, SignalTrace


def make_rsp(samples, fs=250.0, t0=0.0):
    return SignalTrace(samples=samples, sample_rate_hz=fs, label=RSP_FUSED, start_time_s=t0)


class TestDetect:
    def test_sinusoid_cycle_count_period_depth(self):
        fs = 250.0
        period, amp, dur = 4.0, 1.0, 60.0
        t = np.arange(int(dur * fs)) / fs
        tr = make_rsp(amp * np.sin(2 * np.pi * t / period))
        cycles = rsp.detect_breath_cycles(tr)
        assert abs(cycles.n_cycles - 15) <= 1
        assert np.all(np.abs(cycles.durations() - period) <= 0.1)
        assert np.all(np.abs(cycles.depths - 2 * amp) <= 0.1 * amp)
        # Peaks interleave onsets and depths are positive.
        assert np.all(cycles.peak_times_s > cycles.onset_times_s[:-1])
        assert np.all(cycles.peak_times_s < cycles.onset_times_s[1:])
        assert np.all(cycles.depths > 0)

    def test_noisy_sinusoid_still_counted(self):
        fs = 250.0
        rng = np.random.default_rng(3)
        t = np.arange(int(120 * fs)) / fs
        x = np.sin(2 * np.pi * t / 5.0) + 0.05 * rng.standard_normal(len(t))
        cycles = rsp.detect_breath_cycles(make_rsp(x))
        assert abs(cycles.n_cycles - 24) <= 1
        assert np.all(np.abs(cycles.durations() - 5.0) <= 0.3)

    def test_flat_signal_rejected(self):
        with pytest.raises(NoSignalError):
            rsp.detect_breath_cycles(make_rsp(np.zeros(2500)))

    def test_min_duration_gating_merges_jitter(self):
        # A slow breath with a fast ripple: the ripple's sub-second cycles
        # must not survive as cycles of their own.
        fs = 250.0
        t = np.arange(int(60 * fs)) / fs
        x = np.sin(2 * np.pi * t / 6.0) + 0.02 * np.sin(2 * np.pi * t / 0.4)
        cycles = rsp.detect_breath_cycles(make_rsp(x))
        assert np.all(cycles.durations() >= rsp.MIN_CYCLE_S)
        assert abs(cycles.n_cycles - 10) <= 1

    def test_start_time_offsets_are_respected(self):
        fs = 250.0
        t = np.arange(int(40 * fs)) / fs
        x = np.sin(2 * np.pi * t / 4.0)
        cycles = rsp.detect_breath_cycles(make_rsp(x, t0=500.0))
        assert cycles.onset_times_s[0] >= 500.0
        assert cycles.onset_times_s[-1] <= 540.0


class TestFeatures:
    def test_mixed_cycles_example(self):
        # Two cycles of 3 s/depth 1.5 and 5 s/depth 2.5: period 4, depth 2, rvt 0.5.
        cycles = rsp.BreathCycleSeries(
            onset_times_s=np.array([0.0, 3.0, 8.0]),
            peak_times_s=np.array([1.5, 5.5]),
            depths=np.array([1.5, 2.5]),
        )
        feats = rsp.rsp_features(cycles, (0.0, 10.0))
        assert feats["rsp_period_s"] == pytest.approx(4.0)
        assert feats["rsp_depth"] == pytest.approx(2.0)
        assert feats["rsp_rvt"] == pytest.approx(0.5)

    def test_no_cycles_gives_nans(self):
        cycles = rsp.BreathCycleSeries(
            onset_times_s=np.array([0.0, 4.0]),
            peak_times_s=np.array([2.0]),
            depths=np.array([1.0]),
        )
        feats = rsp.rsp_features(cycles, (100.0, 130.0))
        assert np.isnan(feats["rsp_period_s"])
        assert np.isnan(feats["rsp_depth"])
        assert np.isnan(feats["rsp_rvt"])

    def test_out_of_gate_durations_excluded(self):
        # 25 s cycle exceeds the physiological gate and must be ignored.
        cycles = rsp.BreathCycleSeries(
            onset_times_s=np.array([0.0, 25.0, 29.0]),
            peak_times_s=np.array([10.0, 27.0]),
            depths=np.array([3.0, 1.0]),
        )
        feats = rsp.rsp_features(cycles, (0.0, 30.0))
        assert feats["rsp_period_s"] == pytest.approx(4.0)
        assert feats["rsp_depth"] == pytest.approx(1.0)

    def test_onset_in_window_selection(self):
        cycles = rsp.BreathCycleSeries(
            onset_times_s=np.array([0.0, 4.0, 8.0, 12.0]),
            peak_times_s=np.array([2.0, 6.0, 10.0]),
            depths=np.array([1.0, 2.0, 3.0]),
        )
        feats = rsp.rsp_features(cycles, (3.5, 9.0))
        # Only cycles starting at 4.0 and 8.0 qualify.
        assert feats["rsp_depth"] == pytest.approx(2.5)

    def test_sinusoid_end_to_end_feature_values(self):
        fs = 250.0
        t = np.arange(int(90 * fs)) / fs
        tr = make_rsp(0.8 * np.sin(2 * np.pi * t / 4.0))
        cycles = rsp.detect_breath_cycles(tr)
        feats = rsp.rsp_features(cycles, (10.0, 70.0))
        assert feats["rsp_period_s"] == pytest.approx(4.0, abs=0.1)
        assert feats["rsp_depth"] == pytest.approx(1.6, abs=0.1)
        assert feats["rsp_rvt"] == pytest.approx(1.6 / 4.0, abs=0.04)
