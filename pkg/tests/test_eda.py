import numpy as np
import pytest

from drivestress import eda
from drivestress.signals import EDA, SignalTrace


def make_eda(samples, fs=25.0, t0=0.0):
    return SignalTrace(samples=samples, sample_rate_hz=fs, label=EDA, start_time_s=t0)


def pulse_signal(fs, dur, impulses, baseline=2.0):
    """Flat baseline plus unit-peak Bateman pulses at (time, amplitude) pairs."""
    n = int(dur * fs)
    kernel = eda.bateman_kernel(fs, n)
    x = np.full(n, float(baseline))
    for t_i, a_i in impulses:
        k = int(round(t_i * fs))
        x[k:] += a_i * kernel[: n - k]
    return x


class TestDecompose:
    def test_ramp_input_has_no_driver(self):
        fs = 25.0
        t = np.arange(int(120 * fs)) / fs
        tr = make_eda(3.0 + 0.01 * t, fs)
        dec = eda.cvxeda_decompose(tr)
        assert float(np.sum(dec.sparse_driver)) < 0.01
        rmse = np.sqrt(np.mean((dec.tonic.samples - tr.samples) ** 2))
        assert rmse < 0.02

    def test_single_pulse_recovery(self):
        fs = 25.0
        x = pulse_signal(fs, 90.0, [(30.0, 1.0)])
        dec = eda.cvxeda_decompose(make_eda(x, fs))
        drv = dec.sparse_driver
        times = dec.driver_times()
        total = float(np.sum(drv))
        near = float(np.sum(drv[np.abs(times - 30.0) <= 1.0]))
        # Driver mass concentrated within +-1 s of the true impulse.
        assert near / total >= 0.9
        # Recovered pulse amplitude within 10% of the injected 1 uS.
        assert float(np.max(dec.phasic.samples)) == pytest.approx(1.0, rel=0.10)

    def test_multi_pulse_with_sine_tonic(self):
        fs = 25.0
        dur = 180.0
        n = int(dur * fs)
        t = np.arange(n) / fs
        tonic_true = 2.5 + 0.3 * np.sin(2 * np.pi * t / 150.0)
        phasic_true = pulse_signal(fs, dur, [(40.0, 0.8), (90.0, 0.5), (140.0, 1.2)], baseline=0.0)
        tr = make_eda(tonic_true + phasic_true, fs)
        dec = eda.cvxeda_decompose(tr)
        corr = np.corrcoef(dec.phasic.samples, phasic_true)[0, 1]
        assert corr > 0.9
        tonic_rmse = np.sqrt(np.mean((dec.tonic.samples - tonic_true) ** 2))
        assert tonic_rmse < 0.1
        assert dec.diagnostics.kkt_residual < 1e-6

    def test_certificates_and_additivity(self):
        fs = 25.0
        rng = np.random.default_rng(21)
        x = pulse_signal(fs, 120.0, [(20.0, 0.6), (70.0, 0.9)])
        x = x + 0.005 * rng.standard_normal(len(x))
        tr = make_eda(x, fs)
        dec = eda.cvxeda_decompose(tr)
        d = dec.diagnostics
        assert d.converged
        assert d.relative_gap <= 1e-8
        assert d.kkt_residual < 1e-6
        assert d.iterations <= eda.MAX_ITERATIONS
        # tonic + phasic + residual reproduces the input exactly.
        recon = dec.tonic.samples + dec.phasic.samples + dec.residual.samples
        assert np.max(np.abs(recon - tr.samples)) < 1e-12
        # Driver is non-negative and phasic is its kernel convolution.
        assert np.min(dec.sparse_driver) >= 0.0
        conv = eda.bateman_kernel(fs, len(dec.sparse_driver))
        check = np.convolve(dec.sparse_driver, conv)[: len(dec.sparse_driver)]
        assert np.max(np.abs(check - dec.phasic_solver)) < 1e-6

    def test_objective_beats_trivial_feasible_point(self):
        fs = 25.0
        x = pulse_signal(fs, 100.0, [(25.0, 1.0), (60.0, 0.7)])
        tr = make_eda(x, fs)
        dec = eda.cvxeda_decompose(tr)
        n = len(x)
        t = np.arange(n) / fs
        B = eda._spline_basis(t, eda.KNOT_SPACING_S)
        C = np.column_stack([np.ones(n), t / t[-1]])
        G = np.column_stack([B, C])
        reg = np.diag(np.concatenate([np.full(B.shape[1], eda.GAMMA), np.zeros(2)]))
        z = np.linalg.solve(G.T @ G + reg, G.T @ x)
        resid = G @ z - x
        trivial = 0.5 * float(resid @ resid) + 0.5 * eda.GAMMA * float(z[: B.shape[1]] @ z[: B.shape[1]])
        assert dec.diagnostics.objective <= trivial + 1e-9

    def test_positive_homogeneity(self):
        fs = 25.0
        x = pulse_signal(fs, 100.0, [(30.0, 0.8)], baseline=1.5)
        c = 3.0
        dec1 = eda.cvxeda_decompose(make_eda(x, fs))
        dec2 = eda.cvxeda_decompose(make_eda(c * x, fs), alpha=c * eda.ALPHA, gamma=eda.GAMMA)
        assert np.allclose(dec2.tonic.samples, c * dec1.tonic.samples, atol=1e-5)
        assert np.allclose(dec2.phasic.samples, c * dec1.phasic.samples, atol=1e-5)
        assert np.allclose(dec2.sparse_driver, c * dec1.sparse_driver, atol=1e-5)

    def test_250hz_input_is_decimated_and_interpolated(self):
        fs = 250.0
        n = int(90 * fs)
        kernel = eda.bateman_kernel(fs, n)
        x = np.full(n, 2.0)
        k = int(30.0 * fs)
        x[k:] += kernel[: n - k]
        dec = eda.cvxeda_decompose(make_eda(x, fs))
        assert dec.driver_rate_hz == 25.0
        assert len(dec.tonic) == n
        assert float(np.max(dec.phasic.samples)) == pytest.approx(1.0, rel=0.10)
        recon = dec.tonic.samples + dec.phasic.samples + dec.residual.samples
        assert np.max(np.abs(recon - x)) < 1e-12


class TestScrEvents:
    def test_flat_has_no_events(self):
        fs = 25.0
        tr = make_eda(np.full(int(60 * fs), 2.0), fs)
        dec = eda.cvxeda_decompose(tr)
        assert eda.extract_scr_events(dec) == []

    def test_single_pulse_event_geometry(self):
        fs = 25.0
        x = pulse_signal(fs, 90.0, [(30.0, 1.0)])
        dec = eda.cvxeda_decompose(make_eda(x, fs))
        events = eda.extract_scr_events(dec)
        assert len(events) == 1
        ev = events[0]
        assert ev.amplitude_us == pytest.approx(1.0, rel=0.15)
        # Kernel peak lag: ln(tau_slow/tau_fast) * tau_s*tau_f/(tau_s-tau_f).
        t_peak = np.log(2.0 / 0.7) * (2.0 * 0.7) / (2.0 - 0.7)
        assert ev.peak_time_s == pytest.approx(30.0 + t_peak, abs=0.5)
        assert ev.rise_time_s > 0

    def test_two_pulses_two_events_sorted(self):
        fs = 25.0
        x = pulse_signal(fs, 120.0, [(20.0, 0.5), (70.0, 1.1)])
        dec = eda.cvxeda_decompose(make_eda(x, fs))
        events = eda.extract_scr_events(dec)
        assert len(events) == 2
        assert events[0].onset_time_s < events[1].onset_time_s
        assert all(e.amplitude_us > 0 and e.rise_time_s > 0 for e in events)
        assert events[0].amplitude_us == pytest.approx(0.5, rel=0.2)
        assert events[1].amplitude_us == pytest.approx(1.1, rel=0.2)

    def test_min_amplitude_filter(self):
        fs = 25.0
        x = pulse_signal(fs, 120.0, [(20.0, 0.5), (70.0, 0.02)])
        dec = eda.cvxeda_decompose(make_eda(x, fs))
        events = eda.extract_scr_events(dec, min_amplitude_us=0.1)
        assert len(events) == 1


class TestEdaFeatures:
    def _decomp_with_tonic(self, tonic, fs=25.0):
        n = len(tonic)
        zeros = np.zeros(n)
        mk = lambda x: SignalTrace(x, fs, EDA, 0.0)
        diag = eda.EdaSolveDiagnostics(0.0, 0.0, 0.0, 0.0, 0, True)
        return eda.EdaDecomposition(
            tonic=mk(tonic), phasic=mk(zeros), residual=mk(zeros),
            sparse_driver=zeros, driver_rate_hz=fs, diagnostics=diag,
            tonic_solver=tonic, phasic_solver=zeros,
        )

    def test_scl_mean_and_slope(self):
        fs = 25.0
        t = np.arange(int(60 * fs)) / fs
        tonic = 2.0 + 0.05 * t
        dec = self._decomp_with_tonic(tonic, fs)
        feats = eda.eda_features(dec, [], (10.0, 40.0))
        assert feats["scl_mean_us"] == pytest.approx(2.0 + 0.05 * 25.0, abs=0.01)
        assert feats["scl_slope_us_per_s"] == pytest.approx(0.05, abs=1e-6)
        assert feats["scr_frequency_per_min"] == 0.0
        assert np.isnan(feats["scr_amplitude_us"])
        assert np.isnan(feats["scr_rise_time_s"])

    def test_scr_window_counting(self):
        fs = 25.0
        dec = self._decomp_with_tonic(np.full(int(120 * fs), 2.0), fs)
        events = [
            eda.ScrEvent(onset_time_s=9.0, peak_time_s=10.0, amplitude_us=0.5, rise_time_s=1.0),
            eda.ScrEvent(onset_time_s=19.0, peak_time_s=20.5, amplitude_us=0.7, rise_time_s=1.5),
            eda.ScrEvent(onset_time_s=99.0, peak_time_s=100.0, amplitude_us=0.9, rise_time_s=1.0),
        ]
        feats = eda.eda_features(dec, events, (0.0, 30.0))
        assert feats["scr_frequency_per_min"] == pytest.approx(4.0)  # 2 events / 0.5 min
        assert feats["scr_amplitude_us"] == pytest.approx(0.6)
        assert feats["scr_rise_time_s"] == pytest.approx(1.25)
