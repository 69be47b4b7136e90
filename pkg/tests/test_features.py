import numpy as np
import pytest

from drivestress import eda as eda_mod
from drivestress.cardiac import detect_r_peaks, heart_rate, rsa_p2t
from drivestress.errors import (
    InvalidBaselineError,
    InvalidIntervalError,
    MissingChannelError,
    ShapeMismatchError,
    UnimputableColumnError,
)
from drivestress.features import (
    PHYSIO_COLUMNS,
    VEHICLE_COLUMNS,
    FeatureFrame,
    Session,
    StressorEvent,
    VehicleTelemetry,
    build_feature_frame,
    knn_impute,
    sample_entropy,
    skt_features,
    vehicle_features,
    zscore_baseline,
)
from drivestress.respiration import detect_breath_cycles, rsp_features
from drivestress.signals import (
    BRAKE,
    ECG,
    EDA,
    RSP_FUSED,
    SKT,
    SPEED,
    STEERING,
    THROTTLE,
    SignalTrace,
)


def sampen_oracle(x, m=2, r_fraction=0.2):
    """Literal double-loop SampEn with the package's conventions."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n and np.ptp(x) == 0.0:
        return 0.0
    if n < m + 3:
        return float("nan")
    r = r_fraction * np.std(x)
    nt = n - m
    b = a = 0
    for i in range(nt):
        for j in range(i + 1, nt):
            if max(abs(x[i + k] - x[j + k]) for k in range(m)) <= r:
                b += 1
                if abs(x[i + m] - x[j + m]) <= r:
                    a += 1
    if b == 0:
        return 0.0
    if a == 0:
        return float("nan")
    return -np.log(a / b)


def qrs_train(duration_s, fs, rr_s=0.8, jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration_s * fs)) / fs
    x = np.zeros_like(t)
    peaks = []
    tp = 0.5
    while tp < duration_s - 0.5:
        peaks.append(tp)
        tp += rr_s + (jitter * rng.standard_normal() if jitter else 0.0)
    for p in peaks:
        x += np.exp(-0.5 * ((t - p) / 0.012) ** 2)
    return x


def make_session(duration_s=300.0, include_vehicle=True, drop=None, seed=11):
    rng = np.random.default_rng(seed)
    fs = 250.0
    n = int(duration_s * fs)
    t = np.arange(n) / fs

    ecg = qrs_train(duration_s, fs)
    tonic = 5.0 + 0.4 * np.sin(2 * np.pi * t / 150.0)
    eda = tonic.copy()
    kern = eda_mod.bateman_kernel(fs, int(10 * fs))
    for onset in np.arange(12.0, duration_s - 12.0, 21.0):
        i = int(onset * fs)
        m = min(len(kern), n - i)
        eda[i : i + m] += rng.uniform(0.3, 0.8) * kern[:m]
    rsp = np.sin(2 * np.pi * t / 4.0)
    skt = 34.0 - 0.001 * t + 0.002 * rng.standard_normal(n)

    traces = {
        ECG: SignalTrace(samples=ecg, sample_rate_hz=fs, label=ECG),
        EDA: SignalTrace(samples=eda, sample_rate_hz=fs, label=EDA),
        RSP_FUSED: SignalTrace(samples=rsp, sample_rate_hz=fs, label=RSP_FUSED),
        SKT: SignalTrace(samples=skt, sample_rate_hz=fs, label=SKT),
    }
    if drop:
        traces.pop(drop)

    vehicle = None
    if include_vehicle:
        fv = 50.0
        nv = int(duration_s * fv)
        tv = np.arange(nv) / fv
        throttle = np.clip(0.4 + 0.3 * np.sin(2 * np.pi * tv / 7.0) + 0.05 * rng.standard_normal(nv), 0.0, 1.0)
        brake = np.zeros(nv)
        for onset in np.arange(40.0, duration_s - 10.0, 45.0):
            i = int(onset * fv)
            brake[i : i + int(2 * fv)] = 0.5
        vehicle = VehicleTelemetry(
            speed=SignalTrace(samples=60 + 5 * np.sin(2 * np.pi * tv / 60.0), sample_rate_hz=fv, label=SPEED),
            steering_angle=SignalTrace(samples=2.0 * rng.standard_normal(nv), sample_rate_hz=fv, label=STEERING),
            throttle=SignalTrace(samples=throttle, sample_rate_hz=fv, label=THROTTLE),
            brake=SignalTrace(samples=brake, sample_rate_hz=fv, label=BRAKE),
        )

    frac = duration_s / 300.0
    phases = {
        "baseline_video": (0.0, 30.0 * frac),
        "practice": (30.0 * frac, 60.0 * frac),
        "free_driving": (60.0 * frac, 180.0 * frac),
        "stressor_driving": (180.0 * frac, 270.0 * frac),
        "recovery": (270.0 * frac, duration_s),
    }
    events = [StressorEvent("merge", phases["stressor_driving"][0] + 5.0)]
    return Session(
        subject_id="s01",
        session_kind="Irritation",
        traces=traces,
        phases=phases,
        events=events,
        vehicle=vehicle,
    )


@pytest.fixture(scope="module")
def session300():
    return make_session()


@pytest.fixture(scope="module")
def frame300(session300):
    return build_feature_frame(session300, include_vehicle=True)


class TestSampleEntropy:
    def test_constant_is_zero(self):
        assert sample_entropy(np.full(50, 0.5)) == 0.0

    def test_matches_oracle_on_binary(self):
        for seed in range(4):
            rng = np.random.default_rng(seed)
            x = rng.integers(0, 2, 80).astype(float)
            got = sample_entropy(x)
            want = sampen_oracle(x)
            np.testing.assert_allclose(got, want, rtol=1e-12, equal_nan=True)

    def test_matches_oracle_on_uniform(self):
        for seed in range(4):
            rng = np.random.default_rng(10 + seed)
            x = rng.uniform(0, 1, 120)
            np.testing.assert_allclose(sample_entropy(x), sampen_oracle(x), rtol=1e-12)

    def test_matches_oracle_on_sine(self):
        x = np.sin(np.linspace(0, 12 * np.pi, 200))
        np.testing.assert_allclose(sample_entropy(x), sampen_oracle(x), rtol=1e-12)

    def test_no_template_matches_scores_zero(self):
        x = np.array([0.0, 100.0, 0.0, 200.0, 0.0, 300.0, 0.0, 400.0])
        assert sampen_oracle(x) == 0.0
        assert sample_entropy(x) == 0.0

    def test_no_extension_matches_is_nan(self):
        x = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 2.0])
        assert np.isnan(sampen_oracle(x))
        assert np.isnan(sample_entropy(x))

    def test_too_short_is_nan(self):
        assert np.isnan(sample_entropy(np.array([0.0, 1.0, 2.0, 3.0])))


class TestSktFeatures:
    def test_constant(self):
        tr = SignalTrace(samples=np.full(2500, 34.0), sample_rate_hz=250.0, label=SKT)
        out = skt_features(tr, (0.0, 10.0))
        assert out["skt_mean_c"] == 34.0
        assert out["skt_slope_c_per_s"] == 0.0

    def test_linear_ramp(self):
        fs = 250.0
        t = np.arange(7500) / fs
        tr = SignalTrace(samples=34.0 + 0.01 * t, sample_rate_hz=fs, label=SKT)
        out = skt_features(tr, (0.0, 30.0))
        np.testing.assert_allclose(out["skt_slope_c_per_s"], 0.01, atol=1e-9)

    def test_noisy_ramp_matches_polyfit(self):
        fs = 250.0
        rng = np.random.default_rng(5)
        t = np.arange(7500) / fs
        x = 34.0 + 0.01 * t + 0.05 * rng.standard_normal(len(t))
        tr = SignalTrace(samples=x, sample_rate_hz=fs, label=SKT)
        out = skt_features(tr, (0.0, 30.0))
        want = np.polyfit(t, x, 1)[0]
        np.testing.assert_allclose(out["skt_slope_c_per_s"], want, rtol=1e-9)


class TestVehicleFeatures:
    @staticmethod
    def telemetry(throttle, brake, fs=50.0, steering=None):
        n = len(throttle)
        steering = np.zeros(n) if steering is None else steering
        return VehicleTelemetry(
            speed=SignalTrace(samples=np.full(n, 50.0), sample_rate_hz=fs, label=SPEED),
            steering_angle=SignalTrace(samples=steering, sample_rate_hz=fs, label=STEERING),
            throttle=SignalTrace(samples=throttle, sample_rate_hz=fs, label=THROTTLE),
            brake=SignalTrace(samples=brake, sample_rate_hz=fs, label=BRAKE),
        )

    def test_never_pressed(self):
        v = self.telemetry(np.zeros(1500), np.zeros(1500))
        out = vehicle_features(v, (0.0, 30.0))
        assert out["throttle_rate_pct"] == 0.0
        assert np.isnan(out["throttle_magnitude"])

    def test_constant_press(self):
        v = self.telemetry(np.full(1500, 0.5), np.zeros(1500))
        out = vehicle_features(v, (0.0, 30.0))
        assert out["throttle_rate_pct"] == 100.0
        assert out["throttle_magnitude"] == 0.5
        assert out["throttle_entropy"] == 0.0

    def test_square_wave_rate_and_entropy(self):
        # 1 s on, 1 s off at 50 Hz; decimation to 10 Hz keeps the pattern
        block = np.concatenate([np.ones(50), np.zeros(50)])
        throttle = np.tile(block, 15)
        v = self.telemetry(throttle, np.zeros(1500))
        out = vehicle_features(v, (0.0, 30.0))
        assert abs(out["throttle_rate_pct"] - 50.0) <= 100.0 / 1500
        want = sampen_oracle(throttle[::5])
        np.testing.assert_allclose(out["throttle_entropy"], want, rtol=1e-12, equal_nan=True)

    def test_entropy_matches_oracle_on_noise(self):
        rng = np.random.default_rng(2)
        throttle = rng.uniform(0, 1, 1500)
        v = self.telemetry(throttle, np.zeros(1500))
        out = vehicle_features(v, (0.0, 30.0))
        np.testing.assert_allclose(
            out["throttle_entropy"], sampen_oracle(throttle[::5]), rtol=1e-12, equal_nan=True
        )

    def test_steering_std_sign_invariant(self):
        rng = np.random.default_rng(3)
        steer = rng.standard_normal(1500)
        a = vehicle_features(self.telemetry(np.zeros(1500), np.zeros(1500), steering=steer), (0.0, 30.0))
        b = vehicle_features(self.telemetry(np.zeros(1500), np.zeros(1500), steering=-steer), (0.0, 30.0))
        np.testing.assert_allclose(a["steering_std_deg"], b["steering_std_deg"], rtol=1e-12)

    def test_pedal_range_validated(self):
        with pytest.raises(ShapeMismatchError):
            self.telemetry(np.full(100, 1.5), np.zeros(100))


class TestBuildFeatureFrame:
    def test_row_count_and_timestamps(self, frame300):
        assert len(frame300) == 271
        assert frame300.timestamps_s[0] == 15.0
        assert frame300.timestamps_s[-1] == 285.0
        np.testing.assert_allclose(np.diff(frame300.timestamps_s), 1.0)

    def test_column_order(self, frame300):
        assert frame300.columns == PHYSIO_COLUMNS + VEHICLE_COLUMNS

    def test_labels_follow_phases(self, frame300):
        ts = frame300.timestamps_s
        assert all(frame300.labels[(ts >= 60) & (ts < 180)] == "free")
        assert all(frame300.labels[(ts >= 180) & (ts < 270)] == "stress")
        assert all(frame300.labels[ts < 60] == "excluded")
        assert all(frame300.labels[ts >= 270] == "excluded")

    def test_missing_channel_error(self):
        session = make_session(duration_s=60.0, drop=SKT, include_vehicle=False)
        with pytest.raises(MissingChannelError, match="(?i)skt"):
            build_feature_frame(session)

    def test_missing_vehicle_error(self):
        session = make_session(duration_s=60.0, include_vehicle=False)
        with pytest.raises(MissingChannelError, match="vehicle"):
            build_feature_frame(session, include_vehicle=True)

    def test_too_short_session(self):
        with pytest.raises(InvalidIntervalError):
            build_feature_frame(make_session(duration_s=25.0, include_vehicle=False))

    def test_matches_direct_extractor_calls(self, session300, frame300):
        peaks = detect_r_peaks(session300.traces[ECG])
        ibis = peaks.ibis()
        cycles = detect_breath_cycles(session300.traces[RSP_FUSED])
        decomp = eda_mod.cvxeda_decompose(session300.traces[EDA])
        scrs = eda_mod.extract_scr_events(decomp)
        for i in range(0, len(frame300), 37):
            tc = frame300.timestamps_s[i]
            window = (tc - 15.0, tc + 15.0)
            want = {
                "hr_bpm": heart_rate(peaks, window),
                "rsa_s": rsa_p2t(ibis, cycles, window),
            }
            want.update(eda_mod.eda_features(decomp, scrs, window))
            want.update(rsp_features(cycles, window))
            want.update(skt_features(session300.traces[SKT], window))
            want.update(vehicle_features(session300.vehicle, window))
            got = frame300.values[i]
            for j, col in enumerate(frame300.columns):
                np.testing.assert_allclose(got[j], want[col], rtol=1e-12, equal_nan=True, err_msg=col)

    def test_core_columns_mostly_observed(self, frame300):
        # the synthetic session has clean periodic signals everywhere
        for col in ("hr_bpm", "scl_mean_us", "rsp_period_s", "skt_mean_c", "speed_mean_kmh"):
            vals = frame300.column(col)
            assert np.isfinite(vals).mean() > 0.95, col

    def test_event_outside_phases_rejected(self):
        with pytest.raises(InvalidIntervalError):
            make_session_bad_event()


def make_session_bad_event():
    s = make_session(duration_s=60.0, include_vehicle=False)
    return Session(
        subject_id=s.subject_id,
        session_kind=s.session_kind,
        traces=s.traces,
        phases=s.phases,
        events=[StressorEvent("early", 1.0)],
    )


def toy_frame(values, timestamps=None, labels=None, columns=None):
    values = np.asarray(values, dtype=float)
    n, c = values.shape
    return FeatureFrame(
        timestamps_s=np.arange(n, dtype=float) if timestamps is None else timestamps,
        values=values,
        columns=tuple(f"f{j}" for j in range(c)) if columns is None else columns,
        labels=np.array(["free"] * n) if labels is None else labels,
        subject_id="s01",
        session_kind="Irritation",
    )


class TestZscoreBaseline:
    def test_baseline_rows_standardized(self):
        rng = np.random.default_rng(0)
        values = rng.normal(5.0, 3.0, size=(100, 4))
        values[7, 2] = np.nan
        frame = zscore_baseline(toy_frame(values), (0.0, 60.0))
        sel = frame.timestamps_s < 60.0
        for j in range(4):
            col = frame.values[sel, j]
            col = col[~np.isnan(col)]
            assert abs(np.mean(col)) < 1e-9
            assert abs(np.std(col) - 1.0) < 1e-9

    def test_constant_column_centered_and_flagged(self):
        values = np.random.default_rng(1).normal(size=(60, 2))
        values[:, 1] = 7.5
        frame = zscore_baseline(toy_frame(values), (0.0, 60.0))
        assert frame.degenerate_columns == ("f1",)
        np.testing.assert_allclose(frame.values[:, 1], 0.0)

    def test_affine_rescale_gives_identical_zscores(self):
        rng = np.random.default_rng(2)
        values = rng.normal(size=(90, 3))
        scaled = values * np.array([3.7, 0.2, 11.0]) + np.array([-2.0, 5.0, 0.3])
        a = zscore_baseline(toy_frame(values), (0.0, 60.0))
        b = zscore_baseline(toy_frame(scaled), (0.0, 60.0))
        np.testing.assert_allclose(a.values, b.values, atol=1e-9)

    def test_too_few_rows(self):
        values = np.random.default_rng(3).normal(size=(100, 2))
        with pytest.raises(InvalidBaselineError):
            zscore_baseline(toy_frame(values), (0.0, 20.0))

    def test_empty_interval(self):
        values = np.random.default_rng(4).normal(size=(100, 2))
        with pytest.raises(InvalidBaselineError):
            zscore_baseline(toy_frame(values), (10.0, 10.0))

    def test_all_degenerate(self):
        with pytest.raises(InvalidBaselineError):
            zscore_baseline(toy_frame(np.ones((60, 3))), (0.0, 60.0))

    def test_unobserved_column_passes_through_flagged(self):
        values = np.random.default_rng(5).normal(size=(80, 2))
        values[:60, 1] = np.nan
        frame = zscore_baseline(toy_frame(values), (0.0, 60.0))
        assert "f1" in frame.degenerate_columns
        np.testing.assert_allclose(frame.values[60:, 1], values[60:, 1])


def knn_oracle(values, k):
    """Literal per-cell re-implementation of the imputation contract."""
    values = np.asarray(values, dtype=float)
    out = values.copy()
    obs = ~np.isnan(values)
    n, c = values.shape
    for i in range(n):
        for j in range(c):
            if obs[i, j]:
                continue
            scored = []
            for cand in range(n):
                if not obs[cand, j]:
                    continue
                mutual = [col for col in range(c) if col != j and obs[i, col] and obs[cand, col]]
                if mutual:
                    d = float(np.sqrt(sum((values[i, col] - values[cand, col]) ** 2 for col in mutual)))
                else:
                    d = np.inf
                scored.append((d, cand))
            scored.sort()
            take = [cand for _, cand in scored[:k]]
            out[i, j] = np.mean([values[cand, j] for cand in take])
    return out


class TestKnnImpute:
    def test_no_missing_unchanged(self):
        values = np.random.default_rng(0).normal(size=(20, 3))
        frame = toy_frame(values)
        out = knn_impute(frame)
        np.testing.assert_array_equal(out.values, values)

    def test_identical_rows_share_value(self):
        values = np.tile([1.0, 2.0, 5.0], (8, 1))
        values[3, 2] = np.nan
        out = knn_impute(toy_frame(values))
        assert out.values[3, 2] == 5.0

    def test_tie_break_by_row_index(self):
        values = np.zeros((7, 2))
        values[:, 1] = [10.0, np.nan, 20.0, 30.0, 40.0, 50.0, 60.0]
        out = knn_impute(toy_frame(values), k=5)
        assert out.values[1, 1] == 30.0

    def test_mask_and_recover(self):
        rng = np.random.default_rng(6)
        t = np.arange(200)
        values = np.column_stack([
            np.sin(t / 9.0) + 0.01 * rng.standard_normal(200),
            np.cos(t / 9.0) + 0.01 * rng.standard_normal(200),
            0.5 * np.sin(t / 9.0 + 1.0) + 0.01 * rng.standard_normal(200),
        ])
        masked = values.copy()
        holes = rng.random(values.shape) < 0.05
        masked[holes] = np.nan
        out = knn_impute(toy_frame(masked))
        for j in range(3):
            err = out.values[holes[:, j], j] - values[holes[:, j], j]
            assert np.sqrt(np.mean(err**2)) < np.std(values[:, j])

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        values = rng.normal(size=(40, 5))
        values[rng.random(values.shape) < 0.15] = np.nan
        # keep every column imputable
        for j in range(5):
            if np.isnan(values[:, j]).all():
                values[0, j] = 0.0
        got = knn_impute(toy_frame(values), k=5)
        want = knn_oracle(values, k=5)
        np.testing.assert_allclose(got.values, want, rtol=1e-12)

    def test_idempotent(self):
        rng = np.random.default_rng(8)
        values = rng.normal(size=(30, 4))
        values[rng.random(values.shape) < 0.1] = np.nan
        once = knn_impute(toy_frame(values))
        twice = knn_impute(once)
        np.testing.assert_array_equal(once.values, twice.values)
        assert not np.isnan(once.values).any()

    def test_fully_missing_column(self):
        values = np.random.default_rng(9).normal(size=(10, 3))
        values[:, 1] = np.nan
        with pytest.raises(UnimputableColumnError, match="f1"):
            knn_impute(toy_frame(values))
