"""Tail-fitting and streaming-threshold tests.

Recovery tests draw from known distributions via explicit inverse-CDF
samplers (the oracle), then check the fitted parameters against the truth.
"""

import math
import warnings

import numpy as np
import pytest

from evdetect.spot import (
    ANOMALY,
    NORMAL,
    PEAK,
    CalibrationWarning,
    GpdFit,
    SpotDomainError,
    gpd_log_likelihood,
    gpd_quantile,
    grimshaw_fit,
    pot_calibrate,
    spot_step,
)


def gpd_inverse_cdf(u: np.ndarray, gamma: float, sigma: float) -> np.ndarray:
    """Oracle sampler: invert F(x) = 1 - (1 + gamma x / sigma)^(-1/gamma)."""
    if gamma == 0.0:
        return -sigma * np.log1p(-u)
    return (sigma / gamma) * ((1.0 - u) ** -gamma - 1.0)


class TestLogLikelihood:
    def test_exponential_limit_single_point(self):
        assert gpd_log_likelihood(0.0, 1.0, [1.0]) == pytest.approx(-1.0)

    def test_direct_substitution(self):
        # -(1+1)*log(2), N_h=1, log sigma = 0
        assert gpd_log_likelihood(1.0, 1.0, [1.0]) == pytest.approx(-2.0 * math.log(2.0), abs=1e-5)
        assert gpd_log_likelihood(1.0, 1.0, [1.0]) == pytest.approx(-1.38629, abs=1e-5)

    def test_domain_violations_raise(self):
        with pytest.raises(SpotDomainError):
            gpd_log_likelihood(0.5, 0.0, [1.0])
        with pytest.raises(SpotDomainError):
            gpd_log_likelihood(0.5, 1.0, [-1.0])
        with pytest.raises(SpotDomainError):
            gpd_log_likelihood(-2.0, 1.0, [1.0])  # 1 + gamma*y/sigma <= 0
        with pytest.raises(SpotDomainError):
            gpd_log_likelihood(0.5, 1.0, [])

    def test_optimum_beats_random_feasible_points(self):
        rng = np.random.default_rng(100)
        y = gpd_inverse_cdf(rng.uniform(size=800), 0.2, 1.5)
        fit = grimshaw_fit(y)
        best = gpd_log_likelihood(fit.gamma_hat, fit.sigma_hat, y)
        tried = 0
        while tried < 100:
            gamma = rng.uniform(-0.4, 1.5)
            sigma = rng.uniform(0.3, 4.0)
            try:
                ll = gpd_log_likelihood(gamma, sigma, y)
            except SpotDomainError:
                continue
            tried += 1
            assert best >= ll


class TestGrimshaw:
    def test_recovers_exponential(self):
        rng = np.random.default_rng(7)
        y = gpd_inverse_cdf(rng.uniform(size=5000), 0.0, 1.0)  # Exp(1)
        fit = grimshaw_fit(y)
        assert -0.1 <= fit.gamma_hat <= 0.1
        assert 0.9 <= fit.sigma_hat <= 1.1

    def test_recovers_heavy_tail(self):
        rng = np.random.default_rng(8)
        y = gpd_inverse_cdf(rng.uniform(size=5000), 0.3, 2.0)
        fit = grimshaw_fit(y)
        assert fit.gamma_hat == pytest.approx(0.3, abs=0.08)
        assert fit.sigma_hat == pytest.approx(2.0, abs=0.2)
        assert fit.n_excesses == 5000

    def test_recovers_bounded_tail(self):
        rng = np.random.default_rng(9)
        y = gpd_inverse_cdf(rng.uniform(size=5000), -0.2, 1.0)
        fit = grimshaw_fit(y)
        assert fit.gamma_hat == pytest.approx(-0.2, abs=0.08)

    def test_constant_excesses_fallback(self):
        fit = grimshaw_fit([2.5] * 20)
        assert fit.gamma_hat == 0.0
        assert fit.sigma_hat == pytest.approx(2.5)

    def test_rejects_degenerate_input(self):
        with pytest.raises(SpotDomainError):
            grimshaw_fit([1.0])
        with pytest.raises(SpotDomainError):
            grimshaw_fit([1.0, -1.0])

    def test_local_optimality_on_grid(self):
        rng = np.random.default_rng(10)
        y = gpd_inverse_cdf(rng.uniform(size=2000), 0.25, 1.0)
        fit = grimshaw_fit(y)
        best = gpd_log_likelihood(fit.gamma_hat, fit.sigma_hat, y)
        for gamma in np.linspace(0.9 * fit.gamma_hat, 1.1 * fit.gamma_hat, 11):
            for sigma in np.linspace(0.9 * fit.sigma_hat, 1.1 * fit.sigma_hat, 11):
                try:
                    ll = gpd_log_likelihood(float(gamma), float(sigma), y)
                except SpotDomainError:
                    continue
                assert best >= ll - 1e-9


class TestQuantile:
    def test_hand_computed(self):
        fit = GpdFit(gamma_hat=0.5, sigma_hat=2.0, n_excesses=200)
        z = gpd_quantile(10.0, fit, q=0.001, n=10000)
        assert z == pytest.approx(23.8885, abs=1e-3)

    def test_log_limit(self):
        fit = GpdFit(gamma_hat=0.0, sigma_hat=2.0, n_excesses=200)
        z = gpd_quantile(10.0, fit, q=0.001, n=10000)
        assert z == pytest.approx(15.9915, abs=1e-3)

    def test_boundary_q_equals_rate(self):
        fit = GpdFit(gamma_hat=0.5, sigma_hat=2.0, n_excesses=200)
        with pytest.raises(SpotDomainError):
            gpd_quantile(10.0, fit, q=200 / 10000, n=10000)
        # approaching the boundary from below converges to h
        z = gpd_quantile(10.0, fit, q=200 / 10000 - 1e-12, n=10000)
        assert z == pytest.approx(10.0, abs=1e-6)

    def test_monotone_in_q_and_sigma(self):
        n = 10000
        base = GpdFit(0.3, 2.0, 200)
        qs = [1e-5, 1e-4, 1e-3, 1e-2]
        zs = [gpd_quantile(5.0, base, q, n) for q in qs]
        assert all(a > b for a, b in zip(zs, zs[1:]))  # strictly decreasing in q
        sigmas = [0.5, 1.0, 2.0, 4.0]
        zs = [gpd_quantile(5.0, GpdFit(0.3, s, 200), 1e-3, n) for s in sigmas]
        assert all(a < b for a, b in zip(zs, zs[1:]))  # increasing in sigma


class TestCalibration:
    def test_normal_scores_threshold_behaves(self):
        rng = np.random.default_rng(11)
        scores = rng.normal(size=1000)
        state = pot_calibrate(scores, q=1e-3)
        assert state.z_q > state.h > 0
        fresh = rng.normal(size=1000)
        assert int(np.sum(fresh > state.z_q)) <= 4

    def test_constant_scores_degenerate(self):
        with pytest.warns(CalibrationWarning):
            state = pot_calibrate(np.full(500, 3.0), q=1e-4)
        assert state.degenerate
        assert state.h == 3.0
        assert state.z_q > state.h

    def test_peak_count_at_level(self):
        rng = np.random.default_rng(12)
        scores = rng.permutation(np.arange(5000, dtype=float))
        state = pot_calibrate(scores, q=1e-4, init_level=0.98)
        assert len(state.peaks) == 100
        assert state.k == 5000

    def test_too_few_scores_rejected(self):
        with pytest.raises(ValueError):
            pot_calibrate(np.arange(50, dtype=float), q=1e-4)

    def test_thin_tail_lowers_threshold(self):
        # heavy ties above the 0.98 quantile leave too few strict excesses
        scores = np.concatenate([np.linspace(0, 1, 195), np.full(5, 2.0)])
        scores = np.tile(scores, 3)
        with pytest.warns(CalibrationWarning):
            state = pot_calibrate(scores, q=1e-4, min_peaks=10)
        assert len(state.peaks) >= 10


class TestSpotStep:
    @staticmethod
    def _calibrated(seed=13, n=1000, q=1e-3):
        rng = np.random.default_rng(seed)
        return pot_calibrate(rng.normal(size=n), q=q)

    def test_boundary_exactly_zq_is_peak(self):
        state = self._calibrated()
        assert spot_step(state, state.z_q) == PEAK

    def test_below_h_only_increments_k(self):
        state = self._calibrated()
        snapshot = (state.h, state.z_q, list(state.peaks), state.fit.gamma_hat, state.fit.sigma_hat, state.k)
        cls = spot_step(state, state.h - 1.0)
        assert cls == NORMAL
        assert (state.h, state.z_q, list(state.peaks), state.fit.gamma_hat, state.fit.sigma_hat) == snapshot[:5]
        assert state.k == snapshot[5] + 1

    def test_anomaly_never_mutates_fit(self):
        state = self._calibrated()
        snapshot = (state.h, state.z_q, list(state.peaks), state.fit.gamma_hat, state.fit.sigma_hat, state.k)
        assert spot_step(state, state.z_q * 50.0) == ANOMALY
        assert (state.h, state.z_q, list(state.peaks), state.fit.gamma_hat, state.fit.sigma_hat, state.k) == snapshot

    def test_peak_updates_fit_and_threshold_stays_above_h(self):
        state = self._calibrated()
        rng = np.random.default_rng(14)
        for x in rng.normal(size=3000):
            spot_step(state, float(x))
            assert state.z_q > state.h

    def test_spike_stream_detection(self):
        rng = np.random.default_rng(15)
        clean = rng.normal(size=12000)
        state = pot_calibrate(clean[:2000], q=1e-4)
        stream = clean[2000:].copy()
        spike_value = 10.0 * 3.0902  # 10x the 99.9% standard-normal quantile
        spike_pos = rng.choice(stream.size, size=20, replace=False)
        stream[spike_pos] = spike_value
        hits = 0
        false_alarms = 0
        for i, x in enumerate(stream):
            cls = spot_step(state, float(x))
            if cls == ANOMALY:
                if i in set(spike_pos):
                    hits += 1
                else:
                    false_alarms += 1
        assert hits >= 19
        assert false_alarms <= 0.005 * (stream.size - 20)

    def test_replay_without_anomalies_identical_thresholds(self):
        rng = np.random.default_rng(16)
        clean = rng.normal(size=4000)
        spikes = {500: 40.0, 1500: 55.0, 2500: 60.0}
        with_anomalies = clean.copy()
        for idx, v in spikes.items():
            with_anomalies[idx] = v

        state_a = pot_calibrate(clean[:1000], q=1e-4)
        traj_a = []
        for i, x in enumerate(with_anomalies[1000:], start=1000):
            spot_step(state_a, float(x))
            if i not in spikes:
                traj_a.append(state_a.z_q)

        state_b = pot_calibrate(clean[:1000], q=1e-4)
        traj_b = []
        for i, x in enumerate(clean[1000:], start=1000):
            if i in spikes:
                continue
            spot_step(state_b, float(x))
            traj_b.append(state_b.z_q)

        assert traj_a == traj_b  # bit-exact: anomalies leave no trace

    def test_refit_stride_skips_refits_but_counts(self):
        rng = np.random.default_rng(17)
        state = pot_calibrate(rng.normal(size=1000), q=1e-3, refit_stride=5)
        gamma0 = state.fit.gamma_hat
        peaks_seen = 0
        for x in rng.normal(size=4000):
            if spot_step(state, float(x)) == PEAK:
                peaks_seen += 1
                if peaks_seen == 1:
                    assert state.fit.gamma_hat == gamma0  # not refit yet
                    assert state.fit.n_excesses == state.n_peaks_total
        assert peaks_seen > 5

    def test_peak_cap_bounds_memory(self):
        rng = np.random.default_rng(18)
        state = pot_calibrate(rng.normal(size=1000), q=1e-3, max_peaks=30)
        for x in rng.normal(loc=2.0, size=2000):
            spot_step(state, float(x))
        assert len(state.peaks) <= 30
        assert state.n_peaks_total > 30


def test_no_warnings_in_normal_calibration():
    rng = np.random.default_rng(19)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pot_calibrate(rng.normal(size=2000), q=1e-4)
