import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate
from scipy.constants import epsilon_0

from ferrule_casimir.config import load_config, shipped_config_path
from ferrule_casimir.instrument import InterferometerParams, interferometer_signal, prepare_run, run_scan
from ferrule_casimir.lifshitz import TheoryCurve, ideal_gradient
from ferrule_casimir.pipeline import (
    CalibrationError,
    CalibrationResult,
    FringeUnwrapError,
    ScanRecord,
    analyze_scan,
    calibrate_beta,
    count_fringes,
    dither_average,
    effective_record_count,
    electrostatic_gradient_correction,
    finite_amplitude_correction,
    fit_log_quadratic,
    fit_v0_log,
    gradient_from_omega2,
    residual_stats,
    separation_from_calibration,
    static_deflection,
    summarize,
    v0_dither_bias,
)

LAM = 1553.1e-9


def fringe_signal(z, gap0=200e-6, phase=0.3, w0=1.0, vis=0.8):
    p = InterferometerParams(midpoint=w0, visibility=vis, wavelength=LAM, phase_offset=phase,
                             rest_gap=gap0)
    return interferometer_signal(p, gap0 - z)


# --- fringe counting -----------------------------------------------------------


def test_one_full_fringe_is_half_wavelength():
    z = np.linspace(0, LAM / 2, 4001)
    disp = count_fringes(fringe_signal(z), LAM, midpoint=1.0, visibility=0.8)
    assert disp[-1] == pytest.approx(776.55e-9, abs=1e-12)
    assert np.max(np.abs(disp - z)) < 1e-12


def test_back_and_forth_fringes_exact():
    t = np.linspace(0, 1, 20001)
    z = 3e-6 * (1 - np.abs(2 * t - 1) ** 3)
    disp = count_fringes(fringe_signal(z, phase=1.1), LAM, midpoint=1.0, visibility=0.8)
    assert np.max(np.abs(disp - z)) < 1e-12


def test_constant_signal_zero_displacement():
    assert np.all(count_fringes(np.full(100, 1.3), LAM, midpoint=1.0, visibility=0.8) == 0)


def test_undersampled_motion_flagged():
    # steady 2 rad per sample, then a step of 3.3 rad: beyond pi, so ambiguous
    steps = np.r_[np.full(20, 2.0), 3.3, np.full(5, 2.0)]
    z = np.r_[0.0, np.cumsum(steps)] * LAM / (4 * np.pi)
    with pytest.raises(FringeUnwrapError):
        count_fringes(fringe_signal(z), LAM, midpoint=1.0, visibility=0.8)


def test_self_normalization_needs_no_calibration():
    # midpoint and visibility taken from the sampled extrema: close, not exact
    z = np.linspace(0, 2.2e-6, 30001)
    disp = count_fringes(fringe_signal(z, w0=2.5, vis=0.4), LAM)
    assert np.max(np.abs(disp - z)) < 0.05e-9


def _there_and_back(span, back, n=40001):
    t = np.linspace(0, 1, n)
    return span * np.where(t < back, t / back, 1 - 0.5 * (t - back) / (1 - back))


@settings(max_examples=25, deadline=None)
@given(phase=st.floats(-3.1, 3.1), span=st.floats(0.3e-6, 2e-6), back=st.floats(0.1, 0.9))
def test_fringe_counting_exact_on_noiseless_paths(phase, span, back):
    z = _there_and_back(span, back)
    w = fringe_signal(z, phase=phase)
    # a reversal inside a fold zone is read as a pass-through (see below)
    assume(abs(w[np.argmax(z)] - 1.0) / 0.8 <= 0.98)
    disp = count_fringes(w, LAM, midpoint=1.0, visibility=0.8)
    assert np.max(np.abs(disp - z)) < 1e-3 * 1e-9


def test_reversal_inside_fold_zone_reads_as_pass_through():
    # turning 1.5 mrad short of a fringe extremum: indistinguishable from
    # crossing it once noise or a visibility error is present
    z = _there_and_back(1.2205118093530416e-06, 0.5)
    disp = count_fringes(fringe_signal(z, phase=-3.0), LAM, midpoint=1.0, visibility=0.8)
    assert np.max(np.abs(disp - z)) > 0.1 * z.max()
    assert np.all(np.diff(disp) >= 0)


# --- calibration ---------------------------------------------------------------------


def _cal_data(beta=1.0, d0=500e-9, n=200, v=0.15, amp=0.0):
    z = np.linspace(0, 300e-9, n)
    vac = np.full(n, v)
    gap = d0 - z
    s = beta * vac**2 / np.sqrt(gap**2 - amp**2)
    return s, vac, z


def test_calibrate_exact():
    s, vac, z = _cal_data()
    cal = calibrate_beta(s, vac, z)
    assert cal.beta == pytest.approx(1.0, rel=1e-9)
    assert cal.d_offset == pytest.approx(500e-9, rel=1e-9)
    assert cal.fit_residual_rms < 1e-9
    assert cal.n_points == 200


def test_calibrate_with_dither_model():
    s, vac, z = _cal_data(beta=0.03, amp=8e-9)
    cal = calibrate_beta(s, vac, z, modulation_amplitude=8e-9)
    assert cal.beta == pytest.approx(0.03, rel=1e-9)
    assert cal.d_offset == pytest.approx(500e-9, rel=1e-9)


def test_calibrate_monte_carlo_one_percent_noise():
    s0, vac, z = _cal_data()
    betas, offsets = [], []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        cal = calibrate_beta(s0 * (1 + 0.01 * rng.standard_normal(s0.size)), vac, z)
        betas.append(cal.beta)
        offsets.append(cal.d_offset)
        sb = math.sqrt(cal.covariance[0, 0])
        assert abs(cal.beta - 1.0) < max(0.03, 3 * sb)
    assert np.max(np.abs(np.array(betas) - 1)) < 0.03
    assert np.max(np.abs(np.array(offsets) / 500e-9 - 1)) < 0.03


def test_calibration_errors():
    s, vac, z = _cal_data()
    with pytest.raises(CalibrationError):
        calibrate_beta(s[:10], vac[:10], z[:10])
    # span below a factor two
    with pytest.raises(CalibrationError):
        calibrate_beta(*_cal_data(d0=5e-6))
    with pytest.raises(CalibrationError):
        CalibrationResult(1.0, -1e-9, 0.0)


def test_separation_identity_and_errors():
    cal = CalibrationResult(1.0, 500e-9, 0.0)
    d = separation_from_calibration(2e5, 0.1, cal)
    assert d * 2e5 == pytest.approx(1.0 * 0.1**2, rel=1e-15)
    with pytest.raises(ValueError):
        separation_from_calibration(np.array([1.0, 0.0]), 0.1, cal)
    dd = separation_from_calibration(1.0 * 0.1**2 / 80e-9, 0.1, cal, modulation_amplitude=7e-9)
    assert dd == pytest.approx(math.hypot(80e-9, 7e-9))


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(0.1, 10.0), d=st.floats(40e-9, 2e-6), amp=st.floats(0, 10e-9))
def test_separation_invariant_under_vac_rescaling(scale, d, amp):
    cal = CalibrationResult(0.02, 1e-6, 0.0)
    v = 0.2
    q = math.sqrt(d**2 - amp**2)
    s = cal.beta * v**2 / q
    d1 = separation_from_calibration(s, v, cal, amp)
    d2 = separation_from_calibration(s * scale**2, v * scale, cal, amp)
    assert d2 == pytest.approx(d1, rel=1e-12)
    assert d1 == pytest.approx(d, rel=1e-9)


# --- gradients ---------------------------------------------------------------------------


def _vac_for(force_rms, d, radius=100e-6):
    return math.sqrt(force_rms * 2 * math.sqrt(2) * d / (epsilon_0 * math.pi * radius))


@pytest.mark.parametrize("d, computed, quoted, tol", [(200e-9, 16.26, 15.0, 0.10),
                                                      (45e-9, 72.28, 70.0, 0.10)])
def test_electrostatic_correction_reproduces_quoted_values(d, computed, quoted, tol):
    g = electrostatic_gradient_correction(_vac_for(230e-12, d), d, 100e-6)
    assert g == pytest.approx(math.sqrt(2) * 230e-12 / (100e-6 * d), rel=1e-12)
    assert g == pytest.approx(computed, abs=0.01)
    assert g == pytest.approx(quoted, rel=tol)


def test_electrostatic_correction_edges():
    assert electrostatic_gradient_correction(0.0, 1e-7, 1e-4) == 0.0
    with pytest.raises(ValueError):
        electrostatic_gradient_correction(0.1, 0.0, 1e-4)
    with pytest.raises(ValueError):
        electrostatic_gradient_correction(0.1, 5e-9, 1e-4, modulation_amplitude=7e-9)


@pytest.mark.parametrize("d, amp", [(45e-9, 7.2e-9), (100e-9, 8e-9), (60e-9, 1e-12)])
def test_dithered_electrostatic_matches_cycle_average(d, amp):
    # in-phase omega2 response: <2 sin^2 th * G(d - A cos th)> with G = eps0 pi V^2/(2 x^2)
    v = 0.15
    oracle = integrate.quad(lambda th: 2 * math.sin(th) ** 2 * epsilon_0 * math.pi * v**2
                            / (2 * (d - amp * math.cos(th)) ** 2), 0, 2 * math.pi,
                            epsabs=0, epsrel=1e-13)[0] / (2 * math.pi)
    got = electrostatic_gradient_correction(v, d, 1e-4, modulation_amplitude=amp)
    assert got == pytest.approx(oracle, rel=1e-9)


def test_gradient_from_omega2():
    assert gradient_from_omega2(0.0, 1e6, 7.2e-9, 2.0, 1e-4) == 0.0
    g = gradient_from_omega2(1e-3, 1e6, 7.2e-9, 2.0, 1e-4, transfer_correction=1.00194575)
    assert g == pytest.approx(2.0 * 1e-9 / (7.2e-9 * 1e-4 * 1.00194575), rel=1e-14)
    assert gradient_from_omega2(2e-3, 1e6, 7.2e-9, 2.0, 1e-4, 1.00194575) == pytest.approx(2 * g)
    gb = gradient_from_omega2(1e-3, 1e6, 7.2e-9, 2.0, 1e-4, backaction=True)
    assert gb == pytest.approx(2.0 * 1e-9 / (8.2e-9 * 1e-4))
    with pytest.raises(ValueError):
        gradient_from_omega2(1e-3, 0.0, 7.2e-9, 2.0, 1e-4)


def test_finite_amplitude_exact_on_power_law():
    d = np.geomspace(40e-9, 300e-9, 60)
    g = ideal_gradient(d)
    model = fit_log_quadratic(d, g)
    assert model is not None
    np.testing.assert_allclose(model(d), g, rtol=1e-10)
    corr = finite_amplitude_correction(d, g, 7.2e-9, model)
    for di, ci in zip(d[::15], corr[::15]):
        oracle = integrate.quad(lambda th: 2 * math.sin(th) ** 2 * ideal_gradient(di - 7.2e-9 * math.cos(th)),
                                0, 2 * math.pi, epsrel=1e-12)[0] / (2 * math.pi) - ideal_gradient(di)
        assert ci == pytest.approx(oracle, rel=1e-8)
    # leading order (A^2/8) G''
    g2 = 20 * ideal_gradient(d) / d**2
    np.testing.assert_allclose(corr[-5:], 7.2e-9**2 / 8 * g2[-5:], rtol=0.02)


def test_force_integral_of_gradient_model():
    d = np.geomspace(40e-9, 300e-9, 60)
    model = fit_log_quadratic(d, ideal_gradient(d))
    for x in (30e-9, 100e-9, 250e-9, 2e-6):
        # G ~ d^-4 integrates to G(x) x / 3
        oracle = ideal_gradient(x) * x / 3
        assert model.force_over_radius(np.array([x]))[0] == pytest.approx(oracle, rel=1e-8)


def test_static_deflection():
    d = np.array([60e-9, 150e-9])
    v = np.array([0.12, 0.2])
    x_es = static_deflection(d, v, 1e-4, 2.0)
    np.testing.assert_allclose(x_es, epsilon_0 * np.pi * 1e-4 * v**2 / (2 * d) / 2.0, rtol=1e-12)
    model = fit_log_quadratic(np.geomspace(40e-9, 300e-9, 60), ideal_gradient(np.geomspace(40e-9, 300e-9, 60)))
    x = static_deflection(d, v, 1e-4, 2.0, model)
    cas = 1e-4 * ideal_gradient(d) * d / 3 / 2.0
    np.testing.assert_allclose(x - x_es, cas, rtol=1e-6)
    assert np.all(static_deflection(d, v, 1e-4, 2.0, model, 7e-9) > x)


def test_drive_deflection_lifts_electrostatic_response():
    g0 = electrostatic_gradient_correction(0.15, 80e-9, 1e-4, 7.2e-9)
    g1 = electrostatic_gradient_correction(0.15, 80e-9, 1e-4, 7.2e-9, drive_deflection=0.16e-9)
    assert g1 / g0 == pytest.approx(1 + 0.16 / 80, rel=1e-12)


def test_dither_average_matches_quadrature():
    f = lambda x: 1.0 / x**3  # noqa: E731
    got = dither_average(f, np.array([50e-9]), np.array([8e-9]))[0]
    oracle = integrate.quad(lambda th: f(50e-9 - 8e-9 * math.cos(th)), 0, 2 * math.pi,
                            epsrel=1e-13)[0] / (2 * math.pi)
    assert got == pytest.approx(oracle, rel=1e-12)


def test_log_quadratic_fit_ignores_noise_floor():
    rng = np.random.default_rng(1)
    d = np.geomspace(45e-9, 1e-6, 300)
    g = ideal_gradient(d) + 2.0 * rng.standard_normal(d.size)
    model = fit_log_quadratic(d, g)
    assert model.d_hi < 400e-9
    assert model(100e-9) == pytest.approx(ideal_gradient(100e-9), rel=0.02)
    assert fit_log_quadratic(d, rng.standard_normal(d.size)) is None


# --- V0 fit -----------------------------------------------------------------------------


def test_fit_v0_log_exact():
    d = np.geomspace(45e-9, 1e-6, 50)
    fit = fit_v0_log(d, 0.02 * np.log(d) + 0.5)
    assert fit.a == pytest.approx(0.02, abs=1e-10)
    assert fit.b == pytest.approx(0.5, abs=1e-10)
    assert fit.n_points == 50


def test_fit_v0_constant_has_zero_slope():
    rng = np.random.default_rng(5)
    d = np.geomspace(45e-9, 1e-6, 200)
    fit = fit_v0_log(d, 0.3 + 1e-4 * rng.standard_normal(d.size))
    assert abs(fit.a) < 3 * fit.sigma_a
    assert fit.b == pytest.approx(0.3, abs=5 * fit.sigma_b)


def test_fit_v0_effective_samples_widen_covariance():
    rng = np.random.default_rng(2)
    d = np.geomspace(45e-9, 1e-6, 200)
    v = 0.02 * np.log(d) + 0.5 + 1e-4 * rng.standard_normal(d.size)
    f1, f2 = fit_v0_log(d, v), fit_v0_log(d, v, effective_samples=50)
    assert f2.sigma_a == pytest.approx(f1.sigma_a * math.sqrt(198 / 48))
    assert (f2.a, f2.b) == (f1.a, f1.b)


def test_fit_v0_errors():
    with pytest.raises(ValueError):
        fit_v0_log(np.geomspace(1e-7, 1e-6, 5), np.zeros(5))
    with pytest.raises(ValueError):
        fit_v0_log(np.linspace(100e-9, 150e-9, 20), np.zeros(20))


def test_effective_record_count():
    t = np.arange(0, 10, 0.1)
    assert effective_record_count(t, 0.1, 4) == pytest.approx(9.9 / 0.8)
    assert effective_record_count(t[:3], 0.1, 4) <= 3


def test_v0_dither_bias_ordering():
    d = np.geomspace(45e-9, 1e-6, 200)
    v0 = 0.02 * np.log(d) + 0.5
    corr = v0_dither_bias(d, v0, 7.2e-9)
    # ln is concave: the dithered null sits below V0(d), so the correction is positive
    assert np.all(corr > 0)
    assert corr[0] > corr[-1]
    # a stiffer pull at the near end of the cycle shifts the null further
    stiff = v0_dither_bias(d, v0, 7.2e-9, weight=lambda x: 1.0 / (1.0 - 5e-31 / x**4))
    assert stiff[0] > corr[0]


# --- residuals ------------------------------------------------------------------------------


def _theory():
    d = np.geomspace(100e-9, 300e-9, 81)
    return TheoryCurve(d, ideal_gradient(d))


def test_residuals_identical_and_shifted():
    th = _theory()
    d = np.linspace(160e-9, 200e-9, 100)
    st0 = residual_stats(d, th(d), th, 160e-9, 200e-9)
    assert st0.sigma == pytest.approx(0.0, abs=1e-12) and st0.n == 100
    st1 = residual_stats(d, ideal_gradient(d) + 1.5, ideal_gradient, 160e-9, 200e-9)
    assert st1.sigma == pytest.approx(0.0, abs=1e-9)
    assert st1.mean == pytest.approx(1.5, rel=1e-9)


def test_residual_sigma_gaussian():
    rng = np.random.default_rng(11)
    th = _theory()
    n = 1000
    d = rng.uniform(160e-9, 200e-9, n)
    st_ = residual_stats(d, th(d) + 2.5 * rng.standard_normal(n), th, 160e-9, 200e-9)
    assert abs(st_.sigma - 2.5) < 2.5 / math.sqrt(2 * (n - 1))
    assert st_.standard_error == pytest.approx(st_.sigma / math.sqrt(2 * (n - 1)))
    assert st_.counts.sum() == n


def test_sigma_estimator_sampling_spread():
    # spread of sigma-hat over repeated draws matches sigma / sqrt(2 (N - 1))
    rng = np.random.default_rng(4)
    n, trials = 200, 400
    d = np.linspace(160e-9, 200e-9, n)
    zero = lambda x: np.zeros_like(x)  # noqa: E731
    est = np.array([residual_stats(d, 2.5 * rng.standard_normal(n), zero, 160e-9, 200e-9).sigma
                    for _ in range(trials)])
    se = 2.5 / math.sqrt(2 * (n - 1))
    assert abs(est.mean() - 2.5) < 3 * se / math.sqrt(trials) + 2.5 / (4 * n)
    assert est.std(ddof=1) == pytest.approx(se, rel=0.1)


def test_residual_histogram_uses_freedman_diaconis():
    rng = np.random.default_rng(8)
    d = np.linspace(160e-9, 200e-9, 500)
    r = rng.standard_normal(500)
    zero = lambda x: np.zeros_like(x)  # noqa: E731
    st_ = residual_stats(d, r, zero, 160e-9, 200e-9)
    np.testing.assert_allclose(st_.bin_edges, np.histogram_bin_edges(r, bins="fd"))


def test_residual_errors():
    th = _theory()
    d = np.linspace(160e-9, 200e-9, 20)
    with pytest.raises(ValueError):
        residual_stats(d, th(d), th, 160e-9, 200e-9)
    with pytest.raises(ValueError):
        residual_stats(d, th(d), th, 300e-9, 400e-9)
    with pytest.raises(ValueError):
        residual_stats(np.linspace(50e-9, 90e-9, 40), np.ones(40), th, 50e-9, 90e-9)


def test_scan_record_invariants():
    n = 5
    r = ScanRecord(*(np.arange(n, dtype=float) + 1 for _ in range(8)))
    assert len(r) == n and r.as_array().shape == (n, 8)
    assert len(ScanRecord.concatenate([r, r])) == 2 * n
    with pytest.raises(ValueError):
        ScanRecord(*([np.ones(3)] * 7 + [np.ones(4)]))


# --- whole-chain checks on the simulator ---------------------------------------------------


@pytest.fixture(scope="module")
def null_run():
    cfg = load_config(shipped_config_path("reference.json"))
    cfg = cfg.replace(forces=dataclasses.replace(cfg.forces, casimir=None),
                      simulation=dataclasses.replace(cfg.simulation, truth_channels=True))
    prep = prepare_run(cfg)
    out = []
    for i in range(2):
        s = run_scan(cfg, scan_index=i, prepared=prep)
        out.append((s, analyze_scan(s, cfg, prep.reference_phase, prep.ferrule.wavelength)))
    return cfg, out


def test_null_experiment_zero_mean(null_run):
    cfg, runs = null_run
    g, neff = [], 0.0
    for _, an in runs:
        r = an.record
        sel = (r.d >= 50e-9) & (r.d <= 200e-9)
        g.append(r.grad_casimir[sel])
        t = an.t[sel]
        # approach and retract are separate stretches of record
        for seg in np.split(t, np.flatnonzero(np.diff(t) > 0.2) + 1):
            neff += effective_record_count(seg, cfg.lockins.omega2.rc_time)
    g = np.concatenate(g)
    se = g.std(ddof=1) / math.sqrt(neff)
    assert abs(g.mean()) < 2 * se


def _slow_truth(stream, t):
    from scipy import signal

    fs = stream.sampling_rate
    sos = signal.butter(4, 20, fs=fs, output="sos")
    return signal.sosfiltfilt(sos, stream.d_true)[np.round((t - stream.t[0]) * fs).astype(int)]


def test_separation_tracks_truth_without_casimir(null_run):
    _, runs = null_run
    for s, an in runs:
        err = an.record.d - _slow_truth(s, an.t)
        assert np.sqrt(np.mean(err**2)) < 1e-9


def test_summary_reports_fit_and_calibration(null_run):
    cfg, runs = null_run
    summ = summarize([an for _, an in runs], cfg)
    assert summ["n_scans"] == 2
    assert summ["v0_fit"]["effective_samples"] < summ["v0_fit"]["n_points"]
    assert len(summ["calibration"]) == 2
    assert "residuals" not in summ
