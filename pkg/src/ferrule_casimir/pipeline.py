"""Analysis chain: raw photodiode streams to separation, V0(d) and F'/R.

The chain per scan:

1. demodulate the ferrule photodiode at omega1, 2 omega1 and omega2 and
   undo the lock-in group delay;
2. count bare-fiber fringes for the relative stage displacement;
3. fit ``S_2w1 = beta V_AC^2 / (d_offset - z)`` for the absolute separation;
4. turn the in-phase omega2 signal into the total force gradient and
   subtract the electrostatic part set by the calibration voltage.

Three small systematics of the closed-loop measurement are corrected by
default (each can be switched off): the cantilever deflection adding to the
dither, the finite dither amplitude, and the readout gain change caused by
the force gradient stiffening the cantilever.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, signal, special
from scipy.constants import epsilon_0

from .dsp import (LockInConfig, compensate_filter_delay, decimate_indices, lockin_process,
                  rc_cascade)
from .lifshitz import TheoryCurve


class CalibrationError(RuntimeError):
    pass


class FringeUnwrapError(RuntimeError):
    """Phase moved by more than pi between consecutive samples."""


# --- fringe counting ---------------------------------------------------------


def count_fringes(pd_barefiber, wavelength, midpoint=None, visibility=None,
                  fold_threshold=0.98):
    """Relative plate displacement from a two-beam fringe signal.

    The signal is normalized to ``c = (W - W0) / (W0 V)`` and the phase
    ``acos(c)`` is unwrapped sample by sample: away from the fringe extrema
    the branch nearest to a linear prediction is kept, and inside the fold
    zones (``|c| > fold_threshold``) the motion is assumed to carry on
    through the extremum. One full fringe is exactly ``wavelength / 2``.

    ``midpoint``/``visibility`` default to the signal's own mid-range and
    half-swing, which needs at least one full fringe in the record.
    The result starts at 0 and is positive along the initial motion.
    """
    w = np.asarray(pd_barefiber, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise ValueError("need a 1-D series of at least two samples")
    if not wavelength > 0:
        raise ValueError("wavelength must be > 0")
    if midpoint is None or visibility is None:
        lo, hi = float(np.min(w)), float(np.max(w))
        midpoint = 0.5 * (hi + lo) if midpoint is None else midpoint
        if visibility is None:
            visibility = 0.5 * (hi - lo) / midpoint
    if not visibility > 0:
        return np.zeros_like(w)
    c = np.clip((w - midpoint) / (midpoint * visibility), -1.0, 1.0)
    base = np.arccos(c)
    if np.all(base == base[0]):
        return np.zeros_like(w)

    phase = np.empty_like(base)
    phase[0] = base[0]
    prev_step = 0.0
    for k in range(1, base.size):
        pred = phase[k - 1] + prev_step
        m = np.floor(pred / (2 * np.pi))
        cands = np.array([2 * np.pi * m + base[k], 2 * np.pi * m - base[k],
                          2 * np.pi * (m + 1) - base[k], 2 * np.pi * (m - 1) + base[k],
                          2 * np.pi * (m + 1) + base[k]])
        if abs(c[k]) > fold_threshold and prev_step != 0.0:
            # fold zone: keep going through the extremum
            dv = (cands - phase[k - 1]) * np.sign(prev_step)
            ahead = cands[(dv >= 0.0) & (dv < np.pi)]
            if ahead.size:
                cands = ahead
        best = cands[np.argmin(np.abs(cands - pred))]
        step = best - phase[k - 1]
        if abs(step) > np.pi:
            raise FringeUnwrapError(f"phase jump of {step:.3g} rad at sample {k}")
        phase[k] = best
        if step != 0.0:
            prev_step = step
    disp = (phase - phase[0]) * wavelength / (4 * np.pi)
    nz = np.flatnonzero(np.abs(disp) > 1e-3 * wavelength)
    if nz.size and disp[nz[0]] < 0:
        disp = -disp
    return disp


def stage_displacement(t, pd_barefiber, wavelength, midpoint, visibility, dither_amplitude,
                       lowpass, out_rate, origin_span=1.0):
    """Fringe-counted slow stage motion sampled at ``out_rate``.

    A zero-phase low-pass strips the omega2 dither; the fringe contrast left
    after averaging over the dither is ``V J0(4 pi a / lambda)``. Samples
    within ``5 / lowpass`` of either end carry filter edge effects and are
    NaN; the origin (stage position at ``t[0]``) is extrapolated from a
    quadratic fit over the following ``origin_span`` seconds.
    """
    t = np.asarray(t, dtype=float)
    fs = (t.size - 1) / (t[-1] - t[0])
    sos = signal.butter(4, lowpass, fs=fs, output="sos")
    w = signal.sosfiltfilt(sos, np.asarray(pd_barefiber, dtype=float))
    idx = decimate_indices(t.size, fs, out_rate)
    td = t[idx]
    margin = 5.0 / lowpass
    inner = (td - t[0] >= margin) & (t[-1] - td >= margin)
    if np.count_nonzero(inner) < 3:
        raise ValueError("record too short for the fringe low-pass")
    v_eff = visibility * special.j0(4 * np.pi * dither_amplitude / wavelength)
    z = np.full(td.size, np.nan)
    z[inner] = count_fringes(w[idx][inner], wavelength, midpoint, v_eff)
    head = inner & (td - t[0] <= margin + origin_span)
    if np.count_nonzero(head) >= 3:
        coef = np.polyfit(td[head] - t[0], z[head], 2)
        z -= coef[-1]
    # positive along the initial motion, as for count_fringes
    return td, z


# --- calibration -------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationResult:
    beta: float
    d_offset: float
    fit_residual_rms: float
    n_points: int = 0
    covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.beta > 0 or not self.d_offset > 0:
            raise CalibrationError("calibration produced non-positive beta or d_offset")


def _mod_sep(gap, amp):
    return np.sqrt(gap**2 - amp**2)


def calibrate_beta(s_2w1, v_ac, displacement, modulation_amplitude=0.0,
                   xtol=1e-10, max_iterations=200) -> CalibrationResult:
    """Joint fit of ``beta`` and ``d_offset`` in ``S = beta V^2 / (d_offset - z)``.

    With a dither of amplitude ``A`` on the separation the model becomes
    ``S = beta V^2 / sqrt((d_offset - z)^2 - A^2)``. Levenberg-Marquardt on
    log residuals, stopping at a relative step of ``xtol`` or
    ``max_iterations`` iterations.
    """
    s = np.asarray(s_2w1, dtype=float)
    v2 = np.asarray(v_ac, dtype=float) ** 2
    z = np.asarray(displacement, dtype=float)
    amp = np.broadcast_to(np.asarray(modulation_amplitude, dtype=float), s.shape)
    if not (s.shape == v2.shape == z.shape):
        raise ValueError("series differ in length")
    ok = np.isfinite(s) & np.isfinite(v2) & np.isfinite(z) & (s > 0) & (v2 > 0)
    s, v2, z, amp = s[ok], v2[ok], z[ok], amp[ok]
    if s.size < 20:
        raise CalibrationError(f"need at least 20 points, got {s.size}")
    # linear start: V^2 / S = (d_offset - z) / beta
    q = v2 / s
    slope, icpt = np.polyfit(z, q, 1)
    if not slope < 0:
        raise CalibrationError("S does not grow as the stage advances")
    beta0 = -1.0 / slope
    d0 = icpt * beta0
    gap = d0 - z
    if np.min(gap) <= 0 or np.max(gap) / np.min(gap) < 2:
        raise CalibrationError("separation span below a factor 2")
    scale = float(np.median(gap))

    def resid(p):
        g = p[1] * scale - z
        g = np.where(g > amp, g, np.nan)
        r = np.log(np.exp(p[0]) * v2 / _mod_sep(g, amp)) - np.log(s)
        return np.where(np.isfinite(r), r, 1e3)

    res = optimize.least_squares(resid, [math.log(beta0), d0 / scale], method="lm",
                                 xtol=xtol, ftol=1e-15, gtol=1e-15,
                                 max_nfev=max_iterations * 3)
    if not res.success and res.status <= 0:
        raise CalibrationError(f"fit did not converge: {res.message}")
    beta = math.exp(res.x[0])
    d_offset = res.x[1] * scale
    if not d_offset > 0:
        raise CalibrationError("negative fitted d_offset")
    r = res.fun
    dof = max(1, r.size - 2)
    cov = None
    try:
        jtj_inv = np.linalg.inv(res.jac.T @ res.jac)
        # (ln beta, d_offset / scale) -> (beta, d_offset)
        jac = np.diag([beta, scale])
        cov = jac @ jtj_inv @ jac * (r @ r / dof)
    except np.linalg.LinAlgError:
        pass
    return CalibrationResult(beta, d_offset, float(np.sqrt(np.mean(np.expm1(r) ** 2))),
                             int(r.size), cov)


def separation_from_calibration(s_2w1, v_ac, cal: CalibrationResult, modulation_amplitude=0.0):
    """``d = beta V_AC^2 / S``, or ``sqrt((beta V^2 / S)^2 + A^2)`` under a dither."""
    s = np.asarray(s_2w1, dtype=float)
    if np.any(~(s > 0)):
        raise ValueError("S_2w1 must be > 0")
    q = cal.beta * np.asarray(v_ac, dtype=float) ** 2 / s
    amp = np.asarray(modulation_amplitude, dtype=float)
    d = np.sqrt(q**2 + amp**2) if np.any(amp != 0) else q
    return float(d) if np.ndim(d) == 0 else d


# --- gradients -----------------------------------------------------------------


def electrostatic_gradient_correction(v_ac, d, radius, modulation_amplitude=0.0,
                                      drive_deflection=0.0):
    """Gradient over radius of the mean electrostatic force, ``eps0 pi V_AC^2 / (2 d^2)``.

    With a dither amplitude ``A`` the in-phase omega2 response to the
    ``1/d`` force is ``(eps0 pi V^2 / A^2) (d / sqrt(d^2 - A^2) - 1)``,
    which tends to the plain gradient as ``A -> 0``.

    ``drive_deflection`` is the cantilever's 2 omega1 amplitude ``xi``. The
    separation then swings at 2 omega1 in step with the force, and the
    second-order cross term lifts the omega2 response by ``1 + xi / d``.
    """
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("separation must be > 0")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    v2 = np.asarray(v_ac, dtype=float) ** 2
    amp = np.asarray(modulation_amplitude, dtype=float)
    plain = epsilon_0 * np.pi * v2 / (2 * d**2)
    if np.all(amp == 0):
        out = plain
    else:
        if np.any(amp >= d):
            raise ValueError("dither amplitude must stay below the separation")
        e2 = (amp / d) ** 2
        # d/sqrt(d^2-A^2) - 1 = e2 / (sqrt(1-e2) (1 + sqrt(1-e2)))
        root = np.sqrt(1 - e2)
        safe = np.where(amp == 0, 1.0, amp)
        exact = epsilon_0 * np.pi * v2 / safe**2 * e2 / (root * (1 + root))
        out = np.where(amp == 0, plain, exact)
    out = out * (1.0 + np.asarray(drive_deflection, dtype=float) / d)
    return float(out) if np.ndim(out) == 0 else out


def gradient_from_omega2(x_w2, sensitivity, amplitude, spring_constant, radius,
                         transfer_correction=1.0, backaction=False):
    """Force gradient over radius from the in-phase omega2 signal.

    ``F'/R = k x / (a R H)`` with ``x = X / sensitivity``. With
    ``backaction`` the separation modulation is ``a + x`` rather than ``a``
    (the cantilever follows the plate), giving ``k x / (H (a + x) R)``.
    """
    if not sensitivity > 0:
        raise ValueError("sensitivity must be > 0")
    if not amplitude > 0 or not spring_constant > 0 or not radius > 0:
        raise ValueError("amplitude, spring constant and radius must be > 0")
    x = np.asarray(x_w2, dtype=float) / sensitivity
    mod = amplitude + x if backaction else amplitude
    g = spring_constant * x / (transfer_correction * mod * radius)
    return float(g) if np.ndim(g) == 0 else g


@dataclass(frozen=True)
class LogQuadraticFit:
    """Smooth model ``ln G = p(ln d)`` fitted on ``[d_lo, d_hi]``.

    Outside that range it continues as a power law with the edge exponent.
    """

    poly: np.polynomial.Polynomial
    d_lo: float
    d_hi: float

    def _parts(self, d):
        u = np.log(np.asarray(d, dtype=float))
        ue = np.clip(u, math.log(self.d_lo), math.log(self.d_hi))
        dp = self.poly.deriv(1)(ue)
        ddp = np.where(u == ue, self.poly.deriv(2)(ue), 0.0)
        lng = self.poly(ue) + dp * (u - ue)
        return lng, dp, ddp

    def __call__(self, d):
        return np.exp(self._parts(d)[0])

    def second_derivative(self, d):
        lng, dp, ddp = self._parts(d)
        return np.exp(lng) / np.asarray(d, dtype=float) ** 2 * (dp**2 + ddp - dp)

    def force_over_radius(self, d, n_nodes=48):
        """``integral_d^inf G(x) dx``; the tail past ``d_hi`` is a power law."""
        d = np.asarray(d, dtype=float)
        s_hi = float(self.poly.deriv(1)(math.log(self.d_hi)))
        if not s_hi < -1:
            raise ValueError("gradient falls off too slowly to integrate")
        tail = lambda x: self(x) * x / (-s_hi - 1)  # noqa: E731
        u_hi = math.log(self.d_hi)
        u_lo = np.minimum(np.log(d), u_hi)
        xg, wg = np.polynomial.legendre.leggauss(n_nodes)
        half = 0.5 * (u_hi - u_lo)[..., None]
        u = 0.5 * (u_hi + u_lo)[..., None] + half * xg
        body = np.sum(wg * half * self(np.exp(u)) * np.exp(u), axis=-1)
        return np.where(d >= self.d_hi, tail(d), body + tail(self.d_hi))


def _noise_level(g):
    """Robust white-noise estimate from first differences (trend-insensitive)."""
    dg = np.diff(g[np.isfinite(g)])
    if dg.size < 5:
        return 0.0
    return float(np.median(np.abs(dg - np.median(dg))) / 0.6745 / math.sqrt(2))


def static_deflection(d, v_ac, radius, spring_constant, model=None, amplitude=0.0):
    """Slow cantilever deflection toward the plate, ``F / k``.

    ``F`` is the cycle-averaged electrostatic pull ``eps0 pi R V_AC^2 / (2 d)``
    plus, when a gradient model is given, the Casimir force
    ``R integral_d^inf G``; both are averaged over the dither.
    """
    d = np.asarray(d, dtype=float)
    v2 = (np.asarray(v_ac, dtype=float) ** 2)[..., None]
    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), d.shape)

    def f_over_r(x):
        f = epsilon_0 * np.pi * v2 / (2 * x)
        if model is not None:
            f = f + model.force_over_radius(x)
        return f

    return radius * dither_average(f_over_r, d, amp) / spring_constant


def fit_log_quadratic(d, grad, min_points=10, snr=10.0):
    """Quadratic fit of ``ln G`` against ``ln d`` over points clear of the noise.

    Returns None when fewer than ``min_points`` points exceed ``snr`` times
    the noise level or they span too little of ``ln d``.
    """
    d = np.asarray(d, dtype=float)
    g = np.asarray(grad, dtype=float)
    noise = _noise_level(g)
    use = (g > snr * noise) & (g > 0) & np.isfinite(g) & (d > 0)
    if np.count_nonzero(use) < min_points:
        return None
    u = np.log(d[use])
    if np.ptp(u) < 0.3:
        return None
    p = np.polynomial.Polynomial.fit(u, np.log(g[use]), 2)
    return LogQuadraticFit(p, float(d[use].min()), float(d[use].max()))


def finite_amplitude_correction(d, grad, amplitude, model=None, n_nodes=32):
    """Excess a dither of amplitude ``A`` adds to a gradient read at omega2.

    The in-phase response measures ``<2 sin^2(theta) G(d - A cos(theta))>``
    over the cycle rather than ``G(d)``; to leading order the excess is
    ``(A^2/8) G''``. It is evaluated exactly on the smooth model
    (``fit_log_quadratic`` of ``grad`` unless given); returns zeros when no
    model can be fitted.
    """
    d = np.asarray(d, dtype=float)
    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), d.shape)
    if model is None:
        model = fit_log_quadratic(d, grad)
    if model is None:
        return np.zeros_like(d)
    theta = 2 * np.pi * np.arange(n_nodes) / n_nodes
    w = 2 * np.sin(theta) ** 2
    seen = np.mean(w * model(d[:, None] - amp[:, None] * np.cos(theta)), axis=-1)
    return seen - model(d)


def dither_average(fn, center, amplitude, n_nodes=32):
    """Mean of ``fn(center - amplitude cos(theta))`` over one dither cycle."""
    theta = 2 * np.pi * np.arange(n_nodes) / n_nodes
    c = np.asarray(center, dtype=float)[..., None]
    a = np.asarray(amplitude, dtype=float)[..., None]
    return np.mean(fn(c - a * np.cos(theta)), axis=-1)


# --- V0 fit and residuals --------------------------------------------------------


@dataclass(frozen=True)
class V0Fit:
    a: float
    b: float
    covariance: np.ndarray
    residual_rms: float
    n_points: int

    @property
    def sigma_a(self):
        return math.sqrt(self.covariance[0, 0])

    @property
    def sigma_b(self):
        return math.sqrt(self.covariance[1, 1])


def fit_v0_log(d, v0, effective_samples=None) -> V0Fit:
    """Least-squares ``V0 = a ln(d / 1 m) + b``.

    The covariance is the ordinary one, ``s^2 (X^T X)^-1``. When the points
    are serially correlated (filtered records) pass the number of
    independent samples in ``effective_samples`` to widen it.
    """
    d = np.asarray(d, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if d.shape != v0.shape:
        raise ValueError("series differ in length")
    ok = np.isfinite(d) & np.isfinite(v0) & (d > 0)
    d, v0 = d[ok], v0[ok]
    if d.size < 10:
        raise ValueError("need at least 10 points")
    if d.max() / d.min() < 2:
        raise ValueError("separation span below a factor 2")
    X = np.column_stack([np.log(d), np.ones_like(d)])
    coef, _, rank, _ = np.linalg.lstsq(X, v0, rcond=None)
    if rank < 2:
        raise ValueError("degenerate design matrix")
    r = v0 - X @ coef
    dof = d.size - 2
    s2 = float(r @ r) / max(dof, 1)
    cov = s2 * np.linalg.inv(X.T @ X)
    if effective_samples is not None and 2 < effective_samples < d.size:
        cov = cov * (d.size - 2) / (effective_samples - 2)
    return V0Fit(float(coef[0]), float(coef[1]), cov, float(np.sqrt(np.mean(r**2))), int(d.size))


def v0_dither_bias(d, v0, amplitude, iterations=3, weight=None):
    """Offset between ``V0(d)`` and what the omega1 null reports under a dither.

    The servo zeroes ``<w(d) (V0(d) + V_dc) / d>`` over the dither cycle, so
    the recovered bias is ``<w V0/d> / <w/d>``. ``w`` is the cantilever gain
    at each point of the cycle, ``1 / (1 - H F'(d)/k)``, passed as a callable
    ``weight(d)``; without it ``w = 1``. The shape of ``V0`` is taken from a
    self-consistent log fit; returns the amount to add to ``v0``.
    """
    d = np.asarray(d, dtype=float)
    amp = np.broadcast_to(np.asarray(amplitude, dtype=float), d.shape)
    w = weight if weight is not None else (lambda x: 1.0)
    corr = np.zeros_like(d)
    for _ in range(iterations):
        try:
            fit = fit_v0_log(d, v0 + corr)
        except ValueError:
            return np.zeros_like(d)

        def model(x):
            return fit.a * np.log(x)

        seen = dither_average(lambda x: w(x) * model(x) / x, d, amp) / dither_average(
            lambda x: w(x) / x, d, amp)
        corr = model(d) - seen
    return corr


@dataclass(frozen=True)
class ResidualStats:
    sigma: float
    mean: float
    n: int
    counts: np.ndarray
    bin_edges: np.ndarray
    d_lo: float
    d_hi: float

    @property
    def standard_error(self):
        return self.sigma / math.sqrt(2 * (self.n - 1)) if self.n > 1 else math.inf


def residual_stats(d, grad_casimir, theory, d_lo, d_hi, min_points=30) -> ResidualStats:
    """Sample std of ``measured - theory`` over ``[d_lo, d_hi]``.

    ``theory`` is a :class:`TheoryCurve` (monotone cubic in log-log) or any
    callable of ``d``. Histogram bins follow the Freedman-Diaconis rule.
    """
    d = np.asarray(d, dtype=float)
    g = np.asarray(grad_casimir, dtype=float)
    if d.shape != g.shape:
        raise ValueError("series differ in length")
    if not 0 < d_lo < d_hi:
        raise ValueError("need 0 < d_lo < d_hi")
    sel = (d >= d_lo) & (d <= d_hi) & np.isfinite(g)
    n = int(np.count_nonzero(sel))
    if n == 0:
        raise ValueError("no residuals in the window")
    if n < min_points:
        raise ValueError(f"only {n} residuals in the window, need {min_points}")
    if isinstance(theory, TheoryCurve):
        lo, hi = theory.separations[0], theory.separations[-1]
        if d_lo < lo * (1 - 1e-12) or d_hi > hi * (1 + 1e-12):
            # only the points actually used must be covered
            if d[sel].min() < lo or d[sel].max() > hi:
                raise ValueError("theory curve does not cover the window")
    res = g[sel] - np.asarray(theory(d[sel]), dtype=float)
    sigma = float(np.std(res, ddof=1)) if n > 1 else 0.0
    if sigma == 0.0:
        edges = np.array([res.min() - 0.5, res.max() + 0.5])
        counts = np.array([n])
    else:
        counts, edges = np.histogram(res, bins="fd")
    return ResidualStats(sigma, float(np.mean(res)), n, counts, edges, float(d_lo), float(d_hi))


# --- full scan analysis ------------------------------------------------------------

SCAN_RECORD_HEADER = "d_m,V0_V,S_2w1_V,X_w2_V,Y_w2_V,grad_total,grad_es,grad_casimir"


@dataclass
class ScanRecord:
    d: np.ndarray
    V0: np.ndarray
    S_2w1: np.ndarray
    X_w2: np.ndarray
    Y_w2: np.ndarray
    grad_total: np.ndarray
    grad_electrostatic: np.ndarray
    grad_casimir: np.ndarray
    extra: dict = field(default_factory=dict)

    COLUMNS = ("d", "V0", "S_2w1", "X_w2", "Y_w2", "grad_total", "grad_electrostatic",
               "grad_casimir")

    def __post_init__(self):
        n = {np.asarray(getattr(self, c)).shape for c in self.COLUMNS}
        if len(n) != 1:
            raise ValueError("ScanRecord columns differ in length")

    def __len__(self):
        return self.d.size

    def as_array(self):
        return np.column_stack([getattr(self, c) for c in self.COLUMNS])

    @classmethod
    def concatenate(cls, records):
        records = list(records)
        return cls(*(np.concatenate([getattr(r, c) for r in records]) for c in cls.COLUMNS))


@dataclass
class ScanAnalysis:
    record: ScanRecord
    calibration: CalibrationResult
    t: np.ndarray
    v_ac: np.ndarray
    displacement: np.ndarray
    modulation_amplitude: np.ndarray
    meta: dict = field(default_factory=dict)


def _demodulate(u, t, lockin: LockInConfig, idx, t_dec, window):
    x, y = lockin_process(u, lockin, t=t)
    xc = compensate_filter_delay(t_dec, x[idx], lockin.rc_time, lockin.filter_stages, window)
    yc = compensate_filter_delay(t_dec, y[idx], lockin.rc_time, lockin.filter_stages, window)
    return xc, yc


def analyze_scan(stream, config, reference_phase, wavelength, servo=None) -> ScanAnalysis:
    """Run the analysis chain on one scan.

    ``stream`` is a :class:`~ferrule_casimir.instrument.SampleStream`,
    ``reference_phase`` the lock-in phase (contact phase + pi) and
    ``wavelength`` the laser wavelength the scan was taken at. The servo
    trace (``V_AC``) comes from ``servo`` or ``stream.servo``.
    """
    servo = servo if servo is not None else stream.servo
    if servo is None:
        raise ValueError("servo trace required")
    an = config.analysis
    proto = config.protocol
    cant = config.cantilever
    ferr = config.interferometers.ferrule.with_wavelength(wavelength)
    bare = config.interferometers.barefiber.with_wavelength(wavelength)
    radius = config.forces.sphere_radius
    t = np.asarray(stream.t, dtype=float)
    fs = (t.size - 1) / (t[-1] - t[0])

    idx = decimate_indices(t.size, fs, an.decimation_rate)
    t_dec = t[idx]
    u = np.asarray(stream.pd_ferrule, dtype=float) - ferr.midpoint
    w = an.delay_window
    li1 = config.lockin("omega1", reference_phase)
    li2 = config.lockin("two_omega1", reference_phase)
    liw = config.lockin("omega2", reference_phase)
    li1 = LockInConfig(li1.reference_frequency, reference_phase, an.v0_rc_time,
                       li1.filter_stages)
    s_2w1, _ = _demodulate(u, t, li2, idx, t_dec, w)
    x_w2, y_w2 = _demodulate(u, t, liw, idx, t_dec, w)
    x_w1, _ = _demodulate(u, t, li1, idx, t_dec, w)
    # DC bias seen through the same filter as the omega1 channel
    vdc_lp = rc_cascade(np.asarray(stream.v_applied, dtype=float), 1.0 / fs, li1.rc_time,
                        li1.filter_stages)[idx]
    vdc = compensate_filter_delay(t_dec, vdc_lp, li1.rc_time, li1.filter_stages, w)

    # records at the servo trace times
    step = int(round(an.decimation_rate / config.simulation.record_rate))
    rec = np.arange(step - 1, t_dec.size, step)[: servo.t.size]
    t_rec = t_dec[rec]
    if servo.t.size < rec.size or not np.allclose(servo.t[: rec.size], t_rec, atol=0.5 / fs):
        raise ValueError("servo trace is not aligned with the stream")
    v_ac = np.asarray(servo.v_ac[: rec.size], dtype=float)

    t_z, z_dec = stage_displacement(t, stream.pd_barefiber, wavelength, bare.midpoint,
                                    bare.visibility, proto.stage_mod_amplitude,
                                    an.fringe_lowpass, an.decimation_rate)
    z = z_dec[rec]

    S, X2, Y2, X1, VDC = s_2w1[rec], x_w2[rec], y_w2[rec], x_w1[rec], vdc[rec]
    keep = (t_rec >= an.settle_time) & np.isfinite(z) & np.isfinite(S) & np.isfinite(X2) & np.isfinite(Y2) \
        & np.isfinite(X1) & np.isfinite(VDC) & (S > 0)
    t_rec, v_ac, z, S, X2, Y2, X1, VDC = (a[keep] for a in (t_rec, v_ac, z, S, X2, Y2, X1, VDC))

    sens = ferr.quadrature_sensitivity
    h_w2 = float(cant.transfer(proto.omega2)) if an.transfer_correction else 1.0
    h_1 = float(cant.transfer(proto.omega1))
    h_2 = float(cant.transfer(2 * proto.omega1))
    a = proto.stage_mod_amplitude
    k = cant.spring_constant
    fprime = radius * gradient_from_omega2(X2, sens, a, k, radius, h_w2,
                                           backaction=an.backaction_correction)
    g_meas = fprime / radius
    if an.backaction_correction:
        amp = a + X2 / sens
        gain_ratio = (1.0 - h_1 * fprime / k) / (1.0 - h_2 * fprime / k)
    else:
        amp = np.full_like(S, a)
        gain_ratio = np.ones_like(S)

    # a stiffer cantilever reads a larger 2 omega1 signal: S carries
    # <1/d> / <d (1 - H F'(d)/k)>^-1 over the dither instead of <1/d>
    s_corr = S * (1.0 - h_2 * fprime / k) if an.backaction_correction else S
    # residual DC bias V0 + V_dc left by the omega1 servo, read off the omega1 residual
    bias = X1 * v_ac * h_2 / (4.0 * S * h_1) * gain_ratio
    v_eff = np.sqrt(v_ac**2 + 2 * bias**2)
    model = None
    xhat = np.zeros_like(S)
    for _ in range(4 if an.backaction_correction else 1):
        # the separation also shrinks by the deflection of the cantilever
        z_eff = z + xhat
        cal = _two_stage_calibration(s_corr, v_ac, z_eff, amp, an.calibration_min_separation)
        d_signal = separation_from_calibration(s_corr, v_ac, cal, amp)
        if an.separation_from == "displacement":
            d = cal.d_offset - z_eff
            if np.any(d <= amp):
                raise CalibrationError("calibrated separation below the dither amplitude")
        else:
            d = d_signal
        # a DC bias pulls like an AC drive of amplitude sqrt(2) |bias|
        g_es = electrostatic_gradient_correction(v_eff, d, radius, amp, drive_deflection=S / sens)
        g_cas_meas = g_meas - g_es
        model = None
        if an.finite_amplitude_correction or an.backaction_correction:
            model = fit_log_quadratic(d, g_cas_meas)
            if model is not None:
                # refit on values freed of the dither curvature term
                model = fit_log_quadratic(
                    d, g_cas_meas - finite_amplitude_correction(d, g_cas_meas, amp, model)) or model
        if not an.backaction_correction:
            break
        try:
            xhat = static_deflection(d, v_eff, radius, k, model, amp)
        except ValueError:
            xhat = static_deflection(d, v_eff, radius, k, None, amp)
        if model is None:
            continue
        v2 = v_eff[:, None] ** 2

        def stiff(dd):
            fp = radius * (model(dd) + epsilon_0 * np.pi * v2 / (2 * dd**2))
            return 1.0 / (dd * (1.0 - h_2 * fp / k))

        s_corr = S * dither_average(lambda dd: 1.0 / dd, d, amp) / dither_average(stiff, d, amp)

    g_total = g_meas
    if an.finite_amplitude_correction:
        g_total = g_meas - finite_amplitude_correction(d, g_cas_meas, amp, model)
    g_cas = g_total - g_es

    # V0 = -V_dc + (V0 + V_dc), the bracket read off the omega1 residual
    v0 = -VDC + bias
    if an.v0_dither_correction:
        gain = None
        if an.backaction_correction and model is not None:
            v2 = v_eff[:, None] ** 2

            def gain(dd):
                fp = radius * (model(dd) + epsilon_0 * np.pi * v2 / (2 * dd**2))
                return 1.0 / (1.0 - h_1 * fp / k)

        v0 = v0 + v0_dither_bias(d, v0, amp, weight=gain)
        # V0 also follows the 2 omega1 swing xi of the separation; its cross
        # term with the drive moves the omega1 null by -(xi / 2) dV0/dd
        try:
            slope = fit_v0_log(d, v0).a
        except ValueError:
            slope = 0.0
        v0 = v0 + 0.5 * (S / sens) * slope / d

    record = ScanRecord(d, v0, S, X2, Y2, g_total, g_es, g_cas,
                        extra={"t": t_rec, "V_AC": v_ac, "z": z, "A": amp, "S_corr": s_corr,
                               "d_signal": d_signal, "deflection": xhat})
    return ScanAnalysis(record, cal, t_rec, v_ac, z, amp,
                        meta={"reference_phase": reference_phase, "wavelength": wavelength})


def _two_stage_calibration(s, v_ac, z, amp, min_separation):
    """Fit everything, then refit on the points beyond ``min_separation``."""
    cal0 = calibrate_beta(s, v_ac, z, amp)
    d0 = separation_from_calibration(s, v_ac, cal0, amp)
    far = d0 >= min_separation
    if np.count_nonzero(far) >= 20:
        return calibrate_beta(s[far], v_ac[far], z[far], np.broadcast_to(amp, s.shape)[far])
    return cal0


def theory_for(config, d_lo, d_hi):
    """Theory curve for the configured Casimir stack (None if disabled)."""
    from . import lifshitz
    from .instrument import _is_ideal
    from .lifshitz import LifshitzConfig

    cas = config.forces.casimir
    if cas is None:
        return None
    if isinstance(cas, TheoryCurve):
        return cas
    n = config.analysis.theory_points
    if isinstance(cas, LifshitzConfig) and _is_ideal(cas):
        dd = np.geomspace(d_lo, d_hi, n)
        return TheoryCurve(dd, lifshitz.ideal_gradient(dd), cas)
    return lifshitz.theory_curve(cas, d_lo, d_hi, n)


def effective_record_count(t, rc_time, stages=4):
    """Roughly independent samples in a lock-in record spanning ``t``.

    Neighbouring outputs share the filter memory; one independent value per
    ``2 n rc`` is the usual rule for an ``n``-stage RC cascade.
    """
    t = np.asarray(t, dtype=float)
    t = t[np.isfinite(t)]
    if t.size < 2:
        return float(t.size)
    return min(float(t.size), (t[-1] - t[0]) / (2.0 * stages * rc_time))


def summarize(analyses, config, theory=None) -> dict:
    """Pooled summary over scans: calibrations, V0 fit, residual statistics."""
    pooled = ScanRecord.concatenate(a.record for a in analyses)
    out = {
        "n_scans": len(analyses),
        "n_records": len(pooled),
        "calibration": [{"scan": i, "beta": a.calibration.beta,
                         "d_offset_m": a.calibration.d_offset,
                         "fit_residual_rms": a.calibration.fit_residual_rms,
                         "n_points": a.calibration.n_points}
                        for i, a in enumerate(analyses)],
        "d_range_m": [float(np.min(pooled.d)), float(np.max(pooled.d))],
    }
    try:
        n_eff = sum(effective_record_count(a.t, config.analysis.v0_rc_time,
                                           config.lockins.omega1.filter_stages)
                    for a in analyses)
        fit = fit_v0_log(pooled.d, pooled.V0, effective_samples=n_eff)
        out["v0_fit"] = {"a_V": fit.a, "b_V": fit.b, "sigma_a_V": fit.sigma_a,
                         "sigma_b_V": fit.sigma_b, "residual_rms_V": fit.residual_rms,
                         "n_points": fit.n_points, "effective_samples": n_eff}
    except ValueError as exc:
        out["v0_fit"] = {"error": str(exc)}
    lo, hi = config.analysis.residual_window
    if theory is not None:
        try:
            st = residual_stats(pooled.d, pooled.grad_casimir, theory, lo, hi)
            out["residuals"] = {"window_m": [lo, hi], "sigma_N_per_m2": st.sigma,
                                "mean_N_per_m2": st.mean, "n": st.n}
        except ValueError as exc:
            out["residuals"] = {"window_m": [lo, hi], "error": str(exc)}
    sel = (pooled.d >= lo) & (pooled.d <= hi)
    if np.count_nonzero(sel) > 1:
        g = pooled.grad_casimir[sel]
        out["window_grad_casimir"] = {"mean_N_per_m2": float(np.mean(g)),
                                      "std_N_per_m2": float(np.std(g, ddof=1)),
                                      "n": int(g.size)}
    return out
