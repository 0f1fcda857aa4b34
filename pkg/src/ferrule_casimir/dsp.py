"""Lock-in amplifiers, servo controllers and the contact phase alignment.

Amplitude convention: a tone ``A cos(2 pi f t + phi)`` demodulated at its own
frequency gives ``X -> A cos(phi - phase_ref)`` and ``Y -> A sin(phi - phase_ref)``
(amplitude, not rms).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal
from scipy.interpolate import CubicSpline


class NonUniformSamplingError(ValueError):
    pass


class ServoSaturationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LockInConfig:
    reference_frequency: float
    reference_phase: float = 0.0
    rc_time: float = 0.1
    filter_stages: int = 4

    def __post_init__(self):
        if not self.reference_frequency > 0:
            raise ValueError("reference_frequency must be > 0")
        if not self.rc_time > 0:
            raise ValueError("rc_time must be > 0")
        if int(self.filter_stages) < 1:
            raise ValueError("filter_stages must be >= 1")

    @property
    def rolloff_db_per_octave(self):
        return 6.0 * self.filter_stages

    def with_phase(self, phase):
        return LockInConfig(self.reference_frequency, phase, self.rc_time, self.filter_stages)


def rc_cascade_response(delta_f, rc_time, stages=4):
    """Magnitude of the cascaded RC low-pass at offset frequency ``delta_f``."""
    return np.abs(1.0 / (1.0 + 1j * 2 * np.pi * np.asarray(delta_f) * rc_time)) ** stages


class LockIn:
    """Streaming lock-in; one ``update`` per input sample.

    Each filter stage uses the exact exponential update
    ``y <- y + (1 - exp(-dt/rc)) (u - y)``.
    """

    def __init__(self, config: LockInConfig, dt: float):
        if not dt > 0:
            raise ValueError("dt must be > 0")
        self.config = config
        self.dt = dt
        self.alpha = -math.expm1(-dt / config.rc_time)
        self.sx = np.zeros(config.filter_stages)
        self.sy = np.zeros(config.filter_stages)
        self.n = 0

    def update(self, sample):
        c = self.config
        arg = 2 * math.pi * c.reference_frequency * self.n * self.dt + c.reference_phase
        ux = 2.0 * sample * math.cos(arg)
        uy = -2.0 * sample * math.sin(arg)
        a = self.alpha
        for k in range(c.filter_stages):
            self.sx[k] += a * (ux - self.sx[k])
            self.sy[k] += a * (uy - self.sy[k])
            ux, uy = self.sx[k], self.sy[k]
        self.n += 1
        return ux, uy

    @property
    def output(self):
        return self.sx[-1], self.sy[-1]


def _check_uniform(t):
    t = np.asarray(t, dtype=float)
    if t.size < 2:
        raise NonUniformSamplingError("need at least two samples")
    dt = np.diff(t)
    step = (t[-1] - t[0]) / (t.size - 1)
    if not step > 0 or np.max(np.abs(dt - step)) > 1e-6 * step:
        raise NonUniformSamplingError("time base is not uniform")
    return step


def rc_cascade(u, dt, rc_time, stages):
    """Apply ``stages`` first-order RC sections (zero initial state)."""
    a = -math.expm1(-dt / rc_time)
    b, den = [a], [1.0, -(1.0 - a)]
    y = np.asarray(u, dtype=float)
    for _ in range(stages):
        y = signal.lfilter(b, den, y)
    return y


def lockin_process(samples, config: LockInConfig, t=None, dt=None):
    """Demodulate a uniformly sampled stream; returns full-rate ``(X, Y)``.

    Pass either the time stamps ``t`` (checked for uniformity) or ``dt``.
    """
    samples = np.asarray(samples, dtype=float)
    if t is not None:
        t = np.asarray(t, dtype=float)
        if t.shape != samples.shape:
            raise ValueError("t and samples differ in length")
        dt = _check_uniform(t)
        n = np.arange(samples.size)
        t0 = t[0]
    elif dt is not None:
        n = np.arange(samples.size)
        t0 = 0.0
    else:
        raise ValueError("need t or dt")
    arg = (2 * np.pi * config.reference_frequency * (t0 + n * dt)) + config.reference_phase
    x = rc_cascade(2.0 * samples * np.cos(arg), dt, config.rc_time, config.filter_stages)
    y = rc_cascade(-2.0 * samples * np.sin(arg), dt, config.rc_time, config.filter_stages)
    return x, y


def compensate_filter_delay(t, y, rc_time, stages=4, window=2.0):
    """Undo the smoothing of a slowly varying lock-in output.

    The cascade's impulse response is a gamma density with mean ``n rc``,
    variance ``n rc^2`` and third cumulant ``2 n rc^3``; the output is
    shifted by the mean and corrected with the second and third derivative
    terms (derivatives by Savitzky-Golay over ``window`` seconds). Samples
    whose shifted time falls beyond the record are NaN.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    dt = _check_uniform(t)
    mean = stages * rc_time
    var = stages * rc_time**2
    k3 = 2.0 * stages * rc_time**3
    npts = max(7, int(round(window / dt)) | 1)
    if npts > y.size:
        npts = y.size if y.size % 2 else y.size - 1
    order = min(5, npts - 2)
    y2 = signal.savgol_filter(y, npts, order, deriv=2, delta=dt, mode="interp")
    y3 = signal.savgol_filter(y, npts, order, deriv=3, delta=dt, mode="interp")
    corrected = y - 0.5 * var * y2 + k3 / 6.0 * y3
    ts = t + mean
    out = np.full_like(y, np.nan)
    ok = ts <= t[-1]
    out[ok] = CubicSpline(t, corrected)(ts[ok])
    return out


def decimate_indices(n_samples, fs, out_rate):
    """Indices picking every ``fs/out_rate``-th sample (rate ratio must be integral)."""
    ratio = fs / out_rate
    step = int(round(ratio))
    if abs(ratio - step) > 1e-9 * ratio or step < 1:
        raise ValueError("sampling rate must be an integer multiple of the output rate")
    return np.arange(step - 1, n_samples, step)


@dataclass
class ServoState:
    """Integrator state with output clamping.

    ``gain`` is in output units per input unit per second (V0 servo) or in
    1/s on the relative force error (amplitude servo).
    """

    integrator_value: float = 0.0
    gain: float = 1.0
    enabled: bool = True
    lower: float = -math.inf
    upper: float = math.inf
    saturated: bool = False

    def _clamp(self, v):
        if v <= self.lower:
            self.saturated = True
            return self.lower
        if v >= self.upper:
            self.saturated = True
            return self.upper
        return v


def v0_servo_update(x_omega1, state: ServoState, dt: float) -> float:
    """Integral step ``V_dc <- V_dc - g X dt``; returns the new DC bias.

    In closed loop the omega1 force ``~ V_AC (V0 + V_dc)`` is nulled, so
    ``V_dc -> -V0``. A wrong-sign gain runs into a clamp and sets
    ``state.saturated``.
    """
    if state.enabled:
        state.integrator_value = state._clamp(state.integrator_value - state.gain * x_omega1 * dt)
    return state.integrator_value


def implied_force_rms(s_2w1, beta, radius):
    """2 omega1 force rms implied by the calibrated lock-in signal.

    With ``d = beta V_AC^2 / S`` the rms ``eps0 pi R V_AC^2 / (2 sqrt2 d)``
    becomes ``eps0 pi R S / (2 sqrt2 beta)``.
    """
    from scipy.constants import epsilon_0

    return epsilon_0 * math.pi * radius * s_2w1 / (2.0 * math.sqrt(2.0) * beta)


def amplitude_servo_update(s_2w1, target_force_rms, state: ServoState, dt, beta, radius):
    """Integrate ln(V_AC) on the relative force error; returns the new V_AC.

    ``gain`` (1/s) is the inverse closed-loop time constant on a static
    plant, independent of separation.
    """
    if not target_force_rms > 0:
        raise ValueError("target force must be > 0")
    if state.enabled:
        f = implied_force_rms(s_2w1, beta, radius)
        err = 1.0 - f / target_force_rms
        v = state.integrator_value * math.exp(0.5 * state.gain * err * dt)
        state.integrator_value = state._clamp(v)
    return state.integrator_value


def steady_vac(target_force_rms, d, radius):
    """V_AC giving the target 2 omega1 force rms at separation d."""
    from scipy.constants import epsilon_0

    return math.sqrt(target_force_rms * 2 * math.sqrt(2) * d / (epsilon_0 * math.pi * radius))


class NoSignalError(ValueError):
    pass


def align_phase_at_contact(t, pd, omega2, rc_time=0.1, stages=4, settle=None,
                           dc_offset=None, min_amplitude=0.0):
    """Reference phase putting the contact motion entirely in X (X > 0, Y = 0).

    ``t, pd`` is a photodiode stream recorded with the surfaces in contact.
    Outputs before ``settle`` seconds (default 10 rc) are discarded.
    """
    t = np.asarray(t, dtype=float)
    pd = np.asarray(pd, dtype=float)
    if dc_offset is None:
        dc_offset = float(np.mean(pd))
    x, y = lockin_process(pd - dc_offset, LockInConfig(omega2, 0.0, rc_time, stages), t=t)
    if settle is None:
        settle = 10 * rc_time
    sel = t - t[0] >= settle
    if not np.any(sel):
        raise ValueError("contact stream shorter than the settling time")
    xm, ym = float(np.mean(x[sel])), float(np.mean(y[sel]))
    amp = math.hypot(xm, ym)
    # standard error of the mean over roughly independent filter windows
    n_eff = max(1.0, (t[sel][-1] - t[sel][0]) / (2 * stages * rc_time))
    stderr = math.hypot(np.std(x[sel]), np.std(y[sel])) / math.sqrt(n_eff)
    if amp <= max(min_amplitude, 5 * stderr, 1e-300):
        raise NoSignalError("no omega2 power in the contact stream")
    return math.atan2(ym, xm)
