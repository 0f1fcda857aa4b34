"""Time-domain model of the ferrule-top apparatus.

Geometry: the plate sits on the piezo stage and approaches the sphere as
the stage displacement ``z`` grows; the cantilever deflection ``x`` is
positive toward the plate. The sphere-plate separation is

    d = d_min + stroke - z(t) - x(t)

so ``d_min`` is the separation at full stage extension with an undeflected
cantilever. The ferrule fiber sees the cantilever gap ``rest_gap - x``; the
bare fiber sees the plate at ``rest_gap - z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy.constants import epsilon_0

from . import lifshitz
from .lifshitz import CasimirTable, LifshitzConfig, TheoryCurve

TUNING_RANGE = (1552.48e-9, 1554.18e-9)


class InstrumentError(RuntimeError):
    pass


class NoQuadratureError(InstrumentError):
    """The laser tuning span holds no quadrature point for this gap."""


class IntegrationError(InstrumentError):
    pass


@dataclass(frozen=True)
class CantileverParams:
    spring_constant: float = 2.0
    resonance_frequency: float = 2700.0
    quality_factor: float = 42.0

    def __post_init__(self):
        for name in ("spring_constant", "resonance_frequency", "quality_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def effective_mass(self):
        return self.spring_constant / (2 * math.pi * self.resonance_frequency) ** 2

    @property
    def damping(self):
        return self.effective_mass * 2 * math.pi * self.resonance_frequency / self.quality_factor

    def transfer(self, f):
        """|H(f)| = 1 / |1 - r^2 + i r / Q| with r = f / f0 (static gain 1)."""
        r = np.asarray(f, dtype=float) / self.resonance_frequency
        return 1.0 / np.sqrt((1 - r**2) ** 2 + (r / self.quality_factor) ** 2)


@dataclass(frozen=True)
class InterferometerParams:
    midpoint: float = 1.0
    visibility: float = 0.5
    wavelength: float = 1553.1e-9
    phase_offset: float = 0.0
    rest_gap: float = 100e-6

    def __post_init__(self):
        if not self.midpoint > 0:
            raise ValueError("midpoint must be > 0")
        if not 0 <= self.visibility <= 1:
            raise ValueError("visibility must be in [0, 1]")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be > 0")
        if not self.rest_gap > 0:
            raise ValueError("rest_gap must be > 0")

    def with_wavelength(self, lam):
        return InterferometerParams(self.midpoint, self.visibility, lam,
                                    self.phase_offset, self.rest_gap)

    @property
    def quadrature_sensitivity(self):
        """|dW/d gap| at quadrature, 4 pi W0 V / lambda (V/m)."""
        return 4 * math.pi * self.midpoint * self.visibility / self.wavelength


@dataclass(frozen=True)
class ScanProtocol:
    half_period: float = 20.0
    stroke: float = 1e-6
    omega1: float = 72.0
    omega2: float = 119.0
    stage_mod_amplitude: float = 7.2e-9
    force_rms_target: float = 230e-12
    sampling_rate: float = 30000.0
    n_scans: int = 10
    piezo_nonlinearity: tuple = (0.0, 1.0)

    def __post_init__(self):
        if not (self.omega1 < self.omega2 < 2 * self.omega1):
            raise ValueError("need omega1 < omega2 < 2 omega1")
        if not self.half_period > 0 or not self.stroke > 0:
            raise ValueError("half_period and stroke must be > 0")
        if self.stage_mod_amplitude < 0 or self.force_rms_target <= 0:
            raise ValueError("invalid modulation amplitude or force target")
        if int(self.n_scans) < 1:
            raise ValueError("n_scans must be >= 1")
        object.__setattr__(self, "piezo_nonlinearity",
                           tuple(float(c) for c in self.piezo_nonlinearity))

    @property
    def scan_duration(self):
        return 2.0 * self.half_period

    @property
    def samples_per_scan(self):
        return int(round(self.scan_duration * self.sampling_rate))


@dataclass(frozen=True)
class ResidualPotential:
    """V0(d) = slope * ln(d / reference) + offset, or a constant."""

    kind: str = "log"
    slope: float = 0.02
    offset: float = 0.5
    reference: float = 1.0

    def __post_init__(self):
        if self.kind not in ("log", "constant"):
            raise ValueError(f"unknown residual potential kind {self.kind!r}")
        if not self.reference > 0:
            raise ValueError("reference must be > 0")

    def __call__(self, d):
        if self.kind == "constant":
            return np.full_like(np.asarray(d, dtype=float), self.offset)
        return self.slope * np.log(np.asarray(d, dtype=float) / self.reference) + self.offset


@dataclass(frozen=True)
class SqueezeFilm:
    viscosity: float = 1.8e-5
    geometry_coefficient: float = 6 * math.pi


@dataclass(frozen=True)
class NoiseModel:
    photodiode_white_noise_density: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.photodiode_white_noise_density < 0:
            raise ValueError("noise density must be >= 0")


@dataclass(frozen=True)
class ForceStack:
    casimir: object = None
    sphere_radius: float = 100e-6
    residual_potential: ResidualPotential = field(default_factory=ResidualPotential)
    squeeze_film: Optional[SqueezeFilm] = None
    noise: NoiseModel = field(default_factory=NoiseModel)
    electrostatic: bool = True

    def __post_init__(self):
        if not self.sphere_radius > 0:
            raise ValueError("sphere_radius must be > 0")
        if self.casimir is not None and not isinstance(self.casimir, (LifshitzConfig, TheoryCurve)):
            raise TypeError("casimir must be a LifshitzConfig, a TheoryCurve or None")


def electrostatic_force(v, d, radius):
    """Attractive sphere-plate force eps0 pi R V^2 / d (N)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("separation must be > 0")
    if not radius > 0:
        raise ValueError("radius must be > 0")
    out = epsilon_0 * math.pi * radius * np.asarray(v, dtype=float) ** 2 / d
    return float(out) if out.ndim == 0 else out


def interferometer_signal(params: InterferometerParams, d_gap):
    """W = W0 [1 + V cos(4 pi d_gap / lambda + phi0)]."""
    d_gap = np.asarray(d_gap, dtype=float)
    if np.any(d_gap <= 0):
        raise ValueError("gap must be > 0")
    w = params.midpoint * (1 + params.visibility * np.cos(
        4 * np.pi * d_gap / params.wavelength + params.phase_offset))
    return float(w) if w.ndim == 0 else w


def interferometer_slope(params: InterferometerParams, d_gap):
    """dW/d(gap) from differentiating the two-beam formula."""
    return -(4 * math.pi * params.midpoint * params.visibility / params.wavelength) * math.sin(
        4 * math.pi * d_gap / params.wavelength + params.phase_offset)


def tune_to_quadrature(params: InterferometerParams, d_gap, tuning_range=TUNING_RANGE):
    """Wavelength in the tuning span that puts ``d_gap`` at a quadrature point.

    Picks the root closest to the current wavelength; the current one is
    returned unchanged if it already sits at quadrature.
    """
    lam0 = params.wavelength
    phase0 = 4 * math.pi * d_gap / lam0 + params.phase_offset
    if abs(math.cos(phase0)) < 1e-12:
        return lam0
    lo, hi = tuning_range
    # phase decreases with wavelength
    ph_hi = 4 * math.pi * d_gap / lo + params.phase_offset
    ph_lo = 4 * math.pi * d_gap / hi + params.phase_offset
    m_lo = math.ceil((ph_lo - math.pi / 2) / math.pi)
    m_hi = math.floor((ph_hi - math.pi / 2) / math.pi)
    if m_hi < m_lo:
        raise NoQuadratureError(
            f"no quadrature point for gap {d_gap:g} m within {lo:g}-{hi:g} m; "
            "a coarse thermal adjustment of the gap is needed")
    best = None
    for m in range(m_lo, m_hi + 1):
        lam = 4 * math.pi * d_gap / (math.pi / 2 + m * math.pi - params.phase_offset)
        if lo <= lam <= hi and (best is None or abs(lam - lam0) < abs(best - lam0)):
            best = lam
    if best is None:
        raise NoQuadratureError("quadrature root fell outside the tuning span")
    return best


def _drive_profile(t, protocol: ScanProtocol):
    period = protocol.scan_duration
    tm = np.mod(t, period)
    u = tm / protocol.half_period - 1.0
    return 1.0 - np.abs(u) ** 3


def piezo_trajectory(t, protocol: ScanProtocol, slow_only=False):
    """Stage displacement: stroke * P(1 - |t/tau - 1|^3) + a cos(2 pi omega2 t).

    ``P`` is the piezo polynomial (identity by default). Valid for
    ``0 <= t <= 2 tau n_scans``.
    """
    t_arr = np.asarray(t, dtype=float)
    t_max = protocol.scan_duration * protocol.n_scans
    if np.any(t_arr < 0) or np.any(t_arr > t_max * (1 + 1e-12)):
        raise ValueError(f"t outside [0, {t_max:g}] s")
    s = _drive_profile(t_arr, protocol)
    poly = np.polynomial.Polynomial(protocol.piezo_nonlinearity)
    z = protocol.stroke * poly(s)
    if not slow_only:
        z = z + protocol.stage_mod_amplitude * np.cos(2 * np.pi * protocol.omega2 * t_arr)
    return float(z) if z.ndim == 0 else z


def squeeze_film_force(d, relative_velocity, params: SqueezeFilm, radius):
    """Hydrodynamic force along the separation coordinate (positive = repulsive).

    ``-c mu R^2 v / d`` with ``v`` the rate of change of the separation:
    it always opposes the relative motion.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("separation must be > 0")
    out = -params.geometry_coefficient * params.viscosity * radius**2 * np.asarray(
        relative_velocity, dtype=float) / d
    return float(out) if out.ndim == 0 else out


# --- simulation kernel -----------------------------------------------------

# float parameter slots
(P_K, P_M, P_C, P_R, P_TAU, P_STROKE, P_F1, P_F2, P_A, P_DMIN, P_CSQ, P_FEXT, P_FDRV,
 P_FDRVF, P_V0KIND, P_V0A, P_V0B, P_V0REF, P_W0F, P_VF, P_KF, P_PHF, P_GAPF, P_W0B, P_VB,
 P_PHB, P_GAPB, P_ALPHA1, P_ALPHA2, P_PH1, P_PH2, P_G0, P_GA, P_BETA, P_FT, P_STGT,
 P_H21, P_VACMIN, P_VACMAX, P_VDCLIM, P_VAC0, P_VDC0, P_ES, P_X0, P_V0INIT, P_SERVO,
 P_LND0, P_DLND) = range(48)
N_PARAMS = 48


@numba.njit(cache=True)
def _casimir_force_over_r(d, lnd0, dlnd, lnf, slope):
    n = lnf.size
    if n == 0:
        return 0.0
    ld = math.log(d)
    s = (ld - lnd0) / dlnd
    if s <= 0.0:
        return math.exp(lnf[0] + slope[0] * (ld - lnd0))
    if s >= n - 1:
        return math.exp(lnf[n - 1] + slope[n - 1] * (ld - (lnd0 + (n - 1) * dlnd)))
    i = int(s)
    u = s - i
    h00 = (1 + 2 * u) * (1 - u) ** 2
    h10 = u * (1 - u) ** 2
    h01 = u * u * (3 - 2 * u)
    h11 = u * u * (u - 1)
    return math.exp(h00 * lnf[i] + h10 * dlnd * slope[i] + h01 * lnf[i + 1]
                    + h11 * dlnd * slope[i + 1])


@numba.njit(cache=True)
def _stage(t, p, poly):
    """Stage displacement and velocity."""
    tau = p[P_TAU]
    period = 2.0 * tau
    tm = t - period * math.floor(t / period)
    u = tm / tau - 1.0
    au = abs(u)
    s = 1.0 - au * au * au
    ds = -3.0 * au * u / tau
    pv = 0.0
    dp = 0.0
    sk = 1.0
    for k in range(poly.size):
        pv += poly[k] * sk
        if k + 1 < poly.size:
            dp += (k + 1) * poly[k + 1] * sk
        sk *= s
    w2 = 2.0 * math.pi * p[P_F2]
    z = p[P_STROKE] * pv + p[P_A] * math.cos(w2 * t)
    zd = p[P_STROKE] * dp * ds - p[P_A] * w2 * math.sin(w2 * t)
    return z, zd


@numba.njit(cache=True)
def _accel(t, x, v, vac, vdc, p, poly, lnf, slope):
    z, zd = _stage(t, p, poly)
    d = p[P_DMIN] + p[P_STROKE] - z - x
    if d <= 0.0:
        return math.nan, d
    f = 0.0
    if lnf.size > 0:
        f += p[P_R] * _casimir_force_over_r(d, p[P_LND0], p[P_DLND], lnf, slope)
    if p[P_ES] != 0.0:
        if p[P_V0KIND] == 0.0:
            v0 = p[P_V0A] * math.log(d / p[P_V0REF]) + p[P_V0B]
        else:
            v0 = p[P_V0B]
        vt = vac * math.cos(2.0 * math.pi * p[P_F1] * t) + vdc + v0
        f += epsilon_0 * math.pi * p[P_R] * vt * vt / d
    if p[P_CSQ] != 0.0:
        ddot = -zd - v
        f += p[P_CSQ] * ddot / d
    f += p[P_FEXT]
    if p[P_FDRV] != 0.0:
        f += p[P_FDRV] * math.cos(2.0 * math.pi * p[P_FDRVF] * t)
    return (f - p[P_C] * v - p[P_K] * x) / p[P_M], d


@numba.njit(cache=True)
def _scan_kernel(p, poly, lnf, slope, noise_f, noise_b, n_out, n_sub, fs, n_rec, stages,
                 out_pdf, out_pdb, out_vapp, out_d, out_x,
                 tr_vdc, tr_vac, tr_s, tr_x1):
    """Closed-loop RK4 integration; returns the contact sample index or -1."""
    h = 1.0 / (fs * n_sub)
    dt_out = 1.0 / fs
    x = p[P_X0]
    v = p[P_V0INIT]
    vac = p[P_VAC0]
    vdc = p[P_VDC0]
    sx1 = np.zeros(stages)
    sx2 = np.zeros(stages)
    servo_on = p[P_SERVO] != 0.0
    kf = p[P_KF]
    rec = 0
    for k in range(n_out):
        t = k * dt_out
        z, zd = _stage(t, p, poly)
        out_pdf[k] = p[P_W0F] * (1.0 + p[P_VF] * math.cos(kf * (p[P_GAPF] - x) + p[P_PHF])) \
            + noise_f[k]
        out_pdb[k] = p[P_W0B] * (1.0 + p[P_VB] * math.cos(kf * (p[P_GAPB] - z) + p[P_PHB])) \
            + noise_b[k]
        out_x[k] = x
        out_d[k] = p[P_DMIN] + p[P_STROKE] - z - x

        # in-loop lock-ins on the AC-coupled photodiode
        u = out_pdf[k] - p[P_W0F]
        arg1 = 2.0 * math.pi * p[P_F1] * t + p[P_PH1]
        arg2 = 4.0 * math.pi * p[P_F1] * t + p[P_PH2]
        u1 = 2.0 * u * math.cos(arg1)
        u2 = 2.0 * u * math.cos(arg2)
        for j in range(stages):
            sx1[j] += p[P_ALPHA1] * (u1 - sx1[j])
            u1 = sx1[j]
            sx2[j] += p[P_ALPHA2] * (u2 - sx2[j])
            u2 = sx2[j]
        x1 = sx1[stages - 1]
        s2 = sx2[stages - 1]
        if servo_on:
            err = x1 * vac * p[P_H21] / (4.0 * p[P_STGT])
            vdc -= p[P_G0] * err * dt_out
            if vdc > p[P_VDCLIM]:
                vdc = p[P_VDCLIM]
            elif vdc < -p[P_VDCLIM]:
                vdc = -p[P_VDCLIM]
            frms = epsilon_0 * math.pi * p[P_R] * s2 / (2.0 * math.sqrt(2.0) * p[P_BETA])
            vac *= math.exp(0.5 * p[P_GA] * (1.0 - frms / p[P_FT]) * dt_out)
            if vac > p[P_VACMAX]:
                vac = p[P_VACMAX]
            elif vac < p[P_VACMIN]:
                vac = p[P_VACMIN]
        out_vapp[k] = vac * math.cos(arg1 - p[P_PH1]) + vdc
        if (k + 1) % n_rec == 0 and rec < tr_vdc.size:
            tr_vdc[rec] = vdc
            tr_vac[rec] = vac
            tr_s[rec] = s2
            tr_x1[rec] = x1
            rec += 1

        for j in range(n_sub):
            ts = t + j * h
            a1, d1 = _accel(ts, x, v, vac, vdc, p, poly, lnf, slope)
            xa = x + 0.5 * h * v
            va = v + 0.5 * h * a1
            a2, d2 = _accel(ts + 0.5 * h, xa, va, vac, vdc, p, poly, lnf, slope)
            xb = x + 0.5 * h * va
            vb = v + 0.5 * h * a2
            a3, d3 = _accel(ts + 0.5 * h, xb, vb, vac, vdc, p, poly, lnf, slope)
            xc = x + h * vb
            vc = v + h * a3
            a4, d4 = _accel(ts + h, xc, vc, vac, vdc, p, poly, lnf, slope)
            if math.isnan(a1 + a2 + a3 + a4):
                return k
            x += h / 6.0 * (v + 2.0 * va + 2.0 * vb + vc)
            v += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            if not (math.isfinite(x) and math.isfinite(v)):
                return -2
    return -1


# --- public simulation API ---------------------------------------------------


@dataclass
class ServoTrace:
    t: np.ndarray
    v_dc: np.ndarray
    v_ac: np.ndarray
    s_2w1: np.ndarray
    x_w1: np.ndarray


@dataclass
class SampleStream:
    t: np.ndarray
    pd_ferrule: np.ndarray
    pd_barefiber: np.ndarray
    v_applied: np.ndarray
    d_true: Optional[np.ndarray] = None
    x_true: Optional[np.ndarray] = None
    servo: Optional[ServoTrace] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.size

    @property
    def sampling_rate(self):
        return (self.t.size - 1) / (self.t[-1] - self.t[0])

    @property
    def contact(self):
        return self.meta.get("contact_time") is not None


@dataclass(frozen=True)
class ForceModel:
    """Tabulated Casimir force used inside the kernel (ln d grid, Hermite)."""

    lnd0: float
    dlnd: float
    ln_force: np.ndarray
    ln_slope: np.ndarray

    @classmethod
    def empty(cls):
        return cls(0.0, 1.0, np.zeros(0), np.zeros(0))

    @classmethod
    def from_table(cls, table: CasimirTable, n_points=None):
        d = table.separations
        ld = np.log(d)
        if not np.allclose(np.diff(ld), ld[1] - ld[0], rtol=1e-9, atol=0):
            raise ValueError("Casimir table must be log-spaced")
        f = table.force_over_radius
        slope = -d * table.gradient_over_radius / f
        return cls(float(ld[0]), float(ld[1] - ld[0]), np.log(f), slope)

    def force_over_radius(self, d):
        return np.array([_casimir_force_over_r(float(v), self.lnd0, self.dlnd,
                                               self.ln_force, self.ln_slope)
                         for v in np.atleast_1d(d)])


def _is_ideal(cfg: LifshitzConfig):
    from .materials import PerfectConductor, Vacuum

    return (cfg.temperature == 0 and isinstance(cfg.material_a, PerfectConductor)
            and isinstance(cfg.material_b, PerfectConductor) and isinstance(cfg.medium, Vacuum))


def build_force_model(casimir, d_lo, d_hi, n_points=120):
    if casimir is None:
        return ForceModel.empty()
    if isinstance(casimir, LifshitzConfig):
        if _is_ideal(casimir):
            # closed form; the solver agrees to 1e-9 but costs seconds per table
            d = np.geomspace(d_lo, d_hi, n_points)
            table = CasimirTable(d, lifshitz.ideal_force(d), lifshitz.ideal_gradient(d))
        else:
            table = lifshitz.casimir_table(casimir, d_lo, d_hi, n_points)
    else:
        table = lifshitz.casimir_table_from_curve(casimir, n_points)
    return ForceModel.from_table(table)


@dataclass(frozen=True)
class SimulationSettings:
    """Knobs of one simulated run that are not apparatus parameters."""

    integration_rate: float = 60000.0
    record_rate: float = 10.0
    min_separation: float = 45e-9
    truth_channels: bool = False
    v0_loop_time: float = 0.1
    amplitude_loop_time: float = 1.5
    vac_limits: tuple = (1e-3, 10.0)
    vdc_limit: float = 5.0
    servos: bool = True
    initial_vdc: float = 0.0
    external_force: float = 0.0
    drive_amplitude: float = 0.0
    drive_frequency: float = 0.0
    initial_deflection: Optional[float] = None  # None: static balance at t = 0
    initial_velocity: float = 0.0


def _static_balance(p, poly, force_model, iterations=200):
    """Deflection with k x = F(d - x) at t = 0, so a scan starts without ringing."""
    x = 0.0
    for _ in range(iterations):
        acc, d = _accel(0.0, x, 0.0, p[P_VAC0], p[P_VDC0], p, poly,
                        force_model.ln_force, force_model.ln_slope)
        if not math.isfinite(acc):
            return 0.0
        step = acc * p[P_M] / p[P_K]
        x += step
        if abs(step) <= 1e-15 * max(abs(x), 1e-18):
            break
    return x


def nominal_beta(cantilever: CantileverParams, ferrule: InterferometerParams, protocol, radius):
    """S_2w1 = beta V_AC^2 / d for the configured readout (quadrature slope)."""
    h2 = float(cantilever.transfer(2 * protocol.omega1))
    return (ferrule.quadrature_sensitivity * h2 * epsilon_0 * math.pi * radius
            / (2.0 * cantilever.spring_constant))


def simulate_scan(cantilever: CantileverParams, ferrule: InterferometerParams,
             barefiber: InterferometerParams, protocol: ScanProtocol, forces: ForceStack,
             lockin_omega1, lockin_2omega1, settings: SimulationSettings = SimulationSettings(),
             force_model: Optional[ForceModel] = None, scan_index: int = 0,
             duration: Optional[float] = None) -> SampleStream:
    """Simulate one back-and-forth scan in closed loop.

    ``lockin_omega1``/``lockin_2omega1`` are :class:`~ferrule_casimir.dsp.LockInConfig`
    whose reference phases must already be aligned. Returns the raw stream
    with servo traces attached; on snap-in the stream is truncated and
    ``meta['contact_time']`` is set.
    """
    fs = protocol.sampling_rate
    n_sub = int(round(settings.integration_rate / fs))
    if n_sub < 1 or abs(n_sub * fs - settings.integration_rate) > 1e-6 * fs:
        raise ValueError("integration_rate must be an integer multiple of sampling_rate")
    if fs <= 10 * cantilever.resonance_frequency:
        raise ValueError("sampling_rate must exceed 10 x resonance frequency")
    if duration is None:
        duration = protocol.scan_duration
    n_out = int(round(duration * fs))
    n_rec = int(round(fs / settings.record_rate))
    if abs(n_rec * settings.record_rate - fs) > 1e-6 * fs:
        raise ValueError("sampling_rate must be an integer multiple of record_rate")
    if lockin_omega1.filter_stages != lockin_2omega1.filter_stages:
        raise ValueError("in-loop lock-ins must share the filter order")

    radius = forces.sphere_radius
    if force_model is None:
        d_top = settings.min_separation + protocol.stroke + 2 * protocol.stage_mod_amplitude
        force_model = build_force_model(forces.casimir, 0.4 * settings.min_separation, 3 * d_top)

    beta = nominal_beta(cantilever, ferrule, protocol, radius)
    h21 = float(cantilever.transfer(2 * protocol.omega1) / cantilever.transfer(protocol.omega1))
    s_target = protocol.force_rms_target * 2 * math.sqrt(2) * beta / (epsilon_0 * math.pi * radius)
    d_start = settings.min_separation + protocol.stroke - piezo_trajectory(0.0, protocol)
    from .dsp import steady_vac

    vac0 = steady_vac(protocol.force_rms_target, d_start, radius) if forces.electrostatic else 0.0

    p = np.zeros(N_PARAMS)
    p[P_K] = cantilever.spring_constant
    p[P_M] = cantilever.effective_mass
    p[P_C] = cantilever.damping
    p[P_R] = radius
    p[P_TAU] = protocol.half_period
    p[P_STROKE] = protocol.stroke
    p[P_F1] = protocol.omega1
    p[P_F2] = protocol.omega2
    p[P_A] = protocol.stage_mod_amplitude
    p[P_DMIN] = settings.min_separation
    if forces.squeeze_film is not None:
        sq = forces.squeeze_film
        p[P_CSQ] = sq.geometry_coefficient * sq.viscosity * radius**2
    p[P_FEXT] = settings.external_force
    p[P_FDRV] = settings.drive_amplitude
    p[P_FDRVF] = settings.drive_frequency
    rp = forces.residual_potential
    p[P_V0KIND] = 0.0 if rp.kind == "log" else 1.0
    p[P_V0A] = rp.slope
    p[P_V0B] = rp.offset
    p[P_V0REF] = rp.reference
    p[P_W0F] = ferrule.midpoint
    p[P_VF] = ferrule.visibility
    p[P_KF] = 4 * math.pi / ferrule.wavelength
    p[P_PHF] = ferrule.phase_offset
    p[P_GAPF] = ferrule.rest_gap
    p[P_W0B] = barefiber.midpoint
    p[P_VB] = barefiber.visibility
    p[P_PHB] = barefiber.phase_offset
    p[P_GAPB] = barefiber.rest_gap
    dt_out = 1.0 / fs
    p[P_ALPHA1] = -math.expm1(-dt_out / lockin_omega1.rc_time)
    p[P_ALPHA2] = -math.expm1(-dt_out / lockin_2omega1.rc_time)
    p[P_PH1] = lockin_omega1.reference_phase
    p[P_PH2] = lockin_2omega1.reference_phase
    p[P_G0] = 1.0 / settings.v0_loop_time
    p[P_GA] = 1.0 / settings.amplitude_loop_time
    p[P_BETA] = beta
    p[P_FT] = protocol.force_rms_target
    p[P_STGT] = s_target
    p[P_H21] = h21
    p[P_VACMIN], p[P_VACMAX] = settings.vac_limits
    p[P_VDCLIM] = settings.vdc_limit
    p[P_VAC0] = vac0
    p[P_VDC0] = settings.initial_vdc
    p[P_ES] = 1.0 if forces.electrostatic else 0.0
    p[P_V0INIT] = settings.initial_velocity
    p[P_SERVO] = 1.0 if (settings.servos and forces.electrostatic) else 0.0
    p[P_LND0] = force_model.lnd0
    p[P_DLND] = force_model.dlnd
    poly = np.asarray(protocol.piezo_nonlinearity, dtype=float)
    if settings.initial_deflection is None:
        p[P_X0] = _static_balance(p, poly, force_model)
    else:
        p[P_X0] = settings.initial_deflection

    noise = forces.noise
    sigma = noise.photodiode_white_noise_density * math.sqrt(fs / 2.0)
    if sigma > 0:
        rng = np.random.default_rng([noise.seed, scan_index])
        nz = rng.standard_normal((2, n_out)) * sigma
        noise_f, noise_b = nz[0], nz[1]
    else:
        noise_f = noise_b = np.zeros(n_out)

    out = [np.empty(n_out) for _ in range(5)]
    n_tr = n_out // n_rec
    tr = [np.full(n_tr, np.nan) for _ in range(4)]
    status = _scan_kernel(p, poly, force_model.ln_force, force_model.ln_slope, noise_f, noise_b,
                          n_out, n_sub, fs, n_rec, lockin_omega1.filter_stages, *out, *tr)
    if status == -2:
        raise IntegrationError("integration diverged")
    t = np.arange(n_out) / fs
    meta = {"scan_index": scan_index, "wavelength": ferrule.wavelength,
            "reference_phase_omega1": lockin_omega1.reference_phase,
            "reference_phase_2omega1": lockin_2omega1.reference_phase,
            "beta_servo": beta, "contact_time": None}
    keep = n_out
    if status >= 0:
        keep = status + 1
        meta["contact_time"] = float(t[status])
    pdf, pdb, vapp, d_true, x_true = (a[:keep] for a in out)
    n_keep_tr = keep // n_rec
    t_tr = (np.arange(n_keep_tr) + 1) * n_rec / fs - 1.0 / fs
    servo = ServoTrace(t_tr, *(a[:n_keep_tr] for a in tr))
    stream = SampleStream(t[:keep], pdf, pdb, vapp, servo=servo, meta=meta)
    if settings.truth_channels:
        stream.d_true = d_true
        stream.x_true = x_true
    return stream


def run_contact(ferrule: InterferometerParams, protocol: ScanProtocol, noise: NoiseModel,
                duration=3.0, reference_phase_offset=0.0):
    """Photodiode stream with the sphere pressed on the plate.

    The cantilever is slaved to the stage dither: ``x = -a cos(2 pi omega2 t
    + offset)``. ``reference_phase_offset`` shifts the dither phase, for
    synthetic alignment checks.
    """
    fs = protocol.sampling_rate
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    x = -protocol.stage_mod_amplitude * np.cos(2 * np.pi * protocol.omega2 * t
                                               + reference_phase_offset)
    pd = interferometer_signal(ferrule, ferrule.rest_gap - x)
    sigma = noise.photodiode_white_noise_density * math.sqrt(fs / 2.0)
    if sigma > 0:
        pd = pd + np.random.default_rng([noise.seed, 999_999]).standard_normal(n) * sigma
    return SampleStream(t, pd, np.full(n, np.nan), np.zeros(n), meta={"contact": True})


def simulate_cantilever(cantilever: CantileverParams, duration, sampling_rate=60000.0,
                        integration_rate=120000.0, constant_force=0.0, drive_amplitude=0.0,
                        drive_frequency=0.0, x0=0.0, v0=0.0):
    """Free/driven oscillator through the scan kernel with every other force off.

    Returns ``(t, x)`` at ``sampling_rate``.
    """
    protocol = ScanProtocol(half_period=max(duration, 1.0), stroke=1e-6,
                            stage_mod_amplitude=0.0, sampling_rate=sampling_rate, n_scans=1)
    forces = ForceStack(casimir=None, electrostatic=False)
    settings = SimulationSettings(integration_rate=integration_rate,
                                  record_rate=sampling_rate, min_separation=1e-3,
                                  truth_channels=True, servos=False,
                                  external_force=constant_force, drive_amplitude=drive_amplitude,
                                  drive_frequency=drive_frequency, initial_deflection=x0,
                                  initial_velocity=v0)
    from .dsp import LockInConfig

    li = LockInConfig(protocol.omega1, 0.0, 0.01)
    s = simulate_scan(cantilever, InterferometerParams(), InterferometerParams(), protocol, forces,
                 li, LockInConfig(2 * protocol.omega1, 0.0, 0.01), settings,
                 force_model=ForceModel.empty(), duration=duration)
    return s.t, s.x_true


@dataclass(frozen=True)
class PreparedRun:
    """Per-run state shared by all scans: tuned optics, aligned phase, force table."""

    ferrule: InterferometerParams
    barefiber: InterferometerParams
    contact_phase: float
    force_model: ForceModel

    @property
    def reference_phase(self):
        # contact motion is opposite in sign to force-driven motion toward the plate
        return self.contact_phase + math.pi


def prepare_run(config) -> PreparedRun:
    """Tune the laser to quadrature, align the omega2 phase at contact and
    tabulate the Casimir force for ``config`` (an ``ExperimentConfig``)."""
    from .dsp import align_phase_at_contact

    ferrule = config.interferometers.ferrule
    barefiber = config.interferometers.barefiber
    if config.simulation.tune_laser:
        lam = tune_to_quadrature(ferrule, ferrule.rest_gap)
        ferrule = ferrule.with_wavelength(lam)
        barefiber = barefiber.with_wavelength(lam)
    protocol = config.protocol
    contact = run_contact(ferrule, protocol, config.forces.noise,
                          duration=config.simulation.contact_duration)
    li = config.lockin("omega2")
    phase = align_phase_at_contact(contact.t, contact.pd_ferrule, li.reference_frequency,
                                   li.rc_time, li.filter_stages, dc_offset=ferrule.midpoint)
    d_min = config.simulation.min_separation
    d_top = d_min + protocol.stroke + 2 * protocol.stage_mod_amplitude
    fm = build_force_model(config.forces.casimir, 0.4 * d_min, 3 * d_top,
                           config.simulation.casimir_table_points)
    return PreparedRun(ferrule, barefiber, phase, fm)


def run_scan(config, scan_index: int = 0, prepared: Optional[PreparedRun] = None,
             duration: Optional[float] = None) -> SampleStream:
    """One closed-loop back-and-forth scan for an ``ExperimentConfig``."""
    if prepared is None:
        prepared = prepare_run(config)
    phase = prepared.reference_phase
    return simulate_scan(config.cantilever, prepared.ferrule, prepared.barefiber,
                         config.protocol, config.forces, config.lockin("omega1", phase),
                         config.lockin("two_omega1", phase), config.simulation_settings(),
                         force_model=prepared.force_model, scan_index=scan_index,
                         duration=duration)
