"""Lifshitz plate-plate interaction and its PFA sphere-plate gradient.

The transverse wave-number integral is written in the dimensionless variable
``y = 2 q d`` so that every Matsubara term has an O(1) integrand with an
exponential tail. Pressures are negative for attraction; the sphere-plate
gradient ``F'/R = 2 pi |P|`` is reported positive.

The n = 0 TE term vanishes for Drude metals (Drude prescription); this is
a contested point in the Casimir literature and is kept here on purpose.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.constants import Boltzmann, c as C_LIGHT, hbar

from .materials import (
    Drude,
    PerfectConductor,
    Vacuum,
    permittivity_at_imaginary_frequency,
    static_permittivity,
)

THEORY_CSV_HEADER = "d_m,grad_over_R_N_per_m2"

# y = 2 q d measured from the lower limit; the integrand ~ y^2 e^-y is below
# 1e-12 of its peak well before t = 48.
_Y_PANELS = np.array([0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 48.0])
_MAX_MATSUBARA = 2_000_000
_MAX_ORDER = 256


class LifshitzConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class LifshitzConfig:
    temperature: float = 300.0
    material_a: object = field(default_factory=Drude)
    material_b: object = field(default_factory=Drude)
    medium: object = field(default_factory=Vacuum)
    matsubara_rel_cutoff: float = 1e-10
    quadrature_rel_tol: float = 1e-8

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ValueError("temperature must be >= 0")
        for name in ("matsubara_rel_cutoff", "quadrature_rel_tol"):
            v = getattr(self, name)
            if not 0 < v <= 1e-2:
                raise ValueError(f"{name} must be in (0, 1e-2]")


def ideal_pressure(d):
    """Ideal-mirror T = 0 pressure, -pi^2 hbar c / (240 d^4)."""
    return -math.pi**2 * hbar * C_LIGHT / (240.0 * np.asarray(d, dtype=float) ** 4)


def ideal_gradient(d):
    """Ideal-mirror T = 0 sphere-plate gradient over radius, pi^3 hbar c / (120 d^4)."""
    return math.pi**3 * hbar * C_LIGHT / (120.0 * np.asarray(d, dtype=float) ** 4)


def ideal_force(d):
    """Ideal-mirror T = 0 sphere-plate force over radius, pi^3 hbar c / (360 d^3)."""
    return math.pi**3 * hbar * C_LIGHT / (360.0 * np.asarray(d, dtype=float) ** 3)


def fresnel_imaginary(eps, xi, k_perp, eps_medium=1.0):
    """Reflection coefficients (r_TE, r_TM) at imaginary frequency ``xi``.

    ``eps = inf`` is the perfect-conductor sentinel and returns (-1, +1).
    At ``xi = 0`` the TE coefficient of any finite-eps (Drude) material is 0.
    """
    for v in (eps, xi, k_perp, eps_medium):
        if isinstance(v, float) and math.isnan(v):
            raise ValueError("non-finite input")
    if not (math.isfinite(xi) and math.isfinite(k_perp) and math.isfinite(eps_medium)):
        raise ValueError("non-finite input")
    if eps < 1:
        raise ValueError("eps must be >= 1")
    if k_perp <= 0:
        raise ValueError("k_perp must be > 0")
    if xi < 0:
        raise ValueError("xi must be >= 0")
    if math.isinf(eps):
        return -1.0, 1.0
    q = math.sqrt(k_perp**2 + eps_medium * xi**2 / C_LIGHT**2)
    k = math.sqrt(k_perp**2 + eps * xi**2 / C_LIGHT**2)
    r_te = (q - k) / (q + k)
    r_tm = (eps * q - eps_medium * k) / (eps * q + eps_medium * k)
    return r_te, r_tm


def _reflection_y(eps, eps_m, y, x):
    """Reflection coefficients in the scaled variables.

    ``y = 2 q d`` (q in the medium), ``x = 2 xi d / c``; eps, eps_m have
    shape (N, 1) and broadcast against y of shape (N, M).
    """
    inf = np.isinf(eps)
    e = np.where(inf, 1.0, eps)
    kk = np.sqrt(y * y + (e - eps_m) * x * x)
    r_te = np.where(inf, -1.0, (y - kk) / (y + kk))
    r_tm = np.where(inf, 1.0, (e * y - eps_m * kk) / (e * y + eps_m * kk))
    return r_te, r_tm


def _static_reflection(model, eps_m):
    """(r_TE, r_TM) at xi = 0."""
    if isinstance(model, PerfectConductor):
        return -1.0, 1.0
    eps0 = static_permittivity(model)
    if math.isinf(eps0):
        return 0.0, 1.0
    return 0.0, (eps0 - eps_m) / (eps0 + eps_m)


def _gl_nodes(order):
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = _Y_PANELS[:-1], _Y_PANELS[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    t = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return t, wt


def _y_integral(kind, y0, rho_fn, rtol):
    """int_{y0}^inf f(y) dy for each y0, with adaptive Gauss-Legendre order.

    ``kind`` selects the pressure kernel y^2 rho e^-y / (1 - rho e^-y) or
    the energy kernel y ln(1 - rho e^-y), summed over both polarizations.
    ``rho_fn(y)`` returns the round-trip products (rho_TE, rho_TM).
    """
    def evaluate(order):
        t, wt = _gl_nodes(order)
        y = y0[:, None] + t[None, :]
        rho_te, rho_tm = rho_fn(y)
        ey = np.exp(-y)
        if kind == "pressure":
            f = y * y * (rho_te * ey / (1.0 - rho_te * ey) + rho_tm * ey / (1.0 - rho_tm * ey))
        else:
            f = y * (np.log1p(-rho_te * ey) + np.log1p(-rho_tm * ey))
        return f @ wt

    order = 16
    prev = evaluate(order)
    while True:
        order *= 2
        cur = evaluate(order)
        scale = max(np.max(np.abs(cur)), np.finfo(float).tiny)
        if np.all(np.abs(cur - prev) <= rtol * scale) or order >= _MAX_ORDER:
            return cur
        prev = cur


def _make_rho(cfg, xi, x):
    """Closure giving the round-trip reflection products on a (N, M) y-grid.

    ``xi`` (N,) in rad/s, strictly positive; ``x = 2 xi d / c``.
    """
    ea = permittivity_at_imaginary_frequency(cfg.material_a, xi)[:, None]
    eb = permittivity_at_imaginary_frequency(cfg.material_b, xi)[:, None]
    em = permittivity_at_imaginary_frequency(cfg.medium, xi)[:, None]
    xs = x[:, None]

    def rho(y):
        ya = y  # y already refers to the medium wave number
        te_a, tm_a = _reflection_y(ea, em, ya, xs)
        te_b, tm_b = _reflection_y(eb, em, ya, xs)
        return te_a * te_b, tm_a * tm_b

    return rho, em[:, 0]


def _matsubara_terms(cfg, d, kind, n):
    """Unprimed Matsubara terms J_n (n >= 1) for the given index array."""
    xi = 2.0 * math.pi * n * Boltzmann * cfg.temperature / hbar
    x = 2.0 * xi * d / C_LIGHT
    rho, em = _make_rho(cfg, xi, x)
    y0 = np.sqrt(em) * x
    return _y_integral(kind, y0, rho, cfg.quadrature_rel_tol)


def _zero_term(cfg, kind):
    em = 1.0 if isinstance(cfg.medium, Vacuum) else static_permittivity(cfg.medium)
    te_a, tm_a = _static_reflection(cfg.material_a, em)
    te_b, tm_b = _static_reflection(cfg.material_b, em)
    rte, rtm = te_a * te_b, tm_a * tm_b

    def rho(y):
        return np.full_like(y, rte), np.full_like(y, rtm)

    return float(_y_integral(kind, np.zeros(1), rho, cfg.quadrature_rel_tol)[0])


def _matsubara_sum(cfg, d, kind):
    total = 0.5 * _zero_term(cfg, kind)
    chunk = 64
    start = 1
    while start < _MAX_MATSUBARA:
        n = np.arange(start, start + chunk, dtype=float)
        terms = _matsubara_terms(cfg, d, kind, n)
        total += float(np.sum(terms))
        if abs(terms[-1]) <= cfg.matsubara_rel_cutoff * abs(total):
            return total
        start += chunk
        chunk = min(chunk * 2, 4096)
    raise LifshitzConvergenceError(f"Matsubara sum not converged at d={d:g} m")


def _zero_temperature_integral(cfg, d, kind):
    """int_0^inf J(x) dx with x = 2 xi d / c on a log-mapped Gauss-Legendre grid."""
    s_lo, s_hi = math.log(1e-9), math.log(120.0)
    edges = np.linspace(s_lo, s_hi, 31)

    def evaluate(order):
        gx, gw = np.polynomial.legendre.leggauss(order)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        s = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        w = (half[:, None] * gw[None, :]).ravel()
        x = np.exp(s)
        xi = x * C_LIGHT / (2.0 * d)
        rho, em = _make_rho(cfg, xi, x)
        j = _y_integral(kind, np.sqrt(em) * x, rho, cfg.quadrature_rel_tol)
        return float(np.sum(j * x * w))

    order = 8
    prev = evaluate(order)
    while True:
        order *= 2
        cur = evaluate(order)
        if abs(cur - prev) <= cfg.quadrature_rel_tol * abs(cur) or order >= 64:
            return cur
        prev = cur


def _check_d(d):
    if not (math.isfinite(d) and d > 0):
        raise ValueError("separation d must be > 0")


def plate_plate_pressure(config: LifshitzConfig, d: float) -> float:
    """Lifshitz pressure between two half-spaces at separation ``d`` (N/m^2, < 0 attractive)."""
    d = float(d)
    _check_d(d)
    if config.temperature == 0:
        return -hbar * C_LIGHT / (32.0 * math.pi**2 * d**4) * _zero_temperature_integral(
            config, d, "pressure")
    kt = Boltzmann * config.temperature
    return -kt / (8.0 * math.pi * d**3) * _matsubara_sum(config, d, "pressure")


def plate_plate_energy(config: LifshitzConfig, d: float) -> float:
    """Interaction free energy per unit area (J/m^2, < 0 attractive)."""
    d = float(d)
    _check_d(d)
    if config.temperature == 0:
        return hbar * C_LIGHT / (32.0 * math.pi**2 * d**3) * _zero_temperature_integral(
            config, d, "energy")
    kt = Boltzmann * config.temperature
    return kt / (8.0 * math.pi * d**2) * _matsubara_sum(config, d, "energy")


def sphere_plate_gradient(config: LifshitzConfig, d: float) -> float:
    """PFA force gradient normalized to the sphere radius, 2 pi |P(d)| in N/m^2.

    Valid for d << R; this is assumed, not checked.
    """
    return 2.0 * math.pi * abs(plate_plate_pressure(config, d))


def sphere_plate_force(config: LifshitzConfig, d: float) -> float:
    """PFA attractive force normalized to the sphere radius, 2 pi |E(d)| in N/m."""
    return 2.0 * math.pi * abs(plate_plate_energy(config, d))


@dataclass(frozen=True)
class TheoryCurve:
    separations: np.ndarray
    gradient_over_radius: np.ndarray
    config: LifshitzConfig | None = None

    def __post_init__(self):
        d = np.asarray(self.separations, dtype=float)
        g = np.asarray(self.gradient_over_radius, dtype=float)
        if d.ndim != 1 or d.shape != g.shape or d.size < 2:
            raise ValueError("theory curve needs two equal-length arrays of >= 2 points")
        if np.any(d <= 0) or np.any(np.diff(d) <= 0):
            raise ValueError("separations must be positive and ascending")
        if np.any(g <= 0):
            raise ValueError("gradient must be positive")
        object.__setattr__(self, "separations", d)
        object.__setattr__(self, "gradient_over_radius", g)

    def __call__(self, d):
        """Monotone cubic interpolation in log-log space."""
        from scipy.interpolate import PchipInterpolator

        f = PchipInterpolator(np.log(self.separations), np.log(self.gradient_over_radius))
        return np.exp(f(np.log(np.asarray(d, dtype=float))))


def theory_curve(config: LifshitzConfig, d_min: float, d_max: float, n_points: int,
                 spacing: str = "log", workers: int | None = None) -> TheoryCurve:
    """Tabulate ``sphere_plate_gradient`` between ``d_min`` and ``d_max``."""
    if not (0 < d_min < d_max) or not math.isfinite(d_max):
        raise ValueError("need 0 < d_min < d_max")
    if int(n_points) < 2:
        raise ValueError("n_points must be >= 2")
    if spacing == "log":
        d = np.geomspace(d_min, d_max, int(n_points))
    elif spacing == "linear":
        d = np.linspace(d_min, d_max, int(n_points))
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    # endpoints exactly as requested
    d[0], d[-1] = d_min, d_max
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            g = np.array(list(ex.map(lambda v: sphere_plate_gradient(config, v), d)))
    else:
        g = np.array([sphere_plate_gradient(config, v) for v in d])
    return TheoryCurve(d, g, config)


def write_theory_csv(curve: TheoryCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(THEORY_CSV_HEADER + "\n")
        for d, g in zip(curve.separations, curve.gradient_over_radius):
            fh.write(f"{float(d)!r},{float(g)!r}\n")


def read_theory_csv(path) -> TheoryCurve:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if ",".join(h.strip() for h in header) != THEORY_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [(float(a), float(b)) for a, b in reader]
    arr = np.array(rows)
    return TheoryCurve(arr[:, 0], arr[:, 1])


@dataclass(frozen=True)
class CasimirTable:
    """Sphere-plate force and gradient (both per unit radius) on a log grid.

    Used by the simulator; ``force_over_radius`` is in N/m and
    ``gradient_over_radius`` in N/m^2.
    """

    separations: np.ndarray
    force_over_radius: np.ndarray
    gradient_over_radius: np.ndarray


def casimir_table(config: LifshitzConfig, d_min: float, d_max: float, n_points: int = 240,
                  workers: int | None = None) -> CasimirTable:
    d = np.geomspace(d_min, d_max, n_points)

    def both(v):
        return sphere_plate_force(config, v), sphere_plate_gradient(config, v)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            vals = list(ex.map(both, d))
    else:
        vals = [both(v) for v in d]
    f, g = np.array(vals).T
    return CasimirTable(d, f, g)


def casimir_table_from_curve(curve: TheoryCurve, n_points: int = 240) -> CasimirTable:
    """Force table obtained by integrating a gradient-only curve.

    F/R(d) = int_d^inf G(s) ds; beyond the last point G is continued as a
    power law fitted to the last two points.
    """
    from scipy.interpolate import PchipInterpolator

    ld = np.log(curve.separations)
    lg = np.log(curve.gradient_over_radius)
    f = PchipInterpolator(ld, lg)
    p = -(lg[-1] - lg[-2]) / (ld[-1] - ld[-2])
    if p <= 1:
        raise ValueError("gradient tail too shallow to integrate")
    d_grid = np.geomspace(curve.separations[0], curve.separations[-1], n_points)
    gx, gw = np.polynomial.legendre.leggauss(12)
    u = np.log(d_grid)
    seg = np.zeros(n_points - 1)
    for i in range(n_points - 1):
        a, b = u[i], u[i + 1]
        s = 0.5 * (a + b) + 0.5 * (b - a) * gx
        seg[i] = 0.5 * (b - a) * np.sum(gw * np.exp(f(s) + s))
    tail = curve.gradient_over_radius[-1] * curve.separations[-1] / (p - 1.0)
    force = tail + np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    return CasimirTable(d_grid, force, np.exp(f(u)))


def config_to_dict(cfg: LifshitzConfig) -> dict:
    from .materials import material_to_dict

    return {
        "temperature": cfg.temperature,
        "material_a": material_to_dict(cfg.material_a),
        "material_b": material_to_dict(cfg.material_b),
        "medium": material_to_dict(cfg.medium),
        "matsubara_rel_cutoff": cfg.matsubara_rel_cutoff,
        "quadrature_rel_tol": cfg.quadrature_rel_tol,
    }


def config_from_dict(data: dict, base_dir=None) -> LifshitzConfig:
    from .materials import material_from_dict

    allowed = {"temperature", "material_a", "material_b", "medium",
               "matsubara_rel_cutoff", "quadrature_rel_tol"}
    extra = set(data) - allowed
    if extra:
        raise KeyError(sorted(extra)[0])
    kw = {}
    for k, v in data.items():
        if k in ("material_a", "material_b", "medium"):
            try:
                kw[k] = material_from_dict(v, base_dir)
            except KeyError as exc:
                raise KeyError(f"{k}.{exc.args[0]}") from None
        else:
            kw[k] = float(v)
    return LifshitzConfig(**kw)
