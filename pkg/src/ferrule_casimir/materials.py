"""Dielectric response of the interacting surfaces on the imaginary frequency axis.

All frequencies are angular frequencies in rad/s. A perfect conductor is
represented by ``math.inf``; downstream reflection coefficients map it to
the ideal-mirror boundary condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

# Conventional gold parameters (9.0 eV plasma energy, 35 meV relaxation).
GOLD_PLASMA_FREQUENCY = 1.37e16
GOLD_RELAXATION_RATE = 5.32e13

PERFECT_CONDUCTOR_EPS = math.inf


class OpticalTableError(ValueError):
    """Raised for malformed tabulated optical data."""


@dataclass(frozen=True)
class OpticalTable:
    """Absorptive part of the permittivity, eps''(omega), sampled on real frequencies."""

    frequencies: np.ndarray
    eps_imag: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.frequencies, dtype=float)
        e = np.asarray(self.eps_imag, dtype=float)
        if w.ndim != 1 or e.shape != w.shape:
            raise OpticalTableError("frequency and eps'' columns must be 1-D and of equal length")
        if w.size < 2:
            raise OpticalTableError("optical table needs at least 2 rows")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(e))):
            raise OpticalTableError("optical table contains non-finite values")
        if w[0] <= 0:
            raise OpticalTableError("frequencies must be positive")
        if np.any(np.diff(w) <= 0):
            raise OpticalTableError("frequencies must be strictly increasing")
        if np.any(e < 0):
            raise OpticalTableError("eps'' must be non-negative")
        w.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "frequencies", w)
        object.__setattr__(self, "eps_imag", e)

    def __len__(self):
        return self.frequencies.size

    def __hash__(self):
        return hash((self.frequencies.tobytes(), self.eps_imag.tobytes()))

    def __eq__(self, other):
        if not isinstance(other, OpticalTable):
            return NotImplemented
        return (np.array_equal(self.frequencies, other.frequencies)
                and np.array_equal(self.eps_imag, other.eps_imag))


def load_optical_table(path: Union[str, Path]) -> OpticalTable:
    """Read a two-column ``omega[rad/s] eps''`` text file ('#' starts a comment)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise OpticalTableError(f"{path}:{lineno}: expected 2 columns, got {len(parts)}")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise OpticalTableError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise OpticalTableError(f"{path}: empty optical table")
    arr = np.array(rows)
    return OpticalTable(arr[:, 0], arr[:, 1])


def save_optical_table(table: OpticalTable, path: Union[str, Path], comment: str = "") -> None:
    header = "omega_rad_per_s eps_imag"
    if comment:
        header = comment + "\n" + header
    np.savetxt(path, np.column_stack([table.frequencies, table.eps_imag]),
               fmt="%.17g", header=header)


@dataclass(frozen=True)
class Drude:
    plasma_frequency: float = GOLD_PLASMA_FREQUENCY
    relaxation_rate: float = GOLD_RELAXATION_RATE

    def __post_init__(self):
        if not self.plasma_frequency > 0:
            raise ValueError("plasma_frequency must be > 0")
        if not self.relaxation_rate >= 0:
            raise ValueError("relaxation_rate must be >= 0")

    def eps_imag(self, omega):
        """Absorption spectrum eps''(omega) on the real axis."""
        omega = np.asarray(omega, dtype=float)
        g = self.relaxation_rate
        return self.plasma_frequency**2 * g / (omega * (omega**2 + g**2))


@dataclass(frozen=True)
class Tabulated:
    """Tabulated eps'' turned into eps(i xi) by the dispersion relation.

    ``extrapolation`` controls the region below the first table row:
    ``"drude"`` fits a Drude tail to the two lowest rows, ``"none"`` treats
    eps'' as zero there.
    """

    table: OpticalTable
    extrapolation: str = "drude"

    def __post_init__(self):
        if self.extrapolation not in ("drude", "none"):
            raise ValueError(f"unknown extrapolation {self.extrapolation!r}")


@dataclass(frozen=True)
class PerfectConductor:
    pass


@dataclass(frozen=True)
class Vacuum:
    pass


DielectricModel = Union[Drude, Tabulated, PerfectConductor, Vacuum]


def permittivity_at_imaginary_frequency(model: DielectricModel, xi):
    """Permittivity eps(i xi) for ``xi > 0``.

    Returns a float for scalar input and an array otherwise. A perfect
    conductor returns ``math.inf`` without touching any quadrature.
    """
    scalar = np.ndim(xi) == 0
    xi_arr = np.atleast_1d(np.asarray(xi, dtype=float))
    if not np.all(np.isfinite(xi_arr)) or np.any(xi_arr <= 0):
        raise ValueError("xi must be positive and finite")
    if isinstance(model, Vacuum):
        out = np.ones_like(xi_arr)
    elif isinstance(model, PerfectConductor):
        out = np.full_like(xi_arr, PERFECT_CONDUCTOR_EPS)
    elif isinstance(model, Drude):
        out = 1.0 + model.plasma_frequency**2 / (xi_arr * (xi_arr + model.relaxation_rate))
    elif isinstance(model, Tabulated):
        out = kramers_kronig_to_imaginary_axis(model.table, xi_arr,
                                               low_frequency=model.extrapolation)
    else:
        raise TypeError(f"not a dielectric model: {model!r}")
    return float(out[0]) if scalar else out


def static_permittivity(model: DielectricModel) -> float:
    """eps(i xi -> 0): infinite for conductors, finite for insulating tables."""
    if isinstance(model, Vacuum):
        return 1.0
    if isinstance(model, (PerfectConductor, Drude)):
        return math.inf
    if isinstance(model, Tabulated):
        if model.extrapolation == "drude" and fit_drude_tail(model.table) is not None:
            return math.inf
        # xi -> 0 limit of the dispersion integral: 1 + (2/pi) int eps''/omega d omega
        spline = _eps_spline(model.table)
        u = np.log(model.table.frequencies)
        total = 0.0
        for a, b in zip(u[:-1], u[1:]):
            total += integrate.quad(lambda s: max(float(spline(s)), 0.0), a, b)[0]
        return 1.0 + 2.0 / math.pi * total
    raise TypeError(f"not a dielectric model: {model!r}")


def fit_drude_tail(table: OpticalTable):
    """Drude (omega_p^2, gamma) matching the two lowest rows, or None if unphysical."""
    w1, w2 = table.frequencies[:2]
    e1, e2 = table.eps_imag[:2]
    den = e1 * w1 - e2 * w2
    num = e2 * w2**3 - e1 * w1**3
    if e1 <= 0 or e2 <= 0 or den <= 0 or num <= 0:
        return None
    gamma = math.sqrt(num / den)
    wp2 = e1 * w1 * (w1**2 + gamma**2) / gamma
    return wp2, gamma


def _drude_tail_integral(wp2, gamma, w1, xi):
    """int_0^w1 omega eps''_D(omega) / (omega^2 + xi^2) d omega for the Drude tail."""
    xi = np.asarray(xi, dtype=float)
    out = np.empty_like(xi)
    for i, x in enumerate(xi):
        diff = x * x - gamma * gamma
        if abs(diff) > 1e-6 * x * x:
            out[i] = wp2 * gamma / diff * (math.atan(w1 / gamma) / gamma - math.atan(w1 / x) / x)
        else:
            out[i] = integrate.quad(
                lambda w: wp2 * gamma / ((w * w + gamma * gamma) * (w * w + x * x)),
                0.0, w1, epsrel=1e-12)[0]
    return out


def _eps_spline(table: OpticalTable):
    return CubicSpline(np.log(table.frequencies), table.eps_imag, bc_type="not-a-knot")


def _panels(table: OpticalTable, max_width=0.5):
    u = np.log(table.frequencies)
    edges = [u[0]]
    for a, b in zip(u[:-1], u[1:]):
        n = max(1, int(math.ceil((b - a) / max_width)))
        edges.extend(np.linspace(a, b, n + 1)[1:])
    edges = np.asarray(edges)
    return edges[:-1], edges[1:]


def _gl_interior(spline, lo, hi, xi, order):
    x, w = np.polynomial.legendre.leggauss(order)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    u = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    eps2 = np.clip(spline(u), 0.0, None)
    om2 = np.exp(2.0 * u)
    kern = om2[None, :] / (om2[None, :] + xi[:, None] ** 2)
    return kern @ (eps2 * wts)


def kramers_kronig_to_imaginary_axis(table: OpticalTable, xi, low_frequency="drude",
                                     rtol=1e-7):
    """eps(i xi) = 1 + (2/pi) int_0^inf omega eps''(omega) / (omega^2 + xi^2) d omega.

    eps'' is interpolated by a cubic spline in ln(omega); the integral runs
    over log-spaced panels with Gauss-Legendre order doubled until the
    relative change drops below ``rtol``. Above the last row the integral is
    truncated.
    """
    if not isinstance(table, OpticalTable):
        raise OpticalTableError("expected an OpticalTable")
    scalar = np.ndim(xi) == 0
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if not np.all(np.isfinite(xi)) or np.any(xi <= 0):
        raise ValueError("xi must be positive and finite")
    if not np.any(table.eps_imag > 0):
        out = np.ones_like(xi)
        return float(out[0]) if scalar else out

    spline = _eps_spline(table)
    lo, hi = _panels(table)
    order = 8
    prev = _gl_interior(spline, lo, hi, xi, order)
    while True:
        order *= 2
        cur = _gl_interior(spline, lo, hi, xi, order)
        if np.all(np.abs(cur - prev) <= rtol * np.abs(cur)) or order >= 256:
            break
        prev = cur
    total = cur

    if low_frequency == "drude":
        fit = fit_drude_tail(table)
        if fit is not None:
            total = total + _drude_tail_integral(fit[0], fit[1], table.frequencies[0], xi)
    elif low_frequency != "none":
        raise ValueError(f"unknown low_frequency mode {low_frequency!r}")

    out = 1.0 + 2.0 / math.pi * total
    return float(out[0]) if scalar else out


def material_from_dict(spec: dict, base_dir: Union[str, Path, None] = None) -> DielectricModel:
    """Build a dielectric model from its JSON form, e.g. ``{"kind": "drude", ...}``."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "drude":
        allowed = {"plasma_frequency", "relaxation_rate"}
        _reject_unknown(spec, allowed, "drude")
        return Drude(**spec)
    if kind == "perfect_conductor":
        _reject_unknown(spec, set(), kind)
        return PerfectConductor()
    if kind == "vacuum":
        _reject_unknown(spec, set(), kind)
        return Vacuum()
    if kind == "tabulated":
        _reject_unknown(spec, {"path", "extrapolation"}, kind)
        if "path" not in spec:
            raise KeyError("tabulated.path")
        p = Path(spec["path"])
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        return Tabulated(load_optical_table(p), spec.get("extrapolation", "drude"))
    raise KeyError(f"kind={kind!r}")


def material_to_dict(model: DielectricModel) -> dict:
    if isinstance(model, Drude):
        return {"kind": "drude", "plasma_frequency": model.plasma_frequency,
                "relaxation_rate": model.relaxation_rate}
    if isinstance(model, PerfectConductor):
        return {"kind": "perfect_conductor"}
    if isinstance(model, Vacuum):
        return {"kind": "vacuum"}
    if isinstance(model, Tabulated):
        return {"kind": "tabulated", "rows": len(model.table),
                "extrapolation": model.extrapolation}
    raise TypeError(model)


def _reject_unknown(spec, allowed, where):
    extra = set(spec) - allowed
    if extra:
        raise KeyError(f"{where}.{sorted(extra)[0]}")
