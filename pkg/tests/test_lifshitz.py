import math

import numpy as np
import pytest

from ferrule_casimir.lifshitz import (
    LifshitzConfig,
    TheoryCurve,
    casimir_table,
    casimir_table_from_curve,
    fresnel_imaginary,
    ideal_force,
    ideal_gradient,
    ideal_pressure,
    plate_plate_energy,
    plate_plate_pressure,
    read_theory_csv,
    sphere_plate_force,
    sphere_plate_gradient,
    theory_curve,
    write_theory_csv,
)
from ferrule_casimir.materials import Drude, PerfectConductor, Vacuum

from oracles import drude_eps, lifshitz_pressure_quad

IDEAL_T0 = LifshitzConfig(temperature=0.0, material_a=PerfectConductor(),
                          material_b=PerfectConductor())
GOLD = LifshitzConfig()
# Drude gold, 300 K, 100 nm: per-term scipy.quad in k_perp (tests/oracles.py)
GOLD_100NM_ORACLE = -5.63834136643


def test_fresnel_no_interface():
    assert fresnel_imaginary(1.0, 1e15, 1e7) == (0.0, 0.0)


def test_fresnel_perfect_conductor():
    assert fresnel_imaginary(math.inf, 1e15, 1e7) == (-1.0, 1.0)


def test_fresnel_closed_form_value():
    # closed forms evaluated with mpmath (30 digits)
    r_te, r_tm = fresnel_imaginary(179.2, 1.0e15, 1.0e7)
    assert r_te == pytest.approx(-0.62552156624149156, rel=1e-12)
    assert r_tm == pytest.approx(0.95269975497149362, rel=1e-12)


def test_fresnel_static_te_vanishes():
    r_te, r_tm = fresnel_imaginary(50.0, 0.0, 1e7)
    assert r_te == 0.0
    assert r_tm == pytest.approx(49 / 51)


@pytest.mark.parametrize("args", [(0.5, 1e15, 1e7), (2.0, float("nan"), 1e7),
                                  (2.0, 1e15, float("inf")), (float("nan"), 1e15, 1e7)])
def test_fresnel_errors(args):
    with pytest.raises(ValueError):
        fresnel_imaginary(*args)


@pytest.mark.parametrize("eps", [1.0, 1.5, 10.0, 1e4])
@pytest.mark.parametrize("xi", [0.0, 1e13, 1e16])
def test_fresnel_bounds_and_signs(eps, xi):
    r_te, r_tm = fresnel_imaginary(eps, xi, 3e6)
    assert -1 <= r_te <= 0 <= r_tm <= 1


@pytest.mark.parametrize("d", [50e-9, 100e-9, 200e-9, 1000e-9])
def test_ideal_mirror_pressure(d):
    assert plate_plate_pressure(IDEAL_T0, d) == pytest.approx(ideal_pressure(d), rel=1e-3)


@pytest.mark.parametrize("d", [50e-9, 1000e-9])
def test_ideal_mirror_energy(d):
    e = -math.pi**2 * 1.054571817e-34 * 299792458 / (720 * d**3)
    assert plate_plate_energy(IDEAL_T0, d) == pytest.approx(e, rel=1e-6)
    assert sphere_plate_force(IDEAL_T0, d) == pytest.approx(ideal_force(d), rel=1e-6)


def test_ideal_mirror_gradient_100nm():
    assert sphere_plate_gradient(IDEAL_T0, 100e-9) == pytest.approx(81.6893115, rel=1e-3)


def test_large_separation_vanishes():
    for cfg in (GOLD, LifshitzConfig(material_a=PerfectConductor(), material_b=PerfectConductor())):
        assert abs(plate_plate_pressure(cfg, 10e-6)) < 1e-5


def test_gold_against_quad_oracle():
    p = plate_plate_pressure(GOLD, 100e-9)
    assert p == pytest.approx(GOLD_100NM_ORACLE, rel=1e-7)
    ratio = p / ideal_pressure(100e-9)
    assert 0.3 <= ratio <= 0.6
    assert sphere_plate_gradient(GOLD, 100e-9) == pytest.approx(
        2 * math.pi * abs(GOLD_100NM_ORACLE), rel=1e-7)


def test_oracle_at_other_distance():
    for d in (60e-9, 300e-9):
        want = lifshitz_pressure_quad(d, 300.0, lambda xi: drude_eps(xi, 1.37e16, 5.32e13))
        assert plate_plate_pressure(GOLD, d) == pytest.approx(want, rel=1e-6)


def test_pressure_negative_and_monotone():
    d = np.geomspace(30e-9, 3e-6, 25)
    p = np.array([plate_plate_pressure(GOLD, v) for v in d])
    assert np.all(p < 0)
    assert np.all(np.diff(np.abs(p)) < 0)


def test_tolerance_refinement_is_stable():
    base = LifshitzConfig(matsubara_rel_cutoff=1e-6, quadrature_rel_tol=1e-6)
    tight = LifshitzConfig(matsubara_rel_cutoff=5e-7, quadrature_rel_tol=5e-7)
    for d in (50e-9, 200e-9):
        a, b = plate_plate_pressure(base, d), plate_plate_pressure(tight, d)
        assert abs(a - b) < 3 * 1e-6 * abs(b)


def test_gold_bounded_by_ideal():
    ideal300 = LifshitzConfig(material_a=PerfectConductor(), material_b=PerfectConductor())
    for d in (50e-9, 150e-9, 1e-6):
        assert abs(plate_plate_pressure(GOLD, d)) <= abs(plate_plate_pressure(ideal300, d))


def test_pfa_exactly_2pi():
    d = 123e-9
    assert sphere_plate_gradient(GOLD, d) == 2 * math.pi * abs(plate_plate_pressure(GOLD, d))


def test_bad_distance():
    for d in (0.0, -1e-9):
        with pytest.raises(ValueError):
            plate_plate_pressure(GOLD, d)


def test_config_validation():
    with pytest.raises(ValueError):
        LifshitzConfig(temperature=-1)
    with pytest.raises(ValueError):
        LifshitzConfig(quadrature_rel_tol=0.1)


def test_vacuum_plates_no_force():
    cfg = LifshitzConfig(material_a=Vacuum(), material_b=Drude())
    assert plate_plate_pressure(cfg, 100e-9) == 0.0


def test_theory_curve_matches_pointwise():
    c = theory_curve(IDEAL_T0, 50e-9, 200e-9, 3)
    assert c.separations[0] == 50e-9 and c.separations[-1] == 200e-9
    assert c.gradient_over_radius[0] == sphere_plate_gradient(IDEAL_T0, 50e-9)
    assert c.gradient_over_radius[-1] == sphere_plate_gradient(IDEAL_T0, 200e-9)
    assert len(theory_curve(IDEAL_T0, 50e-9, 200e-9, 2).separations) == 2


def test_theory_curve_drude_decreasing_and_parallel_identical():
    seq = theory_curve(GOLD, 50e-9, 200e-9, 50)
    assert np.all(np.diff(seq.gradient_over_radius) < 0)
    par = theory_curve(GOLD, 50e-9, 200e-9, 50, workers=4)
    assert np.array_equal(seq.gradient_over_radius, par.gradient_over_radius)


@pytest.mark.parametrize("args", [(0.0, 1e-7, 3), (2e-7, 1e-7, 3), (5e-8, 1e-7, 1)])
def test_theory_curve_errors(args):
    with pytest.raises(ValueError):
        theory_curve(IDEAL_T0, *args)


def test_theory_csv_roundtrip(tmp_path):
    c = theory_curve(GOLD, 50e-9, 200e-9, 7)
    p = tmp_path / "theory.csv"
    write_theory_csv(c, p)
    assert p.read_text().splitlines()[0] == "d_m,grad_over_R_N_per_m2"
    back = read_theory_csv(p)
    assert np.array_equal(back.separations, c.separations)
    assert np.array_equal(back.gradient_over_radius, c.gradient_over_radius)


def test_curve_interpolation_powerlaw():
    d = np.geomspace(40e-9, 400e-9, 30)
    c = TheoryCurve(d, ideal_gradient(d))
    x = np.array([55e-9, 123e-9, 321e-9])
    np.testing.assert_allclose(c(x), ideal_gradient(x), rtol=1e-9)


def test_force_table_from_gradient_integration():
    d = np.geomspace(20e-9, 5e-6, 200)
    tab = casimir_table_from_curve(TheoryCurve(d, ideal_gradient(d)))
    np.testing.assert_allclose(tab.force_over_radius, ideal_force(tab.separations), rtol=1e-8)


def test_force_table_direct():
    tab = casimir_table(IDEAL_T0, 30e-9, 2e-6, 8)
    np.testing.assert_allclose(tab.force_over_radius, ideal_force(tab.separations), rtol=1e-6)
    np.testing.assert_allclose(tab.gradient_over_radius, ideal_gradient(tab.separations), rtol=1e-6)
