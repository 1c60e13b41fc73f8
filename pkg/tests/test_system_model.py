import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvrotor.errors import (
    AntiCrossingError,
    DegenerateTrapError,
    NoRootError,
)
from nvrotor.system_model import (
    HBAR,
    Branch,
    ExpansionWarning,
    Geometry,
    TrapConfig,
    FieldSpinConfig,
    anti_crossing_field,
    derive_inertia,
    dispersive_rates,
    epsilon_from_trap,
    fig1_config,
    find_anti_crossing,
    find_bstar,
    find_resonance_fields,
    frequency_ratio,
    quadrupole_anisotropy_closed,
    quadrupole_anisotropy_exact,
    qubit_splitting,
    secular_rates,
    validity_report,
)

REF = fig1_config()


# -- inputs -----------------------------------------------------------------

def test_geometry_rejects_oblate_and_nonpositive():
    with pytest.raises(ValueError):
        Geometry(a=1e-7, b=2e-7, mass_density=3.5e3)
    with pytest.raises(ValueError):
        Geometry(a=-1e-7, b=2e-8, mass_density=3.5e3)


def test_trap_rejects_delta_out_of_range():
    with pytest.raises(ValueError):
        TrapConfig(epsilon=1e-2, delta=1.0, udc_over_uac=0.0, omega0=1e6)


def test_field_rejects_zero_b0():
    with pytest.raises(ValueError):
        FieldSpinConfig(b0=0.0, gamma_e=1.76e11, d_nv=1e10)


# -- inertia and anisotropy ---------------------------------------------------

def test_inertia_reference_mass():
    m = derive_inertia(REF.geometry)
    assert m.mass == pytest.approx(4 / 3 * math.pi * 3.5e3 * 100e-9 * (20e-9) ** 2, rel=1e-15)
    assert m.mass == pytest.approx(5.86e-19, rel=1e-3)


def test_inertia_sphere():
    m = derive_inertia(Geometry(a=50e-9, b=50e-9, mass_density=2e3))
    assert m.i_sym == pytest.approx(0.4 * m.mass * 50e-9**2, rel=1e-15)
    assert m.i_perp == pytest.approx(m.i_sym, rel=1e-15)


def test_inertia_linear_in_density():
    g1 = Geometry(a=100e-9, b=20e-9, mass_density=3.5e3)
    g2 = Geometry(a=100e-9, b=20e-9, mass_density=7e3)
    m1, m2 = derive_inertia(g1), derive_inertia(g2)
    assert m2.mass == pytest.approx(2 * m1.mass, rel=1e-15)
    assert m2.i_perp == pytest.approx(2 * m1.i_perp, rel=1e-15)
    assert m2.i_sym == pytest.approx(2 * m1.i_sym, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(1e-8, 1e-6), ratio=st.floats(0.01, 1.0))
def test_inertia_rigid_body_bound(a, ratio):
    m = derive_inertia(Geometry(a=a, b=a * ratio, mass_density=3.5e3))
    assert 0 < m.i_sym <= 2 * m.i_perp


def test_closed_anisotropy_reference_value():
    assert quadrupole_anisotropy_closed(REF.geometry, 1.0) == pytest.approx(2.70e-15, rel=1e-12)


def test_closed_anisotropy_warns_outside_expansion():
    with pytest.warns(ExpansionWarning):
        quadrupole_anisotropy_closed(Geometry(a=1e-7, b=0.6e-7, mass_density=1.0), 1.0)


def test_closed_anisotropy_linear_in_q():
    assert quadrupole_anisotropy_closed(REF.geometry, 3.0) == pytest.approx(
        3 * quadrupole_anisotropy_closed(REF.geometry, 1.0), rel=1e-15)


def test_exact_anisotropy_sphere_vanishes():
    g = Geometry(a=1e-7, b=1e-7, mass_density=1.0)
    assert abs(quadrupole_anisotropy_exact(g, 1.0)) < 1e-12 * g.a**2


def test_exact_anisotropy_needle_limit():
    # b -> 0: the charge sits on a line of half-length a, <z^2> = a^2/4 weighted by dS
    g = Geometry(a=1e-7, b=1e-10, mass_density=1.0)
    assert quadrupole_anisotropy_exact(g, 1.0) == pytest.approx(g.a**2 / 4, rel=1e-5)


def test_exact_anisotropy_converges_toward_closed_form():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExpansionWarning)
        errs = []
        for ratio in (0.3, 0.2, 0.1):
            g = Geometry(a=1e-7, b=1e-7 * ratio, mass_density=1.0)
            ex = quadrupole_anisotropy_exact(g, 1.0)
            errs.append(abs(quadrupole_anisotropy_closed(g, 1.0) - ex) / abs(ex))
    assert errs[0] > errs[1] > errs[2]


def test_exact_anisotropy_rejects_low_order():
    with pytest.raises(ValueError):
        quadrupole_anisotropy_exact(REF.geometry, 1.0, quad_order=8)


def test_epsilon_from_trap_is_plain_ratio():
    assert epsilon_from_trap(2.0, 3.0, 4.0, 5.0, 6.0) == pytest.approx(6.0 / (4 * 25 * 36))


# -- secular rates ------------------------------------------------------------

def test_splitting_zero_at_crossing():
    b = anti_crossing_field(REF)
    assert abs(qubit_splitting(REF, b)) < 1e-6 * REF.field.d_nv


def test_omega_gamma_definition_identity():
    for b in (1e-3, 0.05, 0.2):
        s = REF.with_b0(b)
        sec = secular_rates(s)
        i3 = derive_inertia(s.geometry).i_sym
        assert sec.omega_gamma**2 * i3 == pytest.approx(HBAR * sec.omega_l, rel=1e-13)


def test_omega_gamma_sqrt_scaling():
    w1 = secular_rates(REF.with_b0(0.02)).omega_gamma
    w4 = secular_rates(REF.with_b0(0.08)).omega_gamma
    assert w4 / w1 == pytest.approx(2.0, rel=1e-14)


def test_usc_ratios_at_90mt():
    sec = secular_rates(REF)
    assert sec.g_gamma / sec.omega_gamma > 10
    assert sec.g_beta / sec.omega_beta > 10


def test_degenerate_trap():
    from dataclasses import replace
    s = replace(REF, trap=replace(REF.trap, delta=0.0, udc_over_uac=0.0))
    with pytest.raises(DegenerateTrapError):
        secular_rates(s)


# -- dispersive rates ---------------------------------------------------------

def test_positive_branch_reference_rates():
    r = dispersive_rates(REF)
    assert r.branch is Branch.POSITIVE_DELTA
    assert r.beta_stable
    # gamma sees a repulsive potential in the squeezing branch
    assert 2 * r.chi_gamma > r.freq_gamma


def test_positive_branch_limit_without_trap():
    # omega_beta -> 0 leaves only the spin-induced stiffness
    from dataclasses import replace
    s = replace(REF, trap=replace(REF.trap, omega0=1e-6))
    r = dispersive_rates(s)
    assert r.freq_beta == pytest.approx(r.delta_omega_beta, rel=1e-12)


def test_far_detuned_gamma_frequency_matches_secular():
    s = replace_field(REF, d_nv=1e16, b0=1e-3)
    r = dispersive_rates(s)
    assert r.freq_gamma == pytest.approx(secular_rates(s).omega_gamma, rel=1e-6)


def replace_field(s, **kw):
    from dataclasses import replace
    return replace(s, field=replace(s.field, **kw))


def test_negative_branch_curvature_matching():
    s = REF.with_b0(0.15)
    r = dispersive_rates(s)
    sec = secular_rates(s)
    i3 = derive_inertia(s.geometry).i_sym
    assert r.branch is Branch.NEGATIVE_DELTA
    # repelled-branch stiffness freq^2 - 2 chi freq
    assert r.freq_gamma**2 - 2 * r.chi_gamma * r.freq_gamma == pytest.approx(
        HBAR * sec.omega_l / i3 - r.freq_gamma**2, rel=1e-9)


def test_anti_crossing_guard():
    with pytest.raises(AntiCrossingError):
        dispersive_rates(REF.with_b0(anti_crossing_field(REF)))


# -- validity -----------------------------------------------------------------

def test_validity_at_90mt():
    v = validity_report(REF)
    assert v.dispersive_ok and v.epsilon_ok and v.udc_ratio_ok and v.beta_stable
    assert all(t < 0.1 for t in v.dispersive_terms)


def test_validity_diverges_at_crossing():
    b = anti_crossing_field(REF)
    for side in (1 - 1e-6, 1 + 1e-6):
        assert not validity_report(REF.with_b0(b * side)).dispersive_ok
    near = validity_report(REF.with_b0(b * (1 - 1e-4))).dispersive_terms
    far = validity_report(REF.with_b0(b * (1 - 1e-2))).dispersive_terms
    assert all(n > f for n, f in zip(near, far))


def test_validity_infinite_threshold():
    b = anti_crossing_field(REF)
    assert validity_report(REF.with_b0(b * (1 - 1e-9)), threshold=math.inf).dispersive_ok


def test_validity_thermal_scaling():
    v0 = validity_report(REF).dispersive_terms
    v2 = validity_report(REF, n_thermal=2.0).dispersive_terms
    for a, b in zip(v0, v2):
        assert b == pytest.approx(5 * a, rel=1e-13)


# -- root finding -------------------------------------------------------------

def test_anti_crossing_root():
    assert find_anti_crossing(REF) == pytest.approx(REF.field.d_nv / REF.field.gamma_e, rel=1e-6)


def test_anti_crossing_scales_with_gamma():
    s2 = replace_field(REF, gamma_e=2 * REF.field.gamma_e)
    assert find_anti_crossing(s2) == pytest.approx(find_anti_crossing(REF) / 2, rel=2e-6)


def test_anti_crossing_independent_of_geometry():
    from dataclasses import replace
    s2 = replace(REF, geometry=Geometry(a=50e-9, b=30e-9, mass_density=1e3))
    assert find_anti_crossing(s2) == find_anti_crossing(REF)


def test_anti_crossing_bad_bracket():
    with pytest.raises(NoRootError):
        find_anti_crossing(REF, bracket=(0.2, 0.3))


def test_bstar_is_stability_edge():
    b = find_bstar(REF)
    below = dispersive_rates(REF.with_b0(b * (1 - 1e-4)))
    above = dispersive_rates(REF.with_b0(b * (1 + 1e-4)))
    assert below.beta_stable and not above.beta_stable


def test_bstar_rises_with_trap_frequency():
    vals = [find_bstar(REF.with_omega0(2 * math.pi * f)) for f in (2e6, 5e6, 10e6)]
    assert vals[0] < vals[1] < vals[2]


def test_resonance_root_hits_ratio():
    b = find_resonance_fields(REF, 2, Branch.POSITIVE_DELTA, "beta/gamma")
    assert frequency_ratio(REF.with_b0(b), "beta/gamma") == pytest.approx(2.0, rel=1e-5)


def test_resonance_huge_n_has_no_root():
    with pytest.raises(NoRootError):
        find_resonance_fields(REF, 10**6, Branch.NEGATIVE_DELTA)


def test_resonance_rejects_bracket_across_crossing():
    with pytest.raises(NoRootError):
        find_resonance_fields(REF, 1, Branch.POSITIVE_DELTA, bracket=(0.05, 0.15))


@settings(max_examples=40, deadline=None)
@given(b=st.floats(1e-3, 0.3))
def test_splitting_affine_and_decreasing(b):
    d1 = qubit_splitting(REF, b)
    d2 = qubit_splitting(REF, b + 1e-3)
    assert d2 < d1
    assert d1 - d2 == pytest.approx(REF.field.gamma_e * 1e-3, rel=1e-6)


def test_branch_parse_aliases():
    assert Branch.parse("negative") is Branch.NEGATIVE_DELTA
    assert Branch.parse("PositiveDelta") is Branch.POSITIVE_DELTA
    with pytest.raises(ValueError):
        Branch.parse("sideways")


def test_resonance_field_lookup_is_bisection_accurate():
    b = find_resonance_fields(REF, 3, Branch.POSITIVE_DELTA, "beta/gamma")
    grid = np.linspace(b * 0.99, b * 1.01, 5)
    ratios = [frequency_ratio(REF.with_b0(x), "beta/gamma") for x in grid]
    assert ratios[0] > 3 > ratios[-1]
