import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ionlens.multipole import (
    MultipoleSet,
    NearAxisCalibration,
    SegmentVoltages,
    compose,
    decompose,
    fit_calibration,
    ideal_near_axis_field,
    segment_dict,
)

volts = st.floats(min_value=-5000, max_value=5000, allow_nan=False)


@given(volts, volts, volts, volts)
def test_compose_inverts_decompose(u1, u2, u3, u4):
    sv = SegmentVoltages(u1, u2, u3, u4)
    back = compose(decompose(sv)).as_tuple()
    assert np.allclose(back, sv.as_tuple(), rtol=0, atol=1e-9 * (1 + max(map(abs, sv.as_tuple()))))


@given(volts, volts, volts, volts)
def test_decompose_inverts_compose(u, ux, uy, uqp):
    ms = MultipoleSet(u, ux, uy, uqp)
    d = decompose(compose(ms))
    for a, b in zip((d.u, d.u_x, d.u_y, d.u_qp), (u, ux, uy, uqp)):
        assert a == pytest.approx(b, abs=1e-9 * (1 + abs(u) + abs(ux) + abs(uy) + abs(uqp)))


def test_dyadic_voltages_round_trip_exactly(rng):
    q = rng.integers(-20000, 20000, size=(1000, 4)) / 4.0
    for row in q:
        sv = SegmentVoltages(*row)
        assert compose(decompose(sv)) == sv


def test_segment_formulas():
    sv = compose(MultipoleSet(u=-2000, u_x=10, u_y=-20, u_qp=5))
    assert sv.as_tuple() == (-1985.0, -2025.0, -2005.0, -1985.0)


@pytest.mark.parametrize(
    "segments, expected",
    [
        # oblique line: deflector quadrupole only
        ((-1800, -2200, -1800, -2200), (-2000, 0, 0, 200)),
        # axis-aligned line: extractor dipole along the bisector
        ((-55, -55, -45, -45), (-50, -5, -5, 0)),
        # axis-aligned line: deflector dipole plus quadrupole
        ((-1815, -2275, -1805, -2105), (-2000, -5, -85, 190)),
    ],
)
def test_alignment_voltage_sets(segments, expected):
    ms = decompose(SegmentVoltages(*segments))
    assert (ms.u, ms.u_x, ms.u_y, ms.u_qp) == expected


def test_polar_form():
    ms = MultipoleSet.from_polar(-50, 11.5, math.radians(30))
    assert ms.u_xy == pytest.approx(11.5)
    assert math.degrees(ms.alpha) == pytest.approx(30)


def test_segment_dict_names():
    d = segment_dict("dt", MultipoleSet(u=-2000))
    assert d == {"dt1": -2000.0, "dt2": -2000.0, "dt3": -2000.0, "dt4": -2000.0}


def test_ideal_field_terms():
    cal = NearAxisCalibration(monopole=2.0, dipole=3.0, quadrupole=4.0)
    e = ideal_near_axis_field(MultipoleSet(u=1.0), (0, 0, 0), calib=cal)
    assert np.allclose(e, [0, 0, 2.0])
    e = ideal_near_axis_field(MultipoleSet(u_x=1.0, u_y=2.0), (0.1, 0.1, 0), calib=cal)
    assert np.allclose(e, [3.0, 6.0, 0])
    # positive quadrupole pushes along (-x, +y)
    e = ideal_near_axis_field(MultipoleSet(u_qp=1.0), (0.5, 0.5, 0), calib=cal)
    assert np.allclose(e, [-2.0, 2.0, 0])
    # axial gradient focuses radially
    e = ideal_near_axis_field(MultipoleSet(), (0.2, -0.4, 0), axial_gradient=10.0)
    assert np.allclose(e, [-1.0, 2.0, 0])


def test_fit_calibration_recovers_constants():
    cal = NearAxisCalibration(monopole=215.0, dipole=2.6, quadrupole=7.5e3)

    def fn(ms, p):
        return ideal_near_axis_field(ms, p, calib=cal)

    got = fit_calibration(fn, (0, 0, -1e-4), 1e-4)
    assert got.monopole == pytest.approx(215.0)
    assert got.dipole == pytest.approx(2.6)
    assert got.quadrupole == pytest.approx(7.5e3)
