import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ionlens.report import (
    AffineFit,
    ImagingReport,
    LinearFit,
    curve_svg,
    heatmap_svg,
    principal_axis_angle,
    rotation_angle,
    scatter_svg,
)


def test_linear_fit_exact_line():
    x = np.linspace(-100, 100, 9)
    f = LinearFit.fit(x, 48e-6 * x + 1e-3)
    assert f.slope == pytest.approx(48e-6)
    assert f.intercept == pytest.approx(1e-3)
    assert f.r2 == pytest.approx(1.0)
    assert f.max_residual < 1e-15
    assert f.n == 9


def test_linear_fit_ci_covers_truth(rng):
    x = np.linspace(0, 1, 50)
    y = 2.0 * x + rng.normal(0, 0.05, x.size)
    f = LinearFit.fit(x, y)
    assert abs(f.slope - 2.0) < f.slope_ci95
    assert 0.9 < f.r2 < 1.0


def test_linear_fit_rejects_degenerate():
    with pytest.raises(ValueError):
        LinearFit.fit([1.0], [2.0])
    with pytest.raises(ValueError):
        LinearFit.fit([1.0, 1.0], [2.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0.1, 50), st.floats(0.1, 50), st.floats(-math.pi, math.pi),
    st.floats(-1e-2, 1e-2), st.floats(-1e-2, 1e-2),
)
def test_affine_fit_recovers_scaled_rotation(mx, my, theta, bx, by):
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    A = rot @ np.diag([mx, my])
    s = np.array([[x, y] for x in (-1e-4, 0, 1e-4) for y in (-1e-4, 0, 1e-4)])
    imp = s @ A.T + [bx, by]
    fit = AffineFit.fit(s, imp)
    assert fit.m_x == pytest.approx(mx, rel=1e-6)
    assert fit.m_y == pytest.approx(my, rel=1e-6)
    assert fit.magnification == pytest.approx((mx + my) / 2, rel=1e-6)
    assert fit.max_residual() < 1e-9


def test_affine_fit_needs_three_points():
    with pytest.raises(ValueError):
        AffineFit.fit(np.zeros((2, 2)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.floats(-89.0, 90.0))
def test_principal_axis_angle(deg):
    t = np.linspace(-1, 1, 11)
    a = math.radians(deg)
    pts = np.column_stack([t * math.cos(a), t * math.sin(a)]) + [3.0, -2.0]
    got = math.degrees(principal_axis_angle(pts))
    assert abs((got - deg + 90) % 180 - 90) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(-3.0, 3.0))
def test_rotation_angle(theta):
    g = np.array([[x, y] for x in range(-2, 3) for y in range(-2, 3)], dtype=float)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    img = 7.0 * g @ rot.T + [1.0, 2.0]
    assert rotation_angle(g, img) == pytest.approx(theta, abs=1e-9)


def test_report_csv_and_json():
    rep = ImagingReport("demo", {"a": np.array([0.1, 0.2]), "b": np.array([1, 2])}, summary={"x": np.float64(1.5)},
                        fits={"f": LinearFit.fit([0, 1, 2], [0, 1, 2])})
    csv_text = rep.to_csv()
    assert csv_text.splitlines() == ["a,b", "0.1,1", "0.2,2"]
    d = json.loads(rep.summary_json())
    assert d["scan"] == "demo" and d["x"] == 1.5 and d["fits"]["f"]["slope"] == pytest.approx(1.0)


def test_svgs_are_wellformed_and_carry_data():
    svgs = [
        heatmap_svg([1, 2], [3, 4, 5], np.arange(6.0).reshape(2, 3), "t", "x", "y"),
        curve_svg([0, 1, 2], {"s": [1.0, float("nan"), 3.0]}, "t", "x", "y"),
        scatter_svg({"p": np.array([[0.0, 1.0], [2.0, 3.0]])}, "t", "x", "y"),
    ]
    for s in svgs:
        root = ET.fromstring(s)
        assert root.tag.endswith("svg")
        assert "<!-- data:" in s
