import math

import numpy as np
import pytest

from ionlens.imaging import (
    GAUSS,
    MultipoleSet,
    WorkingPoint,
    align_image,
    alignment_recipe,
    bfield_scan,
    deflection_scan,
    depth_of_field,
    disc_starts,
    extraction_region,
    field_of_view_map,
    magnification_scan,
    quadrupole_scan,
    rotate90,
    square_lattice,
    stray_compensation,
)

slow = pytest.mark.slow


# --- pure helpers ----------------------------------------------------------


def test_working_point_voltages():
    v = WorkingPoint().voltages()
    assert v["chip"] == 0 and v["con"] == -1000 and v["cem"] == -2300
    assert all(v[f"ext{i}"] == -50 for i in range(1, 5))
    assert all(v[f"dt{i}"] == -2000 for i in range(1, 5))


def test_working_point_from_dict_forms():
    a = WorkingPoint.from_dict({"ext": [-55, -55, -45, -45], "dt": {"u": -2000, "u_qp": 190}, "con": -900})
    assert a.ext == MultipoleSet(-50, -5, -5, 0)
    assert a.dt.u_qp == 190 and a.con == -900 and a.cem == -2300
    assert WorkingPoint.from_dict(a.to_dict()) == a
    assert WorkingPoint.from_voltages(a.voltages()) == a
    with pytest.raises(ValueError):
        WorkingPoint.from_dict({"ext": [1, 2, 3]})


def test_rotate90_moves_segment_pattern():
    ms = MultipoleSet(-50, 1.0, 2.0, 3.0)
    r = rotate90(ms)
    assert (r.u_x, r.u_y, r.u_qp) == (-2.0, 1.0, -3.0)
    assert rotate90(rotate90(rotate90(rotate90(ms)))) == ms


def test_lattices():
    s = square_lattice(3, 1e-4, -1e-4)
    assert s.shape == (9, 3) and np.allclose(s.mean(axis=0), [0, 0, -1e-4])
    d = disc_starts(1e-4)
    assert d.shape == (41, 3)
    assert np.max(np.hypot(d[:, 0], d[:, 1])) == pytest.approx(1e-4)


def test_alignment_recipes():
    assert alignment_recipe(90.0, "y") == WorkingPoint()
    assert alignment_recipe(45.0, "y").dt.u_qp == pytest.approx(200.0)
    assert alignment_recipe(45.0, "x").dt.u_qp == pytest.approx(-200.0)
    r = alignment_recipe(0.0, "y")
    assert r.ext == MultipoleSet(-50, -5, -5, 0)
    assert r.dt == MultipoleSet(-2000, -5, -85, 190)
    seg = r.voltages()
    assert (seg["dt1"], seg["dt2"], seg["dt3"], seg["dt4"]) == (-1815, -2275, -1805, -2105)
    assert (seg["ext1"], seg["ext2"], seg["ext3"], seg["ext4"]) == (-55, -55, -45, -45)
    with pytest.raises(ValueError):
        alignment_recipe(-90.0)
    with pytest.raises(ValueError):
        alignment_recipe(10.0, "z")


# --- scans on the solved default stack --------------------------------------


@slow
def test_working_point_magnification(bench):
    rep = magnification_scan(bench, [-50, -200], [-1000])
    m = rep.column("M")
    # frozen from the calibrated default stack
    assert m[0] == pytest.approx(9.438, rel=2e-3)
    assert m[1] == pytest.approx(4.059, rel=2e-3)
    # round lens: no astigmatism on the axis
    assert rep.column("M_x")[0] == pytest.approx(rep.column("M_y")[0], rel=1e-3)
    assert rep.summary["flagged_cells"] == 0
    assert "<svg" in rep.svg


@slow
def test_magnification_flags_lost_particles(bench):
    # a starting point far outside the bore cannot reach the detector
    rep = field_of_view_map(bench, -50, offsets=[0.0, 2.5e-3])
    lost = rep.column("lost")
    assert lost[0] == 0 and lost[-1] > 0
    assert math.isnan(rep.column("M")[-1])


@slow
def test_field_of_view_edge_exceeds_centre(bench):
    s = field_of_view_map(bench, -50, offsets=[-1e-3, 0.0, 1e-3]).summary
    assert s["M_edge"] > s["M_center"]


@slow
def test_deflection_linear(bench):
    rep = deflection_scan(bench, np.arange(-100, 101, 25), [0])
    s = rep.summary
    assert s["r2"] > 0.999
    assert s["slope_um_per_V"] == pytest.approx(52.5, rel=0.02)
    assert s["crosstalk"] < 1e-3
    assert s["M_max_deviation"] < 0.05


@slow
def test_deflection_symmetry(bench):
    rep = deflection_scan(bench, [-50, 50], [-50, 50])
    dx = rep.column("dX_m").reshape(2, 2)
    dy = rep.column("dY_m").reshape(2, 2)
    assert dx[0, 0] == pytest.approx(-dx[1, 0], rel=1e-3)
    assert dy[0, 0] == pytest.approx(-dy[0, 1], rel=1e-3)


@slow
def test_extraction_region_coarse(bench):
    s = extraction_region(bench, n_angles=8, tol=2e-5).summary
    assert s["center_detected_all"]
    assert s["width_ratio"] > 1.1
    assert s["area_dipole_m2"] > s["area0_m2"]


@slow
def test_extraction_rejects_bad_angle_count(bench):
    with pytest.raises(ValueError):
        extraction_region(bench, n_angles=6)


@slow
def test_quadrupole_breaks_symmetry(bench):
    rep = quadrupole_scan(bench, [0.0, 0.1, 0.15, 0.2])
    mx, my = rep.column("M_x"), rep.column("M_y")
    assert mx[0] == pytest.approx(my[0], rel=1e-2)
    assert np.all(np.diff(mx) > 0)
    assert rep.summary["M_y_local_minima_ratio"] == [0.15]
    assert 0.14 < rep.summary["M_y_minima_refined"][0] < 0.16


@slow
def test_quadrupole_sign_swaps_axes(bench):
    a = quadrupole_scan(bench, [0.1])
    b = quadrupole_scan(bench, [-0.1])
    assert a.column("M_x")[0] == pytest.approx(b.column("M_y")[0], rel=1e-3)
    assert a.column("M_y")[0] == pytest.approx(b.column("M_x")[0], rel=1e-3)


@slow
def test_oblique_line_aligned(bench):
    al = align_image(bench, 45.0, "y")
    assert al.reached.all()
    assert al.deviation_deg < 10
    al_x = align_image(bench, 45.0, "x")
    assert al_x.deviation_deg < 10
    rep = al.report(45.0, "y")
    assert rep.summary["deviation_deg"] == al.deviation_deg


@slow
def test_depth_of_field_monotone(bench):
    s = depth_of_field(bench, [1e-4, 1e-3, 2e-3]).summary
    assert s["monotone_increasing"]
    assert s["delta_M"] == pytest.approx(0.259, rel=0.05)


@slow
def test_bfield_zero_b_matches_reference(bench):
    rep = bfield_scan(bench, [0.0, 1000.0], [0.0, 500.0], n=3)
    s = rep.summary
    assert s["zero_B_rotation_deg"] < 1e-3
    assert s["zero_B_shift_m"] < 1e-7
    # rotation sense follows the sign of B_z
    neg = bfield_scan(bench, [0.0, -1000.0], [], n=3)
    rz = rep.column("rotation_deg")[1]
    assert neg.column("rotation_deg")[1] == pytest.approx(-rz, rel=1e-2)
    assert GAUSS == 1e-4


@slow
def test_stray_field_coefficients(bench):
    s = stray_compensation(bench).summary
    assert s["monopole_V_per_cm_per_V"] == pytest.approx(2.155, rel=5e-3)
    assert s["dipole_mV_per_cm_per_V"] == pytest.approx(26.11, rel=5e-3)
    assert s["alpha_max_deviation_deg"] < 1e-6
