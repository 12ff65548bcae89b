import numpy as np
import pytest

from ionlens.fieldsolve import (
    BasisFileError,
    FieldEvaluationError,
    SolverError,
    _interior_free,
    _label_table,
    field_at,
    load_basis,
    potential_field,
    read_basis_header,
    relax,
    save_basis,
    solve_basis,
    solve_potential,
)
from ionlens.geometry import build_domain

from conftest import mini_geometry, plates_geometry


@pytest.fixture(scope="module")
def plates():
    domain = build_domain(plates_geometry(5e-3))
    return solve_basis(domain, tol=1e-8)


def test_parallel_plate_field(plates):
    # plate at 1 V, 5 mm below the grounded chip: E_z = +200 V/m between them
    for z in (-1e-3, -2.5e-3, -4e-3):
        s = field_at(plates, {"plate": 1.0}, (0.0, 0.0, z))
        assert s.E[2] == pytest.approx(200.0, rel=5e-3)
        assert abs(s.E[0]) < 1e-3 and abs(s.E[1]) < 1e-3
        assert s.potential == pytest.approx(-z / 5e-3, abs=5e-3)


def test_superposition(mini_basis):
    domain = mini_basis.domain
    volts = {"chip": 0.3, "ext1": -50.0, "ext2": -40.0, "ext3": -60.0, "ext4": -45.0, "plate": -1000.0}
    tol = 1e-6
    direct_c, direct_f, _ = solve_potential(domain, _label_table(domain, volts), tol=tol)
    summed = mini_basis.superpose(volts)
    scale = max(abs(v) for v in volts.values())
    assert np.max(np.abs(direct_c - summed.coarse)) < 10 * tol * scale
    assert np.max(np.abs(direct_f - summed.fine)) < 10 * tol * scale


def test_discrete_maximum_principle(mini_basis):
    tol = mini_basis.tolerance
    for k in range(len(mini_basis.electrode_ids)):
        for grid in (mini_basis.coarse[k], mini_basis.fine[k]):
            assert grid.min() >= -10 * tol
            assert grid.max() <= 1 + 10 * tol


def test_basis_sums_to_one_where_enclosure_absent(mini_basis):
    # on the axis near the chip the enclosure is far away: all-electrodes-at-1V is ~1 V
    total = sum(field_at(mini_basis, {e: 1.0}, (0, 0, -1e-3)).potential for e in mini_basis.electrode_ids)
    assert 0.95 < total <= 1.0 + 1e-6


def test_field_inside_electrode_rejected(mini_basis):
    with pytest.raises(FieldEvaluationError):
        field_at(mini_basis, {"plate": 1.0}, (0, 0, -8.5e-3))
    with pytest.raises(FieldEvaluationError):
        field_at(mini_basis, {"plate": 1.0}, (0, 0, 5e-3))
    with pytest.raises(KeyError):
        field_at(mini_basis, {"nope": 1.0}, (0, 0, -1e-3))


def test_fine_and_coarse_agree_near_boundary(mini_basis):
    volts = {"ext1": -50.0, "ext2": -50.0, "ext3": -50.0, "ext4": -50.0, "plate": -1000.0}
    pm = mini_basis.superpose(volts)
    # the refined grid's faces are pinned to the coarse solution
    inside = potential_field(pm, (0, 0, -4e-3 + 1e-9))
    outside = potential_field(pm, (0, 0, -4e-3 - 1e-9))
    assert inside.potential == pytest.approx(outside.potential, rel=1e-5)
    assert inside.E[2] == pytest.approx(outside.E[2], rel=0.1)


def test_relax_nonconvergence_raises():
    phi = np.zeros((20, 20, 20))
    phi[:, :, 0] = 1.0
    labels = np.zeros(phi.shape, dtype=np.int8)
    with pytest.raises(SolverError) as exc:
        relax(phi, _interior_free(labels), tol=1e-12, max_iters=10)
    assert len(exc.value.residual_history) >= 1


def test_cache_round_trip(mini_basis, tmp_path):
    path = tmp_path / "mini.ionb"
    save_basis(mini_basis, path)
    back = load_basis(path, mini_basis.domain)
    assert back.coarse.tobytes() == mini_basis.coarse.tobytes()
    assert back.fine.tobytes() == mini_basis.fine.tobytes()
    assert back.tolerance == mini_basis.tolerance
    hdr = read_basis_header(path)
    assert hdr["electrode_ids"] == mini_basis.electrode_ids
    # saving again yields an identical file
    path2 = tmp_path / "again.ionb"
    save_basis(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_cache_detects_corruption(mini_basis, tmp_path):
    path = tmp_path / "mini.ionb"
    save_basis(mini_basis, path)
    raw = bytearray(path.read_bytes())
    raw[-100] ^= 0x01
    bad = tmp_path / "bad.ionb"
    bad.write_bytes(bytes(raw))
    with pytest.raises(BasisFileError, match="checksum"):
        load_basis(bad, mini_basis.domain)
    trunc = tmp_path / "trunc.ionb"
    trunc.write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(BasisFileError):
        load_basis(trunc, mini_basis.domain)
    wrong = tmp_path / "wrong.ionb"
    wrong.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(BasisFileError):
        load_basis(wrong, mini_basis.domain)


def test_cache_rejects_other_geometry(mini_basis, tmp_path):
    path = tmp_path / "mini.ionb"
    save_basis(mini_basis, path)
    other = build_domain(mini_geometry(refined=False))
    with pytest.raises(BasisFileError, match="stale"):
        load_basis(path, other)


def test_threaded_solve_is_identical():
    domain = build_domain(mini_geometry(refined=False))
    a = solve_basis(domain, tol=1e-6, threads=1)
    b = solve_basis(domain, tol=1e-6, threads=3)
    assert a.coarse.tobytes() == b.coarse.tobytes()
