import os
from pathlib import Path

import numpy as np
import pytest

from ionlens.fieldsolve import load_basis, save_basis, solve_basis
from ionlens.geometry import (
    AnnularPlate,
    GeometrySpec,
    PlaneElectrode,
    RefinedRegion,
    build_domain,
    default_geometry,
)
from ionlens.imaging import Bench

ACCEPTANCE_LINES: list[str] = []


def default_cache_path(spec: GeometrySpec) -> Path:
    root = os.environ.get("ION_OPTICS_CACHE_DIR")
    base = Path(root) if root else Path.home() / ".cache" / "ionlens"
    return base / f"{spec.hash()[:16]}.ionb"


@pytest.fixture(scope="session")
def default_spec() -> GeometrySpec:
    return default_geometry()


@pytest.fixture(scope="session")
def default_basis(default_spec):
    """The default-geometry basis, loaded from the cache or solved once and cached."""
    domain = build_domain(default_spec)
    path = default_cache_path(default_spec)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        save_basis(solve_basis(domain), path)
    return load_basis(path, domain)


@pytest.fixture(scope="session")
def bench(default_basis) -> Bench:
    return Bench(default_basis, cache_size=4)


def mini_geometry(refined: bool = True) -> GeometrySpec:
    """A small stack: grounded-capable chip, segmented extractor, solid plate."""
    return GeometrySpec(
        electrodes=(
            PlaneElectrode(radius=10e-3),
            AnnularPlate(id="ext", z_position=-3e-3, thickness=1e-3, bore_radius=1.25e-3, outer_radius=10e-3),
            AnnularPlate(id="plate", z_position=-8e-3, thickness=1e-3, bore_radius=0.0, outer_radius=12e-3, segmented=False),
        ),
        domain_radius=14e-3,
        domain_length=10e-3,
        floor_depth=2e-3,
        grid_spacing_coarse=0.5e-3,
        refined_region=RefinedRegion(z_min=-4e-3, z_max=0.0, half_width=2e-3, spacing=0.25e-3) if refined else None,
        deflector_entrance_z=-6e-3,
    )


def plates_geometry(gap: float = 5e-3) -> GeometrySpec:
    """Two wide solid plates: the chip at z=0 and a plate whose top face sits at -gap."""
    return GeometrySpec(
        electrodes=(
            PlaneElectrode(radius=13e-3),
            AnnularPlate(id="plate", z_position=-gap, thickness=1e-3, bore_radius=0.0, outer_radius=13e-3, segmented=False),
        ),
        domain_radius=14e-3,
        domain_length=gap + 2e-3,
        floor_depth=1e-3,
        grid_spacing_coarse=0.25e-3,
        refined_region=None,
        deflector_entrance_z=-gap / 2,
    )


@pytest.fixture(scope="session")
def mini_basis():
    domain = build_domain(mini_geometry())
    return solve_basis(domain, tol=1e-7)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
