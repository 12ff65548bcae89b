"""Electrode stack description and rasterization onto nested voxel grids.

All lengths are in metres. The chip surface sits at ``z = 0`` and the stack
extends towards negative ``z``; particles start just below the chip and fly
down to the detector plane.

Labels on a voxel grid:

* ``FREE`` (0): vacuum, solved for,
* ``GROUND`` (1): grounded enclosure,
* ``2 + k``: electrode ``domain.electrode_ids[k]``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

FREE = 0
GROUND = 1
ELECTRODE_BASE = 2

MIN_SEPARATION = 1.0e-3  # m
MAX_FIELD_STRESS = 1.0e6  # V/m, i.e. 1 kV/mm

_EPS = 1e-12


class GeometryError(ValueError):
    """Raised for geometry specs that cannot be rasterized."""


def _segment_index(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # 0 -> +x, 1 -> +y, 2 -> -x, 3 -> -y
    theta = np.arctan2(y, x)
    return np.mod(np.rint(theta / (0.5 * np.pi)).astype(np.int64), 4)


def _in_segment_gap(x: np.ndarray, y: np.ndarray, gap: float) -> np.ndarray:
    half = 0.5 * gap
    d1 = np.abs(x - y) / math.sqrt(2.0)
    d2 = np.abs(x + y) / math.sqrt(2.0)
    return (d1 < half - _EPS) | (d2 < half - _EPS)


# ---------------------------------------------------------------------------
# electrode shapes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlaneElectrode:
    """Flat conductor closing the top of the stack (the atom chip)."""

    id: str = "chip"
    z_position: float = 0.0
    radius: float = 13.0e-3
    thickness: float = 0.0
    shape: str = field(default="plane", init=False)

    segmented = False

    def z_extent(self) -> tuple[float, float]:
        return self.z_position - self.thickness, self.z_position

    def r_extent(self) -> tuple[float, float]:
        return 0.0, self.radius

    def occupancy(self, x, y, z) -> np.ndarray:
        r = np.hypot(x, y)
        zmin, _ = self.z_extent()
        inside = (z >= zmin - _EPS) & (r <= self.radius + _EPS)
        return np.where(inside, 0, -1)


@dataclass(frozen=True)
class AnnularPlate:
    """Plate with a central bore, optionally split into four quadrants."""

    id: str = "ext"
    z_position: float = -4.5e-3
    thickness: float = 1.0e-3
    bore_radius: float = 1.25e-3
    outer_radius: float = 10.0e-3
    segmented: bool = True
    segment_gap: float = 1.0e-3
    shape: str = field(default="annular-plate", init=False)

    def z_extent(self) -> tuple[float, float]:
        return self.z_position - self.thickness, self.z_position

    def r_extent(self) -> tuple[float, float]:
        return self.bore_radius, self.outer_radius

    def occupancy(self, x, y, z) -> np.ndarray:
        r = np.hypot(x, y)
        zmin, zmax = self.z_extent()
        inside = (z >= zmin - _EPS) & (z <= zmax + _EPS)
        inside &= (r >= self.bore_radius - _EPS) & (r <= self.outer_radius + _EPS)
        if not self.segmented:
            return np.where(inside, 0, -1)
        inside &= ~_in_segment_gap(x, y, self.segment_gap)
        return np.where(inside, _segment_index(x, y), -1)


@dataclass(frozen=True)
class Cone:
    """Thick electrode with a linearly tapered (frustum) bore."""

    id: str = "con"
    z_position: float = -6.5e-3
    length: float = 5.0e-3
    entrance_radius: float = 2.5e-3
    exit_radius: float = 10.0e-3
    outer_radius: float = 11.0e-3
    shape: str = field(default="cone", init=False)

    segmented = False

    def z_extent(self) -> tuple[float, float]:
        return self.z_position - self.length, self.z_position

    def r_extent(self) -> tuple[float, float]:
        return min(self.entrance_radius, self.exit_radius), self.outer_radius

    def inner_radius(self, z):
        frac = np.clip((self.z_position - z) / self.length, 0.0, 1.0)
        return self.entrance_radius + (self.exit_radius - self.entrance_radius) * frac

    def occupancy(self, x, y, z) -> np.ndarray:
        r = np.hypot(x, y)
        zmin, zmax = self.z_extent()
        inside = (z >= zmin - _EPS) & (z <= zmax + _EPS)
        inside &= (r >= self.inner_radius(z) - _EPS) & (r <= self.outer_radius + _EPS)
        return np.where(inside, 0, -1)


@dataclass(frozen=True)
class Tube:
    """Cylindrical tube, optionally split lengthwise into four segments."""

    id: str = "dt"
    z_position: float = -12.5e-3
    length: float = 56.0e-3
    inner_radius: float = 10.0e-3
    wall: float = 1.0e-3
    segmented: bool = True
    segment_gap: float = 1.0e-3
    shape: str = field(default="tube", init=False)

    def z_extent(self) -> tuple[float, float]:
        return self.z_position - self.length, self.z_position

    def r_extent(self) -> tuple[float, float]:
        return self.inner_radius, self.inner_radius + self.wall

    def occupancy(self, x, y, z) -> np.ndarray:
        r = np.hypot(x, y)
        zmin, zmax = self.z_extent()
        inside = (z >= zmin - _EPS) & (z <= zmax + _EPS)
        inside &= (r >= self.inner_radius - _EPS) & (r <= self.inner_radius + self.wall + _EPS)
        if not self.segmented:
            return np.where(inside, 0, -1)
        inside &= ~_in_segment_gap(x, y, self.segment_gap)
        return np.where(inside, _segment_index(x, y), -1)


def default_apertures() -> tuple[tuple[float, float, float, float], ...]:
    """CEM openings (xmin, xmax, ymin, ymax) of the 2x2 array.

    Outer CEM sizes are 5x5 mm (row at +y) and 5x10 mm (row at -y); a 200 um
    wall on each CEM leaves 400 um dead gaps between neighbouring openings.
    The array spans 10 x 15 mm and is centred on the optical axis.
    """
    w = 0.2e-3
    cols = ((-5.0e-3, 0.0), (0.0, 5.0e-3))
    rows = ((2.5e-3, 7.5e-3), (-7.5e-3, 2.5e-3))
    out = []
    # numbering: 1 (+x,+y), 2 (-x,+y), 3 (-x,-y), 4 (+x,-y)
    for (x0, x1), (y0, y1) in (
        (cols[1], rows[0]),
        (cols[0], rows[0]),
        (cols[0], rows[1]),
        (cols[1], rows[1]),
    ):
        out.append((x0 + w, x1 - w, y0 + w, y1 - w))
    return tuple(out)


@dataclass(frozen=True)
class CemPlate:
    """Mounting electrode of the CEM array.

    A disc whose front face is the detector plane, pierced by rectangular
    apertures (the CEM openings). Material behind the disc down to the bottom
    of the domain is held at the same potential, and an optional collar tube
    rises from the disc towards the drift tube.
    """

    id: str = "cem"
    z_position: float = -83.0e-3
    thickness: float = 1.0e-3
    outer_radius: float = 11.0e-3
    apertures: tuple[tuple[float, float, float, float], ...] = field(default_factory=default_apertures)
    collar_length: float = 13.5e-3
    collar_inner_radius: float = 10.0e-3
    collar_wall: float = 1.0e-3
    shape: str = field(default="cem-plate", init=False)

    segmented = False

    def z_extent(self) -> tuple[float, float]:
        # the backing extends to the domain floor, callers clip
        return -math.inf, self.z_position + self.collar_length

    def r_extent(self) -> tuple[float, float]:
        return 0.0, self.outer_radius

    def aperture_index(self, x, y) -> np.ndarray:
        """1-based aperture id containing (x, y), or 0."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        idx = np.zeros(np.broadcast(x, y).shape, dtype=np.int64)
        for k, (x0, x1, y0, y1) in enumerate(self.apertures):
            hit = (x > x0) & (x < x1) & (y > y0) & (y < y1)
            idx = np.where((idx == 0) & hit, k + 1, idx)
        return idx

    def array_bounds(self) -> tuple[float, float, float, float]:
        a = np.asarray(self.apertures)
        return a[:, 0].min(), a[:, 1].max(), a[:, 2].min(), a[:, 3].max()

    def occupancy(self, x, y, z) -> np.ndarray:
        r = np.hypot(x, y)
        zf = self.z_position
        plate = (z <= zf + _EPS) & (z >= zf - self.thickness - _EPS) & (r <= self.outer_radius + _EPS)
        plate &= self.aperture_index(x, y) == 0
        backing = (z < zf - self.thickness - _EPS) & (r <= self.outer_radius + _EPS)
        collar = (z >= zf - _EPS) & (z <= zf + self.collar_length + _EPS)
        collar &= (r >= self.collar_inner_radius - _EPS)
        collar &= r <= self.collar_inner_radius + self.collar_wall + _EPS
        return np.where(plate | backing | collar, 0, -1)


ElectrodeSpec = PlaneElectrode | AnnularPlate | Cone | Tube | CemPlate

_SHAPES: dict[str, type] = {
    "plane": PlaneElectrode,
    "annular-plate": AnnularPlate,
    "cone": Cone,
    "tube": Tube,
    "cem-plate": CemPlate,
}


def electrode_to_dict(e: ElectrodeSpec) -> dict[str, Any]:
    d = asdict(e)
    if "apertures" in d:
        d["apertures"] = [list(a) for a in d["apertures"]]
    return d


def electrode_from_dict(d: dict[str, Any]) -> ElectrodeSpec:
    d = dict(d)
    shape = d.pop("shape", None)
    if shape not in _SHAPES:
        raise GeometryError(f"unknown electrode shape {shape!r}")
    cls = _SHAPES[shape]
    names = {f.name for f in fields(cls) if f.init}
    unknown = set(d) - names
    if unknown:
        raise GeometryError(f"unknown fields for {shape}: {sorted(unknown)}")
    if "apertures" in d:
        d["apertures"] = tuple(tuple(float(v) for v in a) for a in d["apertures"])
    return cls(**d)


def sub_ids(e: ElectrodeSpec) -> list[str]:
    """Independent electrode ids for ``e``; segmented shapes expand to four."""
    if getattr(e, "segmented", False):
        return [f"{e.id}{i}" for i in range(1, 5)]
    return [e.id]


# ---------------------------------------------------------------------------
# geometry spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RefinedRegion:
    z_min: float = -8.0e-3
    z_max: float = 0.0
    half_width: float = 4.0e-3
    spacing: float = 0.05e-3


@dataclass(frozen=True)
class GeometrySpec:
    electrodes: tuple[ElectrodeSpec, ...] = ()
    domain_radius: float = 14.0e-3
    domain_length: float = 83.0e-3
    floor_depth: float = 2.0e-3
    grid_spacing_coarse: float = 0.25e-3
    refined_region: RefinedRegion | None = field(default_factory=RefinedRegion)
    deflector_entrance_z: float = -12.5e-3

    @property
    def detector_z(self) -> float:
        return -self.domain_length

    @property
    def z_floor(self) -> float:
        return -(self.domain_length + self.floor_depth)

    def electrode(self, group_id: str) -> ElectrodeSpec:
        for e in self.electrodes:
            if e.id == group_id:
                return e
        raise KeyError(group_id)

    def electrode_ids(self) -> list[str]:
        out: list[str] = []
        for e in self.electrodes:
            out.extend(sub_ids(e))
        return out

    def cem(self) -> CemPlate | None:
        for e in self.electrodes:
            if isinstance(e, CemPlate):
                return e
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "length_unit": "m",
            "electrodes": [electrode_to_dict(e) for e in self.electrodes],
            "domain_radius": self.domain_radius,
            "domain_length": self.domain_length,
            "floor_depth": self.floor_depth,
            "grid_spacing_coarse": self.grid_spacing_coarse,
            "refined_region": asdict(self.refined_region) if self.refined_region else None,
            "deflector_entrance_z": self.deflector_entrance_z,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GeometrySpec":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise GeometryError(f"unsupported geometry schema_version {version!r}")
        if d.get("length_unit", "m") != "m":
            raise GeometryError("geometry lengths must be given in metres")
        rr = d.get("refined_region")
        return cls(
            electrodes=tuple(electrode_from_dict(e) for e in d.get("electrodes", [])),
            domain_radius=float(d.get("domain_radius", 14.0e-3)),
            domain_length=float(d.get("domain_length", 83.0e-3)),
            floor_depth=float(d.get("floor_depth", 2.0e-3)),
            grid_spacing_coarse=float(d.get("grid_spacing_coarse", 0.25e-3)),
            refined_region=RefinedRegion(**rr) if rr else None,
            deflector_entrance_z=float(d.get("deflector_entrance_z", -12.5e-3)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeometrySpec":
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def default_geometry(
    *,
    cone_entrance_radius: float = 1.25e-3,
    cone_exit_radius: float = 10.0e-3,
    drift_inner_radius: float = 10.0e-3,
    ext_cone_gap: float = 1.0e-3,
    coarse_spacing: float = 0.25e-3,
    refined_spacing: float | None = 0.05e-3,
) -> GeometrySpec:
    """The five-element stack: chip, extractor, cone, drift tube, CEM array."""
    ext = AnnularPlate()
    con_top = ext.z_position - ext.thickness - ext_cone_gap
    dt_top = -12.5e-3
    con = Cone(
        z_position=con_top,
        length=con_top - dt_top - 1.0e-3,
        entrance_radius=cone_entrance_radius,
        exit_radius=cone_exit_radius,
    )
    dt = Tube(z_position=dt_top, inner_radius=drift_inner_radius)
    dt_bottom = dt.z_position - dt.length
    cem_z = -83.0e-3
    cem = CemPlate(
        z_position=cem_z,
        collar_inner_radius=drift_inner_radius,
        collar_length=(dt_bottom - 1.0e-3) - cem_z,
    )
    refined = RefinedRegion(spacing=refined_spacing) if refined_spacing else None
    return GeometrySpec(
        electrodes=(PlaneElectrode(), ext, con, dt, cem),
        grid_spacing_coarse=coarse_spacing,
        refined_region=refined,
        deflector_entrance_z=dt_top,
    )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    a: str
    b: str
    value: float
    limit: float

    def __str__(self) -> str:
        if self.rule == "separation":
            return f"{self.a}-{self.b}: separation {self.value * 1e3:.3f} mm < {self.limit * 1e3:.3f} mm"
        return f"{self.a}-{self.b}: field stress {self.value / 1e6:.3f} kV/mm > {self.limit / 1e6:.3f} kV/mm"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "violations": [asdict(v) for v in self.violations]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _interval_gap(a: tuple[float, float], b: tuple[float, float]) -> float:
    return max(b[0] - a[1], a[0] - b[1])


def _pair_distance(e1: ElectrodeSpec, e2: ElectrodeSpec, z_floor: float) -> float:
    z1 = (max(e1.z_extent()[0], z_floor), e1.z_extent()[1])
    z2 = (max(e2.z_extent()[0], z_floor), e2.z_extent()[1])
    dz = _interval_gap(z1, z2)
    dr = _interval_gap(e1.r_extent(), e2.r_extent())
    if dz < 0 and dr < 0:
        return max(dz, dr)
    return math.hypot(max(dz, 0.0), max(dr, 0.0))


def _group_voltage_range(e: ElectrodeSpec, voltages: dict[str, float]) -> list[tuple[str, float]]:
    return [(sid, float(voltages[sid])) for sid in sub_ids(e) if sid in voltages]


def validate_spec(spec: GeometrySpec, voltages: dict[str, float] | None = None) -> ValidationReport:
    """Check the 1 mm separation rule and, given voltages, the 1 kV/mm stress rule.

    ``voltages`` maps electrode ids (segment ids, or group ids which apply to
    every segment) to volts. The enclosure is at 0 V.
    """
    report = ValidationReport()
    volts = expand_voltages(spec, voltages) if voltages is not None else None
    elec = list(spec.electrodes)

    def check(a: str, b: str, dist: float, va: Iterable[tuple[str, float]], vb: Iterable[tuple[str, float]]):
        if dist < MIN_SEPARATION - 1e-12:
            report.violations.append(Violation("separation", a, b, dist, MIN_SEPARATION))
        if volts is None or dist <= 0:
            return
        for ida, ua in va:
            for idb, ub in vb:
                stress = abs(ua - ub) / dist
                if stress > MAX_FIELD_STRESS * (1 + 1e-9):
                    report.violations.append(Violation("stress", ida, idb, stress, MAX_FIELD_STRESS))

    for i, e1 in enumerate(elec):
        v1 = _group_voltage_range(e1, volts) if volts else []
        for e2 in elec[i + 1 :]:
            v2 = _group_voltage_range(e2, volts) if volts else []
            check(e1.id, e2.id, _pair_distance(e1, e2, spec.z_floor), v1, v2)
        # enclosure wall
        dist = spec.domain_radius - e1.r_extent()[1]
        check(e1.id, "enclosure", dist, v1, [("enclosure", 0.0)])
        # neighbouring segments of one group
        if getattr(e1, "segmented", False) and volts:
            ids = sub_ids(e1)
            for k in range(4):
                a, b = ids[k], ids[(k + 1) % 4]
                check(a, b, e1.segment_gap, [(a, volts[a])], [(b, volts[b])])
        elif getattr(e1, "segmented", False) and e1.segment_gap < MIN_SEPARATION - 1e-12:
            report.violations.append(Violation("separation", f"{e1.id}1", f"{e1.id}2", e1.segment_gap, MIN_SEPARATION))
    return report


def expand_voltages(spec: GeometrySpec, voltages: dict[str, float]) -> dict[str, float]:
    """Resolve group ids to segment ids; unspecified electrodes default to 0 V."""
    out: dict[str, float] = {}
    for e in spec.electrodes:
        for sid in sub_ids(e):
            if sid in voltages:
                out[sid] = float(voltages[sid])
            elif e.id in voltages:
                out[sid] = float(voltages[e.id])
            else:
                out[sid] = 0.0
    known = set(out) | {e.id for e in spec.electrodes}
    unknown = set(voltages) - known
    if unknown:
        raise KeyError(f"unknown electrode ids: {sorted(unknown)}")
    return out


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------


@dataclass
class GridRegion:
    """Uniform node grid; node (i, j, k) sits at ``origin + (i, j, k) * spacing``."""

    origin: np.ndarray
    spacing: float
    shape: tuple[int, int, int]
    labels: np.ndarray

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.asarray(self.shape) - 1)

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing * np.arange(self.shape[k])

    def contains(self, p: Sequence[float], margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.origin + margin) and np.all(p <= self.upper - margin))


@dataclass
class VoxelDomain:
    electrode_ids: list[str]
    coarse: GridRegion
    fine: GridRegion | None
    detector_z: float
    deflector_entrance_z: float
    domain_radius: float
    geometry_hash: str
    apertures: np.ndarray  # (n, 4) xmin, xmax, ymin, ymax
    cem_label: int = -1

    @property
    def regions(self) -> list[GridRegion]:
        return [r for r in (self.fine, self.coarse) if r is not None]

    def label_of(self, electrode_id: str) -> int:
        return ELECTRODE_BASE + self.electrode_ids.index(electrode_id)

    def id_of_label(self, label: int) -> str:
        if label == GROUND:
            return "enclosure"
        if label == FREE:
            return "free"
        if not 0 <= label - ELECTRODE_BASE < len(self.electrode_ids):
            return "outside the domain"
        return self.electrode_ids[label - ELECTRODE_BASE]


def _n_steps(extent: float, h: float, what: str) -> int:
    n = extent / h
    k = int(round(n))
    if k < 1 or abs(n - k) > 1e-6:
        raise GeometryError(f"spacing {h:g} m does not divide {what} extent {extent:g} m")
    return k


def _rasterize(
    spec: GeometrySpec,
    origin: np.ndarray,
    h: float,
    shape: tuple[int, int, int],
    mark_box_faces: bool,
) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.int8)
    xs = origin[0] + h * np.arange(shape[0])
    ys = origin[1] + h * np.arange(shape[1])
    zs = origin[2] + h * np.arange(shape[2])
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    R = np.hypot(X, Y)
    outside = R >= spec.domain_radius - _EPS

    label_base = {}
    nxt = ELECTRODE_BASE
    for e in spec.electrodes:
        label_base[e.id] = nxt
        nxt += len(sub_ids(e))
    if nxt > 127:
        raise GeometryError("too many electrodes")

    for k, z in enumerate(zs):
        sl = np.zeros(X.shape, dtype=np.int8)
        for e in spec.electrodes:
            zmin, zmax = e.z_extent()
            if z < zmin - _EPS or z > zmax + _EPS:
                continue
            occ = e.occupancy(X, Y, np.full_like(X, z))
            hit = (occ >= 0) & (sl == FREE)
            sl[hit] = label_base[e.id] + occ[hit]
        sl[outside] = GROUND
        if mark_box_faces and (k == 0 or k == shape[2] - 1):
            sl[sl == FREE] = GROUND
        labels[:, :, k] = sl
    if mark_box_faces:
        for face in (labels[0, :, :], labels[-1, :, :], labels[:, 0, :], labels[:, -1, :]):
            face[face == FREE] = GROUND
    return labels


def build_domain(spec: GeometrySpec) -> VoxelDomain:
    """Rasterize ``spec`` onto the coarse grid and the refined near-chip grid."""
    for e in spec.electrodes:
        if e.r_extent()[1] >= spec.domain_radius - _EPS:
            raise GeometryError(f"electrode {e.id} does not fit inside the enclosure")
    elec = list(spec.electrodes)
    for i, e1 in enumerate(elec):
        for e2 in elec[i + 1 :]:
            if _pair_distance(e1, e2, spec.z_floor) < 0:
                raise GeometryError(f"electrodes {e1.id} and {e2.id} overlap")
    ids = spec.electrode_ids()
    if len(set(ids)) != len(ids):
        raise GeometryError("duplicate electrode ids")

    h = spec.grid_spacing_coarse
    R = spec.domain_radius
    nxy = _n_steps(2 * R, h, "transverse") + 1
    nz = _n_steps(-spec.z_floor, h, "axial") + 1
    c_origin = np.array([-R, -R, spec.z_floor])
    coarse = GridRegion(c_origin, h, (nxy, nxy, nz), _rasterize(spec, c_origin, h, (nxy, nxy, nz), True))

    fine = None
    rr = spec.refined_region
    if rr is not None:
        if rr.half_width > R or rr.z_min < spec.z_floor or rr.z_max > 0.0 or rr.z_min >= rr.z_max:
            raise GeometryError("refined region lies outside the domain")
        for v, what in ((rr.half_width + R, "refined x-offset"), (rr.z_min - spec.z_floor, "refined z-offset")):
            if v > 0:
                _n_steps(v, h, what)
        hf = rr.spacing
        if hf >= h:
            raise GeometryError("refined spacing must be finer than the coarse spacing")
        _n_steps(h, hf, "coarse cell")
        nfx = _n_steps(2 * rr.half_width, hf, "refined transverse") + 1
        nfz = _n_steps(rr.z_max - rr.z_min, hf, "refined axial") + 1
        f_origin = np.array([-rr.half_width, -rr.half_width, rr.z_min])
        fine = GridRegion(
            f_origin, hf, (nfx, nfx, nfz), _rasterize(spec, f_origin, hf, (nfx, nfx, nfz), False)
        )

    cem = spec.cem()
    apertures = np.asarray(cem.apertures if cem else np.zeros((0, 4)), dtype=float).reshape(-1, 4)
    return VoxelDomain(
        electrode_ids=ids,
        coarse=coarse,
        fine=fine,
        detector_z=spec.detector_z,
        deflector_entrance_z=spec.deflector_entrance_z,
        domain_radius=R,
        geometry_hash=spec.hash(),
        apertures=apertures,
        cem_label=ELECTRODE_BASE + ids.index(cem.id) if cem else -1,
    )


def with_refined_spacing(spec: GeometrySpec, spacing: float) -> GeometrySpec:
    rr = spec.refined_region or RefinedRegion()
    return replace(spec, refined_region=replace(rr, spacing=spacing))
