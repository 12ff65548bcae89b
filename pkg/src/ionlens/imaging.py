"""Characterization scans of the ion-imaging column.

Every scan traces Rb+ ions (by default) from an object plane 100 um below the
chip and summarizes the detector-plane image in an :class:`ImagingReport`.
Magnifications come from a least-squares affine map between start and impact
coordinates; M is the mean of its singular values.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .fieldsolve import BasisSet, field_at
from .geometry import GeometrySpec, ValidationReport, validate_spec
from .multipole import MultipoleSet, decompose, segment_dict, SegmentVoltages
from .report import (
    AffineFit,
    ImagingReport,
    LinearFit,
    curve_svg,
    heatmap_svg,
    principal_axis_angle,
    rotation_angle,
    scatter_svg,
)
from .tracer import RB87_ION, FieldSource, Species, TraceOptions, Trajectory, batch_trace

GAUSS = 1e-4  # tesla
Z_OBJECT = -100e-6
PITCH = 100e-6


@dataclass(frozen=True)
class WorkingPoint:
    """Voltages of the whole stack; segmented electrodes carry multipole terms."""

    chip: float = 0.0
    ext: MultipoleSet = MultipoleSet(u=-50.0)
    con: float = -1000.0
    dt: MultipoleSet = MultipoleSet(u=-2000.0)
    cem: float = -2300.0

    def voltages(self) -> dict[str, float]:
        v = {"chip": self.chip, "con": self.con, "cem": self.cem}
        v.update(segment_dict("ext", self.ext))
        v.update(segment_dict("dt", self.dt))
        return v

    def with_(self, **kw) -> "WorkingPoint":
        return replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return {
            "chip": self.chip,
            "ext": asdict(self.ext),
            "con": self.con,
            "dt": asdict(self.dt),
            "cem": self.cem,
            "segments": self.voltages(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WorkingPoint":
        """Accepts multipole dicts, plain monopole numbers, or per-segment lists."""

        def ms(v, default):
            if v is None:
                return default
            if isinstance(v, (int, float)):
                return MultipoleSet(u=float(v))
            if isinstance(v, (list, tuple)):
                if len(v) != 4:
                    raise ValueError("segment voltage lists need four entries")
                return decompose(SegmentVoltages(*map(float, v)))
            return MultipoleSet(**{k: float(x) for k, x in v.items()})

        base = cls()
        return cls(
            chip=float(d.get("chip", base.chip)),
            ext=ms(d.get("ext"), base.ext),
            con=float(d.get("con", base.con)),
            dt=ms(d.get("dt"), base.dt),
            cem=float(d.get("cem", base.cem)),
        )

    @classmethod
    def from_voltages(cls, v: Mapping[str, float]) -> "WorkingPoint":
        def group(g):
            if g in v:
                return MultipoleSet(u=float(v[g]))
            return decompose(SegmentVoltages(*(float(v.get(f"{g}{i}", 0.0)) for i in range(1, 5))))

        return cls(float(v.get("chip", 0.0)), group("ext"), float(v.get("con", 0.0)), group("dt"), float(v.get("cem", 0.0)))

    def validate(self, spec: GeometrySpec) -> ValidationReport:
        return validate_spec(spec, self.voltages())


def rotate90(ms: MultipoleSet) -> MultipoleSet:
    """Segment pattern rotated by +90 degrees about the axis (segment k -> k+1)."""
    return MultipoleSet(ms.u, -ms.u_y, ms.u_x, -ms.u_qp)


@dataclass
class Bench:
    """A solved basis plus tracing defaults; caches superposed fields."""

    basis: BasisSet
    species: Species = RB87_ION
    threads: int = 1
    opts: TraceOptions = TraceOptions(record=False)
    cache_size: int = 2
    _cache: "OrderedDict[tuple, FieldSource]" = field(default_factory=OrderedDict, repr=False)

    @property
    def domain(self):
        return self.basis.domain

    def source(self, wp: WorkingPoint) -> FieldSource:
        v = wp.voltages()
        key = tuple(sorted(v.items()))
        src = self._cache.get(key)
        if src is None:
            src = FieldSource.build(self.basis, v)
            self._cache[key] = src
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return src

    def trace(
        self,
        wp: WorkingPoint,
        starts: np.ndarray,
        B: Sequence[float] = (0.0, 0.0, 0.0),
        stop_z: float | None = None,
        integrator: str = "auto",
    ) -> list[Trajectory]:
        opts = replace(self.opts, stop_z=stop_z, integrator=integrator)
        return batch_trace(self.species, starts, None, self.source(wp), B, opts, self.threads)

    def reached(self, tr: Trajectory) -> bool:
        """True when the particle crossed the detector plane (any impact point on it)."""
        return abs(tr.impact.position[2] - self.domain.detector_z) < 1e-9


def square_lattice(n: int = 3, pitch: float = PITCH, z0: float = Z_OBJECT, center=(0.0, 0.0)) -> np.ndarray:
    off = (np.arange(n) - (n - 1) / 2) * pitch
    xs, ys = np.meshgrid(off + center[0], off + center[1], indexing="ij")
    return np.column_stack([xs.ravel(), ys.ravel(), np.full(n * n, z0)])


def _impacts(trs: Sequence[Trajectory]) -> np.ndarray:
    return np.array([t.impact.position for t in trs])


def _image(bench: Bench, wp: WorkingPoint, starts: np.ndarray, **kw):
    """Trace ``starts``; return (fit or None, impacts, reached mask)."""
    trs = bench.trace(wp, starts, **kw)
    ok = np.array([bench.reached(t) for t in trs])
    imp = _impacts(trs)
    fit = AffineFit.fit(starts[ok], imp[ok]) if ok.all() else None
    return fit, imp, ok


def _nan_if_none(fit: AffineFit | None, attr: str) -> float:
    return getattr(fit, attr) if fit is not None else math.nan


# ---------------------------------------------------------------------------
# monopole: magnification and field of view
# ---------------------------------------------------------------------------


def magnification_scan(
    bench: Bench,
    ext_values: Iterable[float],
    con_values: Iterable[float],
    base: WorkingPoint = WorkingPoint(),
    n: int = 3,
    pitch: float = PITCH,
    z0: float = Z_OBJECT,
) -> ImagingReport:
    """M(U_ext, U_con) from an n x n lattice around the axis; lost particles flag the cell."""
    ext_values = [float(v) for v in ext_values]
    con_values = [float(v) for v in con_values]
    starts = square_lattice(n, pitch, z0)
    rows: dict[str, list] = {k: [] for k in ("U_ext_V", "U_con_V", "M", "M_x", "M_y", "fit_residual_m", "lost")}
    grid = np.full((len(ext_values), len(con_values)), np.nan)
    for i, ue in enumerate(ext_values):
        for j, uc in enumerate(con_values):
            wp = base.with_(ext=replace(base.ext, u=ue), con=uc)
            fit, _, ok = _image(bench, wp, starts)
            rows["U_ext_V"].append(ue)
            rows["U_con_V"].append(uc)
            rows["M"].append(_nan_if_none(fit, "magnification"))
            rows["M_x"].append(_nan_if_none(fit, "m_x"))
            rows["M_y"].append(_nan_if_none(fit, "m_y"))
            rows["fit_residual_m"].append(fit.max_residual() if fit else math.nan)
            rows["lost"].append(int((~ok).sum()))
            grid[i, j] = rows["M"][-1]
    rep = ImagingReport(
        "magnification",
        {k: np.asarray(v) for k, v in rows.items()},
        summary={"lattice": n, "pitch_m": pitch, "z0_m": z0, "flagged_cells": int(sum(1 for x in rows["lost"] if x))},
        config={"base": base.to_dict(), "ext_values": ext_values, "con_values": con_values},
    )
    rep.svg = heatmap_svg(ext_values, con_values, grid, "Magnification M", "U_ext (V)", "U_con (V)")
    return rep


def field_of_view_map(
    bench: Bench,
    u_ext: float = -50.0,
    offsets: Sequence[float] | None = None,
    base: WorkingPoint = WorkingPoint(),
    n: int = 3,
    pitch: float = PITCH,
    z0: float = Z_OBJECT,
) -> ImagingReport:
    """Local M and image displacement of starts offset from the axis.

    At each offset the local M comes from an n x n lattice centred there;
    (dX, dY) is the impact of the lattice centre.
    """
    if offsets is None:
        offsets = np.round(np.arange(-1.0e-3, 1.0e-3 + 1e-9, 0.2e-3), 12)
    offsets = [float(o) for o in offsets]
    wp = base.with_(ext=replace(base.ext, u=float(u_ext)))
    centre_idx = (n * n) // 2
    cols: dict[str, list] = {k: [] for k in ("x_m", "y_m", "M", "M_x", "M_y", "dX_m", "dY_m", "lost")}
    grid = np.full((len(offsets), len(offsets)), np.nan)
    for i, x in enumerate(offsets):
        for j, y in enumerate(offsets):
            starts = square_lattice(n, pitch, z0, (x, y))
            fit, imp, ok = _image(bench, wp, starts)
            cols["x_m"].append(x)
            cols["y_m"].append(y)
            cols["M"].append(_nan_if_none(fit, "magnification"))
            cols["M_x"].append(_nan_if_none(fit, "m_x"))
            cols["M_y"].append(_nan_if_none(fit, "m_y"))
            c_ok = ok[centre_idx]
            cols["dX_m"].append(imp[centre_idx, 0] if c_ok else math.nan)
            cols["dY_m"].append(imp[centre_idx, 1] if c_ok else math.nan)
            cols["lost"].append(int((~ok).sum()))
            grid[i, j] = cols["M"][-1]
    arr = {k: np.asarray(v) for k, v in cols.items()}
    r = np.hypot(arr["x_m"], arr["y_m"])
    good = np.isfinite(arr["M"])
    centre = good & (r == r[good].min()) if good.any() else good
    m_centre = float(np.mean(arr["M"][centre])) if centre.any() else math.nan
    edge_r = float(r[good].max()) if good.any() else math.nan
    edge = good & np.isclose(r, edge_r)
    summary = {
        "U_ext_V": float(u_ext),
        "M_center": m_centre,
        "M_edge": float(np.mean(arr["M"][edge])) if edge.any() else math.nan,
        "M_max": float(np.nanmax(arr["M"])) if good.any() else math.nan,
        "edge_offset_m": edge_r,
    }
    rep = ImagingReport("fov", arr, summary=summary, config={"base": wp.to_dict(), "offsets_m": offsets})
    rep.svg = heatmap_svg(np.array(offsets) * 1e3, np.array(offsets) * 1e3, grid, f"M across the object plane, U_ext={u_ext:g} V", "x (mm)", "y (mm)")
    return rep


# ---------------------------------------------------------------------------
# dipole: deflection and extraction region
# ---------------------------------------------------------------------------


def _central_span(values: np.ndarray, ok: np.ndarray, frac: float) -> np.ndarray:
    """Mask of the central ``frac`` of the contiguous reachable run containing the value nearest 0."""
    order = np.argsort(values)
    v = values[order]
    o = ok[order]
    k0 = int(np.argmin(np.abs(v)))
    if not o[k0]:
        return np.zeros_like(ok)
    lo = hi = k0
    while lo > 0 and o[lo - 1]:
        lo -= 1
    while hi < len(v) - 1 and o[hi + 1]:
        hi += 1
    a, b = v[lo], v[hi]
    mid, half = (a + b) / 2, frac * (b - a) / 2
    sel = np.zeros(len(v), dtype=bool)
    sel[lo : hi + 1] = np.abs(v[lo : hi + 1] - mid) <= half + 1e-12
    out = np.zeros_like(ok)
    out[order] = sel
    return out


def deflection_scan(
    bench: Bench,
    ux_values: Iterable[float],
    uy_values: Iterable[float],
    base: WorkingPoint = WorkingPoint(),
    separation: float = PITCH,
    z0: float = Z_OBJECT,
    central_fraction: float = 0.8,
) -> ImagingReport:
    """Impact of an on-axis ion versus deflector dipole (U_X, U_Y).

    M at each cell comes from two ion pairs straddling the axis along x and y
    with the given separation. The slope of dX versus U_X is fitted along the
    U_Y row closest to zero, over the central part of the reachable range.
    """
    ux_values = [float(v) for v in ux_values]
    uy_values = [float(v) for v in uy_values]
    s = separation / 2
    starts = np.array([[0, 0, z0], [s, 0, z0], [-s, 0, z0], [0, s, z0], [0, -s, z0]], dtype=float)
    cols: dict[str, list] = {k: [] for k in ("U_X_V", "U_Y_V", "dX_m", "dY_m", "M", "reached")}
    for ux in ux_values:
        for uy in uy_values:
            wp = base.with_(dt=replace(base.dt, u_x=ux, u_y=uy))
            trs = bench.trace(wp, starts)
            ok = np.array([bench.reached(t) for t in trs])
            imp = _impacts(trs)
            cols["U_X_V"].append(ux)
            cols["U_Y_V"].append(uy)
            cols["dX_m"].append(imp[0, 0] if ok[0] else math.nan)
            cols["dY_m"].append(imp[0, 1] if ok[0] else math.nan)
            if ok.all():
                mx = np.linalg.norm(imp[1, :2] - imp[2, :2]) / separation
                my = np.linalg.norm(imp[3, :2] - imp[4, :2]) / separation
                cols["M"].append(0.5 * (mx + my))
            else:
                cols["M"].append(math.nan)
            cols["reached"].append(int(ok.all()))
    arr = {k: np.asarray(v) for k, v in cols.items()}
    summary: dict[str, Any] = {}
    fits: dict[str, LinearFit] = {}
    uy0 = min(uy_values, key=abs)
    row = arr["U_Y_V"] == uy0
    sel = np.zeros(len(arr["U_X_V"]), dtype=bool)
    sel[row] = _central_span(arr["U_X_V"][row], arr["reached"][row].astype(bool), central_fraction)
    if sel.sum() >= 2 and np.ptp(arr["U_X_V"][sel]) > 0:
        fits["dX_vs_UX"] = LinearFit.fit(arr["U_X_V"][sel], arr["dX_m"][sel])
        fits["dY_vs_UX"] = LinearFit.fit(arr["U_X_V"][sel], arr["dY_m"][sel])
        summary["slope_um_per_V"] = abs(fits["dX_vs_UX"].slope) * 1e6
        summary["crosstalk"] = abs(fits["dY_vs_UX"].slope) / max(abs(fits["dX_vs_UX"].slope), 1e-300)
        summary["r2"] = fits["dX_vs_UX"].r2
    m = arr["M"][np.isfinite(arr["M"])]
    if m.size:
        summary["M_mean"] = float(m.mean())
        summary["M_max_deviation"] = float(np.max(np.abs(m - m.mean())) / m.mean())
    summary["fit_row_U_Y_V"] = uy0
    rep = ImagingReport("deflection", arr, summary=summary, fits=fits, config={"base": base.to_dict(), "ux_values": ux_values, "uy_values": uy_values})
    if len(uy_values) > 1 and len(ux_values) > 1:
        grid = arr["dX_m"].reshape(len(ux_values), len(uy_values)) * 1e3
        rep.svg = heatmap_svg(ux_values, uy_values, grid, "Image displacement dX (mm)", "U_X (V)", "U_Y (V)")
    else:
        rep.svg = curve_svg(ux_values if len(ux_values) > 1 else uy_values, {"dX (mm)": arr["dX_m"] * 1e3, "dY (mm)": arr["dY_m"] * 1e3}, "Deflection", "U (V)", "mm")
    return rep


def _boundary(pred, direction: np.ndarray, r_max: float, tol: float) -> float:
    """Largest r in [0, r_max] with pred(r * direction) true, assuming a star-shaped set."""
    if not pred(0.0):
        return 0.0
    if pred(r_max):
        return r_max
    lo, hi = 0.0, r_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def extraction_region(
    bench: Bench,
    base: WorkingPoint = WorkingPoint(),
    u_xy_ratio: float = 0.23,
    n_angles: int = 72,
    z0: float = Z_OBJECT,
    r_max: float = 3e-3,
    tol: float = 5e-6,
) -> ImagingReport:
    """Extraction region with and without a steering dipole on the extractor.

    A start is detectable when it reaches the deflector entrance plane. For
    each direction alpha the farthest detectable start is found by bisection,
    once with zero dipole and once with U_X = -U_XY cos(alpha),
    U_Y = -U_XY sin(alpha), U_XY = ``u_xy_ratio`` * U_ext.
    """
    if n_angles % 4:
        raise ValueError("n_angles must be a multiple of 4")
    stop = bench.domain.deflector_entrance_z
    alphas = 2 * math.pi * np.arange(n_angles) / n_angles
    u_xy = u_xy_ratio * base.ext.u

    def detectable(wp: WorkingPoint, p: np.ndarray) -> bool:
        tr = bench.trace(wp, p[None, :], stop_z=stop)[0]
        return tr.impact.termination == "plane"

    r0 = np.empty(n_angles)
    r1 = np.empty(n_angles)
    centre_ok = np.empty(n_angles, dtype=int)
    origin = np.array([0.0, 0.0, z0])
    for k, a in enumerate(alphas):
        d = np.array([math.cos(a), math.sin(a), 0.0])
        r0[k] = _boundary(lambda r: detectable(base, origin + r * d), d, r_max, tol)
        wp = base.with_(ext=replace(base.ext, u_x=-u_xy * math.cos(a), u_y=-u_xy * math.sin(a)))
        centre_ok[k] = int(detectable(wp, origin))
        r1[k] = _boundary(lambda r: detectable(wp, origin + r * d), d, r_max, tol)
    half = n_angles // 2
    q = n_angles // 4
    w0 = 0.5 * ((r0[0] + r0[half]) + (r0[q] + r0[half + q]))
    widths = r1[:half] + r1[half:]
    poly = np.column_stack([r0 * np.cos(alphas), r0 * np.sin(alphas)])
    poly1 = np.column_stack([r1 * np.cos(alphas), r1 * np.sin(alphas)])
    summary = {
        "w0_m": float(w0),
        "max_width_m": float(widths.max()),
        "width_ratio": float(widths.max() / w0) if w0 > 0 else math.nan,
        "area0_m2": _polygon_area(poly),
        "area_dipole_m2": _polygon_area(poly1),
        "center_detected_all": bool(centre_ok.all()),
        "U_XY_V": u_xy,
    }
    rep = ImagingReport(
        "extraction",
        {"alpha_rad": alphas, "r0_m": r0, "r_dipole_m": r1, "center_detected": centre_ok},
        summary=summary,
        polygon=poly,
        config={"base": base.to_dict(), "u_xy_ratio": u_xy_ratio, "n_angles": n_angles, "r_max_m": r_max, "tol_m": tol},
    )
    rep.svg = scatter_svg({"zero dipole": poly * 1e3, "swept dipole": poly1 * 1e3}, "Extraction region", "x (mm)", "y (mm)")
    return rep


def _polygon_area(p: np.ndarray) -> float:
    x, y = p[:, 0], p[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


# ---------------------------------------------------------------------------
# quadrupole: single-axis magnification and image alignment
# ---------------------------------------------------------------------------

_RING_FRACTIONS = (0.05, 0.1, 0.25, 0.5, 1.0)


def disc_starts(radius: float = PITCH, z0: float = Z_OBJECT, n_dirs: int = 8) -> np.ndarray:
    """Centre plus rings at growing fractions of ``radius``, ordered inside out."""
    pts = [[0.0, 0.0, z0]]
    for f in _RING_FRACTIONS:
        for k in range(n_dirs):
            a = 2 * math.pi * k / n_dirs
            pts.append([f * radius * math.cos(a), f * radius * math.sin(a), z0])
    return np.array(pts)


def _disc_fit(starts: np.ndarray, imp: np.ndarray, ok: np.ndarray, n_dirs: int = 8):
    """Affine fit over the largest set of complete inner rings that reached the detector."""
    use = 1
    for ring in range(len(_RING_FRACTIONS)):
        sl = slice(1 + ring * n_dirs, 1 + (ring + 1) * n_dirs)
        if not ok[sl].all():
            break
        use = sl.stop
    if not ok[0] or use < 1 + n_dirs:
        return None, 0.0
    return AffineFit.fit(starts[:use], imp[:use]), float(np.hypot(*starts[use - 1, :2]))


def _vertex(x: Sequence[float], y: np.ndarray, i: int) -> float:
    """Abscissa of the parabola through the three samples around index ``i``."""
    a, b, c = x[i - 1], x[i], x[i + 1]
    fa, fb, fc = y[i - 1], y[i], y[i + 1]
    den = (b - a) * (fb - fc) - (b - c) * (fb - fa)
    if den == 0:
        return float(b)
    return float(b - 0.5 * ((b - a) ** 2 * (fb - fc) - (b - c) ** 2 * (fb - fa)) / den)


def quadrupole_scan(
    bench: Bench,
    ratios: Iterable[float],
    base: WorkingPoint = WorkingPoint(),
    radius: float = PITCH,
    z0: float = Z_OBJECT,
) -> ImagingReport:
    """Single-axis magnifications versus U_QP / U_dt on the deflector.

    Starts fill a disc of ``radius``; rings whose images leave the detector
    are dropped so that very large single-axis magnifications still fit.
    """
    ratios = [float(r) for r in ratios]
    starts = disc_starts(radius, z0)
    cols: dict[str, list] = {k: [] for k in ("ratio", "U_QP_V", "M_x", "M_y", "M", "fit_radius_m", "fit_residual_m")}
    for q in ratios:
        wp = base.with_(dt=replace(base.dt, u_qp=q * base.dt.u))
        trs = bench.trace(wp, starts)
        ok = np.array([bench.reached(t) for t in trs])
        fit, rfit = _disc_fit(starts, _impacts(trs), ok)
        cols["ratio"].append(q)
        cols["U_QP_V"].append(q * base.dt.u)
        cols["M_x"].append(_nan_if_none(fit, "m_x"))
        cols["M_y"].append(_nan_if_none(fit, "m_y"))
        cols["M"].append(_nan_if_none(fit, "magnification"))
        cols["fit_radius_m"].append(rfit)
        cols["fit_residual_m"].append(fit.max_residual() if fit else math.nan)
    arr = {k: np.asarray(v) for k, v in cols.items()}
    my = arr["M_y"]
    minima = [
        ratios[i] for i in range(1, len(ratios) - 1)
        if np.isfinite(my[i - 1 : i + 2]).all() and my[i] < my[i - 1] and my[i] < my[i + 1]
    ]
    summary = {"M_y_local_minima_ratio": minima, "M_y_minima_refined": [_vertex(ratios, my, ratios.index(r)) for r in minima]}
    if len(ratios):
        k = int(np.argmax(np.abs(arr["ratio"])))
        summary.update(ratio_max=ratios[k], M_x_at_max=float(arr["M_x"][k]), M_y_at_max=float(arr["M_y"][k]))
    rep = ImagingReport("quadrupole", arr, summary=summary, config={"base": base.to_dict(), "ratios": ratios, "radius_m": radius})
    rep.svg = curve_svg(ratios, {"M_x": arr["M_x"], "M_y": arr["M_y"]}, "Single-axis magnification", "U_QP / U_dt", "M")
    return rep


@dataclass
class Alignment:
    recipe: WorkingPoint
    starts: np.ndarray
    impacts: np.ndarray
    reached: np.ndarray
    axis_angle_deg: float  # principal axis of the image, from +x, in (-90, 90]
    deviation_deg: float  # angle between the image axis and the target axis
    centroid: np.ndarray

    def report(self, alpha_deg: float, target: str) -> ImagingReport:
        cols = {
            "x0_m": self.starts[:, 0],
            "y0_m": self.starts[:, 1],
            "X_m": self.impacts[:, 0],
            "Y_m": self.impacts[:, 1],
            "reached": self.reached.astype(int),
        }
        summary = {
            "alpha_deg": alpha_deg,
            "target": target,
            "axis_angle_deg": self.axis_angle_deg,
            "deviation_deg": self.deviation_deg,
            "centroid_m": self.centroid,
        }
        rep = ImagingReport("align", cols, summary=summary, config={"recipe": self.recipe.to_dict()})
        rep.svg = scatter_svg({"image": self.impacts[self.reached, :2] * 1e3}, f"Line at {alpha_deg:g} deg aligned to {target}", "X (mm)", "Y (mm)")
        return rep


def alignment_recipe(alpha_deg: float, target: str = "y", base: WorkingPoint = WorkingPoint()) -> WorkingPoint:
    """Voltages that map a line at angle alpha onto the target detector axis.

    Oblique lines use the deflector quadrupole (U_QP/U_dt = -0.1 stretches y,
    +0.1 stretches x). Lines already along an axis need no change for that
    axis; for the other axis an extractor dipole along the bisector tilts the
    line slightly and a deflector dipole plus quadrupole re-centres and
    stretches it.
    """
    if not -90.0 < alpha_deg <= 90.0:
        raise ValueError("alpha must lie in (-90, 90] degrees")
    if target not in ("x", "y"):
        raise ValueError("target must be 'x' or 'y'")
    along = {"x": 0.0, "y": 90.0}[target]
    if alpha_deg == along:
        return base
    if alpha_deg in (0.0, 90.0):
        ext_dip = MultipoleSet(0.0, -5.0, -5.0, 0.0)
        dt_dip = MultipoleSet(0.0, -5.0, -85.0, 190.0)
        if target == "x":
            ext_dip, dt_dip = rotate90(ext_dip), rotate90(dt_dip)
        return base.with_(
            ext=MultipoleSet(base.ext.u, base.ext.u_x + ext_dip.u_x, base.ext.u_y + ext_dip.u_y, base.ext.u_qp + ext_dip.u_qp),
            dt=MultipoleSet(base.dt.u, base.dt.u_x + dt_dip.u_x, base.dt.u_y + dt_dip.u_y, base.dt.u_qp + dt_dip.u_qp),
        )
    ratio = -0.1 if target == "y" else 0.1
    return base.with_(dt=replace(base.dt, u_qp=ratio * base.dt.u))


def align_image(
    bench: Bench,
    alpha_deg: float,
    target: str = "y",
    length: float = PITCH,
    n_points: int = 11,
    base: WorkingPoint = WorkingPoint(),
    recipe: WorkingPoint | None = None,
    z0: float = Z_OBJECT,
) -> Alignment:
    """Image a line of ions at angle alpha and measure the orientation of its image."""
    wp = recipe if recipe is not None else alignment_recipe(alpha_deg, target, base)
    a = math.radians(alpha_deg)
    s = np.linspace(-length / 2, length / 2, n_points)
    starts = np.column_stack([s * math.cos(a), s * math.sin(a), np.full(n_points, z0)])
    trs = bench.trace(wp, starts)
    ok = np.array([bench.reached(t) for t in trs])
    imp = _impacts(trs)
    if ok.sum() < 2:
        ang = math.nan
    else:
        ang = math.degrees(principal_axis_angle(imp[ok]))
    tgt = 0.0 if target == "x" else 90.0
    dev = abs((ang - tgt + 90.0) % 180.0 - 90.0) if math.isfinite(ang) else math.nan
    centroid = imp[ok, :2].mean(axis=0) if ok.any() else np.full(2, math.nan)
    return Alignment(wp, starts, imp, ok, ang, dev, centroid)


# ---------------------------------------------------------------------------
# aberrations and external fields
# ---------------------------------------------------------------------------


def depth_of_field(
    bench: Bench,
    distances: Iterable[float],
    base: WorkingPoint = WorkingPoint(),
    n: int = 3,
    pitch: float = PITCH,
) -> ImagingReport:
    """M versus start distance below the chip."""
    distances = [float(d) for d in distances]
    cols: dict[str, list] = {k: [] for k in ("distance_m", "M", "fit_residual_m", "lost")}
    for dz in distances:
        fit, _, ok = _image(bench, base, square_lattice(n, pitch, -dz))
        cols["distance_m"].append(dz)
        cols["M"].append(_nan_if_none(fit, "magnification"))
        cols["fit_residual_m"].append(fit.max_residual() if fit else math.nan)
        cols["lost"].append(int((~ok).sum()))
    arr = {k: np.asarray(v) for k, v in cols.items()}
    m = arr["M"]
    summary = {
        "monotone_increasing": bool(np.all(np.diff(m) > 0)) if np.isfinite(m).all() else False,
        "delta_M": float(m[-1] - m[0]) if len(m) else math.nan,
    }
    rep = ImagingReport("dof", arr, summary=summary, config={"base": base.to_dict(), "distances_m": distances})
    rep.svg = curve_svg(np.array(distances) * 1e3, {"M": m}, "Depth of field", "distance below chip (mm)", "M")
    return rep


def bfield_scan(
    bench: Bench,
    bz_gauss: Iterable[float],
    bx_gauss: Iterable[float],
    base: WorkingPoint = WorkingPoint(),
    n: int = 5,
    pitch: float = PITCH,
    z0: float = Z_OBJECT,
) -> ImagingReport:
    """Image rotation under axial B and image shift under transverse B.

    The reference image is traced without magnetic field; every B value,
    including zero, uses the Boris pusher so that the B = 0 row checks the
    two integrators against each other.
    """
    bz_gauss = [float(b) for b in bz_gauss]
    bx_gauss = [float(b) for b in bx_gauss]
    starts = square_lattice(n, pitch, z0)
    ref = bench.trace(base, starts)
    ok_ref = np.array([bench.reached(t) for t in ref])
    ref_imp = _impacts(ref)
    cols: dict[str, list] = {k: [] for k in ("axis", "B_G", "rotation_deg", "shift_x_m", "shift_y_m", "lost")}

    def one(axis: str, b: float):
        B = (0.0, 0.0, b * GAUSS) if axis == "z" else (b * GAUSS, 0.0, 0.0)
        trs = bench.trace(base, starts, B=B, integrator="boris")
        ok = np.array([bench.reached(t) for t in trs]) & ok_ref
        imp = _impacts(trs)
        cols["axis"].append(axis)
        cols["B_G"].append(b)
        cols["lost"].append(int((~ok).sum()))
        if ok.sum() >= 2:
            cols["rotation_deg"].append(math.degrees(rotation_angle(ref_imp[ok], imp[ok])))
            sh = (imp[ok, :2] - ref_imp[ok, :2]).mean(axis=0)
        else:
            cols["rotation_deg"].append(math.nan)
            sh = (math.nan, math.nan)
        cols["shift_x_m"].append(sh[0])
        cols["shift_y_m"].append(sh[1])

    for b in bz_gauss:
        one("z", b)
    for b in bx_gauss:
        one("x", b)
    arr = {k: np.asarray(v) for k, v in cols.items()}
    fits: dict[str, LinearFit] = {}
    summary: dict[str, Any] = {}
    z = arr["axis"] == "z"
    x = arr["axis"] == "x"
    if len(set(bz_gauss)) >= 2:
        fits["rotation_vs_Bz"] = LinearFit.fit(arr["B_G"][z], arr["rotation_deg"][z])
        summary["rotation_deg_per_G"] = abs(fits["rotation_vs_Bz"].slope)
    if len(set(bx_gauss)) >= 2:
        fits["shift_y_vs_Bx"] = LinearFit.fit(arr["B_G"][x], arr["shift_y_m"][x])
        fits["shift_x_vs_Bx"] = LinearFit.fit(arr["B_G"][x], arr["shift_x_m"][x])
        summary["shift_um_per_G"] = abs(fits["shift_y_vs_Bx"].slope) * 1e6
    zero = arr["B_G"] == 0
    if zero.any():
        summary["zero_B_rotation_deg"] = float(np.max(np.abs(arr["rotation_deg"][zero])))
        summary["zero_B_shift_m"] = float(np.max(np.hypot(arr["shift_x_m"][zero], arr["shift_y_m"][zero])))
    rep = ImagingReport("bfield", arr, summary=summary, fits=fits, config={"base": base.to_dict(), "bz_gauss": bz_gauss, "bx_gauss": bx_gauss, "lattice": n})
    series = {}
    if bz_gauss:
        series["rotation (deg)"] = (bz_gauss, arr["rotation_deg"][z])
    if bx_gauss:
        series["shift y (um)"] = (bx_gauss, arr["shift_y_m"][x] * 1e6)
    name, (bs, vals) = next(iter(series.items()))
    rep.svg = curve_svg(bs, {name: vals}, "Magnetic field effects", "B (G)", name)
    return rep


def stray_compensation(
    bench: Bench,
    probe: Sequence[float] = (0.0, 0.0, Z_OBJECT),
    n_alpha: int = 24,
) -> ImagingReport:
    """Field at the atoms per volt on the extractor.

    Monopole: E_z per volt on all four segments (V/cm per V). Dipole: lateral
    field per volt difference between opposite segments (mV/cm per V). The
    alpha sweep drives a unit dipole (U_X, U_Y) = (cos a, sin a); a positive
    dipole raises the potential on the alpha side, so the field points along
    alpha + 180 degrees.
    """
    basis = bench.basis
    e_mono = field_at(basis, segment_dict("ext", MultipoleSet(u=1.0)), probe).E
    e_dip = field_at(basis, {"ext1": 0.5, "ext3": -0.5}, probe).E
    alphas = 2 * math.pi * np.arange(n_alpha) / n_alpha
    direction = np.empty(n_alpha)
    magnitude = np.empty(n_alpha)
    deviation = np.empty(n_alpha)
    for k, a in enumerate(alphas):
        e = field_at(basis, segment_dict("ext", MultipoleSet(u_x=math.cos(a), u_y=math.sin(a))), probe).E
        direction[k] = math.atan2(e[1], e[0])
        magnitude[k] = math.hypot(e[0], e[1])
        d = direction[k] - (a + math.pi)
        deviation[k] = abs(math.degrees(math.atan2(math.sin(d), math.cos(d))))
    summary = {
        "probe_m": list(map(float, probe)),
        "monopole_V_per_cm_per_V": abs(float(e_mono[2])) / 100.0,
        "dipole_mV_per_cm_per_V": float(math.hypot(e_dip[0], e_dip[1])) * 10.0,
        "alpha_max_deviation_deg": float(deviation.max()),
    }
    rep = ImagingReport(
        "straycomp",
        {"alpha_rad": alphas, "field_direction_rad": direction, "field_V_per_m": magnitude, "deviation_deg": deviation},
        summary=summary,
        config={"probe_m": list(map(float, probe)), "n_alpha": n_alpha},
    )
    rep.svg = curve_svg(np.degrees(alphas), {"deviation (deg)": deviation}, "Dipole field direction", "alpha (deg)", "deg")
    return rep
