"""Four-segment voltage algebra: monopole, dipole and quadrupole terms.

Segments are numbered counter-clockwise starting on +x, so that segments 1/3
face each other along x and 2/4 along y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SegmentVoltages:
    u1: float
    u2: float
    u3: float
    u4: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.u1, self.u2, self.u3, self.u4)

    def to_dict(self, group: str) -> dict[str, float]:
        return {f"{group}{i}": v for i, v in enumerate(self.as_tuple(), start=1)}


@dataclass(frozen=True)
class MultipoleSet:
    u: float = 0.0
    u_x: float = 0.0
    u_y: float = 0.0
    u_qp: float = 0.0

    @property
    def u_xy(self) -> float:
        return math.hypot(self.u_x, self.u_y)

    @property
    def alpha(self) -> float:
        """Dipole direction in radians, measured from +x."""
        return math.atan2(self.u_y, self.u_x)

    @classmethod
    def from_polar(cls, u: float, u_xy: float, alpha: float, u_qp: float = 0.0) -> "MultipoleSet":
        return cls(u, u_xy * math.cos(alpha), u_xy * math.sin(alpha), u_qp)


def decompose(sv: SegmentVoltages) -> MultipoleSet:
    u1, u2, u3, u4 = sv.as_tuple()
    return MultipoleSet(
        u=(u1 + u2 + u3 + u4) / 4.0,
        u_x=(u1 - u3) / 2.0,
        u_y=(u2 - u4) / 2.0,
        u_qp=((u1 + u3) - (u2 + u4)) / 4.0,
    )


def compose(ms: MultipoleSet) -> SegmentVoltages:
    return SegmentVoltages(
        ms.u + ms.u_x + ms.u_qp,
        ms.u + ms.u_y - ms.u_qp,
        ms.u - ms.u_x + ms.u_qp,
        ms.u - ms.u_y - ms.u_qp,
    )


def segment_dict(group: str, ms: MultipoleSet) -> dict[str, float]:
    return compose(ms).to_dict(group)


@dataclass(frozen=True)
class NearAxisCalibration:
    """Proportionality constants of the ideal near-axis field terms.

    ``monopole``: axial field per monopole volt (1/m); ``dipole``: transverse
    field per dipole volt (1/m); ``quadrupole``: field gradient per quadrupole
    volt (1/m^2). Fit them from a solved field with :func:`fit_calibration`.
    """

    monopole: float = 1.0
    dipole: float = 1.0
    quadrupole: float = 1.0


def ideal_near_axis_field(
    ms: MultipoleSet,
    position,
    axial_gradient: float = 0.0,
    calib: NearAxisCalibration = NearAxisCalibration(),
) -> np.ndarray:
    """Superposed ideal field of a segmented electrode near its centre.

    ``axial_gradient`` is dE_z/dz on the axis (V/m^2); it produces the radial
    focusing term -(r/2) dE_z/dz. The quadrupole contribution points along
    (-x, y) for positive ``u_qp``.
    """
    x, y, _ = (float(c) for c in position)
    ez = calib.monopole * ms.u
    ex = -0.5 * x * axial_gradient + calib.dipole * ms.u_x - calib.quadrupole * ms.u_qp * x
    ey = -0.5 * y * axial_gradient + calib.dipole * ms.u_y + calib.quadrupole * ms.u_qp * y
    return np.array([ex, ey, ez])


def fit_calibration(field_fn, center, probe: float) -> NearAxisCalibration:
    """Fit the proportionality constants from a numerical field.

    ``field_fn(ms, point)`` returns the E-vector for segment voltages given as
    a :class:`MultipoleSet`. ``probe`` is the small transverse offset used for
    the quadrupole gradient.
    """
    c = np.asarray(center, dtype=float)
    e_mono = field_fn(MultipoleSet(u=1.0), c)
    e_dip = field_fn(MultipoleSet(u_x=1.0), c)
    ex_p = field_fn(MultipoleSet(u_qp=1.0), c + [probe, 0.0, 0.0])[0]
    ex_m = field_fn(MultipoleSet(u_qp=1.0), c - [probe, 0.0, 0.0])[0]
    return NearAxisCalibration(
        monopole=float(e_mono[2]),
        dipole=float(e_dip[0]),
        quadrupole=float(-(ex_p - ex_m) / (2 * probe)),
    )
