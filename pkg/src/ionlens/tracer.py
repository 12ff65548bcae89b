"""Charged-particle tracing through superposed electrode fields."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import constants

from . import _integrators as I
from .fieldsolve import BasisSet, PotentialMap, label_args, region_args
from .geometry import FREE, VoxelDomain

E_CHARGE = constants.e
AMU = constants.atomic_mass
K_B = constants.k


class TraceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Species:
    name: str
    mass: float  # kg
    charge: float  # C

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not math.isclose(abs(self.charge), E_CHARGE, rel_tol=1e-9):
            raise ValueError("only singly charged species are supported")

    @property
    def q_over_m(self) -> float:
        return self.charge / self.mass

    def with_mass(self, mass: float) -> "Species":
        return Species(self.name, mass, self.charge)


RB87_ION = Species("Rb87+", 86.909 * AMU, E_CHARGE)
ELECTRON = Species("e-", constants.m_e, -E_CHARGE)


@dataclass(frozen=True)
class Ramp:
    """U(t) = target + (initial - target) * exp(-t / tau); tau = inf is static."""

    initial: float
    target: float
    tau: float = math.inf

    def at(self, t: float) -> float:
        if math.isinf(self.tau):
            return self.initial
        if self.tau <= 0:
            return self.target
        return self.target + (self.initial - self.target) * math.exp(-t / self.tau)


@dataclass
class VoltageSchedule:
    """Per-electrode voltages; electrodes not listed sit at 0 V."""

    ramps: dict[str, Ramp] = field(default_factory=dict)

    @classmethod
    def static(cls, voltages: Mapping[str, float]) -> "VoltageSchedule":
        return cls({k: Ramp(float(v), float(v)) for k, v in voltages.items()})

    @classmethod
    def switch(
        cls, initial: Mapping[str, float], target: Mapping[str, float], tau: Mapping[str, float]
    ) -> "VoltageSchedule":
        keys = set(initial) | set(target)
        return cls(
            {
                k: Ramp(float(initial.get(k, 0.0)), float(target.get(k, 0.0)), float(tau.get(k, math.inf)))
                for k in keys
            }
        )

    @property
    def is_static(self) -> bool:
        return all(math.isinf(r.tau) or r.initial == r.target for r in self.ramps.values())

    def at(self, t: float) -> dict[str, float]:
        return {k: r.at(t) for k, r in self.ramps.items()}

    def arrays(self, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        unknown = set(self.ramps) - set(ids)
        if unknown:
            raise KeyError(f"unknown electrode ids: {sorted(unknown)}")
        zero = Ramp(0.0, 0.0)
        rs = [self.ramps.get(i, zero) for i in ids]
        return (
            np.array([r.initial for r in rs]),
            np.array([r.target for r in rs]),
            np.array([r.tau for r in rs]),
        )


@dataclass
class FieldSource:
    """Potential stacks plus ramp parameters, ready for the compiled pushers."""

    domain: VoxelDomain
    coarse: np.ndarray  # (K, nx, ny, nz)
    fine: np.ndarray | None
    u0: np.ndarray
    ut: np.ndarray
    tau: np.ndarray
    vmax: float = field(init=False)

    def __post_init__(self):
        scale = float(np.max(np.abs(np.concatenate([self.u0, self.ut]))))
        # unit basis stacks peak at 1 V; a pre-superposed grid carries volts
        self.vmax = float(np.max(np.abs(self.coarse[0]))) * scale if len(self.u0) == 1 else scale

    @classmethod
    def static(cls, pm: PotentialMap) -> "FieldSource":
        c, f = pm.stacks()
        one = np.ones(1)
        return cls(pm.domain, c, f, one, one.copy(), np.full(1, math.inf))

    @classmethod
    def build(cls, basis: BasisSet, schedule: VoltageSchedule | Mapping[str, float]) -> "FieldSource":
        """Pre-superpose static voltages; keep the full stack for ramps."""
        if not isinstance(schedule, VoltageSchedule):
            schedule = VoltageSchedule.static(schedule)
        if schedule.is_static:
            return cls.static(basis.superpose(schedule.at(0.0)))
        u0, ut, tau = schedule.arrays(basis.electrode_ids)
        return cls(basis.domain, basis.coarse, basis.fine, u0, ut, tau)

    def field_args(self):
        return region_args(self.domain, self.coarse, self.fine)

    def sched_args(self):
        return (self.u0, self.ut, self.tau)

    def max_abs_voltage(self) -> float:
        return self.vmax


@dataclass(frozen=True)
class TraceOptions:
    rtol: float = 1e-9
    atol_position: float = 1e-10  # m
    atol_velocity: float = 1e-4  # m/s
    dt_max: float = 1e-8
    t_max: float = 50e-6
    max_steps: int = 500_000
    record: bool = True
    stop_z: float | None = None  # defaults to the detector plane
    boris_dt: float | None = None  # default: min(T_c/50, 0.1 h / v_max)
    integrator: str = "auto"  # auto | rk45 | boris


@dataclass
class ImpactRecord:
    termination: str  # detector | electrode | escaped | timeout | plane
    time: float
    position: np.ndarray
    velocity: np.ndarray
    cem: int | str | None = None  # 1..4 or "gap" for detector terminations
    electrode: str | None = None

    @property
    def detected(self) -> bool:
        return self.termination == "detector" and isinstance(self.cem, int)

    def to_dict(self) -> dict:
        return {
            "termination": self.termination,
            "time_s": self.time,
            "position_m": [float(v) for v in self.position],
            "velocity_m_s": [float(v) for v in self.velocity],
            "cem": self.cem,
            "electrode": self.electrode,
        }


@dataclass
class Trajectory:
    species: Species
    t: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    potentials: np.ndarray
    impact: ImpactRecord
    phi_start: float
    phi_end: float
    steps: int
    integrator: str

    @property
    def tof(self) -> float:
        return self.impact.time - (self.t[0] if self.t.size else 0.0)

    def energy_error(self, v0: Sequence[float] | None = None) -> float:
        """Relative mismatch between potential energy drop and kinetic energy gain."""
        m = self.species.mass
        v_start = np.asarray(v0 if v0 is not None else self.velocities[0], dtype=float)
        ke0 = 0.5 * m * float(v_start @ v_start)
        ke1 = 0.5 * m * float(self.impact.velocity @ self.impact.velocity)
        gain = self.species.charge * (self.phi_start - self.phi_end)
        return abs((ke1 - ke0) - gain) / max(abs(gain), 1e-300)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_s", "x_m", "y_m", "z_m", "vx", "vy", "vz", "potential_V"])
        for t, p, v, phi in zip(self.t, self.positions, self.velocities, self.potentials):
            w.writerow([repr(float(t))] + [repr(float(c)) for c in p] + [repr(float(c)) for c in v] + [repr(float(phi))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "species": self.species.name,
            "integrator": self.integrator,
            "steps": self.steps,
            "tof_s": self.tof,
            "phi_start_V": self.phi_start,
            "phi_end_V": self.phi_end,
            **self.impact.to_dict(),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


_STATUS = {
    I.ST_PLANE: "plane",
    I.ST_ELECTRODE: "electrode",
    I.ST_ESCAPED: "escaped",
    I.ST_TIMEOUT: "timeout",
}


def _classify(domain: VoxelDomain, status: int, label: int, pos: np.ndarray, stop_z: float):
    if status == I.ST_PLANE:
        if stop_z != domain.detector_z:
            return "plane", None, None
        for k, (x0, x1, y0, y1) in enumerate(domain.apertures):
            if x0 < pos[0] < x1 and y0 < pos[1] < y1:
                return "detector", k + 1, None
        if len(domain.apertures):
            a = domain.apertures
            if a[:, 0].min() <= pos[0] <= a[:, 1].max() and a[:, 2].min() <= pos[1] <= a[:, 3].max():
                return "detector", "gap", None
        if domain.cem_label >= 0:
            return "electrode", None, domain.id_of_label(domain.cem_label)
        return "detector", "gap", None
    if status == I.ST_ELECTRODE:
        return "electrode", None, domain.id_of_label(label)
    return _STATUS[status], None, None


def cyclotron_period(species: Species, B: Sequence[float]) -> float:
    b = float(np.linalg.norm(B))
    return math.inf if b == 0 else 2 * math.pi * species.mass / (abs(species.charge) * b)


def trace(
    species: Species,
    position: Sequence[float],
    velocity: Sequence[float],
    source: FieldSource,
    B: Sequence[float] = (0.0, 0.0, 0.0),
    opts: TraceOptions = TraceOptions(),
    t0: float = 0.0,
) -> Trajectory:
    """Integrate one particle until it hits the stop plane, an electrode, or times out.

    RK45 handles pure electric fields; any nonzero B switches to a fixed-step
    Boris push with at least 50 steps per cyclotron period.
    """
    dom = source.domain
    y0 = np.concatenate([np.asarray(position, dtype=float), np.asarray(velocity, dtype=float)])
    Bv = np.asarray(B, dtype=float)
    stop_z = dom.detector_z if opts.stop_z is None else float(opts.stop_z)
    use_boris = opts.integrator == "boris" or (opts.integrator == "auto" and np.any(Bv != 0))
    qm = species.q_over_m

    nrec = opts.max_steps + 2 if opts.record else 1
    rec_t = np.empty(nrec)
    rec_y = np.empty((nrec, 6))
    rec_phi = np.empty(nrec)
    fa = source.field_args()
    la = label_args(dom)
    sched = source.sched_args()
    if use_boris:
        dt = opts.boris_dt
        if dt is None:
            h = dom.fine.spacing if dom.fine is not None else dom.coarse.spacing
            vmax = math.sqrt(2 * abs(qm) * max(source.max_abs_voltage(), 1.0)) + float(np.linalg.norm(y0[3:]))
            dt = 0.1 * h / vmax
        dt = min(dt, cyclotron_period(species, Bv) / 50)
        res = I.boris_trace(
            y0, t0, qm, fa, la, sched, Bv, stop_z, dom.cem_label, dom.detector_z,
            dt, opts.t_max, opts.max_steps, rec_t, rec_y, rec_phi, opts.record,
        )
        integrator = "boris"
    else:
        dt_init = _initial_step(y0, qm, source, opts)
        res = I.rk45_trace(
            y0, t0, qm, fa, la, sched, Bv, stop_z, dom.cem_label, dom.detector_z,
            opts.rtol, opts.atol_position, opts.atol_velocity, dt_init, opts.dt_max,
            opts.t_max, opts.max_steps, rec_t, rec_y, rec_phi, opts.record,
        )
        integrator = "rk45"
    status, n, t_end, y_end, label, phi_s, phi_e, steps = res
    if status == I.ST_START_INSIDE:
        raise TraceError(f"start point {tuple(position)} lies inside {dom.id_of_label(label)}")
    if status == I.ST_UNDERFLOW:
        raise TraceError(f"step size underflow at t={t_end:.3e} s, position {tuple(y_end[:3])}")
    kind, cem, electrode = _classify(dom, status, label, y_end, stop_z)
    impact = ImpactRecord(kind, float(t_end), y_end[:3].copy(), y_end[3:].copy(), cem, electrode)
    if opts.record:
        t_arr, y_arr, p_arr = rec_t[:n].copy(), rec_y[:n].copy(), rec_phi[:n].copy()
    else:
        t_arr = np.array([t0, t_end])
        y_arr = np.stack([y0, y_end])
        p_arr = np.array([phi_s, phi_e])
    return Trajectory(species, t_arr, y_arr[:, :3], y_arr[:, 3:], p_arr, impact, phi_s, phi_e, steps, integrator)


def _initial_step(y0: np.ndarray, qm: float, source: FieldSource, opts: TraceOptions) -> float:
    dom = source.domain
    h = dom.fine.spacing if dom.fine is not None else dom.coarse.spacing
    v = float(np.linalg.norm(y0[3:]))
    vmax = math.sqrt(2 * abs(qm) * max(source.max_abs_voltage(), 1.0))
    return min(opts.dt_max, 0.01 * h / max(v, 1e-3 * vmax))


def batch_trace(
    species: Species,
    positions: np.ndarray,
    velocities: np.ndarray | None,
    source: FieldSource,
    B: Sequence[float] = (0.0, 0.0, 0.0),
    opts: TraceOptions = TraceOptions(record=False),
    threads: int = 1,
) -> list[Trajectory]:
    """Trace many particles; output order follows input order for any thread count."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if velocities is None:
        velocities = np.zeros_like(positions)
    velocities = np.atleast_2d(np.asarray(velocities, dtype=float))

    def one(i: int) -> Trajectory:
        return trace(species, positions[i], velocities[i], source, B, opts)

    if threads > 1 and len(positions) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(positions))))
    return [one(i) for i in range(len(positions))]


@dataclass(frozen=True)
class InitialConditions:
    """Start positions and thermal velocity spread.

    ``dof_convention`` "3dof" samples a Maxwell-Boltzmann gas, so the mean
    kinetic energy is (3/2) k_B T. "kT" rescales velocities so that the mean
    kinetic energy equals k_B T.
    """

    positions: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0.0, -100e-6]]))
    temperature: float = 0.0
    velocity: np.ndarray | None = None
    seed: int = 0
    dof_convention: str = "3dof"


def sample_initial(ic: InitialConditions, n: int, species: Species = RB87_ION) -> tuple[np.ndarray, np.ndarray]:
    """Return (positions, velocities), each (n, 3)."""
    pos = np.asarray(ic.positions, dtype=float).reshape(-1, 3)
    if len(pos) == 1:
        pos = np.repeat(pos, n, axis=0)
    elif len(pos) != n:
        raise ValueError("positions must hold one row or n rows")
    if ic.velocity is not None:
        vel = np.repeat(np.asarray(ic.velocity, dtype=float).reshape(1, 3), n, axis=0)
    else:
        vel = np.zeros((n, 3))
    if ic.temperature > 0:
        if ic.dof_convention == "3dof":
            sigma = math.sqrt(K_B * ic.temperature / species.mass)
        elif ic.dof_convention == "kT":
            sigma = math.sqrt(2.0 * K_B * ic.temperature / (3.0 * species.mass))
        else:
            raise ValueError(f"unknown dof_convention {ic.dof_convention!r}")
        rng = np.random.default_rng(ic.seed)
        vel = vel + rng.normal(0.0, sigma, size=(n, 3))
    elif ic.temperature < 0:
        raise ValueError("temperature must be non-negative")
    return pos, vel


def is_free(domain: VoxelDomain, point: Sequence[float]) -> bool:
    from ._kernels import label_at

    return label_at(*label_args(domain), *(float(c) for c in point)) == FREE
