"""Finite-difference Laplace solver and unit-voltage basis potentials.

Every independent electrode gets one basis grid: the potential with that
electrode at 1 V and everything else (other electrodes, enclosure) at 0 V.
Any static configuration is then the weighted sum of the basis grids.

Each basis is solved by red-black successive over-relaxation, first on the
coarse grid covering the whole stack, then on the refined grid near the chip
with its outer faces pinned to values interpolated from the coarse solution.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels as K
from .geometry import ELECTRODE_BASE, FREE, GROUND, GridRegion, VoxelDomain

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-6
MAGIC = b"IONB"
FORMAT_VERSION = 1


class SolverError(RuntimeError):
    """SOR did not reach the tolerance; carries the residual history."""

    def __init__(self, message: str, residual_history: Sequence[float]):
        super().__init__(message)
        self.residual_history = list(residual_history)


class BasisFileError(ValueError):
    pass


class FieldEvaluationError(ValueError):
    pass


def jacobi_radius(shape: Sequence[int]) -> float:
    return sum(math.cos(math.pi / (n - 1)) for n in shape) / len(shape)


def optimal_omega(shape: Sequence[int]) -> float:
    rho = jacobi_radius(shape)
    if not 0.0 < rho < 1.0:
        return 1.9
    return 2.0 / (1.0 + math.sqrt(1.0 - rho * rho))


@dataclass
class RelaxInfo:
    iterations: int
    residual: float
    history: list[float] = field(default_factory=list)


def relax(
    phi: np.ndarray,
    free: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iters: int = 20000,
    omega: float | None = None,
    check_every: int = 10,
) -> RelaxInfo:
    """Relax ``phi`` in place on the ``free`` nodes until converged.

    Converged means the max Jacobi residual times 1/(1 - rho_J) is at most
    ``tol``, i.e. ``tol`` bounds the estimated potential error rather than
    the raw residual (which ends up much smaller).
    """
    if omega is None:
        omega = optimal_omega(phi.shape)
    gain = 1.0 / max(1.0 - jacobi_radius(phi.shape), 1e-12)
    history: list[float] = []
    r = K.max_residual(phi, free)
    history.append(r)
    it = 0
    while r * gain > tol:
        if it >= max_iters:
            raise SolverError(
                f"SOR did not converge in {max_iters} iterations (residual {r:.3e})", history
            )
        for _ in range(check_every):
            K.sor_sweep(phi, free, omega, 0)
            K.sor_sweep(phi, free, omega, 1)
        it += check_every
        r = K.max_residual(phi, free)
        history.append(r)
        if not math.isfinite(r):
            raise SolverError("SOR diverged", history)
    return RelaxInfo(it, r, history)


def _interior_free(labels: np.ndarray) -> np.ndarray:
    free = labels == FREE
    free[0, :, :] = free[-1, :, :] = False
    free[:, 0, :] = free[:, -1, :] = False
    free[:, :, 0] = free[:, :, -1] = False
    return free


def resample(src: np.ndarray, src_region: GridRegion, dst_region: GridRegion) -> np.ndarray:
    """Trilinearly sample ``src`` (on ``src_region``) at every node of ``dst_region``."""
    X, Y, Z = np.meshgrid(*(dst_region.axis(k) for k in range(3)), indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    vals = K.interpolate_points(src, src_region.origin, src_region.spacing, pts)
    return vals.reshape(dst_region.shape)


def solve_potential(
    domain: VoxelDomain,
    label_values: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iters: int = 20000,
    omega: float | None = None,
) -> tuple[np.ndarray, np.ndarray | None, dict[str, RelaxInfo]]:
    """Solve Laplace's equation with Dirichlet value ``label_values[label]`` on every fixed node."""
    label_values = np.asarray(label_values, dtype=float)
    c = domain.coarse
    phi = np.zeros(c.shape)
    fixed = c.labels != FREE
    phi[fixed] = label_values[c.labels[fixed]]
    info = {"coarse": relax(phi, _interior_free(c.labels), tol, max_iters, omega)}

    phi_f = None
    f = domain.fine
    if f is not None:
        phi_f = resample(phi, c, f)
        fixed_f = f.labels != FREE
        phi_f[fixed_f] = label_values[f.labels[fixed_f]]
        info["fine"] = relax(phi_f, _interior_free(f.labels), tol, max_iters, omega)
    return phi, phi_f, info


def _label_table(domain: VoxelDomain, voltages: Mapping[str, float]) -> np.ndarray:
    table = np.zeros(ELECTRODE_BASE + len(domain.electrode_ids))
    for k, eid in enumerate(domain.electrode_ids):
        table[ELECTRODE_BASE + k] = float(voltages.get(eid, 0.0))
    table[GROUND] = 0.0
    return table


@dataclass
class FieldSample:
    potential: float
    E: np.ndarray


@dataclass
class BasisSet:
    """Unit-voltage potentials, one per electrode, on the coarse and refined grids."""

    domain: VoxelDomain
    coarse: np.ndarray  # (n_electrodes, nx, ny, nz)
    fine: np.ndarray | None
    tolerance: float
    info: dict[str, dict[str, RelaxInfo]] = field(default_factory=dict)

    @property
    def electrode_ids(self) -> list[str]:
        return self.domain.electrode_ids

    def weights(self, voltages: Mapping[str, float]) -> np.ndarray:
        unknown = set(voltages) - set(self.electrode_ids)
        if unknown:
            raise KeyError(f"unknown electrode ids: {sorted(unknown)}")
        return np.array([float(voltages.get(e, 0.0)) for e in self.electrode_ids])

    def superpose(self, voltages: Mapping[str, float]) -> "PotentialMap":
        w = self.weights(voltages)
        coarse = np.tensordot(w, self.coarse, axes=1)
        fine = np.tensordot(w, self.fine, axes=1) if self.fine is not None else None
        return PotentialMap(self.domain, coarse, fine)

    def max_residual(self) -> float:
        worst = 0.0
        for k in range(len(self.electrode_ids)):
            worst = max(worst, K.max_residual(self.coarse[k], _interior_free(self.domain.coarse.labels)))
            if self.fine is not None:
                worst = max(worst, K.max_residual(self.fine[k], _interior_free(self.domain.fine.labels)))
        return worst


@dataclass
class PotentialMap:
    """A single superposed potential on both grids."""

    domain: VoxelDomain
    coarse: np.ndarray
    fine: np.ndarray | None

    def stacks(self) -> tuple[np.ndarray, np.ndarray | None]:
        return self.coarse[None], None if self.fine is None else self.fine[None]


def solve_basis(
    domain: VoxelDomain,
    tol: float = DEFAULT_TOL,
    max_iters: int = 20000,
    omega: float | None = None,
    threads: int = 1,
    progress: Callable[[str, dict[str, RelaxInfo]], None] | None = None,
) -> BasisSet:
    """Solve one unit-voltage basis grid per electrode."""
    ids = domain.electrode_ids
    n = len(ids)
    coarse = np.empty((n,) + domain.coarse.shape)
    fine = np.empty((n,) + domain.fine.shape) if domain.fine is not None else None
    info: dict[str, dict[str, RelaxInfo]] = {}

    def one(k: int) -> None:
        table = np.zeros(ELECTRODE_BASE + n)
        table[ELECTRODE_BASE + k] = 1.0
        c, f, inf = solve_potential(domain, table, tol, max_iters, omega)
        coarse[k] = c
        if fine is not None:
            fine[k] = f
        info[ids[k]] = inf
        log.info("basis %s: %s", ids[k], {r: (i.iterations, i.residual) for r, i in inf.items()})
        if progress is not None:
            progress(ids[k], inf)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(one, range(n)))
    else:
        for k in range(n):
            one(k)
    return BasisSet(domain, coarse, fine, tol, info)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


_EMPTY4 = np.zeros((1, 2, 2, 2))
_EMPTY_LABELS = np.zeros((2, 2, 2), dtype=np.int8)


def region_args(domain: VoxelDomain, c_stack: np.ndarray, f_stack: np.ndarray | None):
    """Positional arguments for the compiled field kernel."""
    c = domain.coarse
    if domain.fine is not None and f_stack is not None:
        f = domain.fine
        return (f_stack, f.origin, f.spacing, True, c_stack, c.origin, c.spacing)
    return (_EMPTY4, np.zeros(3), 1.0, False, c_stack, c.origin, c.spacing)


def label_args(domain: VoxelDomain):
    c = domain.coarse
    if domain.fine is not None:
        f = domain.fine
        return (f.labels, f.origin, f.spacing, True, c.labels, c.origin, c.spacing)
    return (_EMPTY_LABELS, np.zeros(3), 1.0, False, c.labels, c.origin, c.spacing)


def field_at(basis: BasisSet, voltages: Mapping[str, float], point: Sequence[float]) -> FieldSample:
    """Potential (V) and field (V/m) at ``point`` for the given electrode voltages."""
    x, y, z = (float(v) for v in point)
    dom = basis.domain
    if not dom.coarse.contains((x, y, z)):
        raise FieldEvaluationError(f"point {point} lies outside the domain")
    lab = K.label_at(*label_args(dom), x, y, z)
    if lab != FREE:
        raise FieldEvaluationError(f"point {point} lies inside {dom.id_of_label(lab)}")
    w = basis.weights(voltages)
    out = np.empty(3)
    phi = K.potential_and_field(*region_args(dom, basis.coarse, basis.fine), w, x, y, z, out)
    return FieldSample(phi, out)


def potential_field(pm: PotentialMap, point: Sequence[float]) -> FieldSample:
    c_stack, f_stack = pm.stacks()
    out = np.empty(3)
    x, y, z = (float(v) for v in point)
    phi = K.potential_and_field(*region_args(pm.domain, c_stack, f_stack), np.ones(1), x, y, z, out)
    return FieldSample(phi, out)


# ---------------------------------------------------------------------------
# cache file
# ---------------------------------------------------------------------------


def _region_header(r: GridRegion) -> bytes:
    return struct.pack("<3I4d", *r.shape, r.spacing, *r.origin)


def save_basis(basis: BasisSet, path: str | Path) -> None:
    """Write the little-endian basis cache (magic IONB, CRC-32 after every array)."""
    dom = basis.domain
    regions = [(dom.coarse, basis.coarse)]
    if basis.fine is not None:
        regions.append((dom.fine, basis.fine))
    head = bytearray()
    head += MAGIC
    head += struct.pack("<I", FORMAT_VERSION)
    gh = dom.geometry_hash.encode("ascii")
    head += struct.pack("<I", len(gh)) + gh
    head += struct.pack("<I", len(regions))
    for region, _ in regions:
        head += _region_header(region)
    head += struct.pack("<I", len(dom.electrode_ids))
    for eid in dom.electrode_ids:
        b = eid.encode("utf-8")
        head += struct.pack("<I", len(b)) + b
    head += struct.pack("<d", basis.tolerance)
    head += struct.pack("<I", zlib.crc32(bytes(head)))

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head)
        for _, stack in regions:
            for k in range(stack.shape[0]):
                payload = np.ascontiguousarray(stack[k], dtype="<f8").tobytes()
                fh.write(payload)
                fh.write(struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.seen = bytearray()

    def read(self, n: int, track: bool = True) -> bytes:
        b = self.fh.read(n)
        if len(b) != n:
            raise BasisFileError("basis cache is truncated")
        if track:
            self.seen += b
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def read_basis_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(_Reader(fh))


def _read_header(rd: _Reader) -> dict:
    if rd.read(4) != MAGIC:
        raise BasisFileError("not a basis cache (bad magic)")
    (version,) = rd.unpack("<I")
    if version != FORMAT_VERSION:
        raise BasisFileError(f"unsupported basis cache version {version}")
    (n,) = rd.unpack("<I")
    ghash = rd.read(n).decode("ascii")
    (nreg,) = rd.unpack("<I")
    regions = []
    for _ in range(nreg):
        vals = rd.unpack("<3I4d")
        regions.append({"shape": tuple(vals[:3]), "spacing": vals[3], "origin": np.array(vals[4:])})
    (ne,) = rd.unpack("<I")
    ids = []
    for _ in range(ne):
        (m,) = rd.unpack("<I")
        ids.append(rd.read(m).decode("utf-8"))
    (tol,) = rd.unpack("<d")
    expected = zlib.crc32(bytes(rd.seen))
    (crc,) = struct.unpack("<I", rd.read(4, track=False))
    if crc != expected:
        raise BasisFileError("basis cache header checksum mismatch")
    return {"geometry_hash": ghash, "regions": regions, "electrode_ids": ids, "tolerance": tol}


def load_basis(path: str | Path, domain: VoxelDomain) -> BasisSet:
    """Read a basis cache written by :func:`save_basis` for ``domain``.

    Raises :class:`BasisFileError` on a bad magic/version, truncation, CRC
    failure, or when the cache was solved for a different geometry.
    """
    with open(path, "rb") as fh:
        rd = _Reader(fh)
        hdr = _read_header(rd)
        if hdr["geometry_hash"] != domain.geometry_hash:
            raise BasisFileError("basis cache geometry hash does not match the geometry (stale cache)")
        if hdr["electrode_ids"] != domain.electrode_ids:
            raise BasisFileError("basis cache electrode table does not match the geometry")
        expect = [domain.coarse] + ([domain.fine] if domain.fine is not None else [])
        if len(hdr["regions"]) != len(expect):
            raise BasisFileError("basis cache region count does not match the geometry")
        for r, g in zip(hdr["regions"], expect):
            if r["shape"] != tuple(g.shape) or r["spacing"] != g.spacing or not np.array_equal(r["origin"], g.origin):
                raise BasisFileError("basis cache grid does not match the geometry")
        stacks = []
        ne = len(hdr["electrode_ids"])
        for r in hdr["regions"]:
            stack = np.empty((ne,) + r["shape"])
            nbytes = 8 * int(np.prod(r["shape"]))
            for k in range(ne):
                payload = rd.read(nbytes, track=False)
                (crc,) = struct.unpack("<I", rd.read(4, track=False))
                if zlib.crc32(payload) != crc:
                    raise BasisFileError(f"checksum failure in array {k} of the basis cache")
                stack[k] = np.frombuffer(payload, dtype="<f8").reshape(r["shape"])
            stacks.append(stack)
        if fh.read(1):
            raise BasisFileError("trailing bytes after basis payload")
    return BasisSet(domain, stacks[0], stacks[1] if len(stacks) > 1 else None, hdr["tolerance"])
