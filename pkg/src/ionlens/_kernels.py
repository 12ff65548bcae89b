"""Compiled inner loops shared by the field solver and the tracer."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def sor_sweep(phi, free, omega, parity):
    """One red-black half sweep: update free nodes with (i + j + k) % 2 == parity."""
    nx, ny, nz = phi.shape
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            k0 = 1 + ((i + j + 1 + parity) & 1)
            for k in range(k0, nz - 1, 2):
                if free[i, j, k]:
                    s = (
                        phi[i - 1, j, k]
                        + phi[i + 1, j, k]
                        + phi[i, j - 1, k]
                        + phi[i, j + 1, k]
                        + phi[i, j, k - 1]
                        + phi[i, j, k + 1]
                    )
                    phi[i, j, k] += omega * (s / 6.0 - phi[i, j, k])


@njit(cache=True, nogil=True)
def max_residual(phi, free):
    """max |mean of the six neighbours - phi| over free nodes."""
    nx, ny, nz = phi.shape
    worst = 0.0
    for i in range(1, nx - 1):
        for j in range(1, ny - 1):
            for k in range(1, nz - 1):
                if free[i, j, k]:
                    s = (
                        phi[i - 1, j, k]
                        + phi[i + 1, j, k]
                        + phi[i, j - 1, k]
                        + phi[i, j + 1, k]
                        + phi[i, j, k - 1]
                        + phi[i, j, k + 1]
                    )
                    r = abs(s / 6.0 - phi[i, j, k])
                    if r > worst:
                        worst = r
    return worst


@njit(cache=True, nogil=True)
def _cell(x, origin, h, n):
    t = (x - origin) / h
    i = int(math.floor(t))
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    f = t - i
    if f < 0.0:
        f = 0.0
    elif f > 1.0:
        f = 1.0
    return i, f


@njit(cache=True, nogil=True)
def trilinear(a, origin, h, x, y, z):
    """Trilinear interpolation of node array ``a`` (clamped to the grid)."""
    nx, ny, nz = a.shape
    i, fx = _cell(x, origin[0], h, nx)
    j, fy = _cell(y, origin[1], h, ny)
    k, fz = _cell(z, origin[2], h, nz)
    c00 = a[i, j, k] * (1 - fx) + a[i + 1, j, k] * fx
    c10 = a[i, j + 1, k] * (1 - fx) + a[i + 1, j + 1, k] * fx
    c01 = a[i, j, k + 1] * (1 - fx) + a[i + 1, j, k + 1] * fx
    c11 = a[i, j + 1, k + 1] * (1 - fx) + a[i + 1, j + 1, k + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@njit(cache=True, nogil=True)
def trilinear_stack(stack, weights, origin, h, x, y, z):
    """sum_k weights[k] * trilinear(stack[k]) without forming the sum grid."""
    _, nx, ny, nz = stack.shape
    i, fx = _cell(x, origin[0], h, nx)
    j, fy = _cell(y, origin[1], h, ny)
    k, fz = _cell(z, origin[2], h, nz)
    w000 = (1 - fx) * (1 - fy) * (1 - fz)
    w100 = fx * (1 - fy) * (1 - fz)
    w010 = (1 - fx) * fy * (1 - fz)
    w110 = fx * fy * (1 - fz)
    w001 = (1 - fx) * (1 - fy) * fz
    w101 = fx * (1 - fy) * fz
    w011 = (1 - fx) * fy * fz
    w111 = fx * fy * fz
    total = 0.0
    for m in range(stack.shape[0]):
        wm = weights[m]
        if wm == 0.0:
            continue
        a = stack[m]
        v = (
            a[i, j, k] * w000
            + a[i + 1, j, k] * w100
            + a[i, j + 1, k] * w010
            + a[i + 1, j + 1, k] * w110
            + a[i, j, k + 1] * w001
            + a[i + 1, j, k + 1] * w101
            + a[i, j + 1, k + 1] * w011
            + a[i + 1, j + 1, k + 1] * w111
        )
        total += wm * v
    return total


@njit(cache=True, nogil=True)
def in_box(origin, h, shape, x, y, z, margin):
    return (
        x >= origin[0] + margin
        and y >= origin[1] + margin
        and z >= origin[2] + margin
        and x <= origin[0] + h * (shape[0] - 1) - margin
        and y <= origin[1] + h * (shape[1] - 1) - margin
        and z <= origin[2] + h * (shape[2] - 1) - margin
    )


@njit(cache=True, nogil=True)
def potential_and_field(
    f_stack, f_origin, f_h, has_fine, c_stack, c_origin, c_h, weights, x, y, z, out
):
    """Potential at (x, y, z) and E = -grad(phi) by central differences at the grid spacing.

    Uses the refined grid whenever the whole stencil lies inside it.
    Writes (Ex, Ey, Ez) into ``out`` and returns the potential.
    """
    if has_fine and in_box(f_origin, f_h, f_stack.shape[1:], x, y, z, f_h):
        st = f_stack
        o = f_origin
        h = f_h
    else:
        st = c_stack
        o = c_origin
        h = c_h
    p0 = trilinear_stack(st, weights, o, h, x, y, z)
    inv = 1.0 / (2.0 * h)
    out[0] = -(trilinear_stack(st, weights, o, h, x + h, y, z) - trilinear_stack(st, weights, o, h, x - h, y, z)) * inv
    out[1] = -(trilinear_stack(st, weights, o, h, x, y + h, z) - trilinear_stack(st, weights, o, h, x, y - h, z)) * inv
    out[2] = -(trilinear_stack(st, weights, o, h, x, y, z + h) - trilinear_stack(st, weights, o, h, x, y, z - h)) * inv
    return p0


@njit(cache=True, nogil=True)
def nearest_label(labels, origin, h, x, y, z):
    nx, ny, nz = labels.shape
    i = int(math.floor((x - origin[0]) / h + 0.5))
    j = int(math.floor((y - origin[1]) / h + 0.5))
    k = int(math.floor((z - origin[2]) / h + 0.5))
    if i < 0 or j < 0 or k < 0 or i >= nx or j >= ny or k >= nz:
        return -1
    return labels[i, j, k]


@njit(cache=True, nogil=True)
def label_at(f_labels, f_origin, f_h, has_fine, c_labels, c_origin, c_h, x, y, z):
    """Voxel label at a point, -1 outside the coarse grid."""
    if has_fine and in_box(f_origin, f_h, f_labels.shape, x, y, z, 0.5 * f_h):
        return nearest_label(f_labels, f_origin, f_h, x, y, z)
    return nearest_label(c_labels, c_origin, c_h, x, y, z)


@njit(cache=True, nogil=True)
def interpolate_points(a, origin, h, pts):
    out = np.empty(pts.shape[0])
    for n in range(pts.shape[0]):
        out[n] = trilinear(a, origin, h, pts[n, 0], pts[n, 1], pts[n, 2])
    return out
