"""Compiled particle pushers: Dormand-Prince 5(4) and a Boris scheme.

Both integrate m dv/dt = q (E(x, t) + v x B) with E superposed from a stack of
potential grids whose weights follow exponential voltage ramps.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ._kernels import label_at, potential_and_field

ST_PLANE = 1
ST_ELECTRODE = 2
ST_ESCAPED = 3
ST_TIMEOUT = 4
ST_UNDERFLOW = 5
ST_START_INSIDE = 6

# Dormand-Prince tableau
_C2, _C3, _C4, _C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 44 / 45, -56 / 15, 32 / 9
_A51, _A52, _A53, _A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
_A61, _A62, _A63, _A64, _A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
_B1, _B3, _B4, _B5, _B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
_E1, _E3, _E4, _E5, _E6, _E7 = (
    71 / 57600,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)


@njit(cache=True, nogil=True)
def _weights(t, u0, ut, tau, w):
    for k in range(w.shape[0]):
        if math.isinf(tau[k]):
            w[k] = u0[k]
        elif tau[k] <= 0.0:
            w[k] = ut[k]
        else:
            w[k] = ut[k] + (u0[k] - ut[k]) * math.exp(-t / tau[k])


@njit(cache=True, nogil=True)
def _deriv(t, y, fa, sched, w, qm, B, dy, e):
    _weights(t, sched[0], sched[1], sched[2], w)
    phi = potential_and_field(fa[0], fa[1], fa[2], fa[3], fa[4], fa[5], fa[6], w, y[0], y[1], y[2], e)
    dy[0] = y[3]
    dy[1] = y[4]
    dy[2] = y[5]
    dy[3] = qm * (e[0] + y[4] * B[2] - y[5] * B[1])
    dy[4] = qm * (e[1] + y[5] * B[0] - y[3] * B[2])
    dy[5] = qm * (e[2] + y[3] * B[1] - y[4] * B[0])
    return phi


@njit(cache=True, nogil=True)
def _hermite(y0, y1, dt, s, out):
    """Cubic Hermite position (and velocity) along a step, 0 <= s <= 1."""
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    d00 = 6 * s**2 - 6 * s
    d10 = 3 * s**2 - 4 * s + 1
    d01 = -6 * s**2 + 6 * s
    d11 = 3 * s**2 - 2 * s
    for c in range(3):
        p0 = y0[c]
        p1 = y1[c]
        m0 = y0[c + 3] * dt
        m1 = y1[c + 3] * dt
        out[c] = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
        out[c + 3] = (d00 * p0 + d10 * m0 + d01 * p1 + d11 * m1) / dt


@njit(cache=True, nogil=True)
def _local_h(la, x, y, z):
    if la[3]:
        f_o = la[1]
        f_h = la[2]
        sh = la[0].shape
        if (
            x >= f_o[0] and y >= f_o[1] and z >= f_o[2]
            and x <= f_o[0] + f_h * (sh[0] - 1)
            and y <= f_o[1] + f_h * (sh[1] - 1)
            and z <= f_o[2] + f_h * (sh[2] - 1)
        ):
            return f_h
    return la[6]


@njit(cache=True, nogil=True)
def _occupied(la, x, y, z, cem_label, detector_z):
    lab = label_at(la[0], la[1], la[2], la[3], la[4], la[5], la[6], x, y, z)
    if lab == 0:
        return 0
    if lab == cem_label and z >= detector_z - 1e-12:
        # the front facet is the exact plane z = detector_z; the half voxel
        # of plate material rasterized above it is treated as vacuum
        if z <= detector_z + 1.5 * _local_h(la, x, y, z):
            return 0
    return lab


@njit(cache=True, nogil=True)
def _check_step(y0, y1, dt, la, stop_z, cem_label, detector_z, tmp, hit):
    """Inspect one step for a plane crossing or an electrode/boundary hit.

    Returns (status, s) with s the step fraction of the event; ``hit`` gets
    the state at the event.
    """
    s_end = 1.0
    crossed = False
    if (y0[2] - stop_z) > 0.0 and (y1[2] - stop_z) <= 0.0:
        lo = 0.0
        hi = 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            _hermite(y0, y1, dt, mid, tmp)
            if tmp[2] - stop_z > 0.0:
                lo = mid
            else:
                hi = mid
        s_end = hi
        crossed = True

    h = min(_local_h(la, y0[0], y0[1], y0[2]), _local_h(la, y1[0], y1[1], y1[2]))
    chord = math.sqrt((y1[0] - y0[0]) ** 2 + (y1[1] - y0[1]) ** 2 + (y1[2] - y0[2]) ** 2)
    n = int(math.ceil(chord * s_end / (0.5 * h))) + 1
    s_prev = 0.0
    for m in range(1, n + 1):
        s = s_end * m / n
        _hermite(y0, y1, dt, s, tmp)
        lab = _occupied(la, tmp[0], tmp[1], tmp[2], cem_label, detector_z)
        if lab != 0:
            lo = s_prev
            hi = s
            while (hi - lo) * chord > 0.1 * h:
                mid = 0.5 * (lo + hi)
                _hermite(y0, y1, dt, mid, tmp)
                if _occupied(la, tmp[0], tmp[1], tmp[2], cem_label, detector_z) != 0:
                    hi = mid
                else:
                    lo = mid
            _hermite(y0, y1, dt, hi, tmp)
            lab = _occupied(la, tmp[0], tmp[1], tmp[2], cem_label, detector_z)
            _hermite(y0, y1, dt, lo, hit)
            if lab < 0:
                return ST_ESCAPED, lo, lab
            return ST_ELECTRODE, lo, lab
        s_prev = s
    if crossed:
        _hermite(y0, y1, dt, s_end, hit)
        hit[2] = stop_z
        return ST_PLANE, s_end, 0
    return 0, 1.0, 0


@njit(cache=True, nogil=True)
def rk45_trace(
    y_init, t_init, qm, fa, la, sched, B,
    stop_z, cem_label, detector_z,
    rtol, atol_x, atol_v, dt_init, dt_max, t_max, max_steps,
    rec_t, rec_y, rec_phi, record,
):
    """Adaptive Dormand-Prince integration until a termination event.

    Returns (status, n_records, t_end, y_end, label, phi_start, phi_end, n_steps).
    """
    ncomp = sched[0].shape[0]
    w = np.empty(ncomp)
    e = np.empty(3)
    y = y_init.copy()
    t = t_init
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    k5 = np.empty(6)
    k6 = np.empty(6)
    k7 = np.empty(6)
    yt = np.empty(6)
    yn = np.empty(6)
    tmp = np.empty(6)
    hit = np.empty(6)

    lab0 = _occupied(la, y[0], y[1], y[2], cem_label, detector_z)
    phi_start = _deriv(t, y, fa, sched, w, qm, B, k1, e)
    if lab0 != 0:
        return ST_START_INSIDE, 0, t, y, lab0, phi_start, phi_start, 0

    nrec = 0
    if record:
        rec_t[0] = t
        rec_y[0, :] = y
        rec_phi[0] = phi_start
        nrec = 1

    dt = dt_init
    steps = 0
    phi_end = phi_start
    while True:
        if t - t_init >= t_max or steps >= max_steps:
            return ST_TIMEOUT, nrec, t, y, 0, phi_start, phi_end, steps
        if dt > dt_max:
            dt = dt_max
        for c in range(6):
            yt[c] = y[c] + dt * _A21 * k1[c]
        _deriv(t + _C2 * dt, yt, fa, sched, w, qm, B, k2, e)
        for c in range(6):
            yt[c] = y[c] + dt * (_A31 * k1[c] + _A32 * k2[c])
        _deriv(t + _C3 * dt, yt, fa, sched, w, qm, B, k3, e)
        for c in range(6):
            yt[c] = y[c] + dt * (_A41 * k1[c] + _A42 * k2[c] + _A43 * k3[c])
        _deriv(t + _C4 * dt, yt, fa, sched, w, qm, B, k4, e)
        for c in range(6):
            yt[c] = y[c] + dt * (_A51 * k1[c] + _A52 * k2[c] + _A53 * k3[c] + _A54 * k4[c])
        _deriv(t + _C5 * dt, yt, fa, sched, w, qm, B, k5, e)
        for c in range(6):
            yt[c] = y[c] + dt * (_A61 * k1[c] + _A62 * k2[c] + _A63 * k3[c] + _A64 * k4[c] + _A65 * k5[c])
        _deriv(t + dt, yt, fa, sched, w, qm, B, k6, e)
        for c in range(6):
            yn[c] = y[c] + dt * (_B1 * k1[c] + _B3 * k3[c] + _B4 * k4[c] + _B5 * k5[c] + _B6 * k6[c])
        phi_new = _deriv(t + dt, yn, fa, sched, w, qm, B, k7, e)

        err = 0.0
        for c in range(6):
            ec = dt * (_E1 * k1[c] + _E3 * k3[c] + _E4 * k4[c] + _E5 * k5[c] + _E6 * k6[c] + _E7 * k7[c])
            sc = (atol_x if c < 3 else atol_v) + rtol * max(abs(y[c]), abs(yn[c]))
            r = abs(ec) / sc
            if r > err:
                err = r
        if err > 1.0:
            dt *= max(0.2, 0.9 * err ** -0.2)
            if dt < 1e-22:
                return ST_UNDERFLOW, nrec, t, y, 0, phi_start, phi_end, steps
            continue

        steps += 1
        status, s, lab = _check_step(y, yn, dt, la, stop_z, cem_label, detector_z, tmp, hit)
        if status != 0:
            t_hit = t + s * dt
            phi_end = _deriv(t_hit, hit, fa, sched, w, qm, B, tmp, e)
            if record:
                rec_t[nrec] = t_hit
                rec_y[nrec, :] = hit
                rec_phi[nrec] = phi_end
                nrec += 1
            return status, nrec, t_hit, hit, lab, phi_start, phi_end, steps

        t += dt
        y[:] = yn
        k1[:] = k7
        phi_end = phi_new
        if record and nrec < rec_t.shape[0] - 1:
            rec_t[nrec] = t
            rec_y[nrec, :] = y
            rec_phi[nrec] = phi_new
            nrec += 1
        if err < 1e-10:
            dt *= 5.0
        else:
            dt *= min(5.0, 0.9 * err ** -0.2)


@njit(cache=True, nogil=True)
def _boris_kick(v, e, B, qm, dt, out):
    """Half-kick, exact-angle rotation, half-kick."""
    vm0 = v[0] + 0.5 * qm * dt * e[0]
    vm1 = v[1] + 0.5 * qm * dt * e[1]
    vm2 = v[2] + 0.5 * qm * dt * e[2]
    bmag = math.sqrt(B[0] ** 2 + B[1] ** 2 + B[2] ** 2)
    if bmag > 0.0:
        half = 0.5 * qm * bmag * dt
        scale = math.tan(half) / bmag
        t0 = B[0] * scale
        t1 = B[1] * scale
        t2 = B[2] * scale
        tt = t0 * t0 + t1 * t1 + t2 * t2
        p0 = vm0 + (vm1 * t2 - vm2 * t1)
        p1 = vm1 + (vm2 * t0 - vm0 * t2)
        p2 = vm2 + (vm0 * t1 - vm1 * t0)
        f = 2.0 / (1.0 + tt)
        s0 = t0 * f
        s1 = t1 * f
        s2 = t2 * f
        vm0, vm1, vm2 = (
            vm0 + (p1 * s2 - p2 * s1),
            vm1 + (p2 * s0 - p0 * s2),
            vm2 + (p0 * s1 - p1 * s0),
        )
    out[0] = vm0 + 0.5 * qm * dt * e[0]
    out[1] = vm1 + 0.5 * qm * dt * e[1]
    out[2] = vm2 + 0.5 * qm * dt * e[2]


@njit(cache=True, nogil=True)
def boris_trace(
    y_init, t_init, qm, fa, la, sched, B,
    stop_z, cem_label, detector_z,
    dt, t_max, max_steps,
    rec_t, rec_y, rec_phi, record,
):
    """Fixed-step leapfrog Boris integration; same return layout as rk45_trace."""
    ncomp = sched[0].shape[0]
    w = np.empty(ncomp)
    e = np.empty(3)
    x = y_init[:3].copy()
    t = t_init
    tmp = np.empty(6)
    hit = np.empty(6)
    y0 = np.empty(6)
    y1 = np.empty(6)
    vh = np.empty(3)
    vn = np.empty(3)

    lab0 = _occupied(la, x[0], x[1], x[2], cem_label, detector_z)
    _weights(t, sched[0], sched[1], sched[2], w)
    phi_start = potential_and_field(fa[0], fa[1], fa[2], fa[3], fa[4], fa[5], fa[6], w, x[0], x[1], x[2], e)
    if lab0 != 0:
        return ST_START_INSIDE, 0, t, y_init.copy(), lab0, phi_start, phi_start, 0

    # v at t - dt/2 from a backward half step
    _boris_kick(y_init[3:], e, B, qm, -0.5 * dt, vh)
    y0[:3] = x
    y0[3:] = y_init[3:]
    nrec = 0
    if record:
        rec_t[0] = t
        rec_y[0, :] = y0
        rec_phi[0] = phi_start
        nrec = 1
    phi = phi_start
    en = np.empty(3)
    steps = 0
    while True:
        if t - t_init >= t_max or steps >= max_steps:
            return ST_TIMEOUT, nrec, t, y0, 0, phi_start, phi, steps
        # e holds the field at x_n; kick, drift, then sample the field at x_{n+1}
        _boris_kick(vh, e, B, qm, dt, vn)
        y1[0] = x[0] + vn[0] * dt
        y1[1] = x[1] + vn[1] * dt
        y1[2] = x[2] + vn[2] * dt
        _weights(t + dt, sched[0], sched[1], sched[2], w)
        phi = potential_and_field(fa[0], fa[1], fa[2], fa[3], fa[4], fa[5], fa[6], w, y1[0], y1[1], y1[2], en)
        # velocity synchronized to the node, used for output and event location
        _boris_kick(vn, en, B, qm, 0.5 * dt, tmp)
        y1[3] = tmp[0]
        y1[4] = tmp[1]
        y1[5] = tmp[2]
        steps += 1
        status, s, lab = _check_step(y0, y1, dt, la, stop_z, cem_label, detector_z, tmp, hit)
        if status != 0:
            t_hit = t + s * dt
            _weights(t_hit, sched[0], sched[1], sched[2], w)
            phi = potential_and_field(fa[0], fa[1], fa[2], fa[3], fa[4], fa[5], fa[6], w, hit[0], hit[1], hit[2], en)
            if record:
                rec_t[nrec] = t_hit
                rec_y[nrec, :] = hit
                rec_phi[nrec] = phi
                nrec += 1
            return status, nrec, t_hit, hit, lab, phi_start, phi, steps
        t += dt
        x[:] = y1[:3]
        vh[:] = vn
        e[:] = en
        y0[:] = y1
        if record and nrec < rec_t.shape[0] - 1:
            rec_t[nrec] = t
            rec_y[nrec, :] = y1
            rec_phi[nrec] = phi
            nrec += 1
