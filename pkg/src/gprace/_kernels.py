"""Numba-compiled hot paths for the bicycle-model rollouts and Jacobians.

Everything here mirrors the numpy reference implementations in vehicle.py;
the controller and simulator route through these kernels when numba imports
(vehicle.py falls back to the numpy versions otherwise). Vehicle parameters
travel as a flat float tuple to keep the signatures numba-friendly.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


def params_tuple(p) -> tuple:
    """Flatten VehicleParams into the argument pack the kernels expect."""
    return (p.mass, p.inertia_z, p.l_f, p.l_r, p.tire_b, p.tire_c, p.tire_d,
            p.c_drag, p.c_roll, p.v_blend, p.kin_relax_time)


@njit(cache=True)
def _deriv(z, u, out, mass, inertia_z, l_f, l_r, tire_b, tire_c, tire_d,
           c_drag, c_roll, v_blend, t_relax):
    phi, v_x, v_y, omega = z[2], z[3], z[4], z[5]
    force, delta = u[0], u[1]
    cphi, sphi = np.cos(phi), np.sin(phi)
    out[0] = v_x * cphi - v_y * sphi
    out[1] = v_x * sphi + v_y * cphi
    out[2] = omega
    drag = c_drag * v_x * abs(v_x) + c_roll * v_x
    wheelbase = l_f + l_r

    omega_kin = v_x * np.tan(delta) / wheelbase
    v_y_kin = l_r * omega_kin
    k3 = (force - drag) / mass
    k4 = (v_y_kin - v_y) / t_relax
    k5 = (omega_kin - omega) / t_relax

    w = v_x / v_blend
    if w <= 0.0:
        out[3] = k3
        out[4] = k4
        out[5] = k5
        return
    if w > 1.0:
        w = 1.0

    v_x_s = v_x if v_x > 1e-6 else 1e-6
    alpha_f = delta - np.arctan((v_y + l_f * omega) / v_x_s)
    alpha_r = -np.arctan((v_y - l_r * omega) / v_x_s)
    f_yf = tire_d * np.sin(tire_c * np.arctan(tire_b * alpha_f))
    f_yr = tire_d * np.sin(tire_c * np.arctan(tire_b * alpha_r))
    cd, sd = np.cos(delta), np.sin(delta)
    d3 = (force - f_yf * sd + mass * v_y * omega - drag) / mass
    d4 = (f_yr + f_yf * cd - mass * v_x * omega) / mass
    d5 = (l_f * f_yf * cd - l_r * f_yr) / inertia_z
    out[3] = w * d3 + (1.0 - w) * k3
    out[4] = w * d4 + (1.0 - w) * k4
    out[5] = w * d5 + (1.0 - w) * k5


@njit(cache=True)
def _rk4_step(z, u, h, buf, mass, inertia_z, l_f, l_r, tire_b, tire_c, tire_d,
              c_drag, c_roll, v_blend, t_relax):
    k1, k2, k3, k4, tmp = buf[0], buf[1], buf[2], buf[3], buf[4]
    _deriv(z, u, k1, mass, inertia_z, l_f, l_r, tire_b, tire_c, tire_d,
           c_drag, c_roll, v_blend, t_relax)
    for i in range(6):
        tmp[i] = z[i] + 0.5 * h * k1[i]
    _deriv(tmp, u, k2, mass, inertia_z, l_f, l_r, tire_b, tire_c, tire_d,
           c_drag, c_roll, v_blend, t_relax)
    for i in range(6):
        tmp[i] = z[i] + 0.5 * h * k2[i]
    _deriv(tmp, u, k3, mass, inertia_z, l_f, l_r, tire_b, tire_c, tire_d,
           c_drag, c_roll, v_blend, t_relax)
    for i in range(6):
        tmp[i] = z[i] + h * k3[i]
    _deriv(tmp, u, k4, mass, inertia_z, l_f, l_r, tire_b, tire_c, tire_d,
           c_drag, c_roll, v_blend, t_relax)
    for i in range(6):
        z[i] = z[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def step_batch(zs, us, ts, substeps, mass, inertia_z, l_f, l_r, tire_b,
               tire_c, tire_d, c_drag, c_roll, v_blend, t_relax):
    """Advance each row of (T, 6) states independently by one control period."""
    n = zs.shape[0]
    out = zs.copy()
    buf = np.empty((5, 6))
    h = ts / substeps
    for i in range(n):
        for _ in range(substeps):
            _rk4_step(out[i], us[i], h, buf, mass, inertia_z, l_f, l_r,
                      tire_b, tire_c, tire_d, c_drag, c_roll, v_blend, t_relax)
    return out


@njit(cache=True)
def rollout_inputs(z0, us_batch, ts, substeps, mass, inertia_z, l_f, l_r,
                   tire_b, tire_c, tire_d, c_drag, c_roll, v_blend, t_relax):
    """Integrate candidate input sequences (K, N, 2) from a shared state."""
    n_cand, n_hor, _ = us_batch.shape
    zs = np.empty((n_cand, n_hor + 1, 6))
    buf = np.empty((5, 6))
    h = ts / substeps
    for k in range(n_cand):
        for i in range(6):
            zs[k, 0, i] = z0[i]
        for t in range(n_hor):
            for i in range(6):
                zs[k, t + 1, i] = zs[k, t, i]
            for _ in range(substeps):
                _rk4_step(zs[k, t + 1], us_batch[k, t], h, buf, mass,
                          inertia_z, l_f, l_r, tire_b, tire_c, tire_d,
                          c_drag, c_roll, v_blend, t_relax)
    return zs


@njit(cache=True)
def _jacobians(z, u, jz, ju, mass, inertia_z, l_f, l_r, tire_b, tire_c,
               tire_d, c_drag, c_roll, v_blend, t_relax):
    """Analytic d f/d z and d f/d u of the blended derivative."""
    phi, v_x, v_y, omega = z[2], z[3], z[4], z[5]
    force, delta = u[0], u[1]
    cphi, sphi = np.cos(phi), np.sin(phi)
    for i in range(6):
        for j in range(6):
            jz[i, j] = 0.0
        ju[i, 0] = 0.0
        ju[i, 1] = 0.0

    jz[0, 2] = -v_x * sphi - v_y * cphi
    jz[0, 3] = cphi
    jz[0, 4] = -sphi
    jz[1, 2] = v_x * cphi - v_y * sphi
    jz[1, 3] = sphi
    jz[1, 4] = cphi
    jz[2, 5] = 1.0

    ddrag = 2.0 * c_drag * abs(v_x) + c_roll
    wheelbase = l_f + l_r
    tan_d = np.tan(delta)
    sec2 = 1.0 + tan_d * tan_d

    # kinematic rows
    k33 = -ddrag / mass
    k30 = 1.0 / mass
    k43 = l_r * tan_d / (wheelbase * t_relax)
    k44 = -1.0 / t_relax
    k41 = l_r * v_x * sec2 / (wheelbase * t_relax)
    k53 = tan_d / (wheelbase * t_relax)
    k55 = -1.0 / t_relax
    k51 = v_x * sec2 / (wheelbase * t_relax)

    w = v_x / v_blend
    if w <= 0.0:
        jz[3, 3] = k33
        ju[3, 0] = k30
        jz[4, 3] = k43
        jz[4, 4] = k44
        ju[4, 1] = k41
        jz[5, 3] = k53
        jz[5, 5] = k55
        ju[5, 1] = k51
        return
    if w > 1.0:
        w = 1.0

    v_x_s = v_x if v_x > 1e-6 else 1e-6
    q_f = v_y + l_f * omega
    q_r = v_y - l_r * omega
    alpha_f = delta - np.arctan(q_f / v_x_s)
    alpha_r = -np.arctan(q_r / v_x_s)
    inner_f = tire_c * np.arctan(tire_b * alpha_f)
    inner_r = tire_c * np.arctan(tire_b * alpha_r)
    f_yf = tire_d * np.sin(inner_f)
    f_yr = tire_d * np.sin(inner_r)
    cd, sd = np.cos(delta), np.sin(delta)

    den_f = v_x_s * v_x_s + q_f * q_f
    den_r = v_x_s * v_x_s + q_r * q_r
    af_vx, af_vy, af_om = q_f / den_f, -v_x_s / den_f, -l_f * v_x_s / den_f
    ar_vx, ar_vy, ar_om = q_r / den_r, -v_x_s / den_r, l_r * v_x_s / den_r

    dfy_f = tire_d * np.cos(inner_f) * tire_c * tire_b \
        / (1.0 + (tire_b * alpha_f) ** 2)
    dfy_r = tire_d * np.cos(inner_r) * tire_c * tire_b \
        / (1.0 + (tire_b * alpha_r) ** 2)

    d33 = (-dfy_f * af_vx * sd - ddrag) / mass
    d34 = -dfy_f * af_vy * sd / mass + omega
    d35 = -dfy_f * af_om * sd / mass + v_y
    d30 = 1.0 / mass
    d31 = (-dfy_f * sd - f_yf * cd) / mass

    d43 = (dfy_r * ar_vx + dfy_f * af_vx * cd) / mass - omega
    d44 = (dfy_r * ar_vy + dfy_f * af_vy * cd) / mass
    d45 = (dfy_r * ar_om + dfy_f * af_om * cd) / mass - v_x
    d41 = (dfy_f * cd - f_yf * sd) / mass

    d53 = (l_f * dfy_f * af_vx * cd - l_r * dfy_r * ar_vx) / inertia_z
    d54 = (l_f * dfy_f * af_vy * cd - l_r * dfy_r * ar_vy) / inertia_z
    d55 = (l_f * dfy_f * af_om * cd - l_r * dfy_r * ar_om) / inertia_z
    d51 = l_f * (dfy_f * cd - f_yf * sd) / inertia_z

    if w >= 1.0:
        jz[3, 3] = d33
        jz[3, 4] = d34
        jz[3, 5] = d35
        ju[3, 0] = d30
        ju[3, 1] = d31
        jz[4, 3] = d43
        jz[4, 4] = d44
        jz[4, 5] = d45
        ju[4, 1] = d41
        jz[5, 3] = d53
        jz[5, 4] = d54
        jz[5, 5] = d55
        ju[5, 1] = d51
        return

    vw = 1.0 - w
    jz[3, 3] = w * d33 + vw * k33
    jz[3, 4] = w * d34
    jz[3, 5] = w * d35
    ju[3, 0] = w * d30 + vw * k30
    ju[3, 1] = w * d31
    jz[4, 3] = w * d43 + vw * k43
    jz[4, 4] = w * d44 + vw * k44
    jz[4, 5] = w * d45
    ju[4, 1] = w * d41 + vw * k41
    jz[5, 3] = w * d53 + vw * k53
    jz[5, 4] = w * d54
    jz[5, 5] = w * d55 + vw * k55
    ju[5, 1] = w * d51 + vw * k51

    # blend weight depends on v_x
    dw = 1.0 / v_blend
    # dynamic minus kinematic derivative rows 3..5
    drag = c_drag * v_x * abs(v_x) + c_roll * v_x
    omega_kin = v_x * tan_d / wheelbase
    v_y_kin = l_r * omega_kin
    f3d = (force - f_yf * sd + mass * v_y * omega - drag) / mass
    f4d = (f_yr + f_yf * cd - mass * v_x * omega) / mass
    f5d = (l_f * f_yf * cd - l_r * f_yr) / inertia_z
    f3k = (force - drag) / mass
    f4k = (v_y_kin - v_y) / t_relax
    f5k = (omega_kin - omega) / t_relax
    jz[3, 3] += dw * (f3d - f3k)
    jz[4, 3] += dw * (f4d - f4k)
    jz[5, 3] += dw * (f5d - f5k)


@njit(cache=True)
def step_jac_batch(zs, us, ts, substeps, mass, inertia_z, l_f, l_r, tire_b,
                   tire_c, tire_d, c_drag, c_roll, v_blend, t_relax):
    """One control-period step plus chained RK4 sensitivities per row."""
    n = zs.shape[0]
    out = zs.copy()
    a_tot = np.empty((n, 6, 6))
    b_tot = np.zeros((n, 6, 2))
    h = ts / substeps

    eye = np.eye(6)
    jz = np.empty((6, 6))
    ju = np.empty((6, 2))
    k = np.empty((4, 6))
    kz = np.empty((4, 6, 6))
    ku = np.empty((4, 6, 2))
    tmp = np.empty(6)

    for idx in range(n):
        a_i = a_tot[idx]
        for i in range(6):
            for j in range(6):
                a_i[i, j] = eye[i, j]
        z = out[idx]
        u = us[idx]
        for _ in range(substeps):
            # stage 1
            _deriv(z, u, k[0], mass, inertia_z, l_f, l_r, tire_b, tire_c,
                   tire_d, c_drag, c_roll, v_blend, t_relax)
            _jacobians(z, u, jz, ju, mass, inertia_z, l_f, l_r, tire_b,
                       tire_c, tire_d, c_drag, c_roll, v_blend, t_relax)
            kz[0] = jz.copy()
            ku[0] = ju.copy()
            # stages 2..4
            for stage in range(1, 4):
                coef = 0.5 * h if stage < 3 else h
                for i in range(6):
                    tmp[i] = z[i] + coef * k[stage - 1, i]
                _deriv(tmp, u, k[stage], mass, inertia_z, l_f, l_r, tire_b,
                       tire_c, tire_d, c_drag, c_roll, v_blend, t_relax)
                _jacobians(tmp, u, jz, ju, mass, inertia_z, l_f, l_r, tire_b,
                           tire_c, tire_d, c_drag, c_roll, v_blend, t_relax)
                kz[stage] = jz @ (eye + coef * kz[stage - 1])
                ku[stage] = jz @ (coef * ku[stage - 1]) + ju
            a_sub = eye + (h / 6.0) * (kz[0] + 2.0 * kz[1] + 2.0 * kz[2] + kz[3])
            b_sub = (h / 6.0) * (ku[0] + 2.0 * ku[1] + 2.0 * ku[2] + ku[3])
            for i in range(6):
                z[i] = z[i] + (h / 6.0) * (k[0, i] + 2.0 * k[1, i]
                                           + 2.0 * k[2, i] + k[3, i])
            a_tot[idx] = a_sub @ a_tot[idx]
            b_tot[idx] = a_sub @ b_tot[idx] + b_sub
    return out, a_tot, b_tot
