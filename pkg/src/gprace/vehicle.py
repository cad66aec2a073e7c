"""Dynamic bicycle model with simplified Pacejka lateral tires, an RK4
discretization, and analytic step Jacobians for the optimizer.

States are ``[p_x, p_y, phi, v_x, v_y, omega]``; inputs are
``[F_x_rear, delta]``. All core functions are vectorized over leading axes
(states ``(..., 6)``, inputs ``(..., 2)``). Below ``v_blend`` the derivative
blends linearly into a relaxed kinematic bicycle so the slip angles stay
defined down to standstill.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import _kernels


class ModelSingularity(RuntimeError):
    """Dynamic model evaluated below its valid speed range."""


class NonFiniteState(RuntimeError):
    """Integration produced NaN or inf."""


@dataclass(frozen=True)
class VehicleState:
    p_x: float
    p_y: float
    phi: float
    v_x: float
    v_y: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.omega])

    @staticmethod
    def from_array(arr) -> "VehicleState":
        return VehicleState(*(float(v) for v in arr))


@dataclass(frozen=True)
class VehicleInput:
    force: float
    steer: float

    def as_array(self) -> np.ndarray:
        return np.array([self.force, self.steer])

    @staticmethod
    def from_array(arr) -> "VehicleInput":
        return VehicleInput(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters; defaults are plausible 1/10-scale values."""

    mass: float = 2.5
    inertia_z: float = 0.03
    l_f: float = 0.13
    l_r: float = 0.13
    tire_b: float = 5.0
    tire_c: float = 1.5
    tire_d: float = 14.715  # per axle, ~1.2 * m * g / 2
    c_drag: float = 0.05
    c_roll: float = 0.1
    length: float = 0.4
    width: float = 0.2
    input_lower: tuple = (-6.0, -0.35)
    input_upper: tuple = (4.0, 0.35)
    v_blend: float = 0.5
    kin_relax_time: float = 0.05

    @property
    def wheelbase(self) -> float:
        return self.l_f + self.l_r

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_lower"] = list(self.input_lower)
        d["input_upper"] = list(self.input_upper)
        return d

    @staticmethod
    def from_json(data: dict) -> "VehicleParams":
        data = dict(data)
        data["input_lower"] = tuple(data["input_lower"])
        data["input_upper"] = tuple(data["input_upper"])
        return VehicleParams(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @staticmethod
    def load(path) -> "VehicleParams":
        return VehicleParams.from_json(json.loads(Path(path).read_text()))


def default_params() -> VehicleParams:
    """Shipped 1/10-scale defaults (same values as params/onetenth.json)."""
    return VehicleParams()


def _drag_force(v_x, p: VehicleParams):
    return p.c_drag * v_x * np.abs(v_x) + p.c_roll * v_x


def _dynamic_parts(z, u, p: VehicleParams):
    """Shared intermediates of the dynamic bicycle derivative.

    v_x is floored at a tiny positive value; callers must weight the result
    to zero wherever the true v_x is non-positive.
    """
    phi, v_x, v_y, omega = z[..., 2], z[..., 3], z[..., 4], z[..., 5]
    force, delta = u[..., 0], u[..., 1]
    v_x = np.maximum(v_x, 1e-6)

    q_f = v_y + p.l_f * omega
    q_r = v_y - p.l_r * omega
    alpha_f = delta - np.arctan(q_f / v_x)
    alpha_r = -np.arctan(q_r / v_x)

    inner_f = p.tire_c * np.arctan(p.tire_b * alpha_f)
    inner_r = p.tire_c * np.arctan(p.tire_b * alpha_r)
    f_yf = p.tire_d * np.sin(inner_f)
    f_yr = p.tire_d * np.sin(inner_r)
    return phi, v_x, v_y, omega, force, delta, q_f, q_r, alpha_f, alpha_r, f_yf, f_yr


def _dynamic_derivative(z, u, p: VehicleParams):
    phi, v_x, v_y, omega, force, delta, _, _, _, _, f_yf, f_yr = _dynamic_parts(z, u, p)
    cphi, sphi = np.cos(phi), np.sin(phi)
    cd, sd = np.cos(delta), np.sin(delta)
    out = np.empty(np.broadcast(z[..., 0], u[..., 0]).shape + (6,))
    out[..., 0] = v_x * cphi - v_y * sphi
    out[..., 1] = v_x * sphi + v_y * cphi
    out[..., 2] = omega
    out[..., 3] = (force - f_yf * sd + p.mass * v_y * omega - _drag_force(v_x, p)) / p.mass
    out[..., 4] = (f_yr + f_yf * cd - p.mass * v_x * omega) / p.mass
    out[..., 5] = (p.l_f * f_yf * cd - p.l_r * f_yr) / p.inertia_z
    return out


def _kinematic_derivative(z, u, p: VehicleParams):
    phi, v_x, v_y, omega = z[..., 2], z[..., 3], z[..., 4], z[..., 5]
    force, delta = u[..., 0], u[..., 1]
    omega_kin = v_x * np.tan(delta) / p.wheelbase
    v_y_kin = p.l_r * omega_kin
    out = np.empty(np.broadcast(z[..., 0], u[..., 0]).shape + (6,))
    out[..., 0] = v_x * np.cos(phi) - v_y * np.sin(phi)
    out[..., 1] = v_x * np.sin(phi) + v_y * np.cos(phi)
    out[..., 2] = omega
    out[..., 3] = (force - _drag_force(v_x, p)) / p.mass
    out[..., 4] = (v_y_kin - v_y) / p.kin_relax_time
    out[..., 5] = (omega_kin - omega) / p.kin_relax_time
    return out


def continuous_dynamics(z, u, p: VehicleParams):
    """Dynamic bicycle state derivative; valid only above the blend speed."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(z[..., 3] <= p.v_blend):
        raise ModelSingularity(
            f"dynamic model needs v_x > {p.v_blend}; use step_rk4 for low speeds"
        )
    return _dynamic_derivative(z, u, p)


def blended_derivative(z, u, p: VehicleParams):
    """Derivative blending dynamic and kinematic models linearly in v_x."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    v_x = z[..., 3]
    w = np.clip(v_x / p.v_blend, 0.0, 1.0)[..., None]
    f_kin = _kinematic_derivative(z, u, p)
    if np.all(w >= 1.0):
        return _dynamic_derivative(z, u, p)
    f_dyn = _dynamic_derivative(z, u, p)
    return w * f_dyn + (1.0 - w) * f_kin


def _dynamic_jacobians(z, u, p: VehicleParams):
    phi, v_x, v_y, omega, force, delta, q_f, q_r, alpha_f, alpha_r, f_yf, f_yr = \
        _dynamic_parts(z, u, p)
    cphi, sphi = np.cos(phi), np.sin(phi)
    cd, sd = np.cos(delta), np.sin(delta)

    den_f = v_x * v_x + q_f * q_f
    den_r = v_x * v_x + q_r * q_r
    af_vx, af_vy, af_om = q_f / den_f, -v_x / den_f, -p.l_f * v_x / den_f
    ar_vx, ar_vy, ar_om = q_r / den_r, -v_x / den_r, p.l_r * v_x / den_r

    dfy_f = p.tire_d * np.cos(p.tire_c * np.arctan(p.tire_b * alpha_f)) \
        * p.tire_c * p.tire_b / (1.0 + (p.tire_b * alpha_f) ** 2)
    dfy_r = p.tire_d * np.cos(p.tire_c * np.arctan(p.tire_b * alpha_r)) \
        * p.tire_c * p.tire_b / (1.0 + (p.tire_b * alpha_r) ** 2)
    ddrag = 2.0 * p.c_drag * np.abs(v_x) + p.c_roll

    shape = np.broadcast(z[..., 0], u[..., 0]).shape
    jz = np.zeros(shape + (6, 6))
    ju = np.zeros(shape + (6, 2))

    jz[..., 0, 2] = -v_x * sphi - v_y * cphi
    jz[..., 0, 3] = cphi
    jz[..., 0, 4] = -sphi
    jz[..., 1, 2] = v_x * cphi - v_y * sphi
    jz[..., 1, 3] = sphi
    jz[..., 1, 4] = cphi
    jz[..., 2, 5] = 1.0

    jz[..., 3, 3] = (-dfy_f * af_vx * sd - ddrag) / p.mass
    jz[..., 3, 4] = -dfy_f * af_vy * sd / p.mass + omega
    jz[..., 3, 5] = -dfy_f * af_om * sd / p.mass + v_y
    ju[..., 3, 0] = 1.0 / p.mass
    ju[..., 3, 1] = (-dfy_f * sd - f_yf * cd) / p.mass

    jz[..., 4, 3] = (dfy_r * ar_vx + dfy_f * af_vx * cd) / p.mass - omega
    jz[..., 4, 4] = (dfy_r * ar_vy + dfy_f * af_vy * cd) / p.mass
    jz[..., 4, 5] = (dfy_r * ar_om + dfy_f * af_om * cd) / p.mass - v_x
    ju[..., 4, 1] = (dfy_f * cd - f_yf * sd) / p.mass

    jz[..., 5, 3] = (p.l_f * dfy_f * af_vx * cd - p.l_r * dfy_r * ar_vx) / p.inertia_z
    jz[..., 5, 4] = (p.l_f * dfy_f * af_vy * cd - p.l_r * dfy_r * ar_vy) / p.inertia_z
    jz[..., 5, 5] = (p.l_f * dfy_f * af_om * cd - p.l_r * dfy_r * ar_om) / p.inertia_z
    ju[..., 5, 1] = p.l_f * (dfy_f * cd - f_yf * sd) / p.inertia_z
    return jz, ju


def _kinematic_jacobians(z, u, p: VehicleParams):
    phi, v_x, v_y = z[..., 2], z[..., 3], z[..., 4]
    delta = u[..., 1]
    tan_d = np.tan(delta)
    sec2 = 1.0 + tan_d * tan_d
    t_r, wb = p.kin_relax_time, p.wheelbase
    ddrag = 2.0 * p.c_drag * np.abs(v_x) + p.c_roll

    shape = np.broadcast(z[..., 0], u[..., 0]).shape
    jz = np.zeros(shape + (6, 6))
    ju = np.zeros(shape + (6, 2))

    cphi, sphi = np.cos(phi), np.sin(phi)
    jz[..., 0, 2] = -v_x * sphi - v_y * cphi
    jz[..., 0, 3] = cphi
    jz[..., 0, 4] = -sphi
    jz[..., 1, 2] = v_x * cphi - v_y * sphi
    jz[..., 1, 3] = sphi
    jz[..., 1, 4] = cphi
    jz[..., 2, 5] = 1.0

    jz[..., 3, 3] = -ddrag / p.mass
    ju[..., 3, 0] = 1.0 / p.mass

    jz[..., 4, 3] = p.l_r * tan_d / (wb * t_r)
    jz[..., 4, 4] = -1.0 / t_r
    ju[..., 4, 1] = p.l_r * v_x * sec2 / (wb * t_r)

    jz[..., 5, 3] = tan_d / (wb * t_r)
    jz[..., 5, 5] = -1.0 / t_r
    ju[..., 5, 1] = v_x * sec2 / (wb * t_r)
    return jz, ju


def blended_jacobians(z, u, p: VehicleParams):
    """Analytic Jacobians (d f / d z, d f / d u) of blended_derivative."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    v_x = z[..., 3]
    w = np.clip(v_x / p.v_blend, 0.0, 1.0)
    jz_d, ju_d = _dynamic_jacobians(z, u, p)
    if np.all(w >= 1.0):
        return jz_d, ju_d
    jz_k, ju_k = _kinematic_jacobians(z, u, p)
    f_d = _dynamic_derivative(z, u, p)
    f_k = _kinematic_derivative(z, u, p)
    wj = w[..., None, None]
    jz = wj * jz_d + (1.0 - wj) * jz_k
    ju = wj * ju_d + (1.0 - wj) * ju_k
    # Product-rule term from the v_x-dependent blend weight.
    dw = np.where((v_x > 0.0) & (v_x < p.v_blend), 1.0 / p.v_blend, 0.0)
    jz[..., :, 3] += dw[..., None] * (f_d - f_k)
    return jz, ju


def step_rk4(z, u, ts: float, p: VehicleParams):
    """Classical RK4 step with the input held constant; arrays pass through."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = blended_derivative(z, u, p)
    k2 = blended_derivative(z + 0.5 * ts * k1, u, p)
    k3 = blended_derivative(z + 0.5 * ts * k2, u, p)
    k4 = blended_derivative(z + ts * k3, u, p)
    out = z + (ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("RK4 step produced non-finite state")
    return out


def discrete_step(z, u, ts: float, p: VehicleParams, substeps: int = 10):
    """Discrete map used by simulator and controller: chained RK4 substeps.

    The default tire parameters give lateral eigenvalues near -124/v_x, so a
    single RK4 step at a 0.1 s control period sits outside the stability
    region; substepping keeps the same model with a stable integrator. With
    h = 0.01 and the 0.5 m/s kinematic blend, |lambda * h| stays below 2.5 at
    all speeds (the RK4 real-axis bound is about 2.78).

    Routes through the compiled kernels when numba is available; the numpy
    path is the reference implementation.
    """
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if _kernels.HAVE_NUMBA and z.ndim <= 2:
        single = z.ndim == 1
        zs = np.ascontiguousarray(np.atleast_2d(z))
        us = np.ascontiguousarray(
            np.broadcast_to(np.atleast_2d(u), (zs.shape[0], 2)))
        out = _kernels.step_batch(zs, us, ts, substeps,
                                  *_kernels.params_tuple(p))
        if not np.all(np.isfinite(out)):
            raise NonFiniteState("RK4 step produced non-finite state")
        return out[0] if single else out
    h = ts / substeps
    for _ in range(substeps):
        z = step_rk4(z, u, h, p)
    return z


def rollout_candidates(z0, us_batch, ts: float, p: VehicleParams,
                       substeps: int = 10):
    """States (K, N+1, 6) for candidate input sequences (K, N, 2) from z0."""
    us_batch = np.ascontiguousarray(us_batch, dtype=float)
    if _kernels.HAVE_NUMBA:
        zs = _kernels.rollout_inputs(np.ascontiguousarray(z0, dtype=float),
                                     us_batch, ts, substeps,
                                     *_kernels.params_tuple(p))
        if not np.all(np.isfinite(zs)):
            raise NonFiniteState("rollout produced non-finite state")
        return zs
    n_cand, n_hor, _ = us_batch.shape
    zs = np.empty((n_cand, n_hor + 1, 6))
    zs[:, 0] = z0
    for t in range(n_hor):
        zs[:, t + 1] = discrete_step(zs[:, t], us_batch[:, t], ts, p, substeps)
    return zs


def discrete_step_with_jacobians(z, u, ts: float, p: VehicleParams, substeps: int = 10):
    """discrete_step plus chained sensitivities A = dz'/dz, B = dz'/du.

    Accepts a single state (6,) or a batch (T, 6) with matching inputs.
    """
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if _kernels.HAVE_NUMBA:
        single = z.ndim == 1
        zs = np.ascontiguousarray(np.atleast_2d(z))
        us = np.ascontiguousarray(
            np.broadcast_to(np.atleast_2d(u), (zs.shape[0], 2)))
        out, a_tot, b_tot = _kernels.step_jac_batch(
            zs, us, ts, substeps, *_kernels.params_tuple(p))
        if not np.all(np.isfinite(out)):
            raise NonFiniteState("RK4 step produced non-finite state")
        if single:
            return out[0], a_tot[0], b_tot[0]
        return out, a_tot, b_tot
    h = ts / substeps
    a_tot = np.broadcast_to(np.eye(6), z.shape[:-1] + (6, 6)).copy()
    b_tot = np.zeros(z.shape[:-1] + (6, 2))
    for _ in range(substeps):
        z, a_k, b_k = step_rk4_with_jacobians(z, u, h, p)
        a_tot = a_k @ a_tot
        b_tot = a_k @ b_tot + b_k
    return z, a_tot, b_tot


def step_rk4_with_jacobians(z, u, ts: float, p: VehicleParams):
    """RK4 step plus analytic sensitivities A = dz'/dz, B = dz'/du."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    eye = np.eye(6)
    h = ts

    k1 = blended_derivative(z, u, p)
    j1z, j1u = blended_jacobians(z, u, p)

    z2 = z + 0.5 * h * k1
    k2 = blended_derivative(z2, u, p)
    jz2, ju2 = blended_jacobians(z2, u, p)
    k2z = jz2 @ (eye + 0.5 * h * j1z)
    k2u = jz2 @ (0.5 * h * j1u) + ju2

    z3 = z + 0.5 * h * k2
    k3 = blended_derivative(z3, u, p)
    jz3, ju3 = blended_jacobians(z3, u, p)
    k3z = jz3 @ (eye + 0.5 * h * k2z)
    k3u = jz3 @ (0.5 * h * k2u) + ju3

    z4 = z + h * k3
    k4 = blended_derivative(z4, u, p)
    jz4, ju4 = blended_jacobians(z4, u, p)
    k4z = jz4 @ (eye + h * k3z)
    k4u = jz4 @ (h * k3u) + ju4

    out = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState("RK4 step produced non-finite state")
    a_mat = eye + (h / 6.0) * (j1z + 2.0 * k2z + 2.0 * k3z + k4z)
    b_mat = (h / 6.0) * (j1u + 2.0 * k2u + 2.0 * k3u + k4u)
    return out, a_mat, b_mat
