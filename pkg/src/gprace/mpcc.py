"""Contouring-control racing policy solved by Gauss-Newton SQP over a dense
condensed QP.

The finite-horizon problem trades approximate progress against contouring
error subject to the discretized bicycle dynamics, track and input bounds,
and (for the ego role) collision-avoidance ellipses around the opponent
prediction that are expanded with the prediction uncertainty and deflatable
through bounded slack variables. The opponent role instead adds a blocking
cost that rewards matching the ego's lateral position.

The decision sequence is single-shooting: the iterate is the input sequence
plus the collision slacks, states always come from the integrator, and each
SQP iteration linearizes the rollout (analytic RK4 Jacobians), condenses the
state sensitivities onto the input increments, and solves a small dense QP
with the in-repo active-set solver. A per-iteration trust region on the input
step keeps the linearization honest; a merit line search (evaluated on
batched candidate rollouts) guards global progress.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .qp import solve_qp
from .track import TrackModel, wrap_signed
from .vehicle import (VehicleParams, discrete_step,
                      discrete_step_with_jacobians, rollout_candidates)

KKT_TOL = 1e-6
MERIT_PENALTY = 1e3
LS_ALPHAS = (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125)


class NonFiniteIterate(RuntimeError):
    """SQP iterate left the space of finite numbers; abort the caller."""


@dataclass
class MpccConfig:
    """Weights, bounds, and solver settings for one controller instance."""

    horizon: int = 10
    ts: float = 0.1
    q_contour: float = 50.0
    q_progress: float = 5.0
    r_input: tuple = (1e-3, 0.5)
    r_rate: tuple = (0.1, 5.0)
    q_block: float = 0.0
    q_slack_quad: float = 100.0
    q_slack_lin: float = 10.0
    input_lower: tuple = (-6.0, -0.35)
    input_upper: tuple = (4.0, 0.35)
    v_max: float = 2.8
    gamma: float = 1.0
    r_safe: float = 0.0
    track_margin: float = 0.0
    soft_state_weight: float = 1e3
    trust_force: float = 2.0
    trust_steer: float = 0.1
    use_collision_constraints: bool = True
    use_blocking_cost: bool = False
    max_sqp_iter: int = 25
    realtime: bool = False
    integrator_substeps: int = 10

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.q_contour <= 0 or self.q_progress <= 0:
            raise ValueError("q_contour and q_progress must be positive")
        if min(self.r_input) <= 0 or min(self.r_rate) <= 0:
            raise ValueError("input and rate weights must be positive definite")
        if self.q_slack_quad < 0 or self.q_slack_lin < 0:
            raise ValueError("slack weights must be nonnegative")


@dataclass
class CollisionGeometry:
    """Ego disc cover and opponent covering-ellipse semi-axes."""

    disc_radius: float
    disc_offsets: np.ndarray
    ellipse_a: float
    ellipse_b: float

    def __post_init__(self):
        self.disc_offsets = np.asarray(self.disc_offsets, dtype=float)

    @staticmethod
    def from_dimensions(ev_length: float, ev_width: float,
                        tv_length: float, tv_width: float) -> "CollisionGeometry":
        offsets = ev_length * np.array([-0.375, -0.125, 0.125, 0.375])
        radius = float(np.hypot(ev_length / 8.0, ev_width / 2.0))
        geom = CollisionGeometry(
            disc_radius=radius,
            disc_offsets=offsets,
            ellipse_a=tv_length / 2.0 * np.sqrt(2.0),
            ellipse_b=tv_width / 2.0 * np.sqrt(2.0),
        )
        geom.validate_cover(ev_length, ev_width, tv_length, tv_width)
        return geom

    def validate_cover(self, ev_length, ev_width, tv_length, tv_width) -> None:
        """Check the discs cover the ego rectangle and the ellipse covers the
        opponent rectangle (corners and edge midpoints)."""
        xs = np.array([-ev_length / 2, 0.0, ev_length / 2])
        ys = np.array([-ev_width / 2, 0.0, ev_width / 2])
        pts = [(x, y) for x in xs for y in ys if not (x == 0.0 and y == 0.0)]
        for x, y in pts:
            dists = np.hypot(x - self.disc_offsets, y)
            if np.min(dists) > self.disc_radius + 1e-12:
                raise ValueError("disc set does not cover the ego footprint")
        corner = (tv_length / 2) ** 2 / self.ellipse_a ** 2 \
            + (tv_width / 2) ** 2 / self.ellipse_b ** 2
        if corner > 1.0 + 1e-9:
            raise ValueError("ellipse does not cover the opponent footprint")


@dataclass
class MpccSolution:
    inputs: np.ndarray     # (N, 2)
    states: np.ndarray     # (N+1, 6)
    progress: np.ndarray   # (N+1,)
    slacks: np.ndarray     # (N+1,)
    status: str            # "optimal" | "max-iter" | "rti" | "infeasible-qp"
    iterations: int
    solve_time: float
    step_norm: float
    dyn_residual: float

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "max-iter", "rti")


def contouring_error(track: TrackModel, position, s_bar: float) -> float:
    """Lateral deviation of p measured against the centerline normal at the
    approximate progress s_bar (sign opposite to e_y)."""
    pos, th, _ = track.centerline(s_bar)
    dx = position[0] - pos[0]
    dy = position[1] - pos[1]
    return float(np.sin(th) * dx - np.cos(th) * dy)


def _contouring_batch(track: TrackModel, positions, sbars):
    """Vectorized contouring errors and gradients over arrays of poses."""
    sbars = np.asarray(sbars, dtype=float)
    pos, th, kappa = track.centerline(sbars)
    dx = positions[..., 0] - pos[..., 0]
    dy = positions[..., 1] - pos[..., 1]
    sth, cth = np.sin(th), np.cos(th)
    e_c = sth * dx - cth * dy
    e_lag = cth * dx + sth * dy
    return e_c, np.stack([sth, -cth], axis=-1), kappa * e_lag


def progress_step(s_bar: float, v_x: float, ts: float) -> float:
    """Approximate progress update s_bar + ts * v_x."""
    return s_bar + ts * v_x


def blocking_cost(track: TrackModel, tv_positions, ev_state, q_block: float) -> float:
    """Cost rewarding the opponent for matching the ego's current lateral
    position, attenuated by the current progress gap."""
    fp_ev = track.global_to_frenet((ev_state.p_x, ev_state.p_y), ev_state.phi)
    tv_positions = np.asarray(tv_positions, dtype=float)
    fp0 = track.global_to_frenet(tv_positions[0])
    d_s = wrap_signed(fp0.s - fp_ev.s, track.total_length)
    total = 0.0
    for pos in tv_positions:
        fp = track.global_to_frenet(pos)
        total += (fp.e_y - fp_ev.e_y) ** 2
    return q_block * total / (1.0 + d_s ** 2)


def ellipse_value(center, tv_position, tv_heading: float, semi_a: float,
                  semi_b: float) -> float:
    """Sub-zero-when-clear ellipse constraint value for one ego disc center."""
    dx = center[0] - tv_position[0]
    dy = center[1] - tv_position[1]
    cph, sph = np.cos(tv_heading), np.sin(tv_heading)
    lon = dx * cph + dy * sph
    lat = -dx * sph + dy * cph
    return float(1.0 - lon ** 2 / semi_a ** 2 - lat ** 2 / semi_b ** 2)


def expanded_semi_axes(var_s: float, var_ey: float, e_phi_hat: float,
                       gamma: float, eps: float, semi_a: float, semi_b: float):
    """Uncertainty-expanded semi-axes; eps = 1 recovers the nominal pair."""
    c2 = np.cos(e_phi_hat) ** 2
    s2 = np.sin(e_phi_hat) ** 2
    var_a = c2 * var_s + s2 * var_ey
    var_b = s2 * var_s + c2 * var_ey
    return (semi_a + gamma * np.sqrt(max(var_a, 0.0)) * (1.0 - eps),
            semi_b + gamma * np.sqrt(max(var_b, 0.0)) * (1.0 - eps))


class MpccController:
    """Receding-horizon contouring controller; stateful through its warm
    start, so use one instance per vehicle / role."""

    def __init__(self, track: TrackModel, params: VehicleParams,
                 config: MpccConfig, geometry: CollisionGeometry | None = None):
        self.track = track
        self.params = params
        self.config = config
        self.geometry = geometry
        if config.use_collision_constraints and geometry is None:
            raise ValueError("collision constraints need a CollisionGeometry")
        self.reset()

    def reset(self) -> None:
        self._warm_inputs = None
        self._warm_slacks = None
        self._prev_input = np.zeros(2)
        self._fail_count = 0
        self._fallback_inputs = None

    # -- public API -----------------------------------------------------------

    def control(self, state, prediction=None, blocking_ref=None):
        """Receding-horizon policy: solve, apply the first input, fall back to
        a shifted previous plan (then braking) on solver failures."""
        sol = self.solve(state, prediction=prediction, blocking_ref=blocking_ref)
        if sol.ok:
            self._fail_count = 0
            self._fallback_inputs = np.vstack([sol.inputs[1:], sol.inputs[-1:]])
            return sol.inputs[0].copy(), sol
        self._fail_count += 1
        if self._fail_count == 1 and self._fallback_inputs is not None:
            u = self._fallback_inputs[0].copy()
            self._fallback_inputs = np.vstack(
                [self._fallback_inputs[1:], self._fallback_inputs[-1:]])
        else:
            u = np.array([self.config.input_lower[0], 0.0])
        self._prev_input = u.copy()
        return u, sol

    def solve(self, state, prediction=None, blocking_ref=None) -> MpccSolution:
        """Solve the finite-horizon problem from the given state.

        prediction (when collision constraints are on) must expose arrays
        ``states`` (>= N+1, 6) and ``covariances`` (>= N+1, 6, 6) in the
        conventions of the rollout predictors. blocking_ref is the ego's
        current (e_y, s) pair and enables the blocking cost.
        """
        t_start = time.perf_counter()
        cfg = self.config
        z0 = np.asarray(state.as_array() if hasattr(state, "as_array") else state,
                        dtype=float)
        if not np.all(np.isfinite(z0)):
            raise NonFiniteIterate("controller called with non-finite state")

        fp0 = self.track.global_to_frenet(z0[:2], z0[2])
        obstacle = self._obstacle_data(prediction) if (
            cfg.use_collision_constraints and prediction is not None) else None
        block = self._blocking_data(fp0, blocking_ref) if (
            cfg.use_blocking_cost and blocking_ref is not None) else None

        us, eps = self._initial_inputs()
        zs, sbar = self._rollout(z0, us[None, :, :], fp0.s)
        zs, sbar = zs[0], sbar[0]

        n_iter = 1 if cfg.realtime else cfg.max_sqp_iter
        status = "rti" if cfg.realtime else "max-iter"
        step_norm = np.inf
        it_done = 0
        for it in range(n_iter):
            it_done = it + 1
            h_mat, g_vec, a_ineq, b_ineq, maps = self._build_qp(
                zs, us, sbar, eps, obstacle, block)
            res = solve_qp(h_mat, g_vec, a_ineq, b_ineq)
            if res.status == "infeasible":
                status = "infeasible-qp"
                break
            d_u, d_eps = self._split(res.x)
            step_norm = max(
                float(np.max(np.abs(d_u), initial=0.0)),
                float(np.max(np.abs(d_eps), initial=0.0)),
            )

            if cfg.realtime:
                us = us + d_u.reshape(-1, 2)
                eps = np.clip(eps + d_eps, 0.0, 1.0)
                zs, sbar = self._rollout(z0, us[None, :, :], fp0.s)
                zs, sbar = zs[0], sbar[0]
                break

            alpha, zs_new, sbar_new = self._line_search(
                z0, fp0.s, zs, us, sbar, eps, d_u, d_eps, obstacle, block)
            if alpha == 0.0:
                status = "optimal" if step_norm < 1e-3 else "max-iter"
                break
            us = us + alpha * d_u.reshape(-1, 2)
            eps = np.clip(eps + alpha * d_eps, 0.0, 1.0)
            zs, sbar = zs_new, sbar_new
            if not np.all(np.isfinite(zs)):
                raise NonFiniteIterate("SQP iterate became non-finite")
            if step_norm * alpha < KKT_TOL:
                status = "optimal"
                break

        us = np.clip(us, cfg.input_lower, cfg.input_upper)
        eps = np.clip(eps, 0.0, 1.0)
        sol = MpccSolution(
            inputs=us, states=zs, progress=sbar, slacks=eps, status=status,
            iterations=it_done, solve_time=time.perf_counter() - t_start,
            step_norm=step_norm, dyn_residual=self._dyn_residual(zs, us),
        )
        if sol.ok:
            self._warm_inputs = us.copy()
            self._warm_slacks = eps.copy()
            self._prev_input = us[0].copy()
        return sol

    # -- iterate management ----------------------------------------------------

    def _initial_inputs(self):
        n_hor = self.config.horizon
        if self._warm_inputs is not None:
            us = np.vstack([self._warm_inputs[1:], self._warm_inputs[-1:]])
            eps = np.concatenate([self._warm_slacks[1:], self._warm_slacks[-1:]])
        else:
            us = np.tile(self._prev_input, (n_hor, 1))
            eps = np.ones(n_hor + 1)
        return us, eps

    def _rollout(self, z0, us_batch, s0):
        """Integrate candidate input sequences; batched over axis 0."""
        cfg = self.config
        zs = rollout_candidates(z0, us_batch, cfg.ts, self.params,
                                cfg.integrator_substeps)
        sbar = np.empty(zs.shape[:2])
        sbar[:, 0] = s0
        sbar[:, 1:] = s0 + cfg.ts * np.cumsum(zs[:, :-1, 3], axis=1)
        return zs, sbar

    def _split(self, y):
        n_u = 2 * self.config.horizon
        d_u = y[:n_u]
        if self._has_slack():
            d_eps = y[n_u: n_u + self.config.horizon + 1]
        else:
            d_eps = np.zeros(self.config.horizon + 1)
        return d_u, d_eps

    def _has_slack(self) -> bool:
        return self.config.use_collision_constraints

    def _dyn_residual(self, zs, us) -> float:
        cfg = self.config
        pred = discrete_step(zs[:-1], us, cfg.ts, self.params,
                             cfg.integrator_substeps)
        return float(np.max(np.abs(pred - zs[1:])))

    # -- problem data -----------------------------------------------------------

    def _obstacle_data(self, prediction):
        cfg = self.config
        n_hor = cfg.horizon
        states = np.asarray(prediction.states, dtype=float)
        if states.shape[0] < n_hor + 1:
            raise ValueError(
                f"prediction supplies {states.shape[0]} states, need {n_hor + 1}")
        covs = np.asarray(prediction.covariances, dtype=float)
        ka = np.empty(n_hor + 1)
        kb = np.empty(n_hor + 1)
        for t in range(n_hor + 1):
            fp = self.track.global_to_frenet(states[t, :2], states[t, 2])
            var_s = max(float(covs[t, 0, 0]), 0.0)
            var_ey = max(float(covs[t, 1, 1]), 0.0)
            c2 = np.cos(fp.e_phi) ** 2
            s2 = np.sin(fp.e_phi) ** 2
            ka[t] = cfg.gamma * np.sqrt(c2 * var_s + s2 * var_ey) + cfg.r_safe
            kb[t] = cfg.gamma * np.sqrt(s2 * var_s + c2 * var_ey) + cfg.r_safe
        return {
            "pos": states[: n_hor + 1, :2].copy(),
            "heading": states[: n_hor + 1, 2].copy(),
            "ka": ka,
            "kb": kb,
        }

    def _blocking_data(self, fp0, blocking_ref):
        ey_ref, s_ref = blocking_ref
        d_s = wrap_signed(fp0.s - s_ref, self.track.total_length)
        weight = self.config.q_block / (1.0 + d_s ** 2)
        return {"ey_ref": float(ey_ref), "weight": float(weight)}

    def _ellipse_rows(self, t, zs_t, eps_t, obstacle):
        """Constraint values and gradients for the four discs at step t.

        Returns a list of (h, dh_dc (2,), dh_dphi, dh_deps)."""
        geom = self.geometry
        p_tv = obstacle["pos"][t]
        phi_tv = obstacle["heading"][t]
        ka, kb = obstacle["ka"][t], obstacle["kb"][t]
        a_t = geom.ellipse_a + ka * (1.0 - eps_t)
        b_t = geom.ellipse_b + kb * (1.0 - eps_t)
        cph, sph = np.cos(phi_tv), np.sin(phi_tv)
        cphi, sphi = np.cos(zs_t[2]), np.sin(zs_t[2])
        rows = []
        for r_off in geom.disc_offsets:
            cx = zs_t[0] + r_off * cphi
            cy = zs_t[1] + r_off * sphi
            dx, dy = cx - p_tv[0], cy - p_tv[1]
            lon = dx * cph + dy * sph
            lat = -dx * sph + dy * cph
            h = 1.0 - lon ** 2 / a_t ** 2 - lat ** 2 / b_t ** 2
            dh_dlon = -2.0 * lon / a_t ** 2
            dh_dlat = -2.0 * lat / b_t ** 2
            dh_dc = np.array([dh_dlon * cph - dh_dlat * sph,
                              dh_dlon * sph + dh_dlat * cph])
            dh_dphi = float(dh_dc @ np.array([-r_off * sphi, r_off * cphi]))
            dh_deps = -2.0 * (lon ** 2 * ka / a_t ** 3 + lat ** 2 * kb / b_t ** 3)
            rows.append((h, dh_dc, dh_dphi, float(dh_deps)))
        return rows

    def _ellipse_h_batch(self, zs, eps, obstacle):
        """Constraint values h over leading axes of zs, shape (..., T, 4)."""
        geom = self.geometry
        a_t = geom.ellipse_a + obstacle["ka"] * (1.0 - eps)
        b_t = geom.ellipse_b + obstacle["kb"] * (1.0 - eps)
        cph = np.cos(obstacle["heading"])
        sph = np.sin(obstacle["heading"])
        offs = geom.disc_offsets
        cx = zs[..., 0, None] + offs * np.cos(zs[..., 2])[..., None]
        cy = zs[..., 1, None] + offs * np.sin(zs[..., 2])[..., None]
        dx = cx - obstacle["pos"][:, 0, None]
        dy = cy - obstacle["pos"][:, 1, None]
        lon = dx * cph[:, None] + dy * sph[:, None]
        lat = -dx * sph[:, None] + dy * cph[:, None]
        return 1.0 - lon ** 2 / a_t[..., None] ** 2 - lat ** 2 / b_t[..., None] ** 2

    # -- QP assembly -------------------------------------------------------------

    def _build_qp(self, zs, us, sbar, eps, obstacle, block):
        cfg = self.config
        n_hor = cfg.horizon
        n_u = 2 * n_hor
        has_slack = self._has_slack()
        # Two elastic variables soften the track and speed rows with an exact
        # L1 penalty so the QP subproblem stays feasible under linearization
        # error; they sit at zero whenever the rows are satisfiable.
        i_soft_trk = n_u + (n_hor + 1 if has_slack else 0)
        i_soft_vel = i_soft_trk + 1
        n_var = i_soft_vel + 1

        # Condensed rollout sensitivities (states satisfy the dynamics, so no
        # defect feed-through is needed); one batched linearization call.
        _, a_all, b_all = discrete_step_with_jacobians(
            zs[:-1], us, cfg.ts, self.params, cfg.integrator_substeps)
        d_z = np.zeros((n_hor + 1, 6, n_u))
        d_s = np.zeros((n_hor + 1, n_u))
        for t in range(n_hor):
            d_z[t + 1] = a_all[t] @ d_z[t]
            d_z[t + 1][:, 2 * t: 2 * t + 2] += b_all[t]
            d_s[t + 1] = d_s[t] + cfg.ts * d_z[t][3]

        h_mat = np.zeros((n_var, n_var))
        g_vec = np.zeros(n_var)
        rows = []
        rhs = []

        def add_quad(jac, res, weight):
            h_mat[:] += 2.0 * weight * np.outer(jac, jac)
            g_vec[:] += 2.0 * weight * res * jac

        r_in = np.asarray(cfg.r_input)
        r_rate = np.asarray(cfg.r_rate)
        for t in range(n_hor):
            for k in range(2):
                i = 2 * t + k
                h_mat[i, i] += 2.0 * r_in[k]
                g_vec[i] += 2.0 * r_in[k] * us[t, k]
                # rate term (u_t - u_{t-1}); u_{-1} is the applied input
                jac = np.zeros(n_var)
                jac[i] = 1.0
                if t > 0:
                    jac[i - 2] = -1.0
                    res = us[t, k] - us[t - 1, k]
                else:
                    res = us[t, k] - self._prev_input[k]
                add_quad(jac, res, r_rate[k])

        ec_all, dp_all, ds_all = _contouring_batch(self.track, zs, sbar)
        ec_jac = np.einsum("ti,tiu->tu", dp_all, d_z[:, :2, :]) \
            + ds_all[:, None] * d_s

        for t in range(1, n_hor):
            jac = np.zeros(n_var)
            jac[:n_u] = ec_jac[t]
            add_quad(jac, ec_all[t], cfg.q_contour)

        if block is not None:
            for t in range(1, n_hor + 1):
                jac = np.zeros(n_var)
                jac[:n_u] = -ec_jac[t]
                add_quad(jac, -ec_all[t] - block["ey_ref"], block["weight"])

        g_vec[:n_u] += -cfg.q_progress * d_s[n_hor]

        if has_slack:
            for t in range(n_hor + 1):
                i = n_u + t
                h_mat[i, i] += cfg.q_slack_quad
                g_vec[i] += cfg.q_slack_quad * eps[t] + cfg.q_slack_lin
                rows.append(_unit_row(n_var, i, 1.0))
                rhs.append(1.0 - eps[t])
                rows.append(_unit_row(n_var, i, -1.0))
                rhs.append(eps[t] - 0.0)

        # input bounds intersected with a per-iteration trust region that keeps
        # the linearization honest (large input swings make the condensed
        # dynamics model unreliable)
        lo = np.asarray(cfg.input_lower)
        hi = np.asarray(cfg.input_upper)
        trust = np.array([cfg.trust_force, cfg.trust_steer])
        for t in range(n_hor):
            for k in range(2):
                i = 2 * t + k
                rows.append(_unit_row(n_var, i, 1.0))
                rhs.append(min(hi[k] - us[t, k], trust[k]))
                rows.append(_unit_row(n_var, i, -1.0))
                rhs.append(min(us[t, k] - lo[k], trust[k]))

        # soft track and speed bounds over the predicted states
        h_mat[i_soft_trk, i_soft_trk] += 1e-6
        h_mat[i_soft_vel, i_soft_vel] += 1e-6
        g_vec[i_soft_trk] += cfg.soft_state_weight
        g_vec[i_soft_vel] += cfg.soft_state_weight
        rows.append(_unit_row(n_var, i_soft_trk, -1.0))
        rhs.append(0.0)
        rows.append(_unit_row(n_var, i_soft_vel, -1.0))
        rhs.append(0.0)

        half_w = self.track.width / 2.0 - cfg.track_margin
        for t in range(1, n_hor + 1):
            jac = np.zeros(n_var)
            jac[:n_u] = d_z[t][3]
            jac[i_soft_vel] = -1.0
            rows.append(jac)
            rhs.append(cfg.v_max - zs[t, 3])
            jac2 = np.zeros(n_var)
            jac2[:n_u] = -d_z[t][3]
            jac2[i_soft_vel] = -1.0
            rows.append(jac2)
            rhs.append(zs[t, 3] - 0.0)

            jac = np.zeros(n_var)
            jac[:n_u] = ec_jac[t]
            jac[i_soft_trk] = -1.0
            rows.append(jac)
            rhs.append(half_w - ec_all[t])
            jac2 = np.zeros(n_var)
            jac2[:n_u] = -ec_jac[t]
            jac2[i_soft_trk] = -1.0
            rows.append(jac2)
            rhs.append(half_w + ec_all[t])

        if obstacle is not None:
            for t in range(n_hor + 1):
                for h, dh_dc, dh_dphi, dh_deps in self._ellipse_rows(
                        t, zs[t], eps[t], obstacle):
                    if h < -1.5:
                        continue  # far inactive; keep the QP small
                    if t == 0:
                        # The current state is not a decision; keep the row
                        # only if raising eps_0 can satisfy it.
                        if abs(dh_deps) < 1e-12 or \
                                h + dh_deps * (1.0 - eps[0]) > 0.0:
                            continue
                    # linearized h + grad_h . delta <= 0
                    jac = np.zeros(n_var)
                    if t > 0:
                        jac[:n_u] = dh_dc @ d_z[t][:2] + dh_dphi * d_z[t][2]
                    jac[n_u + t] = dh_deps
                    rows.append(jac)
                    rhs.append(-h)

        h_mat[np.diag_indices(n_var)] += 1e-8
        h_mat = 0.5 * (h_mat + h_mat.T)
        return h_mat, g_vec, np.array(rows), np.array(rhs), (d_z, d_s)

    # -- merit line search ---------------------------------------------------------

    def _cost_batch(self, zs, us, sbar, eps, block):
        """Objective over batched candidate rollouts (leading axis)."""
        cfg = self.config
        n_hor = cfg.horizon
        e_c, _, _ = _contouring_batch(self.track, zs, sbar)
        cost = cfg.q_contour * np.sum(e_c[:, :n_hor] ** 2, axis=1)
        cost += np.sum(us ** 2 @ np.asarray(cfg.r_input), axis=1)
        prev = np.broadcast_to(self._prev_input, (us.shape[0], 1, 2))
        du = np.diff(np.concatenate([prev, us], axis=1), axis=1)
        cost += np.sum(du ** 2 @ np.asarray(cfg.r_rate), axis=1)
        cost -= cfg.q_progress * sbar[:, n_hor]
        if self._has_slack():
            cost += 0.5 * cfg.q_slack_quad * np.sum(eps ** 2, axis=1) \
                + cfg.q_slack_lin * np.sum(eps, axis=1)
        if block is not None:
            cost += block["weight"] * np.sum((-e_c - block["ey_ref"]) ** 2, axis=1)
        return cost

    def _violation_batch(self, zs, sbar, eps, obstacle):
        """Constraint violation (states come from rollouts, so dynamics hold)."""
        cfg = self.config
        half_w = self.track.width / 2.0 - cfg.track_margin
        e_c, _, _ = _contouring_batch(self.track, zs[:, 1:], sbar[:, 1:])
        viol = np.sum(np.maximum(np.abs(e_c) - half_w, 0.0), axis=1)
        viol += np.sum(np.maximum(zs[:, 1:, 3] - cfg.v_max, 0.0)
                       + np.maximum(-zs[:, 1:, 3], 0.0), axis=1)
        if obstacle is not None:
            h = self._ellipse_h_batch(zs[:, 1:], eps[:, 1:], obstacle)
            viol += np.sum(np.maximum(h, 0.0), axis=(1, 2))
        return viol

    def _line_search(self, z0, s0, zs, us, sbar, eps, d_u, d_eps, obstacle, block):
        """Pick a step size along the QP direction by rolling all candidates
        at once; returns (alpha, states, progress) or alpha = 0 on stall."""
        alphas = np.asarray(LS_ALPHAS)
        n_cand = alphas.shape[0]
        us_cand = us[None] + alphas[:, None, None] * d_u.reshape(1, -1, 2)
        eps_cand = np.clip(eps[None] + alphas[:, None] * d_eps[None], 0.0, 1.0)
        zs_cand, sbar_cand = self._rollout(z0, us_cand, s0)

        merits = self._cost_batch(zs_cand, us_cand, sbar_cand, eps_cand, block) \
            + MERIT_PENALTY * self._violation_batch(zs_cand, sbar_cand,
                                                    eps_cand, obstacle)
        merit0 = float(
            self._cost_batch(zs[None], us[None], sbar[None], eps[None], block)[0]
            + MERIT_PENALTY * self._violation_batch(zs[None], sbar[None],
                                                    eps[None], obstacle)[0])
        for k in range(n_cand):
            if merits[k] <= merit0 + 1e-10 * (1.0 + abs(merit0)):
                return float(alphas[k]), zs_cand[k], sbar_cand[k]
        return 0.0, zs, sbar


def _unit_row(n, i, sign):
    row = np.zeros(n)
    row[i] = sign
    return row
