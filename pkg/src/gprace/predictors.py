"""Opponent trajectory predictors behind a common result type.

Four predictors are provided:

* GP: one-step learned model of the opponent's closed-loop behavior,
  rolled out by Monte Carlo sampling with per-path RNG streams; returns the
  per-step sample mean and covariance of the curvilinear state.
* CV: constant body-frame velocity arc propagation (closed form).
* NL: progress-maximizing contouring controller solved from the opponent's
  point of view (no collision constraints, no blocking incentive).
* GT: pass-through of the opponent's own open-loop plan.

Regression features are all curvilinear: relative progress and lateral gap,
opponent pose/velocity terms, ego heading offset and speed, and a vector of
look-ahead track curvatures ahead of the opponent.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mpcc import MpccConfig, MpccController
from .track import CurvilinearState, TrackModel, wrap_signed
from .vehicle import VehicleParams, VehicleState

CORRIDOR_FACTOR = 1.5  # samples may wander this many track widths off center


class DimensionMismatch(ValueError):
    """GP input dimension does not match the feature configuration."""


class SolverFailed(RuntimeError):
    """The optimization-based predictor could not produce a plan."""


class SampleDiverged(RuntimeError):
    """A sampled trajectory left the corridor around the track twice."""


@dataclass(frozen=True)
class FeatureConfig:
    """Look-ahead geometry of the regression features."""

    n_lookahead: int = 5
    spacing: float = 0.5

    def __post_init__(self):
        if self.n_lookahead < 1 or self.spacing <= 0:
            raise ValueError("need n_lookahead >= 1 and spacing > 0")

    @property
    def dim(self) -> int:
        return 8 + self.n_lookahead


BASE_FEATURE_NAMES = ("ds", "dey", "ey_tv", "ephi_tv", "vx_tv", "omega_tv",
                      "ephi_ev", "vx_ev")
TARGET_NAMES = ("d_s", "d_ey", "d_ephi", "d_vx", "d_vy", "d_omega")


def feature_names(config: FeatureConfig) -> list:
    return list(BASE_FEATURE_NAMES) + [
        f"kappa_{i}" for i in range(1, config.n_lookahead + 1)]


@dataclass
class PredictionResult:
    """Horizon of predicted opponent states with per-step uncertainty.

    states are global-frame rows [p_x, p_y, phi, v_x, v_y, omega];
    covariances are 6x6 in curvilinear coordinates (zero for the
    deterministic predictors). curvilinear holds the nominal curvilinear
    rows when the predictor works in that frame.
    """

    states: np.ndarray
    covariances: np.ndarray
    source: str
    curvilinear: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1


def _as_state_array(state) -> np.ndarray:
    if hasattr(state, "as_array"):
        return state.as_array()
    return np.asarray(state, dtype=float)


def build_features(track: TrackModel, z_tv, z_ev,
                   config: FeatureConfig) -> np.ndarray:
    """Feature vector [ds, dey, ey_tv, ephi_tv, vx_tv, omega_tv, ephi_ev,
    vx_ev, kappa_1..kappa_V] for one opponent/ego state pair."""
    tv = _as_state_array(z_tv)
    ev = _as_state_array(z_ev)
    fp_tv = track.global_to_frenet(tv[:2], tv[2])
    fp_ev = track.global_to_frenet(ev[:2], ev[2])
    return _features_curv(
        track,
        np.array([fp_tv.s, fp_tv.e_y, fp_tv.e_phi, tv[3], tv[4], tv[5]]),
        (fp_ev.s, fp_ev.e_y, fp_ev.e_phi, ev[3]),
        config,
    )


def _features_curv(track: TrackModel, c_tv, ev_parts,
                   config: FeatureConfig) -> np.ndarray:
    """Features from a curvilinear opponent state and ego (s, e_y, e_phi, v_x)."""
    s_ev, ey_ev, ephi_ev, vx_ev = ev_parts
    out = np.empty(config.dim)
    out[0] = wrap_signed(s_ev - c_tv[0], track.total_length)
    out[1] = ey_ev - c_tv[1]
    out[2] = c_tv[1]
    out[3] = c_tv[2]
    out[4] = c_tv[3]
    out[5] = c_tv[5]
    out[6] = ephi_ev
    out[7] = vx_ev
    out[8:] = track.lookahead_curvatures(c_tv[0], config.n_lookahead,
                                         config.spacing)
    return out


def _check_gp_dim(gp, config: FeatureConfig) -> None:
    if gp.input_dim != config.dim:
        raise DimensionMismatch(
            f"model expects {gp.input_dim} features, config builds {config.dim}")


def one_step_predict(gp, track: TrackModel, z_tv, z_ev,
                     config: FeatureConfig):
    """Posterior one-step opponent state and per-dimension increment variance.

    The increment is predicted in curvilinear coordinates and mapped back to
    the global frame.
    """
    _check_gp_dim(gp, config)
    x = build_features(track, z_tv, z_ev, config)
    mean, var = gp.posterior(x)
    tv = _as_state_array(z_tv)
    cs = track.state_to_curvilinear(VehicleState.from_array(tv))
    nxt = cs.as_array() + mean
    nxt[0] %= track.total_length
    return track.curvilinear_to_state(CurvilinearState.from_array(nxt)), var


def rollout_gp(gp, track: TrackModel, z_tv, ev_plan, horizon: int,
               n_samples: int, seed: int, config: FeatureConfig | None = None,
               workers: int = 1) -> PredictionResult:
    """Monte Carlo rollout of the one-step model conditioned on the ego plan.

    Each of the ``n_samples`` paths draws its increments from an RNG stream
    derived from (seed, path index), so results are bit-identical for any
    worker count and any path evaluation order. Returns per-step sample means
    (mapped to the global frame) and unbiased sample covariances in
    curvilinear coordinates.
    """
    config = config or FeatureConfig()
    _check_gp_dim(gp, config)
    if n_samples < 2:
        raise ValueError("need at least 2 sample paths for a covariance")
    ev_plan = np.asarray(ev_plan, dtype=float)
    if ev_plan.shape[0] < horizon + 1:
        raise ValueError(f"ego plan supplies {ev_plan.shape[0]} states, "
                         f"need {horizon + 1}")

    tv = _as_state_array(z_tv)
    cs0 = track.state_to_curvilinear(VehicleState.from_array(tv)).as_array()

    # Ego-side feature pieces per horizon step, shared by all paths.
    ev_parts = []
    for t in range(horizon):
        fp = track.global_to_frenet(ev_plan[t, :2], ev_plan[t, 2])
        ev_parts.append((fp.s, fp.e_y, fp.e_phi, ev_plan[t, 3]))

    corridor = CORRIDOR_FACTOR * track.width
    posterior = getattr(gp, "posterior_packed", gp.posterior)

    def run_path(i: int) -> np.ndarray:
        rng = np.random.default_rng([seed, i])
        path = np.empty((horizon + 1, 6))
        path[0] = cs0
        c = cs0.copy()
        for t in range(horizon):
            x = _features_curv(track, c, ev_parts[t], config)
            mean, var = posterior(x)
            std = np.sqrt(np.maximum(var, 0.0))
            cand = c + mean + std * rng.standard_normal(6)
            if abs(cand[1]) > corridor:
                cand = c + mean + std * rng.standard_normal(6)
                if abs(cand[1]) > corridor:
                    raise SampleDiverged(
                        f"sample path {i} left the track corridor at step {t}")
            c = cand
            path[t + 1] = c
        return path

    samples = np.empty((n_samples, horizon + 1, 6))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, path in enumerate(pool.map(run_path, range(n_samples))):
                samples[i] = path
    else:
        for i in range(n_samples):
            samples[i] = run_path(i)

    nominal = np.empty((horizon + 1, 6))
    covs = np.zeros((horizon + 1, 6, 6))
    for t in range(horizon + 1):
        rows = samples[:, t, :]
        if np.all(rows == rows[0]):
            # Degenerate (zero-variance) case: mean is exact, covariance is
            # exactly zero rather than accumulating float round-off.
            nominal[t] = rows[0]
            continue
        mean = rows.mean(axis=0)
        centered = rows - mean
        covs[t] = centered.T @ centered / (n_samples - 1)
        nominal[t] = mean

    states = np.empty((horizon + 1, 6))
    for t in range(horizon + 1):
        c = nominal[t].copy()
        c[0] %= track.total_length
        states[t] = track.curvilinear_to_state(
            CurvilinearState.from_array(c)).as_array()
    return PredictionResult(states=states, covariances=covs, source="GP",
                            curvilinear=nominal)


def rollout_cv(z_tv, horizon: int, ts: float) -> PredictionResult:
    """Constant body-frame velocity propagation along an exact circular arc."""
    z = _as_state_array(z_tv)
    p0 = z[:2]
    phi0, v_x, v_y, omega = z[2], z[3], z[4], z[5]
    tgrid = ts * np.arange(horizon + 1)
    phi = phi0 + omega * tgrid
    if abs(omega) < 1e-6:
        xs = p0[0] + tgrid * (v_x * np.cos(phi0) - v_y * np.sin(phi0))
        ys = p0[1] + tgrid * (v_x * np.sin(phi0) + v_y * np.cos(phi0))
    else:
        dsin = np.sin(phi) - np.sin(phi0)
        dcos = np.cos(phi) - np.cos(phi0)
        xs = p0[0] + (v_x * dsin + v_y * dcos) / omega
        ys = p0[1] + (-v_x * dcos + v_y * dsin) / omega
    states = np.column_stack([
        xs, ys, phi,
        np.full(horizon + 1, v_x),
        np.full(horizon + 1, v_y),
        np.full(horizon + 1, omega),
    ])
    return PredictionResult(states=states,
                            covariances=np.zeros((horizon + 1, 6, 6)),
                            source="CV")


class NlPredictor:
    """Progress-maximizing optimal-control predictor from the opponent's
    viewpoint (its weights, no collision constraints, no blocking cost).

    Stateful: keeps the warm start between calls like any receding-horizon
    controller."""

    def __init__(self, track: TrackModel, params: VehicleParams,
                 config: MpccConfig):
        if config.use_collision_constraints or config.use_blocking_cost:
            config = MpccConfig(**{**config.__dict__,
                                   "use_collision_constraints": False,
                                   "use_blocking_cost": False,
                                   "q_block": 0.0})
        self.controller = MpccController(track, params, config)

    def predict(self, z_tv) -> PredictionResult:
        sol = self.controller.solve(VehicleState.from_array(_as_state_array(z_tv)))
        if not sol.ok:
            raise SolverFailed(f"prediction solve ended with {sol.status}")
        return PredictionResult(
            states=sol.states.copy(),
            covariances=np.zeros((sol.states.shape[0], 6, 6)),
            source="NL")

    def reset(self) -> None:
        self.controller.reset()


def gt_prediction(tv_plan_states) -> PredictionResult:
    """Ground-truth baseline: the opponent's own open-loop plan, no
    uncertainty."""
    states = np.asarray(tv_plan_states, dtype=float)
    return PredictionResult(states=states.copy(),
                            covariances=np.zeros((states.shape[0], 6, 6)),
                            source="GT")
