"""Closed race-track geometry: piecewise-constant-curvature centerlines,
global <-> curvilinear transforms, and seeded random track generation.

A track is an arc-length parameterized closed curve built from (length,
curvature) segments. Straights have curvature 0; arcs have constant signed
curvature (positive = left turn). All queries accept arc length ``s`` on the
real line and evaluate at ``s mod L``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * np.pi

CLOSURE_TOL_POS = 1e-6
CLOSURE_TOL_HEADING = 1e-6
PROJECTION_GRAD_TOL = 1e-10
CACHE_RESOLUTION = 0.1


class GeometryError(ValueError):
    """Track geometry is invalid (e.g. inner boundary would self-intersect)."""


class ClosureViolation(GeometryError):
    """Integrated segments do not return to the start pose."""


class ProjectionAmbiguous(RuntimeError):
    """Nearest-centerline projection has two competing minima."""


class GenerationFailed(RuntimeError):
    """Random track generation exhausted its retry budget."""


def wrap_angle(x):
    """Wrap an angle (or array) to (-pi, pi]."""
    r = np.mod(x, TWO_PI)
    return np.where(r > np.pi, r - TWO_PI, r) if np.ndim(x) else (r - TWO_PI if r > np.pi else r)


def wrap_signed(ds, length):
    """Wrap a progress difference (or array) to (-length/2, length/2]."""
    r = np.mod(ds, length)
    half = 0.5 * length
    return np.where(r > half, r - length, r) if np.ndim(ds) else (r - length if r > half else r)


@dataclass(frozen=True)
class FrenetPose:
    """Pose in the curvilinear frame: progress s [m], lateral offset e_y [m]
    (positive left of the centerline), heading offset e_phi [rad]."""

    s: float
    e_y: float
    e_phi: float


@dataclass(frozen=True)
class CurvilinearState:
    """Frenet pose plus body-frame velocities copied from the global state."""

    s: float
    e_y: float
    e_phi: float
    v_x: float
    v_y: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.e_y, self.e_phi, self.v_x, self.v_y, self.omega])

    @staticmethod
    def from_array(arr) -> "CurvilinearState":
        return CurvilinearState(*(float(v) for v in arr))


class TrackModel:
    """Immutable closed track; safe for concurrent reads after construction.

    Attributes:
        segments: (n_seg, 2) array of (length [m], signed curvature [1/m]).
        width: track width W [m].
        start_pose: (x, y, heading) of the centerline at s = 0.
        total_length: L [m].
    """

    def __init__(self, segments, width: float, start_pose):
        segments = np.asarray(segments, dtype=float).reshape(-1, 2)
        start_pose = np.asarray(start_pose, dtype=float).reshape(3)
        if segments.shape[0] == 0:
            raise GeometryError("track needs at least one segment")
        if np.any(segments[:, 0] <= 0):
            raise GeometryError("every segment length must be positive")
        if width <= 0:
            raise GeometryError("track width must be positive")
        kappa_max = float(np.max(np.abs(segments[:, 1])))
        if width * kappa_max >= 2.0:
            raise GeometryError(
                f"width*kappa_max = {width * kappa_max:.3f} >= 2; inner boundary self-intersects"
            )

        self.segments = segments
        self.width = float(width)
        self.start_pose = start_pose
        self.kappa_max = kappa_max
        self.cum_lengths = np.concatenate([[0.0], np.cumsum(segments[:, 0])])
        self.total_length = float(self.cum_lengths[-1])

        # Pose at the start of each segment, chained in closed form.
        poses = np.empty((segments.shape[0] + 1, 3))
        poses[0] = start_pose
        for i, (length, kappa) in enumerate(segments):
            poses[i + 1] = _advance_pose(poses[i], length, kappa)
        self._seg_poses = poses

        end = poses[-1]
        pos_err = float(np.hypot(end[0] - start_pose[0], end[1] - start_pose[1]))
        head_err = abs(float(wrap_angle(end[2] - start_pose[2])))
        if pos_err > CLOSURE_TOL_POS or head_err > CLOSURE_TOL_HEADING:
            raise ClosureViolation(
                f"segments do not close: position error {pos_err:.2e} m, "
                f"heading error {head_err:.2e} rad"
            )

        # Centerline samples for projection seeding.
        n_cache = max(int(np.ceil(self.total_length / CACHE_RESOLUTION)), 8)
        self._s_cache = np.linspace(0.0, self.total_length, n_cache, endpoint=False)
        self._xy_cache, _, _ = self.centerline(self._s_cache)

    # -- centerline queries -------------------------------------------------

    def _segment_index(self, s_mod):
        idx = np.searchsorted(self.cum_lengths, s_mod, side="right") - 1
        return np.clip(idx, 0, self.segments.shape[0] - 1)

    def centerline(self, s):
        """Evaluate tau(s): returns (position, tangent_angle, curvature).

        Accepts scalars or arrays; evaluates at ``s mod L``.
        """
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        s_mod = np.mod(s_arr, self.total_length)
        idx = self._segment_index(s_mod)
        ds = s_mod - self.cum_lengths[idx]
        x0 = self._seg_poses[idx, 0]
        y0 = self._seg_poses[idx, 1]
        th0 = self._seg_poses[idx, 2]
        kappa = self.segments[idx, 1]

        th = th0 + kappa * ds
        straight = kappa == 0.0
        kappa_safe = np.where(straight, 1.0, kappa)
        x = np.where(
            straight,
            x0 + ds * np.cos(th0),
            x0 + (np.sin(th) - np.sin(th0)) / kappa_safe,
        )
        y = np.where(
            straight,
            y0 + ds * np.sin(th0),
            y0 - (np.cos(th) - np.cos(th0)) / kappa_safe,
        )
        pos = np.stack([x, y], axis=-1)
        if np.ndim(s) == 0:
            return pos[0], float(th[0]), float(kappa[0])
        return pos, th, kappa

    def curvature(self, s):
        """Signed curvature kappa(s mod L); scalar or array."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        s_mod = np.mod(s_arr, self.total_length)
        k = self.segments[self._segment_index(s_mod), 1]
        return float(k[0]) if np.ndim(s) == 0 else k

    def lookahead_curvatures(self, s: float, n_points: int, spacing: float) -> np.ndarray:
        """Curvatures at s + i*spacing for i = 1..n_points, wrapped mod L."""
        offsets = spacing * np.arange(1, n_points + 1)
        return self.curvature(s + offsets)

    # -- global <-> curvilinear ----------------------------------------------

    def global_to_frenet(self, position, heading: float = 0.0) -> FrenetPose:
        """Project a point onto the centerline.

        Seeds from the cached samples, then refines s with Newton iterations on
        the squared-distance derivative. Raises ProjectionAmbiguous when a
        second distance basin competes with the best one.
        """
        p = np.asarray(position, dtype=float).reshape(2)
        d2 = np.sum((self._xy_cache - p) ** 2, axis=1)
        best = int(np.argmin(d2))
        d_best = np.sqrt(d2[best])

        # A competing minimum within 10% of the best distance but far away in s
        # means the projection is not well defined.
        near = np.sqrt(d2) <= 1.1 * d_best + 1e-12
        ds_gap = np.abs(wrap_signed(self._s_cache[near] - self._s_cache[best], self.total_length))
        if np.any(ds_gap > 2.0):
            raise ProjectionAmbiguous(
                f"two projection candidates {np.max(ds_gap):.2f} m apart in s"
            )

        s = float(self._s_cache[best])
        for _ in range(60):
            pos, th, kappa = self.centerline(s)
            diff = p - pos
            tangent = np.array([np.cos(th), np.sin(th)])
            normal = np.array([-np.sin(th), np.cos(th)])
            grad = -2.0 * float(diff @ tangent)
            if abs(grad) < PROJECTION_GRAD_TOL:
                break
            hess = 2.0 * (1.0 - kappa * float(diff @ normal))
            if hess <= 1e-9:
                hess = 2.0
            step = -grad / hess
            # Stay within the seed basin; the objective is only piecewise smooth.
            step = float(np.clip(step, -2 * CACHE_RESOLUTION, 2 * CACHE_RESOLUTION))
            s = (s + step) % self.total_length

        pos, th, _ = self.centerline(s)
        diff = p - pos
        e_y = float(diff @ np.array([-np.sin(th), np.cos(th)]))
        e_phi = float(wrap_angle(heading - th))
        return FrenetPose(s=s, e_y=e_y, e_phi=e_phi)

    def frenet_to_global(self, pose: FrenetPose):
        """Map a Frenet pose back to ((x, y), heading)."""
        pos, th, _ = self.centerline(pose.s)
        normal = np.array([-np.sin(th), np.cos(th)])
        heading = float(wrap_angle(th + pose.e_phi))
        return pos + pose.e_y * normal, heading

    def state_to_curvilinear(self, state) -> CurvilinearState:
        """Transform a global vehicle state; velocities pass through unchanged."""
        fp = self.global_to_frenet((state.p_x, state.p_y), state.phi)
        return CurvilinearState(fp.s, fp.e_y, fp.e_phi, state.v_x, state.v_y, state.omega)

    def curvilinear_to_state(self, cstate: CurvilinearState):
        """Inverse of state_to_curvilinear."""
        from .vehicle import VehicleState

        pos, heading = self.frenet_to_global(
            FrenetPose(cstate.s, cstate.e_y, cstate.e_phi)
        )
        return VehicleState(
            p_x=float(pos[0]), p_y=float(pos[1]), phi=heading,
            v_x=cstate.v_x, v_y=cstate.v_y, omega=cstate.omega,
        )

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "segments": [[float(l), float(k)] for l, k in self.segments],
            "width": self.width,
            "start_pose": [float(v) for v in self.start_pose],
        }

    @staticmethod
    def from_json(data: dict) -> "TrackModel":
        return TrackModel(data["segments"], data["width"], data["start_pose"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @staticmethod
    def load(path) -> "TrackModel":
        return TrackModel.from_json(json.loads(Path(path).read_text()))


def _advance_pose(pose, length, kappa):
    """Pose after traversing one constant-curvature segment."""
    x, y, th = pose
    if kappa == 0.0:
        return np.array([x + length * np.cos(th), y + length * np.sin(th), th])
    th1 = th + kappa * length
    return np.array([
        x + (np.sin(th1) - np.sin(th)) / kappa,
        y - (np.cos(th1) - np.cos(th)) / kappa,
        th1,
    ])


def build_track(segments, width: float, start_pose=(0.0, 0.0, 0.0)) -> TrackModel:
    """Construct and validate a TrackModel from (length, curvature) segments."""
    return TrackModel(segments, width, start_pose)


def circle_track(radius: float, width: float = 1.1) -> TrackModel:
    """Single-arc circular track of the given radius (left turning)."""
    return build_track([[TWO_PI * radius, 1.0 / radius]], width)


def stadium_track(straight: float = 4.0, radius: float = 1.0, width: float = 1.1) -> TrackModel:
    """Oval: two straights joined by two half circles."""
    arc = np.pi * radius
    segs = [[straight, 0.0], [arc, 1.0 / radius], [straight, 0.0], [arc, 1.0 / radius]]
    return build_track(segs, width)


def l_track(width: float = 1.1, corner_radius: float = 0.8) -> TrackModel:
    """Built-in L-shaped circuit used by the experiment presets.

    Axis-aligned L with sides (6, 3, 3, 3, 3, 6) m, rounded corners, five left
    turns and one right turn.
    """
    r = corner_radius
    quarter = 0.5 * np.pi * r
    k = 1.0 / r
    sides = [6.0, 3.0, 3.0, 3.0, 3.0, 6.0]
    turns = [k, k, -k, k, k, k]
    segs = []
    for side, turn in zip(sides, turns):
        segs.append([side - 2.0 * r, 0.0])
        segs.append([quarter, turn])
    return build_track(segs, width, start_pose=(r, 0.0, 0.0))


NAMED_TRACKS = {
    "circle": lambda: circle_track(2.0),
    "stadium": lambda: stadium_track(),
    "l_track": lambda: l_track(),
}


@dataclass(frozen=True)
class RandomTrackParams:
    """Bounds for seeded random track generation (1/10-scale defaults)."""

    n_segments_min: int = 8
    n_segments_max: int = 16
    straight_min: float = 1.0
    straight_max: float = 6.0
    curvature_min: float = 0.3
    curvature_max: float = 1.5
    arc_angle_min: float = np.pi / 6
    arc_angle_max: float = np.pi / 2
    width: float = 1.1
    max_attempts: int = 50


def _dubins_words(alpha: float, beta: float, d: float):
    """Candidate CSC connections (t, p, q, word) in normalized units."""
    sa, sb = np.sin(alpha), np.sin(beta)
    ca, cb = np.cos(alpha), np.cos(beta)
    c_ab = np.cos(alpha - beta)
    words = []

    p_sq = 2 + d * d - 2 * c_ab + 2 * d * (sa - sb)
    if p_sq >= 0:
        tmp = np.arctan2(cb - ca, d + sa - sb)
        words.append((np.mod(-alpha + tmp, TWO_PI), np.sqrt(p_sq),
                      np.mod(beta - tmp, TWO_PI), "LSL"))

    p_sq = 2 + d * d - 2 * c_ab + 2 * d * (sb - sa)
    if p_sq >= 0:
        tmp = np.arctan2(ca - cb, d - sa + sb)
        words.append((np.mod(alpha - tmp, TWO_PI), np.sqrt(p_sq),
                      np.mod(-beta + tmp, TWO_PI), "RSR"))

    p_sq = -2 + d * d + 2 * c_ab + 2 * d * (sa + sb)
    if p_sq >= 0:
        p = np.sqrt(p_sq)
        tmp = np.arctan2(-ca - cb, d + sa + sb) - np.arctan2(-2.0, p)
        words.append((np.mod(-alpha + tmp, TWO_PI), p,
                      np.mod(-np.mod(beta, TWO_PI) + tmp, TWO_PI), "LSR"))

    p_sq = d * d - 2 + 2 * c_ab - 2 * d * (sa + sb)
    if p_sq >= 0:
        p = np.sqrt(p_sq)
        tmp = np.arctan2(ca + cb, d - sa - sb) - np.arctan2(2.0, p)
        words.append((np.mod(alpha - tmp, TWO_PI), p,
                      np.mod(beta - tmp, TWO_PI), "RSL"))
    return words


def closure_segments(from_pose, to_pose, turn_radius: float):
    """Two arcs + straight bringing ``from_pose`` onto ``to_pose`` exactly.

    Solves the 3-DOF pose-connection problem with a bounded-curvature
    curve-straight-curve path of the given turn radius; returns a list of
    (length, curvature) segments (zero-length pieces dropped).
    """
    fx, fy, fth = from_pose
    tx, ty, tth = to_pose
    dx, dy = tx - fx, ty - fy
    dist = float(np.hypot(dx, dy))
    theta = float(np.arctan2(dy, dx)) if dist > 1e-12 else 0.0
    alpha = np.mod(fth - theta, TWO_PI)
    beta = np.mod(tth - theta, TWO_PI)
    d = dist / turn_radius

    words = _dubins_words(alpha, beta, d)
    if not words:
        return None
    t, p, q, word = min(words, key=lambda w: w[0] + w[1] + w[2])
    k = 1.0 / turn_radius
    sign1 = k if word[0] == "L" else -k
    sign2 = k if word[2] == "L" else -k
    segs = [(t * turn_radius, sign1), (p * turn_radius, 0.0), (q * turn_radius, sign2)]
    return [(length, kappa) for length, kappa in segs if length > 1e-9]


def _min_centerline_separation(track: TrackModel) -> float:
    """Smallest distance between centerline samples more than 2 m apart in s."""
    xy = track._xy_cache
    s = track._s_cache
    d = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    gap = np.abs(wrap_signed(s[:, None] - s[None, :], track.total_length))
    d[gap <= 2.0] = np.inf
    return float(np.min(d))


def random_track(seed: int, params: RandomTrackParams | None = None) -> TrackModel:
    """Deterministically generate a random closed track from a seed.

    Random alternating straights/arcs are drawn, then closure is enforced by
    appending a two-arc-plus-straight correction. Tracks whose centerline
    passes too close to itself are rejected and regenerated.
    """
    params = params or RandomTrackParams()
    if params.width * params.curvature_max >= 2.0:
        raise GeometryError("params allow width*kappa_max >= 2")

    rng = np.random.default_rng(seed)
    corr_radius = 1.0 / params.curvature_max
    for _ in range(params.max_attempts):
        n_seg = int(rng.integers(params.n_segments_min, params.n_segments_max + 1))
        segs = []
        for j in range(n_seg):
            if j % 2 == 0:
                segs.append((rng.uniform(params.straight_min, params.straight_max), 0.0))
            else:
                kappa = rng.uniform(params.curvature_min, params.curvature_max)
                kappa *= -1.0 if rng.random() < 0.35 else 1.0
                angle = rng.uniform(params.arc_angle_min, params.arc_angle_max)
                segs.append((angle / abs(kappa), kappa))

        pose = np.array([0.0, 0.0, 0.0])
        for length, kappa in segs:
            pose = _advance_pose(pose, length, kappa)
        correction = closure_segments(pose, (0.0, 0.0, 0.0), corr_radius)
        if correction is None:
            continue
        try:
            track = build_track(segs + correction, params.width)
        except GeometryError:
            continue
        if _min_centerline_separation(track) < 1.5 * params.width:
            continue
        return track
    raise GenerationFailed(f"no valid track after {params.max_attempts} attempts (seed {seed})")
