"""Planar 10-link reacher with three obstacles and three ways around them.

The arm is anchored at the origin.  The obstacles form a column that leaves
an upper, a middle and a lower passage.  A demonstration keeps the proximal
links roughly straight through one passage while the distal links bend into a
circular arc that ends on the target.  Motions are minimum-jerk joint-space
interpolations from a straight start posture, rejected if any link touches an
obstacle.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import optimize

log = logging.getLogger(__name__)

MODES = ("upper", "middle", "lower")
N_JOINTS = 10


class WorldError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Rectangle:
    center: Tuple[float, float]
    half_extents: Tuple[float, float]

    def __post_init__(self):
        if len(self.center) != 2 or len(self.half_extents) != 2:
            raise WorldError("rectangles are 2-D")
        if min(self.half_extents) <= 0:
            raise WorldError("rectangle half extents must be positive")

    @property
    def lo(self):
        return np.asarray(self.center) - np.asarray(self.half_extents)

    @property
    def hi(self):
        return np.asarray(self.center) + np.asarray(self.half_extents)

    @classmethod
    def from_bounds(cls, x0, x1, y0, y1):
        return cls(((x0 + x1) / 2, (y0 + y1) / 2), ((x1 - x0) / 2, (y1 - y0) / 2))


def _default_obstacles():
    return (
        Rectangle.from_bounds(2.75, 3.25, 0.2, 1.0),
        Rectangle.from_bounds(2.75, 3.25, -1.3, -0.2),
        Rectangle.from_bounds(2.75, 3.25, -3.2, -2.2),
    )


@dataclass(frozen=True)
class ReacherWorld:
    """Geometry and demonstrator settings.

    Parameters
    ----------
    link_lengths : tuple of 10 floats
    obstacles : tuple of 3 Rectangle
    target_low, target_high : (x, y) corners of the uniform target box
    mode_angles : base angle in radians of the proximal links per passage
    bend_signs : turning direction of the distal arc per passage; fixed per
        passage so each passage maps targets to postures continuously
    n_proximal : number of links held straight through the passage
    angle_jitter : std of the base angle noise (radians)
    joint_jitter : std of the bend noise on the remaining proximal joints
    context_gain : base angle change per unit of target height
    n_steps : samples per demonstration trajectory
    """

    link_lengths: Tuple[float, ...] = (1.0,) * N_JOINTS
    obstacles: Tuple[Rectangle, ...] = field(default_factory=_default_obstacles)
    target_low: Tuple[float, float] = (7.0, -1.5)
    target_high: Tuple[float, float] = (8.5, 1.5)
    mode_angles: Tuple[float, float, float] = (np.deg2rad(26.0), 0.0, np.deg2rad(-30.0))
    bend_signs: Tuple[float, float, float] = (-1.0, 1.0, 1.0)
    n_proximal: int = 4
    angle_jitter: float = np.deg2rad(1.0)
    joint_jitter: float = np.deg2rad(0.5)
    context_gain: float = np.deg2rad(2.0)
    n_steps: int = 50

    def __post_init__(self):
        L = np.asarray(self.link_lengths, dtype=float)
        if L.shape != (N_JOINTS,) or np.any(L <= 0) or not np.all(np.isfinite(L)):
            raise WorldError("need 10 positive finite link lengths")
        if len(self.obstacles) != 3:
            raise WorldError("the world has exactly three obstacles")
        lo, hi = np.asarray(self.target_low), np.asarray(self.target_high)
        if np.any(hi < lo):
            raise WorldError("target box is inverted")
        corners = np.array([[x, y] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])])
        if np.max(np.linalg.norm(corners, axis=1)) > L.sum():
            raise WorldError("part of the target box is out of reach")
        if not 1 <= self.n_proximal < N_JOINTS:
            raise WorldError("n_proximal must lie in [1, 9]")
        if self.n_steps < 2:
            raise WorldError("n_steps must be at least 2")

    @property
    def reach(self) -> float:
        return float(np.sum(self.link_lengths))

    def sample_targets(self, n, rng) -> np.ndarray:
        return rng.uniform(self.target_low, self.target_high, size=(n, 2))

    def to_dict(self):
        return {
            "link_lengths": list(map(float, self.link_lengths)),
            "obstacles": [
                {"center": list(map(float, o.center)), "half_extents": list(map(float, o.half_extents))}
                for o in self.obstacles
            ],
            "target_low": list(map(float, self.target_low)),
            "target_high": list(map(float, self.target_high)),
            "mode_angles": list(map(float, self.mode_angles)),
            "bend_signs": list(map(float, self.bend_signs)),
            "n_proximal": self.n_proximal,
            "angle_jitter": float(self.angle_jitter),
            "joint_jitter": float(self.joint_jitter),
            "context_gain": float(self.context_gain),
            "n_steps": self.n_steps,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "obstacles" in d:
            d["obstacles"] = tuple(
                Rectangle(tuple(o["center"]), tuple(o["half_extents"])) for o in d["obstacles"]
            )
        for k in ("link_lengths", "target_low", "target_high", "mode_angles", "bend_signs"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# kinematics and collisions


def forward_kinematics(angles, link_lengths=(1.0,) * N_JOINTS) -> np.ndarray:
    """Joint positions of the planar chain.

    ``angles`` may be (10,) or (..., 10); the result is (..., 11, 2) with the
    base first and the end effector last.
    """
    q = np.asarray(angles, dtype=float)
    L = np.asarray(link_lengths, dtype=float)
    phi = np.cumsum(q, axis=-1)
    steps = np.stack([L * np.cos(phi), L * np.sin(phi)], axis=-1)
    zero = np.zeros(q.shape[:-1] + (1, 2))
    return np.concatenate([zero, np.cumsum(steps, axis=-2)], axis=-2)


def segments_hit_rectangle(p0, p1, lo, hi) -> np.ndarray:
    """Exact test whether closed segments p0-p1 meet the closed box [lo, hi].

    Liang-Barsky clipping on arrays of shape (..., 2).
    """
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    t0 = np.zeros(p0.shape[:-1])
    t1 = np.ones(p0.shape[:-1])
    ok = np.ones(p0.shape[:-1], dtype=bool)
    for ax in range(2):
        da = d[..., ax]
        a = p0[..., ax]
        flat = da == 0
        ok &= ~(flat & ((a < lo[ax]) | (a > hi[ax])))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[ax] - a) / da
            tb = (hi[ax] - a) / da
        tmin = np.where(flat, -np.inf, np.minimum(ta, tb))
        tmax = np.where(flat, np.inf, np.maximum(ta, tb))
        t0 = np.maximum(t0, tmin)
        t1 = np.minimum(t1, tmax)
    return ok & (t0 <= t1)


def _point_box_distance(p, lo, hi):
    dx = np.maximum(np.maximum(lo[0] - p[..., 0], p[..., 0] - hi[0]), 0.0)
    dy = np.maximum(np.maximum(lo[1] - p[..., 1], p[..., 1] - hi[1]), 0.0)
    return np.hypot(dx, dy)


def _point_segment_distance(p, a, b):
    ab = b - a
    den = np.sum(ab * ab, axis=-1)
    t = np.where(den > 0, np.sum((p - a) * ab, axis=-1) / np.where(den > 0, den, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(a + t[..., None] * ab - p, axis=-1)


def segment_box_distance(p0, p1, lo, hi) -> np.ndarray:
    """Euclidean distance between segments and a box (0 when they meet)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    dist = np.minimum(_point_box_distance(p0, lo, hi), _point_box_distance(p1, lo, hi))
    for corner in ([lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]):
        dist = np.minimum(dist, _point_segment_distance(np.asarray(corner), p0, p1))
    return np.where(segments_hit_rectangle(p0, p1, lo, hi), 0.0, dist)


@dataclass(frozen=True)
class CollisionInfo:
    collided: bool
    phase_index: Optional[int] = None
    link: Optional[int] = None
    obstacle: Optional[int] = None

    def __bool__(self):
        return self.collided


def resample_joints(q, resolution) -> np.ndarray:
    """Linear interpolation of a (T, 10) joint trajectory to ``resolution`` phases."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[None]
    if resolution is None or q.shape[0] == resolution:
        return q
    t_old = np.linspace(0.0, 1.0, q.shape[0])
    t_new = np.linspace(0.0, 1.0, resolution)
    return np.stack([np.interp(t_new, t_old, q[:, j]) for j in range(q.shape[1])], axis=1)


def collision_check(joint_trajectory, world: ReacherWorld, resolution=50) -> CollisionInfo:
    """Whether any link meets any obstacle at any of ``resolution`` phases."""
    q = resample_joints(joint_trajectory, resolution)
    if q.shape[-1] != N_JOINTS:
        raise WorldError(f"expected {N_JOINTS} joint angles, got {q.shape[-1]}")
    pts = forward_kinematics(q, world.link_lengths)
    a, b = pts[:, :-1], pts[:, 1:]
    for k, obs in enumerate(world.obstacles):
        hit = segments_hit_rectangle(a, b, obs.lo, obs.hi)
        if hit.any():
            t, j = np.argwhere(hit)[0]
            return CollisionInfo(True, int(t), int(j), k)
    return CollisionInfo(False)


def collides_batch(joint_trajectories, world: ReacherWorld, resolution=50) -> np.ndarray:
    """Vectorized :func:`collision_check` over (M, T, 10) trajectories."""
    Q = np.asarray(joint_trajectories, dtype=float)
    if resolution is not None and Q.shape[1] != resolution:
        Q = np.stack([resample_joints(q, resolution) for q in Q])
    pts = forward_kinematics(Q, world.link_lengths)
    a, b = pts[:, :, :-1], pts[:, :, 1:]
    out = np.zeros(Q.shape[0], dtype=bool)
    for obs in world.obstacles:
        out |= segments_hit_rectangle(a, b, obs.lo, obs.hi).any(axis=(1, 2))
    return out


def min_clearance(joint_trajectory, world: ReacherWorld, resolution=50) -> float:
    q = resample_joints(joint_trajectory, resolution)
    pts = forward_kinematics(q, world.link_lengths)
    a, b = pts[:, :-1], pts[:, 1:]
    return float(min(segment_box_distance(a, b, o.lo, o.hi).min() for o in world.obstacles))


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class ReacherDemo:
    joints: np.ndarray
    context: np.ndarray
    mode: str

    @property
    def mode_index(self) -> int:
        return MODES.index(self.mode)


def min_jerk(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return t ** 3 * (10 - 15 * t + 6 * t ** 2)


def arc_angles(start, target, n_links, link_length=1.0, bend=1.0):
    """Absolute link angles of an equal-curvature chain from ``start`` to ``target``.

    With a constant turn ``k`` between consecutive links the chord has length
    ``L |sin(n k / 2) / sin(k / 2)|`` and direction ``phi + (n - 1) k / 2``.
    ``bend`` picks the turning direction (+1 counter-clockwise).  Returns None
    when the target is out of reach.
    """
    d = np.asarray(target, dtype=float) - np.asarray(start, dtype=float)
    chord = np.hypot(*d)
    n = n_links
    if chord > n * link_length * (1 - 1e-9):
        return None

    def f(k):
        return link_length * np.sin(n * k / 2) / np.sin(k / 2) - chord

    # chord length decreases monotonically in k on (0, 2 pi / n)
    k = optimize.brentq(f, 1e-12, 2 * np.pi / n - 1e-12, xtol=1e-15)
    ks = np.sign(bend) * k
    phi = np.arctan2(d[1], d[0]) - (n - 1) * ks / 2
    return phi + ks * np.arange(n)


def _final_posture(world: ReacherWorld, target, base_angle, bend, rng):
    npx = world.n_proximal
    L = np.asarray(world.link_lengths)
    rel = np.zeros(N_JOINTS)
    rel[0] = base_angle
    rel[1:npx] = rng.normal(0.0, world.joint_jitter, npx - 1)
    absolute = np.cumsum(rel[:npx])
    elbow = np.sum(L[:npx, None] * np.stack([np.cos(absolute), np.sin(absolute)], 1), axis=0)
    distal = L[npx:]
    if not np.allclose(distal, distal[0]):
        raise WorldError("distal links must share one length")
    arc = arc_angles(elbow, target, N_JOINTS - npx, distal[0], bend)
    if arc is None:
        return None
    full = np.concatenate([absolute, arc])
    q = np.diff(np.concatenate([[0.0], full]))
    return np.angle(np.exp(1j * q))


def synthesize_demo(world: ReacherWorld, target, mode: str, rng):
    """One candidate demonstration, or None if it is infeasible or collides."""
    m = MODES.index(mode)
    base = world.mode_angles[m] + world.context_gain * target[1] + rng.normal(0.0, world.angle_jitter)
    qf = _final_posture(world, target, base, world.bend_signs[m], rng)
    if qf is None:
        return None
    q0 = np.zeros(N_JOINTS)
    q0[0] = base
    s = min_jerk(np.linspace(0.0, 1.0, world.n_steps))
    traj = q0 + s[:, None] * (qf - q0)
    if collision_check(traj, world, resolution=max(50, world.n_steps)):
        return None
    return traj


def generate_reacher_dataset(world: ReacherWorld, n_demos, mode_mix=(0.45, 0.45, 0.10), seed=0,
                             max_attempts=200) -> List[ReacherDemo]:
    """Sample ``n_demos`` collision-free demonstrations.

    Modes are drawn i.i.d. from ``mode_mix``; for each demo the target is
    redrawn (keeping the mode) until a collision-free motion is found, at most
    ``max_attempts`` times.
    """
    mix = np.asarray(mode_mix, dtype=float)
    if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1) > 1e-9:
        raise WorldError("mode_mix must be three non-negative proportions summing to one")
    rng = np.random.default_rng(seed)
    modes = rng.choice(3, size=n_demos, p=mix / mix.sum())
    demos = []
    rejected = np.zeros(3, dtype=int)
    for m in modes:
        for _ in range(max_attempts):
            target = world.sample_targets(1, rng)[0]
            traj = synthesize_demo(world, target, MODES[m], rng)
            if traj is not None:
                demos.append(ReacherDemo(traj, target, MODES[m]))
                break
            rejected[m] += 1
        else:
            raise GenerationError(
                f"could not place a collision-free {MODES[m]} demonstration in {max_attempts} tries; "
                f"rejections per mode {dict(zip(MODES, rejected.tolist()))}, "
                f"obstacles {[(o.lo.tolist(), o.hi.tolist()) for o in world.obstacles]}, "
                f"targets {world.target_low}..{world.target_high}"
            )
    return demos


def end_effector(q, world: ReacherWorld) -> np.ndarray:
    return forward_kinematics(q, world.link_lengths)[..., -1, :]
