"""Planar pose-aware placement task.

Shoe-like polygons with a labelled head (toe) and tail (heel) lie on a table
under a top-down camera. The gripper holds one object at a time at its centre
and moves it by bounded planar deltas; a negative grip command releases it and
grasps the next object in the list. An episode succeeds when every object lies
within ``delta_pos`` of its target with the head along the target heading
(within ``delta_ang``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from matplotlib.path import Path as PolyPath

from ..errors import ConfigError
from ..geometry import CameraModel, RigidTransform, farthest_point_sample

BACKGROUND, TAIL, HEAD = 0, 1, 2
N_LABELS = 3
HOLD = np.array([0.0, 0.0, 0.0, 1.0])
RELEASE = np.array([0.0, 0.0, 0.0, -1.0])

# toe tapers to a point at +x, heel is blunt at -x
SHOE_OUTLINE = (
    (-0.100, -0.030), (-0.040, -0.036), (0.030, -0.034), (0.080, -0.022), (0.110, 0.000),
    (0.080, 0.022), (0.030, 0.034), (-0.040, 0.036), (-0.100, 0.030), (-0.112, 0.000),
)


def wrap_angle(a):
    """Map to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class ToyObject:
    name: str = "shoe"
    outline: tuple[tuple[float, float], ...] = SHOE_OUTLINE
    head_vertex: int = 4
    tail_vertex: int = 9

    def __post_init__(self):
        v = np.asarray(self.outline, dtype=float)
        if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
            raise ConfigError("outline needs at least 3 planar vertices")
        x, y = v[:, 0], v[:, 1]
        if abs(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)) < 1e-8:
            raise ConfigError("degenerate outline")
        if not (0 <= self.head_vertex < len(v) and 0 <= self.tail_vertex < len(v)):
            raise ConfigError("head/tail vertex index out of range")
        if np.allclose(v[self.head_vertex], v[self.tail_vertex]):
            raise ConfigError("head and tail vertices must differ")

    @property
    def vertices(self) -> np.ndarray:
        return np.asarray(self.outline, dtype=float)

    def contains(self, xy_local: np.ndarray) -> np.ndarray:
        return PolyPath(self.vertices).contains_points(xy_local)

    def label(self, xy_local: np.ndarray) -> np.ndarray:
        """Part labels: head on the toe side of the head/tail midpoint."""
        head = self.vertices[self.head_vertex]
        tail = self.vertices[self.tail_vertex]
        axis = head - tail
        mid = (head + tail) / 2
        return np.where((np.asarray(xy_local) - mid) @ axis > 0, HEAD, TAIL)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        out = []
        while sum(len(o) for o in out) < n:
            c = rng.uniform(lo, hi, size=(2 * n, 2))
            out.append(c[self.contains(c)])
        return np.concatenate(out)[:n]


def _tuples(x, width):
    out = tuple(tuple(float(v) for v in row) for row in x)
    if any(len(r) != width for r in out):
        raise ConfigError(f"expected rows of length {width}")
    return out


@dataclass(frozen=True)
class TaskSpec:
    """Task parameters. Object ``i`` spawns at ``spawn_offsets[i]`` plus a
    uniform draw from the shared ranges and must reach ``targets[i]``."""
    name: str = "place_shoe"
    objects: tuple[ToyObject, ...] = field(default_factory=lambda: (ToyObject(),))
    targets: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, float(np.pi)),)
    spawn_offsets: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    delta_pos: float = 0.02
    delta_ang: float = float(np.deg2rad(15.0))
    x_range: tuple[float, float] = (-0.15, 0.15)
    y_range: tuple[float, float] = (-0.15, 0.15)
    theta_range: tuple[float, float] = (-float(np.pi), float(np.pi))
    max_step_pos: float = 0.03
    max_step_ang: float = 0.3
    horizon: int = 8
    n_chunks: int = 4
    n_dense: int = 1024
    n_points: int = 128
    image_size: int = 64
    extent: float = 0.35

    def __post_init__(self):
        if not (self.delta_pos > 0 and self.delta_ang > 0):
            raise ConfigError("success tolerances must be positive")
        if not self.objects:
            raise ConfigError("need at least one object")
        if not (len(self.objects) == len(self.targets) == len(self.spawn_offsets)):
            raise ConfigError("objects, targets and spawn_offsets must have equal length")
        for lo, hi in (self.x_range, self.y_range, self.theta_range):
            if hi < lo:
                raise ConfigError("randomisation range has hi < lo")
        if self.n_points > self.n_dense or self.n_points < 1:
            raise ConfigError("need 1 <= n_points <= n_dense")
        if self.max_step_pos <= 0 or self.max_step_ang <= 0 or self.horizon < 1 or self.n_chunks < 1:
            raise ConfigError("step limits, horizon and chunk count must be positive")
        if self.image_size < 2 or self.extent <= 0:
            raise ConfigError("image_size >= 2 and extent > 0 required")

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def episode_len(self) -> int:
        return self.horizon * self.n_chunks

    def camera(self) -> CameraModel:
        return CameraModel.top_down(self.image_size, self.extent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for o in d["objects"]:
            o["outline"] = [list(v) for v in o["outline"]]
        d["targets"] = [list(t) for t in self.targets]
        d["spawn_offsets"] = [list(t) for t in self.spawn_offsets]
        for k in ("x_range", "y_range", "theta_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        try:
            if "objects" in d:
                objs = []
                for o in d["objects"]:
                    o = dict(o)
                    if "outline" in o:
                        o["outline"] = _tuples(o["outline"], 2)
                    objs.append(ToyObject(**o))
                d["objects"] = tuple(objs)
            if "targets" in d:
                d["targets"] = _tuples(d["targets"], 3)
            if "spawn_offsets" in d:
                d["spawn_offsets"] = _tuples(d["spawn_offsets"], 2)
            for k in ("x_range", "y_range", "theta_range"):
                if k in d:
                    d[k] = tuple(float(x) for x in d[k])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad task spec: {exc}") from exc


def dual_shoe_spec(**kw) -> TaskSpec:
    """Two shoes placed side by side, both toes pointing to -x."""
    base = dict(name="place_dual_shoes", objects=(ToyObject(), ToyObject()),
                targets=((0.0, 0.06, float(np.pi)), (0.0, -0.06, float(np.pi))),
                spawn_offsets=((0.0, 0.1), (0.0, -0.1)), y_range=(-0.05, 0.05),
                x_range=(-0.12, 0.12))
    base.update(kw)
    return TaskSpec(**base)


def object_success(pose, target, spec: TaskSpec) -> bool:
    x, y, th = pose
    tx, ty, tth = target
    return bool(np.hypot(x - tx, y - ty) <= spec.delta_pos
                and abs(wrap_angle(th - tth)) <= spec.delta_ang)


def success(poses, targets, spec: TaskSpec) -> bool:
    """All objects within tolerance. Accepts one pose/target or stacked ``(M, 3)``."""
    P = np.atleast_2d(np.asarray(poses, dtype=float))
    T = np.atleast_2d(np.asarray(targets, dtype=float))
    return all(object_success(p, t, spec) for p, t in zip(P, T))


def advance(poses: np.ndarray, active: int, action, spec: TaskSpec) -> tuple[np.ndarray, int, float]:
    """Pure transition on (poses, active); returns new poses, active index and grip."""
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    poses = np.array(poses, dtype=float)
    if a[3] < 0:
        return poses, min(active + 1, len(poses)), 0.0
    if active < len(poses):
        poses[active, :2] += a[:2] * spec.max_step_pos
        poses[active, 2] = float(wrap_angle(poses[active, 2] + a[2] * spec.max_step_ang))
    return poses, active, 1.0


class ToyEnv:
    """Deterministic given the reset seed.

    Robot state exposed to the policy: ``(ee_x, ee_y, ee_yaw, grip)`` where the
    end effector sits at the held object's centre and ``ee_yaw`` accumulates
    commanded rotation since reset.
    """

    def __init__(self, spec: TaskSpec, seed: int = 0):
        if not isinstance(spec, TaskSpec):
            raise ConfigError("spec must be a TaskSpec")
        self.spec = spec
        self.seed = seed
        self.reset(seed)

    def reset(self, seed: int | None = None) -> None:
        if seed is not None:
            self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        s = self.spec
        init = []
        for off in s.spawn_offsets:
            init.append([off[0] + rng.uniform(*s.x_range), off[1] + rng.uniform(*s.y_range),
                         rng.uniform(*s.theta_range)])
        self.initial = np.array(init)
        self.poses = self.initial.copy()
        self.active = 0
        self.ee_yaw = 0.0
        self.grip = 1.0
        self.ee_xy = self.poses[0, :2].copy()
        self.t = 0
        self.local_points, self.local_labels = [], []
        for obj in s.objects:
            dense = obj.sample_surface(s.n_dense, rng)
            idx = farthest_point_sample(np.c_[dense, np.zeros(len(dense))], s.n_points,
                                        seed=int(rng.integers(s.n_dense)))
            self.local_points.append(np.c_[dense[idx], np.zeros(len(idx))])
            self.local_labels.append(obj.label(dense[idx]))

    # -- kinematics ---------------------------------------------------------

    @property
    def targets(self) -> np.ndarray:
        return np.asarray(self.spec.targets, dtype=float)

    @property
    def pose(self) -> np.ndarray:
        """Pose of the first object; convenient for single-object tasks."""
        return self.poses[0]

    @staticmethod
    def object_transform(pose) -> RigidTransform:
        x, y, th = pose
        return RigidTransform.planar(x, y, th)

    def motions_since_reset(self) -> list[RigidTransform]:
        """Per object: maps t=0 world positions to current world positions."""
        return [motion_between(a, b) for a, b in zip(self.initial, self.poses)]

    def robot_state(self) -> np.ndarray:
        return np.array([self.ee_xy[0], self.ee_xy[1], self.ee_yaw, self.grip])

    def step(self, action) -> None:
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        held = self.active < self.spec.n_objects
        self.poses, self.active, self.grip = advance(self.poses, self.active, a, self.spec)
        if self.grip and held:
            self.ee_yaw += a[2] * self.spec.max_step_ang
        if self.active < self.spec.n_objects:
            self.ee_xy = self.poses[self.active, :2].copy()
        self.t += 1

    def is_success(self) -> bool:
        return success(self.poses, self.targets, self.spec)

    # -- observation --------------------------------------------------------

    def world_points(self) -> np.ndarray:
        """All objects' surface points stacked in object order."""
        out = []
        for pts, pose in zip(self.local_points, self.poses):
            T = self.object_transform(pose)
            out.append(pts @ T.rotation.T + T.translation)
        return np.concatenate(out)

    def object_slices(self) -> list[slice]:
        n = self.spec.n_points
        return [slice(i * n, (i + 1) * n) for i in range(self.spec.n_objects)]

    def point_labels(self) -> np.ndarray:
        return np.concatenate(self.local_labels)

    def render_labels(self) -> np.ndarray:
        """Top-down label mask; later objects occlude earlier ones."""
        s = self.spec
        cam = s.camera()
        n = s.image_size
        vv, uu = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
        depth = cam.world_to_camera.translation[2]
        xc = (uu - cam.cx) * depth / cam.fx
        yc = (vv - cam.cy) * depth / cam.fy
        pc = np.stack([xc, yc, np.full_like(xc, depth)], axis=-1).reshape(-1, 3)
        inv = cam.world_to_camera.inverse()
        world = pc @ inv.rotation.T + inv.translation
        lab = np.zeros(len(world), dtype=np.int64)
        for obj, pose in zip(s.objects, self.poses):
            T = self.object_transform(pose).inverse()
            local = (world @ T.rotation.T + T.translation)[:, :2]
            inside = obj.contains(local)
            lab[inside] = obj.label(local[inside])
        return lab.reshape(n, n)


def motion_between(start, current) -> RigidTransform:
    a = ToyEnv.object_transform(start)
    b = ToyEnv.object_transform(current)
    R = b.rotation @ a.rotation.T
    return RigidTransform(R, b.translation - R @ a.translation)


def make_env(spec: TaskSpec, seed: int) -> ToyEnv:
    return ToyEnv(spec, seed)


def expert_action(poses, active: int, targets, spec: TaskSpec) -> np.ndarray:
    """Saturating straight-line step for the held object; release once it is placed."""
    M = len(poses)
    if active >= M:
        return HOLD.copy()
    pose, target = poses[active], targets[active]
    if active < M - 1 and object_success(pose, target, spec):
        return RELEASE.copy()
    d = np.asarray(target[:2]) - np.asarray(pose[:2])
    dist = np.hypot(*d)
    step = d if dist <= spec.max_step_pos else d * (spec.max_step_pos / dist)
    dth = float(wrap_angle(target[2] - pose[2]))
    dth = np.clip(dth, -spec.max_step_ang, spec.max_step_ang)
    return np.array([step[0] / spec.max_step_pos, step[1] / spec.max_step_pos,
                     dth / spec.max_step_ang, 1.0])


def expert_step(env: ToyEnv) -> np.ndarray:
    return expert_action(env.poses, env.active, env.targets, env.spec)


def scripted_expert(env: ToyEnv, horizon: int | None = None) -> np.ndarray:
    """Chunk of expert actions planned from the env's current state."""
    spec = env.spec
    H = spec.horizon if horizon is None else horizon
    poses, active = env.poses.copy(), env.active
    out = np.zeros((H, 4))
    for h in range(H):
        out[h] = expert_action(poses, active, env.targets, spec)
        poses, active, _ = advance(poses, active, out[h], spec)
    return out


def steps_needed(pose, target, spec: TaskSpec) -> int:
    dist = np.hypot(*(np.asarray(target[:2]) - pose[:2]))
    dth = abs(float(wrap_angle(target[2] - pose[2])))
    return int(max(np.ceil(dist / spec.max_step_pos - 1e-9), np.ceil(dth / spec.max_step_ang - 1e-9)))


def expert_can_solve(env: ToyEnv) -> bool:
    """Whether the remaining steps suffice for the saturating expert."""
    s = env.spec
    if env.active >= s.n_objects:
        return env.is_success()
    need = sum(steps_needed(env.poses[i], env.targets[i], s) for i in range(env.active, s.n_objects))
    need += s.n_objects - 1 - env.active   # one release between consecutive objects
    return need <= s.episode_len - env.t
