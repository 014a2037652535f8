"""Point-cloud primitives: farthest-point sampling, rigid transforms,
pinhole projection and bilinear feature sampling.

Everything here works in float64 on plain numpy arrays. A point cloud is an
``(N, 3)`` array; a feature map is an ``(H, W, d)`` array indexed
``grid[v, u]`` (row = v, column = u).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, InvalidArgument, PersistenceError

ORTHO_TOL = 1e-9


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgument(f"expected an (N, 3) point array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise InvalidArgument("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise InvalidArgument("point cloud has non-finite coordinates")
    return pts


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidArgument("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidArgument("transform has non-finite entries")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise InvalidArgument("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidArgument("rotation has det != +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def planar(cls, x: float, y: float, theta: float, z: float = 0.0) -> "RigidTransform":
        return cls(rot_z(theta), np.array([x, y, z]))

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def encode(self) -> np.ndarray:
        """9-vector: first two rotation columns followed by the translation."""
        return np.concatenate([self.rotation[:, 0], self.rotation[:, 1], self.translation])


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    # QR of a Gaussian matrix, sign-fixed so the result is Haar distributed
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng: np.random.Generator, scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), scale * rng.standard_normal(3))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def apply_transform(t: RigidTransform, cloud) -> np.ndarray:
    pts = as_cloud(cloud)
    return pts @ t.rotation.T + t.translation


def farthest_point_sample(cloud, n: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min subsampling.

    The first pick is ``seed mod N``. Each later pick is the unselected point
    whose squared distance to the selected set is largest; ``argmax`` resolves
    ties to the lowest index.
    """
    pts = as_cloud(cloud)
    N = pts.shape[0]
    if not isinstance(n, (int, np.integer)) or n < 1 or n > N:
        raise InvalidArgument(f"n must be in [1, {N}], got {n}")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = int(seed) % N
    mind = np.full(N, np.inf)
    taken = np.zeros(N, dtype=bool)
    for k in range(1, n):
        last = selected[k - 1]
        taken[last] = True
        d = np.sum((pts - pts[last]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
        cand = np.where(taken, -np.inf, mind)
        selected[k] = int(np.argmax(cand))
    return selected


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise InvalidArgument("image must be at least 2x2")

    @classmethod
    def top_down(cls, size: int, extent: float, height: float = 1.0) -> "CameraModel":
        """Camera ``height`` metres above the origin looking down -z.

        The square image of ``size`` pixels spans ``[-extent, extent]`` in x and y
        on the z=0 plane.
        """
        f = (size - 1) / (2.0 * extent) * height
        # camera x = world x, camera y = -world y, camera z = height - world z
        R = np.diag([1.0, -1.0, -1.0])
        return cls(f, f, (size - 1) / 2.0, (size - 1) / 2.0, size, size,
                   RigidTransform(R, np.array([0.0, 0.0, height])))


def to_camera(cam: CameraModel, points) -> np.ndarray:
    return apply_transform(cam.world_to_camera, points)


def project_points(cam: CameraModel, points) -> np.ndarray:
    """Vectorised projection; returns ``(N, 3)`` rows of ``(u, v, depth)``."""
    pc = to_camera(cam, points)
    z = pc[:, 2]
    bad = np.flatnonzero(z <= 1e-9)
    if bad.size:
        raise BehindCameraError(f"point {bad[0]} is behind the camera (depth {z[bad[0]]:g})",
                                index=int(bad[0]))
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy
    return np.stack([u, v, z], axis=1)


def project_point(cam: CameraModel, p) -> tuple[float, float, float]:
    u, v, z = project_points(cam, p)[0]
    return float(u), float(v), float(z)


def unproject(cam: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """Camera-frame point for pixel ``(u, v)`` at ``depth``."""
    return np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])


def bilinear_sample_many(fmap, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``fmap`` at float pixel coordinates.

    Out-of-range coordinates are clamped to the border; the second return value
    flags which samples were clamped.
    """
    grid = np.asarray(fmap, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] < 1 or min(grid.shape[:2]) < 2:
        raise InvalidArgument(f"feature map must be (H>=2, W>=2, d>=1), got {grid.shape}")
    H, W, _ = grid.shape
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    clamped = (uc != u) | (vc != v)
    u0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
    v0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
    du = (uc - u0)[:, None]
    dv = (vc - v0)[:, None]
    out = ((1 - du) * (1 - dv) * grid[v0, u0] + du * (1 - dv) * grid[v0, u0 + 1]
           + (1 - du) * dv * grid[v0 + 1, u0] + du * dv * grid[v0 + 1, u0 + 1])
    return out, clamped


def bilinear_sample(fmap, u: float, v: float) -> tuple[np.ndarray, bool]:
    out, clamped = bilinear_sample_many(fmap, [u], [v])
    return out[0], bool(clamped[0])


# -- text format ----------------------------------------------------------

def format_cloud(points, features=None) -> str:
    pts = as_cloud(points)
    feats = np.zeros((pts.shape[0], 0)) if features is None else np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
        raise InvalidArgument("features must be (N, d) matching the points")
    buf = io.StringIO()
    buf.write(f"{pts.shape[0]} {feats.shape[1]}\n")
    np.savetxt(buf, np.hstack([pts, feats]), fmt="%.17g", delimiter=" ")
    return buf.getvalue()


def parse_cloud(text: str) -> tuple[np.ndarray, np.ndarray]:
    lines = text.strip("\n").split("\n")
    try:
        n, d = (int(x) for x in lines[0].split())
        rows = np.array([[float(x) for x in ln.split()] for ln in lines[1:n + 1]], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise InvalidArgument(f"malformed cloud text: {exc}") from exc
    if rows.shape != (n, 3 + d):
        raise InvalidArgument(f"header says {n}x{3 + d}, body is {rows.shape}")
    return rows[:, :3].copy(), rows[:, 3:].copy()


def save_cloud(path, points, features=None) -> None:
    try:
        Path(path).write_text(format_cloud(points, features), encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def load_cloud(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    return parse_cloud(text)
