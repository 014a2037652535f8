"""Dense semantic lifting.

2D feature maps from two extractors are PCA-reduced to a shared width,
blended with learnable scalar weights, sampled at the projections of a point
cloud, and then carried through time by rigid motion of the positions only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import nn

from .errors import BehindCameraError, IngestionError, InvalidArgument
from .geometry import (CameraModel, RigidTransform, apply_transform, as_cloud,
                       bilinear_sample_many, project_points, save_cloud, load_cloud)


class FeatureExtractor(Protocol):
    name: str
    output_dim: int

    def __call__(self, image) -> np.ndarray: ...


def extract_features(extractor: FeatureExtractor, image) -> np.ndarray:
    fmap = np.asarray(extractor(image), dtype=np.float64)
    if fmap.ndim != 3 or fmap.shape[2] != extractor.output_dim:
        raise InvalidArgument(f"{extractor.name} produced shape {fmap.shape}, "
                              f"expected (H, W, {extractor.output_dim})")
    if not np.all(np.isfinite(fmap)):
        raise InvalidArgument(f"{extractor.name} produced non-finite features")
    return fmap


def label_image(labels: np.ndarray) -> np.ndarray:
    """Encode an integer label mask as an RGB frame (label in the red channel)."""
    labels = np.asarray(labels)
    img = np.zeros(labels.shape + (3,), dtype=np.uint8)
    img[..., 0] = labels
    return img


@dataclass(frozen=True)
class SyntheticOracleExtractor:
    """Stand-in for a foundation model on label-encoded frames.

    A pixel with label ``k`` gets ``one_hot(k)`` followed by its normalised
    ``(u, v)`` coordinates. ``blur`` > 0 Gaussian-smooths the one-hot block,
    giving a softer, more globally coherent map.
    """
    n_labels: int
    blur: float = 0.0
    name: str = "oracle"

    @property
    def output_dim(self) -> int:
        return self.n_labels + 2

    def __call__(self, image) -> np.ndarray:
        img = np.asarray(image)
        labels = img[..., 0].astype(np.int64) if img.ndim == 3 else img.astype(np.int64)
        if labels.ndim != 2 or min(labels.shape) < 2:
            raise InvalidArgument(f"expected an (H, W[, 3]) frame, got {img.shape}")
        if labels.min() < 0 or labels.max() >= self.n_labels:
            raise InvalidArgument(f"labels must lie in [0, {self.n_labels})")
        H, W = labels.shape
        onehot = np.eye(self.n_labels)[labels]
        if self.blur > 0:
            onehot = np.stack([gaussian_filter(onehot[..., c], self.blur, mode="nearest")
                               for c in range(self.n_labels)], axis=-1)
        vv, uu = np.meshgrid(np.arange(H) / (H - 1), np.arange(W) / (W - 1), indexing="ij")
        return np.concatenate([onehot, uu[..., None], vv[..., None]], axis=-1)


def save_feature_map(path, fmap, extractor: str, layers: Sequence[int] | None = None) -> None:
    """Write ``<path>.npy`` plus a ``<path>.json`` sidecar."""
    fmap = np.asarray(fmap, dtype=np.float64)
    base = Path(path).with_suffix("")
    np.save(base.with_suffix(".npy"), fmap)
    meta = {"height": fmap.shape[0], "width": fmap.shape[1], "dim": fmap.shape[2],
            "extractor": extractor}
    if layers is not None:
        meta["layers"] = [int(x) for x in layers]
    base.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_feature_map(path) -> tuple[np.ndarray, dict]:
    base = Path(path).with_suffix("")
    npy, side = base.with_suffix(".npy"), base.with_suffix(".json")
    for p in (npy, side):
        if not p.exists():
            raise IngestionError(f"missing feature file {p}", path=str(p))
    try:
        meta = json.loads(side.read_text())
        shape = (int(meta["height"]), int(meta["width"]), int(meta["dim"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise IngestionError(f"bad sidecar {side}: {exc}", path=str(side)) from exc
    try:
        fmap = np.load(npy, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"unreadable feature array {npy}: {exc}", path=str(npy)) from exc
    if fmap.shape != shape:
        raise IngestionError(f"{npy} has shape {fmap.shape}, sidecar says {shape}", path=str(npy))
    return fmap, meta


@dataclass(frozen=True)
class FileFeatureExtractor:
    """Loads precomputed maps named ``<name>_frame{i:04}.npy`` from ``root``.

    The "image" handed to it is the integer frame index.
    """
    root: Path
    name: str
    output_dim: int
    layers: tuple[int, ...] | None = None

    def path_for(self, frame: int) -> Path:
        return Path(self.root) / f"{self.name}_frame{int(frame):04d}.npy"

    def __call__(self, frame) -> np.ndarray:
        path = self.path_for(frame)
        fmap, meta = load_feature_map(path)
        if fmap.shape[2] != self.output_dim:
            raise IngestionError(f"{path} has dim {fmap.shape[2]}, expected {self.output_dim}",
                                 path=str(path))
        return fmap


# -- PCA -------------------------------------------------------------------

@dataclass(frozen=True)
class PcaProjector:
    mean: np.ndarray
    basis: np.ndarray          # (d_in, d), orthonormal columns
    eigenvalues: np.ndarray    # top-d covariance eigenvalues (population normalisation)
    total_variance: float
    n_fit: int

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance == 0:
            return np.zeros(self.d)
        return self.eigenvalues / self.total_variance

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.basis

    def inverse_transform(self, z) -> np.ndarray:
        return np.asarray(z) @ self.basis.T + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "basis": self.basis.tolist(),
                "eigenvalues": self.eigenvalues.tolist(),
                "total_variance": self.total_variance, "n_fit": self.n_fit}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaProjector":
        return cls(np.array(d["mean"]), np.array(d["basis"]).reshape(len(d["mean"]), -1),
                   np.array(d["eigenvalues"]), float(d["total_variance"]), int(d["n_fit"]))


def orient_columns(basis: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def fit_pca(fmap, d: int) -> PcaProjector:
    """Fit a ``d``-component projector on the pixels of a feature map.

    ``fmap`` may be ``(H, W, c)`` or already flattened to ``(n, c)``.
    """
    x = np.asarray(fmap, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    n, c = x.shape
    if d < 1 or d > c:
        raise InvalidArgument(f"target dim {d} must be in [1, {c}]")
    if n < d:
        raise InvalidArgument(f"need at least {d} samples, got {n}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    eig = s ** 2 / n
    basis = orient_columns(vt[:d].T.copy())
    return PcaProjector(mean, basis, eig[:d].copy(), float(eig.sum()), n)


def reduce_map(proj: PcaProjector, fmap) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    return proj.transform(fmap.reshape(-1, fmap.shape[-1])).reshape(fmap.shape[:2] + (proj.d,))


# -- fusion ----------------------------------------------------------------

class FusionWeights(nn.Module):
    """Learnable scalar blend ``alpha * a + beta * b``."""

    def __init__(self, alpha: float = 0.5, beta: float = 0.5):
        super().__init__()
        self.alpha = nn.Parameter(torch.tensor(float(alpha), dtype=torch.float64))
        self.beta = nn.Parameter(torch.tensor(float(beta), dtype=torch.float64))

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise InvalidArgument(f"cannot fuse shapes {tuple(a.shape)} and {tuple(b.shape)}")
        return self.alpha.to(a.dtype) * a + self.beta.to(b.dtype) * b


def fuse(a, b, w: FusionWeights | tuple[float, float]):
    """Blend two reduced maps; numpy in gives numpy out, tensors stay tensors."""
    if isinstance(a, torch.Tensor):
        if isinstance(w, FusionWeights):
            return w(a, b)
        w = FusionWeights(*w)
        return w(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"cannot fuse shapes {a.shape} and {b.shape}")
    alpha, beta = ((float(w.alpha), float(w.beta)) if isinstance(w, FusionWeights) else w)
    return alpha * a + beta * b


# -- fields ----------------------------------------------------------------

@dataclass(frozen=True)
class SemanticField:
    points: np.ndarray
    features: np.ndarray
    timestep: int = 0

    def __post_init__(self):
        pts = as_cloud(self.points)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
            raise InvalidArgument(f"{pts.shape[0]} points but features of shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise InvalidArgument("non-finite features")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "SemanticField":
        idx = np.asarray(idx, dtype=np.int64)
        return SemanticField(self.points[idx], self.features[idx], self.timestep)

    def augmented(self) -> np.ndarray:
        return np.hstack([self.points, self.features])


def lift(cloud, cam: CameraModel, fused) -> SemanticField:
    pts = as_cloud(cloud)
    uvz = project_points(cam, pts)
    feats, _ = bilinear_sample_many(fused, uvz[:, 0], uvz[:, 1])
    return SemanticField(pts, feats, 0)


def propagate(fld: SemanticField, pose: RigidTransform) -> SemanticField:
    return SemanticField(apply_transform(pose, fld.points), fld.features, fld.timestep + 1)


def build_field_sequence(initial: SemanticField,
                         poses: Sequence[RigidTransform]) -> list[SemanticField]:
    """``poses[t-1]`` maps the t=0 object frame to the world at step t."""
    seq = [initial]
    for t, pose in enumerate(poses, start=1):
        seq.append(SemanticField(apply_transform(pose, initial.points), initial.features, t))
    return seq


def save_field_sequence(directory, fields: Sequence[SemanticField]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in fields:
        p = directory / f"field_t{f.timestep:04d}.txt"
        save_cloud(p, f.points, f.features)
        paths.append(p)
    return paths


def load_field(path) -> SemanticField:
    path = Path(path)
    pts, feats = load_cloud(path)
    stem = path.stem
    t = int(stem.split("_t")[-1]) if "_t" in stem else 0
    return SemanticField(pts, feats, t)
