"""Colour a semantic field by its leading feature components."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import InvalidArgument, PersistenceError
from ..geometry import save_cloud
from ..semlift import SemanticField, fit_pca, load_field


def field_colors(features: np.ndarray) -> np.ndarray:
    """(N, d) features -> (N, 3) RGB in [0, 1].

    Features are projected on their top three principal directions and scaled
    by one shared factor so that the largest projection maps to the cube face;
    constant features therefore all land on mid grey.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise InvalidArgument("features must be a non-empty (N, d) array")
    if f.shape[1] == 0:
        return np.full((len(f), 3), 0.5)
    proj = fit_pca(f, min(3, f.shape[1], len(f)))
    z = proj.transform(f)
    z = np.hstack([z, np.zeros((len(f), 3 - z.shape[1]))])
    scale = np.abs(z).max()
    if scale < 1e-12:
        return np.full((len(f), 3), 0.5)
    return np.clip(0.5 + 0.5 * z / scale, 0.0, 1.0)


def save_scatter(points: np.ndarray, rgb: np.ndarray, path, title: str = "") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(points[:, 0], points[:, 1], c=rgb, s=14, linewidths=0)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def visualize_field(field_path, out_prefix) -> dict[str, Path]:
    """Write ``<out>.txt`` (x y z r g b) and ``<out>.png`` for a stored field."""
    fld: SemanticField = load_field(field_path)
    rgb = field_colors(fld.features)
    out = Path(out_prefix)
    cloud, image = out.with_suffix(".txt"), out.with_suffix(".png")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_cloud(cloud, fld.points, rgb)
        save_scatter(fld.points, rgb, image, Path(field_path).stem)
    except OSError as exc:
        raise PersistenceError(f"cannot write visualisation under {out.parent}: {exc}") from exc
    return {"cloud": cloud, "image": image}


def region_separation(rgb: np.ndarray, labels: np.ndarray) -> float:
    """Distance between the mean colours of the two label groups."""
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if len(groups) != 2:
        raise InvalidArgument("need exactly two label groups")
    a, b = (rgb[labels == g].mean(axis=0) for g in groups)
    return float(np.linalg.norm(a - b))
