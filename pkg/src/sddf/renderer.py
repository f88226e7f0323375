"""Distance-image synthesis and point-cloud prediction.

Every pixel is a single model query along its ray; there is no marching.
Images are stored as little-endian PFM (bit exact) and optionally as an
8-bit grayscale PNG for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ellipsoid import Ellipsoid
from .prior import prior_forward
from .residual import SDDFModel, model_forward
from .scene import SensorModel

DEFAULT_CHUNK = 16384
D_VIEW_MAX = 6.0


@dataclass
class DistanceImage:
    values: np.ndarray      # (rows, cols) float32, +inf for misses
    R: np.ndarray
    t: np.ndarray
    sensor: SensorModel

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def miss(self) -> np.ndarray:
        return ~np.isfinite(self.values)


def predict_distance(model, p: np.ndarray, v: np.ndarray, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """``f_hat`` for a batch of rays.

    ``model`` is an :class:`SDDFModel` or a sequence of ellipsoids (prior only).
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    out = np.empty(p.shape[0])
    for s in range(0, p.shape[0], chunk):
        sl = slice(s, s + chunk)
        if isinstance(model, SDDFModel):
            out[sl] = model_forward(p[sl], v[sl], model).f_hat
        else:
            out[sl] = prior_forward(p[sl], v[sl], model).f
    return out


def render_distance_image(model, R, t, sensor: SensorModel,
                          chunk: int = DEFAULT_CHUNK) -> DistanceImage:
    cam = sensor.at(R, t)
    p, v = cam.rays()
    f = predict_distance(model, p, v, chunk)
    f = np.where(np.isfinite(f), f, np.inf).astype(np.float32)
    return DistanceImage(f.reshape(cam.image_shape), cam.R, cam.t, cam)


def predict_pointcloud(model, R, t, directions, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """World points ``t + f_hat R d`` for every direction with finite ``f_hat``."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    d = np.atleast_2d(np.asarray(directions, dtype=float)) @ R.T
    p = np.broadcast_to(t, d.shape)
    f = predict_distance(model, p, d, chunk)
    keep = np.isfinite(f)
    return t + f[keep, None] * d[keep]


def write_pfm(path, values: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows are written bottom to top."""
    img = np.asarray(values, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: {path}")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"PFM payload has {data.size} values, expected {w * h * channels}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def to_gray(values: np.ndarray, d_view_max: float = D_VIEW_MAX) -> np.ndarray:
    """Fixed mapping ``[0, d_view_max] -> [0, 255]``; misses are white."""
    v = np.asarray(values, dtype=float)
    g = np.clip(np.where(np.isfinite(v), v, d_view_max) / d_view_max, 0.0, 1.0)
    return np.round(g * 255).astype(np.uint8)


def write_png(path, values: np.ndarray, d_view_max: float = D_VIEW_MAX) -> None:
    import matplotlib.image as mpimg

    mpimg.imsave(path, to_gray(values, d_view_max), cmap="gray", vmin=0, vmax=255,
                 metadata={"Software": None})


def save_image(image: DistanceImage, stem, png: bool = True,
               d_view_max: float = D_VIEW_MAX) -> list[Path]:
    stem = Path(stem)
    out = [stem.with_suffix(".pfm")]
    write_pfm(out[0], image.values)
    if png:
        out.append(stem.with_suffix(".png"))
        write_png(out[1], image.values, d_view_max)
    return out


def ellipsoid_model(ellipsoids: Sequence[Ellipsoid]) -> list[Ellipsoid]:
    """Prior-only stand-in accepted wherever a model is expected."""
    return list(ellipsoids)
