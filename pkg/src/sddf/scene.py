"""Ground-truth directional distances for synthetic scenes.

A scene is a union of closed solids (spheres, axis-aligned boxes and
watertight triangle meshes). Each primitive reports, for every ray, the
parameter intervals ``[t_in, t_out]`` along the full line where the line is
inside it; the union boundary is made of the endpoints not strictly inside
any other interval.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

DEFAULT_AUG_EPS = 0.02
DATASET_MAGIC = b"SDDFDATA"
DATASET_VERSION = 1
RECORD_DTYPE = np.dtype([("p", "<f4", 3), ("v", "<f4", 3), ("f", "<f4"), ("pad", "<f4"),
                         ("i", "i1"), ("s", "i1")])


class SceneError(ValueError):
    pass


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.radius = float(self.radius)

    def intervals(self, p, v):
        d = p - self.center
        b = np.einsum("ij,ij->i", d, v)
        disc = b * b - (np.einsum("ij,ij->i", d, d) - self.radius**2)
        root = np.sqrt(np.where(disc >= 0, disc, np.nan))
        return np.stack([-b - root, -b + root], axis=1)[:, None, :]

    def contains(self, x):
        return np.linalg.norm(x - self.center, axis=-1) <= self.radius

    def to_json(self):
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise SceneError(f"box with max {self.hi} not above min {self.lo}")

    def intervals(self, p, v):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (self.lo - p) / v
            t2 = (self.hi - p) / v
        parallel = v == 0
        inside_slab = (p >= self.lo) & (p <= self.hi)
        lo_t = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        hi_t = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        t_in = lo_t.max(axis=1)
        t_out = hi_t.min(axis=1)
        ok = t_in <= t_out
        return np.stack([np.where(ok, t_in, np.nan), np.where(ok, t_out, np.nan)], axis=1)[:, None, :]

    def contains(self, x):
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def to_json(self):
        return {"type": "box", "min": self.lo.tolist(), "max": self.hi.tolist()}


@dataclass
class Mesh:
    """Closed triangle mesh; inside means odd crossing parity."""

    vertices: np.ndarray
    faces: np.ndarray
    source: str | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    def line_hits(self, p, v, chunk: int = 2048):
        """Sorted, de-duplicated hit parameters of each full line, NaN padded."""
        tri = self.vertices[self.faces]
        v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
        rows = []
        for s in range(0, p.shape[0], chunk):
            pp, vv = p[s:s + chunk, None, :], v[s:s + chunk, None, :]
            h = np.cross(vv, e2[None])
            a = np.einsum("ntk,tk->nt", h, e1)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / a
                sv = pp - v0[None]
                u = inv * np.einsum("ntk,ntk->nt", sv, h)
                qv = np.cross(sv, e1[None])
                w = inv * np.einsum("ntk,ntk->nt", vv, qv)
                t = inv * np.einsum("tk,ntk->nt", e2, qv)
            ok = (np.abs(a) > 1e-14) & (u >= 0) & (w >= 0) & (u + w <= 1)
            t = np.sort(np.where(ok, t, np.nan), axis=1)
            # a crossing through a shared edge or vertex shows up more than once
            dup = np.zeros_like(t, dtype=bool)
            dup[:, 1:] = np.abs(np.diff(t, axis=1)) < 1e-9
            t = np.sort(np.where(dup, np.nan, t), axis=1)
            rows.append(t)
        width = max(int(np.isfinite(r).sum(axis=1).max(initial=0)) for r in rows)
        width += width % 2
        return np.concatenate([r[:, :width] if r.shape[1] >= width else
                               np.pad(r, ((0, 0), (0, width - r.shape[1])), constant_values=np.nan)
                               for r in rows], axis=0)

    def intervals(self, p, v):
        t = self.line_hits(p, v)
        if t.shape[1] == 0:
            return np.full((p.shape[0], 1, 2), np.nan)
        return t.reshape(p.shape[0], -1, 2)

    def contains(self, x, seed: int = 0):
        """Crossing parity, majority vote over three jittered directions."""
        x = np.atleast_2d(x)
        rng = np.random.default_rng(seed)
        votes = np.zeros(x.shape[0], dtype=int)
        for _ in range(3):
            d = _normalize(np.array([1.0, 0.3, 0.2]) + 0.1 * rng.normal(size=3))
            t = self.line_hits(x, np.broadcast_to(d, x.shape).copy())
            if t.size:
                votes += (np.sum(t > 0, axis=1) % 2).astype(int)
        return votes >= 2

    def to_json(self):
        return {"type": "mesh", "path": self.source}


def load_obj(path) -> Mesh:
    """Read vertices and faces from an OBJ file, fan-triangulating polygons."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [k - 1 if k > 0 else len(verts) + k for k in idx]
            for a, b in zip(idx[1:-1], idx[2:]):
                faces.append([idx[0], a, b])
    if not faces:
        raise SceneError(f"{path}: no faces")
    return Mesh(np.array(verts), np.array(faces), str(path))


def box_mesh(lo, hi) -> Mesh:
    """Closed, outward-oriented triangle mesh of an axis-aligned box."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = [f for a, b, c, d in quads for f in ((a, b, c), (a, c, d))]
    return Mesh(corners, np.array(faces))


@dataclass
class Scene:
    primitives: list = field(default_factory=list)

    def intervals(self, p, v) -> np.ndarray:
        if not self.primitives:
            return np.full((p.shape[0], 0, 2), np.nan)
        return np.concatenate([prim.intervals(p, v) for prim in self.primitives], axis=1)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0], dtype=bool)
        for prim in self.primitives:
            out |= prim.contains(x)
        return out

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = [], []
        for prim in self.primitives:
            if isinstance(prim, Sphere):
                los.append(prim.center - prim.radius)
                his.append(prim.center + prim.radius)
            elif isinstance(prim, Box):
                los.append(prim.lo)
                his.append(prim.hi)
            else:
                los.append(prim.vertices.min(axis=0))
                his.append(prim.vertices.max(axis=0))
        return np.min(los, axis=0), np.max(his, axis=0)

    def to_json(self) -> dict:
        return {"primitives": [prim.to_json() for prim in self.primitives]}

    @classmethod
    def from_json(cls, spec: dict, base: Path | None = None) -> "Scene":
        prims = []
        for item in spec.get("primitives", []):
            kind = item.get("type")
            if kind == "sphere":
                prims.append(Sphere(item["center"], item["radius"]))
            elif kind == "box":
                prims.append(Box(item["min"], item["max"]))
            elif kind == "mesh":
                path = Path(item["path"])
                if base is not None and not path.is_absolute():
                    path = base / path
                prims.append(load_obj(path))
            else:
                raise SceneError(f"unknown primitive type {kind!r}")
        return cls(prims)

    @classmethod
    def load(cls, path) -> "Scene":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), path.parent)


def raycast_sddf(scene: Scene, p, v) -> np.ndarray:
    """Signed directional distance of each ray to the scene boundary.

    Outside the occupied set this is the nearest boundary crossing ahead
    (``+inf`` if none); inside it is the nearest boundary crossing behind,
    a value ``<= 0``.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    iv = scene.intervals(p, v)
    n = p.shape[0]
    if iv.shape[1] == 0:
        return np.full(n, np.inf)
    a, b = iv[..., 0], iv[..., 1]
    present = ~np.isnan(a)
    inside = np.any(present & (a <= 0) & (b >= 0), axis=1)
    ends = np.concatenate([a, b], axis=1)
    ends_ok = np.concatenate([present, present], axis=1)
    e, lo, hi = ends[:, :, None], a[:, None, :], b[:, None, :]
    # interior to the union iff covered on both sides, so shared faces vanish
    with np.errstate(invalid="ignore"):
        left = np.any((lo < e) & (e <= hi), axis=2)
        right = np.any((lo <= e) & (e < hi), axis=2)
    covered = left & right
    boundary = ends_ok & ~covered & np.isfinite(ends)
    ahead = np.where(boundary & (ends > 0), ends, np.inf).min(axis=1)
    behind = np.where(boundary & (ends <= 0), ends, -np.inf).max(axis=1)
    return np.where(inside, behind, ahead)


# --- sensors ---------------------------------------------------------------

@dataclass
class SensorModel:
    """Range sensor: ``kind`` is ``"lidar"`` or ``"pinhole"``.

    Lidar: ``shape = (az_bins, el_bins)``, azimuth in [-pi, pi), elevation
    spanning [-pi/2, pi/2] inclusive; sensor frame x forward, z up.
    Pinhole: ``shape = (width, height)`` with field of view ``fov = (h, v)``
    in degrees; camera frame z forward, x right, y down.
    """

    kind: str
    shape: tuple[int, int]
    fov: tuple[float, float] = (90.0, 90.0)
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in ("lidar", "pinhole"):
            raise SceneError(f"unknown sensor kind {self.kind!r}")
        self.shape = tuple(int(x) for x in self.shape)
        self.fov = tuple(float(x) for x in self.fov)
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float)

    @classmethod
    def lidar(cls, az_bins: int, el_bins: int, **kw) -> "SensorModel":
        return cls("lidar", (az_bins, el_bins), **kw)

    @classmethod
    def pinhole(cls, width: int, height: int, hfov: float, vfov: float, **kw) -> "SensorModel":
        return cls("pinhole", (width, height), (hfov, vfov), **kw)

    def at(self, R, t) -> "SensorModel":
        return SensorModel(self.kind, self.shape, self.fov, R, t)

    def local_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, row-major image order."""
        if self.kind == "lidar":
            az_bins, el_bins = self.shape
            az = -np.pi + 2 * np.pi * np.arange(az_bins) / az_bins
            el = np.linspace(-np.pi / 2, np.pi / 2, el_bins) if el_bins > 1 else np.zeros(1)
            E, A = np.meshgrid(el, az, indexing="ij")
            d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
            return _normalize(d.reshape(-1, 3))
        w, h = self.shape
        tx = np.tan(np.deg2rad(self.fov[0]) / 2)
        ty = np.tan(np.deg2rad(self.fov[1]) / 2)
        x = tx * ((np.arange(w) + 0.5) / w * 2 - 1)
        y = ty * ((np.arange(h) + 0.5) / h * 2 - 1)
        Y, X = np.meshgrid(y, x, indexing="ij")
        d = np.stack([X, Y, np.ones_like(X)], axis=-1).reshape(-1, 3)
        return _normalize(d)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.local_directions() @ self.R.T
        return np.broadcast_to(self.t, d.shape).copy(), d

    @property
    def image_shape(self) -> tuple[int, int]:
        """``(rows, cols)`` of the range image."""
        if self.kind == "lidar":
            return self.shape[1], self.shape[0]
        return self.shape[1], self.shape[0]

    def to_json(self) -> dict:
        return {"kind": self.kind, "shape": list(self.shape), "fov": list(self.fov)}


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rotation of a z-forward, y-down camera at ``eye`` facing ``target``."""
    z = _normalize(np.asarray(target, float) - np.asarray(eye, float))
    x = np.cross(z, np.asarray(up, float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x = _normalize(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


# --- datasets --------------------------------------------------------------

class TrainingSample(NamedTuple):
    p: np.ndarray
    v: np.ndarray
    f_star: float
    i_star: int
    s_star: int


@dataclass
class Dataset:
    """Struct-of-arrays training set."""

    p: np.ndarray
    v: np.ndarray
    f: np.ndarray
    i: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.v = np.asarray(self.v, dtype=float).reshape(-1, 3)
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        self.i = np.asarray(self.i, dtype=np.int8).reshape(-1)
        self.s = np.asarray(self.s, dtype=np.int8).reshape(-1)

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "Dataset":
        if not samples:
            return cls.empty()
        return cls(np.array([s.p for s in samples]), np.array([s.v for s in samples]),
                   [s.f_star for s in samples], [s.i_star for s in samples],
                   [s.s_star for s in samples])

    def __len__(self) -> int:
        return self.f.shape[0]

    def __getitem__(self, idx) -> TrainingSample | "Dataset":
        if isinstance(idx, (int, np.integer)):
            return TrainingSample(self.p[idx], self.v[idx], float(self.f[idx]),
                                  int(self.i[idx]), int(self.s[idx]))
        return Dataset(self.p[idx], self.v[idx], self.f[idx], self.i[idx], self.s[idx])

    def __iter__(self) -> Iterator[TrainingSample]:
        return (self[k] for k in range(len(self)))

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = [d for d in parts if len(d)]
        if not parts:
            return Dataset.empty()
        return Dataset(*(np.concatenate([getattr(d, k) for d in parts])
                         for k in ("p", "v", "f", "i", "s")))

    def save(self, path) -> None:
        rec = np.zeros(len(self), dtype=RECORD_DTYPE)
        rec["p"], rec["v"], rec["f"] = self.p, self.v, self.f
        rec["i"], rec["s"] = self.i, self.s
        with open(path, "wb") as fh:
            fh.write(DATASET_MAGIC + struct.pack("<IQ", DATASET_VERSION, len(self)))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        data = Path(path).read_bytes()
        if data[:8] != DATASET_MAGIC:
            raise SceneError(f"{path}: not an SDDF dataset")
        version, count = struct.unpack_from("<IQ", data, 8)
        if version != DATASET_VERSION:
            raise SceneError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
        rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=20)
        v = rec["v"].astype(float)
        return cls(rec["p"].astype(float), _normalize(v), rec["f"].astype(float),
                   rec["i"], rec["s"])


def synthesize(scene: Scene, sensor: SensorModel) -> Dataset:
    """Simulated range scan; rays that hit nothing are dropped."""
    if scene.contains(sensor.t[None])[0]:
        raise SceneError(f"sensor origin {sensor.t.tolist()} lies inside occupied space")
    p, v = sensor.rays()
    f = raycast_sddf(scene, p, v)
    hit = np.isfinite(f)
    n = int(hit.sum())
    return Dataset(p[hit], v[hit], f[hit], np.ones(n), np.ones(n))


def augment_negative(ds: Dataset, eps: float = DEFAULT_AUG_EPS) -> Dataset:
    """Append one sample just behind every observed surface point."""
    if eps <= 0:
        raise ValueError("augmentation offset must be positive")
    n = len(ds)
    neg = Dataset(ds.p + (ds.f + eps)[:, None] * ds.v, ds.v, np.full(n, -eps),
                  np.ones(n), -np.ones(n))
    return Dataset.concat([ds, neg]) if n else Dataset.empty()


def build_point_cloud(ds: Dataset) -> np.ndarray:
    """Surface points of non-negative samples and origins of negative ones."""
    pos = ds.f >= 0
    return np.where(pos[:, None], ds.p + np.where(pos, ds.f, 0.0)[:, None] * ds.v, ds.p)


# --- built-in scenes -------------------------------------------------------

def room_walls(lo, hi, thickness: float = 0.1) -> list[Box]:
    """Six slabs enclosing the free box ``[lo, hi]``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    olo, ohi = lo - thickness, hi + thickness
    walls = []
    for axis in range(3):
        a_lo, a_hi = olo.copy(), ohi.copy()
        a_hi[axis] = lo[axis]
        walls.append(Box(a_lo, a_hi))
        b_lo, b_hi = olo.copy(), ohi.copy()
        b_lo[axis] = hi[axis]
        walls.append(Box(b_lo, b_hi))
    return walls


def toy_room() -> Scene:
    """4 m x 4 m x 3 m room holding one box and one sphere."""
    lo, hi = np.array([-2.0, -2.0, 0.0]), np.array([2.0, 2.0, 3.0])
    return Scene(room_walls(lo, hi) + [
        Box([0.6, 0.5, 0.0], [1.4, 1.3, 0.8]),
        Sphere([-0.9, -0.7, 1.0], 0.5),
    ])


def lidar_poses(center, spread, count: int, seed: int, scene: Scene | None = None,
                clearance: float = 0.3) -> list[np.ndarray]:
    """Random sensor positions around ``center``, kept away from obstacles."""
    rng = np.random.default_rng(seed)
    out = []
    center = np.asarray(center, float)
    spread = np.asarray(spread, float)
    while len(out) < count:
        x = center + rng.uniform(-1, 1, 3) * spread
        if scene is not None:
            probe = x + clearance * np.vstack([np.zeros(3), np.eye(3), -np.eye(3)])
            if scene.contains(probe).any():
                continue
        out.append(x)
    return out
