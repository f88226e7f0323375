"""Ellipsoid initialization from a point cloud.

Points are clustered with K-means++, each cluster gets a PCA ellipsoid, and
clusters that are flat and coplanar with a nearby flat cluster are merged
into one ellipsoid per planar patch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .ellipsoid import R_MIN, Ellipsoid

SCALE = 3.0
BETA_MAX = 0.05
ETA_MAX = 0.05
NEIGHBORS = 8


@dataclass
class ClusterSet:
    points: np.ndarray
    assignment: np.ndarray
    centers: np.ndarray

    @property
    def M(self) -> int:
        return self.centers.shape[0]

    def members(self, k: int) -> np.ndarray:
        return self.points[self.assignment == k]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(points, M: int, seed: int = 0, max_iter: int = 100) -> ClusterSet:
    """K-means++ seeding followed by Lloyd iterations.

    Clusters that go empty are reseeded with the point farthest from its
    current center.
    """
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    if not 1 <= M <= n:
        raise ValueError(f"need 1 <= M <= number of points, got M={M}, n={n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((M, 3))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for k in range(1, M):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total)))
            idx = min(idx, n - 1)
        centers[k] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[k:k + 1])[:, 0])

    assignment = np.full(n, -1)
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        counts = np.bincount(new, minlength=M)
        for k in np.where(counts == 0)[0]:
            far = int(np.argmax(d[np.arange(n), new]))
            new[far] = k
            d[far] = 0.0
            counts = np.bincount(new, minlength=M)
        if np.array_equal(new, assignment):
            break
        assignment = new
        for k in range(M):
            centers[k] = x[assignment == k].mean(axis=0)
    return ClusterSet(x, assignment, centers)


def single_ellipsoid_init(points, scale: float = SCALE, r_min: float = R_MIN):
    """PCA ellipsoid of a point set: ``(R, c, r)``.

    Axes are sorted by decreasing variance (ties keep axis order) and the
    last axis is flipped if needed so ``det R = +1``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    c = x.mean(axis=0)
    X = x - c
    cov = X.T @ X / x.shape[0]
    lam, Q = np.linalg.eigh(cov)
    dominant = np.argmax(np.abs(Q), axis=0)
    order = sorted(range(3), key=lambda k: (-round(lam[k], 12), dominant[k]))
    lam, Q = lam[order], Q[:, order]
    # deterministic eigenvector signs
    for k in range(3):
        if Q[np.argmax(np.abs(Q[:, k])), k] < 0:
            Q[:, k] = -Q[:, k]
    R = Q @ np.diag([1.0, 1.0, np.linalg.det(Q)])
    r = np.maximum(r_min, scale * np.sqrt(np.abs(lam)))
    return R, c, r


def flatness(points, R: np.ndarray, c: np.ndarray, r: np.ndarray):
    """Normal (shortest axis) and mean absolute offset along it."""
    n = R[:, int(np.argmin(r))]
    return n, float(np.mean(np.abs((np.atleast_2d(points) - c) @ n)))


@dataclass
class PlanarGraph:
    nodes: list[int]
    edges: list[tuple[int, int]]
    components: list[list[int]]


def planar_graph(centers, normals, betas, beta_max: float = BETA_MAX,
                 eta_max: float = ETA_MAX, S: int = NEIGHBORS) -> PlanarGraph:
    """Coplanarity graph over flat clusters and its connected components."""
    centers = np.asarray(centers, float)
    M = centers.shape[0]
    flat = np.asarray(betas) < beta_max
    d = _sq_dists(centers, centers)
    np.fill_diagonal(d, np.inf)
    nodes: set[int] = set()
    edges: list[tuple[int, int]] = []
    for i in np.where(flat)[0]:
        for j in np.argsort(d[i], kind="stable")[:min(S, M - 1)]:
            if not flat[j]:
                continue
            delta = centers[i] - centers[j]
            eta = 0.5 * (abs(delta @ normals[i]) + abs(delta @ normals[j]))
            if eta < eta_max:
                nodes.update((int(i), int(j)))
                edges.append((int(i), int(j)))
    node_list = sorted(nodes)
    if not node_list:
        return PlanarGraph([], [], [])
    index = {k: n for n, k in enumerate(node_list)}
    rows = [index[a] for a, _ in edges]
    cols = [index[b] for _, b in edges]
    adj = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(len(node_list),) * 2)
    _, labels = connected_components(adj, directed=False)
    comps: dict[int, list[int]] = {}
    for k, lab in zip(node_list, labels):
        comps.setdefault(int(lab), []).append(k)
    return PlanarGraph(node_list, edges, [comps[k] for k in sorted(comps, key=lambda l: min(comps[l]))])


def _to_ellipsoid(R, c, r) -> Ellipsoid:
    return Ellipsoid(R0=R, c0=c, r0=r)


def multi_ellipsoid_init(points, M: int, S: int = NEIGHBORS, beta_max: float = BETA_MAX,
                         eta_max: float = ETA_MAX, seed: int = 0,
                         max_iter: int = 100) -> list[Ellipsoid]:
    """Cluster, fit, merge coplanar flat clusters, re-cluster the rest.

    If the planar merge alone yields ``M`` or more ellipsoids, all merged
    ellipsoids are kept and no free clusters are added.
    """
    x = np.asarray(points, dtype=float)
    clusters = kmeans_pp(x, M, seed=seed, max_iter=max_iter)
    fits, normals, betas = [], [], []
    for k in range(M):
        pts = clusters.members(k)
        R, c, r = single_ellipsoid_init(pts)
        n, beta = flatness(pts, R, c, r)
        fits.append((R, c, r))
        normals.append(n)
        betas.append(beta)
    graph = planar_graph(np.array([f[1] for f in fits]), np.array(normals), np.array(betas),
                         beta_max, eta_max, S)
    out: list[Ellipsoid] = []
    used = np.zeros(x.shape[0], dtype=bool)
    for comp in graph.components:
        mask = np.isin(clusters.assignment, comp)
        out.append(_to_ellipsoid(*single_ellipsoid_init(x[mask])))
        used |= mask
    free = M - len(out)
    rest = x[~used]
    if not graph.components:
        return [_to_ellipsoid(*f) for f in fits]
    free = min(free, rest.shape[0])
    if free > 0:
        sub = kmeans_pp(rest, free, seed=seed + 1, max_iter=max_iter)
        for k in range(free):
            out.append(_to_ellipsoid(*single_ellipsoid_init(sub.members(k))))
    return out


def save_ellipsoids(ellipsoids, path) -> None:
    """Write composed poses and radii as JSON (``R`` row-major)."""
    items = []
    for e in ellipsoids:
        R, c = e.pose()
        items.append({"R": R.reshape(-1).tolist(), "c": c.tolist(), "r": e.radii.tolist()})
    Path(path).write_text(json.dumps({"ellipsoids": items}, indent=1))


def load_ellipsoids(path) -> list[Ellipsoid]:
    data = json.loads(Path(path).read_text())
    return [Ellipsoid(R0=np.reshape(item["R"], (3, 3)), c0=item["c"], r0=item["r"])
            for item in data["ellipsoids"]]
