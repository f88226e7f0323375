"""Next-best-view and waypoint optimization through the model's ray gradients.

A candidate pose is scored by three terms: a visibility reward (large
predicted distances), an overlap term against the previous point cloud and a
collision risk over rays sampled on the unit sphere. The pose is updated by
Adam on a local twist around a fixed base pose.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lie import backprop_pose, compose
from .prior import prior_backward, prior_forward
from .renderer import D_VIEW_MAX
from .residual import SDDFModel, input_gradients, model_forward
from .scene import SensorModel

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ViewOptError(RuntimeError):
    pass


@dataclass
class ViewOptConfig:
    w_o: float = 1.0
    w_v: float = 1.0
    w_r: float = 10.0
    d_max: float = 1.0
    d_safe: float = 0.3
    risk_rays: int = 64
    steps: int = 100
    lr: float = 0.02
    d_view_max: float = D_VIEW_MAX
    sensor: dict = field(default_factory=lambda: {"kind": "pinhole", "shape": [32, 24],
                                                  "fov": [90.0, 70.0]})

    def __post_init__(self):
        for name in ("w_o", "w_v", "w_r", "d_max", "d_safe", "risk_rays", "lr", "d_view_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    def make_sensor(self) -> SensorModel:
        s = self.sensor
        return SensorModel(s["kind"], tuple(s["shape"]), tuple(s.get("fov", (90.0, 90.0))))

    def to_dict(self) -> dict:
        return asdict(self)


# --- losses ----------------------------------------------------------------

def visibility_loss(f_hat, d_view_max: float = D_VIEW_MAX):
    """``-(1/2N) sum max(f, 0)^2`` with misses clamped at ``d_view_max``.

    Returns ``(loss, dL/df)``.
    """
    f = np.asarray(f_hat, dtype=float)
    n = f.size
    if n == 0:
        return 0.0, f.copy()
    fc = np.clip(np.where(np.isfinite(f), f, d_view_max), 0.0, d_view_max)
    grad = np.where(np.isfinite(f) & (f > 0) & (f < d_view_max), -fc / n, 0.0)
    return float(-(fc * fc).sum() / (2 * n)), grad


def overlap_loss(P, Q, d_max: float):
    """Mean clamped pairwise distance, negated. Returns ``(loss, dL/dQ)``."""
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    Q = np.asarray(Q, dtype=float).reshape(-1, 3)
    if P.shape[0] == 0 or Q.shape[0] == 0:
        log.warning("overlap loss on an empty point cloud")
        return 0.0, np.zeros_like(Q)
    diff = Q[:, None, :] - P[None, :, :]
    d = np.sqrt((diff * diff).sum(-1))
    denom = P.shape[0] * Q.shape[0]
    active = (d < d_max) & (d > 0)
    unit = np.where(active[..., None], diff / np.where(d > 0, d, 1.0)[..., None], 0.0)
    return float(-np.minimum(d, d_max).sum() / denom), -unit.sum(axis=1) / denom


def risk_loss(f_risk, d_safe: float):
    """``(1/M) sum max(d_safe - f, 0)``. Returns ``(loss, dL/df)``."""
    f = np.asarray(f_risk, dtype=float)
    m = f.size
    if m == 0:
        return 0.0, f.copy()
    viol = np.isfinite(f) & (f < d_safe)
    return float(np.where(viol, d_safe - f, 0.0).sum() / m), np.where(viol, -1.0 / m, 0.0)


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` nearly uniform unit vectors (golden-angle spiral)."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def coverage_proxy(f_hat, d_view_max: float = D_VIEW_MAX) -> float:
    """Visible-volume proxy: sum of clamped squared distances."""
    f = np.asarray(f_hat, dtype=float)
    fc = np.clip(np.where(np.isfinite(f), f, d_view_max), 0.0, d_view_max)
    return float((fc * fc).sum())


# --- model access ----------------------------------------------------------

def _query(model, p, v, need_grad: bool):
    """``f_hat`` and, optionally, its gradients in ``p`` and ``v``."""
    if isinstance(model, SDDFModel):
        pred = model_forward(p, v, model)
        if not need_grad:
            return pred.f_hat, None, None
        gp, gv = input_gradients(p, v, model, pred)
        return pred.f_hat, gp, gv
    out = prior_forward(p, v, model)
    if not need_grad:
        return out.f, None, None
    n = out.f.shape[0]
    g = prior_backward(p, v, out, model, np.zeros(n), np.zeros(n), np.ones(n))
    return out.f, g.p, g.v


@dataclass
class ViewResult:
    R: np.ndarray
    t: np.ndarray
    losses: list[float]
    initial_loss: float
    best_loss: float
    risk_min: float


class _ViewObjective:
    def __init__(self, model, reference: np.ndarray, cfg: ViewOptConfig, sensor: SensorModel):
        self.model = model
        self.reference = np.asarray(reference, dtype=float).reshape(-1, 3)
        self.cfg = cfg
        self.dirs = sensor.local_directions()
        self.risk_dirs = fibonacci_sphere(cfg.risk_rays)

    def __call__(self, R, c, need_grad: bool = True):
        cfg = self.cfg
        v_view = self.dirs @ R.T
        n = v_view.shape[0]
        v = np.vstack([v_view, self.risk_dirs])
        p = np.broadcast_to(c, v.shape).copy()
        f, gp, gv = _query(self.model, p, v, need_grad)
        fv, fr = f[:n], f[n:]
        lv, dv = visibility_loss(fv, cfg.d_view_max)
        lr_, dr = risk_loss(fr, cfg.d_safe)
        finite = np.isfinite(fv)
        Q = c + fv[finite, None] * v_view[finite]
        lo, dQ = overlap_loss(self.reference, Q, cfg.d_max) if cfg.w_o else (0.0, np.zeros_like(Q))
        loss = cfg.w_o * lo + cfg.w_v * lv + cfg.w_r * lr_
        info = {"L_o": lo, "L_v": lv, "L_r": lr_, "hits": int(finite.sum()),
                "coverage": coverage_proxy(fv, cfg.d_view_max),
                "risk_min": float(np.min(fr)) if fr.size else np.inf}
        if not need_grad:
            return loss, None, None, info
        d_f = np.concatenate([cfg.w_v * dv, cfg.w_r * dr])
        # overlap through q = c + f v
        d_f[:n][finite] += cfg.w_o * np.einsum("nk,nk->n", dQ, v_view[finite])
        grad_c = cfg.w_o * dQ.sum(axis=0)
        grad_vview = np.zeros_like(v_view)
        grad_vview[finite] = cfg.w_o * fv[finite, None] * dQ
        d_f = np.where(np.isfinite(f), d_f, 0.0)
        grad_c = grad_c + (d_f[:, None] * gp).sum(axis=0)
        grad_vview += d_f[:n, None] * gv[:n]
        grad_R = grad_vview.T @ self.dirs
        return loss, grad_R, grad_c, info


def next_best_view(model, pose_t, init_pose, cfg: ViewOptConfig, sensor: SensorModel | None = None,
                   reference: np.ndarray | None = None) -> ViewResult:
    """Optimize the next sensor pose starting from ``init_pose``.

    ``pose_t`` and ``init_pose`` are ``(R, t)`` pairs. The reference cloud is
    predicted from ``pose_t`` unless given. The lowest-loss pose visited is
    returned, so the final loss never exceeds the initial one.
    """
    from .renderer import predict_pointcloud

    sensor = sensor or cfg.make_sensor()
    if reference is None:
        reference = predict_pointcloud(model, pose_t[0], pose_t[1], sensor.local_directions())
    obj = _ViewObjective(model, reference, cfg, sensor)
    R0 = np.asarray(init_pose[0], dtype=float)
    c0 = np.asarray(init_pose[1], dtype=float)
    xi = np.zeros(6)
    loss0, *_, info0 = obj(R0, c0, need_grad=False)
    if info0["hits"] == 0:
        raise ViewOptError("every view ray misses the model at the initial pose")
    best = (loss0, R0.copy(), c0.copy(), info0["risk_min"])
    losses = [loss0]
    m = np.zeros(6)
    v2 = np.zeros(6)
    for step in range(1, cfg.steps + 1):
        R, c = compose(R0, c0, xi)
        loss, gR, gc, info = obj(R, c)
        g = backprop_pose(gR, gc, xi, R)
        if not np.all(np.isfinite(g)):
            log.warning("non-finite pose gradient at step %d; stopping", step)
            break
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v2 = ADAM_BETA2 * v2 + (1 - ADAM_BETA2) * g * g
        xi = xi - cfg.lr * (m / (1 - ADAM_BETA1**step)) / (np.sqrt(v2 / (1 - ADAM_BETA2**step)) + ADAM_EPS)
        R, c = compose(R0, c0, xi)
        loss, *_, info = obj(R, c, need_grad=False)
        losses.append(loss)
        if loss < best[0]:
            best = (loss, R, c, info["risk_min"])
    return ViewResult(best[1], best[2], losses, loss0, best[0], best[3])


# --- waypoints -------------------------------------------------------------

@dataclass
class WaypointReport:
    index: int
    coverage_before: float
    coverage_after: float
    loss_before: float
    loss_after: float
    risk_min: float


def downsample_stride(clouds: list[np.ndarray]) -> np.ndarray:
    """Concatenate ``k`` accumulated clouds keeping every ``k``-th point."""
    if not clouds:
        return np.zeros((0, 3))
    k = len(clouds)
    return np.concatenate(clouds)[::k]


def optimize_waypoints(model, waypoints, cfg: ViewOptConfig, sensor: SensorModel | None = None):
    """Optimize waypoints one after another against the clouds seen so far.

    The first waypoint is kept fixed as the starting view. Returns the
    optimized poses and one report row per optimized waypoint.
    """
    from .renderer import predict_pointcloud

    if len(waypoints) < 1:
        raise ValueError("need at least one waypoint")
    sensor = sensor or cfg.make_sensor()
    dirs = sensor.local_directions()
    poses = [(np.asarray(R, float), np.asarray(t, float)) for R, t in waypoints]
    out = [poses[0]]
    clouds = [predict_pointcloud(model, *poses[0], dirs)]
    reports = []
    for k in range(1, len(poses)):
        reference = downsample_stride(clouds)
        res = next_best_view(model, out[-1], poses[k], cfg, sensor, reference=reference)
        before = _coverage_at(model, poses[k], dirs, cfg)
        after = _coverage_at(model, (res.R, res.t), dirs, cfg)
        reports.append(WaypointReport(k, before, after, res.initial_loss, res.best_loss, res.risk_min))
        out.append((res.R, res.t))
        clouds.append(predict_pointcloud(model, res.R, res.t, dirs))
    return out, reports


def _coverage_at(model, pose, dirs, cfg: ViewOptConfig) -> float:
    v = dirs @ np.asarray(pose[0]).T
    p = np.broadcast_to(pose[1], v.shape).copy()
    f, _, _ = _query(model, p, v, need_grad=False)
    return coverage_proxy(f, cfg.d_view_max)


def load_poses(path) -> list[tuple[np.ndarray, np.ndarray]]:
    """JSON ``{"poses": [{"R": 9 row-major, "t": 3}, ...]}``."""
    data = json.loads(Path(path).read_text())
    return [(np.reshape(np.asarray(q["R"], float), (3, 3)), np.asarray(q["t"], float))
            for q in data["poses"]]


def save_poses(poses, path) -> None:
    items = [{"R": np.asarray(R).reshape(-1).tolist(), "t": np.asarray(t).tolist()} for R, t in poses]
    Path(path).write_text(json.dumps({"poses": items}, indent=1))


def write_report(reports, path) -> None:
    fields = ["index", "coverage_before", "coverage_after", "loss_before", "loss_after", "risk_min"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in reports:
            w.writerow({k: (f"{x:.6g}" if isinstance(x, float) else x) for k, x in asdict(r).items()})
