"""Closed-form directional distance to a single ellipsoid.

All ray quantities are batched: positions and directions are ``(N, 3)``
arrays. Per-ellipsoid parameters are single arrays. Results carry the
local-frame cache needed by :func:`ellipsoid_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie

R_MIN = 0.005
DEFAULT_EPS = 1e-8
DEGENERATE_T0 = 1e-12


@dataclass
class Ray:
    p: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        v = np.asarray(self.v, dtype=float)
        self.v = v / np.linalg.norm(v, axis=-1, keepdims=True)

    @property
    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        return np.atleast_2d(self.p), np.atleast_2d(self.v)


@dataclass
class Ellipsoid:
    """Ellipsoid with fixed base pose/radii and learnable increments.

    The composed pose is ``T0 exp(xi^)`` and the radii are ``r0 * exp(s)``.
    """

    R0: np.ndarray = field(default_factory=lambda: np.eye(3))
    c0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r0: np.ndarray = field(default_factory=lambda: np.ones(3))
    xi: np.ndarray = field(default_factory=lambda: np.zeros(6))
    s: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R0 = np.asarray(self.R0, dtype=float).reshape(3, 3)
        self.c0 = np.asarray(self.c0, dtype=float).reshape(3)
        self.r0 = np.asarray(self.r0, dtype=float).reshape(3)
        self.xi = np.asarray(self.xi, dtype=float).reshape(6)
        self.s = np.asarray(self.s, dtype=float).reshape(3)

    @classmethod
    def sphere(cls, center, radius: float) -> "Ellipsoid":
        return cls(c0=center, r0=np.full(3, float(radius)))

    def pose(self) -> tuple[np.ndarray, np.ndarray]:
        return lie.compose(self.R0, self.c0, self.xi)

    @property
    def radii(self) -> np.ndarray:
        return self.r0 * np.exp(self.s)

    def copy(self) -> "Ellipsoid":
        return Ellipsoid(self.R0.copy(), self.c0.copy(), self.r0.copy(),
                         self.xi.copy(), self.s.copy())


@dataclass
class EllipsoidEval:
    i: np.ndarray
    s_ind: np.ndarray
    f: np.ndarray
    valid: np.ndarray
    degenerate: np.ndarray
    # local-frame cache
    p_loc: np.ndarray
    v_loc: np.ndarray
    w_loc: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    f_cand: np.ndarray
    r: np.ndarray
    eps: float


def to_local(p: np.ndarray, v: np.ndarray, R: np.ndarray, c: np.ndarray):
    """Express rays in the ellipsoid frame: ``R^T (p - c)`` and ``R^T v``."""
    return (np.asarray(p) - c) @ R, np.asarray(v) @ R


def forward_local(p_loc: np.ndarray, v_loc: np.ndarray, r: np.ndarray,
                  eps: float = DEFAULT_EPS) -> EllipsoidEval:
    """Evaluate indicators and prior distance for rays already in the local frame."""
    det = r[0] * r[1] * r[2]
    q1sq = (det / r) ** 2
    w = np.cross(p_loc, v_loc)
    t0 = (v_loc**2) @ q1sq
    t1 = (w**2) @ (r**2)
    t2 = (p_loc * v_loc) @ q1sq
    i = t0 - t1
    s_ind = (p_loc**2) @ q1sq - det**2
    degenerate = t0 <= DEGENERATE_T0
    beta = np.maximum(i, 0.0) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        f_cand = -(det * np.sqrt(beta) + t2) / t0
    # boundary points (s = 0) count as valid
    valid = (f_cand * s_ind >= 0.0) & ~degenerate
    f = np.where(valid, f_cand, np.inf)
    return EllipsoidEval(i=i, s_ind=s_ind, f=f, valid=valid, degenerate=degenerate,
                         p_loc=p_loc, v_loc=v_loc, w_loc=w, t0=t0, t1=t1, t2=t2,
                         f_cand=f_cand, r=np.array(r, dtype=float), eps=eps)


def ellipsoid_forward(p: np.ndarray, v: np.ndarray, ell: Ellipsoid,
                      eps: float = DEFAULT_EPS) -> EllipsoidEval:
    R, c = ell.pose()
    p_loc, v_loc = to_local(np.atleast_2d(p), np.atleast_2d(v), R, c)
    return forward_local(p_loc, v_loc, ell.radii, eps)


def ellipsoid_backward(ev: EllipsoidEval, d_i, d_s, d_f):
    """Gradients of ``d_i*i + d_s*s + d_f*f`` w.r.t. ``p'``, ``v'`` and ``r``.

    ``d_*`` are per-ray upstream gradients (scalars broadcast). Returns
    ``(grad_p_loc (N,3), grad_v_loc (N,3), grad_r (N,3))``. The ``f`` path
    is dropped for invalid rays, and its ``i``/``t0``/``t2`` partials are
    zeroed for degenerate ``t0``.
    """
    n = ev.i.shape[0]
    d_i = np.broadcast_to(np.asarray(d_i, dtype=float), (n,))
    d_s = np.broadcast_to(np.asarray(d_s, dtype=float), (n,))
    d_f = np.where(ev.valid, np.broadcast_to(np.asarray(d_f, dtype=float), (n,)), 0.0)

    r = ev.r
    p, v, w = ev.p_loc, ev.v_loc, ev.w_loc
    det = r[0] * r[1] * r[2]
    q1 = det / r
    q1sq = q1**2
    r2 = r**2
    # U = hat(r) * hat(r) elementwise: U[j, k] = r_l^2 for {j, k, l} distinct
    U = np.array([[0.0, r2[2], r2[1]],
                  [r2[2], 0.0, r2[0]],
                  [r2[1], r2[0], 0.0]])

    g_t0_p = np.zeros_like(p)
    g_t0_v = 2.0 * v * q1sq
    g_t0_r = 2.0 * r * ((v * v) @ U.T)
    q0sq_w = w * r2
    g_t1_p = 2.0 * np.cross(v, q0sq_w)
    g_t1_v = -2.0 * np.cross(p, q0sq_w)
    g_t1_r = 2.0 * (w * w) * r
    g_t2_p = v * q1sq
    g_t2_v = p * q1sq
    g_t2_r = 2.0 * r * ((p * v) @ U.T)
    g_s_p = 2.0 * p * q1sq
    g_s_r = 2.0 * r * ((p * p) @ U.T - q1sq)

    g_i_p = g_t0_p - g_t1_p
    g_i_v = g_t0_v - g_t1_v
    g_i_r = g_t0_r - g_t1_r

    beta = np.maximum(ev.i, 0.0) + ev.eps
    sq = np.sqrt(beta)
    ok = ~ev.degenerate
    with np.errstate(divide="ignore", invalid="ignore"):
        df_di = np.where(ok & (ev.i > 0.0), -det / (2.0 * ev.t0 * sq), 0.0)
        f_fin = np.where(ev.valid, ev.f, 0.0)
        df_dt0 = np.where(ok, -f_fin / ev.t0, 0.0)
        df_dt2 = np.where(ok, -1.0 / ev.t0, 0.0)
        df_dr = np.where(ok, -sq / ev.t0, 0.0)[:, None] * q1

    ci = (d_i + d_f * df_di)[:, None]
    c0 = (d_f * df_dt0)[:, None]
    c2 = (d_f * df_dt2)[:, None]
    cs = d_s[:, None]

    grad_p = ci * g_i_p + c0 * g_t0_p + c2 * g_t2_p + cs * g_s_p
    grad_v = ci * g_i_v + c0 * g_t0_v + c2 * g_t2_v
    grad_r = ci * g_i_r + c0 * g_t0_r + c2 * g_t2_r + cs * g_s_r + d_f[:, None] * df_dr
    return grad_p, grad_v, grad_r


@dataclass
class WorldGradients:
    p: np.ndarray          # (N, 3)
    v: np.ndarray          # (N, 3)
    R: np.ndarray          # (3, 3), summed over rays
    c: np.ndarray          # (3,), summed over rays
    log_radii: np.ndarray  # (3,), summed over rays
    xi: np.ndarray         # (6,), summed over rays


def chain_to_world(p: np.ndarray, v: np.ndarray, grad_p_loc: np.ndarray,
                   grad_v_loc: np.ndarray, grad_r: np.ndarray,
                   ell: Ellipsoid) -> WorldGradients:
    """Push local-frame gradients to world rays and ellipsoid parameters."""
    R, c = ell.pose()
    p = np.atleast_2d(p)
    v = np.atleast_2d(v)
    grad_R = (p - c).T @ grad_p_loc + v.T @ grad_v_loc
    grad_c = -R @ grad_p_loc.sum(axis=0)
    return WorldGradients(
        p=grad_p_loc @ R.T,
        v=grad_v_loc @ R.T,
        R=grad_R,
        c=grad_c,
        log_radii=ell.radii * grad_r.sum(axis=0),
        xi=lie.backprop_pose(grad_R, grad_c, ell.xi, R),
    )
