"""Union-of-ellipsoids prior and its loss.

The fused intersection indicator is the max over ellipsoids, the fused sign
indicator the min, and the fused distance the min over intersected
ellipsoids (falling back to the min over all when nothing is intersected).
Gradients follow the usual min/max subgradient: each upstream gradient goes
to the single ellipsoid that attained the extremum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ellipsoid import (DEFAULT_EPS, Ellipsoid, EllipsoidEval, chain_to_world,
                        ellipsoid_backward, forward_local, to_local)

NONE = -1
F_CLAMP = 10.0

# (w_plus, w_minus) per output, prior loss
PRIOR_WEIGHTS = {"i": (1.0, 1.0), "s": (1.0, 10.0), "f": (1.0, 1.65)}


@dataclass
class PriorOutput:
    i: np.ndarray
    s: np.ndarray
    f: np.ndarray
    j_f: np.ndarray
    j_i: np.ndarray
    j_s: np.ndarray
    evals: list[EllipsoidEval]
    poses: list[tuple[np.ndarray, np.ndarray]]

    @property
    def hit(self) -> np.ndarray:
        return self.j_f != NONE

    def local_frame(self):
        """``(p', v')`` of every ray in the frame of its selected ellipsoid.

        Rows with ``j_f == NONE`` are zero.
        """
        n = self.f.shape[0]
        p_loc = np.zeros((n, 3))
        v_loc = np.zeros((n, 3))
        for j, ev in enumerate(self.evals):
            m = self.j_f == j
            p_loc[m] = ev.p_loc[m]
            v_loc[m] = ev.v_loc[m]
        return p_loc, v_loc


def fuse(i_all: np.ndarray, s_all: np.ndarray, f_all: np.ndarray):
    """Fuse per-ellipsoid ``(M, N)`` arrays. Ties go to the lowest index."""
    n = i_all.shape[1]
    cols = np.arange(n)
    j_i = np.argmax(i_all, axis=0)
    j_s = np.argmin(s_all, axis=0)
    any_hit = (i_all >= 0.0).any(axis=0)
    f_masked = np.where((i_all >= 0.0) | ~any_hit[None, :], f_all, np.inf)
    j_f = np.argmin(f_masked, axis=0)
    f = f_masked[j_f, cols]
    j_f = np.where(np.isfinite(f), j_f, NONE)
    return i_all[j_i, cols], s_all[j_s, cols], f, j_f, j_i, j_s


def prior_forward(p: np.ndarray, v: np.ndarray, ellipsoids: Sequence[Ellipsoid],
                  eps: float = DEFAULT_EPS) -> PriorOutput:
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    evals, poses = [], []
    for ell in ellipsoids:
        R, c = ell.pose()
        p_loc, v_loc = to_local(p, v, R, c)
        evals.append(forward_local(p_loc, v_loc, ell.radii, eps))
        poses.append((R, c))
    i, s, f, j_f, j_i, j_s = fuse(np.stack([e.i for e in evals]),
                                  np.stack([e.s_ind for e in evals]),
                                  np.stack([e.f for e in evals]))
    return PriorOutput(i=i, s=s, f=f, j_f=j_f, j_i=j_i, j_s=j_s, evals=evals, poses=poses)


@dataclass
class PriorGradients:
    xi: np.ndarray          # (M, 6)
    log_radii: np.ndarray   # (M, 3)
    p: np.ndarray           # (N, 3)
    v: np.ndarray           # (N, 3)


def prior_backward(p, v, out: PriorOutput, ellipsoids: Sequence[Ellipsoid],
                   d_i, d_s, d_f, local_p=None, local_v=None) -> PriorGradients:
    """Route upstream gradients to the extremal ellipsoids.

    ``local_p``/``local_v`` are optional extra ``(N, 3)`` gradients on the
    selected ellipsoid's local ``p'`` and ``v'`` (used by the residual
    branch). ``d_f`` is ignored wherever the fused distance is infinite.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n = p.shape[0]
    d_i = np.broadcast_to(np.asarray(d_i, dtype=float), (n,))
    d_s = np.broadcast_to(np.asarray(d_s, dtype=float), (n,))
    d_f = np.broadcast_to(np.asarray(d_f, dtype=float), (n,))
    M = len(ellipsoids)
    grads = PriorGradients(np.zeros((M, 6)), np.zeros((M, 3)), np.zeros((n, 3)), np.zeros((n, 3)))
    for j, (ell, ev) in enumerate(zip(ellipsoids, out.evals)):
        sel_i = out.j_i == j
        sel_s = out.j_s == j
        sel_f = out.j_f == j
        if not (sel_i.any() or sel_s.any() or sel_f.any()):
            continue
        gp, gv, gr = ellipsoid_backward(ev, np.where(sel_i, d_i, 0.0),
                                        np.where(sel_s, d_s, 0.0),
                                        np.where(sel_f, d_f, 0.0))
        if local_p is not None:
            gp = gp + np.where(sel_f[:, None], local_p, 0.0)
        if local_v is not None:
            gv = gv + np.where(sel_f[:, None], local_v, 0.0)
        wg = chain_to_world(p, v, gp, gv, gr, ell)
        grads.xi[j] = wg.xi
        grads.log_radii[j] = wg.log_radii
        grads.p += wg.p
        grads.v += wg.v
    return grads


def huber(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-transition Huber loss and its derivative in ``x``."""
    d = x - y
    a = np.abs(d)
    quad = a < 1.0
    return np.where(quad, 0.5 * d * d, a - 0.5), np.where(quad, d, np.sign(d))


def weighted_huber(x, y, w_pos: float, w_neg: float):
    """Huber loss scaled by ``w_pos`` where the label is >= 0, else ``w_neg``."""
    y = np.asarray(y, dtype=float)
    w = np.where(y >= 0.0, w_pos, w_neg)
    val, grad = huber(np.asarray(x, dtype=float), y)
    return w * val, w * grad


def clamp_inf(f: np.ndarray, f_star: np.ndarray, f_clamp: float = F_CLAMP) -> np.ndarray:
    """Replace infinite predictions with ``f* + f_clamp``."""
    return np.where(np.isfinite(f), f, np.asarray(f_star) + f_clamp)


def triple_loss(i, s, f, i_star, s_star, f_star, weights, f_clamp: float = F_CLAMP):
    """Mean over the batch of the three weighted Huber terms.

    Returns ``(loss, d_i, d_s, d_f)``; partials are of the batch mean and
    ``d_f`` is zero where ``f`` is infinite.
    """
    f = np.asarray(f, dtype=float)
    n = f.size
    li, gi = weighted_huber(i, i_star, *weights["i"])
    ls, gs = weighted_huber(s, s_star, *weights["s"])
    finite = np.isfinite(f)
    lf, gf = weighted_huber(clamp_inf(f, f_star, f_clamp), f_star, *weights["f"])
    gf = np.where(finite, gf, 0.0)
    loss = float((li + ls + lf).sum() / n)
    return loss, gi / n, gs / n, gf / n


def prior_loss(out: PriorOutput, i_star, s_star, f_star, f_clamp: float = F_CLAMP):
    return triple_loss(out.i, out.s, out.f, i_star, s_star, f_star, PRIOR_WEIGHTS, f_clamp)
