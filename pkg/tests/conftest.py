import numpy as np
import pytest

from sddf.ellipsoid import Ellipsoid
from sddf.lie import so3_exp


def random_rotation(rng):
    return so3_exp(rng.normal(size=3) * 1.5)


def random_ellipsoid(rng, spread=1.0, perturb=True):
    ell = Ellipsoid(R0=random_rotation(rng), c0=rng.normal(size=3) * spread,
                    r0=rng.uniform(0.4, 1.6, 3))
    if perturb:
        ell.xi = rng.normal(size=6) * 0.2
        ell.s = rng.normal(size=3) * 0.1
    return ell


def series_expm(A, terms=20):
    """Truncated power series of the matrix exponential."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms + 1):
        term = term @ A / k
        out = out + term
    return out


def central_diff(fun, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        g.flat[k] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def quadric_root_oracle(p_loc, v_loc, r, t_max=50.0, steps=4000):
    """Signed distance along a ray to an axis-aligned ellipsoid by marching + bisection.

    Outside: first root with t > 0. Inside: the root with t <= 0 (exit behind).
    Independent of the closed form: only evaluates g(t) = sum((x/r)^2) - 1.
    """
    g = lambda t: np.sum(((p_loc + t * v_loc) / r) ** 2) - 1.0
    inside = g(0.0) < 0
    ts = np.linspace(0.0, -t_max if inside else t_max, steps)
    vals = np.array([g(t) for t in ts])
    if inside:
        k = np.nonzero(vals >= 0)[0]
    else:
        k = np.nonzero(vals <= 0)[0]
    if k.size == 0:
        return np.inf
    lo, hi = ts[k[0] - 1], ts[k[0]]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (g(mid) < 0) == (g(lo) < 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def quadric_root_oracle_batch(p_loc, v_loc, r, t_max=50.0, steps=2000, iters=80):
    """Vectorized version of :func:`quadric_root_oracle` for (N, 3) rays."""
    p_loc = np.asarray(p_loc, float)
    v_loc = np.asarray(v_loc, float)
    r = np.broadcast_to(np.asarray(r, float), p_loc.shape)

    def g(t):
        x = (p_loc + t[:, None] * v_loc) / r
        return np.sum(x * x, axis=1) - 1.0

    n = p_loc.shape[0]
    inside = g(np.zeros(n)) < 0
    direction = np.where(inside, -1.0, 1.0)
    ts = np.linspace(0.0, t_max, steps)
    found = np.zeros(n, bool)
    lo = np.zeros(n)
    hi = np.zeros(n)
    prev = np.zeros(n)
    for t in ts[1:]:
        cur = np.full(n, t) * direction
        crossed = ~found & ((g(cur) >= 0) == inside)
        lo[crossed] = prev[crossed]
        hi[crossed] = cur[crossed]
        found |= crossed
        prev = cur
    g_lo_neg = g(lo) < 0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        same = (g(mid) < 0) == g_lo_neg
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return np.where(found, 0.5 * (lo + hi), np.inf)


def intersecting_rays(rng, n, radii, inside_fraction=0.2):
    """Local-frame rays that certainly cross the ellipsoid with ``radii`` (N, 3).

    Outside origins aim at an interior point, inside origins sit at 60% depth.
    """
    radii = np.asarray(radii, float)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    target = 0.6 * u * radii * rng.uniform(0, 1, (n, 1))
    w = rng.normal(size=(n, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    inside = rng.uniform(size=n) < inside_fraction
    origin = np.where(inside[:, None], target, target - w * rng.uniform(1.5, 4.0, (n, 1)) * radii.max(axis=-1, keepdims=True))
    v = np.where(inside[:, None], w, target - origin)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return origin, v
