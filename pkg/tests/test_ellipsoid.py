import numpy as np
import pytest

from sddf.ellipsoid import (DEFAULT_EPS, Ellipsoid, Ray, chain_to_world, ellipsoid_backward,
                            ellipsoid_forward, forward_local, to_local)
from sddf.lie import compose

from conftest import (central_diff, intersecting_rays, quadric_root_oracle,
                      quadric_root_oracle_batch, random_ellipsoid, random_rotation)

UNIT = Ellipsoid.sphere([0, 0, 0], 1.0)


def fwd(p, v, ell=UNIT, eps=DEFAULT_EPS):
    return ellipsoid_forward(np.array([p], float), np.array([v], float), ell, eps)


def test_ray_normalizes():
    r = Ray([0, 0, 0], [3, 0, 4])
    assert np.allclose(r.v, [0.6, 0, 0.8])


def test_to_local_identity_and_translation():
    p, v = np.array([[1.0, 2, 3]]), np.array([[0, 0, 1.0]])
    pl, vl = to_local(p, v, np.eye(3), np.zeros(3))
    assert np.array_equal(pl, p) and np.array_equal(vl, v)
    pl, vl = to_local(p, v, np.eye(3), np.array([1.0, 1, 1]))
    assert np.allclose(pl, [[0, 1, 2]]) and np.array_equal(vl, v)


def test_to_local_roundtrip(rng):
    R = random_rotation(rng)
    c = rng.normal(size=3)
    p = rng.normal(size=(20, 3))
    v = rng.normal(size=(20, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pl, vl = to_local(p, v, R, c)
    assert np.abs(pl @ R.T + c - p).max() <= 1e-12
    assert np.allclose(np.linalg.norm(vl, axis=1), 1.0)


def test_axis_hit_from_outside():
    ev = fwd([-2, 0, 0], [1, 0, 0])
    assert ev.i[0] == pytest.approx(1.0)
    assert ev.s_ind[0] == pytest.approx(3.0)
    assert ev.valid[0]
    assert ev.f[0] == pytest.approx(1.0, abs=1e-8)


def test_inside_center():
    ev = fwd([0, 0, 0], [1, 0, 0])
    assert ev.s_ind[0] == pytest.approx(-1.0)
    assert ev.valid[0]
    assert ev.f[0] == pytest.approx(-1.0, abs=1e-8)


def test_ellipsoid_behind_is_invalid():
    ev = fwd([2, 0, 0], [1, 0, 0])
    assert ev.f_cand[0] == pytest.approx(-3.0, abs=1e-8)
    assert ev.s_ind[0] == pytest.approx(3.0)
    assert not ev.valid[0]
    assert ev.f[0] == np.inf


def test_miss_uses_virtual_plane():
    ev = fwd([-2, 2, 0], [1, 0, 0])
    assert ev.i[0] == pytest.approx(-3.0)
    assert ev.valid[0]
    assert ev.f[0] == pytest.approx(2.0 - np.sqrt(DEFAULT_EPS), abs=1e-12)


def test_elongated_ellipsoid_hit():
    ell = Ellipsoid(r0=[2.0, 1.0, 1.0])
    ev = fwd([-4, 0, 0], [1, 0, 0], ell)
    assert ev.f[0] == pytest.approx(2.0, abs=1e-7)


def test_degenerate_direction():
    ev = forward_local(np.array([[-2.0, 0, 0]]), np.zeros((1, 3)), np.ones(3))
    assert ev.degenerate[0] and not ev.valid[0] and ev.f[0] == np.inf
    assert np.isfinite(ev.i[0]) and np.isfinite(ev.s_ind[0])
    gp, gv, gr = ellipsoid_backward(ev, np.ones(1), np.ones(1), np.ones(1))
    assert np.all(np.isfinite(gp)) and np.all(np.isfinite(gv)) and np.all(np.isfinite(gr))


def test_indicators_are_exact():
    rng = np.random.default_rng(0)
    p, v = rng.normal(size=(100, 3)) * 2, rng.normal(size=(100, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ev = forward_local(p, v, np.array([1.0, 2.0, 0.5]))
    assert np.array_equal(ev.i, ev.t0 - ev.t1)
    assert np.array_equal(ev.valid, np.isfinite(ev.f))


def test_sign_and_intersection_correctness(rng):
    n = 10_000
    r = rng.uniform(0.3, 2.0, 3)
    p = rng.normal(size=(n, 3)) * 1.5
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    ev = forward_local(p, v, r)
    contain = np.sum((p / r) ** 2, axis=1) < 1
    assert np.array_equal(ev.s_ind < 0, contain)
    # discriminant of |(p + t v) / r|^2 = 1
    a = np.sum((v / r) ** 2, axis=1)
    b = 2 * np.sum(p * v / r**2, axis=1)
    c = np.sum((p / r) ** 2, axis=1) - 1
    disc = b * b - 4 * a * c
    clear = np.abs(disc) > 1e-9
    assert np.array_equal((ev.i >= 0)[clear], (disc >= 0)[clear])


def test_matches_root_oracle(rng):
    for _ in range(30):
        r = rng.uniform(0.4, 2.0, 3)
        p, v = intersecting_rays(rng, 1, r)
        ev = forward_local(p, v, r)
        ref = quadric_root_oracle(p[0], v[0], r)
        assert abs(ev.f[0] - ref) <= 1e-6 * (1 + abs(ref))


def test_batch_oracle_agrees_with_scalar_oracle(rng):
    r = np.array([1.0, 0.5, 2.0])
    p, v = intersecting_rays(rng, 20, r)
    batch = quadric_root_oracle_batch(p, v, r)
    single = np.array([quadric_root_oracle(a, b, r) for a, b in zip(p, v)])
    assert np.allclose(batch, single, atol=1e-9)


def test_ray_translation_property(rng):
    r = np.array([1.2, 0.7, 0.9])
    p, v = intersecting_rays(rng, 200, r, inside_fraction=0.0)
    f0 = forward_local(p, v, r).f
    t = 0.3 * f0
    f1 = forward_local(p + t[:, None] * v, v, r).f
    assert np.abs(f1 - (f0 - t)).max() <= 1e-9


def test_rigid_invariance(rng):
    for _ in range(100):
        ell = random_ellipsoid(rng)
        p, v = rng.normal(size=(5, 3)) * 2, rng.normal(size=(5, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        ev = ellipsoid_forward(p, v, ell)
        G, g = random_rotation(rng), rng.normal(size=3)
        moved = ell.copy()
        moved.R0, moved.c0 = G @ ell.R0, G @ ell.c0 + g
        ev2 = ellipsoid_forward(p @ G.T + g, v @ G.T, moved)
        for a, b in ((ev.i, ev2.i), (ev.s_ind, ev2.s_ind)):
            assert np.abs(a - b).max() <= 1e-9 * max(1.0, np.abs(a).max())
        fin = np.isfinite(ev.f)
        assert np.array_equal(fin, np.isfinite(ev2.f))
        assert np.abs(ev.f[fin] - ev2.f[fin]).max(initial=0) <= 1e-9


def test_backward_zero_upstream():
    ev = fwd([-2, 0.3, 0.1], [1, 0, 0])
    z = np.zeros(1)
    for g in ellipsoid_backward(ev, z, z, z):
        assert np.array_equal(g, np.zeros((1, 3)))


def test_backward_axis_example():
    ev = fwd([-2, 0, 0], [1, 0, 0])
    gp, _, _ = ellipsoid_backward(ev, np.zeros(1), np.zeros(1), np.ones(1))
    assert np.allclose(gp, [[-1, 0, 0]], atol=1e-8)


def _local_objective(r, coeffs, eps=DEFAULT_EPS):
    a, b, c = coeffs

    def fun(p, v, rr):
        ev = forward_local(p[None], v[None], rr, eps)
        return a * ev.i[0] + b * ev.s_ind[0] + c * ev.f[0]

    return fun


def test_backward_finite_differences(rng):
    checked = 0
    while checked < 300:
        r = rng.uniform(0.4, 1.8, 3)
        p, v = intersecting_rays(rng, 1, r) if rng.uniform() < 0.7 else (
            rng.normal(size=(1, 3)) * 2, rng.normal(size=(1, 3)))
        v = v / np.linalg.norm(v)
        ev = forward_local(p, v, r)
        if not ev.valid[0] or abs(ev.i[0]) < 1e-3 or abs(ev.s_ind[0]) < 1e-3:
            continue
        coeffs = rng.normal(size=3)
        fun = _local_objective(r, coeffs)
        gp, gv, gr = ellipsoid_backward(ev, *[np.array([c]) for c in coeffs])
        num_p = central_diff(lambda x: fun(x, v[0], r), p[0])
        num_v = central_diff(lambda x: fun(p[0], x, r), v[0])
        num_r = central_diff(lambda x: fun(p[0], v[0], x), r)
        for a, n in ((gp[0], num_p), (gv[0], num_v), (gr[0], num_r)):
            assert np.allclose(a, n, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(n).max()))
        checked += 1


def test_eikonal_identity_analytic(rng):
    r = np.array([1.5, 0.6, 1.0])
    p, v = intersecting_rays(rng, 500, r)
    ev = forward_local(p, v, r)
    gp, _, _ = ellipsoid_backward(ev, np.zeros(500), np.zeros(500), np.ones(500))
    assert np.abs(np.sum(v * gp, axis=1) + 1).max() <= 1e-9


def test_chain_to_world_identity_pose():
    ell = Ellipsoid.sphere([0, 0, 0], 1.0)
    p, v = np.array([[-2.0, 0.2, 0.1]]), np.array([[1.0, 0, 0]])
    ev = ellipsoid_forward(p, v, ell)
    gp, gv, gr = ellipsoid_backward(ev, np.ones(1), np.ones(1), np.ones(1))
    wg = chain_to_world(p, v, gp, gv, gr, ell)
    assert np.allclose(wg.p, gp) and np.allclose(wg.v, gv)
    zero = chain_to_world(p, v, np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), ell)
    for g in (zero.p, zero.v, zero.R, zero.c, zero.log_radii, zero.xi):
        assert not np.any(g)


def test_chain_to_world_finite_differences(rng):
    checked = 0
    while checked < 60:
        ell = random_ellipsoid(rng)
        R, c = ell.pose()
        pl, vl = intersecting_rays(rng, 1, ell.radii)
        p, v = pl @ R.T + c, vl @ R.T
        coeffs = rng.normal(size=3)
        ev = ellipsoid_forward(p, v, ell)
        if not ev.valid[0] or abs(ev.i[0]) < 1e-3 or abs(ev.s_ind[0]) < 1e-3:
            continue

        def loss(pp=p[0], vv=v[0], xi=ell.xi, s=ell.s):
            e = Ellipsoid(ell.R0, ell.c0, ell.r0, xi, s)
            out = ellipsoid_forward(pp[None], vv[None], e)
            return coeffs[0] * out.i[0] + coeffs[1] * out.s_ind[0] + coeffs[2] * out.f[0]

        gp, gv, gr = ellipsoid_backward(ev, *[np.array([k]) for k in coeffs])
        wg = chain_to_world(p, v, gp, gv, gr, ell)
        pairs = [
            (wg.p[0], central_diff(lambda x: loss(pp=x), p[0])),
            (wg.v[0], central_diff(lambda x: loss(vv=x), v[0])),
            (wg.xi, central_diff(lambda x: loss(xi=x), ell.xi)),
            (wg.log_radii, central_diff(lambda x: loss(s=x), ell.s)),
        ]
        for a, n in pairs:
            assert np.allclose(a, n, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(n).max()))
        checked += 1
