import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headrecon import tracer, tape as T
from headrecon.errors import ValidationError


def sphere(r=1.0, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center)
    return lambda x: np.linalg.norm(np.atleast_2d(x) - c, axis=1) - r


def test_rays_validation():
    with pytest.raises(ValidationError):
        tracer.Rays([[0, 0, 0]], [[0, 0, 2.0]], [0.1], [5.0])  # not unit
    with pytest.raises(ValidationError):
        tracer.Rays([[0, 0, 0]], [[0, 0, 1.0]], [5.0], [1.0])  # near >= far
    with pytest.raises(ValidationError):
        tracer.Rays([[0, 0, 0]], [[0, 0, 1.0]], [-0.5], [1.0])


def test_rays_at():
    r = tracer.Rays([[0, 0, -3.0]], [[0, 0, 1.0]], [0.0], [6.0])
    assert np.allclose(r.at(np.array([2.0])), [[0, 0, -1.0]])


def test_sphere_hit_depth_and_first_surface():
    f = sphere(0.8)
    r = tracer.Rays([[0, 0, -3.0]], [[0, 0, 1.0]], [0.1], [6.0])
    hits = tracer.trace_rays(f, r, n_coarse=75, n_fine=25, fine_tol=1e-5)
    assert hits.converged[0]
    # first (front) intersection, not the back face at depth 3.8
    assert abs(hits.depth[0] - 2.2) < 1e-4
    assert abs(f(hits.x)[0]) <= 1e-5


def test_off_center_sphere_and_oblique_ray():
    f = sphere(0.5, center=(0.2, -0.1, 0.3))
    origin = np.array([2.0, 1.5, -2.5])
    target = np.array([0.2, -0.1, 0.3])
    v = (target - origin) / np.linalg.norm(target - origin)
    hits = tracer.trace_ray(f, origin, v, 0.1, 8.0, fine_tol=1e-6)
    assert hits.converged[0]
    # analytic: ray through the center hits at distance |origin-center| - r
    assert abs(hits.depth[0] - (np.linalg.norm(origin - target) - 0.5)) < 1e-4


def test_miss_reports_min_sdf_location():
    f = sphere(0.5)
    # closest approach at distance 1.0 from center -> min f ~ 0.5
    r = tracer.Rays([[1.0, 0, -3.0]], [[0, 0, 1.0]], [0.1], [6.0])
    hits = tracer.trace_rays(f, r)
    assert not hits.converged[0]
    assert np.isnan(hits.depth[0]) and np.all(np.isnan(hits.x[0]))
    assert abs(hits.min_sdf[0] - 0.5) < 5e-3
    assert abs(np.linalg.norm(hits.min_pt[0] - [1.0, 0, 0])) < 0.1


def test_ray_starting_inside_is_a_miss():
    # no +→− flip when f is negative from the start
    f = sphere(1.0)
    r = tracer.Rays([[0, 0, 0]], [[0, 0, 1.0]], [1e-6], [0.5])
    hits = tracer.trace_rays(f, r)
    assert not hits.converged[0]
    assert hits.min_sdf[0] < 0


def test_mixed_batch_matches_single_rays():
    f = sphere(0.7)
    origins = np.array([[0, 0, -3.0], [2.0, 0, -3.0], [0.3, 0.1, -2.0]])
    dirs = np.array([[0, 0, 1.0], [0, 0, 1.0], [0, 0, 1.0]])
    batch = tracer.trace_rays(f, tracer.Rays(origins, dirs, [0.1] * 3, [6.0] * 3))
    for i in range(3):
        single = tracer.trace_ray(f, origins[i], dirs[i], 0.1, 6.0)
        assert batch.converged[i] == single.converged[0]
        if single.converged[0]:
            assert abs(batch.depth[i] - single.depth[0]) < 1e-12


def test_trace_requires_two_samples():
    with pytest.raises(ValidationError):
        tracer.trace_rays(sphere(), tracer.Rays([[0, 0, -2.0]], [[0, 0, 1.0]], [0.1], [4.0]), n_coarse=1)


def test_counting_field():
    cf = tracer.CountingField(sphere())
    cf(np.zeros((5, 3)))
    cf(np.zeros((2, 3)))
    assert cf.rows == 7 and cf.calls == 2


# ---------------------------------------------------------------------------
# voxel cache


def test_cache_far_field_hits_near_field_never_cached():
    f = tracer.CountingField(sphere(0.5))
    cache = tracer.VoxelCache([-2, -2, -2], [2, 2, 2], resolution=16, eps=0.1, p_force=0.0)
    far = np.array([[1.9, 1.9, 1.9]])  # f ~ 2.79
    near = np.array([[0.55, 0.0, 0.0]])  # f = 0.05 < eps

    cache.query(f, far)
    cache.query(f, far)
    assert f.rows == 1  # second query served from the voxel

    cache.query(f, near)
    cache.query(f, near)
    assert f.rows == 3  # near-surface values are evaluated every time


def test_cache_forced_reevaluation_and_outside_box():
    f = tracer.CountingField(sphere(0.5))
    cache = tracer.VoxelCache([-1, -1, -1], [1, 1, 1], resolution=8, eps=0.1, p_force=1.0)
    pt = np.array([[0.9, 0.9, 0.9]])
    cache.query(f, pt)
    cache.query(f, pt)
    assert f.rows == 2  # p_force=1 disables serving from the cache
    outside = np.array([[5.0, 0.0, 0.0]])
    out = cache.query(f, outside)
    assert abs(out[0] - 4.5) < 1e-12
    # outside-box values are not stored
    assert cache.valid.sum() <= 2


def test_cache_invalidate_forces_fresh_values():
    calls = {"n": 0}

    def drifting(x):
        calls["n"] += 1
        return sphere(0.5 + 0.1 * calls["n"])(x)

    cache = tracer.VoxelCache([-2, -2, -2], [2, 2, 2], resolution=8, eps=0.05, p_force=0.0)
    pt = np.array([[1.5, 0.0, 0.0]])
    v1 = cache.query(drifting, pt)[0]
    v2 = cache.query(drifting, pt)[0]
    assert v1 == v2  # stale but consistent within a step
    cache.invalidate()
    v3 = cache.query(drifting, pt)[0]
    assert v3 != v1


def test_cached_trace_with_full_forcing_is_bitwise_exact():
    f = sphere(0.65)
    rng = np.random.default_rng(0)
    n = 64
    origins = np.column_stack([rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n), np.full(n, -3.0)])
    dirs = np.tile([0.0, 0.0, 1.0], (n, 1))
    rays = tracer.Rays(origins, dirs, np.full(n, 0.1), np.full(n, 6.0))

    plain = tracer.trace_rays(f, rays)
    cache = tracer.VoxelCache([-2, -2, -2], [2, 2, 2], resolution=32, p_force=1.0)
    cached = tracer.trace_rays(cache.bind(f), rays)
    assert np.array_equal(plain.converged, cached.converged)
    assert np.array_equal(plain.depth[plain.converged], cached.depth[cached.converged])
    assert np.array_equal(plain.min_sdf, cached.min_sdf)


def test_cached_trace_depth_error_bounded():
    # with caching active the traced depth may move, but converged hits still
    # satisfy |f| <= tol at the reported point
    f = sphere(0.65)
    rng = np.random.default_rng(1)
    n = 128
    origins = np.column_stack([rng.uniform(-0.4, 0.4, n), rng.uniform(-0.4, 0.4, n), np.full(n, -3.0)])
    rays = tracer.Rays(origins, np.tile([0.0, 0.0, 1.0], (n, 1)), np.full(n, 0.1), np.full(n, 6.0))
    cache = tracer.VoxelCache([-2, -2, -2], [2, 2, 2], resolution=48, p_force=0.2,
                              rng=np.random.default_rng(2))
    hits = tracer.trace_rays(cache.bind(f), rays, fine_tol=1e-3)
    conv = hits.converged
    assert conv.sum() > 100
    assert np.all(np.abs(f(hits.x[conv])) <= 2e-3)


# ---------------------------------------------------------------------------
# background-drop schedule


def test_keep_ratio_schedule_exact():
    assert tracer.background_keep_ratio(0) == 1.0
    assert tracer.background_keep_ratio(249) == 1.0
    assert abs(tracer.background_keep_ratio(250) - 0.88) < 1e-15
    assert abs(tracer.background_keep_ratio(999) - 0.88**3) < 1e-15
    assert abs(tracer.background_keep_ratio(1000) - 0.88**4) < 1e-15
    # horizon: no further decay
    assert abs(tracer.background_keep_ratio(5000) - 0.88**4) < 1e-15


def test_pixel_sampler_drops_only_background_and_nests():
    rng = np.random.default_rng(3)
    fg = np.zeros(1000, dtype=bool)
    fg[:300] = True
    s = tracer.PixelSampler(fg, rng)
    k0 = s.kept_pixels(0)
    k1000 = s.kept_pixels(1000)
    assert set(np.flatnonzero(fg)) <= set(k1000)
    assert set(k1000) <= set(k0)
    assert len(k0) == 1000
    assert len(k1000) == 300 + round(700 * 0.88**4)


def test_pixel_sampler_batches():
    rng = np.random.default_rng(4)
    fg = np.zeros(50, dtype=bool)
    fg[::5] = True
    s = tracer.PixelSampler(fg, rng)
    b = s.batch(0, 16, np.random.default_rng(5))
    assert len(b) == 16 and len(set(b.tolist())) == 16
    full = s.batch(0, 500, np.random.default_rng(6))
    assert len(full) == 50
    with pytest.raises(ValidationError):
        tracer.PixelSampler(np.zeros(0, dtype=bool), rng)


# ---------------------------------------------------------------------------
# differentiable intersection


def test_intersection_value_formula():
    g = np.array([[0.0, 0.0, -1.0]])
    v = np.array([[0.0, 0.0, 1.0]])
    x0 = np.array([[0.0, 0.0, -1.01]])
    f_at = np.array([[0.02]])
    xs = T.value_of(tracer.differentiable_intersection(lambda p: f_at, lambda p: g, x0, v))
    # x_s = x0 - v * f/(g.v) = x0 + v*0.02
    assert np.allclose(xs, [[0.0, 0.0, -0.99]], atol=1e-15)


def test_intersection_gradient_reaches_parameters():
    # f(x; c) = ||x|| - c on a taped radius parameter
    tp = T.Tape()
    c = tp.var(np.array([[1.0]]))
    x0 = np.array([[0.0, 0.0, -1.0]])
    v = np.array([[0.0, 0.0, 1.0]])
    g = np.array([[0.0, 0.0, -1.0]])

    def eval_f(p):
        norms = np.linalg.norm(p, axis=1, keepdims=True)
        return T.sub(norms, c)

    xs = tracer.differentiable_intersection(eval_f, lambda p: g, x0, v)
    tp.backward(T.ssum(T.cols(xs, 2, 3)))
    # x_s_z = x0_z - f/(g.v) = x0_z + (||x0|| - c), d/dc = -1
    assert abs(c.grad[0, 0] - (-1.0)) < 1e-12


def test_intersection_grazing_raises_and_mask_detects():
    x0 = np.array([[0.0, 0.0, -1.0]])
    v = np.array([[0.0, 0.0, 1.0]])
    g_tangent = np.array([[1.0, 0.0, 0.0]])  # perpendicular to v
    with pytest.raises(tracer.GrazingRayError):
        tracer.differentiable_intersection(lambda p: np.zeros((1, 1)), lambda p: g_tangent, x0, v)
    mask = tracer.grazing_mask(np.vstack([g_tangent, -v]), np.vstack([v, v]))
    assert mask.tolist() == [True, False]


@settings(max_examples=20, deadline=None)
@given(
    r=st.floats(0.3, 1.2),
    ox=st.floats(-0.2, 0.2),
    oy=st.floats(-0.2, 0.2),
)
def test_sphere_depth_property(r, ox, oy):
    f = sphere(r)
    origin = np.array([ox, oy, -3.0])
    hits = tracer.trace_ray(f, origin, np.array([0.0, 0.0, 1.0]), 0.1, 6.0, fine_tol=1e-7)
    b = ox**2 + oy**2
    if b < (r - 0.05) ** 2:
        expected = 3.0 - np.sqrt(r**2 - b)
        assert hits.converged[0]
        assert abs(hits.depth[0] - expected) < 1e-4
    elif b > (r + 0.05) ** 2:
        assert not hits.converged[0]
