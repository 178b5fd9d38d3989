import numpy as np
import pytest

from sssplat.scene import Aabb, GaussianCloud, PointLight, Scene, logit
from sssplat.validation import normalize
from sssplat.visibility import (EmptySceneError, build_bvh,
                                trace_transmittance,
                                trace_transmittance_batch,
                                visibility_targets)


def make_cloud(positions, scales=0.1, opacity=0.8):
    positions = np.atleast_2d(np.asarray(positions, float))
    n = len(positions)
    cloud = GaussianCloud.empty(n)
    cloud.positions[:] = positions
    cloud.rotations[:, 0] = 1.0
    cloud.log_scales[:] = np.log(np.broadcast_to(scales, (n, 3)))
    cloud.opacity_logits[:] = logit(np.broadcast_to(opacity, n))
    cloud.normals[:, 2] = 1.0
    return cloud


def make_scene(positions, scales=0.1, opacity=0.8, half=5.0):
    cloud = make_cloud(positions, scales, opacity)
    return Scene(cloud, Aabb(-half * np.ones(3), half * np.ones(3)))


def random_scene(rng, n=60):
    cloud = GaussianCloud.empty(n)
    cloud.positions[:] = rng.uniform(-1, 1, (n, 3))
    cloud.rotations[:] = normalize(rng.normal(0, 1, (n, 4)))
    cloud.log_scales[:] = rng.normal(np.log(0.08), 0.4, (n, 3))
    cloud.opacity_logits[:] = logit(rng.uniform(0.1, 0.95, n))
    cloud.normals[:] = normalize(rng.normal(0, 1, (n, 3)))
    return Scene(cloud, Aabb(-5 * np.ones(3), 5 * np.ones(3)))


def march_transmittance(scene, origin, direction, exclude=-1, t_max=np.inf):
    """Dense ray-marching oracle: per-Gaussian peak alpha from samples at
    sigma_min/8 steps, same box-candidacy rule as the tracer."""
    cloud = scene.cloud
    cov3 = cloud.covariances()
    prec = np.linalg.inv(cov3)
    op = cloud.opacities()
    extent = 3.0 * np.sqrt(np.einsum("nii->ni", cov3))
    lo = cloud.positions - extent
    hi = cloud.positions + extent
    trans = 1.0
    for i in range(len(cloud)):
        if i == exclude:
            continue
        # slab test
        t0, t1 = 0.0, min(t_max, 1e9)
        ok = True
        for a in range(3):
            d = direction[a]
            if abs(d) < 1e-16:
                if origin[a] < lo[i, a] or origin[a] > hi[i, a]:
                    ok = False
                    break
                continue
            ta = (lo[i, a] - origin[a]) / d
            tb = (hi[i, a] - origin[a]) / d
            ta, tb = min(ta, tb), max(ta, tb)
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                ok = False
                break
        if not ok:
            continue
        sigma_min = np.sqrt(np.linalg.eigvalsh(cov3[i])[0])
        step = sigma_min / 8.0
        ts = np.arange(max(t0, 1e-9), t1 + step, step)
        pts = origin + ts[:, None] * direction
        diff = pts - cloud.positions[i]
        q = np.einsum("nj,jk,nk->n", diff, prec[i], diff)
        trans *= 1.0 - op[i] * np.exp(-0.5 * q.min())
    return trans


class TestBvhBuild:
    def test_empty_scene_raises(self):
        cloud = GaussianCloud.empty(0)
        scene = Scene(cloud, Aabb(-np.ones(3), np.ones(3)))
        with pytest.raises(EmptySceneError):
            build_bvh(scene)

    def test_single_gaussian_single_leaf(self):
        bvh = build_bvh(make_scene([[0, 0, 0]]))
        assert bvh.node_count[0] == 1
        assert bvh.node_left[0] == -1

    def test_two_distant_gaussians_disjoint_leaves(self):
        bvh = build_bvh(make_scene([[-2, 0, 0], [2, 0, 0]]), leaf_size=1)
        left, right = bvh.node_left[0], bvh.node_right[0]
        assert left != -1 and right != -1
        # child boxes are disjoint along x and contained in the root
        lo_l, hi_l = bvh.node_lo[left], bvh.node_hi[left]
        lo_r, hi_r = bvh.node_lo[right], bvh.node_hi[right]
        assert hi_l[0] < lo_r[0] or hi_r[0] < lo_l[0]
        assert np.all(bvh.node_lo[0] <= np.minimum(lo_l, lo_r))
        assert np.all(bvh.node_hi[0] >= np.maximum(hi_l, hi_r))

    def test_every_gaussian_in_exactly_one_leaf(self, rng):
        scene = random_scene(rng, 200)
        bvh = build_bvh(scene)
        leaves = []
        for ni in range(len(bvh.node_lo)):
            if bvh.node_count[ni] > 0:
                leaves.extend(bvh.prim_order[bvh.node_start[ni]:
                                             bvh.node_start[ni]
                                             + bvh.node_count[ni]])
        assert sorted(leaves) == list(range(200))

    def test_bvh_equals_brute_force_traversal(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            scene = random_scene(rng, 120)
            bvh = build_bvh(scene)
            origins = rng.uniform(-2, 2, (40, 3))
            dirs = normalize(rng.normal(0, 1, (40, 3)))
            fast = trace_transmittance_batch(bvh, origins, dirs)
            brute = trace_transmittance_batch(bvh, origins, dirs,
                                              brute_force=True)
            assert np.array_equal(fast, brute)


class TestTraceTransmittance:
    def test_empty_path_gives_one(self):
        bvh = build_bvh(make_scene([[0, 0, 0]]))
        t = trace_transmittance(bvh, np.array([5.0, 5, 5]),
                                np.array([0.0, 0, 1.0]))
        assert t == 1.0

    def test_single_blocker_through_center(self):
        bvh = build_bvh(make_scene([[0, 0, 0]], opacity=0.9))
        t = trace_transmittance(bvh, np.array([0.0, -3.0, 0.0]),
                                np.array([0.0, 1.0, 0.0]))
        assert t == pytest.approx(0.1, rel=1e-9)

    def test_exclude_source(self):
        bvh = build_bvh(make_scene([[0, 0, 0]], opacity=0.9))
        t = trace_transmittance(bvh, np.zeros(3), np.array([0.0, 0, 1.0]),
                                exclude=0)
        assert t == 1.0

    def test_monotone_in_blocker_opacity(self):
        for op1, op2 in ((0.3, 0.6), (0.6, 0.9)):
            b1 = build_bvh(make_scene([[0, 0, 0]], opacity=op1))
            b2 = build_bvh(make_scene([[0, 0, 0]], opacity=op2))
            o = np.array([0.0, -3.0, 0.0])
            d = np.array([0.0, 1.0, 0.0])
            assert trace_transmittance(b2, o, d) < trace_transmittance(b1, o, d)

    def test_matches_ray_march_oracle(self):
        for seed in range(6):
            rng = np.random.default_rng(seed)
            scene = random_scene(rng, 40)
            bvh = build_bvh(scene)
            for _ in range(5):
                o = rng.uniform(-2, 2, 3)
                d = normalize(rng.normal(0, 1, 3))
                fast = trace_transmittance(bvh, o, d)
                slow = march_transmittance(scene, o, d)
                assert abs(fast - slow) <= 0.02

    def test_segment_bound_respected(self):
        # blocker beyond the light does not block
        scene = make_scene([[0, 0, 0], [0, 5.0, 0]], opacity=0.9)
        bvh = build_bvh(scene)
        t = trace_transmittance(bvh, np.array([0.0, -2.0, 0.0]),
                                np.array([0.0, 1.0, 0.0]), t_max=3.0)
        t_unbounded = trace_transmittance(bvh, np.array([0.0, -2.0, 0.0]),
                                          np.array([0.0, 1.0, 0.0]))
        assert t > t_unbounded


class TestVisibilityTargets:
    def test_single_gaussian_fully_visible(self):
        scene = make_scene([[0, 0, 0]])
        bvh = build_bvh(scene)
        light = PointLight(np.array([0.0, 0, 3.0]))
        dirs, values = visibility_targets(bvh, scene, light, samples=8)
        assert values.shape == (1, 8)
        assert np.all(values == 1.0)
        assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0)

    def test_blocked_toward_light(self):
        # opaque slab directly between the Gaussian and the light
        scene = make_scene([[0, 0, 0], [0, 0, 1.0]], scales=0.15,
                           opacity=0.95)
        bvh = build_bvh(scene)
        light = PointLight(np.array([0.0, 0, 4.0]))
        dirs, values = visibility_targets(bvh, scene, light, samples=4)
        assert values[0, 0] < 0.1  # first direction is toward the light
        march = march_transmittance(scene, np.zeros(3),
                                    np.array([0.0, 0, 1.0]), exclude=0,
                                    t_max=4.0)
        assert values[0, 0] == pytest.approx(march, abs=0.02)

    def test_targets_in_unit_interval(self, rng):
        scene = random_scene(rng, 50)
        bvh = build_bvh(scene)
        light = PointLight(np.array([0.0, 0, 3.0]))
        _, values = visibility_targets(bvh, scene, light, samples=16,
                                       rng=rng)
        assert np.all((values >= 0.0) & (values <= 1.0))
