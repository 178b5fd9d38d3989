import numpy as np
import pytest

from sssplat.projection import (RasterConfig, activate_geometry,
                                activate_geometry_backward, project,
                                project_backward)
from sssplat.scene import Camera


@pytest.fixture
def camera():
    return Camera.look_at(eye=(0.0, -2.0, 0.0), target=(0, 0, 0),
                          resolution=(64, 64), fov_deg=50.0)


def project_single(position, scale, camera, cfg=None):
    cfg = cfg or RasterConfig()
    pos = np.asarray(position, float)[None]
    cov3, _ = activate_geometry(pos, np.array([[1.0, 0, 0, 0]]),
                                np.log([np.asarray(scale, float)]))
    return project(pos, cov3, camera, cfg)


class TestProject:
    def test_point_on_axis_hits_principal_point(self, camera):
        sp = project_single((0, 0, 0), (1e-4, 1e-4, 1e-4), camera)
        assert len(sp) == 1
        assert np.allclose(sp.mean2d[0], camera.principal, atol=1e-9)

    def test_unit_sphere_orthographic_limit(self, camera):
        # on the optical axis the perspective Jacobian is exactly diag(f/z)
        cfg = RasterConfig()
        sp = project_single((0, 0, 0), (0.1, 0.1, 0.1), camera, cfg)
        z = 2.0
        f = camera.focal[0]
        expected = (f / z * 0.1) ** 2 + cfg.lowpass
        cov2d = np.linalg.inv(
            np.array([[sp.conic[0, 0], sp.conic[0, 1]],
                      [sp.conic[0, 1], sp.conic[0, 2]]]))
        assert np.allclose(np.diag(cov2d), expected, rtol=1e-9)
        assert cov2d[0, 1] == pytest.approx(0.0, abs=1e-9)

    def test_behind_camera_culled(self, camera):
        sp = project_single((0, -4.0, 0), (0.1, 0.1, 0.1), camera)
        assert len(sp) == 0

    def test_off_screen_culled(self, camera):
        sp = project_single((50.0, 0.0, 0.0), (0.01,) * 3, camera)
        assert len(sp) == 0

    def test_depth_is_view_z(self, camera):
        sp = project_single((0, 0, 0), (0.1,) * 3, camera)
        assert sp.depth[0] == pytest.approx(2.0)

    def test_deterministic(self, camera, rng):
        pos = rng.normal(0, 0.3, (20, 3))
        cov3, _ = activate_geometry(pos, rng.normal(0, 1, (20, 4)),
                                    rng.normal(-2, 0.3, (20, 3)))
        a = project(pos, cov3, camera, RasterConfig())
        b = project(pos, cov3, camera, RasterConfig())
        assert np.array_equal(a.mean2d, b.mean2d)
        assert np.array_equal(a.conic, b.conic)


class TestProjectBackward:
    def test_finite_differences(self, camera, rng):
        n = 6
        pos = rng.normal(0, 0.3, (n, 3))
        rot = rng.normal(0, 1, (n, 4))
        logs = rng.normal(np.log(0.15), 0.3, (n, 3))
        cfg = RasterConfig()
        w_m = rng.normal(0, 1, (n, 2))
        w_c = rng.normal(0, 1, (n, 3))
        w_d = rng.normal(0, 1, n)

        def loss():
            cov3, _ = activate_geometry(pos, rot, logs)
            sp = project(pos, cov3, camera, cfg)
            return float(np.sum(sp.mean2d * w_m[sp.index])
                         + np.sum(sp.conic * w_c[sp.index])
                         + np.sum(sp.depth * w_d[sp.index]))

        cov3, gc = activate_geometry(pos, rot, logs)
        sp = project(pos, cov3, camera, cfg)
        d_pos, d_cov3 = project_backward(sp, w_m[sp.index], w_c[sp.index],
                                         w_d[sp.index])
        d_rot, d_logs = activate_geometry_backward(gc, d_cov3)
        h = 1e-6
        for arr, grad in ((pos, d_pos), (rot, d_rot), (logs, d_logs)):
            flat = arr.ravel()
            for i in rng.choice(flat.size, 8, replace=False):
                old = flat[i]
                flat[i] = old + h
                lp = loss()
                flat[i] = old - h
                lm = loss()
                flat[i] = old
                fd = (lp - lm) / (2 * h)
                an = grad.ravel()[i]
                assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an), 1e-3)

    def test_culled_receive_zero_gradient(self, camera):
        pos = np.array([[0.0, 0, 0], [0.0, -4.0, 0.0]])  # second behind
        cov3, gc = activate_geometry(pos, np.array([[1.0, 0, 0, 0]] * 2),
                                     np.log(np.full((2, 3), 0.1)))
        sp = project(pos, cov3, camera, RasterConfig())
        assert list(sp.index) == [0]
        d_pos, d_cov3 = project_backward(
            sp, np.ones((1, 2)), np.ones((1, 3)), np.ones(1))
        assert np.all(d_pos[1] == 0) and np.all(d_cov3[1] == 0)
