import numpy as np
import pytest
from skimage.metrics import structural_similarity

from sssplat import losses as L
from sssplat.scene import Camera


def fd_check(loss_fn, backward, arr, rng, probes=8, h=1e-6, tol=2e-4):
    value, cache = loss_fn()
    grad = backward(cache)
    flat = arr.reshape(-1)
    g = np.asarray(grad).reshape(-1)
    for i in rng.choice(flat.size, probes, replace=False):
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()[0]
        flat[i] = old - h
        lm = loss_fn()[0]
        flat[i] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g[i]) <= tol * max(abs(fd), abs(g[i]), 1e-3)


class TestSsim:
    def test_matches_reference_implementation(self, rng):
        x = rng.uniform(0, 1, (24, 20, 3))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        mine = L.ssim(x, y)[0]
        ref = structural_similarity(x, y, channel_axis=2,
                                    gaussian_weights=True, sigma=1.5,
                                    win_size=11, use_sample_covariance=False,
                                    data_range=1.0)
        assert mine == pytest.approx(ref, abs=1e-12)

    def test_identical_images(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        assert L.ssim(x, x)[0] == pytest.approx(1.0)

    def test_negation_near_minimum(self, rng):
        x = rng.uniform(0.1, 0.9, (24, 24))
        assert L.ssim(x, 1.0 - x)[0] < -0.5

    def test_backward_directional(self, rng):
        x = rng.uniform(0, 1, (20, 18, 3))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        _, cache = L.ssim(x, y)
        g = L.ssim_backward(cache)
        for _ in range(4):
            u = rng.normal(0, 1, x.shape)
            h = 1e-5
            fd = (L.ssim(x + h * u, y)[0] - L.ssim(x - h * u, y)[0]) / (2 * h)
            assert fd == pytest.approx(float((g * u).sum()), rel=1e-4)

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError):
            L.ssim(np.zeros((16, 16)), np.zeros((16, 18)))


class TestLossImage:
    def test_zero_at_equality(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        assert L.loss_image(x, x, 0.2)[0] == pytest.approx(0.0, abs=1e-12)

    def test_pure_l1_with_offset(self, rng):
        x = rng.uniform(0.2, 0.8, (16, 16, 3))
        assert L.loss_image(x + 0.1, x, 0.0)[0] == pytest.approx(0.1)

    def test_checkerboard_near_dssim_bound(self):
        base = np.indices((24, 24)).sum(axis=0) % 2
        img = np.repeat(base[..., None], 3, axis=2).astype(float)
        value, _ = L.loss_image(img, 1.0 - img, 1.0)
        assert value > 1.5  # 1 - SSIM, with SSIM driven strongly negative

    def test_backward(self, rng):
        x = rng.uniform(0, 1, (18, 16, 3))
        y = np.clip(x + rng.normal(0, 0.15, x.shape), 0, 1)
        fd_check(lambda: L.loss_image(x, y, 0.2),
                 L.loss_image_backward, x, rng)


class TestLossMask:
    def test_confident_correct_is_small(self):
        mask = np.ones((8, 8))
        value, _ = L.loss_mask(np.full((8, 8), 1 - 1e-6), mask)
        assert value == pytest.approx(0.0, abs=1e-5)

    def test_uniform_half(self):
        mask = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
        value, _ = L.loss_mask(np.full((8, 8), 0.5), mask)
        assert value == pytest.approx(np.log(2.0), rel=1e-9)

    def test_confident_wrong_is_huge(self):
        value, _ = L.loss_mask(np.full((4, 4), 1e-6), np.ones((4, 4)))
        assert value == pytest.approx(-np.log(1e-6), rel=1e-3)

    def test_backward(self, rng):
        op = rng.uniform(0.05, 0.95, (12, 12))
        mask = (rng.uniform(0, 1, (12, 12)) > 0.5).astype(float)
        fd_check(lambda: L.loss_mask(op, mask), L.loss_mask_backward, op, rng)


class TestLossNormal:
    CAM = Camera.look_at(eye=(0.0, -2.0, 0.0), target=(0, 0, 0),
                         resolution=(16, 16))

    def test_frontoparallel_plane_is_zero(self):
        zbar = np.full((16, 16), 2.0)
        forward = self.CAM.rotation[2]  # camera forward in world
        normals = np.tile(-forward, (16, 16, 1))
        valid = np.ones((16, 16), bool)
        value, _ = L.loss_normal(zbar, normals, valid, self.CAM)
        assert value == pytest.approx(0.0, abs=1e-20)

    def test_tilted_plane_mse_pattern(self):
        # plane tilted 45 degrees while predictions stay fronto-parallel:
        # the squared distance between unit normals is 2 - sqrt(2)
        fx, fy = self.CAM.focal
        cx, cy = self.CAM.principal
        us, vs = np.meshgrid(np.arange(16) + 0.5, np.arange(16) + 0.5)
        b = (vs - cy) / fy
        zbar = 2.0 / (1.0 - b)  # camera-space plane z = 2 + y
        forward = self.CAM.rotation[2]
        normals = np.tile(-forward, (16, 16, 1))
        valid = np.ones((16, 16), bool)
        value, _ = L.loss_normal(zbar, normals, valid, self.CAM)
        assert 3.0 * value == pytest.approx(2.0 - np.sqrt(2.0), rel=1e-6)

    def test_rotating_toward_true_normals_decreases_loss(self, rng):
        # synthetic sphere depth; blend predictions from wrong to true
        h = w = 24
        cam = Camera.look_at(eye=(0.0, -3.0, 0.0), target=(0, 0, 0),
                             resolution=(w, h))
        fx, fy = cam.focal
        cx, cy = cam.principal
        us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        dirs = np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)],
                        axis=-1)
        dirs_w = dirs @ cam.rotation
        # ray-sphere (radius 1 at origin)
        oc = cam.position
        bq = np.sum(dirs_w * oc, axis=-1)
        cq = oc @ oc - 1.0
        aq = np.sum(dirs_w * dirs_w, axis=-1)
        disc = bq * bq - aq * cq
        valid = disc > 0.05
        t = (-bq - np.sqrt(np.maximum(disc, 0))) / aq
        pts = oc + t[..., None] * dirs_w
        zbar = np.where(valid, t * dirs[..., 2], 0.0)  # view z of hit
        true_n = pts / np.linalg.norm(pts, axis=-1, keepdims=True)
        wrong = np.tile([0.0, 0.0, 1.0], (h, w, 1))
        losses = []
        for blend in (0.0, 0.5, 1.0):
            n = wrong * (1 - blend) + true_n * blend
            n /= np.linalg.norm(n, axis=-1, keepdims=True)
            losses.append(L.loss_normal(zbar, n, valid, cam)[0])
        assert losses[0] > losses[1] > losses[2]

    def test_backward(self, rng):
        zbar = 2.0 + 0.05 * rng.normal(0, 1, (14, 14))
        normals = rng.normal(0, 1, (14, 14, 3))
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        valid = np.ones((14, 14), bool)
        valid[0] = False
        fd_check(lambda: L.loss_normal(zbar, normals, valid, self.CAM),
                 lambda c: L.loss_normal_backward(c)[0], zbar, rng)
        fd_check(lambda: L.loss_normal(zbar, normals, valid, self.CAM),
                 lambda c: L.loss_normal_backward(c)[1], normals, rng)


class TestLossIncident:
    def test_matching_is_zero(self):
        assert L.loss_incident(np.ones((4, 3)), np.ones(4))[0] == 0.0

    def test_dark_prediction_is_one(self):
        assert L.loss_incident(np.zeros((4, 3)), np.ones(4))[0] == \
            pytest.approx(1.0)

    def test_clamp_semantics(self):
        assert L.loss_incident(np.full((4, 3), 2.0), np.ones(4))[0] == 0.0

    def test_backward(self, rng):
        inc = rng.uniform(0, 1.6, (10, 3))
        vis = rng.uniform(0, 1, 10)
        fd_check(lambda: L.loss_incident(inc, vis),
                 lambda c: L.loss_incident_backward(c)[0], inc, rng)


class TestLossSmooth:
    def test_constant_map_is_zero(self, rng):
        gt = rng.uniform(0, 1, (12, 12, 3))
        valid = np.ones((12, 12), bool)
        value, _ = L.loss_smooth(np.full((12, 12), 0.7), gt, valid)
        assert value == 0.0

    def test_edge_on_gt_edge_is_gated(self):
        attr = np.zeros((12, 12))
        attr[:, 6:] = 1.0
        gt = np.zeros((12, 12, 3))
        gt[:, 6:] = 8.0  # huge image edge -> gate ~ exp(-8)
        valid = np.ones((12, 12), bool)
        value, _ = L.loss_smooth(attr, gt, valid)
        assert value < 1e-4

    def test_edge_on_flat_gt_equals_mean_gradient(self):
        attr = np.zeros((12, 12))
        attr[:, 6:] = 1.0
        gt = np.full((12, 12, 3), 0.5)
        valid = np.ones((12, 12), bool)
        value, cache = L.loss_smooth(attr, gt, valid)
        dx = np.abs(np.diff(attr, axis=1)).sum()
        dy = np.abs(np.diff(attr, axis=0)).sum()
        count = attr[:, :-1].size + attr[:-1, :].size
        assert value == pytest.approx((dx + dy) / count, rel=1e-12)

    def test_backward(self, rng):
        attr = rng.uniform(0, 1, (12, 12, 3))
        gt = rng.uniform(0, 1, (12, 12, 3))
        valid = np.ones((12, 12), bool)
        fd_check(lambda: L.loss_smooth(attr, gt, valid),
                 L.loss_smooth_backward, attr, rng)


class TestEnhanceAndShVis:
    def test_enhance_backward(self, rng):
        pred = rng.uniform(0.05, 1.0, (10, 10, 3))
        gt = rng.uniform(0.05, 1.0, (10, 10, 3))
        fd_check(lambda: L.loss_enhance(pred, gt), L.loss_enhance_backward,
                 pred, rng)

    def test_sh_visibility_backward(self, rng):
        vals = rng.uniform(0, 1, (6, 8))
        targets = rng.uniform(0, 1, (6, 8))
        fd_check(lambda: L.loss_sh_visibility(vals, targets),
                 L.loss_sh_visibility_backward, vals, rng)


class TestMetrics:
    def test_psnr_cap_on_identical(self, rng):
        x = rng.uniform(0, 1, (8, 8))
        assert L.psnr(x, x) == 99.0

    def test_psnr_uniform_offset(self):
        assert L.psnr(np.zeros((8, 8)), np.full((8, 8), 0.1)) == \
            pytest.approx(20.0)

    def test_psnr_resolution_mismatch(self):
        with pytest.raises(ValueError):
            L.psnr(np.zeros((8, 8)), np.zeros((8, 9)))
