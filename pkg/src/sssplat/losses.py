"""Training losses with exact adjoints.

Image terms operate on (H, W, C) float arrays in linear radiance; every
loss returns (value, cache) and has a matching ``*_backward`` producing
cotangents for the differentiable inputs (ground truth and masks are
constants).
"""

from __future__ import annotations

import numpy as np

from .scene import Camera

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MASK_EPS = 1e-6


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


_SSIM_K = _gaussian_kernel()


def _corr_valid(img, k):
    """Separable 'valid' correlation along the two leading axes."""
    taps = len(k)
    out = None
    h = img.shape[0] - taps + 1
    for t in range(taps):
        part = k[t] * img[t:t + h]
        out = part if out is None else out + part
    img2 = out
    w = img2.shape[1] - taps + 1
    out = None
    for t in range(taps):
        part = k[t] * img2[:, t:t + w]
        out = part if out is None else out + part
    return out


def _corr_valid_adjoint(d_out, k, shape):
    """Adjoint of ``_corr_valid`` back to an image of ``shape``."""
    taps = len(k)
    h, w = shape[0], shape[1]
    mid = np.zeros((h, d_out.shape[1]) + d_out.shape[2:])
    for t in range(taps):
        mid[t:t + d_out.shape[0]] += k[t] * d_out
    d_img = np.zeros(shape)
    for t in range(taps):
        d_img[:, t:t + d_out.shape[1]] += k[t] * mid
    return d_img


def ssim(pred, gt):
    """Mean structural similarity over 11x11 Gaussian windows (valid region).

    Returns (value, cache); defined for images in [0, 1] with at least
    ``SSIM_WINDOW`` pixels per axis.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"resolution mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    k = _SSIM_K
    u1 = _corr_valid(x, k)
    u2 = _corr_valid(y, k)
    v1 = _corr_valid(x * x, k)
    v2 = _corr_valid(y * y, k)
    v12 = _corr_valid(x * y, k)
    sx2 = v1 - u1 * u1
    sy2 = v2 - u2 * u2
    sxy = v12 - u1 * u2
    a1 = 2.0 * u1 * u2 + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = u1 * u1 + u2 * u2 + SSIM_C1
    b2 = sx2 + sy2 + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    cache = {"x": x, "y": y, "u1": u1, "u2": u2, "a1": a1, "a2": a2,
             "b1": b1, "b2": b2, "s": s, "shape": x.shape}
    return float(s.mean()), cache


def ssim_backward(cache, d_value=1.0):
    """d mean-SSIM / d pred."""
    x, y = cache["x"], cache["y"]
    u1, u2 = cache["u1"], cache["u2"]
    a1, a2, b1, b2, s = cache["a1"], cache["a2"], cache["b1"], cache["b2"], cache["s"]
    k = _SSIM_K
    ds = np.full(s.shape, d_value / s.size)
    da1 = ds * a2 / (b1 * b2)
    da2 = ds * a1 / (b1 * b2)
    db1 = -ds * s / b1
    db2 = -ds * s / b2
    dsxy = 2.0 * da2
    dsx2 = db2
    du1 = da1 * 2.0 * u2 + db1 * 2.0 * u1 + dsxy * (-u2) + dsx2 * (-2.0 * u1)
    dv1 = dsx2
    dv12 = dsxy
    d_x = (_corr_valid_adjoint(du1, k, cache["shape"])
           + _corr_valid_adjoint(dv1, k, cache["shape"]) * 2.0 * x
           + _corr_valid_adjoint(dv12, k, cache["shape"]) * y)
    if np.asarray(d_x).shape[-1] == 1:
        d_x = d_x[..., 0]
    return d_x


def loss_image(pred, gt, dssim_weight: float):
    """(1 - w) * L1 + w * (1 - SSIM)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"resolution mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    l1 = float(np.abs(diff).mean())
    if dssim_weight > 0.0:
        s, ssim_cache = ssim(pred, gt)
    else:
        s, ssim_cache = 1.0, None
    value = (1.0 - dssim_weight) * l1 + dssim_weight * (1.0 - s)
    cache = {"diff": diff, "w": dssim_weight, "ssim": ssim_cache}
    return value, cache


def loss_image_backward(cache, d_value=1.0):
    diff, w = cache["diff"], cache["w"]
    d_pred = d_value * (1.0 - w) * np.sign(diff) / diff.size
    if cache["ssim"] is not None:
        d_pred = d_pred + ssim_backward(cache["ssim"], -d_value * w)
    return d_pred


def loss_mask(opacity_image, mask):
    """Mean binary cross entropy between the alpha plane and the mask."""
    op = np.clip(np.asarray(opacity_image, dtype=np.float64),
                 MASK_EPS, 1.0 - MASK_EPS)
    mask = np.asarray(mask, dtype=np.float64)
    value = float(np.mean(-(mask * np.log(op) + (1.0 - mask) * np.log1p(-op))))
    cache = {"op": op, "mask": mask,
             "clamped": (opacity_image <= MASK_EPS) | (opacity_image >= 1.0 - MASK_EPS)}
    return value, cache


def loss_mask_backward(cache, d_value=1.0):
    op, mask = cache["op"], cache["mask"]
    grad = -(mask / op - (1.0 - mask) / (1.0 - op)) / op.size
    grad[cache["clamped"]] = 0.0
    return d_value * grad


def _backproject_dirs(camera: Camera, height, width):
    fx, fy = camera.focal
    cx, cy = camera.principal
    us, vs = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)], axis=-1)


def loss_normal(zbar, normal_image, valid, camera: Camera):
    """MSE between depth-derived pseudo normals and the rendered normals.

    ``zbar`` is mean view depth per pixel, ``normal_image`` unit normals in
    world space; both gradients flow back.  Evaluated where a pixel and its
    four neighbors are valid.
    """
    zbar = np.asarray(zbar, dtype=np.float64)
    normal_image = np.asarray(normal_image, dtype=np.float64)
    height, width = zbar.shape
    dirs = _backproject_dirs(camera, height, width)
    pos = camera.cam_to_world_points(
        (dirs * zbar[..., None]).reshape(-1, 3)).reshape(height, width, 3)

    core = np.zeros_like(valid)
    core[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, :-2] & valid[1:-1, 2:]
                        & valid[:-2, 1:-1] & valid[2:, 1:-1])
    py, px = np.nonzero(core)
    if len(py) == 0:
        return 0.0, {"empty": True, "shape": (height, width),
                     "n_shape": normal_image.shape}

    dpdx = 0.5 * (pos[py, px + 1] - pos[py, px - 1])
    dpdy = 0.5 * (pos[py + 1, px] - pos[py - 1, px])
    cr = np.cross(dpdx, dpdy)
    norm = np.maximum(np.linalg.norm(cr, axis=-1, keepdims=True), 1e-12)
    pn = cr / norm
    # Orient toward the camera.
    to_cam = camera.position - pos[py, px]
    sign = np.where(np.sum(pn * to_cam, axis=-1) < 0.0, -1.0, 1.0)
    pn = pn * sign[:, None]

    n_img = normal_image[py, px]
    diff = pn - n_img
    value = float(np.mean(diff**2))
    cache = {
        "empty": False, "camera": camera, "py": py, "px": px, "dirs": dirs,
        "pn": pn, "cr": cr, "norm": norm, "sign": sign, "diff": diff,
        "dpdx": dpdx, "dpdy": dpdy, "shape": (height, width),
        "n_shape": normal_image.shape,
    }
    return value, cache


def loss_normal_backward(cache, d_value=1.0):
    height, width = cache["shape"]
    d_zbar = np.zeros((height, width))
    d_normal = np.zeros(cache["n_shape"])
    if cache["empty"]:
        return d_zbar, d_normal
    camera: Camera = cache["camera"]
    py, px = cache["py"], cache["px"]
    diff = cache["diff"]
    scale = 2.0 * d_value / diff.size
    d_pn = scale * diff * cache["sign"][:, None]  # pseudo-normal side
    np.add.at(d_normal, (py, px), -scale * diff)

    # pn = cr / |cr| (sign handled above)
    cr, norm, pn_signed = cache["cr"], cache["norm"], cache["pn"]
    pn_unsigned = pn_signed * cache["sign"][:, None]
    d_cr = (d_pn - pn_unsigned * np.sum(pn_unsigned * d_pn, axis=-1,
                                        keepdims=True)) / norm
    dpdx, dpdy = cache["dpdx"], cache["dpdy"]
    d_dpdx = np.cross(dpdy, d_cr)
    d_dpdy = np.cross(d_cr, dpdx)

    # dpdx = (pos[px+1] - pos[px-1]) / 2; pos = (dirs * zbar) @ R (world)
    # d zbar at a neighbor = <d_pos_world R^T, dir_cam> at that pixel.
    dirs = cache["dirs"]
    rot = camera.rotation

    def scatter(d_pos_world, yy, xx):
        d_pos_cam = d_pos_world @ rot.T
        np.add.at(d_zbar, (yy, xx), np.sum(d_pos_cam * dirs[yy, xx], axis=-1))

    scatter(0.5 * d_dpdx, py, px + 1)
    scatter(-0.5 * d_dpdx, py, px - 1)
    scatter(0.5 * d_dpdy, py + 1, px)
    scatter(-0.5 * d_dpdy, py - 1, px)
    return d_zbar, d_normal


def loss_incident(incident, visibility):
    """L1 between the clamped channel-mean incident light and SH visibility."""
    inc = np.asarray(incident, dtype=np.float64)
    vis = np.asarray(visibility, dtype=np.float64)
    mean_c = inc.mean(axis=-1)
    clamped = np.minimum(mean_c, 1.0)
    diff = clamped - vis
    value = float(np.abs(diff).mean()) if len(diff) else 0.0
    cache = {"n": len(diff), "sign": np.sign(diff), "pass_through": mean_c < 1.0,
             "channels": inc.shape[-1]}
    return value, cache


def loss_incident_backward(cache, d_value=1.0):
    n, ch = cache["n"], cache["channels"]
    if n == 0:
        return np.zeros((0, ch)), np.zeros(0)
    g = d_value * cache["sign"] / n
    d_inc = np.where(cache["pass_through"], g, 0.0)[:, None] / ch * np.ones(ch)
    d_vis = -g
    return d_inc, d_vis


def loss_smooth(attr_image, gt_image, valid):
    """Edge-aware smoothness: mean |grad attr| * exp(-|grad gt|).

    Finite forward differences along both axes, counted where both pixels
    of a pair are valid; the gate uses the channel-mean gt gradient.
    """
    attr = np.asarray(attr_image, dtype=np.float64)
    gt = np.asarray(gt_image, dtype=np.float64)
    squeeze = attr.ndim == 2
    if squeeze:
        attr = attr[..., None]
    terms = []
    cache = {"shape": attr.shape, "squeeze": squeeze, "axes": []}
    for axis in (0, 1):
        sl_a = (slice(None, -1), slice(None)) if axis == 0 else (slice(None), slice(None, -1))
        sl_b = (slice(1, None), slice(None)) if axis == 0 else (slice(None), slice(1, None))
        pair_valid = valid[sl_a] & valid[sl_b]
        d_attr = attr[sl_b] - attr[sl_a]
        d_gt = np.abs(gt[sl_b] - gt[sl_a]).mean(axis=-1)
        gate = np.exp(-d_gt) * pair_valid
        terms.append(np.abs(d_attr) * gate[..., None])
        cache["axes"].append({"sl_a": sl_a, "sl_b": sl_b, "gate": gate,
                              "sign": np.sign(d_attr)})
    total = sum(t.sum() for t in terms)
    count = sum(t.size for t in terms)
    cache["count"] = count
    return float(total / count), cache


def loss_smooth_backward(cache, d_value=1.0):
    d_attr = np.zeros(cache["shape"])
    for ax in cache["axes"]:
        g = d_value * ax["sign"] * ax["gate"][..., None] / cache["count"]
        d_attr[ax["sl_b"]] += g
        d_attr[ax["sl_a"]] -= g
    if cache["squeeze"]:
        d_attr = d_attr[..., 0]
    return d_attr


GAMMA_EPS = 1e-4


def loss_enhance(pred, gt):
    """L1 on gamma-compressed images; upweights dark-region errors."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    inv_g = 1.0 / 2.2
    p = np.maximum(pred, 0.0) + GAMMA_EPS
    comp_p = p**inv_g
    comp_g = (np.maximum(gt, 0.0) + GAMMA_EPS) ** inv_g
    diff = comp_p - comp_g
    value = float(np.abs(diff).mean())
    cache = {"sign": np.sign(diff), "p": p, "inv_g": inv_g,
             "active": pred > 0.0, "size": diff.size}
    return value, cache


def loss_enhance_backward(cache, d_value=1.0):
    inv_g = cache["inv_g"]
    g = cache["sign"] * inv_g * cache["p"] ** (inv_g - 1.0) / cache["size"]
    return d_value * np.where(cache["active"], g, 0.0)


def loss_sh_visibility(sh_values, targets):
    """L1 between SH-evaluated visibility and ray-traced targets."""
    sh_values = np.asarray(sh_values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    diff = sh_values - targets
    value = float(np.abs(diff).mean()) if diff.size else 0.0
    cache = {"sign": np.sign(diff), "size": max(diff.size, 1)}
    return value, cache


def loss_sh_visibility_backward(cache, d_value=1.0):
    return d_value * cache["sign"] / cache["size"]


def psnr(pred, gt, cap: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"resolution mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)


def ssim_value(pred, gt) -> float:
    return ssim(pred, gt)[0]
