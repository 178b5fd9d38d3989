"""Physically based shading, shared by the deferred (image-space) path and
the per-Gaussian forward path.

The core evaluates a Disney-style diffuse + GGX specular BRDF lit by one
point light and blends it with the network's scattering residual through
the subsurfaceness weight.  The deferred wrapper un-premultiplies the
G-buffer, back-projects pixel positions from the depth plane, shades, and
composites over the background.  Exact adjoints throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .raster import GBuffer
from .scene import Camera, PointLight
from .validation import normalize

# Channel layout of the per-Gaussian attribute vector / G-buffer planes.
ATTR_BASECOLOR = slice(0, 3)
ATTR_ROUGHNESS = 3
ATTR_METALNESS = 4
ATTR_SUBSURFACE = 5
ATTR_NORMAL = slice(6, 9)
ATTR_RESIDUAL = slice(9, 12)
ATTR_INCIDENT = slice(12, 15)
ATTR_COUNT = 15

ATTR_PLANES = {
    "basecolor": ATTR_BASECOLOR,
    "roughness": ATTR_ROUGHNESS,
    "metalness": ATTR_METALNESS,
    "subsurfaceness": ATTR_SUBSURFACE,
    "normal": ATTR_NORMAL,
    "residual": ATTR_RESIDUAL,
    "incident": ATTR_INCIDENT,
}


@dataclass
class ShadingConfig:
    f0_dielectric: float = 0.04  # Fresnel reflectance at normal incidence
    ggx_alpha_min: float = 1e-4  # floor on roughness^2
    denom_min: float = 1e-4  # microfacet denominator clamp
    normalized_denominator: bool = True  # include the factor 4 (off = literal form)
    alpha_eps: float = 1e-3  # un-premultiply threshold on pixel opacity
    use_residual: bool = True  # blend the scattering residual (ablation switch)
    use_pbr: bool = True  # evaluate the surface BRDF (ablation switch)


def pack_attrs(basecolor, roughness, metalness, subsurfaceness, normal,
               residual, incident):
    """Stack per-Gaussian attributes into the fixed channel layout."""
    n = len(basecolor)
    attrs = np.empty((n, ATTR_COUNT))
    attrs[:, ATTR_BASECOLOR] = basecolor
    attrs[:, ATTR_ROUGHNESS] = roughness
    attrs[:, ATTR_METALNESS] = metalness
    attrs[:, ATTR_SUBSURFACE] = subsurfaceness
    attrs[:, ATTR_NORMAL] = normal
    attrs[:, ATTR_RESIDUAL] = residual
    attrs[:, ATTR_INCIDENT] = incident
    return attrs


def brdf_diffuse(basecolor, metalness):
    """Lambertian term (1 - m) / pi * basecolor."""
    basecolor = np.asarray(basecolor, dtype=np.float64)
    metalness = np.asarray(metalness, dtype=np.float64)
    return (1.0 - metalness)[..., None] / np.pi * basecolor


def _smith_lambda(cos, a2):
    c2 = cos * cos
    return 0.5 * (np.sqrt(1.0 + a2 * (1.0 - c2) / c2) - 1.0)


def brdf_specular(w_o, w_i, n, basecolor, metalness, roughness,
                  cfg: ShadingConfig | None = None):
    """GGX microfacet lobe with Schlick Fresnel and height-correlated Smith.

    Zero outside the reflection hemisphere.  Batched over leading dims;
    directions must be unit length.
    """
    cfg = cfg or ShadingConfig()
    w_o = np.asarray(w_o, dtype=np.float64)
    w_i = np.asarray(w_i, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    basecolor = np.asarray(basecolor, dtype=np.float64)
    metalness = np.asarray(metalness, dtype=np.float64)
    roughness = np.asarray(roughness, dtype=np.float64)

    ndv = np.sum(n * w_o, axis=-1)
    ndl = np.sum(n * w_i, axis=-1)
    mask = (ndv > 0) & (ndl > 0)
    ndv_s = np.where(mask, ndv, 1.0)
    ndl_s = np.where(mask, ndl, 1.0)

    h = normalize(w_i + w_o)
    ndh = np.sum(n * h, axis=-1)
    vdh = np.sum(w_o * h, axis=-1)

    a2 = np.maximum(roughness**2, cfg.ggx_alpha_min) ** 2
    tt = ndh * ndh * (a2 - 1.0) + 1.0
    d_ggx = a2 / (np.pi * tt * tt)
    g_smith = 1.0 / (1.0 + _smith_lambda(ndv_s, a2) + _smith_lambda(ndl_s, a2))
    f0 = cfg.f0_dielectric * (1.0 - metalness[..., None]) + basecolor * metalness[..., None]
    fres = f0 + (1.0 - f0) * (1.0 - vdh[..., None]) ** 5

    raw_denom = ndv_s * ndl_s
    if cfg.normalized_denominator:
        raw_denom = 4.0 * raw_denom
    denom = np.maximum(raw_denom, cfg.denom_min)
    scalar = np.where(mask, d_ggx * g_smith / denom, 0.0)
    return scalar[..., None] * fres


def _normalize_fwd(v):
    norm = np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    return v / norm, norm


def _normalize_bwd(unit, norm, d_unit):
    return (d_unit - unit * np.sum(unit * d_unit, axis=-1, keepdims=True)) / norm


def shade_core(basecolor, roughness, metalness, subsurfaceness, residual,
               incident, normal_raw, position, camera_position,
               light: PointLight, cfg: ShadingConfig):
    """Blend the scattering residual against the lit surface response.

    out = intensity * [sss * residual
                       + (1 - sss) * (f_spec + f_diff) * incident * <n, w_in>]

    All inputs batched (P, ...); ``normal_raw`` need not be unit length.
    Returns (shaded (P, 3), cache).
    """
    b = np.asarray(basecolor, dtype=np.float64)
    r = np.asarray(roughness, dtype=np.float64)
    m = np.asarray(metalness, dtype=np.float64)
    sss = np.asarray(subsurfaceness, dtype=np.float64)
    res = np.asarray(residual, dtype=np.float64)
    inc = np.asarray(incident, dtype=np.float64)
    pos = np.asarray(position, dtype=np.float64)

    n, n_norm = _normalize_fwd(np.asarray(normal_raw, dtype=np.float64))
    lvec = light.position - pos
    w_i, l_norm = _normalize_fwd(lvec)
    vvec = np.asarray(camera_position, dtype=np.float64) - pos
    w_o, v_norm = _normalize_fwd(vvec)

    ndl_raw = np.sum(n * w_i, axis=-1)
    ndv_raw = np.sum(n * w_o, axis=-1)
    cosw = np.clip(ndl_raw, 0.0, 1.0)
    mask = (ndl_raw > 0) & (ndv_raw > 0)
    ndl = np.where(mask, ndl_raw, 1.0)
    ndv = np.where(mask, ndv_raw, 1.0)

    hvec = w_i + w_o
    h, h_norm = _normalize_fwd(hvec)
    ndh = np.sum(n * h, axis=-1)
    vdh = np.sum(w_o * h, axis=-1)

    r2 = r**2
    a2 = np.maximum(r2, cfg.ggx_alpha_min) ** 2
    tt = ndh * ndh * (a2 - 1.0) + 1.0
    d_ggx = a2 / (np.pi * tt * tt)
    lam_v = _smith_lambda(ndv, a2)
    lam_l = _smith_lambda(ndl, a2)
    g_smith = 1.0 / (1.0 + lam_v + lam_l)
    f0 = cfg.f0_dielectric * (1.0 - m[:, None]) + b * m[:, None]
    one_minus_vdh5 = (1.0 - vdh[:, None]) ** 5
    fres = f0 + (1.0 - f0) * one_minus_vdh5

    raw_denom = (4.0 if cfg.normalized_denominator else 1.0) * ndv * ndl
    denom = np.maximum(raw_denom, cfg.denom_min)
    spec_scalar = np.where(mask, d_ggx * g_smith / denom, 0.0)
    f_spec = spec_scalar[:, None] * fres
    f_diff = (1.0 - m)[:, None] / np.pi * b
    if not cfg.use_pbr:
        f_spec = np.zeros_like(f_spec)
        f_diff = np.zeros_like(f_diff)

    pbr = (f_spec + f_diff) * inc * cosw[:, None]
    if cfg.use_residual:
        l_out = sss[:, None] * res + (1.0 - sss)[:, None] * pbr
    else:
        l_out = pbr
    shaded = light.intensity * l_out

    cache = {
        "cfg": cfg, "light": light, "b": b, "r": r, "m": m, "sss": sss,
        "res": res, "inc": inc, "n": n, "n_norm": n_norm, "w_i": w_i,
        "l_norm": l_norm, "w_o": w_o, "v_norm": v_norm, "ndl_raw": ndl_raw,
        "ndv_raw": ndv_raw, "cosw": cosw, "mask": mask, "ndl": ndl, "ndv": ndv,
        "h": h, "h_norm": h_norm, "ndh": ndh, "vdh": vdh, "r2": r2, "a2": a2,
        "tt": tt, "d_ggx": d_ggx, "lam_v": lam_v, "lam_l": lam_l,
        "g_smith": g_smith, "f0": f0, "one_minus_vdh5": one_minus_vdh5,
        "fres": fres, "raw_denom": raw_denom, "denom": denom,
        "spec_scalar": spec_scalar, "f_spec": f_spec, "f_diff": f_diff,
        "pbr": pbr,
    }
    return shaded, cache


def shade_core_backward(cache, d_shaded):
    """Adjoint of ``shade_core``; returns a dict of input cotangents."""
    cfg: ShadingConfig = cache["cfg"]
    light: PointLight = cache["light"]
    mask = cache["mask"]
    sss, res, inc, pbr = cache["sss"], cache["res"], cache["inc"], cache["pbr"]

    d_lout = np.asarray(d_shaded, dtype=np.float64) * light.intensity
    if cfg.use_residual:
        d_res = d_lout * sss[:, None]
        d_pbr = d_lout * (1.0 - sss)[:, None]
        d_sss = np.sum(d_lout * (res - pbr), axis=-1)
    else:
        d_res = np.zeros_like(res)
        d_pbr = d_lout
        d_sss = np.zeros_like(sss)

    cosw = cache["cosw"]
    f_spec, f_diff = cache["f_spec"], cache["f_diff"]
    d_inc = d_pbr * (f_spec + f_diff) * cosw[:, None]
    d_fsum = d_pbr * inc * cosw[:, None]
    d_cosw = np.sum(d_pbr * (f_spec + f_diff) * inc, axis=-1)

    b, m = cache["b"], cache["m"]
    if cfg.use_pbr:
        d_b = d_fsum * (1.0 - m)[:, None] / np.pi
        d_m = -np.sum(d_fsum * b, axis=-1) / np.pi

        fres = cache["fres"]
        spec_scalar = cache["spec_scalar"]
        d_spec_scalar = np.sum(d_fsum * fres, axis=-1)
        d_fres = d_fsum * spec_scalar[:, None]

        f0, one5 = cache["f0"], cache["one_minus_vdh5"]
        vdh = cache["vdh"]
        d_f0 = d_fres * (1.0 - one5)
        d_one5 = np.sum(d_fres * (1.0 - f0), axis=-1)
        d_vdh = d_one5 * (-5.0) * (1.0 - vdh) ** 4
        d_m += np.sum(d_f0 * (b - cfg.f0_dielectric), axis=-1)
        d_b += d_f0 * m[:, None]

        d_ggx, g_smith, denom = cache["d_ggx"], cache["g_smith"], cache["denom"]
        dm_scalar = np.where(mask, d_spec_scalar, 0.0)
        d_dggx = dm_scalar * g_smith / denom
        d_gsmith = dm_scalar * d_ggx / denom
        d_denom = -dm_scalar * d_ggx * g_smith / denom**2
        unclamped = cache["raw_denom"] > cfg.denom_min
        d_rawden = np.where(unclamped, d_denom, 0.0)
        den_f = 4.0 if cfg.normalized_denominator else 1.0
        ndl, ndv = cache["ndl"], cache["ndv"]
        d_ndl = d_rawden * den_f * ndv
        d_ndv = d_rawden * den_f * ndl

        a2, tt, ndh = cache["a2"], cache["tt"], cache["ndh"]
        d_lam = -d_gsmith * g_smith**2
        sv = 2.0 * cache["lam_v"] + 1.0
        sl = 2.0 * cache["lam_l"] + 1.0
        d_ndv += d_lam * (-a2 / (2.0 * sv * ndv**3))
        d_ndl += d_lam * (-a2 / (2.0 * sl * ndl**3))
        d_a2 = d_lam * ((1.0 / ndv**2 - 1.0) / (4.0 * sv)
                        + (1.0 / ndl**2 - 1.0) / (4.0 * sl))

        d_a2 += d_dggx * (1.0 / (np.pi * tt * tt)
                          - d_ggx * 2.0 * ndh * ndh / tt)
        d_ndh = d_dggx * (-4.0 * a2 * ndh * (a2 - 1.0) / (np.pi * tt**3))

        r, r2 = cache["r"], cache["r2"]
        r2_eff = np.maximum(r2, cfg.ggx_alpha_min)
        d_r = np.where(r2 > cfg.ggx_alpha_min, d_a2 * 2.0 * r2_eff * 2.0 * r, 0.0)

        d_ndl = np.where(mask, d_ndl, 0.0)
        d_ndv = np.where(mask, d_ndv, 0.0)
        d_ndh = np.where(mask, d_ndh, 0.0)
        d_vdh = np.where(mask, d_vdh, 0.0)
        d_r = np.where(mask, d_r, 0.0)
    else:
        zero = np.zeros_like(cache["ndl"])
        d_b = np.zeros_like(b)
        d_m = zero.copy()
        d_r = zero.copy()
        d_ndl, d_ndv, d_ndh, d_vdh = zero, zero.copy(), zero.copy(), zero.copy()

    ndl_raw = cache["ndl_raw"]
    d_ndl_raw = np.where((ndl_raw > 0) & (ndl_raw < 1), d_cosw, 0.0)
    d_ndl_raw = d_ndl_raw + d_ndl
    d_ndv_raw = d_ndv

    n, w_i, w_o, h = cache["n"], cache["w_i"], cache["w_o"], cache["h"]
    d_n = d_ndl_raw[:, None] * w_i + d_ndv_raw[:, None] * w_o + d_ndh[:, None] * h
    d_wi = d_ndl_raw[:, None] * n
    d_wo = d_ndv_raw[:, None] * n + d_vdh[:, None] * h
    d_h = d_ndh[:, None] * n + d_vdh[:, None] * w_o

    d_hvec = _normalize_bwd(h, cache["h_norm"], d_h)
    d_wi = d_wi + d_hvec
    d_wo = d_wo + d_hvec

    d_lvec = _normalize_bwd(w_i, cache["l_norm"], d_wi)
    d_vvec = _normalize_bwd(w_o, cache["v_norm"], d_wo)
    d_pos = -(d_lvec + d_vvec)
    d_n_raw = _normalize_bwd(n, cache["n_norm"], d_n)

    return {
        "basecolor": d_b, "roughness": d_r, "metalness": d_m,
        "subsurfaceness": d_sss, "residual": d_res, "incident": d_inc,
        "normal_raw": d_n_raw, "position": d_pos,
    }


def combine(basecolor, roughness, metalness, subsurfaceness, normal, residual,
            incident, position, light: PointLight, camera_position,
            cfg: ShadingConfig | None = None):
    """Single-point convenience wrapper over ``shade_core``."""
    cfg = cfg or ShadingConfig()
    one = np.atleast_2d
    shaded, _ = shade_core(
        one(np.asarray(basecolor, dtype=np.float64)),
        np.atleast_1d(np.asarray(roughness, dtype=np.float64)),
        np.atleast_1d(np.asarray(metalness, dtype=np.float64)),
        np.atleast_1d(np.asarray(subsurfaceness, dtype=np.float64)),
        one(np.asarray(residual, dtype=np.float64)),
        one(np.asarray(incident, dtype=np.float64)),
        one(np.asarray(normal, dtype=np.float64)),
        one(np.asarray(position, dtype=np.float64)),
        camera_position, light, cfg)
    return shaded[0] if np.asarray(basecolor).ndim == 1 else shaded


@numba.njit(parallel=True, cache=True)
def _shade_kernel(a, pos, cam_pos, light_pos, intensity, f0d, ag_min,
                  denom_min, den_factor, use_residual, use_pbr, out):
    """No-cache mirror of ``shade_core`` over un-premultiplied pixel rows."""
    n = a.shape[0]
    for p in numba.prange(n):
        nx = a[p, 6]
        ny = a[p, 7]
        nz = a[p, 8]
        nn = max(np.sqrt(nx * nx + ny * ny + nz * nz), 1e-12)
        nx /= nn
        ny /= nn
        nz /= nn
        lx = light_pos[0] - pos[p, 0]
        ly = light_pos[1] - pos[p, 1]
        lz = light_pos[2] - pos[p, 2]
        ln = max(np.sqrt(lx * lx + ly * ly + lz * lz), 1e-12)
        lx /= ln
        ly /= ln
        lz /= ln
        vx = cam_pos[0] - pos[p, 0]
        vy = cam_pos[1] - pos[p, 1]
        vz = cam_pos[2] - pos[p, 2]
        vn = max(np.sqrt(vx * vx + vy * vy + vz * vz), 1e-12)
        vx /= vn
        vy /= vn
        vz /= vn
        ndl = nx * lx + ny * ly + nz * lz
        ndv = nx * vx + ny * vy + nz * vz
        cosw = min(max(ndl, 0.0), 1.0)
        spec_scalar = 0.0
        f_r = f_g = f_b = 0.0
        m = a[p, 4]
        if use_pbr and ndl > 0.0 and ndv > 0.0:
            hx = lx + vx
            hy = ly + vy
            hz = lz + vz
            hn = max(np.sqrt(hx * hx + hy * hy + hz * hz), 1e-12)
            hx /= hn
            hy /= hn
            hz /= hn
            ndh = nx * hx + ny * hy + nz * hz
            vdh = vx * hx + vy * hy + vz * hz
            r2 = a[p, 3] * a[p, 3]
            a2 = max(r2, ag_min)
            a2 = a2 * a2
            tt = ndh * ndh * (a2 - 1.0) + 1.0
            d_ggx = a2 / (np.pi * tt * tt)
            lam_v = 0.5 * (np.sqrt(1.0 + a2 * (1.0 - ndv * ndv)
                                   / (ndv * ndv)) - 1.0)
            lam_l = 0.5 * (np.sqrt(1.0 + a2 * (1.0 - ndl * ndl)
                                   / (ndl * ndl)) - 1.0)
            g_smith = 1.0 / (1.0 + lam_v + lam_l)
            denom = max(den_factor * ndv * ndl, denom_min)
            spec_scalar = d_ggx * g_smith / denom
            one5 = (1.0 - vdh) ** 5
            f_r = f0d * (1.0 - m) + a[p, 0] * m
            f_g = f0d * (1.0 - m) + a[p, 1] * m
            f_b = f0d * (1.0 - m) + a[p, 2] * m
            f_r = f_r + (1.0 - f_r) * one5
            f_g = f_g + (1.0 - f_g) * one5
            f_b = f_b + (1.0 - f_b) * one5
        diff = (1.0 - m) / np.pi if use_pbr else 0.0
        sss = a[p, 5]
        for c in range(3):
            if c == 0:
                fres = f_r
            elif c == 1:
                fres = f_g
            else:
                fres = f_b
            pbr = (spec_scalar * fres + diff * a[p, c]) * a[p, 12 + c] * cosw
            if use_residual:
                l_out = sss * a[p, 9 + c] + (1.0 - sss) * pbr
            else:
                l_out = pbr
            out[p, c] = intensity * l_out


def gbuffer_positions(gbuffer: GBuffer, camera: Camera, alpha_eps: float = 1e-3):
    """Back-project the alpha-weighted depth plane to world positions.

    Returns (positions (H, W, 3), valid mask); invalid pixels are zero.
    """
    height, width = gbuffer.alpha.shape
    valid = gbuffer.alpha > alpha_eps
    zbar = np.where(valid, gbuffer.depth / np.where(valid, gbuffer.alpha, 1.0), 0.0)
    fx, fy = camera.focal
    cx, cy = camera.principal
    us, vs = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    dir_cam = np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)], axis=-1)
    pos_cam = dir_cam * zbar[..., None]
    pos = camera.cam_to_world_points(pos_cam.reshape(-1, 3)).reshape(height, width, 3)
    return np.where(valid[..., None], pos, 0.0), valid


def deferred_shade(gbuffer: GBuffer, camera: Camera, light: PointLight,
                   cfg: ShadingConfig | None = None, background=None,
                   want_cache: bool = True, fast: bool | None = None):
    """Shade every covered pixel of the G-buffer; returns (image, cache).

    The final framebuffer is alpha * shaded + (1 - alpha) * background;
    pixels with alpha <= alpha_eps show the background.  ``fast`` uses the
    compiled single-pass shader (no cache); default follows want_cache.
    """
    cfg = cfg or ShadingConfig()
    if fast is None:
        fast = not want_cache
    if fast and want_cache:
        raise ValueError("fast shading does not produce a cache")
    height, width = gbuffer.alpha.shape
    if background is None:
        background = np.zeros(3)
    background = np.asarray(background, dtype=np.float64)

    valid = gbuffer.alpha > cfg.alpha_eps
    py, px = np.nonzero(valid)
    image = np.broadcast_to(background, (height, width, 3)).copy()
    if len(py) == 0:
        return image, {"cfg": cfg, "shape": (height, width), "py": py, "px": px}

    alpha = gbuffer.alpha[py, px]
    A = gbuffer.attrs[py, px, :]
    Dacc = gbuffer.depth[py, px]
    inv_a = 1.0 / alpha
    a = A * inv_a[:, None]

    zbar = Dacc * inv_a
    fx, fy = camera.focal
    cx, cy = camera.principal
    dir_cam = np.stack([(px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy,
                        np.ones(len(px))], axis=-1)
    pos_cam = dir_cam * zbar[:, None]
    pos = camera.cam_to_world_points(pos_cam)

    if not fast:
        shaded, core_cache = shade_core(
            a[:, ATTR_BASECOLOR], a[:, ATTR_ROUGHNESS], a[:, ATTR_METALNESS],
            a[:, ATTR_SUBSURFACE], a[:, ATTR_RESIDUAL], a[:, ATTR_INCIDENT],
            a[:, ATTR_NORMAL], pos, camera.position, light, cfg)
        if not want_cache:
            core_cache = None
    else:
        shaded = np.empty((len(px), 3))
        _shade_kernel(np.ascontiguousarray(a), np.ascontiguousarray(pos),
                      np.ascontiguousarray(camera.position),
                      np.ascontiguousarray(light.position),
                      light.intensity, cfg.f0_dielectric, cfg.ggx_alpha_min,
                      cfg.denom_min, 4.0 if cfg.normalized_denominator else 1.0,
                      cfg.use_residual, cfg.use_pbr, shaded)
        core_cache = None
    composite = alpha[:, None] * shaded + (1.0 - alpha)[:, None] * background
    image[py, px, :] = composite

    cache = None
    if want_cache:
        cache = {
            "cfg": cfg, "camera": camera, "background": background,
            "shape": (height, width), "py": py, "px": px, "alpha": alpha,
            "inv_a": inv_a, "a": a, "zbar": zbar, "dir_cam": dir_cam,
            "shaded": shaded, "core": core_cache,
        }
    return image, cache


def deferred_shade_backward(cache, d_image):
    """Adjoint of ``deferred_shade``.

    Returns (d_attrs (H, W, K), d_alpha (H, W), d_depth (H, W)) cotangents
    on the G-buffer planes.
    """
    height, width = cache["shape"]
    d_attrs = np.zeros((height, width, ATTR_COUNT))
    d_alpha_img = np.zeros((height, width))
    d_depth_img = np.zeros((height, width))
    py, px = cache["py"], cache["px"]
    if len(py) == 0:
        return d_attrs, d_alpha_img, d_depth_img

    camera: Camera = cache["camera"]
    background = cache["background"]
    alpha, inv_a = cache["alpha"], cache["inv_a"]
    dC = np.ascontiguousarray(d_image[py, px, :], dtype=np.float64)

    # composite = alpha * shaded + (1 - alpha) * background
    d_shaded = dC * alpha[:, None]
    d_alpha = np.sum(dC * (cache["shaded"] - background), axis=-1)

    g = shade_core_backward(cache["core"], d_shaded)

    d_a = np.zeros_like(cache["a"])
    d_a[:, ATTR_BASECOLOR] = g["basecolor"]
    d_a[:, ATTR_ROUGHNESS] = g["roughness"]
    d_a[:, ATTR_METALNESS] = g["metalness"]
    d_a[:, ATTR_SUBSURFACE] = g["subsurfaceness"]
    d_a[:, ATTR_NORMAL] = g["normal_raw"]
    d_a[:, ATTR_RESIDUAL] = g["residual"]
    d_a[:, ATTR_INCIDENT] = g["incident"]

    # pos = (dir_cam * zbar - t) @ R
    d_pos_cam = g["position"] @ camera.rotation.T
    d_zbar = np.sum(d_pos_cam * cache["dir_cam"], axis=-1)

    # a = A / alpha, zbar = Dacc / alpha
    d_A = d_a * inv_a[:, None]
    d_Dacc = d_zbar * inv_a
    d_alpha += -(np.sum(d_a * cache["a"], axis=-1) + d_zbar * cache["zbar"]) * inv_a

    d_attrs[py, px, :] = d_A
    d_alpha_img[py, px] = d_alpha
    d_depth_img[py, px] = d_Dacc
    return d_attrs, d_alpha_img, d_depth_img


def shade_modes(gbuffer: GBuffer, camera: Camera):
    """Decomposition planes for display: dict of mode name -> image."""
    valid = gbuffer.alpha > 1e-3
    safe = np.where(valid, gbuffer.alpha, 1.0)
    out = {"alpha": gbuffer.alpha.copy()}
    for name, sl in ATTR_PLANES.items():
        if isinstance(sl, slice):
            plane = gbuffer.attrs[..., sl] / safe[..., None]
            plane = np.where(valid[..., None], plane, 0.0)
        else:
            plane = np.where(valid, gbuffer.attrs[..., sl] / safe, 0.0)
        if name == "normal":
            plane = np.where(valid[..., None], 0.5 * (normalize(plane) + 1.0), 0.0)
        out[name] = plane
    pos, _ = gbuffer_positions(gbuffer, camera)
    out["position"] = pos
    out["depth"] = np.where(valid, gbuffer.depth / safe, 0.0)
    return out
