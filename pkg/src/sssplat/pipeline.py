"""End-to-end differentiable render: scene + network -> image.

One forward pass activates the per-Gaussian parameters, projects splats,
evaluates the joint network per visible Gaussian, composites the
attribute G-buffer and shades it (in image space by default, or per
Gaussian for the forward-shading ablation).  ``render_backward`` pushes
cotangents from the image, from G-buffer-plane losses and from
per-Gaussian losses back to every scene parameter and network weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from . import mlp as mlpmod
from .mlp import MlpParams, encode_position, encode_position_backward
from .projection import (ProjectedSplats, RasterConfig, activate_geometry,
                         activate_geometry_backward, project, project_backward)
from .raster import GBuffer, rasterize, rasterize_backward
from .scene import (Camera, PointLight, Scene, eval_sh, quat_rotmat_jacobian,
                    sh_basis, sh_basis_grad)
from .shading import (ATTR_BASECOLOR, ATTR_COUNT, ATTR_INCIDENT,
                      ATTR_METALNESS, ATTR_NORMAL, ATTR_RESIDUAL,
                      ATTR_ROUGHNESS, ATTR_SUBSURFACE, ShadingConfig,
                      deferred_shade, deferred_shade_backward, pack_attrs,
                      shade_core, shade_core_backward)
from .validation import normalize

# MLP input feature columns.
COL_NORMAL = slice(0, 3)
COL_ROT = slice(3, 5)
COL_SCALE = slice(5, 8)
COL_LIGHT = slice(8, 11)
COL_VIEW = slice(11, 14)
COL_DIST = 14
COL_VIS = 15
COL_ENC = slice(16, 40)


@dataclass
class RenderOptions:
    deferred: bool = True  # image-space shading (off = per-Gaussian ablation)
    use_residual: bool = True
    use_pbr: bool = True
    roughness_override: float | None = None  # freeze value during warmup


@dataclass
class RenderResult:
    image: np.ndarray  # (H, W, 3) linear radiance
    gbuffer: GBuffer
    splats: ProjectedSplats
    visible: np.ndarray  # (M,) indices into the cloud
    residual: np.ndarray  # (M, 3) network outputs
    incident: np.ndarray  # (M, 3)
    visibility: np.ndarray  # (M,) clamped SH visibility toward the light
    cache: dict = field(default_factory=dict, repr=False)


@numba.njit(inline="always")
def _sigmoid_scalar(v):
    if v >= 0.0:
        return 1.0 / (1.0 + np.exp(-v))
    e = np.exp(v)
    return e / (1.0 + e)


@numba.njit(parallel=True, cache=True)
def _inputs_kernel(mu, rot_mats, scales, normals_raw, vis_sh, bc_logit,
                   r_logit, m_logit, sss_logit, op_logit, rough_override,
                   light_pos, cam_pos, center, half, x, vis_out, attrs_out,
                   opacity_out):
    """No-cache mirror of ``build_mlp_inputs`` plus the attribute read path
    (activations and channel packing), for the fast render path."""
    m = mu.shape[0]
    c0 = 0.28209479177387814
    c1 = 0.4886025119029199
    c2a = 1.0925484305920792
    c2b = 0.31539156525252005
    c2c = 0.5462742152960396
    for i in numba.prange(m):
        nx = normals_raw[i, 0]
        ny = normals_raw[i, 1]
        nz = normals_raw[i, 2]
        nn = max(np.sqrt(nx * nx + ny * ny + nz * nz), 1e-12)
        nx /= nn
        ny /= nn
        nz /= nn
        x[i, 0] = nx
        x[i, 1] = ny
        x[i, 2] = nz
        opacity_out[i] = _sigmoid_scalar(op_logit[i])
        for c in range(3):
            attrs_out[i, c] = _sigmoid_scalar(bc_logit[i, c])
        attrs_out[i, 3] = _sigmoid_scalar(r_logit[i]) if rough_override < 0 \
            else rough_override
        attrs_out[i, 4] = _sigmoid_scalar(m_logit[i])
        attrs_out[i, 5] = _sigmoid_scalar(sss_logit[i])
        attrs_out[i, 6] = nx
        attrs_out[i, 7] = ny
        attrs_out[i, 8] = nz
        k = 0
        if scales[i, 1] < scales[i, 0]:
            k = 1
        if scales[i, 2] < scales[i, k]:
            k = 2
        ax = rot_mats[i, 0, k]
        ay = rot_mats[i, 1, k]
        az = rot_mats[i, 2, k]
        azc = min(max(az, -1.0 + 1e-12), 1.0 - 1e-12)
        x[i, 3] = np.arccos(azc)
        x[i, 4] = np.arctan2(ay, ax)
        for c in range(3):
            x[i, 5 + c] = scales[i, c]
        lx = light_pos[0] - mu[i, 0]
        ly = light_pos[1] - mu[i, 1]
        lz = light_pos[2] - mu[i, 2]
        dist = np.sqrt(lx * lx + ly * ly + lz * lz)
        lx /= dist
        ly /= dist
        lz /= dist
        x[i, 8] = lx
        x[i, 9] = ly
        x[i, 10] = lz
        vx = cam_pos[0] - mu[i, 0]
        vy = cam_pos[1] - mu[i, 1]
        vz = cam_pos[2] - mu[i, 2]
        vn = np.sqrt(vx * vx + vy * vy + vz * vz)
        x[i, 11] = vx / vn
        x[i, 12] = vy / vn
        x[i, 13] = vz / vn
        x[i, 14] = dist
        v = (vis_sh[i, 0] * c0 + vis_sh[i, 1] * c1 * ly
             + vis_sh[i, 2] * c1 * lz + vis_sh[i, 3] * c1 * lx
             + vis_sh[i, 4] * c2a * lx * ly + vis_sh[i, 5] * c2a * ly * lz
             + vis_sh[i, 6] * c2b * (3.0 * lz * lz - 1.0)
             + vis_sh[i, 7] * c2a * lx * lz
             + vis_sh[i, 8] * c2c * (lx * lx - ly * ly))
        v = min(max(v, 0.0), 1.0)
        x[i, 15] = v
        vis_out[i] = v
        col = 16
        for axis in range(3):
            p = (mu[i, axis] - center[axis]) / half[axis]
            freq = np.pi
            for _band in range(4):
                arg = freq * p
                x[i, col] = np.sin(arg)
                x[i, col + 1] = np.cos(arg)
                col += 2
                freq *= 2.0


def build_inputs_and_attrs_fast(scene: Scene, visible, camera: Camera,
                                light: PointLight, geom_cache,
                                roughness_override):
    """Fused read path for display renders: network inputs, clamped SH
    visibility, packed attribute vectors and opacities, one parallel pass."""
    cloud = scene.cloud
    mu = np.ascontiguousarray(cloud.positions[visible])
    m = len(visible)
    x = np.empty((m, mlpmod.IN_FEATURES))
    vis = np.empty(m)
    attrs = np.empty((m, ATTR_COUNT))
    opacity = np.empty(m)
    _inputs_kernel(mu, np.ascontiguousarray(geom_cache["R"][visible]),
                   np.ascontiguousarray(geom_cache["s"][visible]),
                   np.ascontiguousarray(cloud.normals[visible]),
                   np.ascontiguousarray(cloud.vis_sh[visible]),
                   np.ascontiguousarray(cloud.basecolor_logits[visible]),
                   np.ascontiguousarray(cloud.roughness_logits[visible]),
                   np.ascontiguousarray(cloud.metalness_logits[visible]),
                   np.ascontiguousarray(cloud.subsurface_logits[visible]),
                   np.ascontiguousarray(cloud.opacity_logits[visible]),
                   -1.0 if roughness_override is None else float(roughness_override),
                   np.ascontiguousarray(light.position),
                   np.ascontiguousarray(camera.position),
                   scene.bounds.center, scene.bounds.half_extent, x, vis,
                   attrs, opacity)
    return x, vis, attrs, opacity


def build_mlp_inputs(scene: Scene, visible, camera: Camera, light: PointLight,
                     geom_cache, unit_normals_vis):
    """Assemble the 40-feature network input for the visible Gaussians."""
    cloud = scene.cloud
    mu = cloud.positions[visible]
    m = len(visible)
    x = np.empty((m, mlpmod.IN_FEATURES))

    x[:, COL_NORMAL] = unit_normals_vis

    rot_mats = geom_cache["R"][visible]
    scales = geom_cache["s"][visible]
    k_min = np.argmin(scales, axis=1)
    axis = rot_mats[np.arange(m), :, k_min]
    axis_z = np.clip(axis[:, 2], -1.0 + 1e-12, 1.0 - 1e-12)
    theta = np.arccos(axis_z)
    phi = np.arctan2(axis[:, 1], axis[:, 0])
    x[:, COL_ROT] = np.stack([theta, phi], axis=-1)
    x[:, COL_SCALE] = scales

    lvec = light.position - mu
    dist = np.linalg.norm(lvec, axis=-1)
    w_l = lvec / dist[:, None]
    x[:, COL_LIGHT] = w_l
    vvec = camera.position - mu
    vdist = np.linalg.norm(vvec, axis=-1)
    w_v = vvec / vdist[:, None]
    x[:, COL_VIEW] = w_v
    x[:, COL_DIST] = dist

    vis_raw = eval_sh(cloud.vis_sh[visible], w_l)
    vis = np.clip(vis_raw, 0.0, 1.0)
    x[:, COL_VIS] = vis
    x[:, COL_ENC] = encode_position(mu, scene.bounds)

    cache = {
        "mu": mu, "visible": visible, "bounds": scene.bounds,
        "k_min": k_min, "axis": axis, "axis_z": axis_z, "scales": scales,
        "w_l": w_l, "dist": dist, "w_v": w_v, "vdist": vdist,
        "vis_raw": vis_raw, "vis_sh": cloud.vis_sh[visible],
        "qn": geom_cache["qn"][visible],
        "q_raw": geom_cache["rotations"][visible],
        "floored": geom_cache["floored"][visible],
    }
    return x, vis, cache


def mlp_inputs_backward(cache, d_x, d_vis_extra=None):
    """Adjoint of ``build_mlp_inputs`` (the unit-normal column is handled by
    the caller, which owns the shared normalization).

    Returns per-visible-Gaussian cotangents: dict with positions,
    rotations, log_scales, vis_sh, plus ``d_unit_normal`` for the caller.
    """
    m = len(cache["mu"])
    d_mu = np.zeros((m, 3))
    d_vis_sh = np.zeros_like(cache["vis_sh"])

    # Rotation feature: spherical angles of the smallest-scale axis.
    d_theta = d_x[:, 3]
    d_phi = d_x[:, 4]
    axis, axis_z = cache["axis"], cache["axis_z"]
    d_axis = np.zeros((m, 3))
    d_axis[:, 2] = d_theta * (-1.0 / np.sqrt(1.0 - axis_z**2))
    xy2 = np.maximum(axis[:, 0] ** 2 + axis[:, 1] ** 2, 1e-12)
    d_axis[:, 0] += d_phi * (-axis[:, 1] / xy2)
    d_axis[:, 1] += d_phi * (axis[:, 0] / xy2)
    d_rot_mat = np.zeros((m, 3, 3))
    d_rot_mat[np.arange(m), :, cache["k_min"]] = d_axis
    jac_q = quat_rotmat_jacobian(cache["qn"])
    d_qn = np.einsum("nij,nijk->nk", d_rot_mat, jac_q)
    qn, q_raw = cache["qn"], cache["q_raw"]
    q_norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    d_rotations = (d_qn - qn * np.sum(d_qn * qn, axis=-1, keepdims=True)) / q_norm

    # Scale feature.
    d_log_scales = d_x[:, COL_SCALE] * cache["scales"]
    d_log_scales[cache["floored"]] = 0.0

    # Visibility: v = clip(eval_sh(c, w_l), 0, 1).
    vis_raw = cache["vis_raw"]
    d_v = d_x[:, COL_VIS].copy()
    if d_vis_extra is not None:
        d_v = d_v + d_vis_extra
    d_v = np.where((vis_raw > 0.0) & (vis_raw < 1.0), d_v, 0.0)
    w_l = cache["w_l"]
    basis = sh_basis(w_l)
    d_vis_sh += d_v[:, None] * basis
    d_wl_from_vis = d_v[:, None] * np.einsum(
        "nc,ncd->nd", cache["vis_sh"], sh_basis_grad(w_l))

    # Light direction, distance.
    d_wl = d_x[:, COL_LIGHT] + d_wl_from_vis
    dist = cache["dist"]
    d_lvec = (d_wl - w_l * np.sum(w_l * d_wl, axis=-1, keepdims=True)) / dist[:, None]
    d_lvec += d_x[:, COL_DIST][:, None] * w_l
    d_mu -= d_lvec

    # View direction.
    w_v, vdist = cache["w_v"], cache["vdist"]
    d_wv = d_x[:, COL_VIEW]
    d_vvec = (d_wv - w_v * np.sum(w_v * d_wv, axis=-1, keepdims=True)) / vdist[:, None]
    d_mu -= d_vvec

    # Fourier-encoded position.
    d_mu += encode_position_backward(cache["mu"], cache["bounds"], d_x[:, COL_ENC])

    return {
        "positions": d_mu, "rotations": d_rotations,
        "log_scales": d_log_scales, "vis_sh": d_vis_sh,
        "d_unit_normal": d_x[:, COL_NORMAL].copy(),
    }


def render(scene: Scene, params: MlpParams, camera: Camera, light: PointLight,
           raster_cfg: RasterConfig | None = None,
           shading_cfg: ShadingConfig | None = None,
           options: RenderOptions | None = None,
           background=None, want_grad: bool = True,
           edit=None, fast: bool | None = None) -> RenderResult:
    """Full forward render of one OLAT frame.

    ``edit`` (a MaterialEdit) rewrites per-Gaussian attributes before
    compositing; edited renders are display-only and carry no gradients.
    ``fast`` routes the network through single precision and skips every
    cache (display-quality, ~1e-7 off the double-precision result); it
    defaults to ``not want_grad`` and cannot be combined with gradients.
    """
    if edit is not None and want_grad:
        raise ValueError("material edits are not differentiable; "
                         "render with want_grad=False")
    if fast is None:
        fast = not want_grad
    if fast and want_grad:
        raise ValueError("fast rendering cannot provide gradients")
    if options is not None and not options.deferred:
        fast = False  # forward shading keeps the reference path
    raster_cfg = raster_cfg or RasterConfig()
    shading_cfg = shading_cfg or ShadingConfig()
    options = options or RenderOptions()
    shading_cfg = ShadingConfig(**{
        **shading_cfg.__dict__,
        "use_residual": options.use_residual,
        "use_pbr": options.use_pbr,
    })
    if background is None:
        background = np.zeros(3)
    background = np.asarray(background, dtype=np.float64)
    cloud = scene.cloud
    width, height = camera.resolution

    cov3, geom_cache = activate_geometry(cloud.positions, cloud.rotations,
                                         cloud.log_scales)
    splats = project(cloud.positions, cov3, camera, raster_cfg,
                     want_cache=want_grad)
    visible = splats.index
    m = len(visible)

    acts = None
    if fast:
        x, vis, attrs, op_vis = build_inputs_and_attrs_fast(
            scene, visible, camera, light, geom_cache,
            options.roughness_override)
        in_cache = None
        mlp_cache = None
        if m:
            residual, incident = params.forward_fast(x)
        else:
            residual = np.zeros((0, 3))
            incident = np.zeros((0, 3))
        if edit is not None:
            (attrs[:, ATTR_BASECOLOR], attrs[:, ATTR_ROUGHNESS],
             attrs[:, ATTR_METALNESS], attrs[:, ATTR_SUBSURFACE],
             residual, incident, op_vis) = edit.apply(
                attrs[:, ATTR_BASECOLOR], attrs[:, ATTR_ROUGHNESS],
                attrs[:, ATTR_METALNESS], attrs[:, ATTR_SUBSURFACE],
                residual, incident, op_vis)
        attrs[:, ATTR_RESIDUAL] = residual
        attrs[:, ATTR_INCIDENT] = incident
        unit_normals = attrs[:, ATTR_NORMAL]
        norm_raw = None
    else:
        opacity = cloud.opacities()
        basecolor = cloud.basecolors()
        metalness = cloud.metalnesses()
        subsurface = cloud.subsurfaceness()
        if options.roughness_override is None:
            roughness = cloud.roughnesses()
        else:
            roughness = np.full(len(cloud), float(options.roughness_override))
        acts = {
            "opacity": opacity, "basecolor": basecolor,
            "roughness": roughness, "metalness": metalness,
            "subsurface": subsurface,
        }

        unit_normals = normalize(cloud.normals[visible])
        norm_raw = np.maximum(
            np.linalg.norm(cloud.normals[visible], axis=-1, keepdims=True),
            1e-12)

        x, vis, in_cache = build_mlp_inputs(scene, visible, camera, light,
                                            geom_cache, unit_normals)
        if m == 0:
            residual = np.zeros((0, 3))
            incident = np.zeros((0, 3))
            mlp_cache = None
        else:
            residual, incident, mlp_cache = params.forward(x)
            if not want_grad:
                mlp_cache = None

        bc_vis = basecolor[visible]
        r_vis = roughness[visible]
        m_vis = metalness[visible]
        sss_vis = subsurface[visible]
        op_vis = opacity[visible]
        if edit is not None:
            bc_vis, r_vis, m_vis, sss_vis, residual, incident, op_vis = \
                edit.apply(bc_vis, r_vis, m_vis, sss_vis, residual, incident,
                           op_vis)

        attrs = pack_attrs(bc_vis, r_vis, m_vis, sss_vis,
                           unit_normals, residual, incident)

    if options.deferred:
        gbuffer = rasterize(splats, attrs, op_vis, raster_cfg,
                            camera.resolution)
        image, shade_cache = deferred_shade(gbuffer, camera, light,
                                            shading_cfg, background,
                                            want_cache=want_grad, fast=fast)
        core_cache = None
    else:
        shaded, core_cache = shade_core(
            bc_vis, r_vis, m_vis, sss_vis, residual, incident,
            cloud.normals[visible], cloud.positions[visible],
            camera.position, light, shading_cfg)
        full = np.concatenate([shaded, attrs], axis=1)
        full_bg = np.concatenate([background, np.zeros(ATTR_COUNT)])
        gbuffer = rasterize(splats, full, op_vis, raster_cfg,
                            camera.resolution, background=full_bg)
        image = gbuffer.attrs[:, :, :3].copy()
        shade_cache = None

    cache = {}
    if want_grad:
        cache = {
            "scene": scene, "camera": camera, "light": light,
            "raster_cfg": raster_cfg, "shading_cfg": shading_cfg,
            "options": options, "geom": geom_cache, "in": in_cache,
            "mlp": mlp_cache, "params": params, "unit_normals": unit_normals,
            "norm_raw": norm_raw, "shade": shade_cache, "core": core_cache,
            "acts": acts,
        }
    return RenderResult(image=image, gbuffer=gbuffer, splats=splats,
                        visible=visible, residual=residual, incident=incident,
                        visibility=vis, cache=cache)


def zero_grads(scene: Scene, params: MlpParams):
    cloud_grads = {k: np.zeros_like(v) for k, v in scene.cloud.param_arrays().items()}
    mlp_grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return cloud_grads, mlp_grads


def render_backward(result: RenderResult, d_image, d_attr_planes=None,
                    d_alpha_plane=None, d_depth_plane=None,
                    d_residual=None, d_incident=None, d_visibility=None):
    """Push cotangents back to scene parameters and network weights.

    ``d_image`` is on the final framebuffer; the optional plane cotangents
    are on the raw G-buffer planes (attrs/alpha/depth); the per-Gaussian
    cotangents are on the network outputs and on the clamped SH visibility
    (all (M, ...) aligned with ``result.visible``).

    Returns (cloud_grads, mlp_grads, aux) where aux carries the per-Gaussian
    screen-space position gradient used by the densification schedule.
    """
    cache = result.cache
    if not cache:
        raise ValueError("render was called with want_grad=False")
    scene: Scene = cache["scene"]
    camera: Camera = cache["camera"]
    options: RenderOptions = cache["options"]
    params: MlpParams = cache["params"]
    visible = result.visible
    m = len(visible)
    cloud_grads, mlp_grads = zero_grads(scene, params)
    aux = {"mean2d_grad": np.zeros((len(scene.cloud), 2))}
    if m == 0:
        return cloud_grads, mlp_grads, aux

    height, width = result.gbuffer.alpha.shape
    k_full = result.gbuffer.attrs.shape[2]
    d_attrs_img = np.zeros((height, width, k_full))
    d_alpha_img = np.zeros((height, width))
    d_depth_img = np.zeros((height, width))
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)

    if options.deferred:
        da, dal, dd = deferred_shade_backward(cache["shade"], d_image)
        d_attrs_img += da
        d_alpha_img += dal
        d_depth_img += dd
    else:
        # image = color channels of the combined buffer
        d_attrs_img[:, :, :3] += d_image
    if d_attr_planes is not None:
        d_attrs_img += d_attr_planes  # full G-buffer channel layout
    if d_alpha_plane is not None:
        d_alpha_img += d_alpha_plane
    if d_depth_plane is not None:
        d_depth_img += d_depth_plane

    rg = rasterize_backward(result.gbuffer, d_attrs_img, d_alpha_img,
                            d_depth_img)
    d_attrs_vis = rg["attrs"]
    d_opacity_vis = rg["opacity"]

    if options.deferred:
        d_plane_attrs = d_attrs_vis
    else:
        d_shaded = d_attrs_vis[:, :3]
        d_plane_attrs = d_attrs_vis[:, 3:]

    d_bc = d_plane_attrs[:, ATTR_BASECOLOR].copy()
    d_r = d_plane_attrs[:, ATTR_ROUGHNESS].copy()
    d_m = d_plane_attrs[:, ATTR_METALNESS].copy()
    d_sss = d_plane_attrs[:, ATTR_SUBSURFACE].copy()
    d_unit_n = d_plane_attrs[:, ATTR_NORMAL].copy()
    d_res = d_plane_attrs[:, ATTR_RESIDUAL].copy()
    d_inc = d_plane_attrs[:, ATTR_INCIDENT].copy()
    d_mu_extra = np.zeros((m, 3))
    d_nraw_extra = np.zeros((m, 3))

    if not options.deferred:
        cg = shade_core_backward(cache["core"], d_shaded)
        d_bc += cg["basecolor"]
        d_r += cg["roughness"]
        d_m += cg["metalness"]
        d_sss += cg["subsurfaceness"]
        d_res += cg["residual"]
        d_inc += cg["incident"]
        d_nraw_extra += cg["normal_raw"]
        d_mu_extra += cg["position"]

    if d_residual is not None:
        d_res = d_res + d_residual
    if d_incident is not None:
        d_inc = d_inc + d_incident

    g_mlp, d_x = params.backward(cache["mlp"], d_res, d_inc)
    for k, v in g_mlp.items():
        mlp_grads[k] += v

    ig = mlp_inputs_backward(cache["in"], d_x, d_visibility)
    d_unit_n += ig["d_unit_normal"]

    # Shared unit-normal chain (attr channel + network input).
    un = cache["unit_normals"]
    d_nraw = (d_unit_n - un * np.sum(un * d_unit_n, axis=-1, keepdims=True)) \
        / cache["norm_raw"]
    d_nraw += d_nraw_extra

    # Screen-space geometry.
    d_pos_full, d_cov3 = project_backward(result.splats, rg["mean2d"],
                                          rg["conic"], rg["depth"])
    d_rot_geo, d_logs_geo = activate_geometry_backward(cache["geom"], d_cov3)

    acts = cache["acts"]
    np.add.at(cloud_grads["positions"], visible,
              ig["positions"] + d_mu_extra)
    cloud_grads["positions"] += d_pos_full
    np.add.at(cloud_grads["rotations"], visible, ig["rotations"])
    cloud_grads["rotations"] += d_rot_geo
    np.add.at(cloud_grads["log_scales"], visible, ig["log_scales"])
    cloud_grads["log_scales"] += d_logs_geo
    np.add.at(cloud_grads["vis_sh"], visible, ig["vis_sh"])
    np.add.at(cloud_grads["normals"], visible, d_nraw)

    def sig_grad(values):
        return values * (1.0 - values)

    op = acts["opacity"][visible]
    np.add.at(cloud_grads["opacity_logits"], visible,
              d_opacity_vis * sig_grad(op))
    bc = acts["basecolor"][visible]
    np.add.at(cloud_grads["basecolor_logits"], visible, d_bc * sig_grad(bc))
    mt = acts["metalness"][visible]
    np.add.at(cloud_grads["metalness_logits"], visible, d_m * sig_grad(mt))
    ss = acts["subsurface"][visible]
    np.add.at(cloud_grads["subsurface_logits"], visible, d_sss * sig_grad(ss))
    if options.roughness_override is None:
        rr = acts["roughness"][visible]
        np.add.at(cloud_grads["roughness_logits"], visible, d_r * sig_grad(rr))

    aux["mean2d_grad"][visible] = rg["mean2d"]
    return cloud_grads, mlp_grads, aux


def derived_maps(gbuffer: GBuffer, alpha_eps: float = 1e-3):
    """Un-premultiplied maps for the image-space losses.

    Returns (maps, cache): maps has ``zbar`` (mean depth), ``unit_normal``,
    one map per scalar/color attribute, and the ``valid`` mask.
    """
    valid = gbuffer.alpha > alpha_eps
    py, px = np.nonzero(valid)
    height, width = gbuffer.alpha.shape
    alpha = gbuffer.alpha[py, px]
    inv_a = 1.0 / alpha
    k0 = gbuffer.attrs.shape[2] - ATTR_COUNT  # 0 deferred, 3 forward-shaded
    attrs = gbuffer.attrs[py, px, k0:]

    zbar_v = gbuffer.depth[py, px] * inv_a
    n_plane = attrs[:, ATTR_NORMAL]
    n_norm = np.maximum(np.linalg.norm(n_plane, axis=-1, keepdims=True), 1e-12)
    unit_n = n_plane / n_norm

    def scatter(vals, ch=None):
        shape = (height, width) if ch is None else (height, width, ch)
        out = np.zeros(shape)
        out[py, px] = vals
        return out

    maps = {
        "valid": valid,
        "zbar": scatter(zbar_v),
        "unit_normal": scatter(unit_n, 3),
        "basecolor": scatter(attrs[:, ATTR_BASECOLOR] * inv_a[:, None], 3),
        "roughness": scatter(attrs[:, ATTR_ROUGHNESS] * inv_a),
        "metalness": scatter(attrs[:, ATTR_METALNESS] * inv_a),
        "subsurfaceness": scatter(attrs[:, ATTR_SUBSURFACE] * inv_a),
    }
    cache = {"py": py, "px": px, "alpha": alpha, "inv_a": inv_a,
             "attrs": attrs, "zbar_v": zbar_v, "unit_n": unit_n,
             "n_norm": n_norm, "k0": k0, "k_full": gbuffer.attrs.shape[2],
             "shape": (height, width)}
    return maps, cache


def derived_maps_backward(cache, d_maps):
    """Adjoint of ``derived_maps``: cotangents per map -> G-buffer planes."""
    height, width = cache["shape"]
    py, px = cache["py"], cache["px"]
    k0, k_full = cache["k0"], cache["k_full"]
    d_attrs_img = np.zeros((height, width, k_full))
    d_alpha_img = np.zeros((height, width))
    d_depth_img = np.zeros((height, width))
    if len(py) == 0:
        return d_attrs_img, d_alpha_img, d_depth_img
    inv_a = cache["inv_a"]
    attrs = cache["attrs"]
    d_attrs_v = np.zeros_like(attrs)
    d_alpha_v = np.zeros(len(py))

    if "basecolor" in d_maps:
        d_map = d_maps["basecolor"][py, px]
        d_attrs_v[:, ATTR_BASECOLOR] += d_map * inv_a[:, None]
        d_alpha_v += -np.sum(d_map * attrs[:, ATTR_BASECOLOR], axis=-1) * inv_a**2
    for name, sl in (("roughness", ATTR_ROUGHNESS),
                     ("metalness", ATTR_METALNESS),
                     ("subsurfaceness", ATTR_SUBSURFACE)):
        if name in d_maps:
            d_map = d_maps[name][py, px]
            d_attrs_v[:, sl] += d_map * inv_a
            d_alpha_v += -d_map * attrs[:, sl] * inv_a**2
    if "unit_normal" in d_maps:
        d_un = d_maps["unit_normal"][py, px]
        un, n_norm = cache["unit_n"], cache["n_norm"]
        d_attrs_v[:, ATTR_NORMAL] += (
            d_un - un * np.sum(un * d_un, axis=-1, keepdims=True)) / n_norm
    if "zbar" in d_maps:
        d_zb = d_maps["zbar"][py, px]
        d_depth_img[py, px] += d_zb * inv_a
        d_alpha_v += -d_zb * cache["zbar_v"] * inv_a

    d_attrs_img[py, px, k0:] = d_attrs_v
    d_alpha_img[py, px] = d_alpha_v
    return d_attrs_img, d_alpha_img, d_depth_img
