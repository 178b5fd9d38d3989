"""Perspective projection of 3D Gaussians to screen-space splats.

Covariances transform through the affine approximation of the projective
map (camera-rotation conjugation followed by the perspective Jacobian),
with a low-pass floor added in screen space.  Both the forward map and its
exact reverse-mode adjoint are provided; culling decisions (near plane,
footprint outside the viewport) are treated as non-differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .scene import Camera, quat_rotmat_jacobian, SCALE_FLOOR


@dataclass
class RasterConfig:
    tile: int = 16  # tile edge in pixels
    lowpass: float = 0.3  # screen-space covariance floor, px^2
    alpha_max: float = 0.99  # per-splat opacity clamp
    t_min: float = 1e-4  # transmittance early-out; 0 disables
    cutoff_sigma: float = 3.0  # elliptical footprint cutoff, in sigmas
    z_near: float = 0.01  # near-plane cull distance


@dataclass
class ProjectedSplats:
    """Visible splats in screen space, plus the cache for the adjoint pass."""

    index: np.ndarray  # (M,) source Gaussian indices, int64
    mean2d: np.ndarray  # (M, 2) pixels
    depth: np.ndarray  # (M,) view-space z
    conic: np.ndarray  # (M, 3) inverse 2D covariance (a, b, c)
    radii: np.ndarray  # (M, 2) footprint half extents, pixels
    n_total: int  # Gaussian count before culling
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.index)


@numba.njit(parallel=True, cache=True)
def _geometry_kernel(rotations, log_scales, scale_floor, qn, s, floored, R,
                     cov3):
    n = rotations.shape[0]
    for i in numba.prange(n):
        w = rotations[i, 0]
        x = rotations[i, 1]
        y = rotations[i, 2]
        z = rotations[i, 3]
        norm = max(np.sqrt(w * w + x * x + y * y + z * z), 1e-12)
        w /= norm
        x /= norm
        y /= norm
        z /= norm
        qn[i, 0] = w
        qn[i, 1] = x
        qn[i, 2] = y
        qn[i, 3] = z
        R[i, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
        R[i, 0, 1] = 2.0 * (x * y - w * z)
        R[i, 0, 2] = 2.0 * (x * z + w * y)
        R[i, 1, 0] = 2.0 * (x * y + w * z)
        R[i, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
        R[i, 1, 2] = 2.0 * (y * z - w * x)
        R[i, 2, 0] = 2.0 * (x * z - w * y)
        R[i, 2, 1] = 2.0 * (y * z + w * x)
        R[i, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
        for a in range(3):
            sv = np.exp(log_scales[i, a])
            floored[i, a] = sv < scale_floor
            s[i, a] = max(sv, scale_floor)
        for r in range(3):
            for c in range(r, 3):
                acc = 0.0
                for a in range(3):
                    acc += R[i, r, a] * s[i, a] * s[i, a] * R[i, c, a]
                cov3[i, r, c] = acc
                cov3[i, c, r] = acc


def activate_geometry(positions, rotations, log_scales):
    """Read-path activations for the geometric parameters, with cache."""
    rotations = np.ascontiguousarray(rotations, dtype=np.float64)
    log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
    n = len(rotations)
    qn = np.empty((n, 4))
    s = np.empty((n, 3))
    floored = np.empty((n, 3), np.bool_)
    R = np.empty((n, 3, 3))
    cov3 = np.empty((n, 3, 3))
    _geometry_kernel(rotations, log_scales, SCALE_FLOOR, qn, s, floored, R,
                     cov3)
    cache = {
        "rotations": rotations,
        "qn": qn,
        "s": s,
        "floored": floored,
        "R": R,
    }
    return cov3, cache


def activate_geometry_backward(cache, d_cov3):
    """Adjoint of ``activate_geometry``: d cov3 -> (d rotations, d log_scales)."""
    qn, s, R = cache["qn"], cache["s"], cache["R"]
    G = 0.5 * (d_cov3 + np.swapaxes(d_cov3, -1, -2))
    D = s**2
    # d/dR of R D R^T under a symmetric cotangent.
    dR = 2.0 * (G @ (R * D[:, None, :]))
    RtGR = np.einsum("nji,njk,nkl->nil", R, G, R)
    d_s = 2.0 * s * np.einsum("nii->ni", RtGR)
    d_log_scales = d_s * s
    d_log_scales[cache["floored"]] = 0.0
    # Chain through the quaternion-to-rotation map and the normalization.
    Jq = quat_rotmat_jacobian(qn)  # (N, 3, 3, 4)
    d_qn = np.einsum("nij,nijk->nk", dR, Jq)
    q_raw = cache["rotations"]
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    d_rot = (d_qn - qn * np.sum(d_qn * qn, axis=-1, keepdims=True)) / norm
    return d_rot, d_log_scales


@numba.njit(parallel=True, cache=True)
def _project_kernel(positions, cov3, rot, trans, fx, fy, cx, cy, width,
                    height, lowpass, cutoff, z_near, xc, mean2d, cov2d_flat,
                    conic, radii, keep):
    n = positions.shape[0]
    for i in numba.prange(n):
        x = rot[0, 0] * positions[i, 0] + rot[0, 1] * positions[i, 1] \
            + rot[0, 2] * positions[i, 2] + trans[0]
        y = rot[1, 0] * positions[i, 0] + rot[1, 1] * positions[i, 1] \
            + rot[1, 2] * positions[i, 2] + trans[1]
        z = rot[2, 0] * positions[i, 0] + rot[2, 1] * positions[i, 1] \
            + rot[2, 2] * positions[i, 2] + trans[2]
        xc[i, 0] = x
        xc[i, 1] = y
        xc[i, 2] = z
        if z <= z_near:
            keep[i] = False
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        mean2d[i, 0] = u
        mean2d[i, 1] = v
        # camera-space covariance M = R S R^T
        m00 = m01 = m02 = m11 = m12 = m22 = 0.0
        for a in range(3):
            r0a = rot[0, a]
            r1a = rot[1, a]
            r2a = rot[2, a]
            s0 = cov3[i, a, 0]
            s1 = cov3[i, a, 1]
            s2 = cov3[i, a, 2]
            t0 = r0a * s0
            t1 = r0a * s1
            t2 = r0a * s2
            u0 = r1a * s0
            u1 = r1a * s1
            u2 = r1a * s2
            w0 = r2a * s0
            w1 = r2a * s1
            w2 = r2a * s2
            m00 += t0 * rot[0, 0] + t1 * rot[0, 1] + t2 * rot[0, 2]
            m01 += t0 * rot[1, 0] + t1 * rot[1, 1] + t2 * rot[1, 2]
            m02 += t0 * rot[2, 0] + t1 * rot[2, 1] + t2 * rot[2, 2]
            m11 += u0 * rot[1, 0] + u1 * rot[1, 1] + u2 * rot[1, 2]
            m12 += u0 * rot[2, 0] + u1 * rot[2, 1] + u2 * rot[2, 2]
            m22 += w0 * rot[2, 0] + w1 * rot[2, 1] + w2 * rot[2, 2]
        j00 = fx / z
        j02 = -fx * x / (z * z)
        j11 = fy / z
        j12 = -fy * y / (z * z)
        # C = J M J^T + lowpass I
        a0 = j00 * m00 + j02 * m02
        a1 = j00 * m01 + j02 * m12
        a2 = j00 * m02 + j02 * m22
        b0 = j11 * m01 + j12 * m02
        b1 = j11 * m11 + j12 * m12
        b2 = j11 * m12 + j12 * m22
        c00 = a0 * j00 + a2 * j02 + lowpass
        c01 = a1 * j11 + a2 * j12
        c11 = b1 * j11 + b2 * j12 + lowpass
        cov2d_flat[i, 0] = c00
        cov2d_flat[i, 1] = c01
        cov2d_flat[i, 2] = c11
        rx = cutoff * np.sqrt(max(c00, 0.0))
        ry = cutoff * np.sqrt(max(c11, 0.0))
        radii[i, 0] = rx
        radii[i, 1] = ry
        if u + rx < 0 or u - rx > width or v + ry < 0 or v - ry > height:
            keep[i] = False
            continue
        det = c00 * c11 - c01 * c01
        conic[i, 0] = c11 / det
        conic[i, 1] = -c01 / det
        conic[i, 2] = c00 / det
        keep[i] = True


def project(positions, cov3, camera: Camera, cfg: RasterConfig,
            want_cache: bool = True) -> ProjectedSplats:
    """Project world-space Gaussians to screen space, culling invisible ones."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    cov3 = np.ascontiguousarray(cov3, dtype=np.float64)
    n = len(positions)
    Rw = np.ascontiguousarray(camera.rotation)
    fx, fy = camera.focal
    cx, cy = camera.principal
    width, height = camera.resolution

    xc = np.empty((n, 3))
    mean2d = np.empty((n, 2))
    cov2d_flat = np.empty((n, 3))
    conic_full = np.empty((n, 3))
    radii_full = np.empty((n, 2))
    keep = np.empty(n, np.bool_)
    _project_kernel(positions, cov3, Rw, np.ascontiguousarray(camera.translation),
                    fx, fy, cx, cy, float(width), float(height), cfg.lowpass,
                    cfg.cutoff_sigma, cfg.z_near, xc, mean2d, cov2d_flat,
                    conic_full, radii_full, keep)
    idx = np.nonzero(keep)[0]
    conic = conic_full[idx]

    cache = {}
    if want_cache:
        xck = xc[idx]
        zs = xck[:, 2]
        M = (Rw @ cov3[idx]) @ Rw.T
        J = np.zeros((len(idx), 2, 3))
        J[:, 0, 0] = fx / zs
        J[:, 0, 2] = -fx * xck[:, 0] / zs**2
        J[:, 1, 1] = fy / zs
        J[:, 1, 2] = -fy * xck[:, 1] / zs**2
        cache = {
            "camera": camera, "cfg": cfg, "idx": idx, "xc": xck, "J": J,
            "M": M, "conic": conic, "cov3": cov3[idx],
        }
    return ProjectedSplats(
        index=idx,
        mean2d=mean2d[idx],
        depth=xc[idx, 2].copy(),
        conic=conic,
        radii=radii_full[idx],
        n_total=n,
        cache=cache,
    )


def project_backward(splats: ProjectedSplats, d_mean2d, d_conic, d_depth):
    """Adjoint of ``project``: screen-space cotangents -> (d positions, d cov3).

    Returns full-size (n_total) arrays; culled Gaussians receive zeros.
    """
    cache = splats.cache
    cam: Camera = cache["camera"]
    idx = cache["idx"]
    xc, J, M = cache["xc"], cache["J"], cache["M"]
    fx, fy = cam.focal
    z = xc[:, 2]

    # conic = inv(cov2d): build the full-matrix cotangent, then d inv.
    dMinv = np.empty((len(idx), 2, 2))
    dMinv[:, 0, 0] = d_conic[:, 0]
    dMinv[:, 0, 1] = 0.5 * d_conic[:, 1]
    dMinv[:, 1, 0] = 0.5 * d_conic[:, 1]
    dMinv[:, 1, 1] = d_conic[:, 2]
    conic_mat = np.empty_like(dMinv)
    conic_mat[:, 0, 0] = cache["conic"][:, 0]
    conic_mat[:, 0, 1] = cache["conic"][:, 1]
    conic_mat[:, 1, 0] = cache["conic"][:, 1]
    conic_mat[:, 1, 1] = cache["conic"][:, 2]
    G = -np.einsum("nij,njk,nkl->nil", conic_mat, dMinv, conic_mat)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))

    # C = J M J^T (low-pass shift has identity adjoint).
    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", G, J, M)
    dM = np.einsum("nji,njk,nkl->nil", J, G, J)
    d_cov3_k = np.einsum("ji,njk,kl->nil", cam.rotation, dM, cam.rotation)

    dxc = np.zeros_like(xc)
    dxc[:, 0] = dJ[:, 0, 2] * (-fx / z**2)
    dxc[:, 1] = dJ[:, 1, 2] * (-fy / z**2)
    dxc[:, 2] = (
        dJ[:, 0, 0] * (-fx / z**2)
        + dJ[:, 0, 2] * (2.0 * fx * xc[:, 0] / z**3)
        + dJ[:, 1, 1] * (-fy / z**2)
        + dJ[:, 1, 2] * (2.0 * fy * xc[:, 1] / z**3)
    )
    # Pixel position and depth outputs.
    dxc[:, 0] += d_mean2d[:, 0] * fx / z
    dxc[:, 1] += d_mean2d[:, 1] * fy / z
    dxc[:, 2] += (
        -d_mean2d[:, 0] * fx * xc[:, 0] / z**2
        - d_mean2d[:, 1] * fy * xc[:, 1] / z**2
        + d_depth
    )

    d_positions = np.zeros((splats.n_total, 3))
    d_cov3 = np.zeros((splats.n_total, 3, 3))
    d_positions[idx] = dxc @ cam.rotation
    d_cov3[idx] = d_cov3_k
    return d_positions, d_cov3
