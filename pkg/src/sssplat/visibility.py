"""Ray-traced transmittance toward lights over a BVH of Gaussian bounds.

Transmittance along a ray is the product of (1 - peak alpha) over every
Gaussian whose 3-sigma bounding box the ray hits; the peak alpha uses the
closed-form minimum Mahalanobis value along the ray (a 1D quadratic), so
no sampling is involved.  The brute-force traversal applies the same
candidacy rule and the same math, and must agree with the BVH exactly.
Targets produced here supervise the per-Gaussian SH visibility term; they
are plain values, not a gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .scene import PointLight, Scene
from .validation import normalize

_SIGMA_BOUND = 3.0


class EmptySceneError(ValueError):
    pass


@dataclass
class Bvh:
    node_lo: np.ndarray  # (M, 3)
    node_hi: np.ndarray  # (M, 3)
    node_left: np.ndarray  # (M,) child index or -1 for leaves
    node_right: np.ndarray  # (M,)
    node_start: np.ndarray  # (M,) leaf range into prim_order
    node_count: np.ndarray  # (M,) 0 for inner nodes
    prim_order: np.ndarray  # (N,)
    prim_lo: np.ndarray  # (N, 3) per-Gaussian boxes, original order
    prim_hi: np.ndarray  # (N, 3)
    centers: np.ndarray  # (N, 3)
    precisions: np.ndarray  # (N, 3, 3) inverse covariances
    opacities: np.ndarray  # (N,)

    @property
    def n_prims(self) -> int:
        return len(self.prim_order)


def build_bvh(scene: Scene, leaf_size: int = 4) -> Bvh:
    """Median-split BVH over the 3-sigma ellipsoid bounds of every Gaussian."""
    cloud = scene.cloud
    n = len(cloud)
    if n == 0:
        raise EmptySceneError("cannot build a BVH over an empty scene")
    cov3 = cloud.covariances()
    extent = _SIGMA_BOUND * np.sqrt(np.maximum(np.einsum("nii->ni", cov3), 0.0))
    mu = cloud.positions
    prim_lo = mu - extent
    prim_hi = mu + extent
    precisions = np.linalg.inv(cov3)
    opacities = cloud.opacities()

    order = np.arange(n, dtype=np.int64)
    centroids = mu.copy()
    node_lo, node_hi = [], []
    node_left, node_right, node_start, node_count = [], [], [], []

    def new_node():
        node_lo.append(np.zeros(3))
        node_hi.append(np.zeros(3))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_lo) - 1

    stack = [(new_node(), 0, n)]
    while stack:
        ni, lo, hi = stack.pop()
        idx = order[lo:hi]
        node_lo[ni] = prim_lo[idx].min(axis=0)
        node_hi[ni] = prim_hi[idx].max(axis=0)
        if hi - lo <= leaf_size:
            node_start[ni] = lo
            node_count[ni] = hi - lo
            continue
        c = centroids[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (hi - lo) // 2
        part = np.argpartition(c[:, axis], mid)
        order[lo:hi] = idx[part]
        left, right = new_node(), new_node()
        node_left[ni] = left
        node_right[ni] = right
        stack.append((left, lo, lo + mid))
        stack.append((right, lo + mid, hi))

    return Bvh(
        node_lo=np.array(node_lo), node_hi=np.array(node_hi),
        node_left=np.array(node_left, dtype=np.int64),
        node_right=np.array(node_right, dtype=np.int64),
        node_start=np.array(node_start, dtype=np.int64),
        node_count=np.array(node_count, dtype=np.int64),
        prim_order=order, prim_lo=prim_lo, prim_hi=prim_hi,
        centers=mu.copy(), precisions=precisions, opacities=opacities,
    )


@numba.njit(cache=True, inline="always")
def _slab_hit(lo, hi, origin, inv_dir, t_max):
    tmin = 0.0
    tmax = t_max
    for a in range(3):
        t0 = (lo[a] - origin[a]) * inv_dir[a]
        t1 = (hi[a] - origin[a]) * inv_dir[a]
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > tmin:
            tmin = t0
        if t1 < tmax:
            tmax = t1
        if tmin > tmax:
            return False
    return True


@numba.njit(cache=True, inline="always")
def _peak_alpha(mu, prec, opacity, origin, direction, t_max):
    ox = origin[0] - mu[0]
    oy = origin[1] - mu[1]
    oz = origin[2] - mu[2]
    adx = prec[0, 0] * direction[0] + prec[0, 1] * direction[1] + prec[0, 2] * direction[2]
    ady = prec[1, 0] * direction[0] + prec[1, 1] * direction[1] + prec[1, 2] * direction[2]
    adz = prec[2, 0] * direction[0] + prec[2, 1] * direction[1] + prec[2, 2] * direction[2]
    dad = direction[0] * adx + direction[1] * ady + direction[2] * adz
    oad = ox * adx + oy * ady + oz * adz
    t = -oad / dad if dad > 0 else 0.0
    if t < 1e-9:
        t = 1e-9
    if t > t_max:
        t = t_max
    px = ox + t * direction[0]
    py = oy + t * direction[1]
    pz = oz + t * direction[2]
    q = (px * (prec[0, 0] * px + prec[0, 1] * py + prec[0, 2] * pz)
         + py * (prec[1, 0] * px + prec[1, 1] * py + prec[1, 2] * pz)
         + pz * (prec[2, 0] * px + prec[2, 1] * py + prec[2, 2] * pz))
    return opacity * np.exp(-0.5 * q)


@numba.njit(parallel=True, cache=True)
def _trace_bvh(node_lo, node_hi, node_left, node_right, node_start, node_count,
               prim_order, prim_lo, prim_hi, mu, prec, opacity,
               origins, dirs, t_maxes, excludes, out_t):
    n_rays = origins.shape[0]
    n_prims = prim_order.shape[0]
    for rix in numba.prange(n_rays):
        origin = origins[rix]
        direction = dirs[rix]
        t_max = t_maxes[rix]
        exclude = excludes[rix]
        inv_dir = np.empty(3)
        for a in range(3):
            d = direction[a]
            inv_dir[a] = 1.0 / d if abs(d) > 1e-16 else (1e18 if d >= 0 else -1e18)
        cand = np.empty(n_prims, np.int64)
        n_cand = 0
        stack = np.empty(128, np.int64)
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            ni = stack[sp]
            if not _slab_hit(node_lo[ni], node_hi[ni], origin, inv_dir, t_max):
                continue
            if node_count[ni] > 0:
                for k in range(node_start[ni], node_start[ni] + node_count[ni]):
                    p = prim_order[k]
                    if p == exclude:
                        continue
                    if _slab_hit(prim_lo[p], prim_hi[p], origin, inv_dir, t_max):
                        cand[n_cand] = p
                        n_cand += 1
            else:
                stack[sp] = node_left[ni]
                sp += 1
                stack[sp] = node_right[ni]
                sp += 1
        # Ascending-index order keeps the product identical to brute force.
        for i in range(1, n_cand):
            key = cand[i]
            j = i - 1
            while j >= 0 and cand[j] > key:
                cand[j + 1] = cand[j]
                j -= 1
            cand[j + 1] = key
        trans = 1.0
        for i in range(n_cand):
            p = cand[i]
            trans *= 1.0 - _peak_alpha(mu[p], prec[p], opacity[p], origin,
                                       direction, t_max)
        out_t[rix] = trans


@numba.njit(parallel=True, cache=True)
def _trace_brute(prim_lo, prim_hi, mu, prec, opacity, origins, dirs, t_maxes,
                 excludes, out_t):
    n_rays = origins.shape[0]
    n_prims = mu.shape[0]
    for rix in numba.prange(n_rays):
        origin = origins[rix]
        direction = dirs[rix]
        t_max = t_maxes[rix]
        exclude = excludes[rix]
        inv_dir = np.empty(3)
        for a in range(3):
            d = direction[a]
            inv_dir[a] = 1.0 / d if abs(d) > 1e-16 else (1e18 if d >= 0 else -1e18)
        trans = 1.0
        for p in range(n_prims):
            if p == exclude:
                continue
            if _slab_hit(prim_lo[p], prim_hi[p], origin, inv_dir, t_max):
                trans *= 1.0 - _peak_alpha(mu[p], prec[p], opacity[p], origin,
                                           direction, t_max)
        out_t[rix] = trans


def trace_transmittance_batch(bvh: Bvh, origins, dirs, t_maxes=None,
                              excludes=None, brute_force: bool = False):
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    if t_maxes is None:
        t_maxes = np.full(n, np.inf)
    else:
        t_maxes = np.ascontiguousarray(t_maxes, dtype=np.float64).reshape(-1)
    if excludes is None:
        excludes = np.full(n, -1, dtype=np.int64)
    else:
        excludes = np.ascontiguousarray(excludes, dtype=np.int64).reshape(-1)
    out = np.empty(n)
    if brute_force:
        _trace_brute(bvh.prim_lo, bvh.prim_hi, bvh.centers, bvh.precisions,
                     bvh.opacities, origins, dirs, t_maxes, excludes, out)
    else:
        _trace_bvh(bvh.node_lo, bvh.node_hi, bvh.node_left, bvh.node_right,
                   bvh.node_start, bvh.node_count, bvh.prim_order, bvh.prim_lo,
                   bvh.prim_hi, bvh.centers, bvh.precisions, bvh.opacities,
                   origins, dirs, t_maxes, excludes, out)
    return out


def trace_transmittance(bvh: Bvh, origin, direction, exclude: int = -1,
                        t_max: float = np.inf) -> float:
    """Transmittance in [0, 1] from ``origin`` along unit ``direction``."""
    return float(trace_transmittance_batch(
        bvh, np.asarray(origin)[None], np.asarray(direction)[None],
        np.array([t_max]), np.array([exclude], dtype=np.int64))[0])


def _hemisphere_dirs(normals, count, rng):
    """Uniform hemisphere samples around each unit normal: (N, count, 3)."""
    n = len(normals)
    up = np.where(np.abs(normals[:, 2:3]) < 0.9,
                  np.tile([0.0, 0.0, 1.0], (n, 1)),
                  np.tile([1.0, 0.0, 0.0], (n, 1)))
    tx = normalize(np.cross(up, normals))
    ty = np.cross(normals, tx)
    z = rng.uniform(0.0, 1.0, (n, count))
    phi = rng.uniform(0.0, 2.0 * np.pi, (n, count))
    r = np.sqrt(np.maximum(1.0 - z**2, 0.0))
    return (r * np.cos(phi))[..., None] * tx[:, None, :] \
        + (r * np.sin(phi))[..., None] * ty[:, None, :] \
        + z[..., None] * normals[:, None, :]


def visibility_targets(bvh: Bvh, scene: Scene, light: PointLight,
                       samples: int = 16, rng=None):
    """Transmittance supervision for the SH visibility term.

    For each Gaussian: one ray toward the light (bounded by the light
    distance) plus ``samples - 1`` jittered directions on the hemisphere
    around its normal.  Returns (dirs (N, S, 3), values (N, S) in [0, 1]).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    cloud = scene.cloud
    n = len(cloud)
    mu = cloud.positions
    to_light = light.position - mu
    dist = np.linalg.norm(to_light, axis=-1)
    dirs = np.empty((n, samples, 3))
    dirs[:, 0, :] = to_light / dist[:, None]
    t_maxes = np.full((n, samples), np.inf)
    t_maxes[:, 0] = dist
    if samples > 1:
        dirs[:, 1:, :] = _hemisphere_dirs(cloud.unit_normals(), samples - 1, rng)
    excludes = np.repeat(np.arange(n, dtype=np.int64), samples)
    values = trace_transmittance_batch(
        bvh, np.repeat(mu, samples, axis=0), dirs.reshape(-1, 3),
        t_maxes.reshape(-1), excludes).reshape(n, samples)
    return dirs, values
