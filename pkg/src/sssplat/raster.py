"""Tile-based alpha compositing of 2D splats into a G-buffer.

Front-to-back compositing of arbitrary per-splat attribute vectors with
transmittance-weighted background, plus the exact adjoint.  Work is
parallel over tiles; every pixel is owned by exactly one tile, gradient
accumulation goes through per-(tile, splat) slots reduced in a fixed
order, so results are bit-identical for any worker count.  A splat
contributes to a pixel iff its Mahalanobis distance is inside the
configured cutoff; the naive reference evaluates the same rule for every
(pixel, splat) pair and must match the tiled path bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .projection import ProjectedSplats, RasterConfig


@dataclass
class GBuffer:
    attrs: np.ndarray  # (H, W, K) accumulated attributes (+ background term)
    alpha: np.ndarray  # (H, W) final opacity 1 - prod(1 - a_i)
    depth: np.ndarray  # (H, W) alpha-weighted view depth
    n_contrib: np.ndarray  # (H, W) int32 compositing walk lengths
    background: np.ndarray  # (K,)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def resolution(self):
        h, w = self.alpha.shape
        return (w, h)


@numba.njit(cache=True)
def _bin_splats(mean2d, radii, tile, tiles_x, tiles_y, width, height):
    """CSR tile lists; items keep the incoming (depth-sorted) splat order.

    Also returns each splat's pixel-rect so the per-pixel walk can reject
    non-overlapping candidates with integer compares before the exact
    Mahalanobis test (the rect covers the whole cutoff ellipse).
    """
    m = mean2d.shape[0]
    n_tiles = tiles_x * tiles_y
    rect = np.empty((m, 4), np.int32)
    counts = np.zeros(n_tiles + 1, np.int64)
    for i in range(m):
        # Pixel-center coverage of the footprint rectangle, 1px safety margin.
        x0 = int(np.floor(mean2d[i, 0] - radii[i, 0] - 0.5)) - 1
        x1 = int(np.ceil(mean2d[i, 0] + radii[i, 0] - 0.5)) + 1
        y0 = int(np.floor(mean2d[i, 1] - radii[i, 1] - 0.5)) - 1
        y1 = int(np.ceil(mean2d[i, 1] + radii[i, 1] - 0.5)) + 1
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, width - 1)
        y1 = min(y1, height - 1)
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        if x1 < x0 or y1 < y0:
            rect[i, 0] = 1
            rect[i, 1] = 0  # empty
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    items = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for i in range(m):
        if rect[i, 1] < rect[i, 0] or rect[i, 3] < rect[i, 2]:
            continue
        for ty in range(rect[i, 2] // tile, rect[i, 3] // tile + 1):
            for tx in range(rect[i, 0] // tile, rect[i, 1] // tile + 1):
                t = ty * tiles_x + tx
                items[fill[t]] = i
                fill[t] += 1
    return offsets, items, rect


@numba.njit(parallel=True, cache=True)
def _forward_tiles(e_geom, e_rect, items, attrs, offsets,
                   tiles_x, tile, width, height, cutoff_sq, alpha_max, t_min,
                   out_attrs, out_alpha, out_depth, n_contrib):
    # e_geom rows: [mean_x, mean_y, conic_a, conic_b, conic_c, opacity, depth].
    # Candidates iterate outermost (front to back); per-pixel transmittance
    # lives in a tile-local buffer, so each candidate touches only the
    # pixels inside its own footprint rectangle.
    n_tiles = offsets.shape[0] - 1
    k_ch = attrs.shape[1]
    for t in numba.prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        lo = offsets[t]
        hi = offsets[t + 1]
        w_t = x1 - x0
        h_t = y1 - y0
        trans = np.ones((h_t, w_t))
        cnt = np.zeros((h_t, w_t), np.int32)
        n_active = h_t * w_t
        for e in range(lo, hi):
            if n_active == 0:
                break
            ex0 = max(e_rect[e, 0], x0)
            ex1 = min(e_rect[e, 1], x1 - 1)
            ey0 = max(e_rect[e, 2], y0)
            ey1 = min(e_rect[e, 3], y1 - 1)
            mx = e_geom[e, 0]
            my = e_geom[e, 1]
            ca = e_geom[e, 2]
            cb = e_geom[e, 3]
            cc = e_geom[e, 4]
            op = e_geom[e, 5]
            zd = e_geom[e, 6]
            i = items[e]
            for py in range(ey0, ey1 + 1):
                dy = py + 0.5 - my
                # conservative column span of the cutoff ellipse on this row
                disc = (cb * cb - ca * cc) * dy * dy + ca * cutoff_sq
                if disc < 0.0:
                    continue
                root = np.sqrt(disc) / ca
                mid = mx - cb * dy / ca
                rx0 = max(ex0, int(np.floor(mid - root - 0.5)))
                rx1 = min(ex1, int(np.ceil(mid + root + 0.5)))
                for px in range(rx0, rx1 + 1):
                    tr = trans[py - y0, px - x0]
                    if tr < t_min:
                        continue
                    dx = px + 0.5 - mx
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q > cutoff_sq:
                        continue
                    a = op * np.exp(-0.5 * q)
                    if a > alpha_max:
                        a = alpha_max
                    w = tr * a
                    for k in range(k_ch):
                        out_attrs[py, px, k] += w * attrs[i, k]
                    out_depth[py, px] += w * zd
                    tr *= 1.0 - a
                    trans[py - y0, px - x0] = tr
                    cnt[py - y0, px - x0] += 1
                    if tr < t_min:
                        n_active -= 1
        for py in range(y0, y1):
            for px in range(x0, x1):
                out_alpha[py, px] = 1.0 - trans[py - y0, px - x0]
                n_contrib[py, px] = cnt[py - y0, px - x0]


@numba.njit(cache=True)
def _forward_naive(mean2d, conic, depth, opacity, attrs,
                   width, height, cutoff_sq, alpha_max, t_min,
                   out_attrs, out_alpha, out_depth, n_contrib):
    m = mean2d.shape[0]
    k_ch = attrs.shape[1]
    for py in range(height):
        for px in range(width):
            pxc = px + 0.5
            pyc = py + 0.5
            trans = 1.0
            cnt = 0
            for i in range(m):
                dx = pxc - mean2d[i, 0]
                dy = pyc - mean2d[i, 1]
                q = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                     + conic[i, 2] * dy * dy)
                if q > cutoff_sq:
                    continue
                a = opacity[i] * np.exp(-0.5 * q)
                if a > alpha_max:
                    a = alpha_max
                w = trans * a
                for k in range(k_ch):
                    out_attrs[py, px, k] += w * attrs[i, k]
                out_depth[py, px] += w * depth[i]
                trans *= 1.0 - a
                cnt += 1
                if trans < t_min:
                    break
            out_alpha[py, px] = 1.0 - trans
            n_contrib[py, px] = cnt


@numba.njit(parallel=True, cache=True)
def _backward_tiles(e_geom, e_rect, items, attrs, offsets,
                    tiles_x, tile, width, height, cutoff_sq, alpha_max, t_min,
                    out_alpha, n_contrib, d_attrs_img, d_alpha_img, d_depth_img,
                    entry_grads):
    # Reverse candidate-major replay.  A counting pre-pass recovers, per
    # pixel, how many candidates pass the footprint test in total, so the
    # reverse walk can tell which of them fell beyond the early-out point.
    n_tiles = offsets.shape[0] - 1
    k_ch = attrs.shape[1]
    for t in numba.prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        lo = offsets[t]
        hi = offsets[t + 1]
        if hi == lo:
            continue
        w_t = x1 - x0
        h_t = y1 - y0
        passes = np.zeros((h_t, w_t), np.int32)
        for e in range(lo, hi):
            ex0 = max(e_rect[e, 0], x0)
            ex1 = min(e_rect[e, 1], x1 - 1)
            ey0 = max(e_rect[e, 2], y0)
            ey1 = min(e_rect[e, 3], y1 - 1)
            mx = e_geom[e, 0]
            my = e_geom[e, 1]
            ca = e_geom[e, 2]
            cb = e_geom[e, 3]
            cc = e_geom[e, 4]
            for py in range(ey0, ey1 + 1):
                dy = py + 0.5 - my
                for px in range(ex0, ex1 + 1):
                    dx = px + 0.5 - mx
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q <= cutoff_sq:
                        passes[py - y0, px - x0] += 1
        t_cur = np.empty((h_t, w_t))
        suffix = np.zeros((h_t, w_t, k_ch))
        suffix_z = np.zeros((h_t, w_t))
        for py in range(y0, y1):
            for px in range(x0, x1):
                t_cur[py - y0, px - x0] = 1.0 - out_alpha[py, px]
        for e in range(hi - 1, lo - 1, -1):
            ex0 = max(e_rect[e, 0], x0)
            ex1 = min(e_rect[e, 1], x1 - 1)
            ey0 = max(e_rect[e, 2], y0)
            ey1 = min(e_rect[e, 3], y1 - 1)
            mx = e_geom[e, 0]
            my = e_geom[e, 1]
            ca = e_geom[e, 2]
            cb = e_geom[e, 3]
            cc = e_geom[e, 4]
            op = e_geom[e, 5]
            zd = e_geom[e, 6]
            i = items[e]
            for py in range(ey0, ey1 + 1):
                dy = py + 0.5 - my
                for px in range(ex0, ex1 + 1):
                    dx = px + 0.5 - mx
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q > cutoff_sq:
                        continue
                    ly = py - y0
                    lx = px - x0
                    rank = passes[ly, lx] - 1  # 0-based forward position
                    passes[ly, lx] = rank
                    if rank >= n_contrib[py, px]:
                        continue  # beyond the early-out: never composited
                    g_w = np.exp(-0.5 * q)
                    a = op * g_w
                    if a > alpha_max:
                        a = alpha_max
                    one_m = 1.0 - a
                    t_i = t_cur[ly, lx] / one_m
                    w = t_i * a
                    t_end = 1.0 - out_alpha[py, px]
                    d_alpha_i = -d_alpha_img[py, px] * (-t_end / one_m)
                    for k in range(k_ch):
                        g = d_attrs_img[py, px, k]
                        entry_grads[e, 7 + k] += w * g
                        d_alpha_i += g * (t_i * attrs[i, k]
                                          - suffix[ly, lx, k] / one_m)
                    gz = d_depth_img[py, px]
                    entry_grads[e, 6] += w * gz
                    d_alpha_i += gz * (t_i * zd - suffix_z[ly, lx] / one_m)
                    if op * g_w <= alpha_max:  # clamp inactive
                        entry_grads[e, 5] += d_alpha_i * g_w
                        dq = d_alpha_i * a * (-0.5)
                        entry_grads[e, 0] += dq * (-(2.0 * ca * dx
                                                     + 2.0 * cb * dy))
                        entry_grads[e, 1] += dq * (-(2.0 * cb * dx
                                                     + 2.0 * cc * dy))
                        entry_grads[e, 2] += dq * dx * dx
                        entry_grads[e, 3] += dq * 2.0 * dx * dy
                        entry_grads[e, 4] += dq * dy * dy
                    for k in range(k_ch):
                        suffix[ly, lx, k] += w * attrs[i, k]
                    suffix_z[ly, lx] += w * zd
                    t_cur[ly, lx] = t_i


@numba.njit(parallel=True, cache=True)
def _gather_entries(geom, rect, items, e_geom, e_rect):
    for e in numba.prange(items.shape[0]):
        i = items[e]
        for c in range(geom.shape[1]):
            e_geom[e, c] = geom[i, c]
        for c in range(4):
            e_rect[e, c] = rect[i, c]


@numba.njit(cache=True)
def _reduce_entries(items, entry_grads, out):
    for e in range(items.shape[0]):
        i = items[e]
        for c in range(entry_grads.shape[1]):
            out[i, c] += entry_grads[e, c]


def rasterize(splats: ProjectedSplats, attrs, opacities, cfg: RasterConfig,
              resolution, background=None) -> GBuffer:
    """Composite splats front-to-back into a G-buffer.

    ``attrs`` (M, K) and ``opacities`` (M,) are aligned with ``splats``.
    Per-pixel channel values follow the front-to-back blending sum plus
    transmittance-weighted background.
    """
    width, height = resolution
    attrs = np.ascontiguousarray(attrs, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    opacities = np.ascontiguousarray(opacities, dtype=np.float64)
    k_ch = attrs.shape[1]
    if background is None:
        background = np.zeros(k_ch)
    background = np.ascontiguousarray(background, dtype=np.float64)

    order = np.lexsort((splats.index, splats.depth))
    geom = np.empty((len(splats), 9))
    geom[:, 0:2] = splats.mean2d
    geom[:, 2:5] = splats.conic
    geom[:, 5] = opacities
    geom[:, 6] = splats.depth
    geom[:, 7:9] = splats.radii
    geom = geom[order]
    attrs_s = np.ascontiguousarray(attrs[order])

    tiles_x = (width + cfg.tile - 1) // cfg.tile
    tiles_y = (height + cfg.tile - 1) // cfg.tile
    offsets, items, rect = _bin_splats(np.ascontiguousarray(geom[:, 0:2]),
                                       np.ascontiguousarray(geom[:, 7:9]),
                                       cfg.tile, tiles_x, tiles_y,
                                       width, height)
    # entry-major hot data: sequential walks per tile
    e_geom = np.empty((len(items), geom.shape[1]))
    e_rect = np.empty((len(items), 4), np.int32)
    _gather_entries(geom, rect, items, e_geom, e_rect)

    out_attrs = np.zeros((height, width, k_ch))
    out_alpha = np.zeros((height, width))
    out_depth = np.zeros((height, width))
    n_contrib = np.zeros((height, width), np.int32)
    if len(geom):
        _forward_tiles(e_geom, e_rect, items, attrs_s, offsets,
                       tiles_x, cfg.tile, width, height,
                       cfg.cutoff_sigma**2, cfg.alpha_max, cfg.t_min,
                       out_attrs, out_alpha, out_depth, n_contrib)
    if np.any(background):
        out_attrs += (1.0 - out_alpha)[:, :, None] * background
    cache = {
        "order": order, "offsets": offsets, "items": items,
        "e_geom": e_geom, "e_rect": e_rect, "attrs": attrs_s,
        "tiles_x": tiles_x, "cfg": cfg, "m": len(splats),
    }
    return GBuffer(out_attrs, out_alpha, out_depth, n_contrib, background,
                   cache=cache)


def rasterize_reference(splats: ProjectedSplats, attrs, opacities,
                        cfg: RasterConfig, resolution, background=None) -> GBuffer:
    """Naive per-pixel evaluation of the compositing sum (test oracle)."""
    width, height = resolution
    attrs = np.ascontiguousarray(attrs, dtype=np.float64)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    opacities = np.ascontiguousarray(opacities, dtype=np.float64)
    k_ch = attrs.shape[1]
    if background is None:
        background = np.zeros(k_ch)
    background = np.ascontiguousarray(background, dtype=np.float64)
    order = np.lexsort((splats.index, splats.depth))
    out_attrs = np.zeros((height, width, k_ch))
    out_alpha = np.zeros((height, width))
    out_depth = np.zeros((height, width))
    n_contrib = np.zeros((height, width), np.int32)
    if len(splats):
        _forward_naive(np.ascontiguousarray(splats.mean2d[order]),
                       np.ascontiguousarray(splats.conic[order]),
                       np.ascontiguousarray(splats.depth[order]),
                       opacities[order],
                       np.ascontiguousarray(attrs[order]),
                       width, height, cfg.cutoff_sigma**2, cfg.alpha_max,
                       cfg.t_min, out_attrs, out_alpha, out_depth, n_contrib)
    if np.any(background):
        out_attrs += (1.0 - out_alpha)[:, :, None] * background
    return GBuffer(out_attrs, out_alpha, out_depth, n_contrib, background)


def rasterize_backward(gbuffer: GBuffer, d_attrs_img, d_alpha_img, d_depth_img):
    """Adjoint of ``rasterize``; cotangents per output plane.

    Returns per-input-splat gradients (aligned with the ``splats`` given to
    the forward call): dict with ``attrs`` (M, K), ``opacity`` (M,),
    ``mean2d`` (M, 2), ``conic`` (M, 3), ``depth`` (M,).
    """
    c = gbuffer.cache
    if not c:
        raise ValueError("gbuffer was not produced by rasterize() with cache")
    cfg: RasterConfig = c["cfg"]
    height, width = gbuffer.alpha.shape
    k_ch = gbuffer.attrs.shape[2]
    d_attrs_img = np.ascontiguousarray(d_attrs_img, dtype=np.float64)
    d_depth_img = np.ascontiguousarray(d_depth_img, dtype=np.float64)
    # Background enters as out += (1 - alpha) * bg.
    d_alpha_total = np.ascontiguousarray(
        d_alpha_img - d_attrs_img @ gbuffer.background, dtype=np.float64)

    m = c["m"]
    out = {
        "mean2d": np.zeros((m, 2)), "conic": np.zeros((m, 3)),
        "opacity": np.zeros(m), "depth": np.zeros(m),
        "attrs": np.zeros((m, k_ch)),
    }
    if m == 0 or len(c["items"]) == 0:
        return out
    entry_grads = np.zeros((len(c["items"]), 7 + k_ch))
    _backward_tiles(c["e_geom"], c["e_rect"], c["items"], c["attrs"],
                    c["offsets"], c["tiles_x"], cfg.tile, width, height,
                    cfg.cutoff_sigma**2, cfg.alpha_max, cfg.t_min,
                    gbuffer.alpha, gbuffer.n_contrib, d_attrs_img,
                    d_alpha_total, d_depth_img, entry_grads)
    per_sorted = np.zeros((m, 7 + k_ch))
    _reduce_entries(c["items"], entry_grads, per_sorted)
    order = c["order"]
    out["mean2d"][order] = per_sorted[:, 0:2]
    out["conic"][order] = per_sorted[:, 2:5]
    out["opacity"][order] = per_sorted[:, 5]
    out["depth"][order] = per_sorted[:, 6]
    out["attrs"][order] = per_sorted[:, 7:]
    return out
