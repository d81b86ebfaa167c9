"""Per-tile compositing kernels.

Each kernel processes a list of tile ids and writes only to pixels and list
entries owned by those tiles, so any partition of tiles across threads gives
bit-identical output. All kernels release the GIL.
"""
import math

import numpy as np
from numba import njit

# per-entry gradient layout: r, g, b, opacity, band, x0, y0, x1, y1, x2, y2
N_GRAD = 11


@njit(cache=True, nogil=True, inline="always")
def _signed_distance(px, py, xy, m, orient):
    """Signed distance from (px, py) to triangle m, positive inside.

    Returns (d, edge, t, ux, uy): the closest edge, its segment parameter and
    the unit direction from the closest boundary point to the pixel.
    """
    best = 1e300
    best_e = 0
    best_t = 0.0
    best_ux = 0.0
    best_uy = 0.0
    inside = True
    for e in range(3):
        ax = xy[m, e, 0]
        ay = xy[m, e, 1]
        bx = xy[m, (e + 1) % 3, 0]
        by = xy[m, (e + 1) % 3, 1]
        ex = bx - ax
        ey = by - ay
        rx = px - ax
        ry = py - ay
        if (ex * ry - ey * rx) * orient < 0.0:
            inside = False
        ee = ex * ex + ey * ey
        t = (rx * ex + ry * ey) / ee if ee > 0.0 else 0.0
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = rx - t * ex
        qy = ry - t * ey
        d2 = qx * qx + qy * qy
        if d2 < best:
            best = d2
            best_e = e
            best_t = t
            best_ux = qx
            best_uy = qy
    dist = math.sqrt(best)
    if dist > 0.0:
        best_ux /= dist
        best_uy /= dist
    if inside:
        return dist, best_e, best_t, best_ux, best_uy
    return -dist, best_e, best_t, best_ux, best_uy


@njit(cache=True, nogil=True, inline="always")
def _edge_line(xy, m, e, orient):
    """Unit line (a, b, c) of edge e with a*x + b*y + c > 0 on the inner side.

    A degenerate edge returns a line that never rejects.
    """
    ax = xy[m, e, 0]
    ay = xy[m, e, 1]
    ex = xy[m, (e + 1) % 3, 0] - ax
    ey = xy[m, (e + 1) % 3, 1] - ay
    ln = math.sqrt(ex * ex + ey * ey)
    if ln == 0.0:
        return (0.0, 0.0, 1e300)
    a = -ey * orient / ln
    b = ex * orient / ln
    return (a, b, -(a * ax + b * ay))


@njit(cache=True, nogil=True, inline="always")
def _window(d, b):
    """Smoothstep coverage and its derivative in x = (d + b) / 2b."""
    x = (d + b) / (2.0 * b)
    if x <= 0.0:
        return 0.0, 0.0
    if x >= 1.0:
        return 1.0, 0.0
    return x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x)


@njit(cache=True, nogil=True, inline="always")
def _pixel_rect(m, bbox, x0, x1, y0, y1):
    """Pixel range of a triangle's box clipped to a tile (inclusive bounds)."""
    c0 = max(x0, int(math.ceil(bbox[m, 0])))
    c1 = min(x1, int(math.floor(bbox[m, 1])))
    r0 = max(y0, int(math.ceil(bbox[m, 2])))
    r1 = min(y1, int(math.floor(bbox[m, 3])))
    return c0, c1, r0, r1


@njit(cache=True, nogil=True)
def bin_entries(order, tx0, tx1, ty0, ty1, ntx, ntiles):
    """Counting sort of (tile, triangle) pairs by tile.

    Triangles are visited in ``order`` so each tile's list inherits it.
    Returns ``(offsets, indices)``.
    """
    offsets = np.zeros(ntiles + 1, dtype=np.int64)
    for m in range(order.shape[0]):
        for ty in range(ty0[m], ty1[m] + 1):
            for tx in range(tx0[m], tx1[m] + 1):
                offsets[ty * ntx + tx + 1] += 1
    for t in range(ntiles):
        offsets[t + 1] += offsets[t]
    fill = offsets[:-1].copy()
    indices = np.empty(offsets[ntiles], dtype=np.int64)
    for j in range(order.shape[0]):
        m = order[j]
        for ty in range(ty0[m], ty1[m] + 1):
            for tx in range(tx0[m], tx1[m] + 1):
                t = ty * ntx + tx
                indices[fill[t]] = m
                fill[t] += 1
    return offsets, indices


@njit(cache=True, nogil=True)
def record_bounds(offsets, indices, bbox, H, W, tile, ntx):
    """Per-tile upper bound on contribution records (clipped box areas)."""
    ntiles = offsets.shape[0] - 1
    out = np.zeros(ntiles + 1, dtype=np.int64)
    for t_id in range(ntiles):
        x0 = (t_id % ntx) * tile
        y0 = (t_id // ntx) * tile
        x1 = min(W, x0 + tile) - 1
        y1 = min(H, y0 + tile) - 1
        total = 0
        for k in range(offsets[t_id], offsets[t_id + 1]):
            c0, c1, r0, r1 = _pixel_rect(indices[k], bbox, x0, x1, y0, y1)
            if c1 >= c0 and r1 >= r0:
                total += (c1 - c0 + 1) * (r1 - r0 + 1)
        out[t_id + 1] = out[t_id] + total
    return out


@njit(cache=True, nogil=True)
def forward_tiles(tiles, offsets, indices, xy, orient, bbox, opacity, band, color, zkey, normal,
                  H, W, tile, ntx, bg, t_min, rgb, depth, nrm, alpha,
                  record, rec_off, rec_p, rec_k, rec_t, rec_n, rec_g, rec_e):
    """Composite every pixel of the listed tiles.

    Triangles are visited in list (depth) order and splatted over the part
    of their box inside the tile; a pixel stops accepting contributions once
    its transmittance falls below ``t_min``. Per pixel this is the same
    sequence of operations as a pixel-major loop over the list.

    With ``record`` set, every contribution is logged as (tile-local pixel,
    list entry, transmittance before it) starting at ``rec_off[tile]``,
    together with its coverage geometry in ``rec_g`` and ``rec_e``.
    """
    acc = np.empty((tile * tile, 8))
    for ti in range(tiles.shape[0]):
        t_id = tiles[ti]
        x0 = (t_id % ntx) * tile
        y0 = (t_id // ntx) * tile
        x1 = min(W, x0 + tile) - 1
        y1 = min(H, y0 + tile) - 1
        tw = x1 - x0 + 1
        npix = tw * (y1 - y0 + 1)
        for p in range(npix):
            acc[p, 0] = 1.0
            for j in range(1, 8):
                acc[p, j] = 0.0
        done = 0
        n_rec = 0
        base = rec_off[t_id] if record else 0
        for k in range(offsets[t_id], offsets[t_id + 1]):
            m = indices[k]
            c0, c1, r0, r1 = _pixel_rect(m, bbox, x0, x1, y0, y1)
            if c1 < c0 or r1 < r0:
                continue
            # inward edge-line normals: a pixel further than the band outside
            # any edge line has zero coverage (margin keeps this conservative)
            cut = -(band[m] * (1.0 + 1e-6) + 1e-9)
            l0 = _edge_line(xy, m, 0, orient[m])
            l1 = _edge_line(xy, m, 1, orient[m])
            l2 = _edge_line(xy, m, 2, orient[m])
            for r in range(r0, r1 + 1):
                for c in range(c0, c1 + 1):
                    p = (r - y0) * tw + (c - x0)
                    T = acc[p, 0]
                    if T < t_min:
                        continue
                    px = float(c)
                    py = float(r)
                    if (l0[0] * px + l0[1] * py + l0[2] < cut or l1[0] * px + l1[1] * py + l1[2] < cut
                            or l2[0] * px + l2[1] * py + l2[2] < cut):
                        continue
                    d, e, tt, ux, uy = _signed_distance(px, py, xy, m, orient[m])
                    w, sp = _window(d, band[m])
                    a = opacity[m] * w
                    if a <= 0.0:
                        continue
                    if record:
                        rec_p[base + n_rec] = p
                        rec_k[base + n_rec] = k
                        rec_t[base + n_rec] = T
                        rec_g[base + n_rec, 0] = d
                        rec_g[base + n_rec, 1] = tt
                        rec_g[base + n_rec, 2] = ux
                        rec_g[base + n_rec, 3] = uy
                        rec_g[base + n_rec, 4] = w
                        rec_g[base + n_rec, 5] = sp
                        rec_e[base + n_rec] = e
                        n_rec += 1
                    wt = a * T
                    acc[p, 1] += color[m, 0] * wt
                    acc[p, 2] += color[m, 1] * wt
                    acc[p, 3] += color[m, 2] * wt
                    acc[p, 4] += zkey[m] * wt
                    acc[p, 5] += normal[m, 0] * wt
                    acc[p, 6] += normal[m, 1] * wt
                    acc[p, 7] += normal[m, 2] * wt
                    T *= 1.0 - a
                    acc[p, 0] = T
                    if T < t_min:
                        done += 1
            if done == npix:
                break
        if record:
            rec_n[t_id] = n_rec
        for r in range(y0, y1 + 1):
            for c in range(x0, x1 + 1):
                p = (r - y0) * tw + (c - x0)
                T = acc[p, 0]
                rgb[r, c, 0] = acc[p, 1] + T * bg[0]
                rgb[r, c, 1] = acc[p, 2] + T * bg[1]
                rgb[r, c, 2] = acc[p, 3] + T * bg[2]
                a_tot = 1.0 - T
                alpha[r, c] = a_tot
                depth[r, c] = acc[p, 4] / a_tot if a_tot > 1e-6 else 0.0
                nn = math.sqrt(acc[p, 5] ** 2 + acc[p, 6] ** 2 + acc[p, 7] ** 2)
                if nn > 0.0:
                    nrm[r, c, 0] = acc[p, 5] / nn
                    nrm[r, c, 1] = acc[p, 6] / nn
                    nrm[r, c, 2] = acc[p, 7] / nn
                else:
                    nrm[r, c, 0] = 0.0
                    nrm[r, c, 1] = 0.0
                    nrm[r, c, 2] = 0.0


@njit(cache=True, nogil=True)
def backward_tiles(tiles, indices, opacity, band, color, H, W, tile, ntx, bg,
                   g_rgb, g_alpha, rec_off, rec_p, rec_k, rec_t, rec_n, rec_g, rec_e, grads):
    """Accumulate per-entry gradients into ``grads[k]`` for list entry ``k``.

    Works from the forward pass's contribution records: they are grouped by
    pixel and walked back to front, reusing the coverage terms logged by
    the forward pass.
    """
    npx_max = tile * tile
    cnt = np.zeros(npx_max + 1, dtype=np.int64)
    fill = np.zeros(npx_max, dtype=np.int64)
    for ti in range(tiles.shape[0]):
        t_id = tiles[ti]
        n_rec = rec_n[t_id]
        if n_rec == 0:
            continue
        base = rec_off[t_id]
        x0 = (t_id % ntx) * tile
        y0 = (t_id // ntx) * tile
        x1 = min(W, x0 + tile) - 1
        y1 = min(H, y0 + tile) - 1
        tw = x1 - x0 + 1
        npix = tw * (y1 - y0 + 1)
        # stable counting sort of the records by pixel
        for p in range(npix + 1):
            cnt[p] = 0
        for i in range(n_rec):
            cnt[rec_p[base + i] + 1] += 1
        for p in range(npix):
            cnt[p + 1] += cnt[p]
            fill[p] = cnt[p]
        order = np.empty(n_rec, dtype=np.int64)
        for i in range(n_rec):
            p = rec_p[base + i]
            order[fill[p]] = base + i
            fill[p] += 1
        for r in range(y0, y1 + 1):
            for c in range(x0, x1 + 1):
                p = (r - y0) * tw + (c - x0)
                gr = g_rgb[r, c, 0]
                gg = g_rgb[r, c, 1]
                gb = g_rgb[r, c, 2]
                ga = g_alpha[r, c]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0:
                    continue
                # colour behind the current entry and transmittance after it
                br = bg[0]
                bgc = bg[1]
                bb = bg[2]
                q = 1.0
                for j in range(cnt[p + 1] - 1, cnt[p] - 1, -1):
                    i = order[j]
                    k = rec_k[i]
                    Ti = rec_t[i]
                    m = indices[k]
                    d = rec_g[i, 0]
                    tt = rec_g[i, 1]
                    ux = rec_g[i, 2]
                    uy = rec_g[i, 3]
                    w = rec_g[i, 4]
                    sp = rec_g[i, 5]
                    e = rec_e[i]
                    b = band[m]
                    a = opacity[m] * w
                    c0 = color[m, 0]
                    c1 = color[m, 1]
                    c2 = color[m, 2]
                    wt = a * Ti
                    grads[k, 0] += gr * wt
                    grads[k, 1] += gg * wt
                    grads[k, 2] += gb * wt
                    g_a = Ti * (gr * (c0 - br) + gg * (c1 - bgc) + gb * (c2 - bb)) + ga * Ti * q
                    grads[k, 3] += g_a * w
                    g_w = g_a * opacity[m]
                    grads[k, 4] += g_w * (-sp * d / (2.0 * b * b))
                    g_d = g_w * sp / (2.0 * b)
                    if g_d != 0.0:
                        s = 1.0 if d >= 0.0 else -1.0
                        fx = -s * ux * g_d
                        fy = -s * uy * g_d
                        e1 = (e + 1) % 3
                        grads[k, 5 + 2 * e] += fx * (1.0 - tt)
                        grads[k, 6 + 2 * e] += fy * (1.0 - tt)
                        grads[k, 5 + 2 * e1] += fx * tt
                        grads[k, 6 + 2 * e1] += fy * tt
                    br = c0 * a + (1.0 - a) * br
                    bgc = c1 * a + (1.0 - a) * bgc
                    bb = c2 * a + (1.0 - a) * bb
                    q *= 1.0 - a


@njit(cache=True, nogil=True)
def reduce_entries(indices, entries, m):
    """Sum per-entry gradient rows per triangle, in list order."""
    out = np.zeros((m, entries.shape[1]))
    for k in range(indices.shape[0]):
        i = indices[k]
        for j in range(entries.shape[1]):
            out[i, j] += entries[k, j]
    return out


@njit(cache=True, nogil=True)
def backprop_chain(ids, g_color, g_band, g_xy, g_opacity, cam, R_pose, fx, fy, rotation, template, boost, base,
                   scale_logits, depth, footprint, mapped, sharpened, density, sh0, blur_raw, d_sharp, d_map,
                   c0, kappa, beta, floor_active, floor, boost_on, threshold, gain, s_min, s_max,
                   o_center, o_scale, o_depth, o_density, o_sh0, o_blur, o_gv):
    """Chain screen-space gradients to raw attributes, one triangle at a time.

    ``d_sharp`` and ``d_map`` are the sharpening and opacity-map slopes per
    screen triangle; ``o_gv`` receives the world-vertex gradients.
    """
    for j in range(ids.shape[0]):
        n = ids[j]
        for c in range(3):
            pre = sh0[n, c] * c0 + 0.5
            o_sh0[n, c] = g_color[j, c] * c0 if 0.0 < pre < 1.0 else 0.0
        sig = 1.0 / (1.0 + math.exp(-blur_raw[n]))
        o_blur[n] = g_band[j] * kappa * beta * sig * (1.0 - sig)
        # projection to world vertices
        gc0 = 0.0
        gc1 = 0.0
        gc2 = 0.0
        for v in range(3):
            z = cam[j, v, 2]
            gu = g_xy[j, v, 0]
            gv = g_xy[j, v, 1]
            a = gu * fx / z
            b = gv * fy / z
            c = -(gu * fx * cam[j, v, 0] + gv * fy * cam[j, v, 1]) / (z * z)
            for r in range(3):
                o_gv[j, v, r] = a * R_pose[r, 0] + b * R_pose[r, 1] + c * R_pose[r, 2]
            gc0 += o_gv[j, v, 0]
            gc1 += o_gv[j, v, 1]
            gc2 += o_gv[j, v, 2]
        o_center[n, 0] = gc0
        o_center[n, 1] = gc1
        o_center[n, 2] = gc2
        # vertex = R (T * s) + c
        g_boost = 0.0
        g_depth = 0.0
        for i in range(3):
            gs = 0.0
            for v in range(3):
                gl = (rotation[n, 0, i] * o_gv[j, v, 0] + rotation[n, 1, i] * o_gv[j, v, 1]
                      + rotation[n, 2, i] * o_gv[j, v, 2])
                gs += gl * template[v, i]
            g_base = gs * boost[n]
            g_boost += gs * base[n, i]
            sl = 1.0 / (1.0 + math.exp(-scale_logits[n, i]))
            o_scale[n, i] = g_base * (s_max - s_min) * sl * (1.0 - sl) * depth[n] * footprint[n, i]
            g_depth += g_base * base[n, i]
        o_depth[n] = g_depth / depth[n]
        # density -> mapped -> sharpened -> floor
        g_sharp = g_opacity[j]
        if floor_active and sharpened[n] < floor:
            g_sharp = 0.0
        g_mapped = g_sharp * d_sharp[j]
        if boost_on and mapped[n] < threshold:
            g_mapped += g_boost * (-gain / threshold)
        p = density[n]
        o_density[n] = g_mapped * d_map[j] * p * (1.0 - p)
