# Per-pixel compositing kernels. Gaussians arrive pre-projected and binned:
# tile t owns ids[offsets[t]:offsets[t+1]], already sorted front-to-back.
# Conics are (a, b, c) of the inverse 2D covariance [[a, b], [b, c]].
import numpy as np
from numba import config, njit, prange

# the bundled TBB is too old for numba; OpenMP is thread-safe and quiet
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

ALPHA_CLAMP = 0.99
MIN_ACCUM = 1e-6


@njit(cache=True)
def _power_floor(alpha_peak, alpha_min):
    # below this exponent alpha < alpha_min for sure; the margin keeps the
    # exact alpha test authoritative near the boundary
    out = np.empty(alpha_peak.shape[0])
    for i in range(alpha_peak.shape[0]):
        out[i] = np.log(alpha_min / alpha_peak[i]) - 1e-9
    return out


@njit(cache=True, parallel=True)
def composite_forward(
    width, height, tile_size, tiles_x, offsets, ids,
    means, conics, alpha_peak, colors, depths, inv_area,
    background, alpha_min, t_terminate,
    out_rgb, out_depth, out_T, out_n, out_inv_area, out_hash,
):
    n_tiles = offsets.shape[0] - 1
    power_min = _power_floor(alpha_peak, alpha_min)
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        y1 = min(height, (ty + 1) * tile_size)
        x1 = min(width, (tx + 1) * tile_size)
        for py in range(ty * tile_size, y1):
            for px in range(tx * tile_size, x1):
                T = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                dacc = 0.0
                enh = 0.0
                n = 0
                h = np.int64(17)
                for k in range(start, end):
                    if T < t_terminate:
                        break
                    gid = ids[k]
                    dx = px - means[gid, 0]
                    dy = py - means[gid, 1]
                    power = -0.5 * (conics[gid, 0] * dx * dx + conics[gid, 2] * dy * dy) - conics[gid, 1] * dx * dy
                    if power < power_min[gid]:
                        continue
                    alpha = min(ALPHA_CLAMP, alpha_peak[gid] * np.exp(power))
                    if alpha < alpha_min:
                        continue
                    w = alpha * T
                    r += colors[gid, 0] * w
                    g += colors[gid, 1] * w
                    b += colors[gid, 2] * w
                    dacc += depths[gid] * w
                    enh += w * inv_area[gid]
                    T *= 1.0 - alpha
                    n += 1
                    # order-sensitive fingerprint of the composited sequence
                    h = h * np.int64(1000003) + gid + 1
                out_rgb[py, px, 0] = r + T * background[0]
                out_rgb[py, px, 1] = g + T * background[1]
                out_rgb[py, px, 2] = b + T * background[2]
                acc = 1.0 - T
                out_depth[py, px] = dacc / acc if acc > MIN_ACCUM else 0.0
                out_T[py, px] = T
                out_n[py, px] = n
                out_inv_area[py, px] = enh
                out_hash[py, px] = h


@njit(cache=True)
def composite_backward(
    width, height, tile_size, tiles_x, offsets, ids,
    means, conics, alpha_peak, colors, depths,
    background, alpha_min, t_terminate,
    grad_rgb, grad_depth,
    g_means, g_conics, g_alpha_peak, g_colors, g_depths,
):
    n_tiles = offsets.shape[0] - 1
    power_min = _power_floor(alpha_peak, alpha_min)
    max_len = 0
    for t in range(n_tiles):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    buf_id = np.empty(max_len, np.int64)
    buf_alpha = np.empty(max_len)
    buf_T = np.empty(max_len)
    buf_G = np.empty(max_len)
    buf_dx = np.empty(max_len)
    buf_dy = np.empty(max_len)
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        y1 = min(height, (ty + 1) * tile_size)
        x1 = min(width, (tx + 1) * tile_size)
        for py in range(ty * tile_size, y1):
            for px in range(tx * tile_size, x1):
                gr = grad_rgb[py, px, 0]
                gg = grad_rgb[py, px, 1]
                gb = grad_rgb[py, px, 2]
                gdep = grad_depth[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gdep == 0.0:
                    continue
                # replay the forward pass, remembering every composited term
                T = 1.0
                dacc = 0.0
                m = 0
                for k in range(start, end):
                    if T < t_terminate:
                        break
                    gid = ids[k]
                    dx = px - means[gid, 0]
                    dy = py - means[gid, 1]
                    power = -0.5 * (conics[gid, 0] * dx * dx + conics[gid, 2] * dy * dy) - conics[gid, 1] * dx * dy
                    if power < power_min[gid]:
                        continue
                    G = np.exp(power)
                    alpha = min(ALPHA_CLAMP, alpha_peak[gid] * G)
                    if alpha < alpha_min:
                        continue
                    buf_id[m] = gid
                    buf_alpha[m] = alpha
                    buf_T[m] = T
                    buf_G[m] = G
                    buf_dx[m] = dx
                    buf_dy[m] = dy
                    dacc += depths[gid] * alpha * T
                    T *= 1.0 - alpha
                    m += 1
                T_final = T
                acc = 1.0 - T_final
                g_dacc = 0.0
                g_acc = 0.0
                if acc > MIN_ACCUM:
                    g_dacc = gdep / acc
                    g_acc = -gdep * dacc / (acc * acc)
                # suffix sums of later terms, seeded with the background term
                sr = T_final * background[0]
                sg = T_final * background[1]
                sb = T_final * background[2]
                sz = 0.0
                for j in range(m - 1, -1, -1):
                    gid = buf_id[j]
                    alpha = buf_alpha[j]
                    Ti = buf_T[j]
                    inv = 1.0 / (1.0 - alpha)
                    cr = colors[gid, 0]
                    cg = colors[gid, 1]
                    cb = colors[gid, 2]
                    z = depths[gid]
                    dl_dalpha = (
                        gr * (cr * Ti - sr * inv)
                        + gg * (cg * Ti - sg * inv)
                        + gb * (cb * Ti - sb * inv)
                        + g_dacc * (z * Ti - sz * inv)
                        + g_acc * T_final * inv
                    )
                    w = alpha * Ti
                    g_colors[gid, 0] += gr * w
                    g_colors[gid, 1] += gg * w
                    g_colors[gid, 2] += gb * w
                    g_depths[gid] += g_dacc * w
                    sr += cr * w
                    sg += cg * w
                    sb += cb * w
                    sz += z * w
                    if alpha_peak[gid] * buf_G[j] < ALPHA_CLAMP:
                        g_alpha_peak[gid] += dl_dalpha * buf_G[j]
                        g_power = dl_dalpha * alpha
                        dx = buf_dx[j]
                        dy = buf_dy[j]
                        a = conics[gid, 0]
                        bb = conics[gid, 1]
                        c = conics[gid, 2]
                        g_means[gid, 0] += g_power * (a * dx + bb * dy)
                        g_means[gid, 1] += g_power * (bb * dx + c * dy)
                        g_conics[gid, 0] += -0.5 * g_power * dx * dx
                        g_conics[gid, 1] += -g_power * dx * dy
                        g_conics[gid, 2] += -0.5 * g_power * dy * dy
