"""Hot loops: forward RK2 rollout of affine fields and per-pixel alpha compositing.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature. ``AFFINEGS_NUMBA=0`` in the environment (or numba being
unavailable) selects the numpy path at import time; both variants stay
importable as ``*_numba`` / ``*_numpy`` for benchmarking and cross-checks.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"  # old system TBB only produces a warning
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("AFFINEGS_NUMBA", "1").lower() not in ("0", "false", "no", "off")

TRANSMITTANCE_EPS = 1e-4
FOOTPRINT_SIGMA = 3.0


# ---------------------------------------------------------------- rollout

def rollout_affine_numpy(x0, log_s0, q0, w_start, w_mid, h):
    """Midpoint-RK2 integration of ``dx/dt = A(w) x + b(w)``.

    Parameters
    ----------
    x0, log_s0 : (N, 3) arrays
    q0 : (N, 4) array
    w_start, w_mid : (S, N, 12) arrays
        Affine weights at the start and midpoint of each step.
    h : (S,) array of step sizes

    Returns positions, log-scales and quaternions at every step boundary,
    shapes ``(S+1, N, 3)``, ``(S+1, N, 3)``, ``(S+1, N, 4)``.
    """
    S = len(h)
    N = len(x0)
    xs = np.empty((S + 1, N, 3))
    ls = np.empty((S + 1, N, 3))
    qs = np.empty((S + 1, N, 4))
    xs[0], ls[0], qs[0] = x0, log_s0, q0
    x = np.array(x0, dtype=float)
    lg = np.array(log_s0, dtype=float)
    q = np.array(q0, dtype=float)
    for k in range(S):
        hk = h[k]
        x_mid = x + 0.5 * hk * _affine_np(w_start[k], x)
        x = x + hk * _affine_np(w_mid[k], x_mid)
        om = w_mid[k][:, 3:6]
        lg = lg + hk * w_mid[k][:, 6:9]
        q = q + 0.5 * hk * _omega_quat_np(om, q)
        q = q / np.sqrt((q * q).sum(axis=1, keepdims=True))
        xs[k + 1], ls[k + 1], qs[k + 1] = x, lg, q
    return xs, ls, qs


def _affine_np(w, x):
    om, st, sh = w[:, 3:6], w[:, 6:9], w[:, 9:12]
    X, Y, Z = x[:, 0], x[:, 1], x[:, 2]
    return np.stack([
        om[:, 1] * Z - om[:, 2] * Y + st[:, 0] * X + sh[:, 0] * Y + sh[:, 2] * Z + w[:, 0],
        om[:, 2] * X - om[:, 0] * Z + st[:, 1] * Y + sh[:, 0] * X + sh[:, 1] * Z + w[:, 1],
        om[:, 0] * Y - om[:, 1] * X + st[:, 2] * Z + sh[:, 1] * Y + sh[:, 2] * X + w[:, 2],
    ], axis=1)


def _omega_quat_np(om, q):
    # (0, omega) ⊗ q
    ox, oy, oz = om[:, 0], om[:, 1], om[:, 2]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        -ox * x - oy * y - oz * z,
        ox * w + oy * z - oz * y,
        oy * w + oz * x - ox * z,
        oz * w + ox * y - oy * x,
    ], axis=1)


# ------------------------------------------------------------- compositing

def composite_numpy(means, conics, alphas, colors, height, width, background, workers=1):
    """Front-to-back alpha compositing of depth-sorted 2D Gaussians.

    ``conics`` holds the inverse 2D covariance as ``(a, b, c)`` for
    ``[[a, b], [b, c]]``. Pixel ``(row, col)`` samples the image plane at
    ``(col, row)``.
    """
    img = np.empty((height, width, 3))
    bounds = _row_chunks(height, workers)

    def run(chunk):
        r0, r1 = chunk
        img[r0:r1] = _composite_rows_np(means, conics, alphas, colors, r0, r1, width, background)

    if workers <= 1:
        for c in bounds:
            run(c)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, bounds))
    return img


def _row_chunks(height, workers):
    n = max(1, min(int(workers), height))
    edges = np.linspace(0, height, n + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(n)]


def _composite_rows_np(means, conics, alphas, colors, r0, r1, width, background):
    rows = r1 - r0
    ys, xs = np.mgrid[r0:r1, 0:width].astype(float)
    C = np.zeros((rows, width, 3))
    Tr = np.ones((rows, width))
    cut = FOOTPRINT_SIGMA * FOOTPRINT_SIGMA
    for i in range(len(alphas)):
        a, b, c = conics[i]
        dx = xs - means[i, 0]
        dy = ys - means[i, 1]
        power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        live = (power <= cut) & (Tr >= TRANSMITTANCE_EPS)
        if not live.any():
            continue
        al = np.where(live, alphas[i] * np.exp(-0.5 * power), 0.0)
        wgt = al * Tr
        C += wgt[..., None] * colors[i]
        Tr = Tr * (1.0 - al)
    return C + Tr[..., None] * background


if HAVE_NUMBA:
    @njit(cache=True)
    def rollout_affine_numba(x0, log_s0, q0, w_start, w_mid, h):
        S = h.shape[0]
        N = x0.shape[0]
        xs = np.empty((S + 1, N, 3))
        ls = np.empty((S + 1, N, 3))
        qs = np.empty((S + 1, N, 4))
        for n in range(N):
            x = x0[n, 0]; y = x0[n, 1]; z = x0[n, 2]
            l0 = log_s0[n, 0]; l1 = log_s0[n, 1]; l2 = log_s0[n, 2]
            qw = q0[n, 0]; qx = q0[n, 1]; qy = q0[n, 2]; qz = q0[n, 3]
            xs[0, n, 0] = x; xs[0, n, 1] = y; xs[0, n, 2] = z
            ls[0, n, 0] = l0; ls[0, n, 1] = l1; ls[0, n, 2] = l2
            qs[0, n, 0] = qw; qs[0, n, 1] = qx; qs[0, n, 2] = qy; qs[0, n, 3] = qz
            for k in range(S):
                hk = h[k]
                w = w_start[k, n]
                vx = w[4] * z - w[5] * y + w[6] * x + w[9] * y + w[11] * z + w[0]
                vy = w[5] * x - w[3] * z + w[7] * y + w[9] * x + w[10] * z + w[1]
                vz = w[3] * y - w[4] * x + w[8] * z + w[10] * y + w[11] * x + w[2]
                mx = x + 0.5 * hk * vx
                my = y + 0.5 * hk * vy
                mz = z + 0.5 * hk * vz
                w = w_mid[k, n]
                vx = w[4] * mz - w[5] * my + w[6] * mx + w[9] * my + w[11] * mz + w[0]
                vy = w[5] * mx - w[3] * mz + w[7] * my + w[9] * mx + w[10] * mz + w[1]
                vz = w[3] * my - w[4] * mx + w[8] * mz + w[10] * my + w[11] * mx + w[2]
                x = x + hk * vx
                y = y + hk * vy
                z = z + hk * vz
                l0 = l0 + hk * w[6]
                l1 = l1 + hk * w[7]
                l2 = l2 + hk * w[8]
                ox = w[3]; oy = w[4]; oz = w[5]
                dw = -ox * qx - oy * qy - oz * qz
                dx = ox * qw + oy * qz - oz * qy
                dy = oy * qw + oz * qx - ox * qz
                dz = oz * qw + ox * qy - oy * qx
                qw = qw + 0.5 * hk * dw
                qx = qx + 0.5 * hk * dx
                qy = qy + 0.5 * hk * dy
                qz = qz + 0.5 * hk * dz
                nrm = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
                qw /= nrm; qx /= nrm; qy /= nrm; qz /= nrm
                xs[k + 1, n, 0] = x; xs[k + 1, n, 1] = y; xs[k + 1, n, 2] = z
                ls[k + 1, n, 0] = l0; ls[k + 1, n, 1] = l1; ls[k + 1, n, 2] = l2
                qs[k + 1, n, 0] = qw; qs[k + 1, n, 1] = qx; qs[k + 1, n, 2] = qy; qs[k + 1, n, 3] = qz
        return xs, ls, qs

    @njit(parallel=True, cache=True)
    def _composite_nb(means, conics, alphas, colors, height, width, background):
        img = np.empty((height, width, 3))
        M = alphas.shape[0]
        cut = FOOTPRINT_SIGMA * FOOTPRINT_SIGMA
        for r in prange(height):
            py = float(r)
            for col in range(width):
                px = float(col)
                T = 1.0
                c0 = 0.0; c1 = 0.0; c2 = 0.0
                for i in range(M):
                    if T < TRANSMITTANCE_EPS:
                        break
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    power = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    if power > cut:
                        continue
                    al = alphas[i] * np.exp(-0.5 * power)
                    wgt = al * T
                    c0 += wgt * colors[i, 0]
                    c1 += wgt * colors[i, 1]
                    c2 += wgt * colors[i, 2]
                    T = T * (1.0 - al)
                img[r, col, 0] = c0 + T * background[0]
                img[r, col, 1] = c1 + T * background[1]
                img[r, col, 2] = c2 + T * background[2]
        return img

    def composite_numba(means, conics, alphas, colors, height, width, background, workers=1):
        prev = numba.get_num_threads()
        numba.set_num_threads(max(1, min(int(workers), numba.config.NUMBA_NUM_THREADS)))
        try:
            return _composite_nb(np.ascontiguousarray(means, dtype=np.float64),
                                 np.ascontiguousarray(conics, dtype=np.float64),
                                 np.ascontiguousarray(alphas, dtype=np.float64),
                                 np.ascontiguousarray(colors, dtype=np.float64),
                                 int(height), int(width),
                                 np.ascontiguousarray(background, dtype=np.float64))
        finally:
            numba.set_num_threads(prev)


if USE_NUMBA:
    def rollout_affine(x0, log_s0, q0, w_start, w_mid, h):
        return rollout_affine_numba(*(np.ascontiguousarray(a, dtype=np.float64)
                                      for a in (x0, log_s0, q0, w_start, w_mid, h)))

    composite = composite_numba
else:
    rollout_affine = rollout_affine_numpy
    composite = composite_numpy
