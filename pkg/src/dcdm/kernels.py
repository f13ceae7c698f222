"""Hot numeric loops: explicit-loop numba kernels and vectorized numpy twins.

Each public name dispatches to the numba variant when :data:`dcdm._accel.USE_NUMBA`
is true. Both variants stay importable (``*_numba`` / ``*_numpy``) so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit

# ellipse parameter columns: cx, cy, ax, ay, angle, value, edge
ELLIPSE_FIELDS = 7


def _rasterize_loops(h, w, params):
    out = np.zeros((h, w))
    n = params.shape[0]
    for k in range(n):
        cx = params[k, 0]
        cy = params[k, 1]
        ax = params[k, 2]
        ay = params[k, 3]
        c = np.cos(params[k, 4])
        s = np.sin(params[k, 4])
        val = params[k, 5]
        edge = params[k, 6]
        for i in range(h):
            y = (i + 0.5) / h * 2.0 - 1.0 - cy
            for j in range(w):
                x = (j + 0.5) / w * 2.0 - 1.0 - cx
                u = (c * x + s * y) / ax
                v = (-s * x + c * y) / ay
                r = np.sqrt(u * u + v * v)
                out[i, j] += val / (1.0 + np.exp((r - 1.0) / edge))
    return out


rasterize_ellipses_numba = njit(_rasterize_loops)


def rasterize_ellipses_numpy(h, w, params):
    params = np.asarray(params, dtype=np.float64).reshape(-1, ELLIPSE_FIELDS)
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.zeros((h, w))
    for cx, cy, ax, ay, ang, val, edge in params:
        x = xx - cx
        y = yy - cy
        c, s = np.cos(ang), np.sin(ang)
        u = (c * x + s * y) / ax
        v = (-s * x + c * y) / ay
        r = np.sqrt(u * u + v * v)
        out += val / (1.0 + np.exp((r - 1.0) / edge))
    return out


def rasterize_ellipses(h: int, w: int, params: np.ndarray) -> np.ndarray:
    """Sum of logistic-edged ellipses on an ``h x w`` grid spanning [-1, 1]^2."""
    params = np.ascontiguousarray(params, dtype=np.float64).reshape(-1, ELLIPSE_FIELDS)
    if USE_NUMBA:
        return rasterize_ellipses_numba(int(h), int(w), params)
    return rasterize_ellipses_numpy(h, w, params)


def _ssim_loops(a, b, win, c1, c2):
    h, w = a.shape
    oh = h - win + 1
    ow = w - win + 1
    # summed-area tables of x, y, x^2, y^2, xy
    sat = np.zeros((5, h + 1, w + 1))
    for i in range(h):
        for j in range(w):
            x = a[i, j]
            y = b[i, j]
            sat[0, i + 1, j + 1] = x + sat[0, i, j + 1] + sat[0, i + 1, j] - sat[0, i, j]
            sat[1, i + 1, j + 1] = y + sat[1, i, j + 1] + sat[1, i + 1, j] - sat[1, i, j]
            sat[2, i + 1, j + 1] = x * x + sat[2, i, j + 1] + sat[2, i + 1, j] - sat[2, i, j]
            sat[3, i + 1, j + 1] = y * y + sat[3, i, j + 1] + sat[3, i + 1, j] - sat[3, i, j]
            sat[4, i + 1, j + 1] = x * y + sat[4, i, j + 1] + sat[4, i + 1, j] - sat[4, i, j]
    npx = win * win
    cov_norm = npx / (npx - 1.0)
    out = np.empty((oh, ow))
    m = np.empty(5)
    for i in range(oh):
        for j in range(ow):
            for q in range(5):
                m[q] = (sat[q, i + win, j + win] - sat[q, i, j + win]
                        - sat[q, i + win, j] + sat[q, i, j]) / npx
            ux = m[0]
            uy = m[1]
            vx = cov_norm * (m[2] - ux * ux)
            vy = cov_norm * (m[3] - uy * uy)
            vxy = cov_norm * (m[4] - ux * uy)
            num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
            den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
            out[i, j] = num / den
    return out


ssim_map_numba = njit(_ssim_loops)


def ssim_map_numpy(a, b, win, c1, c2):
    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    ux = wa.mean(axis=(-2, -1))
    uy = wb.mean(axis=(-2, -1))
    npx = win * win
    cov_norm = npx / (npx - 1.0)
    vx = cov_norm * ((wa * wa).mean(axis=(-2, -1)) - ux * ux)
    vy = cov_norm * ((wb * wb).mean(axis=(-2, -1)) - uy * uy)
    vxy = cov_norm * ((wa * wb).mean(axis=(-2, -1)) - ux * uy)
    num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return num / den


def ssim_map(a: np.ndarray, b: np.ndarray, win: int, c1: float, c2: float) -> np.ndarray:
    """Local SSIM over every fully-contained ``win x win`` window (uniform weights)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if USE_NUMBA:
        return ssim_map_numba(a, b, int(win), float(c1), float(c2))
    return ssim_map_numpy(a, b, win, c1, c2)


def _shrink_loops(flat, tau):
    out = np.empty_like(flat)
    for i in range(flat.size):
        m = flat[i]
        if m > tau:
            out[i] = m - tau
        elif m < -tau:
            out[i] = m + tau
        else:
            out[i] = 0.0
    return out


soft_threshold_numba = njit(_shrink_loops)


def soft_threshold_numpy(flat, tau):
    return np.sign(flat) * np.maximum(np.abs(flat) - tau, 0.0)


def soft_threshold(m: np.ndarray, tau: float) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    flat = np.ascontiguousarray(m).ravel()
    if USE_NUMBA:
        out = soft_threshold_numba(flat, float(tau))
    else:
        out = soft_threshold_numpy(flat, tau)
    return out.reshape(m.shape)
