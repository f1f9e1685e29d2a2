"""Hot inner loops, each in a numba and a pure-numpy flavour.

The numba path is used when numba imports cleanly and the environment
variable ``CVATTN_DISABLE_NUMBA`` is unset (or ``0``).  Both paths compute
the same quantities; summation order can differ, so floating results agree to
rounding, integer-valued results exactly.

Kernels work on plain ndarrays.  Batched kernels take a leading flat axis
``B`` and the two spatial axes ``(H, W)``.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("CVATTN_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by CVATTN_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# 2-d correlation with zero padding, "same" output size


def correlate2d_same_numpy(x, k):
    """out[b, i, j] = sum_{u,v} x[b, i+u-ry, j+v-rx] * k[u, v], zeros outside."""
    B, H, W = x.shape
    kh, kw = k.shape
    ry, rx = kh // 2, kw // 2
    xp = np.zeros((B, H + 2 * ry, W + 2 * rx), dtype=np.result_type(x, k))
    xp[:, ry:ry + H, rx:rx + W] = x
    out = np.zeros((B, H, W), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            w = k[u, v]
            if w != 0.0:
                out += w * xp[:, u:u + H, v:v + W]
    return out


@njit(cache=True)
def correlate2d_same_numba(x, k):
    B, H, W = x.shape
    kh, kw = k.shape
    ry, rx = kh // 2, kw // 2
    out = np.zeros((B, H, W), dtype=x.dtype)
    for b in range(B):
        for i in range(H):
            u0 = max(0, ry - i)
            u1 = min(kh, H + ry - i)
            for j in range(W):
                v0 = max(0, rx - j)
                v1 = min(kw, W + rx - j)
                acc = 0.0
                for u in range(u0, u1):
                    yi = i + u - ry
                    for v in range(v0, v1):
                        acc += x[b, yi, j + v - rx] * k[u, v]
                out[b, i, j] = acc
    return out


def correlate2d_same(x, k):
    x = np.ascontiguousarray(x)
    k = np.ascontiguousarray(k, dtype=x.dtype)
    if HAVE_NUMBA:
        return correlate2d_same_numba(x, k)
    return correlate2d_same_numpy(x, k)


# ---------------------------------------------------------------------------
# 2x2 max pooling; ties go to the first element in row-major window order


def maxpool2x2_numpy(x):
    B, H, W = x.shape
    win = x.reshape(B, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(B, H // 2, W // 2, 4)
    arg = np.argmax(win, axis=-1)  # argmax returns the first maximal index
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


@njit(cache=True)
def maxpool2x2_numba(x):
    B, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    out = np.empty((B, Ho, Wo), dtype=x.dtype)
    arg = np.empty((B, Ho, Wo), dtype=np.int8)
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                best = x[b, 2 * i, 2 * j]
                k = 0
                if x[b, 2 * i, 2 * j + 1] > best:
                    best = x[b, 2 * i, 2 * j + 1]
                    k = 1
                if x[b, 2 * i + 1, 2 * j] > best:
                    best = x[b, 2 * i + 1, 2 * j]
                    k = 2
                if x[b, 2 * i + 1, 2 * j + 1] > best:
                    best = x[b, 2 * i + 1, 2 * j + 1]
                    k = 3
                out[b, i, j] = best
                arg[b, i, j] = k
    return out, arg


def maxpool2x2_backward_numpy(g, arg):
    B, Ho, Wo = g.shape
    gx = np.zeros((B, Ho, Wo, 4), dtype=g.dtype)
    np.put_along_axis(gx, arg.astype(np.intp)[..., None], g[..., None], axis=-1)
    return gx.reshape(B, Ho, Wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(B, 2 * Ho, 2 * Wo)


@njit(cache=True)
def maxpool2x2_backward_numba(g, arg):
    B, Ho, Wo = g.shape
    gx = np.zeros((B, 2 * Ho, 2 * Wo), dtype=g.dtype)
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                k = arg[b, i, j]
                gx[b, 2 * i + k // 2, 2 * j + k % 2] = g[b, i, j]
    return gx


def maxpool2x2(x):
    x = np.ascontiguousarray(x)
    if HAVE_NUMBA:
        return maxpool2x2_numba(x)
    return maxpool2x2_numpy(x)


def maxpool2x2_backward(g, arg):
    g = np.ascontiguousarray(g)
    if HAVE_NUMBA:
        return maxpool2x2_backward_numba(g, arg)
    return maxpool2x2_backward_numpy(g, arg)


# ---------------------------------------------------------------------------
# col2im: scatter-add of patch columns back onto the padded image
# cols has shape (C, kh, kw, N, Ho, Wo), the layout the weight matmul produces


def col2im_numpy(cols, Hp, Wp, stride):
    C, kh, kw, N, Ho, Wo = cols.shape
    out = np.zeros((N, C, Hp, Wp), dtype=cols.dtype)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += cols[:, u, v].transpose(1, 0, 2, 3)
    return out


@njit(cache=True)
def col2im_numba(cols, Hp, Wp, stride):
    C, kh, kw, N, Ho, Wo = cols.shape
    out = np.zeros((N, C, Hp, Wp), dtype=cols.dtype)
    for c in range(C):
        for u in range(kh):
            for v in range(kw):
                for n in range(N):
                    for i in range(Ho):
                        for j in range(Wo):
                            out[n, c, u + stride * i, v + stride * j] += cols[c, u, v, n, i, j]
    return out


def col2im(cols, Hp, Wp, stride):
    cols = np.ascontiguousarray(cols)
    if HAVE_NUMBA:
        return col2im_numba(cols, Hp, Wp, stride)
    return col2im_numpy(cols, Hp, Wp, stride)


# ---------------------------------------------------------------------------
# replicate-boundary central differences and the curvature of a level set


def _dx_numpy(f):
    out = np.empty_like(f)
    out[..., 1:-1] = 0.5 * (f[..., 2:] - f[..., :-2])
    out[..., 0] = 0.5 * (f[..., 1] - f[..., 0])
    out[..., -1] = 0.5 * (f[..., -1] - f[..., -2])
    return out


def _dxT_numpy(g):
    # adjoint of _dx_numpy
    out = np.zeros_like(g)
    out[..., 1:] += 0.5 * g[..., :-1]
    out[..., -1] += 0.5 * g[..., -1]
    out[..., :-1] -= 0.5 * g[..., 1:]
    out[..., 0] -= 0.5 * g[..., 0]
    return out


def _dy_numpy(f):
    return np.swapaxes(_dx_numpy(np.swapaxes(f, -1, -2)), -1, -2)


def _dyT_numpy(g):
    return np.swapaxes(_dxT_numpy(np.swapaxes(g, -1, -2)), -1, -2)


def curvature_numpy(phi, eta):
    """Return (kappa, nx, ny, mag) for phi of shape (B, H, W)."""
    px = _dx_numpy(phi)
    py = _dy_numpy(phi)
    mag = np.sqrt(px * px + py * py + eta * eta)
    nx = px / mag
    ny = py / mag
    return _dx_numpy(nx) + _dy_numpy(ny), nx, ny, mag


def curvature_backward_numpy(g, nx, ny, mag):
    gnx = _dxT_numpy(g)
    gny = _dyT_numpy(g)
    dot = gnx * nx + gny * ny
    gpx = (gnx - nx * dot) / mag
    gpy = (gny - ny * dot) / mag
    return _dxT_numpy(gpx) + _dyT_numpy(gpy)


@njit(cache=True)
def _clamp(i, n):
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


@njit(cache=True)
def curvature_numba(phi, eta):
    B, H, W = phi.shape
    nx = np.empty_like(phi)
    ny = np.empty_like(phi)
    mag = np.empty_like(phi)
    kappa = np.empty_like(phi)
    e2 = eta * eta
    for b in range(B):
        for i in range(H):
            for j in range(W):
                px = 0.5 * (phi[b, i, _clamp(j + 1, W)] - phi[b, i, _clamp(j - 1, W)])
                py = 0.5 * (phi[b, _clamp(i + 1, H), j] - phi[b, _clamp(i - 1, H), j])
                m = np.sqrt(px * px + py * py + e2)
                mag[b, i, j] = m
                nx[b, i, j] = px / m
                ny[b, i, j] = py / m
        for i in range(H):
            for j in range(W):
                kappa[b, i, j] = 0.5 * (nx[b, i, _clamp(j + 1, W)] - nx[b, i, _clamp(j - 1, W)]) + 0.5 * (
                    ny[b, _clamp(i + 1, H), j] - ny[b, _clamp(i - 1, H), j]
                )
    return kappa, nx, ny, mag


@njit(cache=True)
def curvature_backward_numba(g, nx, ny, mag):
    B, H, W = g.shape
    gnx = np.zeros_like(g)
    gny = np.zeros_like(g)
    out = np.zeros_like(g)
    for b in range(B):
        # scatter the transposed central differences
        for i in range(H):
            for j in range(W):
                h = 0.5 * g[b, i, j]
                gnx[b, i, _clamp(j + 1, W)] += h
                gnx[b, i, _clamp(j - 1, W)] -= h
                gny[b, _clamp(i + 1, H), j] += h
                gny[b, _clamp(i - 1, H), j] -= h
        for i in range(H):
            for j in range(W):
                a = gnx[b, i, j]
                c = gny[b, i, j]
                n1 = nx[b, i, j]
                n2 = ny[b, i, j]
                m = mag[b, i, j]
                dot = a * n1 + c * n2
                hx = 0.5 * (a - n1 * dot) / m
                hy = 0.5 * (c - n2 * dot) / m
                out[b, i, _clamp(j + 1, W)] += hx
                out[b, i, _clamp(j - 1, W)] -= hx
                out[b, _clamp(i + 1, H), j] += hy
                out[b, _clamp(i - 1, H), j] -= hy
    return out


def curvature_fields(phi, eta):
    phi = np.ascontiguousarray(phi)
    if HAVE_NUMBA:
        return curvature_numba(phi, phi.dtype.type(eta))
    return curvature_numpy(phi, eta)


def curvature_backward(g, nx, ny, mag):
    g = np.ascontiguousarray(g)
    if HAVE_NUMBA:
        return curvature_backward_numba(g, nx, ny, mag)
    return curvature_backward_numpy(g, nx, ny, mag)


def central_dx(f):
    return _dx_numpy(f)


def central_dy(f):
    return _dy_numpy(f)


# ---------------------------------------------------------------------------
# brute-force nearest squared distances between point sets


def min_sq_dist_numpy(a, b):
    """For each row of ``a`` (n, 2) the squared distance to the nearest row of ``b``."""
    out = np.empty(len(a), dtype=np.float64)
    step = 2048
    for s in range(0, len(a), step):
        d = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = (d * d).sum(-1).min(axis=1)
    return out


@njit(cache=True)
def min_sq_dist_numba(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        for j in range(m):
            dy = a[i, 0] - b[j, 0]
            dx = a[i, 1] - b[j, 1]
            d = dy * dy + dx * dx
            if d < best:
                best = d
        out[i] = best
    return out


def min_sq_dist(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if HAVE_NUMBA:
        return min_sq_dist_numba(a, b)
    return min_sq_dist_numpy(a, b)
