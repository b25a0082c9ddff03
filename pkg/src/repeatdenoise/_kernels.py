"""Compiled trilinear interpolation loops.

All kernels take a 4D array ``(nx, ny, nz, C)`` and clamp sample positions
to the grid.  Evaluation order is fixed, so results are reproducible.
"""

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _corner(p, n):
    if p < 0.0:
        p = 0.0
    elif p > n - 1.0:
        p = n - 1.0
    i = int(np.floor(p))
    if i > n - 2:
        i = n - 2
    if i < 0:
        i = 0
    return i, p - i


@numba.njit(cache=True)
def _interp(arr, x, y, z, out_row, grad_row, want_grad):
    nx, ny, nz, nc = arr.shape
    ix, fx = _corner(x, nx)
    iy, fy = _corner(y, ny)
    iz, fz = _corner(z, nz)
    jx = ix + 1 if nx > 1 else ix
    jy = iy + 1 if ny > 1 else iy
    jz = iz + 1 if nz > 1 else iz
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    inx = 1.0 if 0.0 <= x <= nx - 1.0 else 0.0
    iny = 1.0 if 0.0 <= y <= ny - 1.0 else 0.0
    inz = 1.0 if 0.0 <= z <= nz - 1.0 else 0.0
    for c in range(nc):
        v000 = arr[ix, iy, iz, c]
        v001 = arr[ix, iy, jz, c]
        v010 = arr[ix, jy, iz, c]
        v011 = arr[ix, jy, jz, c]
        v100 = arr[jx, iy, iz, c]
        v101 = arr[jx, iy, jz, c]
        v110 = arr[jx, jy, iz, c]
        v111 = arr[jx, jy, jz, c]
        c00 = v000 * gz + v001 * fz
        c01 = v010 * gz + v011 * fz
        c10 = v100 * gz + v101 * fz
        c11 = v110 * gz + v111 * fz
        c0 = c00 * gy + c01 * fy
        c1 = c10 * gy + c11 * fy
        out_row[c] = c0 * gx + c1 * fx
        if want_grad:
            grad_row[c, 0] = (c1 - c0) * inx
            grad_row[c, 1] = ((c01 - c00) * gx + (c11 - c10) * fx) * iny
            e0 = (v001 - v000) * gy + (v011 - v010) * fy
            e1 = (v101 - v100) * gy + (v111 - v110) * fy
            grad_row[c, 2] = (e0 * gx + e1 * fx) * inz


@numba.njit(cache=True)
def sample_points(arr, coords, want_grad):
    """Interpolate ``arr`` at index-space ``coords`` of shape (P, 3)."""
    p = coords.shape[0]
    nc = arr.shape[3]
    out = np.empty((p, nc))
    grad = np.zeros((p, nc, 3)) if want_grad else np.zeros((1, nc, 3))
    for q in range(p):
        g = grad[q] if want_grad else grad[0]
        _interp(arr, coords[q, 0], coords[q, 1], coords[q, 2], out[q], g, want_grad)
    return out, grad


@numba.njit(cache=True)
def sample_displaced(arr, disp, inv_spacing, want_grad):
    """Interpolate ``arr`` at ``voxel + disp * inv_spacing`` for every voxel of ``disp``."""
    mx, my, mz = disp.shape[0], disp.shape[1], disp.shape[2]
    nc = arr.shape[3]
    out = np.empty((mx, my, mz, nc))
    grad = np.zeros((mx, my, mz, nc, 3)) if want_grad else np.zeros((1, 1, 1, nc, 3))
    sx, sy, sz = inv_spacing[0], inv_spacing[1], inv_spacing[2]
    for i in range(mx):
        for j in range(my):
            for k in range(mz):
                g = grad[i, j, k] if want_grad else grad[0, 0, 0]
                _interp(
                    arr,
                    i + disp[i, j, k, 0] * sx,
                    j + disp[i, j, k, 1] * sy,
                    k + disp[i, j, k, 2] * sz,
                    out[i, j, k],
                    g,
                    want_grad,
                )
    return out, grad
