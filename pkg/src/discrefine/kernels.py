"""Hot loops behind the surface metrics: 6-connected boundary extraction and
an exact Euclidean distance transform with anisotropic voxel spacing.

Each kernel has a numba implementation and a numpy/scipy implementation with
identical semantics; the public names dispatch on :data:`USE_NUMBA`.
"""
import numpy as np
from scipy import ndimage

from ._accel import USE_NUMBA, njit

__all__ = [
    "boundary_mask",
    "boundary_mask_numba",
    "boundary_mask_numpy",
    "distance_to_set",
    "distance_to_set_numba",
    "distance_to_set_numpy",
]


@njit(cache=True)
def _boundary_kernel(mask, out):
    nx, ny, nz = mask.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                if not mask[i, j, k]:
                    continue
                if (
                    i == 0 or i == nx - 1 or j == 0 or j == ny - 1 or k == 0 or k == nz - 1
                    or not mask[i - 1, j, k] or not mask[i + 1, j, k]
                    or not mask[i, j - 1, k] or not mask[i, j + 1, k]
                    or not mask[i, j, k - 1] or not mask[i, j, k + 1]
                ):
                    out[i, j, k] = True


def boundary_mask_numba(mask):
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    out = np.zeros(mask.shape, dtype=np.bool_)
    _boundary_kernel(mask, out)
    return out


def boundary_mask_numpy(mask):
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded.copy()
    for axis in range(3):
        interior &= np.roll(padded, 1, axis=axis)
        interior &= np.roll(padded, -1, axis=axis)
    return mask & ~interior[1:-1, 1:-1, 1:-1]


@njit(cache=True)
def _lower_envelope_1d(f, step, out, v, z):
    # Felzenszwalb-Huttenlocher squared distance transform along one line.
    n = f.shape[0]
    inf = np.inf
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == inf:
            continue
        xq = q * step
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -inf
            z[1] = inf
            continue
        sect = 0.0
        while k >= 0:
            p = v[k]
            xp = p * step
            sect = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
            if sect <= z[k]:
                k -= 1
            else:
                break
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -inf
            z[1] = inf
        else:
            k += 1
            v[k] = q
            z[k] = sect
            z[k + 1] = inf
    if k < 0:
        for q in range(n):
            out[q] = inf
        return
    j = 0
    for q in range(n):
        xq = q * step
        while z[j + 1] < xq:
            j += 1
        d = xq - v[j] * step
        out[q] = d * d + f[v[j]]


@njit(cache=True)
def _sq_edt_3d(grid, sx, sy, sz):
    nx, ny, nz = grid.shape
    n = max(nx, max(ny, nz))
    v = np.zeros(n, dtype=np.int64)
    z = np.zeros(n + 1, dtype=np.float64)
    buf = np.zeros(n, dtype=np.float64)
    res = np.zeros(n, dtype=np.float64)
    for j in range(ny):
        for k in range(nz):
            for i in range(nx):
                buf[i] = grid[i, j, k]
            _lower_envelope_1d(buf[:nx], sx, res[:nx], v, z)
            for i in range(nx):
                grid[i, j, k] = res[i]
    for i in range(nx):
        for k in range(nz):
            for j in range(ny):
                buf[j] = grid[i, j, k]
            _lower_envelope_1d(buf[:ny], sy, res[:ny], v, z)
            for j in range(ny):
                grid[i, j, k] = res[j]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                buf[k] = grid[i, j, k]
            _lower_envelope_1d(buf[:nz], sz, res[:nz], v, z)
            for k in range(nz):
                grid[i, j, k] = res[k]


def distance_to_set_numba(mask, spacing):
    """Euclidean distance (in spacing units) from every voxel to the nearest
    voxel of ``mask``; ``inf`` everywhere when the set is empty."""
    mask = np.asarray(mask, dtype=bool)
    grid = np.where(mask, 0.0, np.inf)
    sx, sy, sz = (float(s) for s in spacing)
    _sq_edt_3d(grid, sx, sy, sz)
    return np.sqrt(grid)


def distance_to_set_numpy(mask, spacing):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask, sampling=tuple(float(s) for s in spacing))


if USE_NUMBA:
    boundary_mask = boundary_mask_numba
    distance_to_set = distance_to_set_numba
else:
    boundary_mask = boundary_mask_numpy
    distance_to_set = distance_to_set_numpy
