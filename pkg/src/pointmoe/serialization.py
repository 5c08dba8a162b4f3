"""Space-filling-curve serialization of point clouds.

Points are voxelized onto a regular grid, each voxel coordinate is encoded
as a Morton (Z-order) key by bit interleaving, and points are stably
sorted by key to obtain a 1D token order that local attention windows are
carved from. Bit convention: bit b of x lands at code bit 3b, y at 3b+1,
z at 3b+2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, RangeError


@dataclass(frozen=True)
class VoxelGrid:
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cell_size: float = 0.25
    bits_per_axis: int = 16

    def __post_init__(self):
        if not self.cell_size > 0:
            raise InputError(f"cell_size must be > 0, got {self.cell_size}")
        if not 1 <= self.bits_per_axis <= 21:
            raise RangeError(f"bits_per_axis must be in [1, 21], got {self.bits_per_axis}")


@dataclass
class SerialOrder:
    codes: np.ndarray            # uint64 curve code per point, input order
    perm: np.ndarray             # sorts points by (code, original index)
    inverse_perm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.inverse_perm = np.empty_like(self.perm)
        self.inverse_perm[self.perm] = np.arange(self.perm.size)

    @property
    def sorted_codes(self) -> np.ndarray:
        return self.codes[self.perm]


def voxelize(coords: np.ndarray, grid: VoxelGrid) -> tuple[np.ndarray, int]:
    """Map points [M,3] to integer voxel triples, clamped into the grid.

    Returns (voxels [M,3] int64, number of clamped coordinates). Clamping
    keeps training total when a synthetic generator rarely exceeds the
    grid; the count makes it observable.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise InputError(f"expected [M,3] coordinates, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise InputError("non-finite coordinate in point cloud")
    origin = np.asarray(grid.origin, dtype=np.float64)
    v = np.floor((coords - origin) / grid.cell_size).astype(np.int64)
    hi = (1 << grid.bits_per_axis) - 1
    clamped = int(np.count_nonzero((v < 0) | (v > hi)))
    return np.clip(v, 0, hi), clamped


def _spread_bits(v: np.ndarray, bits: int) -> np.ndarray:
    """Insert two zero bits after each of the low `bits` bits."""
    v = v.astype(np.uint64)
    out = np.zeros_like(v)
    for b in range(bits):
        out |= ((v >> np.uint64(b)) & np.uint64(1)) << np.uint64(3 * b)
    return out


def morton_encode(voxels: np.ndarray, bits_per_axis: int) -> np.ndarray:
    """Interleave [M,3] voxel triples into 64-bit Z-order codes."""
    if 3 * bits_per_axis > 63:
        raise RangeError(f"3*bits_per_axis = {3 * bits_per_axis} exceeds 63 code bits")
    v = np.atleast_2d(np.asarray(voxels, dtype=np.int64))
    hi = 1 << bits_per_axis
    if np.any(v < 0) or np.any(v >= hi):
        bad = v[(v < 0) | (v >= hi)].flat[0]
        raise RangeError(f"voxel component {bad} out of range [0, {hi})")
    code = (_spread_bits(v[:, 0], bits_per_axis)
            | (_spread_bits(v[:, 1], bits_per_axis) << np.uint64(1))
            | (_spread_bits(v[:, 2], bits_per_axis) << np.uint64(2)))
    return code


def morton_decode(codes: np.ndarray, bits_per_axis: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    out = np.zeros((codes.size, 3), dtype=np.int64)
    for b in range(bits_per_axis):
        for axis in range(3):
            out[:, axis] |= (((codes >> np.uint64(3 * b + axis)) & np.uint64(1))
                             << np.uint64(b)).astype(np.int64)
    return out


def serialize(codes: np.ndarray) -> SerialOrder:
    """Stable sort by code; equal codes keep their original relative order."""
    codes = np.asarray(codes, dtype=np.uint64)
    perm = np.argsort(codes, kind="stable")
    return SerialOrder(codes=codes, perm=perm)


def window_partition(order_length: int, window_size: int) -> list[tuple[int, int]]:
    """Consecutive [start, end) windows; the last keeps the remainder."""
    if window_size < 1:
        raise InputError(f"window_size must be >= 1, got {window_size}")
    if order_length == 0:
        raise InputError("cannot partition an empty token order")
    return [(s, min(s + window_size, order_length))
            for s in range(0, order_length, window_size)]
