import numpy as np
import pytest

from pointmoe.errors import InputError, RangeError
from pointmoe.serialization import (SerialOrder, VoxelGrid, morton_decode,
                                    morton_encode, serialize, voxelize,
                                    window_partition)


def interleave_oracle(x, y, z, bits):
    """Brute-force bit interleave over all positions."""
    code = 0
    for b in range(bits):
        code |= ((x >> b) & 1) << (3 * b)
        code |= ((y >> b) & 1) << (3 * b + 1)
        code |= ((z >> b) & 1) << (3 * b + 2)
    return code


class TestVoxelize:
    GRID = VoxelGrid(origin=(1.0, 2.0, 3.0), cell_size=0.5, bits_per_axis=10)

    def test_origin_maps_to_zero(self):
        v, clamped = voxelize(np.array([[1.0, 2.0, 3.0]]), self.GRID)
        assert np.array_equal(v, [[0, 0, 0]]) and clamped == 0

    def test_floor_rule(self):
        p = np.array([[1.0 + 2.5 * 0.5, 2.0, 3.0]])
        v, _ = voxelize(p, self.GRID)
        assert np.array_equal(v, [[2, 0, 0]])

    def test_matches_scalar_floor_oracle(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-5, 50, size=(1000, 3))
        v, _ = voxelize(pts, self.GRID)
        hi = (1 << 10) - 1
        for i in range(0, 1000, 37):
            for a in range(3):
                raw = int(np.floor((pts[i, a] - self.GRID.origin[a]) / 0.5))
                assert v[i, a] == min(max(raw, 0), hi)

    def test_clamp_counted(self):
        v, clamped = voxelize(np.array([[-10.0, 2.0, 3.0]]), self.GRID)
        assert v[0, 0] == 0 and clamped == 1

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            voxelize(np.array([[np.nan, 0.0, 0.0]]), self.GRID)

    def test_bad_grid(self):
        with pytest.raises(InputError):
            VoxelGrid(cell_size=0.0)
        with pytest.raises(RangeError):
            VoxelGrid(bits_per_axis=22)


class TestMortonEncode:
    def test_zero(self):
        assert morton_encode(np.array([[0, 0, 0]]), 4)[0] == 0

    def test_axis_bits(self):
        assert morton_encode(np.array([[1, 0, 0]]), 4)[0] == 1
        assert morton_encode(np.array([[0, 1, 0]]), 4)[0] == 2
        assert morton_encode(np.array([[0, 0, 1]]), 4)[0] == 4

    def test_worked_example(self):
        assert morton_encode(np.array([[3, 1, 2]]), 4)[0] == 43
        assert interleave_oracle(3, 1, 2, 4) == 43

    def test_matches_bit_interleave_oracle(self):
        rng = np.random.default_rng(1)
        bits = 7
        v = rng.integers(0, 1 << bits, size=(10000, 3))
        codes = morton_encode(v, bits)
        for i in range(0, 10000, 113):
            assert codes[i] == interleave_oracle(*map(int, v[i]), bits)

    def test_injective_exhaustive_3bits(self):
        grid = np.stack(np.meshgrid(*([np.arange(8)] * 3), indexing="ij"),
                        axis=-1).reshape(-1, 3)
        codes = morton_encode(grid, 3)
        assert len(set(codes.tolist())) == 512

    def test_decode_roundtrip(self):
        rng = np.random.default_rng(2)
        v = rng.integers(0, 1 << 9, size=(200, 3))
        assert np.array_equal(morton_decode(morton_encode(v, 9), 9), v)

    def test_component_overflow(self):
        with pytest.raises(RangeError):
            morton_encode(np.array([[8, 0, 0]]), 3)

    def test_bit_budget(self):
        with pytest.raises(RangeError):
            morton_encode(np.array([[0, 0, 0]]), 22)

    def test_locality_sanity(self):
        # stepping one voxel in x changes the code less than a random jump
        bits = 4
        n = 1 << bits
        grid = np.stack(np.meshgrid(*([np.arange(n)] * 3), indexing="ij"),
                        axis=-1).reshape(-1, 3)
        codes = morton_encode(grid, bits).astype(np.int64)
        lut = np.zeros((n, n, n), dtype=np.int64)
        lut[grid[:, 0], grid[:, 1], grid[:, 2]] = codes
        interior = grid[grid[:, 0] < n - 1]
        step = np.abs(lut[interior[:, 0] + 1, interior[:, 1], interior[:, 2]]
                      - lut[interior[:, 0], interior[:, 1], interior[:, 2]])
        rng = np.random.default_rng(3)
        a = rng.integers(0, len(grid), size=20000)
        b = rng.integers(0, len(grid), size=20000)
        rand = np.abs(codes[a] - codes[b])
        assert step.mean() < rand.mean()


class TestSerialize:
    def test_sorted_distinct_is_identity(self):
        order = serialize(np.array([1, 5, 9, 20], dtype=np.uint64))
        assert np.array_equal(order.perm, np.arange(4))

    def test_all_equal_is_identity(self):
        order = serialize(np.full(6, 7, dtype=np.uint64))
        assert np.array_equal(order.perm, np.arange(6))

    def test_matches_reference_sort(self):
        rng = np.random.default_rng(4)
        codes = rng.integers(0, 100, size=500).astype(np.uint64)
        order = serialize(codes)
        ref = sorted(range(500), key=lambda i: (codes[i], i))
        assert np.array_equal(order.perm, ref)

    def test_inverse_perm(self):
        rng = np.random.default_rng(5)
        codes = rng.integers(0, 1 << 30, size=100).astype(np.uint64)
        order = serialize(codes)
        assert np.array_equal(order.perm[order.inverse_perm], np.arange(100))
        assert np.all(np.diff(order.sorted_codes.astype(np.int64)) >= 0)


class TestWindowPartition:
    def test_even_split(self):
        assert window_partition(32, 16) == [(0, 16), (16, 32)]

    def test_short_sequence(self):
        assert window_partition(5, 16) == [(0, 5)]

    def test_remainder(self):
        ws = window_partition(33, 16)
        assert [e - s for s, e in ws] == [16, 16, 1]

    def test_partition_covers_everything(self):
        for n in (1, 7, 16, 100):
            ws = window_partition(n, 16)
            covered = [i for s, e in ws for i in range(s, e)]
            assert covered == list(range(n))

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            window_partition(0, 16)
        with pytest.raises(InputError):
            window_partition(10, 0)


class TestCanonicalization:
    def test_permutation_invariant_when_codes_distinct(self):
        rng = np.random.default_rng(6)
        grid = VoxelGrid(origin=(0, 0, 0), cell_size=0.01, bits_per_axis=10)
        pts = rng.uniform(0, 5, size=(300, 3))
        v, _ = voxelize(pts, grid)
        codes = morton_encode(v, grid.bits_per_axis)
        assert len(set(codes.tolist())) == 300, "fixture must have distinct codes"
        base = serialize(codes)
        perm = rng.permutation(300)
        shuffled = serialize(codes[perm])
        # same token content in the same serialized positions
        assert np.array_equal(codes[base.perm], codes[perm][shuffled.perm])
        assert np.array_equal(pts[base.perm], pts[perm][shuffled.perm])
