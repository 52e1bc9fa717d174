import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchbag.binio import FileFormatError, FormatErrorCode
from patchbag.bovw import (
    Codebook,
    EmptyInputError,
    InsufficientDataError,
    VocabScope,
    ZeroDescriptorError,
    build_and_encode,
    descriptor_strength,
    encode_patch,
    encode_set,
    kmeans,
    read_codebook,
    read_table_csv,
    trim_strongest,
    write_codebook,
    write_table_csv,
)
from patchbag.features import DescriptorSet
from patchbag.labels import Label


class TestStrength:
    def test_constant_vector(self):
        assert descriptor_strength(np.full(7, 3.5)) == 0.0

    def test_two_point_vector(self):
        assert descriptor_strength(np.array([0.0, 1.0])) == 0.25

    def test_matches_two_pass_oracle(self, rng):
        vecs = rng.normal(size=(50, 13))
        got = descriptor_strength(vecs)
        for i, v in enumerate(vecs):
            mean = sum(v) / len(v)  # two-pass, plain python
            var = sum((x - mean) ** 2 for x in v) / len(v)
            assert abs(got[i] - var) <= 1e-6 * abs(var)


class TestTrim:
    def test_ten_to_eight(self, rng):
        desc = rng.normal(size=(10, 4))
        kept, idx = trim_strongest(desc, 0.8)
        assert kept.shape == (8, 4)
        assert len(idx) == 8

    def test_all_equal_keeps_first_by_index(self):
        desc = np.ones((10, 4))
        _, idx = trim_strongest(desc, 0.8)
        assert list(idx) == list(range(8))

    def test_matches_sorting_oracle(self, rng):
        desc = rng.normal(size=(37, 6))
        strengths = desc.var(axis=1)
        kept, idx = trim_strongest(desc, 0.8)
        want = sorted(sorted(range(37), key=lambda i: (-strengths[i], i))[: math.ceil(0.8 * 37)])
        assert list(idx) == want
        assert np.array_equal(kept, desc[want])

    @given(n=st.integers(1, 500), frac_steps=st.integers(1, 10))
    @settings(max_examples=60)
    def test_trim_law(self, n, frac_steps):
        fraction = frac_steps / 10.0
        desc = np.arange(n * 2, dtype=np.float64).reshape(n, 2)
        kept, idx = trim_strongest(desc, fraction)
        # rational oracle: ceil(steps*n/10) with integer arithmetic
        expect = -((-frac_steps * n) // 10)
        assert kept.shape[0] == expect == len(idx)

    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            trim_strongest(np.zeros((0, 3)), 0.8)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            trim_strongest(np.ones((3, 2)), 0.0)


class TestKMeans:
    def test_n_equals_k_distinct_points(self, rng):
        pts = rng.normal(size=(12, 3)) * 10
        cb = kmeans(pts, k=12, seed=0)
        assert cb.final_sse == 0.0
        got = sorted(map(tuple, np.round(cb.centroids.astype(np.float64), 4)))
        want = sorted(map(tuple, np.round(pts, 4)))
        assert got == want

    def test_two_blobs(self, rng):
        mean_a, mean_b = np.array([0.0, 0.0]), np.array([50.0, 50.0])
        pts = np.vstack(
            [rng.normal(mean_a, 1.0, size=(200, 2)), rng.normal(mean_b, 1.0, size=(200, 2))]
        )
        cb = kmeans(pts, k=2, seed=3)
        cents = sorted(map(tuple, cb.centroids))
        tol = 3.0 / math.sqrt(200)
        assert np.allclose(cents[0], mean_a, atol=tol)
        assert np.allclose(cents[1], mean_b, atol=tol)

    def test_sse_non_increasing(self, rng):
        for seed in range(20):
            pts = rng.normal(size=(150, 5))
            cb = kmeans(pts, k=7, seed=seed)
            hist = cb.sse_history
            assert all(hist[i + 1] <= hist[i] for i in range(len(hist) - 1))

    def test_bit_reproducible(self, rng):
        pts = rng.normal(size=(90, 4))
        a = kmeans(pts, k=9, seed=42)
        b = kmeans(pts.copy(), k=9, seed=42)
        assert a.centroids.tobytes() == b.centroids.tobytes()
        assert a.final_sse == b.final_sse

    def test_insufficient_data(self, rng):
        with pytest.raises(InsufficientDataError, match="smaller k"):
            kmeans(rng.normal(size=(5, 2)), k=10, seed=0)

    def test_non_finite_rejected(self):
        pts = np.ones((10, 2))
        pts[3, 1] = np.nan
        with pytest.raises(ValueError, match="finite"):
            kmeans(pts, k=2, seed=0)

    def test_duplicate_points_insufficient_distinct(self):
        pts = np.ones((10, 2))
        with pytest.raises(InsufficientDataError, match="distinct"):
            kmeans(pts, k=3, seed=1)

    def test_empty_cluster_reseeded(self):
        # two far clusters plus one lone outlier; k=3 forces a reseed path
        pts = np.vstack(
            [np.zeros((5, 2)), np.full((5, 2), 100.0), [[500.0, 500.0]]]
        ) + np.linspace(0, 0.1, 11)[:, None]
        cb = kmeans(pts, k=3, seed=0)
        assert len(np.unique(cb.centroids, axis=0)) == 3
        hist = cb.sse_history
        assert all(hist[i + 1] <= hist[i] for i in range(len(hist) - 1))


def make_codebook(centroids, scope=VocabScope.GLOBAL):
    c = np.asarray(centroids, dtype=np.float32)
    return Codebook(
        k=c.shape[0], centroids=c, trim_fraction=0.8, seed=0, scope=scope,
        source_descriptor_count=c.shape[0],
    )


class TestEncode:
    def test_single_descriptor_one_hot(self):
        cb = make_codebook([[0.0, 0.0], [10.0, 10.0], [20.0, 20.0]])
        hist = encode_patch(np.array([[9.0, 9.5]]), cb)
        assert np.array_equal(hist, [0.0, 1.0, 0.0])

    def test_identical_descriptors_one_hot(self):
        cb = make_codebook([[0.0, 0.0], [10.0, 10.0]])
        hist = encode_patch(np.full((6, 2), 9.9), cb)
        assert np.array_equal(hist, [0.0, 1.0])

    def test_tie_breaks_to_lowest_index(self):
        cb = make_codebook([[5.0, 5.0], [5.0, 5.0]])  # duplicate centroids
        hist = encode_patch(np.array([[1.0, 1.0], [7.0, 2.0]]), cb)
        assert np.array_equal(hist, [1.0, 0.0])

    def test_matches_bruteforce_oracle(self, rng):
        for _ in range(100):
            k, r, d = int(rng.integers(2, 12)), int(rng.integers(1, 20)), int(rng.integers(1, 8))
            cb = make_codebook(rng.normal(size=(k, d)))
            desc = rng.normal(size=(r, d))
            got = encode_patch(desc, cb)
            # oracle: full distance matrix, explicit loops
            counts = np.zeros(k)
            for v in desc:
                dists = [float(((v - c.astype(np.float64)) ** 2).sum()) for c in cb.centroids]
                counts[int(np.argmin(dists))] += 1
            assert np.allclose(got, counts / r)
            assert abs(got.sum() - 1.0) < 1e-6

    def test_permutation_invariance(self, rng):
        cb = make_codebook(rng.normal(size=(5, 3)))
        desc = rng.normal(size=(11, 3))
        perm = rng.permutation(11)
        assert np.array_equal(encode_patch(desc, cb), encode_patch(desc[perm], cb))

    def test_zero_descriptors(self):
        cb = make_codebook([[0.0, 0.0]])
        with pytest.raises(ZeroDescriptorError):
            encode_patch(np.zeros((0, 2)), cb)

    def test_scaling_invariance(self, rng):
        cb_data = rng.normal(size=(40, 6))
        desc = rng.normal(size=(9, 6))
        for c in (2.0, 0.5):
            cb = kmeans(cb_data, k=4, seed=7)
            cb_scaled = kmeans(cb_data * c, k=4, seed=7)
            assert np.array_equal(
                encode_patch(desc, cb), encode_patch(desc * c, cb_scaled)
            )


def dset(region, label, n, r=32, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return DescriptorSet(
        region_id=region, label=label, scale=0, extractor_id="t",
        descriptors=rng.normal(size=(n, r, d)).astype(np.float32),
    )


class TestEncodeSet:
    def test_four_patches_k100(self, rng):
        cb = make_codebook(rng.normal(size=(100, 8)))
        table = encode_set(dset("a", Label.BENIGN, 4), cb)
        assert table.shape == (4, 100)
        assert np.allclose(table.sum(axis=1), 1.0)

    def test_storage_permutation_row_identity(self, rng):
        cb = make_codebook(rng.normal(size=(10, 8)))
        d1 = dset("a", Label.BENIGN, 6, seed=3)
        table = encode_set(d1, cb)
        perm = rng.permutation(6)
        d2 = DescriptorSet("a", Label.BENIGN, 0, "t", d1.descriptors[perm])
        permuted = encode_set(d2, cb)
        assert np.array_equal(permuted[np.argsort(perm)], table)


class TestBuildAndEncode:
    def test_eq2_shapes(self):
        sets = [
            dset("r1", Label.BENIGN, 5, seed=1),
            dset("r2", Label.IN_SITU, 7, seed=2),
            dset("r3", Label.INVASIVE, 9, seed=3),
        ]
        table, codebooks = build_and_encode(sets, VocabScope.PER_REGION, k=100, seed=5)
        assert table.rows.shape == (21, 100)
        assert len(codebooks) == 3
        assert [p for p, _ in table.provenance[:5]] == ["r1"] * 5
        assert np.allclose(table.rows.sum(axis=1), 1.0)

    def test_single_set_scopes_coincide(self):
        sets = [dset("only", Label.BENIGN, 6, seed=8)]
        t_region, _ = build_and_encode(sets, VocabScope.PER_REGION, k=20, seed=3)
        t_global, _ = build_and_encode(sets, VocabScope.GLOBAL, k=20, seed=3)
        assert np.array_equal(t_region.rows, t_global.rows)

    def test_disjoint_supports_use_disjoint_bins(self):
        a = dset("a", Label.BENIGN, 4, seed=1)
        b = dset("b", Label.INVASIVE, 4, seed=2)
        b.descriptors += 1000.0  # far-away support
        table, _ = build_and_encode([a, b], VocabScope.GLOBAL, k=8, seed=0)
        bins_a = set(np.flatnonzero(table.rows[:4].sum(axis=0)))
        bins_b = set(np.flatnonzero(table.rows[4:].sum(axis=0)))
        assert bins_a and bins_b
        assert bins_a.isdisjoint(bins_b)

    def test_per_region_insufficient_names_set(self):
        sets = [dset("big", Label.BENIGN, 5), dset("tiny", Label.IN_SITU, 1, r=4)]
        with pytest.raises(InsufficientDataError, match="tiny"):
            build_and_encode(sets, VocabScope.PER_REGION, k=100, seed=0)

    def test_scan_order_row_permutation(self, rng):
        # encoding a set stored in serpentine order is the raster encoding
        # with the same row permutation applied
        d1 = dset("a", Label.BENIGN, 6, seed=4)
        cbs = build_and_encode([d1], VocabScope.GLOBAL, k=10, seed=1)[1]
        raster = encode_set(d1, cbs["*"])
        serp_perm = np.array([0, 1, 2, 5, 4, 3])  # a 2x3 grid reversed on row 1
        d2 = DescriptorSet("a", Label.BENIGN, 0, "t", d1.descriptors[serp_perm])
        serp = encode_set(d2, cbs["*"])
        assert np.array_equal(serp, raster[serp_perm])


class TestCodebookFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        cb = kmeans(rng.normal(size=(50, 6)), k=5, seed=11, scope=VocabScope.GLOBAL)
        path = tmp_path / "cb.pbcb"
        write_codebook(cb, path)
        loaded = read_codebook(path)
        assert loaded.centroids.tobytes() == cb.centroids.tobytes()
        assert (loaded.k, loaded.d) == (cb.k, cb.d)
        assert loaded.seed == cb.seed
        assert loaded.scope is cb.scope
        assert loaded.trim_fraction == np.float32(cb.trim_fraction)
        path2 = tmp_path / "cb2.pbcb"
        write_codebook(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_crc_rejected(self, tmp_path, rng):
        cb = kmeans(rng.normal(size=(50, 6)), k=5, seed=11)
        path = tmp_path / "cb.pbcb"
        write_codebook(cb, path)
        raw = bytearray(path.read_bytes())
        raw[20] ^= 0x55
        path.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError) as err:
            read_codebook(path)
        assert err.value.code is FormatErrorCode.BAD_CRC


class TestTableCsv:
    def test_round_trip(self, tmp_path):
        sets = [dset("r1", Label.BENIGN, 3, seed=1), dset("r2", Label.NORMAL, 2, seed=2)]
        table, _ = build_and_encode(sets, VocabScope.GLOBAL, k=6, seed=0)
        path = tmp_path / "table.csv"
        write_table_csv(table, path)
        loaded = read_table_csv(path)
        assert loaded.provenance == table.provenance
        assert np.array_equal(loaded.labels, table.labels)
        np.testing.assert_allclose(loaded.rows, table.rows, atol=1e-9)
