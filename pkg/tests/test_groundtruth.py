import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from switchseg import groundtruth as gt
from switchseg.groundtruth import Instance, InstanceSet

EIGHT = np.ones((3, 3), dtype=bool)


def disk(shape, center, radius):
    yy, xx = np.indices(shape)
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2


def n_components(mask):
    return ndimage.label(mask, structure=EIGHT)[1]


def erosion_depth(mask):
    """Oracle chessboard depth by repeated 3x3 erosion."""
    depth = np.zeros(mask.shape, dtype=int)
    cur = mask.copy()
    level = 0
    while cur.any():
        level += 1
        depth[cur] = level
        cur = ndimage.binary_erosion(cur, structure=EIGHT, border_value=0)
    return depth


def random_blob(rng, size=24):
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.0)
    mask = noise > np.quantile(noise, 0.6)
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        mask[size // 2, size // 2] = True
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


class TestShrink:
    def test_single_pixel_survives(self):
        m = np.zeros((5, 5), dtype=bool)
        m[2, 3] = True
        np.testing.assert_array_equal(gt.shrink_instance(m, 0.25), m)

    def test_disk_radius_ten(self):
        m = disk((31, 31), (15, 15), 10)
        assert m.sum() == 317
        out = gt.shrink_instance(m, 0.25)
        assert 77 <= out.sum() <= 81
        rr, cc = np.nonzero(out)
        assert abs(rr.mean() - 15) < 0.5 and abs(cc.mean() - 15) < 0.5

    def test_fraction_one_is_identity(self):
        m = random_blob(np.random.default_rng(0))
        np.testing.assert_array_equal(gt.shrink_instance(m, 1.0), m)

    def test_matches_level_set_oracle(self):
        # deepest levels come first: every kept pixel is at least as deep as every dropped one
        for seed in range(20):
            m = random_blob(np.random.default_rng(seed))
            out = gt.shrink_instance(m, 0.25)
            depth = erosion_depth(m)
            assert out.sum() == max(1, round(0.25 * m.sum()))
            dropped = m & ~out
            if dropped.any():
                assert depth[out].min() >= depth[dropped].max()
            # kept set is contained in the interior when the instance has one
            interior = ndimage.binary_erosion(m, structure=EIGHT, border_value=0)
            if interior.sum() >= out.sum():
                assert not (out & ~interior).any()

    def test_errors(self):
        with pytest.raises(ValueError):
            gt.shrink_instance(np.zeros((3, 3), dtype=bool))
        with pytest.raises(ValueError):
            gt.shrink_instance(np.ones((3, 3), dtype=bool), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 100_000), a=st.floats(0.01, 1.0), b=st.floats(0.01, 1.0))
    def test_monotone_in_fraction(self, seed, a, b):
        a, b = min(a, b), max(a, b)
        m = random_blob(np.random.default_rng(seed))
        small, big = gt.shrink_instance(m, a), gt.shrink_instance(m, b)
        assert not (small & ~big).any()
        assert not (big & ~m).any()

    def test_centroid_preserved_for_convex(self):
        for r in (4, 6, 9, 12):
            m = disk((40, 40), (19.3, 20.6), r)
            out = gt.shrink_instance(m)
            c_in = np.argwhere(m).mean(axis=0)
            c_out = np.argwhere(out).mean(axis=0)
            assert np.hypot(*(c_in - c_out)) <= 1.0


class TestLabelMap:
    def _set(self, masks):
        h, w = masks[0].shape
        return InstanceSet(h, w, [Instance.from_mask(k + 1, m) for k, m in enumerate(masks)])

    def test_two_far_disks(self):
        s = self._set([disk((60, 60), (15, 15), 8), disk((60, 60), (45, 45), 8)])
        assert n_components(gt.build_label_map(s)) == 2

    def test_touching_disks_separate(self):
        a, b = disk((40, 50), (20, 18), 10), disk((40, 50), (20, 32), 10)
        assert n_components(a | b) == 1
        out = gt.build_label_map(self._set([a, b]))
        assert n_components(out) == 2

    def test_empty(self):
        out = gt.build_label_map(InstanceSet(8, 9))
        assert out.shape == (8, 9) and not out.any()

    def test_forced_separation_when_shrinking_is_not_enough(self):
        # heavy overlap: plain 25% shrinking would merge, erosion must split them
        a, b = disk((30, 40), (15, 16), 8), disk((30, 40), (15, 22), 8)
        naive = gt.shrink_instance(a) | gt.shrink_instance(b)
        out = gt.build_label_map(self._set([a, b]))
        assert n_components(naive) == 1
        assert n_components(out) == 2

    def test_component_count_on_synthetic_scenes(self):
        from switchseg import synth
        spec = synth.SceneSpec(64, 64, count_range=(5, 15), min_separation=6.0)
        for scene in synth.generate_scenes(spec, 20):
            assert n_components(gt.build_label_map(scene.instances)) == len(scene.instances)


class TestInstances:
    def test_label_raster_roundtrip(self):
        lab = np.zeros((10, 12), dtype=np.int32)
        lab[1:4, 2:5] = 1
        lab[6:9, 7:11] = 2
        s = InstanceSet.from_label_raster(lab)
        assert len(s) == 2
        np.testing.assert_allclose(s.centroids, [[2, 3], [7, 8.5]])
        np.testing.assert_array_equal(s.union_mask(), lab > 0)

    def test_contains_uses_rounding(self):
        inst = Instance.from_mask(1, disk((20, 20), (10, 10), 3))
        assert inst.contains(10.4, 10.4)
        assert not inst.contains(0.0, 0.0)

    def test_out_of_canvas(self):
        with pytest.raises(ValueError):
            InstanceSet(5, 5, [Instance(1, 3, 3, np.ones((4, 4)))])


class TestIO:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_rle_roundtrip(self, seed):
        m = np.random.default_rng(seed).random((7, 11)) < 0.4
        np.testing.assert_array_equal(gt.rle_decode(gt.rle_encode(m), 7, 11), m)

    def test_rle_bad_run(self):
        with pytest.raises(ValueError):
            gt.rle_decode([[70, 10]], 7, 11)

    def test_jsonl_roundtrip(self, tmp_path):
        lab = np.zeros((16, 16), dtype=np.int32)
        lab[2:6, 2:6] = 1
        lab[9:14, 8:12] = 2
        s = InstanceSet.from_label_raster(lab)
        path = tmp_path / "inst.jsonl"
        gt.write_instances(path, s)
        back = gt.read_instances(path)
        assert back.shape == s.shape
        for a, b in zip(s, back):
            np.testing.assert_array_equal(a.full_mask(s.shape), b.full_mask(s.shape))

    def test_empty_file_needs_shape(self, tmp_path):
        path = tmp_path / "none.jsonl"
        gt.write_instances(path, InstanceSet(4, 4))
        with pytest.raises(ValueError):
            gt.read_instances(path)
        assert gt.read_instances(path, shape=(4, 4)).shape == (4, 4)
