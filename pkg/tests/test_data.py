import json
import struct

import numpy as np
import pytest

from dacd.data import (
    DomainDataset,
    FormatError,
    PatchSampler,
    Raster,
    SynthSpec,
    extract_patch,
    load_dataset,
    normalize_minmax,
    read_label_map,
    read_raster,
    sample_finetune_set,
    sample_training_set,
    save_dataset,
    synth_generate,
    write_label_map,
    write_pgm,
    write_raster,
)
from dacd.kernels import MultiKernel, median_heuristic
from dacd.mmd import mmd2_full_unbiased


class TestRasterIO:
    def test_round_trip(self, tmp_path, rng):
        r = Raster(rng.normal(size=(7, 5, 3)) * 1e3)
        write_raster(r, tmp_path / "a.mtr")
        back = read_raster(tmp_path / "a.mtr")
        assert back.values.tobytes() == r.values.tobytes()

    def test_byte_layout(self, tmp_path):
        write_raster(Raster(np.full((1, 1, 1), 0.5)), tmp_path / "one.mtr")
        blob = (tmp_path / "one.mtr").read_bytes()
        header = b'{"bands":1,"dtype":"f64le","height":1,"width":1}'
        expected = b"MTR1" + struct.pack("<Q", len(header)) + header + struct.pack("<d", 0.5)
        assert blob == expected
        assert len(blob) == 4 + 8 + len(header) + 8

    def test_truncated_payload(self, tmp_path):
        write_raster(Raster(np.ones((2, 2, 1))), tmp_path / "t.mtr")
        blob = (tmp_path / "t.mtr").read_bytes()
        (tmp_path / "t.mtr").write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="payload"):
            read_raster(tmp_path / "t.mtr")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.mtr").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FormatError, match="magic"):
            read_raster(tmp_path / "x.mtr")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "x.mtr").write_bytes(b"MTR1" + struct.pack("<Q", 100) + b"{}")
        with pytest.raises(FormatError):
            read_raster(tmp_path / "x.mtr")

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            Raster(np.array([[[np.nan]]]))
        with pytest.raises(ValueError):
            Raster(np.zeros((2, 2, 0)))

    def test_label_map(self, tmp_path):
        lab = np.array([[0, 1], [255, 0]], dtype=np.uint8)
        write_label_map(lab, tmp_path / "l.mtr")
        np.testing.assert_array_equal(read_label_map(tmp_path / "l.mtr"), lab)
        write_raster(Raster(np.full((1, 1, 1), 2.0)), tmp_path / "bad.mtr")
        with pytest.raises(FormatError):
            read_label_map(tmp_path / "bad.mtr")

    def test_pgm(self, tmp_path):
        write_pgm(np.array([[0, 1, 1]]), tmp_path / "m.pgm")
        assert (tmp_path / "m.pgm").read_bytes() == b"P5\n3 1\n255\n\x00\xff\xff"

    def test_normalize(self):
        v = np.stack([np.array([[1.0, 3.0]]), np.array([[5.0, 5.0]])], axis=-1)
        out = normalize_minmax(Raster(v)).values
        np.testing.assert_array_equal(out[..., 0], [[0.0, 1.0]])
        np.testing.assert_array_equal(out[..., 1], [[0.0, 0.0]])


def ramp(h=4, w=4):
    return Raster((10.0 * np.arange(h)[:, None] + np.arange(w)[None, :])[:, :, None])


class TestPatches:
    def test_centre_pixel(self, rng):
        r = Raster(rng.random((6, 7, 2)))
        for row, col in [(0, 0), (5, 6), (2, 3)]:
            np.testing.assert_array_equal(extract_patch(r, row, col, 5)[2, 2], r.values[row, col])

    def test_corner_mirror(self):
        p = extract_patch(ramp(), 0, 0, 3)[:, :, 0]
        np.testing.assert_array_equal(p, [[11, 10, 11], [1, 0, 1], [11, 10, 11]])

    def test_far_corner_mirror(self):
        p = extract_patch(ramp(), 3, 3, 3)[:, :, 0]
        np.testing.assert_array_equal(p, [[22, 23, 22], [32, 33, 32], [22, 23, 22]])

    def test_interior_copy(self, rng):
        r = Raster(rng.random((10, 10, 3)))
        np.testing.assert_array_equal(extract_patch(r, 5, 4, 5), r.values[3:8, 2:7])

    def test_even_size(self):
        with pytest.raises(ValueError):
            extract_patch(ramp(), 1, 1, 4)

    def test_sampler_matches_single(self, rng):
        a, b = Raster(rng.random((6, 5, 2))), Raster(rng.random((6, 5, 2)))
        coords = np.array([[0, 0], [5, 4], [2, 1], [0, 4]])
        p1, p2 = PatchSampler(a, b, 7).patches(coords)
        for i, (r, c) in enumerate(coords):
            np.testing.assert_array_equal(p1[i], extract_patch(a, r, c, 7))
            np.testing.assert_array_equal(p2[i], extract_patch(b, r, c, 7))


def labeled(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    z = Raster(np.zeros(labels.shape + (1,)))
    return DomainDataset(z, z, labels)


class TestDataset:
    def test_extent_checks(self):
        with pytest.raises(ValueError):
            DomainDataset(Raster(np.zeros((2, 2, 1))), Raster(np.zeros((2, 3, 1))))
        with pytest.raises(ValueError):
            DomainDataset(Raster(np.zeros((2, 2, 1))), Raster(np.zeros((2, 2, 1))), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            DomainDataset(Raster(np.zeros((2, 2, 1))), Raster(np.zeros((2, 2, 1))), indices=[[2, 0]])

    def test_unlabeled(self):
        ds = DomainDataset(Raster(np.zeros((2, 2, 1))), Raster(np.zeros((2, 2, 1))))
        assert ds.n == 4
        with pytest.raises(ValueError):
            ds.sample_labels()


class TestSampling:
    def test_all_pixels(self):
        lab = np.zeros((10, 10))
        lab[:3] = 1
        lab[9, 9] = 255
        ds = sample_training_set(labeled(lab), 1.0, np.inf, seed=0)
        assert ds.n == 99

    def test_floor_count(self):
        lab = np.zeros((25, 40))
        lab[::2] = 1
        assert sample_training_set(labeled(lab), 0.1, np.inf, seed=3).n == 100
        assert sample_training_set(labeled(lab), 0.0999, np.inf, seed=3).n == 99

    def test_ratio_cap(self):
        lab = np.zeros((50, 50))
        lab[:2] = 1
        ds = sample_training_set(labeled(lab), 1.0, 4.0, seed=0)
        y = ds.sample_labels()
        assert (y == 1).sum() == 100
        assert (y == 0).sum() == 400

    def test_deterministic(self):
        lab = np.random.default_rng(0).integers(0, 2, (30, 30))
        a = sample_training_set(labeled(lab), 0.3, 4.0, seed=9)
        b = sample_training_set(labeled(lab), 0.3, 4.0, seed=9)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_training_set(labeled(np.full((3, 3), 255)), 0.5)
        with pytest.raises(ValueError):
            sample_training_set(labeled(np.zeros((3, 3))), 0.0)

    def test_finetune_balanced(self):
        lab = np.zeros((30, 30))
        lab[:10] = 1
        y = sample_finetune_set(labeled(lab), 200, seed=1).sample_labels()
        assert (y == 1).sum() == 100 and (y == 0).sum() == 100

    def test_finetune_fallback(self):
        lab = np.zeros((30, 30))
        lab[0, :30] = 1
        y = sample_finetune_set(labeled(lab), 200, seed=1).sample_labels()
        assert (y == 1).sum() == 30 and (y == 0).sum() == 170

    def test_finetune_deterministic(self):
        lab = np.random.default_rng(1).integers(0, 2, (30, 30))
        a = sample_finetune_set(labeled(lab), 200, seed=4)
        b = sample_finetune_set(labeled(lab), 200, seed=4)
        np.testing.assert_array_equal(a.indices, b.indices)


def small_spec(**kw):
    return SynthSpec(height=96, width=96, blob_scale=6.0, changed_blobs=4, **kw)


def patch_samples(ds, n, seed, k=3):
    rng = np.random.default_rng(seed)
    coords = ds.indices[rng.choice(ds.n, n, replace=False)]
    p1, p2 = PatchSampler(ds.t1, ds.t2, k).patches(coords)
    return np.concatenate([p1.reshape(n, -1), p2.reshape(n, -1)], axis=1)


class TestSynth:
    def test_shapes_and_labels(self):
        src, tgt = synth_generate(small_spec(), seed=1)
        for ds in (src, tgt):
            assert ds.t1.shape == (96, 96, 4)
            assert set(np.unique(ds.labels)) <= {0, 1}

    def test_changed_fraction(self):
        spec = SynthSpec()
        src, tgt = synth_generate(spec, seed=42)
        for ds in (src, tgt):
            assert abs(ds.labels.mean() - spec.changed_fraction) <= 0.02

    def test_deterministic(self):
        a = synth_generate(small_spec(), seed=5)
        b = synth_generate(small_spec(), seed=5)
        for x, y in zip(a, b):
            assert x.t1.values.tobytes() == y.t1.values.tobytes()
            assert x.t2.values.tobytes() == y.t2.values.tobytes()
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_changed_pixels_differ(self):
        src, _ = synth_generate(small_spec(noise=0.0, texture=0.0), seed=2)
        diff = np.abs(src.t2.values - src.t1.values).max(axis=-1)
        assert np.all(diff[src.labels == 1] > 0)
        assert np.all(diff[src.labels == 0] == 0)

    def test_degenerate_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(height=0)
        with pytest.raises(ValueError):
            SynthSpec(signatures=((0.1, 0.1, 0.1, 0.1),))
        with pytest.raises(ValueError):
            SynthSpec(target_gain=(1.0, 1.0))

    def test_spec_json(self):
        d = SynthSpec().to_dict()
        assert SynthSpec(**json.loads(json.dumps(d))) == SynthSpec()

    def test_no_shift_same_distribution(self):
        # one scene pair differs in class proportions, so each trial pools
        # patches over several independently generated scenes
        spec = SynthSpec(height=128, width=128, blob_scale=6.0, changed_blobs=4,
                         target_gain=(1.0,) * 4, target_bias=(0.0,) * 4, target_noise=0.03)
        values = []
        for trial in range(8):
            a, b = [], []
            for j in range(8):
                src, tgt = synth_generate(spec, seed=1000 * trial + j)
                a.append(patch_samples(src, 40, j))
                b.append(patch_samples(tgt, 40, j + 7))
            a, b = np.concatenate(a), np.concatenate(b)
            mk = MultiKernel((median_heuristic(np.concatenate([a, b])),), (1.0,))
            values.append(mmd2_full_unbiased(a, b, mk))
        values = np.array(values)
        se = values.std(ddof=1) / np.sqrt(len(values))
        assert abs(values.mean()) <= 3 * se

    def test_shift_dominates_same_distribution(self):
        shifted = synth_generate(SynthSpec(), seed=42)
        same = synth_generate(SynthSpec(target_gain=(1.0,) * 4, target_bias=(0.0,) * 4, target_noise=0.03), seed=42)
        ratios = []
        for src, tgt in (shifted, same):
            a, b = patch_samples(src, 400, 0), patch_samples(tgt, 400, 1)
            mk = MultiKernel((median_heuristic(np.concatenate([a, b])),), (1.0,))
            ratios.append(mmd2_full_unbiased(a, b, mk))
        assert ratios[0] >= 5 * abs(ratios[1])

    def test_save_load(self, tmp_path):
        src, _ = synth_generate(small_spec(), seed=3)
        paths = save_dataset(src, tmp_path, "source")
        back = load_dataset(paths["t1"], paths["t2"], paths["labels"])
        assert back.t1.values.tobytes() == src.t1.values.tobytes()
        np.testing.assert_array_equal(back.labels, src.labels)
