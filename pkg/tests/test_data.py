import struct

import numpy as np
import pytest

from lcvd.data import (Dataset, FormatError, circle_means, gen_gaussian_mixture, gen_ood_ring, gen_ood_shifted,
                       gen_ood_uniform, load_csv, load_idx, normalize_apply, normalize_fit, write_csv)
from lcvd.numerics import InvalidArgument, Rng


@pytest.fixture
def mixture():
    return gen_gaussian_mixture(4, 2, 50, circle_means(4), 0.3, Rng(1))


class TestGaussianMixture:
    def test_counts(self, mixture):
        assert len(mixture) == 200
        assert mixture.class_counts().tolist() == [50, 50, 50, 50]

    def test_tiny_sigma(self):
        means = circle_means(4)
        d = gen_gaussian_mixture(4, 2, 20, means, 1e-9, Rng(2))
        assert np.max(np.abs(d.inputs - means[d.labels])) < 1e-6

    def test_law_of_large_numbers(self):
        means = np.array([[0.0, 1.0], [3.0, -2.0], [-1.0, -1.0], [5.0, 5.0]])
        d = gen_gaussian_mixture(4, 2, 10_000, means, 1.0, Rng(3))
        for k in range(4):
            assert np.all(np.abs(d.inputs[d.labels == k].mean(axis=0) - means[k]) < 0.05)

    def test_deterministic(self):
        a = gen_gaussian_mixture(3, 2, 10, circle_means(3), 0.5, Rng(9))
        b = gen_gaussian_mixture(3, 2, 10, circle_means(3), 0.5, Rng(9))
        assert a.inputs.tobytes() == b.inputs.tobytes()

    @pytest.mark.parametrize("kw", [dict(K=1), dict(dim=0), dict(sigma=0.0)])
    def test_degenerate(self, kw):
        args = dict(K=3, dim=2, n_per_class=5, class_means=circle_means(3), sigma=0.1)
        args.update(kw)
        if "K" in kw:
            args["class_means"] = np.zeros((kw["K"], 2))
        with pytest.raises(InvalidArgument):
            gen_gaussian_mixture(rng=Rng(0), **args)


class TestOodGenerators:
    def test_uniform_range(self):
        d = gen_ood_uniform(100, 2, -1.0, 1.0, Rng(0))
        assert len(d) == 100 and d.inputs.min() >= -1 and d.inputs.max() <= 1
        assert not d.labels_usable and np.all(d.labels == 0)

    def test_ring_norms(self):
        d = gen_ood_ring(1000, 3.0, 4.0, Rng(0))
        r = np.linalg.norm(d.inputs, axis=1)
        assert r.min() >= 3.0 and r.max() <= 4.0
        assert "ring" in d.name

    def test_shifted_is_affine(self, mixture):
        d = gen_ood_shifted(mixture, [1.0, -0.5])
        np.testing.assert_array_equal(d.inputs, mixture.inputs + np.array([1.0, -0.5]))

    @pytest.mark.parametrize("call", [
        lambda: gen_ood_uniform(10, 2, 1.0, 1.0, Rng(0)),
        lambda: gen_ood_ring(10, 4.0, 3.0, Rng(0)),
        lambda: gen_ood_ring(10, 1.0, 2.0, Rng(0), dim=3),
    ])
    def test_invalid(self, call):
        with pytest.raises(InvalidArgument):
            call()


def _write_idx(tmp_path, n=10, rows=28, cols=28, magic=0x803, truncate=0):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, n * rows * cols, dtype=np.uint8)
    labels = rng.integers(0, 10, n, dtype=np.uint8)
    img = struct.pack(">IIII", magic, n, rows, cols) + pixels.tobytes()
    lab = struct.pack(">II", 0x801, n) + labels.tobytes()
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(img[: len(img) - truncate])
    lp.write_bytes(lab)
    return ip, lp, pixels, labels


class TestIdx:
    def test_shapes_and_scaling(self, tmp_path):
        ip, lp, pixels, labels = _write_idx(tmp_path)
        d = load_idx(ip, lp, num_classes=10)
        assert d.inputs.shape == (10, 784)
        np.testing.assert_array_equal(d.inputs.ravel(), pixels / 255.0)
        np.testing.assert_array_equal(d.labels, labels)

    def test_bad_magic(self, tmp_path):
        ip, lp, *_ = _write_idx(tmp_path, magic=0x801)
        with pytest.raises(FormatError, match="byte 0"):
            load_idx(ip, lp)

    def test_truncated(self, tmp_path):
        ip, lp, *_ = _write_idx(tmp_path, truncate=5)
        with pytest.raises(FormatError, match="truncated"):
            load_idx(ip, lp)

    def test_label_out_of_range(self, tmp_path):
        ip, lp, _, labels = _write_idx(tmp_path)
        with pytest.raises(FormatError, match="byte"):
            load_idx(ip, lp, num_classes=int(labels.max()))


class TestCsv:
    def test_load(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("label,f0,f1\n0,1.5,2\n1,-3,4e-3\n2,0,0\n")
        d = load_csv(p)
        assert d.inputs.shape == (3, 2) and d.num_classes == 3
        assert d.inputs[1].tolist() == [-3.0, 0.004]

    def test_round_trip(self, tmp_path, mixture):
        p, q = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(mixture, p)
        back = load_csv(p)
        np.testing.assert_allclose(back.inputs, mixture.inputs, atol=1e-12, rtol=0)
        write_csv(back, q)
        assert p.read_text() == q.read_text()

    def test_bad_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("y,f0\n0,1\n")
        with pytest.raises(FormatError, match="line 1"):
            load_csv(p)

    def test_label_too_large(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("label,f0\n0,1\n5,2\n")
        with pytest.raises(FormatError, match="line 3"):
            load_csv(p, num_classes=3)


class TestNormalize:
    def test_constant_feature(self):
        d = Dataset(np.array([[0.1, 1.0], [0.1, 2.0], [0.1, 3.0]]), [0, 1, 0], 2, "c")
        out = normalize_apply(normalize_fit(d), d)
        assert np.all(out.inputs[:, 0] == 0.0)

    def test_train_statistics(self, mixture):
        out = normalize_apply(normalize_fit(mixture), mixture)
        assert np.all(np.abs(out.inputs.mean(axis=0)) < 1e-9)
        np.testing.assert_allclose(out.inputs.std(axis=0), 1.0, atol=1e-9)

    def test_uses_train_not_test(self, mixture):
        test = gen_gaussian_mixture(4, 2, 30, circle_means(4) + 1.0, 0.3, Rng(5))
        stats = normalize_fit(mixture)
        out = normalize_apply(stats, test)
        direct = (test.inputs - mixture.inputs.mean(axis=0)) / mixture.inputs.std(axis=0)
        np.testing.assert_allclose(out.inputs, direct, atol=1e-12)
        assert np.any(np.abs(out.inputs.mean(axis=0)) > 0.1)


def test_dataset_invariants():
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((2, 2)), [0, 3], 3, "bad")
    with pytest.raises(InvalidArgument):
        Dataset(np.array([[np.nan, 0.0]]), [0], 1, "nan")
