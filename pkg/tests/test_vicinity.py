from collections import Counter, defaultdict

import numpy as np
import pytest

from lcvd.data import COMPLEMENTARY, GROUND_TRUTH, Dataset, circle_means, gen_gaussian_mixture
from lcvd.numerics import InvalidArgument, Rng
from lcvd.theorem import monte_carlo_class_count
from lcvd.vicinity import (DISTINCT_CLASS, VicinityConfig, build_finetune_batch, draw_finetune_arrays,
                           draw_ood_arrays, draw_ood_sample, make_ood_pool, mix_inputs, sample_dirac)

from oracles import multinomial_3sigma_ok


@pytest.fixture(scope="module")
def ds():
    return gen_gaussian_mixture(10, 2, 100, circle_means(10), 0.35, Rng(0))


def _check_invariants(ex, ds, M):
    assert len(ex.constituent_indices) == M
    members = ds.inputs[list(ex.constituent_indices)]
    assert np.max(np.abs(ex.input - members.mean(axis=0))) <= 1e-12
    assert ex.constituent_label_set == {int(ds.labels[i]) for i in ex.constituent_indices}
    assert ex.complementary_label in ex.constituent_label_set
    assert len(set(ex.constituent_indices)) == M
    assert ex.label_kind == COMPLEMENTARY


class TestDirac:
    def test_copy(self, ds):
        ex = sample_dirac(ds, 17)
        assert ex.input.tobytes() == ds.inputs[17].tobytes() and ex.label == ds.labels[17]
        assert ex.label_kind == GROUND_TRUTH

    def test_empirical_frequencies(self, ds):
        counts = Counter(sample_dirac(ds, i).label for i in range(len(ds)))
        assert [counts[k] for k in range(10)] == ds.class_counts().tolist()

    def test_out_of_range(self, ds):
        with pytest.raises(InvalidArgument):
            sample_dirac(ds, len(ds))


class TestMix:
    def test_single_is_bit_exact(self):
        x = np.array([0.1, 0.7, -3.3])
        assert mix_inputs([x]).tobytes() == x.tobytes()

    def test_mean(self):
        np.testing.assert_array_equal(mix_inputs([[1.0, 3.0], [3.0, 5.0]]), [2.0, 4.0])

    def test_identical(self):
        x = np.array([0.1, 0.2, 0.3])
        assert np.max(np.abs(mix_inputs([x] * 7) - x)) <= 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(InvalidArgument):
            mix_inputs([[1.0], [1.0, 2.0]])


class TestDrawOod:
    def test_default_M(self):
        assert VicinityConfig().M == 10

    def test_M_one(self, ds):
        ex = draw_ood_sample(ds, 5, VicinityConfig(M=1), Rng(0))
        assert ex.input.tobytes() == ds.inputs[5].tobytes()
        assert ex.constituent_label_set == {int(ds.labels[5])}
        assert ex.complementary_label == ds.labels[5]

    def test_anchor_first(self, ds):
        ex = draw_ood_sample(ds, 42, VicinityConfig(), Rng(1))
        assert ex.constituent_indices[0] == 42
        _check_invariants(ex, ds, 10)

    def test_label_uniform_over_set(self):
        small = gen_gaussian_mixture(3, 2, 4, circle_means(3), 0.3, Rng(2))
        arr = draw_ood_arrays(small, np.zeros(10_000, dtype=int), VicinityConfig(M=3), Rng(3))
        groups = defaultdict(list)
        for ex in arr.examples():
            assert ex.complementary_label in ex.constituent_label_set
            groups[ex.constituent_label_set].append(ex.complementary_label)
        for labels_set, ys in groups.items():
            if len(labels_set) < 2:
                continue
            members = sorted(labels_set)
            freqs = np.array([ys.count(c) for c in members]) / len(ys)
            assert multinomial_3sigma_ok(freqs, np.full(len(members), 1 / len(members)), len(ys))

    def test_distinct_class(self, ds):
        for ex in draw_ood_arrays(ds, np.arange(50), VicinityConfig(M=10, companion_policy=DISTINCT_CLASS),
                                  Rng(4)).examples():
            assert len(ex.constituent_label_set) == 10
            _check_invariants(ex, ds, 10)

    def test_distinct_class_too_many(self, ds):
        with pytest.raises(InvalidArgument):
            draw_ood_sample(ds, 0, VicinityConfig(M=11, companion_policy=DISTINCT_CLASS), Rng(0))

    def test_M_bounds(self, ds):
        with pytest.raises(InvalidArgument):
            VicinityConfig(M=0)
        with pytest.raises(InvalidArgument):
            VicinityConfig(M=1001)
        tiny = Dataset(np.zeros((3, 2)), [0, 1, 0], 2, "tiny")
        with pytest.raises(InvalidArgument):
            draw_ood_sample(tiny, 0, VicinityConfig(M=4), Rng(0))

    def test_without_replacement_when_M_equals_N(self):
        tiny = Dataset(np.arange(10.0).reshape(5, 2), [0, 1, 0, 1, 1], 2, "tiny")
        ex = draw_ood_sample(tiny, 2, VicinityConfig(M=5), Rng(0))
        assert sorted(ex.constituent_indices) == [0, 1, 2, 3, 4]

    def test_deterministic(self, ds):
        a = draw_ood_arrays(ds, np.arange(20), VicinityConfig(), Rng(9))
        b = draw_ood_arrays(ds, np.arange(20), VicinityConfig(), Rng(9))
        assert a.inputs.tobytes() == b.inputs.tobytes()
        assert a.complementary_labels.tolist() == b.complementary_labels.tolist()

    def test_class_count_mode_matches_monte_carlo(self, ds):
        arr = draw_ood_arrays(ds, Rng(5).integers(len(ds), size=20_000), VicinityConfig(M=10), Rng(6))
        counts = np.array([len(set(row)) for row in arr.constituent_labels.tolist()])
        assert np.all(counts <= 10)
        empirical = np.bincount(counts, minlength=11)[1:]
        mc = monte_carlo_class_count(10, 10, 200_000, Rng(7))
        assert int(np.argmax(empirical)) == int(np.argmax(mc))


class TestBatch:
    def test_split_128(self, ds):
        ids, oods = build_finetune_batch(ds, 128, VicinityConfig(), Rng(0))
        assert len(ids) == 64 and len(oods) == 64
        assert all(e.label_kind == GROUND_TRUTH for e in ids)
        assert len({e.input.tobytes() for e in ids}) == 64

    def test_split_2(self, ds):
        ids, oods = build_finetune_batch(ds, 2, VicinityConfig(), Rng(0))
        assert len(ids) == 1 and len(oods) == 1

    @pytest.mark.parametrize("b", [3, 0, 127])
    def test_odd(self, ds, b):
        with pytest.raises(InvalidArgument):
            build_finetune_batch(ds, b, VicinityConfig(), Rng(0))

    def test_invariant_sweep(self, ds):
        rng = Rng(11)
        for _ in range(1000):
            id_idx, ood = draw_finetune_arrays(ds, 16, VicinityConfig(), rng)
            assert len(set(id_idx.tolist())) == 8
            mixed = ds.inputs[ood.constituent_indices].mean(axis=1)
            assert np.max(np.abs(ood.inputs - mixed)) <= 1e-12
            assert np.all(np.any(ood.constituent_labels == ood.complementary_labels[:, None], axis=1))
            assert np.all(ood.constituent_labels == ds.labels[ood.constituent_indices])

    def test_pool(self, ds):
        pool = make_ood_pool(ds, 30, VicinityConfig(), Rng(1))
        _, ood = draw_finetune_arrays(ds, 20, VicinityConfig(), Rng(2), pool=pool)
        pool_rows = {r.tobytes() for r in pool.inputs}
        assert all(r.tobytes() in pool_rows for r in ood.inputs)
