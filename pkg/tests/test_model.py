import numpy as np
import pytest

from lcvd.data import FormatError
from lcvd.model import (Gradients, MlpClassifier, TrainConfig, TrainingDiverged, backward, forward,
                        load_checkpoint, lr_at_epoch, save_checkpoint, sgd_step)
from lcvd.numerics import InvalidArgument, Rng
from lcvd.risk import nll_terms

from oracles import fd_model_gradients, random_kink_free_case, rel_error


class TestForward:
    def test_zero_model_is_uniform(self):
        tr = forward(MlpClassifier.zeros([3, 5, 4]), np.array([1.0, -2.0, 0.5]))
        np.testing.assert_array_equal(tr.logits, np.zeros(4))
        np.testing.assert_allclose(tr.probabilities, 0.25, atol=1e-15)

    def test_single_linear_layer(self):
        w = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([0.5, -0.25])
        m = MlpClassifier([2, 2], [w], [b])
        x = np.array([2.0, 3.0])
        tr = forward(m, x)
        np.testing.assert_allclose(tr.logits, [2.5, 2.75], atol=1e-12)
        # penultimate of a single-layer model is the input itself
        np.testing.assert_array_equal(tr.penultimate_features, x)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(0)
        m = MlpClassifier.init([4, 8, 8, 5], Rng(1))
        for _ in range(20):
            p = forward(m, rng.normal(size=4) * 5).probabilities
            assert abs(p.sum() - 1) <= 1e-12

    def test_batch_matches_single(self):
        m = MlpClassifier.init([3, 6, 4], Rng(2))
        x = np.random.default_rng(1).normal(size=(5, 3))
        batch = forward(m, x)
        for i in range(5):
            np.testing.assert_allclose(forward(m, x[i]).logits, batch.logits[i], atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            forward(MlpClassifier.zeros([3, 2]), np.zeros(4))

    def test_pure(self):
        m = MlpClassifier.init([2, 4, 3], Rng(0))
        x = np.array([0.3, -0.7])
        assert forward(m, x).logits.tobytes() == forward(m, x).logits.tobytes()


class TestBackward:
    def test_zero_upstream(self):
        m = MlpClassifier.init([3, 5, 4], Rng(0))
        tr = forward(m, np.array([1.0, 2.0, 3.0]))
        g = backward(m, tr, np.zeros(4))
        for arr in g.weights + g.biases + [g.input_gradient]:
            assert not np.any(arr)

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        model, x, up = random_kink_free_case(np.random.default_rng(seed))
        g = backward(model, forward(model, x), up)
        fw, fb, fx = fd_model_gradients(model, x, up)
        for a, b in zip(g.weights + g.biases, fw + fb):
            assert rel_error(a, b) <= 1e-4
        assert rel_error(g.input_gradient, fx) <= 1e-4

    def test_batch_sums_parameter_gradients(self):
        m = MlpClassifier.init([3, 5, 4], Rng(0))
        x = np.random.default_rng(2).normal(size=(6, 3))
        up = np.random.default_rng(3).normal(size=(6, 4))
        gb = backward(m, forward(m, x), up)
        singles = [backward(m, forward(m, x[i]), up[i]) for i in range(6)]
        for layer in range(2):
            np.testing.assert_allclose(gb.weights[layer], sum(s.weights[layer] for s in singles), atol=1e-12)
        np.testing.assert_allclose(gb.input_gradient[2], singles[2].input_gradient, atol=1e-14)

    def test_trace_mismatch(self):
        a = MlpClassifier.init([2, 3, 2], Rng(0))
        b = MlpClassifier.init([2, 4, 2], Rng(0))
        with pytest.raises(InvalidArgument):
            backward(b, forward(a, np.zeros(2)), np.zeros(2))


class TestSgd:
    def test_zero_gradient_keeps_bits(self):
        m = MlpClassifier.init([2, 3, 2], Rng(0))
        before = [p.tobytes() for p in m.parameters()]
        zero = Gradients([np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases], np.zeros(2))
        sgd_step(m, zero, 0.1)
        assert [p.tobytes() for p in m.parameters()] == before

    def test_quadratic(self):
        # f(theta) = theta^2 at theta = 1 has gradient 2; one step of 0.1 lands on 0.8.
        m = MlpClassifier([1, 1], [np.array([[1.0]])], [np.array([0.0])])
        sgd_step(m, Gradients([np.array([[2.0]])], [np.array([0.0])], np.zeros(1)), 0.1)
        assert m.weights[0][0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_small_step_descends(self):
        rng = np.random.default_rng(0)
        ok, trials = 0, 100
        for t in range(trials):
            m = MlpClassifier.init([3, 8, 4], Rng(t))
            x = rng.normal(size=(16, 3))
            y = rng.integers(0, 4, 16)
            tr = forward(m, x)
            loss0, g = nll_terms(tr.probabilities, y)
            sgd_step(m, backward(m, tr, g), 1e-4)
            loss1, _ = nll_terms(forward(m, x).probabilities, y)
            ok += loss1.sum() <= loss0.sum()
        assert ok >= 0.95 * trials

    def test_divergence(self):
        m = MlpClassifier([1, 1], [np.array([[1.0]])], [np.array([0.0])])
        with pytest.raises(TrainingDiverged):
            sgd_step(m, Gradients([np.array([[np.inf]])], [np.array([0.0])], np.zeros(1)), 0.1)

    def test_bad_lr(self):
        m = MlpClassifier.zeros([1, 2])
        with pytest.raises(InvalidArgument):
            sgd_step(m, Gradients([np.zeros((2, 1))], [np.zeros(2)], np.zeros(1)), 0.0)


class TestSchedule:
    def test_paper_schedule(self):
        cfg = TrainConfig.paper_schedule()
        assert lr_at_epoch(cfg, 0) == 0.1
        assert lr_at_epoch(cfg, 120) == pytest.approx(0.01, rel=1e-12)
        assert lr_at_epoch(cfg, 199) == pytest.approx(0.001, rel=1e-12)

    def test_desk_schedule(self):
        cfg = TrainConfig(epochs=40, milestones=(20, 30))
        assert lr_at_epoch(cfg, 35) == pytest.approx(0.001, rel=1e-12)
        assert cfg.final_lr == pytest.approx(0.001, rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(InvalidArgument):
            lr_at_epoch(TrainConfig(epochs=4, milestones=(2,)), 4)

    def test_odd_batch(self):
        with pytest.raises(InvalidArgument):
            TrainConfig(batch_size=127)


class TestCheckpoint:
    def test_round_trip_bits(self, tmp_path):
        m = MlpClassifier.init([5, 7, 3, 4], Rng(11))
        save_checkpoint(m, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.layer_dims == m.layer_dims
        assert [p.tobytes() for p in back.parameters()] == [p.tobytes() for p in m.parameters()]

    def test_layout(self, tmp_path):
        m = MlpClassifier([2, 1], [np.array([[1.0, 2.0]])], [np.array([3.0])])
        save_checkpoint(m, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:5] == b"LCVD1"
        assert raw[5:9] == (2).to_bytes(4, "little")
        assert np.frombuffer(raw[17:], "<f8").tolist() == [1.0, 2.0, 3.0]

    def test_truncated(self, tmp_path):
        m = MlpClassifier.init([3, 4, 2], Rng(0))
        save_checkpoint(m, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE1" + bytes(20))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(tmp_path / "x.ckpt")
