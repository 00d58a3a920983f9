import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gradcheck import batch_loss, finite_difference_errors
from oracles import adam_reference
from sinklab.errors import ConfigError, DivergenceError
from sinklab.grad import AdamState, Gradients, TrainConfig, adam_step, init_params, loss_and_grad, train
from sinklab.model import ModelParams
from sinklab.taskgen import sample_batch
from sinklab.theory import build_relu_construction

class TestLossAndGrad:
    def test_construction_is_stationary(self):
        batch = sample_batch(0, 16, 8, 6)
        loss, grads = loss_and_grad(build_relu_construction(8, 6), batch)
        assert loss <= 1e-24
        assert max(np.abs(g).max() for g in grads.arrays) <= 1e-12

    def test_loss_matches_forward(self):
        params = init_params(0, (2, 2), 6, "softmax", residual=True, scale=0.3)
        batch = sample_batch(1, 8, 7, 6)
        loss, _ = loss_and_grad(params, batch)
        assert loss == batch_loss(params, batch)

    @pytest.mark.parametrize("kind", ["softmax", "relu"])
    def test_pair_gradient_is_mean_of_singles(self, kind):
        params = init_params(3, (1, 2), 6, kind, scale=0.4)
        batch = sample_batch(2, 2, 7, 6)
        _, both = loss_and_grad(params, batch)
        _, first = loss_and_grad(params, [batch[0]])
        _, second = loss_and_grad(params, [batch[1]])
        for g, a, b in zip(both.arrays, first.arrays, second.arrays):
            assert_allclose(g, (a + b) / 2, rtol=1e-12, atol=1e-15)

    def test_gradient_paths(self):
        params = init_params(0, (1, 2), 5)
        _, grads = loss_and_grad(params, sample_batch(0, 4, 5, 5))
        assert grads.paths == tuple(params.paths())
        assert grads["layers[1][1].W_O"].shape == (5, 5)
        assert grads.norm() > 0

    @pytest.mark.parametrize("kind", ["softmax", "relu"])
    def test_finite_differences_small_model(self, kind):
        params = init_params(11, (1,), 5, kind, scale=0.5)
        errors, checked, _ = finite_difference_errors(params, sample_batch(4, 3, 5, 5))
        assert checked >= 80
        assert errors.max() <= 1e-4

    @pytest.mark.parametrize("kind", ["softmax", "relu"])
    @pytest.mark.parametrize("residual", [False, True])
    def test_finite_differences_two_layer_two_head(self, kind, residual):
        params = init_params(5, (2, 2), 5, kind, residual, scale=0.5)
        errors, checked, masked = finite_difference_errors(params, sample_batch(6, 3, 6, 5))
        assert checked + masked == 16 * 25
        assert checked >= 300
        assert errors.max() <= 1e-4


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = init_params(0, (1,), 5)
        zeros = Gradients(tuple(np.zeros((5, 5)) for _ in range(4)), tuple(params.paths()))
        new, state = adam_step(params, zeros, AdamState.zeros(params), TrainConfig())
        for a, b in zip(params.flat(), new.flat()):
            assert_array_equal(a, b)
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self):
        params = init_params(0, (1,), 5)
        grads = Gradients(tuple(np.full((5, 5), g) for g in (1.0, -3.0, 0.25, 40.0)), tuple(params.paths()))
        new, _ = adam_step(params, grads, AdamState.zeros(params), TrainConfig(learning_rate=1e-3))
        for a, b in zip(params.flat(), new.flat()):
            assert_allclose(np.abs(a - b), 1e-3, rtol=0, atol=1e-9)

    def test_two_steps_on_quadratic_match_reference(self):
        # f(w) = sum c (w - t)^2 / 2 on three entries; values frozen from a plain-float Adam loop
        target, curv = np.array([3.0, 0.0, -1.0]), np.array([1.0, 4.0, 0.25])
        frozen = [0.5019999945727861, -0.9980000136322464, 1.998000004539748]
        start = [0.5, -1.0, 2.0]
        assert_allclose(
            adam_reference(start, lambda w: list(curv * (np.array(w) - target)), 2, 1e-3, 0.9, 0.95, 1e-8), frozen, rtol=0, atol=1e-16
        )
        W = np.zeros((3, 3))
        W[0] = start
        params = ModelParams.single(W, np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))
        state, cfg = AdamState.zeros(params), TrainConfig()
        for _ in range(2):
            g = np.zeros((3, 3))
            g[0] = curv * (params.layers[0][0].W_Q[0] - target)
            grads = Gradients((g, *(np.zeros((3, 3)) for _ in range(3))), tuple(params.paths()))
            params, state = adam_step(params, grads, state, cfg)
        assert_allclose(params.layers[0][0].W_Q[0], frozen, rtol=0, atol=1e-15)
        assert state.step == 2


class TestTrainConfig:
    @pytest.mark.parametrize(
        "bad", [{"beta1": 1.0}, {"beta2": 0.0}, {"batch_size": 0}, {"stop_linf": 0.0}, {"eval_every": 0}, {"learning_rate": -1.0}]
    )
    def test_rejects_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.batch_size, cfg.stop_linf) == (1e-3, 0.9, 0.95, 128, 1e-2)
        assert (cfg.max_steps, cfg.eval_every, cfg.eps) == (200_000, 100, 1e-8)

    def test_dict_roundtrip(self):
        cfg = TrainConfig(learning_rate=1e-4, seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"momentum": 0.5})


class TestInit:
    def test_std(self):
        params = init_params(1, (1,), 50, scale=0.1)
        entries = np.concatenate([w.ravel() for w in params.flat()])
        assert entries.size == 10_000
        assert abs(entries.std() - 0.1) <= 0.005

    def test_seeded(self):
        a, b, c = init_params(4, (2,), 5), init_params(4, (2,), 5), init_params(5, (2,), 5)
        assert all(np.array_equal(x, y) for x, y in zip(a.flat(), b.flat()))
        assert not np.array_equal(a.flat()[0], c.flat()[0])

    def test_rejects_bad_scale(self):
        with pytest.raises(ConfigError):
            init_params(0, (1,), 5, scale=0.0)


class TestTrain:
    def test_construction_stops_immediately(self):
        params, history = train(build_relu_construction(16, 16), TrainConfig())
        assert history.converged and history.steps == 0
        assert history.records[0]["linf"] < 1e-12

    def test_deterministic_history(self):
        cfg = TrainConfig(max_steps=30, eval_every=10, seed=3, batch_size=16)
        arch = init_params(3, (1,), 6)
        p1, h1 = train(arch, cfg, L=8)
        p2, h2 = train(arch, cfg, L=8)
        assert h1.records == h2.records and h1.step_l2 == h2.step_l2
        assert all(np.array_equal(a, b) for a, b in zip(p1.flat(), p2.flat()))
        assert not h1.converged and h1.steps == 30
        assert [r["step"] for r in h1.records] == [0, 10, 20, 30]

    def test_history_files(self, tmp_path):
        _, history = train(init_params(0, (1,), 5), TrainConfig(max_steps=5, eval_every=5, batch_size=8), L=6)
        history.write_jsonl(tmp_path / "h.jsonl")
        history.write_timing(tmp_path / "t.json")
        lines = (tmp_path / "h.jsonl").read_text().splitlines()
        assert len(lines) == 2 and '"wall_time"' not in lines[0]
        assert "wall_time" in (tmp_path / "t.json").read_text()

    def test_divergence_keeps_snapshot(self):
        blown = ModelParams.single(np.full((5, 5), 1e308), 50 * np.eye(5), np.eye(5), np.eye(5))
        with pytest.raises(DivergenceError) as info:
            train(blown, TrainConfig(max_steps=3), L=5)
        assert info.value.snapshot is blown

    def test_loss_trends_down(self):
        _, history = train(init_params(0, (1,), 6), TrainConfig(seed=0, max_steps=400, batch_size=32), L=8, n=6)
        assert np.mean(history.step_l2[-100:]) < history.step_l2[0]
