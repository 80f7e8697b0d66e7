"""
Unit tests for the Seq2Seq LSTM + multi-head attention predictor
"""

import math

import numpy as np
import pytest
from pydantic import ValidationError as PydanticValidationError

from engine.python.errors import CongruenceError, ContractError
from engine.python.model import (
    Architecture,
    ModelConfig,
    SpeedModel,
    init_params,
    lstm_stack_forward,
    model_forward,
    mse_loss,
    multi_head_attention,
    proximal_term,
)
from engine.python.params import ParamEntry, ParamSet
from engine.python.tensor import Tensor, finite_difference_check


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestModelConfig:
    """Configuration invariants and horizon defaults"""

    def test_horizon_defaults(self):
        short = ModelConfig.for_horizon(input_dim=14, horizon=5)
        long = ModelConfig.for_horizon(input_dim=14, horizon=10)
        assert (short.encoder_layers, short.decoder_layers, short.dropout_rate) == (2, 2, 0.1)
        assert (long.encoder_layers, long.decoder_layers, long.dropout_rate) == (3, 3, 0.2)

    def test_history_must_equal_horizon(self):
        with pytest.raises(PydanticValidationError):
            ModelConfig(input_dim=4, history_len=3, horizon=5)

    def test_hidden_divisible_by_heads(self):
        with pytest.raises(PydanticValidationError):
            ModelConfig(input_dim=4, hidden_dim=10, num_heads=4, history_len=3, horizon=3)

    def test_layer_count(self):
        cfg = ModelConfig(input_dim=4, hidden_dim=8, encoder_layers=2, decoder_layers=3, num_heads=2,
                          history_len=3, horizon=3)
        assert cfg.layer_count == 2 + 1 + 3 + 1
        assert init_params(cfg).layer_indices == list(range(1, 8))


class TestParameterCount:
    """Parameter count of the reference configuration"""

    def test_reference_config(self):
        cfg = ModelConfig(input_dim=14, hidden_dim=128, encoder_layers=2, decoder_layers=2, num_heads=4,
                          history_len=5, horizon=5)
        params = init_params(cfg, np.random.default_rng(0))
        # encoder 73216 + 131584, attention 66048, decoder 2 * 131584, output 129
        assert params.num_parameters == 534145

    def test_count_survives_serialization(self, tmp_path):
        cfg = ModelConfig(input_dim=14, hidden_dim=128, encoder_layers=2, decoder_layers=2, num_heads=4,
                          history_len=5, horizon=5)
        model = SpeedModel.initialize(cfg, np.random.default_rng(1))
        model.save(tmp_path / "reference.fpaw")
        loaded = SpeedModel.load(tmp_path / "reference.fpaw")
        assert loaded.parameter_count == 534145
        assert loaded.params.bitwise_equal(model.params)
        assert loaded.config == cfg


class TestLstmStack:
    """LSTM cell equations and stacking"""

    def test_zero_input_zero_params(self, tiny_model_config):
        params = init_params(tiny_model_config)
        levels = [(params["encoder.0.w_ih"], params["encoder.0.w_hh"], params["encoder.0.bias"])]
        seq, finals = lstm_stack_forward(Tensor(np.zeros((3, tiny_model_config.input_dim))), levels)
        np.testing.assert_array_equal(seq.data, np.zeros((3, 8)))
        np.testing.assert_array_equal(finals[0][1].data, np.zeros((1, 8)))

    def test_single_unit_by_hand(self):
        # gates i, f, g, o with scalar weights
        w_ih = Tensor([[0.5, -0.3, 0.8, 0.1]])
        w_hh = Tensor([[0.2, 0.4, -0.6, 0.3]])
        bias = Tensor([0.1, 1.0, 0.0, -0.2])
        seq, finals = lstm_stack_forward(Tensor([[2.0]]), [(w_ih, w_hh, bias)])

        i = _sigmoid(0.5 * 2.0 + 0.1)
        f = _sigmoid(-0.3 * 2.0 + 1.0)
        g = math.tanh(0.8 * 2.0)
        o = _sigmoid(0.1 * 2.0 - 0.2)
        c = f * 0.0 + i * g
        h = o * math.tanh(c)
        assert seq.data[0, 0] == pytest.approx(h, abs=1e-12)
        assert finals[0][1].data[0, 0] == pytest.approx(c, abs=1e-12)

    def test_eval_is_deterministic(self, tiny_model_config):
        params = init_params(tiny_model_config, np.random.default_rng(3))
        levels = [(params["encoder.0.w_ih"], params["encoder.0.w_hh"], params["encoder.0.bias"])]
        x = Tensor(np.random.default_rng(4).normal(size=(2, 3, tiny_model_config.input_dim)))
        first, _ = lstm_stack_forward(x, levels)
        second, _ = lstm_stack_forward(x, levels)
        np.testing.assert_array_equal(first.data, second.data)

    def test_wrong_length(self, tiny_model_config):
        params = init_params(tiny_model_config)
        levels = [(params["encoder.0.w_ih"], params["encoder.0.w_hh"], params["encoder.0.bias"])]
        with pytest.raises(ContractError):
            lstm_stack_forward(Tensor(np.zeros((4, tiny_model_config.input_dim))), levels, expected_len=3)

    def test_dropout_needs_rng(self, tiny_model_config):
        params = init_params(tiny_model_config)
        levels = [(params["encoder.0.w_ih"], params["encoder.0.w_hh"], params["encoder.0.bias"])]
        with pytest.raises(ContractError):
            lstm_stack_forward(Tensor(np.zeros((3, tiny_model_config.input_dim))), levels, 0.5, True, None)


class TestAttention:
    """Scaled dot-product multi-head self-attention"""

    @pytest.fixture
    def params(self, tiny_model_config):
        return init_params(tiny_model_config, np.random.default_rng(5))

    def test_single_position(self, params):
        h = Tensor(np.random.default_rng(6).normal(size=(1, 8)))
        out, weights = multi_head_attention(h, params, num_heads=2, return_weights=True)
        np.testing.assert_array_equal(weights, np.ones((1, 2, 1, 1)))
        expected = (h.data @ params["attention.w_v"].data + params["attention.b_v"].data) \
            @ params["attention.w_o"].data + params["attention.b_o"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_identical_rows_give_uniform_weights(self, params):
        row = np.random.default_rng(7).normal(size=8)
        _, weights = multi_head_attention(Tensor(np.tile(row, (4, 1))), params, 2, return_weights=True)
        np.testing.assert_allclose(weights, np.full((1, 2, 4, 4), 0.25), atol=1e-12)

    def test_rows_are_probability_vectors(self, params):
        h = Tensor(np.random.default_rng(8).normal(size=(3, 5, 8)))
        out, weights = multi_head_attention(h, params, 2, return_weights=True)
        assert out.shape == (3, 5, 8)
        assert np.all(weights >= 0.0)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)


class TestModelForward:
    """End-to-end predictor"""

    def test_zero_model_outputs_zeros(self, tiny_model_config):
        model = SpeedModel.initialize(tiny_model_config)
        out = model.forward(np.random.default_rng(0).normal(size=(3, tiny_model_config.input_dim)))
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_eval_forward_is_pure(self, tiny_model_config):
        model = SpeedModel.initialize(tiny_model_config, np.random.default_rng(1))
        x = np.random.default_rng(2).normal(size=(4, 3, tiny_model_config.input_dim))
        np.testing.assert_array_equal(model.predict(x), model.predict(x))
        assert model.predict(x).shape == (4, 3)

    def test_input_width_checked(self, tiny_model_config):
        model = SpeedModel.initialize(tiny_model_config)
        with pytest.raises(ContractError):
            model.forward(np.zeros((3, tiny_model_config.input_dim + 1)))

    def test_gradient_check_tiny_model(self):
        cfg = ModelConfig(input_dim=4, hidden_dim=8, encoder_layers=1, decoder_layers=1, num_heads=2,
                          dropout_rate=0.0, history_len=3, horizon=3)
        rng = np.random.default_rng(11)
        model = SpeedModel(cfg, init_params(cfg, rng).clone(requires_grad=True))
        x = rng.uniform(-1.0, 1.0, size=(1, 3, 4))
        y = rng.uniform(-1.0, 1.0, size=(1, 3))
        errors = finite_difference_check(lambda: mse_loss(model_forward(model, x), y), model.params.tensors())
        assert len(errors) == len(model.params)
        assert max(errors) < 1e-4

    def test_lstm_architecture(self):
        cfg = ModelConfig(input_dim=4, hidden_dim=8, encoder_layers=2, num_heads=2, history_len=3, horizon=3,
                          architecture=Architecture.LSTM)
        model = SpeedModel.initialize(cfg, np.random.default_rng(0))
        assert model.params.layer_count == 3
        assert model.predict(np.zeros((2, 3, 4))).shape == (2, 3)

    def test_layer_mismatch_rejected(self, tiny_model_config):
        params = init_params(tiny_model_config)
        with pytest.raises(CongruenceError):
            SpeedModel(tiny_model_config, params.top_layers(2))


class TestLosses:
    """MSE and the FedProx proximal term"""

    def test_mse_examples(self):
        assert mse_loss(Tensor([[1.0, 2.0]]), np.array([[1.0, 2.0]])).item() == 0.0
        assert mse_loss(Tensor([[1.0, 1.0]]), np.array([[0.0, 0.0]])).item() == 1.0

    def test_mse_scales_quadratically(self):
        rng = np.random.default_rng(0)
        pred, target = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        base = mse_loss(Tensor(pred), target).item()
        scaled = mse_loss(Tensor(target + 3.0 * (pred - target)), target).item()
        assert scaled == pytest.approx(9.0 * base, rel=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(CongruenceError):
            mse_loss(Tensor([[1.0, 2.0]]), np.zeros((2, 1)))

    def test_proximal_term(self):
        params = ParamSet([ParamEntry(1, "w", Tensor([1.0, 3.0]))])
        anchor = ParamSet([ParamEntry(1, "w", Tensor([0.0, 1.0]))])
        assert proximal_term(params, anchor, mu=0.5).item() == pytest.approx(0.25 * (1.0 + 4.0))
