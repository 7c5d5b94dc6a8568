import numpy as np
import pytest

from blockops import tensor as T
from blockops.transformer import Transformer, TransformerConfig, _Attention


def tiny_config(**overrides):
    base = dict(block_size=3, input_blocks=2, output_blocks=1, model_width=4,
                num_heads=2, num_encoder_layers=1, num_decoder_layers=1, ffn_width=4)
    base.update(overrides)
    return TransformerConfig(**base)


class TestAttention:
    def test_weights_are_distributions_over_sources(self):
        attn = _Attention(np.random.default_rng(0), width=8, heads=2,
                          dtype=np.float64, name="a")
        rng = np.random.default_rng(1)
        q = T.tensor(rng.normal(size=(2, 3, 8)))
        kv = T.tensor(rng.normal(size=(2, 5, 8)))
        out, weights = attn.forward(q, kv)
        assert out.data.shape == (2, 3, 8)
        assert weights.data.shape == (2, 2, 3, 5)
        assert np.allclose(weights.data.sum(axis=3), 1.0, atol=1e-9)

    def test_single_source_token_reduces_to_value_path(self):
        # one key/value token forces attention weight 1, so the output is just
        # the value projection followed by the output projection
        attn = _Attention(np.random.default_rng(2), width=6, heads=1,
                          dtype=np.float64, name="a")
        rng = np.random.default_rng(3)
        q = rng.normal(size=(2, 2, 6))
        kv = rng.normal(size=(2, 1, 6))
        out, weights = attn.forward(T.tensor(q), T.tensor(kv))
        assert np.all(weights.data == 1.0)
        v = kv @ attn.wv[0].data + attn.wv[1].data
        expected = v @ attn.wo[0].data + attn.wo[1].data
        assert np.allclose(out.data, np.broadcast_to(expected, out.data.shape), atol=1e-12)


class TestTransformer:
    def test_output_shape(self):
        model = Transformer(tiny_config(output_blocks=3), np.random.default_rng(0))
        out = model.forward(T.tensor(np.random.default_rng(1).normal(size=(4, 2, 3))))
        assert out.data.shape == (4, 3, 3)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            tiny_config(model_width=10, num_heads=4).validate()

    def test_rejects_wrong_input_shape(self):
        model = Transformer(tiny_config(), np.random.default_rng(0))
        with pytest.raises(ValueError):
            model.forward(T.tensor(np.zeros((1, 3, 3))))

    def test_position_embeddings_break_permutation_symmetry(self):
        model = Transformer(tiny_config(input_blocks=3), np.random.default_rng(4))
        x = np.random.default_rng(5).normal(size=(1, 3, 3))
        base = model.forward(T.tensor(x)).data.copy()
        swapped = model.forward(T.tensor(x[:, [1, 0, 2]])).data
        assert not np.allclose(base, swapped)

    def test_attention_capture_structure(self):
        cfg = tiny_config(input_blocks=4, output_blocks=2, num_encoder_layers=2,
                          num_decoder_layers=3)
        model = Transformer(cfg, np.random.default_rng(6))
        model.forward(T.tensor(np.random.default_rng(7).normal(size=(5, 4, 3))))
        captured = model.last_attention
        assert len(captured["encoder"]) == 2
        assert len(captured["decoder_self"]) == 3
        assert len(captured["decoder_cross"]) == 3
        assert captured["encoder"][0].shape == (5, cfg.num_heads, 4, 4)
        assert captured["decoder_self"][0].shape == (5, cfg.num_heads, 2, 2)
        assert captured["decoder_cross"][0].shape == (5, cfg.num_heads, 2, 4)
        for group in captured.values():
            for w in group:
                assert np.allclose(w.sum(axis=3), 1.0, atol=1e-9)
        assert model.last_encoder_layer0.shape == (5, 4, cfg.model_width)

    def test_deterministic_forward(self):
        model = Transformer(tiny_config(), np.random.default_rng(8))
        x = np.random.default_rng(9).normal(size=(2, 2, 3))
        a = model.forward(T.tensor(x)).data.copy()
        b = model.forward(T.tensor(x)).data
        assert np.array_equal(a, b)

    def test_full_model_matches_finite_differences(self):
        model = Transformer(tiny_config(), np.random.default_rng(10))
        params = model.parameters()
        x = np.random.default_rng(11).normal(size=(2, 2, 3))
        target = np.random.default_rng(12).normal(size=(2, 1, 3))

        def loss_tensor():
            return T.mse_loss(model.forward(T.tensor(x)), T.tensor(target))

        loss_tensor().backward(params=params.values())
        h = 1e-5
        worst = 0.0
        for p in params.values():
            flat = p.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_tensor().item()
                flat[i] = orig - h
                fm = loss_tensor().item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            analytic = p.grad.reshape(-1)
            scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
            worst = max(worst, np.abs(analytic - numeric).max() / scale)
        assert worst < 1e-3
