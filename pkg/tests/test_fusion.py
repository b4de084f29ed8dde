import numpy as np
import pytest

from tsvt import fusion as FU
from tsvt import tensor as T
from tsvt.backbone import BackboneConfig, attention
from tsvt.fusion import (
    ClassifierHead,
    EncoderLayer,
    FusionInput,
    MHAParams,
    ModelConfig,
    TwoStreamModel,
    build_fusion_input,
    mha,
)
from tsvt.tensor import ShapeMismatchError, Tensor
from tsvt.video import ConfigError

from fd import finite_diff_grad, max_rel_error


def small_model_cfg(**kw):
    bb = BackboneConfig(
        frames=2, height=4, width=4, patch=(1, 2, 2), embed_dim=8, heads=2,
        pool_strides=(2, 2), ffn_dim=12, dropout=0.0, out_dim=8,
    )
    base = dict(backbone=bb, num_classes=3, fusion_heads=2, fusion_ffn_dim=16,
                encoder_depth=1, encoder_dropout=0.0, head_dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


class TestBuildFusionInput:
    def test_zero_case_returns_e_pos(self):
        rng = np.random.default_rng(0)
        params = FusionInput(6, rng)
        params.x_class.data[...] = 0.0
        zero = Tensor(np.zeros((4, 6)))
        out = build_fusion_input(zero, zero, params)
        np.testing.assert_array_equal(out.data, params.e_pos.data)

    def test_identity_projection_passes_stream_constants(self):
        rng = np.random.default_rng(0)
        params = FusionInput(5, rng)
        params.x_class.data[...] = 0.0
        params.e.data[...] = np.eye(5)
        params.e_pos.data[...] = 0.0
        r_const = rng.normal(size=5)
        f_const = rng.normal(size=5)
        o_r = Tensor(np.tile(r_const, (3, 1)))
        o_f = Tensor(np.tile(f_const, (3, 1)))
        out = build_fusion_input(o_r, o_f, params).data
        np.testing.assert_allclose(out[1], r_const, atol=1e-12)
        np.testing.assert_allclose(out[2], f_const, atol=1e-12)

    def test_stream_order_matters(self):
        rng = np.random.default_rng(1)
        params = FusionInput(5, rng)
        o_r = Tensor(rng.normal(size=(3, 5)))
        o_f = Tensor(rng.normal(size=(3, 5)))
        a = build_fusion_input(o_r, o_f, params).data
        b = build_fusion_input(o_f, o_r, params).data
        assert not np.allclose(a, b)

    def test_shape_mismatch(self):
        params = FusionInput(5, np.random.default_rng(0))
        with pytest.raises(ShapeMismatchError):
            build_fusion_input(Tensor(np.zeros((3, 5))), Tensor(np.zeros((4, 5))), params)

    def test_batched(self):
        rng = np.random.default_rng(2)
        params = FusionInput(5, rng)
        out = build_fusion_input(
            Tensor(rng.normal(size=(7, 3, 5))), Tensor(rng.normal(size=(7, 3, 5))), params
        )
        assert out.data.shape == (7, 3, 5)


class TestMHA:
    def test_single_head_equals_attention_with_projection(self):
        rng = np.random.default_rng(0)
        params = MHAParams(6, 1, rng, "m")
        x = Tensor(rng.normal(size=(4, 6)))
        out = mha(x, params)
        ref = T.matmul(
            attention(T.matmul(x, params.wq[0]), T.matmul(x, params.wk[0]),
                      T.matmul(x, params.wv[0])),
            params.wo,
        )
        assert np.array_equal(out.data, ref.data)

    def test_single_token_equals_value_path(self):
        rng = np.random.default_rng(1)
        params = MHAParams(8, 2, rng, "m")
        x = Tensor(rng.normal(size=(1, 8)))
        out = mha(x, params)
        vals = np.concatenate([x.data @ params.wv[i].data for i in range(2)], axis=-1)
        np.testing.assert_allclose(out.data, vals @ params.wo.data, atol=1e-12)

    @pytest.mark.parametrize("heads", [1, 2, 4, 8])
    def test_matches_independent_head_loop(self, heads):
        dim = 768 if heads == 8 else 8 * heads
        rng = np.random.default_rng(heads)
        params = MHAParams(dim, heads, rng, "m")
        x0 = rng.normal(size=(3, dim))
        out = mha(Tensor(x0), params).data

        # independent oracle: numpy-only per-head computation
        d_head = dim // heads
        pieces = []
        for i in range(heads):
            q = x0 @ params.wq[i].data
            k = x0 @ params.wk[i].data
            v = x0 @ params.wv[i].data
            s = (q @ k.T) * (1.0 / np.sqrt(d_head))
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            w = e / e.sum(axis=-1, keepdims=True)
            pieces.append(w @ v)
        ref = np.concatenate(pieces, axis=-1) @ params.wo.data
        assert np.array_equal(out, ref)

    def test_dim_mismatch(self):
        params = MHAParams(8, 2, np.random.default_rng(0), "m")
        with pytest.raises(ShapeMismatchError):
            mha(Tensor(np.zeros((3, 6))), params)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            MHAParams(10, 4, np.random.default_rng(0), "m")


class TestEncoderLayer:
    def test_zero_branches_give_identity(self):
        rng = np.random.default_rng(0)
        layer = EncoderLayer(8, 2, 16, 0.0, rng, "e")
        layer.mha_params.wo.data[...] = 0.0
        layer.w2.data[...] = 0.0
        layer.b2.data[...] = 0.0
        x = Tensor(rng.normal(size=(3, 8)))
        out = layer.forward(x, rng, training=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_shape_preserved(self):
        rng = np.random.default_rng(1)
        layer = EncoderLayer(768, 8, 1024, 0.0, rng, "e")
        x = Tensor(rng.normal(size=(3, 768)))
        assert layer.forward(x, rng, training=False).data.shape == (3, 768)

    def test_gradient_vs_fd(self):
        rng = np.random.default_rng(2)
        layer = EncoderLayer(16, 4, 24, 0.0, rng, "e")
        x0 = rng.normal(size=(3, 16))
        weight = rng.normal(size=(3, 16))
        params = layer.parameters()
        for p in params.values():
            p.zero_grad()
        loss = T.sum_(T.mul(layer.forward(Tensor(x0), rng, False), Tensor(weight)))
        T.backward(loss)
        for name, p in params.items():
            def f(arr, p=p):
                old = p.data.copy()
                p.data[...] = arr
                val = T.sum_(
                    T.mul(layer.forward(Tensor(x0), rng, False), Tensor(weight))
                ).data.item()
                p.data[...] = old
                return val

            num = finite_diff_grad(f, p.data.copy())
            err = max_rel_error(p.grad, num)
            assert err < 1e-4, f"{name}: {err:.2e}"


class TestClassifierHead:
    def test_zero_weights_zero_logits(self):
        rng = np.random.default_rng(0)
        head = ClassifierHead(8, 4, 0.5, rng)
        head.w.data[...] = 0.0
        logits = head.forward(Tensor(rng.normal(size=(3, 8))), rng, training=False)
        np.testing.assert_array_equal(logits.data, np.zeros(4))

    def test_only_class_token_feeds_head(self):
        rng = np.random.default_rng(1)
        head = ClassifierHead(8, 4, 0.0, rng)
        x = rng.normal(size=(3, 8))
        base = head.forward(Tensor(x), rng, training=False).data
        perturbed = x.copy()
        perturbed[1:] += rng.normal(size=(2, 8))
        after = head.forward(Tensor(perturbed), rng, training=False).data
        np.testing.assert_array_equal(base, after)

    def test_softmax_of_logits_sums_to_one(self):
        rng = np.random.default_rng(2)
        head = ClassifierHead(8, 5, 0.0, rng)
        logits = head.forward(Tensor(rng.normal(size=(3, 8))), rng, training=False)
        probs = T.softmax(logits, axis=-1).data
        np.testing.assert_allclose(probs.sum(), 1.0, atol=1e-9)

    def test_min_classes(self):
        with pytest.raises(ConfigError):
            ClassifierHead(8, 1, 0.0, np.random.default_rng(0))


class TestTwoStreamModel:
    def test_argmax_invariant_to_logit_shift(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5))
        assert np.array_equal(
            np.argmax(logits, axis=-1), np.argmax(logits + 3.7, axis=-1)
        )

    def test_forward_shapes_and_determinism(self):
        cfg = small_model_cfg()
        model = TwoStreamModel(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        rgb = rng.random((4, 2, 4, 4, 3))
        flow = rng.random((4, 2, 4, 4, 3))
        a = model.forward(rgb, flow).data
        b = model.forward(rgb, flow).data
        assert a.shape == (4, 3)
        assert np.array_equal(a, b)

    def test_stream_role_sensitivity(self):
        cfg = small_model_cfg()
        model = TwoStreamModel(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        rgb = rng.random((1, 2, 4, 4, 3))
        flow = rng.random((1, 2, 4, 4, 3))
        both = model.forward(rgb, flow, stream_mode="both").data
        rgb_only = model.forward(rgb, flow, stream_mode="rgb_only").data
        flow_only = model.forward(rgb, flow, stream_mode="flow_only").data
        assert not np.allclose(both, rgb_only)
        assert not np.allclose(both, flow_only)

    def test_unknown_stream_mode(self):
        model = TwoStreamModel(small_model_cfg(), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            model.forward(np.zeros((1, 2, 4, 4, 3)), np.zeros((1, 2, 4, 4, 3)),
                          stream_mode="audio")

    def test_config_roundtrip(self):
        cfg = small_model_cfg()
        back = ModelConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()
