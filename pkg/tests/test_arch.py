"""Architecture tests: configs, blocks, variants, and gradient plumbing."""

import numpy as np
import pytest

from conftest import flatten_outputs, module_grad_check
from lumendet import nn
from lumendet import tensor as T
from lumendet.arch import (A2Attention, Backbone, Bottleneck, C2f,
                           DetectionModel, FeaturePyramid, Focus, ModelConfig,
                           Neck, STRIDES, build_model, config_from_text,
                           config_to_text, v12_config, v8_config)
from lumendet.tensor import ShapeError, Tensor


def rand_image(rng, n=1, c=3, h=64, w=64):
    return rng.uniform(0.0, 1.0, (n, c, h, w)).astype(np.float32)


class TestModelConfig:
    def test_defaults_and_stage_channels(self):
        """Default widths double per stage and cap at 8x base."""
        cfg = ModelConfig()
        assert cfg.stage_channels() == [16, 32, 64, 64]
        assert cfg.attention_stages == frozenset()

    def test_wider_config_channel_cap(self):
        """The 8x cap binds only when stages would exceed it."""
        cfg = ModelConfig(base_channels=4)
        assert cfg.stage_channels() == [8, 16, 32, 32]

    def test_v12_attention_stages(self):
        """v12 places attention in the two deepest stages."""
        cfg = v12_config()
        assert cfg.attention_stages == frozenset({3, 4})
        assert v8_config().attention_stages == frozenset()

    def test_rejects_bad_configs(self):
        """Structural validation catches each inconsistent field."""
        with pytest.raises(ValueError):
            ModelConfig(num_stages=3)
        with pytest.raises(ValueError):
            ModelConfig(depth_per_stage=[1, 1, 1])
        with pytest.raises(ValueError):
            ModelConfig(attention_stages={5})
        with pytest.raises(ValueError):
            ModelConfig(base_channels=7)
        with pytest.raises(ValueError):
            ModelConfig(base_channels=2, heads=4)
        with pytest.raises(ValueError):
            ModelConfig(num_classes=0)

    def test_text_round_trip(self):
        """Config serialization is lossless for both variants."""
        for cfg in (v8_config(), v12_config(base_channels=12, heads=4),
                    ModelConfig(depth_per_stage=[2, 1, 3, 1])):
            assert config_from_text(config_to_text(cfg)) == cfg

    def test_text_unknown_key_reports_line(self):
        """A typo in a config file points at the offending line."""
        text = "base_channels=8\nnum_stags=4\n"
        with pytest.raises(ValueError, match="line 2"):
            config_from_text(text)

    def test_text_comments_and_blanks_ignored(self):
        """Comment and blank lines do not disturb parsing."""
        text = "# width\nbase_channels=4\n\nheads=2 # two heads\n"
        cfg = config_from_text(text)
        assert cfg.base_channels == 4
        assert cfg.heads == 2


class TestFocus:
    def test_output_shape_halves_resolution(self):
        """The stem halves spatial size and widens to base channels."""
        rng = np.random.default_rng(0)
        stem = Focus(3, 8, rng)
        out = stem(Tensor(rand_image(rng, h=32, w=32)))
        assert out.shape == (1, 8, 16, 16)

    def test_space_to_depth_preserves_pixels(self):
        """Rearrangement keeps every input value exactly once."""
        rng = np.random.default_rng(1)
        x = rand_image(rng, h=8, w=8)
        y = T.space_to_depth2x(Tensor(x)).data
        assert y.shape == (1, 12, 4, 4)
        assert np.allclose(np.sort(y.ravel()), np.sort(x.ravel()))


class TestBottleneck:
    def test_residual_only_when_channels_match(self):
        """Zeroed convs make a matching-width block the identity in eval
        mode, and a width-changing block exactly zero."""
        rng = np.random.default_rng(2)
        x = Tensor(rand_image(rng, c=6, h=8, w=8))
        same = Bottleneck(6, 6, rng)
        diff = Bottleneck(6, 4, rng)
        for blk in (same, diff):
            for name, p in blk.named_parameters():
                p.data[...] = 0.0
            blk.eval()
        assert np.array_equal(same(x).data, x.data)
        assert np.all(diff(x).data == 0.0)

    def test_gradients_flow(self):
        """Sampled bottleneck parameter grads match finite differences."""
        rng = np.random.default_rng(3)
        blk = Bottleneck(4, 4, rng)
        module_grad_check(blk, rand_image(rng, c=4, h=6, w=6), rng)


class TestC2f:
    def test_output_shape(self):
        """C2f preserves spatial size and emits the requested width."""
        rng = np.random.default_rng(4)
        blk = C2f(6, 8, n=2, rng=rng)
        out = blk(Tensor(rand_image(rng, c=6, h=10, w=10)))
        assert out.shape == (1, 8, 10, 10)

    def test_depth_zero_still_valid(self):
        """With no bottlenecks the block reduces to entry plus fuse."""
        rng = np.random.default_rng(5)
        blk = C2f(4, 4, n=0, rng=rng)
        out = blk(Tensor(rand_image(rng, c=4, h=6, w=6)))
        assert out.shape == (1, 4, 6, 6)
        assert len(blk.blocks) == 0

    def test_odd_width_rejected(self):
        """The split-in-half layout needs an even output width."""
        rng = np.random.default_rng(6)
        with pytest.raises(ShapeError):
            C2f(4, 5, n=1, rng=rng)

    def test_parameter_count_grows_with_depth(self):
        """Every added bottleneck also widens the fuse concat."""
        rng = np.random.default_rng(7)
        n0 = C2f(8, 8, n=0, rng=np.random.default_rng(7)).num_parameters()
        n2 = C2f(8, 8, n=2, rng=rng).num_parameters()
        assert n2 > n0

    def test_gradients_flow(self):
        """Composed C2f (n=2) passes sampled finite-difference checks."""
        rng = np.random.default_rng(8)
        blk = C2f(4, 4, n=2, rng=rng)
        module_grad_check(blk, rand_image(rng, c=4, h=6, w=6), rng)


class TestA2Attention:
    def test_zero_query_key_gives_band_mean(self):
        """With q and k zeroed, softmax is uniform, so the block adds the
        per-band mean of the value projection to its input."""
        rng = np.random.default_rng(9)
        att = A2Attention(4, areas=3, heads=2, rng=rng)
        att.q.weight.data[...] = 0.0
        att.q.bias.data[...] = 0.0
        att.k.weight.data[...] = 0.0
        att.k.bias.data[...] = 0.0
        x = rand_image(rng, c=4, h=6, w=5)
        out = att(Tensor(x)).data

        wv = att.v.weight.data.reshape(4, 4)
        bv = att.v.bias.data
        v = np.einsum("oc,nchw->nohw", wv, x) + bv[None, :, None, None]
        expected = x.copy()
        for band in range(3):
            sl = slice(band * 2, (band + 1) * 2)
            mean = v[:, :, sl, :].mean(axis=(2, 3), keepdims=True)
            expected[:, :, sl, :] += mean
        assert np.allclose(out, expected, atol=1e-5)

    def test_effective_areas_largest_divisor(self):
        """Requested band counts fall back to the largest divisor."""
        rng = np.random.default_rng(10)
        att = A2Attention(4, areas=4, heads=2, rng=rng)
        assert att.effective_areas(8) == 4
        assert att.effective_areas(10) == 2
        assert att.effective_areas(5) == 1
        assert att.effective_areas(3) == 3

    def test_attend_rejects_non_divisible(self):
        """The strict entry point refuses a band count that does not tile."""
        rng = np.random.default_rng(11)
        att = A2Attention(4, areas=4, heads=2, rng=rng)
        with pytest.raises(ShapeError, match="not divisible"):
            att.attend(Tensor(rand_image(rng, c=4, h=6, w=6)), 4)

    def test_heads_must_divide_channels(self):
        """Head count must evenly split the channel dimension."""
        rng = np.random.default_rng(12)
        with pytest.raises(ShapeError):
            A2Attention(6, areas=2, heads=4, rng=rng)

    def test_gradients_flow(self):
        """Attention backward matches finite differences."""
        rng = np.random.default_rng(13)
        att = A2Attention(4, areas=2, heads=2, rng=rng)
        module_grad_check(att, rand_image(rng, c=4, h=4, w=4), rng)


class TestBackbone:
    def test_tap_shapes_at_160(self):
        """A 160 input yields taps at 20/10/5 with capped widths."""
        rng = np.random.default_rng(14)
        bb = Backbone(ModelConfig(), np.random.default_rng(14))
        pyr = bb(Tensor(rand_image(rng, h=160, w=160)))
        assert pyr.p3.shape == (1, 32, 20, 20)
        assert pyr.p4.shape == (1, 64, 10, 10)
        assert pyr.p5.shape == (1, 64, 5, 5)

    def test_rejects_bad_inputs(self):
        """Non-square and non-multiple-of-32 inputs are refused."""
        rng = np.random.default_rng(15)
        bb = Backbone(ModelConfig(), np.random.default_rng(15))
        with pytest.raises(ShapeError, match="square"):
            bb(Tensor(rand_image(rng, h=64, w=32)))
        with pytest.raises(ShapeError, match="32"):
            bb(Tensor(rand_image(rng, h=48, w=48)))

    def test_attention_placeholders_have_no_parameters(self):
        """Stages without attention contribute no attention parameters."""
        bb = Backbone(ModelConfig(), np.random.default_rng(16))
        assert all(m.num_parameters() == 0 for m in bb.atts)
        bb12 = Backbone(v12_config(), np.random.default_rng(16))
        assert bb12.atts[2].num_parameters() > 0
        assert bb12.atts[3].num_parameters() > 0
        assert bb12.atts[0].num_parameters() == 0


class TestNeckAndHead:
    def test_neck_keeps_tap_shapes(self):
        """Fusion returns a pyramid with the same shapes it was given."""
        rng = np.random.default_rng(17)
        cfg = ModelConfig(base_channels=4)
        model = DetectionModel(cfg, seed=17)
        pyr = model.backbone(Tensor(rand_image(rng, h=64, w=64)))
        fused = model.neck(pyr)
        assert fused.p3.shape == pyr.p3.shape
        assert fused.p4.shape == pyr.p4.shape
        assert fused.p5.shape == pyr.p5.shape

    def test_head_output_shapes_and_strides(self):
        """Each level carries box(4)/obj(1)/cls(C) maps at its stride."""
        rng = np.random.default_rng(18)
        model = DetectionModel(ModelConfig(num_classes=3), seed=18)
        raw = model(Tensor(rand_image(rng, h=96, w=96)))
        assert [lvl.stride for lvl in raw.levels] == list(STRIDES)
        for lvl in raw.levels:
            side = 96 // lvl.stride
            assert lvl.box.shape == (1, 4, side, side)
            assert lvl.obj.shape == (1, 1, side, side)
            assert lvl.cls.shape == (1, 3, side, side)

    def test_objectness_bias_starts_negative(self):
        """Fresh models begin near-silent: obj logits centered at -4."""
        model = DetectionModel(ModelConfig(), seed=19)
        for level in model.head.levels:
            assert np.allclose(level.obj_out.bias.data, -4.0)

    def test_neck_gradients_flow(self):
        """Both fusion directions pass finite-difference spot checks."""
        rng = np.random.default_rng(20)
        cfg = ModelConfig(base_channels=4)
        neck = Neck(cfg, np.random.default_rng(20))

        class PyrWrap(nn.Module):
            """Carve one 8x8 input into a three-level pyramid so the FD
            helper can drive the neck through a single array."""

            def __init__(self, neck, c3, c4, c5):
                super().__init__()
                self.neck = neck
                self.c3, self.c4, self.c5 = c3, c4, c5

            def forward(self, x):
                p4_hi = self.c3 + self.c4 // 4
                return self.neck(FeaturePyramid(
                    p3=x.index_channels(0, self.c3),
                    p4=T.space_to_depth2x(x.index_channels(self.c3, p4_hi)),
                    p5=T.space_to_depth2x(T.space_to_depth2x(
                        x.index_channels(p4_hi, p4_hi + self.c5 // 16)))))

        c3, c4, c5 = cfg.stage_channels()[-3:]
        wrap = PyrWrap(neck, c3, c4, c5)
        x = rand_image(rng, c=c3 + c4 // 4 + c5 // 16, h=8, w=8)
        module_grad_check(wrap, x, rng, samples_per_param=1)


class TestVariants:
    def test_v12_without_attention_equals_v8_bitwise(self):
        """Disabling attention in the v12 layout reproduces v8 exactly:
        same parameters, same outputs, bit for bit."""
        cfg_a = v8_config()
        cfg_b = v12_config()
        cfg_b = ModelConfig(base_channels=cfg_b.base_channels,
                            depth_per_stage=cfg_b.depth_per_stage,
                            attention_stages=frozenset(),
                            attention_areas=cfg_b.attention_areas,
                            heads=cfg_b.heads,
                            num_classes=cfg_b.num_classes)
        ma = DetectionModel(cfg_a, seed=21)
        mb = DetectionModel(cfg_b, seed=21)
        pa = dict(ma.named_parameters())
        pb = dict(mb.named_parameters())
        assert sorted(pa) == sorted(pb)
        for name in pa:
            assert np.array_equal(pa[name].data, pb[name].data), name

        rng = np.random.default_rng(21)
        x = rand_image(rng, h=64, w=64)
        ma.eval()
        mb.eval()
        with T.no_grad():
            oa = flatten_outputs(ma(Tensor(x)))
            ob = flatten_outputs(mb(Tensor(x)))
        for ta, tb in zip(oa, ob):
            assert np.array_equal(ta.data, tb.data)

    def test_attention_changes_outputs(self):
        """Real v12 attention is not a no-op."""
        ma = build_model("v8", seed=22)
        mb = build_model("v12", seed=22)
        rng = np.random.default_rng(22)
        x = rand_image(rng, h=64, w=64)
        ma.eval()
        mb.eval()
        with T.no_grad():
            oa = ma(Tensor(x)).levels[0].obj.data
            ob = mb(Tensor(x)).levels[0].obj.data
        assert not np.array_equal(oa, ob)

    def test_parameter_budgets(self):
        """Both default variants stay comfortably under half a million."""
        n8 = build_model("v8").num_parameters()
        n12 = build_model("v12").num_parameters()
        assert n8 == 329314
        assert n12 == 354274
        assert n12 > n8
        assert n12 <= 500_000

    def test_build_model_rejects_unknown_variant(self):
        """Anything but v8/v12 is refused."""
        with pytest.raises(ValueError, match="variant"):
            build_model("v9")


class TestFullModel:
    def test_outputs_finite(self):
        """Random inputs produce finite maps at every level."""
        rng = np.random.default_rng(23)
        for variant in ("v8", "v12"):
            model = build_model(variant, seed=23)
            raw = model(Tensor(rand_image(rng, h=64, w=64)))
            for t in flatten_outputs(raw):
                assert np.all(np.isfinite(t.data)), variant

    def test_full_model_gradcheck(self):
        """End-to-end finite-difference check: at least 20 sampled
        parameters across the whole network at 64x64 agree with autodiff
        to within 1e-2."""
        rng = np.random.default_rng(24)
        model = build_model("v12", seed=24, base_channels=4)
        checked = module_grad_check(model, rand_image(rng, h=64, w=64), rng,
                                    samples_per_param=1, check_input=False)
        assert checked >= 20

    def test_every_parameter_reachable(self):
        """Backward from a full-output projection touches all parameters."""
        rng = np.random.default_rng(25)
        model = build_model("v12", seed=25)
        model.zero_grad()
        x = Tensor(rand_image(rng, h=64, w=64), requires_grad=True)
        outs = flatten_outputs(model(x))
        loss = None
        for o in outs:
            term = o.sum() * (1.0 / o.size)
            loss = term if loss is None else loss + term
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, f"{name} has no grad"
            assert np.all(np.isfinite(p.grad)), f"{name} grad not finite"

    def test_batch_independence(self):
        """In eval mode each batch item is processed independently."""
        rng = np.random.default_rng(26)
        model = build_model("v8", seed=26)
        model.eval()
        a = rand_image(rng, h=64, w=64)
        b = rand_image(rng, h=64, w=64)
        with T.no_grad():
            both = model(Tensor(np.concatenate([a, b], axis=0)))
            solo = model(Tensor(a))
        assert np.allclose(both.levels[0].obj.data[0],
                           solo.levels[0].obj.data[0], atol=1e-5)
