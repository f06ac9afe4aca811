import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dhoi import serialization
from dhoi.backbone import (
    LatentGrid,
    MockBackbone,
    MockBackboneConfig,
    NoiseSchedule,
    PromptEmbedding,
    noise_to,
    tokenize,
)
from dhoi.errors import DimensionError, InputError, NameLookupError, RangeError
from dhoi.inversion import RelationTable

from conftest import random_image


def strided_conv_oracle(x, weight, bias, k):
    """Dense numpy re-implementation of a kernel=stride=k convolution."""
    H, W, cin = x.shape
    cout = weight.shape[0]
    out = np.zeros((H // k, W // k, cout))
    for i in range(H // k):
        for j in range(W // k):
            patch = x[i * k:(i + 1) * k, j * k:(j + 1) * k, :]
            for c in range(cout):
                out[i, j, c] = np.sum(patch * weight[c].transpose(1, 2, 0)) + bias[c]
    return out


class TestEncodeImage:
    def test_zero_image_zero_weights_gives_zero_grid(self):
        bb = MockBackbone(MockBackboneConfig(dtype=torch.float64), seed=0)
        with torch.no_grad():
            bb.enc1.weight.zero_()
            bb.enc1.bias.zero_()
            bb.enc2.weight.zero_()
            bb.enc2.bias.zero_()
        z = bb.encode_image(np.zeros((64, 64, 3)))
        assert torch.all(z.data == 0)

    def test_shape_contract(self, backbone, rng):
        z = backbone.encode_image(rng.random((64, 64, 3)))
        assert z.stride == 8
        assert z.data.shape[:2] == (8, 8)

    def test_matches_dense_conv_oracle(self, backbone, rng):
        img = rng.random((64, 64, 3))
        z = backbone.encode_image(img)
        h1 = strided_conv_oracle(img, backbone.enc1.weight.detach().numpy(),
                                 backbone.enc1.bias.detach().numpy(), 4)
        h1 = np.tanh(h1)
        expected = strided_conv_oracle(h1, backbone.enc2.weight.detach().numpy(),
                                       backbone.enc2.bias.detach().numpy(), 2)
        assert np.abs(z.data.detach().numpy() - expected).max() < 1e-10

    def test_non_divisible_dims_rejected(self, backbone, rng):
        with pytest.raises(DimensionError):
            backbone.encode_image(rng.random((63, 64, 3)))

    def test_non_finite_pixels_rejected(self, backbone):
        img = np.zeros((64, 64, 3))
        img[0, 0, 0] = np.nan
        with pytest.raises(InputError):
            backbone.encode_image(img)


class TestDecodeLatent:
    def test_zero_latent_constant_image(self, backbone):
        z = LatentGrid(torch.zeros(8, 8, 4, dtype=torch.float64), 8)
        img = backbone.decode_latent(z).detach()
        assert float(img.max() - img.min()) == 0.0

    def test_output_dims_8x_input(self, backbone, rng):
        z = LatentGrid(torch.as_tensor(rng.standard_normal((4, 6, 4))), 8)
        img = backbone.decode_latent(z).detach()
        assert img.shape == (32, 48, 3)
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0

    def test_wrong_stride_rejected(self, backbone):
        z = LatentGrid(torch.zeros(4, 4, 4, dtype=torch.float64), 16)
        with pytest.raises(DimensionError):
            backbone.decode_latent(z)

    def test_roundtrip_after_training_beats_frozen_threshold(self, rng):
        # Threshold recorded once on this fixture (seed 5, 200 Adam steps)
        # and frozen as a regression bound.
        bb = MockBackbone(MockBackboneConfig(dtype=torch.float64), seed=5)
        # smooth fixtures: 8x8 random fields upsampled to 64x64
        images = [torch.as_tensor(np.kron(rng.random((8, 8, 3)),
                                          np.ones((8, 8, 1))))
                  for _ in range(16)]
        opt = torch.optim.Adam([p for n, p in bb.named_parameters()
                                if n.startswith(("enc", "dec"))], lr=1e-2)
        for _ in range(200):
            loss = sum(torch.mean((bb.decode_latent(bb.encode_image(x)) - x) ** 2)
                       for x in images)
            opt.zero_grad()
            loss.backward()
            opt.step()
        mae = float(np.mean([torch.mean(torch.abs(
            bb.decode_latent(bb.encode_image(x)) - x)).item() for x in images]))
        assert mae < 0.03


class TestEncodeText:
    def test_placeholder_row_copied_exactly(self, backbone):
        table = RelationTable(["ride"], torch.arange(16, dtype=torch.float64)[None])
        emb = backbone.encode_text("a photo of R_*<ride> a horse", table)
        assert torch.equal(emb.tokens[3], table.vectors[0])
        assert emb.source_text == "a photo of R_*<ride> a horse"

    def test_empty_text_rejected(self, backbone):
        with pytest.raises(InputError):
            backbone.encode_text("")

    def test_deterministic(self, backbone):
        table = RelationTable(["ride"], torch.randn(1, 16, dtype=torch.float64))
        a = backbone.encode_text("a man R_*<ride> a horse", table)
        b = backbone.encode_text("a man R_*<ride> a horse", table)
        assert torch.equal(a.tokens, b.tokens)

    def test_unknown_action_rejected(self, backbone):
        table = RelationTable(["hold"], torch.randn(1, 16, dtype=torch.float64))
        with pytest.raises(NameLookupError):
            backbone.encode_text("a man R_*<ride> a horse", table)

    def test_tokenize_strips_punctuation(self):
        assert tokenize("A man, riding!") == ["a", "man", "riding"]


class TestNoiseTo:
    def _grid(self, vals):
        return LatentGrid(torch.as_tensor(vals, dtype=torch.float64), 8)

    def test_no_noise_endpoint(self):
        sched = NoiseSchedule(torch.tensor([1.0, 0.5], dtype=torch.float64))
        z0 = self._grid(np.ones((2, 2, 1)))
        eps = self._grid(np.full((2, 2, 1), 3.0))
        zt = noise_to(z0, 0, eps, sched)
        assert torch.equal(zt.data, z0.data)

    def test_zero_signal_case(self):
        sched = NoiseSchedule(torch.tensor([1.0, 0.36], dtype=torch.float64))
        z0 = self._grid(np.zeros((2, 2, 1)))
        eps = self._grid(np.ones((2, 2, 1)))
        zt = noise_to(z0, 1, eps, sched)
        assert torch.allclose(zt.data, torch.full((2, 2, 1), 0.8,
                                                  dtype=torch.float64))

    def test_scalar_arithmetic_oracle(self):
        sched = NoiseSchedule(torch.tensor([1.0, 0.25], dtype=torch.float64))
        z0 = self._grid(np.array([[[1.0], [1.0]]]))
        eps = self._grid(np.array([[[1.0], [-1.0]]]))
        zt = noise_to(z0, 1, eps, sched)
        expected = np.array([[[0.5 + math.sqrt(0.75)], [0.5 - math.sqrt(0.75)]]])
        assert np.allclose(zt.data.numpy(), expected)

    def test_out_of_range_t(self):
        sched = NoiseSchedule.linear_beta(10, dtype=torch.float64)
        z = self._grid(np.zeros((2, 2, 1)))
        with pytest.raises(RangeError):
            noise_to(z, 10, z, sched)

    @given(a=st.floats(min_value=-4, max_value=4, allow_nan=False),
           t=st.integers(min_value=0, max_value=9))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, a, t):
        sched = NoiseSchedule.linear_beta(10, dtype=torch.float64)
        rng = np.random.default_rng(3)
        z0 = self._grid(rng.standard_normal((2, 3, 2)))
        eps = self._grid(rng.standard_normal((2, 3, 2)))
        lhs = noise_to(LatentGrid(a * z0.data, 8), t,
                       LatentGrid(a * eps.data, 8), sched)
        rhs = noise_to(z0, t, eps, sched)
        assert torch.allclose(lhs.data, a * rhs.data, atol=1e-10)


class TestDenoiseOnce:
    def test_single_token_attention_is_one(self, backbone, image):
        z = backbone.encode_image(image)
        cond = PromptEmbedding(torch.randn(1, 16, dtype=torch.float64), "x")
        out = backbone.denoise_once(z, 999, cond)
        for attn in out.attention:
            assert torch.allclose(attn, torch.ones_like(attn))

    def test_identical_tokens_split_evenly(self, backbone, image):
        z = backbone.encode_image(image)
        row = torch.randn(16, dtype=torch.float64)
        cond = PromptEmbedding(torch.stack([row, row]), "x x")
        out = backbone.denoise_once(z, 999, cond)
        for attn in out.attention:
            assert torch.allclose(attn, torch.full_like(attn, 0.5))

    def test_attention_matches_dense_softmax_oracle(self, backbone, image):
        z = backbone.encode_image(image)
        cond = PromptEmbedding(torch.randn(3, 16, dtype=torch.float64), "a b c")
        out = backbone.denoise_once(z, 999, cond)
        # independent oracle: recompute each level's pre-attention features
        # with numpy, then softmax(z . K^T / sqrt(d))
        x = z.data.detach().numpy()
        t_norm = np.array([999 / 1000.0])
        for l in range(4):
            w = backbone.blocks[l].weight.detach().numpy()
            b = backbone.blocks[l].bias.detach().numpy()
            x = strided_conv_oracle(x, w, b, 2)
            x = x + (backbone.time_proj[l].weight.detach().numpy() @ t_norm)
            K = cond.tokens.numpy() @ backbone.to_k[l].weight.detach().numpy().T
            logits = x.reshape(-1, x.shape[2]) @ K.T / math.sqrt(x.shape[2])
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            attn = e / e.sum(axis=1, keepdims=True)
            assert np.abs(out.attention[l].detach().numpy()
                          .reshape(-1, 3) - attn).max() < 1e-6
            V = cond.tokens.numpy() @ backbone.to_v[l].weight.detach().numpy().T
            x = (x.reshape(-1, x.shape[2]) + attn @ V).reshape(x.shape)

    def test_row_stochastic(self, backbone, image):
        z = backbone.encode_image(image)
        cond = PromptEmbedding(torch.randn(5, 16, dtype=torch.float64), "p")
        out = backbone.denoise_once(z, 500, cond)
        for attn in out.attention:
            sums = attn.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_noise_pred_shape_and_level_count(self, backbone, image):
        z = backbone.encode_image(image)
        cond = PromptEmbedding(torch.randn(2, 16, dtype=torch.float64), "p")
        out = backbone.denoise_once(z, 999, cond)
        assert out.noise_pred.data.shape == z.data.shape
        assert [f.stride for f in out.features] == [16, 32, 64, 128]


class TestDenoiseIterative:
    def test_zero_noise_stub_identity_chain(self, sched, unit_sched):
        bb = MockBackbone(MockBackboneConfig(dtype=torch.float64), seed=2,
                          zero_noise=True)
        z = LatentGrid(torch.randn(16, 16, 4, dtype=torch.float64), 8)
        cond = PromptEmbedding(torch.randn(2, 16, dtype=torch.float64), "p")
        out = bb.denoise_iterative(z, cond, 4, sched)
        scale = 1.0 / math.sqrt(float(sched.alphas_bar[-1]))
        assert torch.allclose(out.data, scale * z.data, atol=1e-9)
        out_unit = bb.denoise_iterative(z, cond, 4, unit_sched)
        assert torch.allclose(out_unit.data, z.data)

    def test_single_step_matches_manual_update(self, backbone, sched, image):
        z = backbone.encode_image(image)
        cond = PromptEmbedding(torch.randn(2, 16, dtype=torch.float64), "p")
        out = backbone.denoise_iterative(z, cond, 1, sched)
        T = sched.steps - 1
        eps = backbone.denoise_once(z, T, cond).noise_pred.data
        ab = sched.alphas_bar[T]
        manual = (z.data - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)
        assert torch.allclose(out.data, manual)

    def test_four_steps_match_scripted_oracle(self, backbone, sched, image):
        z = backbone.encode_image(image)
        cond = PromptEmbedding(torch.randn(3, 16, dtype=torch.float64), "p")
        out = backbone.denoise_iterative(z, cond, 4, sched)
        T = sched.steps - 1
        ts = [int(round(T * (4 - j) / 4)) for j in range(4)]
        cur = z.data
        for j, t in enumerate(ts):
            ab_t = sched.alphas_bar[t]
            ab_prev = sched.alphas_bar[ts[j + 1]] if j < 3 else torch.tensor(
                1.0, dtype=torch.float64)
            eps = backbone.denoise_once(LatentGrid(cur, 8), t, cond).noise_pred.data
            z0 = (cur - torch.sqrt(1 - ab_t) * eps) / torch.sqrt(ab_t)
            cur = torch.sqrt(ab_prev) * z0 + torch.sqrt(1 - ab_prev) * eps
        assert float((out.data - cur).detach().abs().max()) < 1e-6

    def test_invalid_step_count(self, backbone, sched):
        z = LatentGrid(torch.zeros(16, 16, 4, dtype=torch.float64), 8)
        cond = PromptEmbedding(torch.randn(1, 16, dtype=torch.float64), "p")
        with pytest.raises(RangeError):
            backbone.denoise_iterative(z, cond, 0, sched)


class TestFpnAggregate:
    def _features(self, backbone, fill=0.0, h=8):
        feats = []
        for l, w in enumerate(backbone.config.widths):
            size = max(1, h // 2 ** l)
            data = torch.full((size, size, w), fill, dtype=torch.float64)
            feats.append(LatentGrid(data, 16 * 2 ** l))
        return feats

    def test_zero_in_zero_out(self, backbone):
        out = backbone.fpn_aggregate(self._features(backbone, 0.0))
        assert torch.all(out.data == 0)

    def test_shape_contract(self, backbone):
        feats = self._features(backbone, 0.5, h=8)
        out = backbone.fpn_aggregate(feats)
        assert out.stride == 32
        assert out.data.shape == (4, 4, 256)

    def test_single_cell_matches_manual_pathway(self, backbone):
        feats = self._features(backbone, 0.0, h=8)
        feats[3].data[0, 0, 2] = 1.0  # one hot at the coarsest level
        out = backbone.fpn_aggregate(feats)
        lat3 = backbone.laterals[3].weight.detach().numpy()[:, :, 0, 0]
        contrib = lat3[:, 2]  # projected one-hot channel
        # nearest upsampling spreads the single cell over all finer cells of
        # its pyramid footprint; avg-pool at the end keeps the value.
        expected = np.zeros((4, 4, 256))
        expected[:, :, :] = contrib
        assert np.abs(out.data.detach().numpy() - expected).max() < 1e-10

    def test_wrong_strides_rejected(self, backbone):
        feats = self._features(backbone)
        feats[0] = LatentGrid(feats[0].data, 8)
        with pytest.raises(DimensionError):
            backbone.fpn_aggregate(feats)


class TestScheduleAndSerialization:
    def test_linear_beta_monotone(self):
        sched = NoiseSchedule.linear_beta(1000)
        ab = sched.alphas_bar
        assert float(ab[0]) <= 1.0
        assert bool((ab[1:] < ab[:-1]).all())

    def test_increasing_rejected(self):
        with pytest.raises(InputError):
            NoiseSchedule(torch.tensor([0.5, 0.7]))

    def test_weight_container_roundtrip(self, backbone, tmp_path):
        path = str(tmp_path / "weights.dhb")
        serialization.save_arrays(path, backbone.state_arrays())
        loaded = serialization.load_arrays(path)
        orig = backbone.state_arrays()
        assert set(loaded) == set(orig)
        for k in orig:
            assert np.array_equal(loaded[k], orig[k])

    def test_container_magic_enforced(self, tmp_path):
        path = str(tmp_path / "bad.dhb")
        with open(path, "wb") as fh:
            fh.write(b"NOPE")
        with pytest.raises(InputError):
            serialization.load_arrays(path)

    def test_backbone_determinism_across_instances(self, image):
        a = MockBackbone(MockBackboneConfig(dtype=torch.float64), seed=9)
        b = MockBackbone(MockBackboneConfig(dtype=torch.float64), seed=9)
        za, zb = a.encode_image(image), b.encode_image(image)
        assert torch.equal(za.data, zb.data)
