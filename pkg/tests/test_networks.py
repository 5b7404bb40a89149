import numpy as np
import pytest
import torch

from mdcodec.metrics import total_loss
from mdcodec.networks import (
    CheckpointError,
    Encoder,
    EntropyModel,
    MaskedConv3d,
    MDCodec,
    ModelConfig,
    load_checkpoint,
    load_model,
    model_tag,
    parameter_count,
    save_checkpoint,
    state_checksum,
)
from mdcodec.quant import apply_importance, expand_importance

TINY = ModelConfig(base_channels=8, feature_channels=2, num_centers=3,
                   resconv_per_block=1, entropy_channels=8)
SMALL = ModelConfig(base_channels=16, feature_channels=4, num_centers=8,
                    resconv_per_block=2, entropy_channels=8)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.base_channels == 64
        assert cfg.feature_channels == 8
        assert cfg.num_centers == 8
        assert cfg.dilation_rates == (1, 2, 3)
        assert cfg.resconv_per_block == 16

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(num_centers=1)
        with pytest.raises(ValueError):
            ModelConfig(sigma=0.0)
        with pytest.raises(ValueError):
            ModelConfig(dilation_rates=(1, 2))

    def test_dict_round_trip(self):
        cfg = ModelConfig(base_channels=16, dilation_rates=(1, 2, 5))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncoderShapes:
    @pytest.mark.parametrize("size,expected", [(160, 20), (64, 8), (32, 4)])
    def test_downsample_factor(self, size, expected):
        torch.manual_seed(0)
        enc = Encoder(SMALL)
        z, d_a, d_b = enc(torch.rand(1, 3, size, size))
        assert z.shape == (1, SMALL.feature_channels, expected, expected)
        assert d_a.shape == (1, 1, expected, expected)
        assert d_b.shape == (1, 1, expected, expected)

    def test_non_square(self):
        enc = Encoder(SMALL)
        z, _, _ = enc(torch.rand(1, 3, 64, 96))
        assert z.shape[-2:] == (8, 12)

    def test_rejects_non_divisible(self):
        enc = Encoder(SMALL)
        with pytest.raises(ValueError):
            enc(torch.rand(1, 3, 60, 64))

    def test_importance_maps_in_unit_interval(self):
        torch.manual_seed(1)
        enc = Encoder(SMALL)
        _, d_a, d_b = enc(torch.rand(2, 3, 32, 32))
        for d in (d_a, d_b):
            assert float(d.min()) >= 0.0 and float(d.max()) <= 1.0

    def test_deterministic_forward(self):
        torch.manual_seed(2)
        enc = Encoder(SMALL).eval()
        x = torch.rand(1, 3, 32, 32)
        z1, a1, b1 = enc(x)
        z2, a2, b2 = enc(x)
        assert torch.equal(z1, z2) and torch.equal(a1, a2) and torch.equal(b1, b2)


class TestDecoders:
    def test_side_output_shape_and_range(self):
        torch.manual_seed(3)
        model = MDCodec(SMALL)
        q = torch.randn(1, SMALL.feature_channels, 20, 20)
        img = model.decoder_a(q)
        assert img.shape == (1, 3, 160, 160)
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0

    def test_central_takes_double_channels(self):
        model = MDCodec(SMALL)
        assert model.decoder_central.up1.in_channels == 2 * SMALL.feature_channels

    def test_all_zero_input_is_valid(self):
        torch.manual_seed(4)
        model = MDCodec(SMALL)
        img = model.decoder_a(torch.zeros(1, SMALL.feature_channels, 4, 4))
        assert torch.isfinite(img).all()
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0

    def test_round_trip_restores_dims(self):
        torch.manual_seed(5)
        model = MDCodec(SMALL).eval()
        for h, w in ((32, 32), (40, 64)):
            out = model(torch.rand(1, 3, h, w), mode="hard")
            for img in (out.y_a, out.y_b, out.y_central):
                assert img.shape == (1, 3, h, w)


class TestMaskedConv3d:
    def test_type_a_blocks_center_and_future(self):
        conv = MaskedConv3d(1, 1, kernel_size=3, mask_type="A")
        mask = conv.mask[0, 0]
        assert mask[1, 1, 1] == 0  # center
        assert mask[1, 1, 2] == 0 and mask[1, 2, 0] == 0 and mask[2, 0, 0] == 0
        assert mask[1, 1, 0] == 1 and mask[1, 0, 2] == 1 and mask[0, 2, 2] == 1

    def test_type_b_allows_center(self):
        conv = MaskedConv3d(1, 1, kernel_size=3, mask_type="B")
        assert conv.mask[0, 0, 1, 1, 1] == 1
        assert conv.mask[0, 0, 1, 1, 2] == 0

    def test_masked_weights_start_zero(self):
        conv = MaskedConv3d(2, 2, kernel_size=3, mask_type="A")
        assert torch.equal(conv.weight.detach() * (1 - conv.mask),
                           torch.zeros_like(conv.weight))


def _flatten_raster(log_probs):
    # (1, M, N, K, L) -> (M*N*K, L) in (m, n, k) raster order
    return log_probs[0].reshape(-1, log_probs.size(-1))


class TestEntropyModel:
    def test_distributions_normalize(self):
        torch.manual_seed(6)
        net = EntropyModel(num_centers=4, hidden_channels=8)
        idx = torch.randint(0, 4, (1, 3, 5, 2))
        one_hot = torch.nn.functional.one_hot(idx, 4).float()
        probs = net(one_hot).exp()
        sums = probs.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_uniform_model_bits(self):
        torch.manual_seed(7)
        net = EntropyModel(num_centers=8, hidden_channels=8).double()
        with torch.no_grad():
            net.conv_out.weight.zero_()
            net.conv_out.bias.zero_()
        idx = torch.randint(0, 8, (4, 4, 2))
        bits, probs = net.rate_of_indices(idx)
        assert abs(bits - 4 * 4 * 2 * 3.0) < 1e-9  # 32 symbols * log2(8)
        assert torch.allclose(probs, torch.full_like(probs, 1 / 8))

    def test_confident_model_bits_vanish(self):
        torch.manual_seed(8)
        net = EntropyModel(num_centers=4, hidden_channels=8).double()
        with torch.no_grad():
            net.conv_out.weight.zero_()
            net.conv_out.bias.copy_(torch.tensor([50.0, -50.0, -50.0, -50.0]))
        idx = torch.zeros(4, 4, 2, dtype=torch.long)
        bits, _ = net.rate_of_indices(idx)
        assert bits < 1e-6

    def test_causality_perturbation(self):
        torch.manual_seed(9)
        net = EntropyModel(num_centers=5, hidden_channels=8).eval()
        rng = np.random.default_rng(0)
        m, n, k = 4, 3, 2
        idx = torch.from_numpy(rng.integers(0, 5, (1, m, n, k)))
        one_hot = torch.nn.functional.one_hot(idx, 5).float()
        base = _flatten_raster(net(one_hot))
        for _ in range(25):
            pos = int(rng.integers(0, m * n * k))
            perturbed_idx = idx.clone().reshape(-1)
            perturbed_idx[pos] = (perturbed_idx[pos] + 1 + rng.integers(0, 4)) % 5
            perturbed = torch.nn.functional.one_hot(
                perturbed_idx.reshape(1, m, n, k), 5).float()
            out = _flatten_raster(net(perturbed))
            assert torch.equal(out[:pos + 1], base[:pos + 1])

    def test_rejects_bad_indices(self):
        net = EntropyModel(num_centers=4, hidden_channels=8)
        with pytest.raises(ValueError):
            net.rate_of_indices(torch.full((2, 2, 2), 9, dtype=torch.long))

    def test_bit_cost_matches_rate_of_indices(self):
        torch.manual_seed(10)
        net = EntropyModel(num_centers=4, hidden_channels=8)
        idx = torch.randint(0, 4, (1, 3, 3, 2))
        one_hot = torch.nn.functional.one_hot(idx, 4).float()
        bits_batch = float(net.bit_cost(one_hot).sum())
        bits_direct, _ = net.rate_of_indices(idx[0])
        assert abs(bits_batch - bits_direct) < 1e-3


class TestCodecForward:
    def test_output_shapes(self):
        torch.manual_seed(11)
        model = MDCodec(SMALL)
        out = model(torch.rand(2, 3, 32, 32))
        assert out.indices_a.shape == (2, 4, 4, SMALL.feature_channels)
        assert out.one_hot_a.shape == (2, 4, 4, SMALL.feature_channels, 8)
        assert out.y_central.shape == (2, 3, 32, 32)
        assert out.bits_a.shape == (2,)
        assert float(out.bits_a.min()) >= 0.0

    def test_symmetry_with_shared_inputs_and_centers(self):
        torch.manual_seed(12)
        model = MDCodec(SMALL).eval()
        with torch.no_grad():
            model.quantizer_b.centers.copy_(model.quantizer_a.centers)
        x = torch.rand(1, 3, 32, 32)
        features, map_a, _ = model.encoder(x)
        mask = expand_importance(map_a, SMALL.feature_channels)
        gated = apply_importance(features, mask).permute(0, 2, 3, 1)
        _, idx_a, _ = model.quantizer_a(gated, "hard")
        _, idx_b, _ = model.quantizer_b(gated, "hard")
        assert torch.equal(idx_a, idx_b)

    def test_gradients_reach_stem_and_centers(self):
        torch.manual_seed(13)
        model = MDCodec(TINY).double()
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        out = model(x, mode="ste")
        loss, _ = total_loss(x, out.y_a, out.y_b, out.y_central,
                             out.bits_a.mean(), out.bits_b.mean(),
                             model.regularization())
        loss.backward()
        assert float(model.encoder.stem.weight.grad.abs().max()) > 0
        assert float(model.quantizer_a.centers.grad.abs().max()) > 0
        assert float(model.quantizer_b.centers.grad.abs().max()) > 0

    def test_encode_indices_matches_forward(self):
        torch.manual_seed(14)
        model = MDCodec(SMALL).eval()
        x = torch.rand(1, 3, 32, 32)
        out = model(x, mode="hard")
        idx_a, idx_b = model.encode_indices(x)
        assert torch.equal(idx_a, out.indices_a)
        assert torch.equal(idx_b, out.indices_b)

    def test_regularization_covers_conv_weights_only(self):
        model = MDCodec(TINY)
        reg = float(model.regularization())
        manual = sum(float((m.weight ** 2).sum()) for m in model.modules()
                     if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d,
                                       torch.nn.Conv3d)))
        assert abs(reg - manual) < 1e-3
        # centers are not part of the weight-decay operand
        names = [n for n, p in model.named_parameters() if "centers" in n]
        assert names  # sanity: centers exist as parameters


class TestCheckpoints:
    def test_save_load_round_trip(self, tmp_path):
        torch.manual_seed(15)
        model = MDCodec(TINY)
        path = str(tmp_path / "model.pt")
        save_checkpoint(path, model, step=7)
        loaded, payload = load_model(path)
        assert payload["step"] == 7
        assert payload["param_count"] == parameter_count(model)
        for (na, a), (nb, b) in zip(model.state_dict().items(),
                                    loaded.state_dict().items()):
            assert na == nb and torch.equal(a, b)

    def test_checksum_detects_corruption(self, tmp_path):
        torch.manual_seed(16)
        model = MDCodec(TINY)
        path = str(tmp_path / "model.pt")
        save_checkpoint(path, model)
        payload = torch.load(path, weights_only=False)
        with torch.no_grad():
            payload["state_dict"]["encoder.stem.bias"][0] += 1.0
        torch.save(payload, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_unknown_version(self, tmp_path):
        path = str(tmp_path / "weird.pt")
        torch.save({"format_version": 99}, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_non_checkpoint(self, tmp_path):
        path = str(tmp_path / "junk.pt")
        with open(path, "wb") as fh:
            fh.write(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_model_tag_is_stable_and_parameter_sensitive(self):
        torch.manual_seed(17)
        model = MDCodec(TINY)
        tag1 = model_tag(model)
        tag2 = model_tag(model)
        assert tag1 == tag2 and len(tag1) == 8
        with torch.no_grad():
            model.encoder.stem.weight[0, 0, 0, 0] += 0.5
        assert model_tag(model) != tag1

    def test_checksum_order_independent_of_insertion(self):
        a = {"x": torch.ones(2), "y": torch.zeros(3)}
        b = {"y": torch.zeros(3), "x": torch.ones(2)}
        assert state_checksum(a) == state_checksum(b)
