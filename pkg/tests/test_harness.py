import os

import numpy as np
import pytest
import torch

from mdcodec import cli
from mdcodec.bitstream import EncodedDescription, HeaderError
from mdcodec.data import from_tensor, load_image, save_image, to_tensor, write_texture_dataset
from mdcodec.harness import (
    ChannelConfig,
    ChannelStats,
    decode_any,
    encode_image,
    evaluate_dataset,
    expected_distortion,
    pad_to_block,
    plot_rd,
    simulate_channel,
)
from mdcodec.networks import MDCodec, ModelConfig, save_checkpoint


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(123)
    cfg = ModelConfig(base_channels=8, feature_channels=2, num_centers=4,
                      resconv_per_block=1, entropy_channels=8)
    return MDCodec(cfg).eval()


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(7)
    base = rng.random((40, 48, 3)).astype(np.float32)
    return np.clip(base, 0, 1)


class TestPadding:
    def test_pads_to_multiple_of_eight(self):
        img = np.zeros((100, 100, 3), dtype=np.float32)
        assert pad_to_block(img).shape == (104, 104, 3)

    def test_no_padding_when_divisible(self):
        img = np.zeros((64, 64, 3), dtype=np.float32)
        assert pad_to_block(img) is img

    def test_reflect_content(self):
        img = np.arange(36 * 33 * 3, dtype=np.float32).reshape(36, 33, 3)
        padded = pad_to_block(img)
        assert padded.shape == (40, 40, 3)
        assert np.array_equal(padded[:36, :33], img)
        assert np.array_equal(padded[36], padded[34])  # reflected row


class TestEncodeImage:
    def test_header_records_original_dims(self, model, image):
        desc_a, desc_b = encode_image(image, model)
        for desc in (desc_a, desc_b):
            assert (desc.header.orig_h, desc.header.orig_w) == (40, 48)
            assert (desc.header.m, desc.header.n) == (5, 6)
        assert desc_a.header.desc_id == 0
        assert desc_b.header.desc_id == 1

    def test_odd_size_padded_header(self, model):
        img = np.random.default_rng(0).random((100, 100, 3)).astype(np.float32)
        desc_a, _ = encode_image(img, model)
        assert (desc_a.header.orig_h, desc_a.header.m) == (100, 13)

    def test_deterministic(self, model, image):
        a1, b1 = encode_image(image, model)
        a2, b2 = encode_image(image, model)
        assert a1.to_bytes() == a2.to_bytes()
        assert b1.to_bytes() == b2.to_bytes()

    def test_rejects_tiny_images(self, model):
        with pytest.raises(ValueError):
            encode_image(np.zeros((16, 64, 3), dtype=np.float32), model)

    def test_raw_mode(self, model, image):
        desc_a, desc_b = encode_image(image, model, coding="raw")
        assert desc_a.header.coding_mode == 0
        img, mode = decode_any([desc_a, desc_b], model)
        assert mode == "central" and img.shape == (40, 48, 3)


class TestDecodeAny:
    def test_both_descriptions_decode_centrally(self, model, image):
        descs = list(encode_image(image, model))
        out, mode = decode_any(descs, model)
        assert mode == "central"
        assert out.shape == image.shape

    def test_single_descriptions_use_matching_side(self, model, image):
        desc_a, desc_b = encode_image(image, model)
        _, mode_a = decode_any([desc_a], model)
        _, mode_b = decode_any([desc_b], model)
        assert (mode_a, mode_b) == ("side_a", "side_b")

    def test_none_returns_mid_gray(self, model):
        out, mode = decode_any([], model, fallback_shape=(30, 40))
        assert mode == "none"
        assert out.shape == (30, 40, 3)
        assert np.all(out == 0.5)

    def test_none_without_shape_is_an_error(self, model):
        with pytest.raises(ValueError):
            decode_any([], model)

    def test_duplicate_description_rejected(self, model, image):
        desc_a, _ = encode_image(image, model)
        with pytest.raises(HeaderError):
            decode_any([desc_a, desc_a], model)

    def test_mismatched_images_rejected(self, model, image):
        desc_a, _ = encode_image(image, model)
        other = np.random.default_rng(1).random((48, 48, 3)).astype(np.float32)
        _, desc_b = encode_image(other, model)
        with pytest.raises(HeaderError):
            decode_any([desc_a, desc_b], model)

    def test_file_round_trip_matches_in_memory(self, model, image, tmp_path):
        desc_a, desc_b = encode_image(image, model)
        path_a, path_b = str(tmp_path / "a.mdcd"), str(tmp_path / "b.mdcd")
        desc_a.write(path_a)
        desc_b.write(path_b)
        from_file, mode = decode_any(
            [EncodedDescription.read(path_a), EncodedDescription.read(path_b)], model)
        assert mode == "central"
        x = to_tensor(pad_to_block(image))
        idx_a, idx_b = model.encode_indices(x)
        in_memory = from_tensor(model.decode_central(idx_a, idx_b))[:40, :48]
        assert np.array_equal(from_file, in_memory)


class TestExpectedDistortion:
    def test_limit_cases(self):
        assert expected_distortion(0.9, 0.5, 0.4, 0.0, 0.0, 0.0) == 0.9
        assert expected_distortion(0.9, 0.5, 0.4, 0.05, 1.0, 1.0) == 0.05

    def test_mixture(self):
        got = expected_distortion(1.0, 0.5, 0.25, 0.0, 0.1, 0.2)
        expected = 0.9 * 0.8 * 1.0 + 0.9 * 0.2 * 0.5 + 0.1 * 0.8 * 0.25
        assert abs(got - expected) < 1e-12

    def test_rejects_bad_probabilities(self):
        with pytest.raises(ValueError):
            expected_distortion(1, 1, 1, 1, -0.1, 0.5)
        with pytest.raises(ValueError):
            expected_distortion(1, 1, 1, 1, 0.5, 1.5)


class TestSimulateChannel:
    def test_no_loss_all_central(self, model, image):
        stats = simulate_channel(image, model, ChannelConfig(0.0, 0.0, trials=50, seed=1))
        assert stats.counts["central"] == 50
        assert stats.mean_mr == pytest.approx(stats.mode_mr["central"])

    def test_total_loss_all_none(self, model, image):
        stats = simulate_channel(image, model, ChannelConfig(1.0, 1.0, trials=50, seed=1))
        assert stats.counts["none"] == 50

    def test_frequencies_match_binomial(self, model, image):
        trials = 20000
        stats = simulate_channel(image, model, ChannelConfig(0.1, 0.1, trials=trials, seed=5))
        expected = {"central": 0.81, "side_a": 0.09, "side_b": 0.09, "none": 0.01}
        for mode, p in expected.items():
            se = (p * (1 - p) / trials) ** 0.5
            assert abs(stats.frequencies[mode] - p) < 3.5 * se, mode

    def test_reproducible_with_seed(self, model, image):
        cfg = ChannelConfig(0.3, 0.2, trials=500, seed=9)
        a = simulate_channel(image, model, cfg)
        b = simulate_channel(image, model, cfg)
        assert a.counts == b.counts
        assert a.mean_ms == b.mean_ms

    def test_mean_matches_closed_form_weighting(self, model, image):
        stats = simulate_channel(image, model, ChannelConfig(0.25, 0.25, trials=4000, seed=2))
        weighted = sum(stats.frequencies[m] * stats.mode_mr[m] for m in stats.counts)
        assert abs(stats.mean_mr - weighted) < 1e-9

    def test_validates_config(self):
        with pytest.raises(ValueError):
            ChannelConfig(-0.1, 0.5)
        with pytest.raises(ValueError):
            ChannelConfig(0.1, 0.5, trials=0)


class TestEvaluateDataset:
    @pytest.fixture(scope="class")
    def dataset_dir(self, tmp_path_factory):
        path = tmp_path_factory.mktemp("eval_images")
        write_texture_dataset(str(path), 4, size=40, seed=11)
        return str(path)

    def test_csv_rows_and_mean(self, model, dataset_dir, tmp_path):
        csv_path = str(tmp_path / "rd.csv")
        points = evaluate_dataset(dataset_dir, model, csv_path=csv_path)
        assert len(points) == 5  # 4 images + mean
        assert points[-1].name == "mean"
        with open(csv_path) as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 6  # header + 4 + mean
        assert lines[0].startswith("image,bpp,side_ms_ssim")
        mean_bpp = sum(p.bpp for p in points[:-1]) / 4
        assert abs(points[-1].bpp - mean_bpp) < 1e-9

    def test_bpp_counts_headers(self, model, dataset_dir):
        points = evaluate_dataset(dataset_dir, model)
        img = load_image(os.path.join(dataset_dir, sorted(os.listdir(dataset_dir))[0]))
        desc_a, desc_b = encode_image(img, model)
        expected = (desc_a.total_bits + desc_b.total_bits) / (40 * 40)
        assert abs(points[0].bpp - expected) < 1e-9

    def test_incompatible_images_skipped(self, model, dataset_dir, tmp_path, caplog):
        import shutil
        mixed = tmp_path / "mixed"
        shutil.copytree(dataset_dir, mixed)
        save_image(str(mixed / "tiny.png"),
                   np.zeros((8, 8, 3), dtype=np.float32))
        points = evaluate_dataset(str(mixed), model)
        assert len(points) == 5  # tiny one skipped

    def test_empty_directory_is_an_error(self, model, tmp_path):
        with pytest.raises(ValueError):
            evaluate_dataset(str(tmp_path), model)

    def test_plots_written(self, model, dataset_dir, tmp_path):
        csv_path = str(tmp_path / "rd.csv")
        evaluate_dataset(dataset_dir, model, csv_path=csv_path)
        paths = plot_rd(csv_path, str(tmp_path / "plots"))
        assert len(paths) == 2
        for p in paths:
            assert os.path.exists(p) and os.path.getsize(p) > 0


class TestCli:
    @pytest.fixture(scope="class")
    def checkpoint(self, model, tmp_path_factory):
        path = str(tmp_path_factory.mktemp("ckpt") / "model.pt")
        save_checkpoint(path, model)
        return path

    @pytest.fixture(scope="class")
    def png(self, image, tmp_path_factory):
        path = str(tmp_path_factory.mktemp("img") / "input.png")
        save_image(path, image)
        return path

    def test_textures_command(self, tmp_path):
        out = str(tmp_path / "tex")
        assert cli.main(["textures", "--out", out, "--count", "3", "--size", "24"]) == 0
        assert len(os.listdir(out)) == 3

    def test_encode_decode_round_trip(self, checkpoint, png, tmp_path):
        a, b = str(tmp_path / "a.mdcd"), str(tmp_path / "b.mdcd")
        out = str(tmp_path / "decoded.png")
        assert cli.main(["-q", "encode", "--model", checkpoint, "--in", png,
                         "--out-a", a, "--out-b", b]) == 0
        assert cli.main(["-q", "decode", "--model", checkpoint, "--a", a,
                         "--b", b, "--out", out]) == 0
        decoded = load_image(out)
        assert decoded.shape == load_image(png).shape

    def test_decode_single_description(self, checkpoint, png, tmp_path):
        a = str(tmp_path / "a.mdcd")
        out = str(tmp_path / "side.png")
        cli.main(["-q", "encode", "--model", checkpoint, "--in", png,
                  "--out-a", a, "--out-b", str(tmp_path / "b.mdcd")])
        assert cli.main(["-q", "decode", "--model", checkpoint, "--a", a,
                         "--out", out]) == 0
        assert os.path.exists(out)

    def test_decode_requires_a_description(self, checkpoint, tmp_path):
        code = cli.main(["-q", "decode", "--model", checkpoint,
                         "--out", str(tmp_path / "x.png")])
        assert code != 0

    def test_missing_model_fails_cleanly(self, png, tmp_path):
        code = cli.main(["-q", "encode", "--model", str(tmp_path / "nope.pt"),
                         "--in", png, "--out-a", str(tmp_path / "a"),
                         "--out-b", str(tmp_path / "b")])
        assert code != 0

    def test_eval_command(self, checkpoint, tmp_path):
        data = str(tmp_path / "imgs")
        write_texture_dataset(data, 2, size=40, seed=3)
        csv_path = str(tmp_path / "rd.csv")
        plots = str(tmp_path / "plots")
        assert cli.main(["-q", "eval", "--model", checkpoint, "--dir", data,
                         "--csv", csv_path, "--plots", plots]) == 0
        assert os.path.exists(csv_path)
        assert len(os.listdir(plots)) == 2

    def test_simulate_command(self, checkpoint, png):
        assert cli.main(["-q", "simulate", "--model", checkpoint, "--img", png,
                         "--p", "0.2", "--trials", "500"]) == 0

    def test_train_command_with_config(self, tmp_path):
        data = str(tmp_path / "data")
        write_texture_dataset(data, 4, size=24, seed=5)
        cfg_file = tmp_path / "toy.cfg"
        cfg_file.write_text(
            "crop_size = 16\nbatch_size = 2\nsteps = 2\n"
            "feature_channels = 2\nnum_centers = 3\nbase_channels = 8\n"
            "resconv_per_block = 1\nentropy_channels = 8\n"
            "log_every = 0\ncheckpoint_every = 0\n"
        )
        out = str(tmp_path / "run")
        assert cli.main(["-q", "train", "--config", str(cfg_file), "--data", data,
                         "--out", out, "--set", "steps=3"]) == 0
        assert os.path.exists(os.path.join(out, "model.pt"))
        with open(os.path.join(out, "train_log.csv")) as fh:
            assert len(fh.read().strip().splitlines()) == 4  # header + 3 steps
