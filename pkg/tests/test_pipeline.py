import csv
import struct

import numpy as np
import pytest

from cdmjscc import numerics as nm
from cdmjscc import pipeline
from cdmjscc.checkpoint import (Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint,
                                save_checkpoint)
from cdmjscc.config import TrainConfig, config_from_mapping, dump_config, load_config, parse_key_values
from cdmjscc.data import FAMILIES, local_variance, synth_dataset, synth_families, synth_image
from cdmjscc.errors import MagicError, TruncatedError, VersionError
from cdmjscc.imageio import (ImageFormatError, center_crop_multiple_of_4, decode_pnm, encode_ppm,
                             load_images)
from cdmjscc.numerics import RngStream
from cdmjscc.transforms import CdmJscc, ModelConfig

TINY_MODEL = ModelConfig(latent_channels=4, hyper_channels=2, analysis_width=4, unet_widths=(4, 8),
                         blocks_per_level=1, time_dim=8, groups=2)
TINY = TrainConfig(image_size=16, dataset_count=8, batch_size=2, steps_stage1=3, steps_stage2=3,
                   steps_stage3=3, precision=64, lr=1e-3, n_test=2, seed=5, k_max=2)


@pytest.fixture(scope="module")
def trained():
    return pipeline.train_all(TINY, TINY_MODEL)


def params_of(model, which):
    return {p.name: p.value.data for p in getattr(model, which)()}


def fresh_model():
    with nm.precision(TINY.precision):
        return CdmJscc(TINY_MODEL, seed=TINY.seed)


class TestSynthData:
    def test_deterministic(self):
        np.testing.assert_array_equal(synth_dataset(42, 8, 32), synth_dataset(42, 8, 32))

    def test_seed_changes_set(self):
        assert not np.array_equal(synth_dataset(1, 4, 16), synth_dataset(2, 4, 16))

    def test_shape_and_range(self):
        imgs = synth_dataset(0, 12, 16)
        assert imgs.shape == (12, 3, 16, 16)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_families_cycle(self):
        assert synth_families(6) == list(FAMILIES) + list(FAMILIES[:2])

    @pytest.mark.parametrize("seed", range(10))
    def test_flat_has_zero_variance(self, seed):
        family, img = synth_image(seed, 0, 32)
        assert family == "flat"
        assert np.all(img.std(axis=(1, 2)) == 0.0)
        assert local_variance(img) == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_noise_busier_than_flat(self, seed):
        _, flat = synth_image(seed, 0, 32)
        family, noise = synth_image(seed, 3, 32)
        assert family == "noise"
        assert local_variance(noise) > local_variance(flat)

    @pytest.mark.parametrize("size", [0, 30, -4])
    def test_bad_size(self, size):
        with pytest.raises(ValueError):
            synth_dataset(0, 2, size)


class TestImageIO:
    def test_p6_ones(self):
        img = decode_pnm(b"P6\n2 2\n255\n" + bytes([255] * 12))
        assert img.shape == (3, 2, 2)
        np.testing.assert_array_equal(img, 1.0)

    def test_p5_replicated(self):
        img = decode_pnm(b"P5\n# comment\n3 1\n255\n" + bytes([0, 51, 255]))
        assert img.shape == (3, 1, 3)
        for c in range(3):
            np.testing.assert_allclose(img[c, 0], [0.0, 0.2, 1.0])

    @pytest.mark.parametrize("data", [b"P6\n2 2\n255\n" + bytes(5), b"P6\n2 2", b"", b"P3\n1 1\n255\n000",
                                      b"P6\n1 1\n65535\n" + bytes(6), b"P6\nx 1\n255\n" + bytes(3)])
    def test_malformed(self, data):
        with pytest.raises(ImageFormatError):
            decode_pnm(data, "bad.ppm")

    def test_error_names_file(self, tmp_path):
        (tmp_path / "broken.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(3))
        with pytest.raises(ImageFormatError, match="broken.ppm"):
            load_images(tmp_path)

    def test_ppm_round_trip(self):
        img = np.round(RngStream(0).uniform((3, 5, 7)) * 255) / 255
        np.testing.assert_allclose(decode_pnm(encode_ppm(img)), img, atol=1e-12)

    def test_center_crop(self):
        img = np.arange(3 * 10 * 7, dtype=float).reshape(3, 10, 7)
        out = center_crop_multiple_of_4(img)
        assert out.shape == (3, 4, 4)
        np.testing.assert_array_equal(out, img[:, 3:7, 1:5])

    def test_load_directory(self, tmp_path):
        (tmp_path / "b.ppm").write_bytes(encode_ppm(np.zeros((3, 9, 9))))
        (tmp_path / "a.pgm").write_bytes(b"P5\n8 8\n255\n" + bytes(64))
        (tmp_path / "notes.txt").write_text("skip")
        names, imgs = load_images(tmp_path)
        assert names == ["a.pgm", "b.ppm"]
        assert [im.shape for im in imgs] == [(3, 8, 8), (3, 8, 8)]

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ImageFormatError):
            load_images(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_images(tmp_path / "absent")


class TestConfig:
    def test_parse(self):
        text = "# header\neta = 0.3\n\nsteps_stage1=10  # inline\nmodel.latent_channels = 8\n"
        cfg, mcfg = config_from_mapping(parse_key_values(text))
        assert cfg.eta == 0.3 and cfg.steps_stage1 == 10 and mcfg.latent_channels == 8
        assert cfg.lam == TrainConfig().lam

    @pytest.mark.parametrize("text", ["bogus = 1", "model.bogus = 1", "no equals sign", "eta = 2.0",
                                      "lam = -1", "image_size = 30", "precision = 16", "eta = abc"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            config_from_mapping(parse_key_values(text))

    def test_dump_round_trip(self, tmp_path):
        cfg = TrainConfig(eta=0.2, dataset="some dir", lr_decay_step=7)
        mcfg = ModelConfig(unet_widths=(8, 16))
        path = tmp_path / "cfg.txt"
        path.write_text(dump_config(cfg, mcfg))
        assert load_config(path) == (cfg, mcfg)

    def test_lr_decay(self):
        cfg = TrainConfig(lr=1e-3, lr_decay_step=5)
        assert cfg.lr_at(4) == 1e-3 and cfg.lr_at(5) == pytest.approx(1e-4)
        assert TrainConfig(lr=1e-3).lr_at(10 ** 6) == 1e-3


class TestCheckpoint:
    def make(self):
        model = CdmJscc(TINY_MODEL, seed=1)
        params = {p.name: RngStream(2).gauss(p.value.shape).astype(np.float64) for p in model.parameters()}
        return Checkpoint(2, TINY, TINY_MODEL, params)

    def test_round_trip_bit_exact(self, tmp_path):
        ckpt = self.make()
        save_checkpoint(ckpt, tmp_path / "c.cdmj")
        back = load_checkpoint(tmp_path / "c.cdmj")
        assert back.stage == 2 and back.config == TINY and back.model_config == TINY_MODEL
        assert list(back.params) == list(ckpt.params)
        for k, v in ckpt.params.items():
            assert back.params[k].tobytes() == v.tobytes()

    def test_header_layout(self):
        data = encode_checkpoint(self.make())
        assert data[:4] == b"CDMJ"
        assert struct.unpack("<H", data[4:6]) == (1,)

    def test_bad_magic(self):
        data = encode_checkpoint(self.make())
        with pytest.raises(MagicError):
            decode_checkpoint(b"XDMJ" + data[4:])

    def test_future_version(self):
        data = encode_checkpoint(self.make())
        with pytest.raises(VersionError):
            decode_checkpoint(data[:4] + struct.pack("<H", 2) + data[6:])

    @pytest.mark.parametrize("cut", [5, 9, 100, -1])
    def test_truncated(self, cut):
        data = encode_checkpoint(self.make())
        with pytest.raises(TruncatedError):
            decode_checkpoint(data[:cut])

    def test_build_model_loads_params(self):
        ckpt = self.make()
        model = ckpt.build_model()
        for name, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.value.data, ckpt.params[name])


class TestTraining:
    def test_stage_markers(self, trained):
        assert [c.stage for c in trained] == [1, 2, 3]

    def test_stage1_freezes_transmission(self, trained):
        fresh = params_of(fresh_model(), "transmission_parameters")
        for name, value in fresh.items():
            assert trained[0].params[name].tobytes() == value.tobytes()

    def test_stage1_updates_compression(self, trained):
        fresh = params_of(fresh_model(), "compression_parameters")
        assert any(trained[0].params[n].tobytes() != v.tobytes() for n, v in fresh.items())

    def test_stage2_freezes_compression(self, trained):
        c1, c2 = trained[:2]
        for name in params_of(c1.build_model(), "compression_parameters"):
            assert c1.params[name].tobytes() == c2.params[name].tobytes()

    def test_stage2_trains_transmission(self, trained):
        c1, c2 = trained[:2]
        names = params_of(c1.build_model(), "transmission_parameters")
        assert any(c1.params[n].tobytes() != c2.params[n].tobytes() for n in names)

    def test_stage3_updates_all_groups(self, trained):
        c2, c3 = trained[1:]
        model = c2.build_model()
        for which in ("compression_parameters", "transmission_parameters"):
            names = params_of(model, which)
            assert any(c2.params[n].tobytes() != c3.params[n].tobytes() for n in names)

    def test_history(self, trained):
        stages = [row["stage"] for row in trained[2].history]
        assert stages == [1] * 3 + [2] * 3 + [3] * 3
        assert all(np.isfinite(row["total"]) for row in trained[2].history)

    def test_deterministic(self, trained):
        again = pipeline.train_stage1(TINY, TINY_MODEL)
        for name, value in trained[0].params.items():
            assert again.params[name].tobytes() == value.tobytes()

    @pytest.mark.parametrize("fn,stage", [(pipeline.train_stage2, 2), (pipeline.train_stage2, 3),
                                          (pipeline.train_stage3, 1), (pipeline.train_stage3, 3)])
    def test_stage_order(self, trained, fn, stage):
        wrong = Checkpoint(stage, TINY, TINY_MODEL, trained[0].params)
        with pytest.raises(pipeline.StageError):
            fn(TINY, wrong)

    def test_smoothed_drop(self):
        history = [{"stage": 1, "total": float(v)} for v in range(10)] + [{"stage": 2, "total": 99.0}]
        assert pipeline.smoothed_drop(history, 1, window=3) == (1.0, 8.0)

    def test_heldout_loss_deterministic(self, trained):
        a = pipeline.heldout_loss(trained[2], repeats=1, count=2)
        assert np.isfinite(a) and a == pipeline.heldout_loss(trained[2], repeats=1, count=2)


class TestEvaluate:
    def test_rows_and_determinism(self, trained):
        imgs = list(synth_dataset(9, 2, 16))
        rows = pipeline.evaluate(trained[2], imgs, [0.0, 300.0], seed=3)
        assert len(rows) == 2 * 2 + 1
        assert rows[-1]["image"] == "mean"
        again = pipeline.evaluate(trained[2], imgs, [0.0, 300.0], seed=3)
        assert [r["psnr_db"] for r in rows] == [r["psnr_db"] for r in again]
        for r in rows[:-1]:
            assert set(pipeline.CSV_HEADER) <= set(r)
            assert 0 <= r["cbr"] <= 16 * 2 / (3 * 16 * 16)

    def test_rejects_stage1(self, trained):
        with pytest.raises(pipeline.StageError):
            pipeline.evaluate(trained[0], [np.zeros((3, 16, 16))], [10.0], seed=0)

    def test_csv(self, trained, tmp_path):
        rows = pipeline.evaluate(trained[1], list(synth_dataset(9, 1, 16)), [5.0], seed=0, names=["x.ppm"])
        pipeline.write_csv(rows, tmp_path / "m.csv")
        with open(tmp_path / "m.csv", newline="") as fh:
            table = list(csv.reader(fh))
        assert table[0] == ["image", "snr_db", "cbr", "psnr_db", "proxy_perc", "rate_bits"]
        assert table[1][0] == "x.ppm" and float(table[1][1]) == 5.0
        assert table[2][0] == "mean" and table[2][1] == ""

    def test_summarize_by_snr(self):
        rows = [{"image": "a", "snr_db": 0.0, "psnr_db": 10.0}, {"image": "b", "snr_db": 0.0, "psnr_db": 12.0},
                {"image": "a", "snr_db": 5.0, "psnr_db": 20.0}, {"image": "mean", "snr_db": float("nan"),
                                                                   "psnr_db": 99.0}]
        assert pipeline.summarize_by_snr(rows) == {0.0: 11.0, 5.0: 20.0}


class TestTransmit:
    def test_deterministic_and_valid(self, trained):
        nm.set_precision(64)
        model = trained[2].build_model()
        img = synth_dataset(4, 4, 16)[3]
        a = pipeline.transmit(model, img, TINY, 10.0, RngStream(7))
        b = pipeline.transmit(model, img, TINY, 10.0, RngStream(7))
        np.testing.assert_array_equal(a.reconstruction, b.reconstruction)
        assert a.reconstruction.shape == img.shape
        assert a.reconstruction.min() >= 0.0 and a.reconstruction.max() <= 1.0
        assert a.cbr == a.rate_map.k_total / img.size
        if a.frame is not None:
            assert a.frame.symbols.size == a.rate_map.k_total
