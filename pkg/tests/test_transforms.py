import numpy as np
import pytest

from cdmjscc import numerics as nm
from cdmjscc import transforms as tf
from cdmjscc.numerics import RngStream, ShapeError, Tensor
from cdmjscc.transforms import CdmJscc, ModelConfig

SMALL = ModelConfig(latent_channels=16, hyper_channels=8, analysis_width=8, unet_widths=(8, 16),
                    blocks_per_level=1, time_dim=8, groups=4)


@pytest.fixture(scope="module")
def model():
    return CdmJscc(SMALL, seed=3)


def images(b, size, seed=0):
    return Tensor(RngStream(seed).uniform((b, 3, size, size)).astype(nm.get_dtype()))


def randomize(module, seed):
    """Give zero-initialized weights random values so outputs depend on inputs."""
    rng = RngStream(seed, stream=7)
    for p in module.parameters():
        if not np.any(p.value.data):
            p.value.data = (0.1 * rng.gauss(p.value.shape)).astype(p.value.data.dtype)


class TestAnalysis:
    @pytest.mark.parametrize("size,count", [(32, 64), (64, 256)])
    def test_vector_count(self, model, size, count):
        z = tf.analysis(model.g_e, images(1, size))
        assert z.shape == (1, 16, size // 4, size // 4)
        assert tf.grid_to_vectors(z).shape == (1, count, 16)

    def test_zero_image_finite(self, model):
        z = tf.analysis(model.g_e, Tensor(np.zeros((1, 3, 32, 32), nm.get_dtype())))
        assert np.all(np.isfinite(z.data))

    @pytest.mark.parametrize("shape", [(1, 3, 30, 32), (1, 1, 32, 32), (3, 32, 32)])
    def test_bad_shape(self, model, shape):
        with pytest.raises(ShapeError):
            tf.analysis(model.g_e, Tensor(np.zeros(shape, nm.get_dtype())))


class TestHyper:
    def test_shapes(self, model):
        z = Tensor(RngStream(1).gauss((2, 16, 8, 8)).astype(nm.get_dtype()))
        y = tf.hyper_analysis(model.h_e, z)
        assert y.shape == (2, 8, 4, 4)
        mu, sigma = tf.hyper_synthesis(model.h_s, y)
        assert mu.shape == z.shape and sigma.shape == z.shape

    def test_sigma_floor(self, model):
        rng = RngStream(2)
        for _ in range(1000):
            y = Tensor((rng.gauss((1, 8, 1, 1)) * 50).astype(nm.get_dtype()))
            assert tf.hyper_synthesis(model.h_s, y).sigma.data.min() >= 1e-6 * (1 - 1e-6)

    def test_pure(self, model):
        z = Tensor(RngStream(3).gauss((1, 16, 8, 8)).astype(nm.get_dtype()))
        a = tf.hyper_synthesis(model.h_s, tf.hyper_analysis(model.h_e, z))
        b = tf.hyper_synthesis(model.h_s, tf.hyper_analysis(model.h_e, z))
        np.testing.assert_array_equal(a.mu.data, b.mu.data)
        np.testing.assert_array_equal(a.sigma.data, b.sigma.data)

    @pytest.mark.parametrize("size", [32, 48, 64])
    def test_round_trip_congruent(self, model, size):
        z = tf.analysis(model.g_e, images(1, size))
        mu, sigma = tf.hyper_synthesis(model.h_s, tf.hyper_analysis(model.h_e, z))
        assert mu.shape == z.shape == sigma.shape


class TestJscc:
    def test_encode_shape(self, model):
        z = Tensor(RngStream(4).gauss((1, 16, 8, 8)).astype(nm.get_dtype()))
        assert tf.jscc_encode_vectors(model.f_e, z).shape == (1, 64, 16)

    def test_zero_latent_zero_output(self, model):
        out = tf.jscc_encode_vectors(model.f_e, Tensor(np.zeros((1, 16, 8, 8), nm.get_dtype())))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_encode_pure(self, model):
        z = Tensor(RngStream(5).gauss((1, 16, 8, 8)).astype(nm.get_dtype()))
        np.testing.assert_array_equal(tf.jscc_encode_vectors(model.f_e, z).data,
                                      tf.jscc_encode_vectors(model.f_e, z).data)

    def test_decode_shape(self, model):
        v = Tensor(RngStream(6).gauss((2, 64, 16)).astype(nm.get_dtype()))
        assert tf.jscc_decode_vectors(model.f_d, v, (8, 8)).shape == (2, 16, 8, 8)

    def test_decode_pure(self, model):
        v = Tensor(RngStream(7).gauss((1, 64, 16)).astype(nm.get_dtype()))
        np.testing.assert_array_equal(tf.jscc_decode_vectors(model.f_d, v, (8, 8)).data,
                                      tf.jscc_decode_vectors(model.f_d, v, (8, 8)).data)

    def test_decode_grid_mismatch(self, model):
        v = Tensor(np.zeros((1, 63, 16), nm.get_dtype()))
        with pytest.raises(ShapeError):
            tf.jscc_decode_vectors(model.f_d, v, (8, 8))

    def test_vector_grid_round_trip(self):
        z = Tensor(np.arange(2 * 4 * 3 * 5, dtype=float).reshape(2, 4, 3, 5))
        v = tf.grid_to_vectors(z)
        np.testing.assert_array_equal(v.data[0, 6], z.data[0, :, 1, 1])
        np.testing.assert_array_equal(tf.vectors_to_grid(v, (3, 5)).data, z.data)


@pytest.fixture(scope="module")
def net():
    net = CdmJscc(SMALL, seed=5).x_theta
    randomize(net, 5)
    return net


class TestDenoise:
    def inputs(self, seed=8):
        rng = RngStream(seed)
        return (Tensor(rng.gauss((1, 3, 32, 32)).astype(nm.get_dtype())),
                Tensor(rng.gauss((1, 16, 8, 8)).astype(nm.get_dtype())))

    def test_shape(self, net):
        x, c = self.inputs()
        assert tf.denoise(net, x, c, 0.5).shape == (1, 3, 32, 32)

    def test_fresh_model_predicts_zero(self):
        # zero-initialized output layer: an untrained denoiser predicts mid-grey
        x, c = self.inputs()
        out = tf.denoise(CdmJscc(SMALL, seed=5).x_theta, x, c, 0.5)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_time_changes_output(self, net):
        x, c = self.inputs()
        a = tf.denoise(net, x, c, 0.1).data
        b = tf.denoise(net, x, c, 1.0).data
        assert np.max(np.abs(a - b)) > 1e-4

    def test_condition_changes_output(self, net):
        x, c = self.inputs()
        _, c2 = self.inputs(9)
        assert np.max(np.abs(tf.denoise(net, x, c, 0.5).data - tf.denoise(net, x, c2, 0.5).data)) > 1e-4

    def test_pure(self, net):
        x, c = self.inputs()
        np.testing.assert_array_equal(tf.denoise(net, x, c, 0.3).data, tf.denoise(net, x, c, 0.3).data)

    @pytest.mark.parametrize("t", [0.0, -0.5, 1.01])
    def test_t_norm_range(self, net, t):
        x, c = self.inputs()
        with pytest.raises(ValueError):
            tf.denoise(net, x, c, t)

    @pytest.mark.parametrize("shape", [(1, 16, 4, 4), (1, 8, 8, 8), (2, 16, 8, 8)])
    def test_condition_mismatch(self, net, shape):
        x, _ = self.inputs()
        with pytest.raises(ShapeError):
            tf.denoise(net, x, Tensor(np.zeros(shape, nm.get_dtype())), 0.5)

    @pytest.mark.parametrize("scales", [1, 3, 4])
    def test_cond_scales(self, scales):
        cfg = ModelConfig(latent_channels=4, hyper_channels=2, analysis_width=4, unet_widths=(4, 8),
                          blocks_per_level=1, time_dim=8, groups=2, cond_scales=scales)
        net = CdmJscc(cfg, seed=1).x_theta
        x = Tensor(np.zeros((1, 3, 16, 16), nm.get_dtype()))
        assert net(x, Tensor(np.ones((1, 4, 4, 4), nm.get_dtype())), 1.0).shape == x.shape


class TestModel:
    def test_parameter_partition(self, model):
        comp = {p.name for p in model.compression_parameters()}
        trans = {p.name for p in model.transmission_parameters()}
        assert comp and trans and not comp & trans
        assert comp | trans == set(model.named_parameters())

    def test_unique_names(self, model):
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))

    def test_seeded_init(self):
        a, b = CdmJscc(SMALL, seed=11), CdmJscc(SMALL, seed=11)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.value.data, pb.value.data)

    def test_odd_latent_channels(self):
        with pytest.raises(ValueError):
            ModelConfig(latent_channels=15)

    def test_timestep_embedding(self):
        e = tf.timestep_embedding(np.array([0.25, 1.0]), 8)
        assert e.shape == (2, 8)
        np.testing.assert_allclose(e[:, :4] ** 2 + e[:, 4:] ** 2, 1.0, rtol=1e-6)
