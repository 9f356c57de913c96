import numpy as np
import pytest
import torch

from ibood.nets import (
    CONV_FEATURES,
    Discriminator,
    EmbeddingHead,
    Generator,
    ParamLoadError,
    ShapeError,
    embed,
    images_to_tensor,
    init_dcgan_weights,
    load_params,
    save_params,
)


@pytest.fixture
def discriminator():
    d = Discriminator()
    init_dcgan_weights(d, seed=0)
    d.eval()
    return d


@pytest.fixture
def generator():
    g = Generator()
    init_dcgan_weights(g, seed=1)
    g.eval()
    return g


class TestGenerator:
    def test_output_shape_and_range(self, generator):
        noise = torch.randn(4, 100, generator=torch.Generator().manual_seed(2))
        out = generator(noise)
        assert out.shape == (4, 1, 28, 28)
        assert out.abs().max() <= 1.0

    def test_extreme_noise_stays_in_range(self, generator):
        noise = torch.full((3, 100), 1e6)
        assert generator(noise).abs().max() <= 1.0

    def test_zero_noise_deterministic_in_eval(self, generator):
        noise = torch.zeros(2, 100)
        assert torch.equal(generator(noise), generator(noise))

    def test_wrong_noise_dim(self, generator):
        with pytest.raises(ShapeError):
            generator(torch.zeros(4, 99))


class TestDiscriminator:
    def test_probabilities_in_open_interval(self, discriminator):
        images = torch.rand(6, 1, 28, 28) * 2 - 1
        probs = discriminator(images)
        assert probs.shape == (6,)
        assert torch.all(probs > 0) and torch.all(probs < 1)

    def test_batch_of_one_in_eval_mode(self, discriminator):
        probs = discriminator(torch.zeros(1, 1, 28, 28))
        assert probs.shape == (1,)
        assert torch.isfinite(probs).all()

    def test_wrong_image_shape(self, discriminator):
        with pytest.raises(ShapeError):
            discriminator(torch.zeros(2, 1, 32, 32))

    def test_conv_stack_feature_width(self, discriminator):
        feats = discriminator.conv_features(torch.zeros(1, 1, 28, 28))
        assert feats.shape == (1, CONV_FEATURES)
        assert CONV_FEATURES == 3136


class TestEmbed:
    def test_flatten_mode_dimension(self, discriminator):
        head = EmbeddingHead("flatten")
        z = embed(discriminator, head, torch.rand(10, 1, 28, 28) * 2 - 1)
        assert z.shape == (10, 3136)

    def test_projected_mode_dimension(self, discriminator):
        head = EmbeddingHead("projected", d_proj=64)
        head.eval()
        z = embed(discriminator, head, torch.rand(10, 1, 28, 28) * 2 - 1)
        assert z.shape == (10, 64)

    def test_duplicated_rows_embed_identically(self, discriminator):
        head = EmbeddingHead("projected", d_proj=32)
        head.eval()
        img = torch.rand(1, 1, 28, 28) * 2 - 1
        z = embed(discriminator, head, img.repeat(3, 1, 1, 1))
        assert torch.equal(z[0], z[1]) and torch.equal(z[1], z[2])

    def test_images_to_tensor_layout(self):
        images = np.zeros((2, 28, 28, 1), dtype=np.float32)
        images[0, 3, 5, 0] = 0.7
        t = images_to_tensor(images)
        assert t.shape == (2, 1, 28, 28)
        assert t[0, 0, 3, 5] == pytest.approx(0.7)

    def test_head_rejects_tiny_projection(self):
        with pytest.raises(ValueError):
            EmbeddingHead("projected", d_proj=1)


class TestParamSerialization:
    def test_save_load_round_trip_bit_exact(self, discriminator, tmp_path):
        head = EmbeddingHead("projected", d_proj=16)
        head.eval()
        images = torch.rand(4, 1, 28, 28, generator=torch.Generator().manual_seed(5)) * 2 - 1
        before = embed(discriminator, head, images)

        path = tmp_path / "disc.params"
        save_params(discriminator, path)
        other = Discriminator()
        init_dcgan_weights(other, seed=99)
        load_params(other, path)
        other.eval()
        after = embed(other, head, images)
        assert torch.equal(before, after)  # 0 ulp

    def test_save_load_save_identical_bytes(self, generator, tmp_path):
        p1, p2 = tmp_path / "a.params", tmp_path / "b.params"
        save_params(generator, p1)
        fresh = Generator()
        load_params(fresh, p1)
        save_params(fresh, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file(self, discriminator, tmp_path):
        path = tmp_path / "disc.params"
        save_params(discriminator, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(ParamLoadError, match="truncated"):
            load_params(Discriminator(), path)

    def test_topology_mismatch(self, generator, tmp_path):
        path = tmp_path / "gen.params"
        save_params(generator, path)
        with pytest.raises(ParamLoadError, match="topology"):
            load_params(Discriminator(), path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.params"
        path.write_bytes(b"not a parameter file")
        with pytest.raises(ParamLoadError, match="magic"):
            load_params(Discriminator(), path)
