import numpy as np
import pytest
import torch

from vpflow.hierarchy import build_sampling_hierarchy
from vpflow.mesh import MeshError
from vpflow.model import (
    ChebConv,
    CovariateScaler,
    CvaeNfModel,
    ModelConfig,
    ResidualChebBlock,
    load_checkpoint,
    sample_population,
    save_checkpoint,
)
from vpflow.solids import make_icosphere


@pytest.fixture(scope="module")
def hierarchy42():
    sphere = make_icosphere(1.0, 1)
    return build_sampling_hierarchy(sphere.topology, sphere.positions, 2, 2)


def small_config(**overrides):
    defaults = dict(
        latent_dim=4,
        encoder_features=(6, 8),
        sampling_factor=2,
        cheb_order=3,
        flow_steps=2,
        n_covariates=3,
        conditional=True,
        scaler_hidden=8,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture()
def model42(hierarchy42):
    torch.manual_seed(0)
    return CvaeNfModel(small_config(), hierarchy42)


def random_lap(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    lap = (a + a.T) / 2
    return torch.from_numpy(lap).float()


class TestModelConfig:
    def test_round_trip(self):
        config = small_config()
        again = ModelConfig.from_dict(config.to_dict())
        assert again == config
        assert isinstance(again.encoder_features, tuple)

    def test_decoder_features_reversed(self):
        config = small_config(encoder_features=(4, 8, 16))
        assert config.decoder_features == (16, 8, 4)
        assert config.n_blocks == 3

    def test_invalid_latent_dim(self):
        with pytest.raises(ValueError):
            small_config(latent_dim=0)

    def test_empty_features(self):
        with pytest.raises(ValueError):
            small_config(encoder_features=())


class TestChebConv:
    def test_order_one_is_pointwise_linear(self):
        torch.manual_seed(1)
        conv = ChebConv(3, 5, order=1)
        x = torch.randn(2, 7, 3)
        lap = random_lap(7, 0)
        out = conv(x, lap)
        expected = torch.einsum("bnf,fg->bng", x, conv.weight[0]) + conv.bias
        assert torch.allclose(out, expected, atol=1e-6)

    def test_order_three_matches_dense_polynomial(self):
        torch.manual_seed(2)
        conv = ChebConv(2, 4, order=3)
        x = torch.randn(1, 6, 2)
        lap = random_lap(6, 1)
        # Chebyshev polynomials of the Laplacian applied explicitly
        t0 = torch.eye(6)
        t1 = lap
        t2 = 2.0 * lap @ lap - t0
        expected = conv.bias.clone()
        expected = (
            torch.einsum("nm,bmf,fg->bng", t0, x, conv.weight[0])
            + torch.einsum("nm,bmf,fg->bng", t1, x, conv.weight[1])
            + torch.einsum("nm,bmf,fg->bng", t2, x, conv.weight[2])
            + conv.bias
        )
        assert torch.allclose(conv(x, lap), expected, atol=1e-5)

    def test_invalid_order(self):
        with pytest.raises(ValueError):
            ChebConv(2, 2, order=0)

    def test_locality(self):
        # order-K filter output at vertex i depends only on K-1 hop neighbours
        torch.manual_seed(3)
        conv = ChebConv(1, 1, order=2)
        n = 8
        lap = torch.zeros(n, n)
        for i in range(n - 1):  # path graph
            lap[i, i + 1] = lap[i + 1, i] = -0.5
        lap += torch.eye(n)
        x = torch.zeros(1, n, 1)
        x[0, 0, 0] = 1.0
        out = conv(x, lap)
        baseline = conv(torch.zeros(1, n, 1), lap)
        changed = (out - baseline).abs().squeeze() > 1e-9
        assert changed[:2].any()
        assert not changed[2:].any()


class TestResidualBlock:
    def test_output_shape(self):
        block = ResidualChebBlock(3, 6, order=2)
        out = block(torch.randn(2, 5, 3), random_lap(5, 2))
        assert out.shape == (2, 5, 6)

    def test_skip_is_identity_when_channels_match(self):
        block = ResidualChebBlock(4, 4, order=2)
        assert isinstance(block.skip, torch.nn.Identity)

    def test_skip_is_linear_when_channels_differ(self):
        block = ResidualChebBlock(3, 4, order=2)
        assert isinstance(block.skip, torch.nn.Linear)

    def test_residual_path_contributes(self):
        torch.manual_seed(4)
        block = ResidualChebBlock(4, 4, order=2).eval()
        x = torch.randn(1, 5, 4)
        lap = random_lap(5, 3)
        h = torch.nn.functional.elu(block._bn(block.bn1, block.conv1(x, lap)))
        h = torch.nn.functional.elu(block._bn(block.bn2, block.conv2(h, lap)))
        assert torch.allclose(block(x, lap), h + x, atol=1e-6)


class TestCovariateScaler:
    def test_zero_init_is_instance_normalization(self):
        torch.manual_seed(5)
        scaler = CovariateScaler(3, 4, hidden=8)
        h = torch.randn(2, 9, 4)
        c = torch.randn(2, 3)
        out = scaler(h, c)
        mean = h.mean(dim=1, keepdim=True)
        std = h.std(dim=1, keepdim=True, unbiased=False)
        assert torch.allclose(out, (h - mean) / (std + 1e-5), atol=1e-6)
        assert out.mean(dim=1).abs().max() < 1e-5

    def test_conditioning_changes_output_after_perturbation(self):
        torch.manual_seed(6)
        scaler = CovariateScaler(3, 4, hidden=8)
        with torch.no_grad():
            scaler.net[-1].weight.normal_(0, 0.5)
        h = torch.randn(1, 9, 4)
        out_a = scaler(h, torch.ones(1, 3))
        out_b = scaler(h, -torch.ones(1, 3))
        assert (out_a - out_b).abs().max() > 1e-3


class TestSamplingOperators:
    def test_down_matches_sparse_matrix(self, model42, hierarchy42):
        x = torch.randn(2, hierarchy42.vertex_counts()[0], 5)
        got = model42._down(x, 0).numpy()
        expected = np.stack([hierarchy42.downs[0] @ xi for xi in x.numpy()])
        assert np.abs(got - expected).max() < 1e-6

    def test_up_matches_sparse_matrix(self, model42, hierarchy42):
        x = torch.randn(2, hierarchy42.vertex_counts()[1], 5)
        got = model42._up(x, 0).numpy()
        expected = np.stack([hierarchy42.ups[0] @ xi for xi in x.numpy()])
        assert np.abs(got - expected).max() < 1e-5


class TestCvaeNfModel:
    def test_too_shallow_hierarchy_rejected(self, hierarchy42):
        with pytest.raises(ValueError, match="levels"):
            CvaeNfModel(small_config(encoder_features=(4, 4, 4)), hierarchy42)

    def test_encode_shapes(self, model42, hierarchy42):
        x = torch.randn(3, hierarchy42.vertex_counts()[0], 3)
        mu, log_sigma = model42.encode(x, torch.randn(3, 3))
        assert mu.shape == (3, 4)
        assert log_sigma.shape == (3, 4)
        assert log_sigma.abs().max() <= 10.0

    def test_wrong_vertex_count(self, model42):
        with pytest.raises(MeshError, match="vertices"):
            model42.encode(torch.randn(1, 30, 3), torch.randn(1, 3))

    def test_conditional_requires_covariates(self, model42, hierarchy42):
        x = torch.randn(1, hierarchy42.vertex_counts()[0], 3)
        with pytest.raises(ValueError, match="covariates"):
            model42.encode(x)

    def test_covariate_shape_checked(self, model42, hierarchy42):
        x = torch.randn(2, hierarchy42.vertex_counts()[0], 3)
        with pytest.raises(ValueError, match="shape"):
            model42.encode(x, torch.randn(2, 5))

    def test_decode_shape(self, model42, hierarchy42):
        out = model42.decode(torch.randn(2, 4), torch.randn(2, 3))
        assert out.shape == (2, hierarchy42.vertex_counts()[0], 3)

    def test_forward_contract(self, model42, hierarchy42):
        model42.eval()
        n = hierarchy42.vertex_counts()[0]
        x = torch.randn(2, n, 3)
        c = torch.randn(2, 3)
        recon, z0, z_final, sum_log_det, mu, log_sigma = model42(x, c)
        assert recon.shape == (2, n, 3)
        assert z0.shape == z_final.shape == mu.shape == (2, 4)
        assert sum_log_det.shape == (2,)

    def test_zero_noise_gives_posterior_mean(self, model42, hierarchy42):
        model42.eval()
        x = torch.randn(2, hierarchy42.vertex_counts()[0], 3)
        c = torch.randn(2, 3)
        _, z0, _, _, mu, _ = model42(x, c, noise=torch.zeros(2, 4))
        assert torch.allclose(z0, mu)

    def test_flow_ablation_identity(self, hierarchy42):
        torch.manual_seed(7)
        model = CvaeNfModel(small_config(flow_steps=0), hierarchy42).eval()
        assert model.flows is None
        x = torch.randn(2, hierarchy42.vertex_counts()[0], 3)
        c = torch.randn(2, 3)
        _, z0, z_final, sum_log_det, _, _ = model(x, c)
        assert torch.equal(z0, z_final)
        assert torch.equal(sum_log_det, torch.zeros(2))

    def test_fresh_flows_near_identity(self, model42, hierarchy42):
        model42.eval()
        x = torch.randn(2, hierarchy42.vertex_counts()[0], 3)
        c = torch.randn(2, 3)
        _, z0, z_final, sum_log_det, _, _ = model42(x, c)
        assert (z_final - z0).abs().max() < 0.05
        assert sum_log_det.abs().max() < 0.05

    def test_unconditional_ignores_covariates(self, hierarchy42):
        torch.manual_seed(8)
        model = CvaeNfModel(small_config(conditional=False), hierarchy42).eval()
        x = torch.randn(1, hierarchy42.vertex_counts()[0], 3)
        mu_a, _ = model.encode(x)
        mu_b, _ = model.encode(x, torch.randn(1, 3))
        assert torch.equal(mu_a, mu_b)

    def test_all_parameters_receive_gradients(self, model42, hierarchy42):
        x = torch.randn(4, hierarchy42.vertex_counts()[0], 3)
        c = torch.randn(4, 3)
        recon, z0, z_final, sum_log_det, mu, log_sigma = model42(x, c)
        loss = (
            ((x - recon) ** 2).sum()
            + (mu**2 + log_sigma**2).sum()
            + sum_log_det.sum()
        )
        loss.backward()
        missing = [
            name
            for name, p in model42.named_parameters()
            if p.grad is None or not torch.isfinite(p.grad).all()
        ]
        assert missing == []


class TestSamplePopulation:
    def test_untrained_raises(self, model42):
        with pytest.raises(RuntimeError, match="trained"):
            sample_population(model42, np.zeros((2, 3)), rng=0)

    def test_samples_match_covariate_rows(self, model42, hierarchy42):
        model42.trained = True
        meshes = sample_population(model42, np.zeros((3, 3)), rng=0)
        assert len(meshes) == 3
        for mesh in meshes:
            assert mesh.topology == hierarchy42.topologies[0]

    def test_deterministic_given_seed(self, model42):
        model42.trained = True
        a = sample_population(model42, np.zeros((2, 3)), rng=5)
        b = sample_population(model42, np.zeros((2, 3)), rng=5)
        for ma, mb in zip(a, b):
            assert np.array_equal(ma.positions, mb.positions)

    def test_unconditional_needs_n_samples(self, hierarchy42):
        model = CvaeNfModel(small_config(conditional=False), hierarchy42)
        model.trained = True
        with pytest.raises(ValueError, match="n_samples"):
            sample_population(model, None, rng=0)
        meshes = sample_population(model, None, rng=0, n_samples=2)
        assert len(meshes) == 2


class TestCheckpoint:
    def test_round_trip_preserves_outputs(self, tmp_path, model42, hierarchy42):
        model42.trained = True
        save_checkpoint(
            model42,
            tmp_path / "ckpt",
            covariate_schema=["a", "b", "c"],
            covariate_mean=np.zeros(3),
            covariate_std=np.ones(3),
            epoch=7,
            extra={"note": 1},
        )
        loaded, meta = load_checkpoint(tmp_path / "ckpt")
        assert meta["epoch"] == 7
        assert meta["covariate_schema"] == ["a", "b", "c"]
        assert meta["note"] == 1
        assert loaded.trained
        assert loaded.config == model42.config
        model42.eval()
        x = torch.randn(2, hierarchy42.vertex_counts()[0], 3)
        c = torch.randn(2, 3)
        with torch.no_grad():
            mu_a, ls_a = model42.encode(x, c)
            mu_b, ls_b = loaded.encode(x, c)
            dec_a = model42.decode(mu_a, c)
            dec_b = loaded.decode(mu_b, c)
        assert torch.allclose(mu_a, mu_b, atol=1e-6)
        assert torch.allclose(ls_a, ls_b, atol=1e-6)
        assert torch.allclose(dec_a, dec_b, atol=1e-6)
