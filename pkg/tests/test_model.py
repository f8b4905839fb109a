"""Denoiser architecture tests: shapes, variants, determinism, gradients."""

import numpy as np
import pytest
import torch

from lobsim.data import fit_norm_stats
from lobsim.diffusion import cosine_schedule
from lobsim.model import (
    ModelBundle,
    ModelConfig,
    OrderFlowDenoiser,
    _lstm_param_count,
    _match_lstm_hidden,
    _transformer_param_count,
    sinusoidal_embedding,
)

N = 8  # miniature window


def mini_config(**kw) -> ModelConfig:
    base = dict(layers=2, attention_heads=2, aug_dim=8, dropout=0.0, window=N, lob_levels=2)
    base.update(kw)
    return ModelConfig(**base)


def mini_batch(cfg: ModelConfig, batch=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    cond_f = torch.randn((batch, cfg.window - 1, 5), generator=g)
    cond_t = torch.randint(0, 3, (batch, cfg.window - 1), generator=g)
    lob = torch.randn((batch, cfg.window, cfg.lob_dim), generator=g)
    x_t = torch.randn((batch, 1, cfg.order_dim), generator=g)
    t = torch.full((batch,), 7)
    return cond_f, cond_t, lob, x_t, t


class TestSinusoidalEmbedding:
    def test_shape_and_range(self):
        pos = torch.arange(10, dtype=torch.float32)
        emb = sinusoidal_embedding(pos, 16)
        assert emb.shape == (10, 16)
        assert torch.all(emb.abs() <= 1.0)

    def test_odd_dim_padded(self):
        emb = sinusoidal_embedding(torch.arange(4, dtype=torch.float32), 7)
        assert emb.shape == (4, 7)
        assert torch.all(emb[:, -1] == 0)

    def test_positions_distinguishable(self):
        emb = sinusoidal_embedding(torch.arange(32, dtype=torch.float32), 16)
        dists = torch.cdist(emb.float(), emb.float())
        assert torch.all(dists + torch.eye(32) > 1e-3)


VARIANTS = [
    {},
    {"backbone": "lstm"},
    {"conditioning": "cross_attention"},
    {"use_lob": False},
    {"use_augmentation": False},
]


class TestForward:
    @pytest.mark.parametrize("kw", VARIANTS)
    def test_output_shapes(self, kw):
        cfg = mini_config(**kw)
        model = OrderFlowDenoiser(cfg).eval()
        cond_f, cond_t, lob, x_t, t = mini_batch(cfg)
        eps_hat, v = model(cond_f, cond_t, None if not cfg.use_lob else lob, x_t, t)
        assert eps_hat.shape == (3, 1, cfg.order_dim)
        assert v.shape == (3, 1, cfg.order_dim)
        assert torch.all((v >= 0) & (v <= 1))

    def test_eval_determinism(self):
        cfg = mini_config()
        torch.manual_seed(0)
        model = OrderFlowDenoiser(cfg).eval()
        batch = mini_batch(cfg)
        with torch.no_grad():
            a, _ = model(*batch)
            b, _ = model(*batch)
        assert torch.equal(a, b)

    def test_window_mismatch_raises(self):
        cfg = mini_config()
        model = OrderFlowDenoiser(cfg).eval()
        cond_f, cond_t, lob, x_t, t = mini_batch(cfg)
        with pytest.raises(ValueError):
            model(cond_f[:, :-1], cond_t[:, :-1], lob, x_t, t)
        with pytest.raises(ValueError):
            model(cond_f, cond_t, lob[:, :-1], x_t, t)

    def test_type_embedding_starts_orthogonal(self):
        model = OrderFlowDenoiser(mini_config())
        assert torch.equal(model.type_embedding.weight.detach(), torch.eye(3))

    def test_position_sensitivity(self):
        """Shuffling the conditioning history must change the prediction."""
        cfg = mini_config()
        torch.manual_seed(1)
        model = OrderFlowDenoiser(cfg).eval()
        cond_f, cond_t, lob, x_t, t = mini_batch(cfg, batch=1)
        perm = torch.randperm(cfg.window - 1)
        with torch.no_grad():
            a, _ = model(cond_f, cond_t, lob, x_t, t)
            b, _ = model(cond_f[:, perm], cond_t[:, perm], lob, x_t, t)
        assert not torch.allclose(a, b)

    def test_diffusion_step_sensitivity(self):
        cfg = mini_config()
        torch.manual_seed(2)
        model = OrderFlowDenoiser(cfg).eval()
        cond_f, cond_t, lob, x_t, t = mini_batch(cfg, batch=1)
        with torch.no_grad():
            a, _ = model(cond_f, cond_t, lob, x_t, torch.tensor([3]))
            b, _ = model(cond_f, cond_t, lob, x_t, torch.tensor([90]))
        assert not torch.allclose(a, b)

    def test_lob_conditioning_matters(self):
        cfg = mini_config()
        torch.manual_seed(3)
        model = OrderFlowDenoiser(cfg).eval()
        cond_f, cond_t, lob, x_t, t = mini_batch(cfg, batch=1)
        with torch.no_grad():
            a, _ = model(cond_f, cond_t, lob, x_t, t)
            b, _ = model(cond_f, cond_t, lob + 1.0, x_t, t)
        assert not torch.allclose(a, b)

    @pytest.mark.parametrize("kw", VARIANTS)
    def test_all_parameters_receive_gradient(self, kw):
        cfg = mini_config(**kw)
        torch.manual_seed(4)
        model = OrderFlowDenoiser(cfg)
        cond_f, cond_t, lob, x_t, t = mini_batch(cfg)
        eps_hat, v = model(cond_f, cond_t, None if not cfg.use_lob else lob, x_t, t)
        loss = eps_hat.square().mean() + v.mean()
        loss.backward()
        for name, p in model.named_parameters():
            if not p.requires_grad:  # the type-embedding table is frozen
                continue
            assert p.grad is not None, name
            assert torch.isfinite(p.grad).all(), name


class TestParameterMatching:
    def test_lstm_within_ten_percent_of_transformer(self):
        for cfg in (mini_config(), ModelConfig(layers=8, aug_dim=64)):
            dim, ff = cfg.model_dim, cfg.ff_mult * cfg.model_dim
            target = _transformer_param_count(dim, ff, cfg.layers)
            hidden = _match_lstm_hidden(dim, ff, cfg)
            got = _lstm_param_count(dim, hidden)
            assert abs(got - target) / target < 0.10

    def test_analytic_counts_match_torch(self):
        cfg = mini_config()
        dim, ff = cfg.model_dim, cfg.ff_mult * cfg.model_dim
        t_model = OrderFlowDenoiser(cfg)
        torch_count = sum(p.numel() for p in t_model.encoder.parameters())
        assert torch_count == _transformer_param_count(dim, ff, cfg.layers)
        l_model = OrderFlowDenoiser(mini_config(backbone="lstm"))
        lstm_count = sum(p.numel() for p in l_model.encoder.parameters())
        lstm_count += sum(p.numel() for p in l_model.lstm_out.parameters())
        hidden = l_model.encoder.hidden_size
        assert lstm_count == _lstm_param_count(dim, hidden)


class TestBundle:
    def test_save_load_round_trip(self, tmp_path):
        cfg = mini_config()
        torch.manual_seed(5)
        model = OrderFlowDenoiser(cfg).eval()
        rng = np.random.default_rng(0)
        stats = fit_norm_stats(rng.normal(size=(30, 5)), rng.normal(size=(31, cfg.lob_dim)) + 2)
        bundle = ModelBundle(model, cfg, stats, cosine_schedule(100))
        p = tmp_path / "ckpt.pt"
        bundle.save(p)
        again = ModelBundle.load(p)
        assert again.config == cfg
        assert again.schedule.T == 100 and again.schedule.s == 0.008
        assert np.allclose(again.stats.order_scaler.mean_, stats.order_scaler.mean_)
        batch = mini_batch(cfg)
        with torch.no_grad():
            a, _ = model(*batch)
            b, _ = again.model(*batch)
        assert torch.equal(a, b)

    def test_version_check(self, tmp_path):
        p = tmp_path / "bad.pt"
        torch.save({"version": -1}, p)
        with pytest.raises(ValueError):
            ModelBundle.load(p)
