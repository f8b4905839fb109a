"""Denoising network for order generation: feature augmentation, sinusoidal
embeddings, a transformer-encoder backbone with epsilon/variance heads, and
the ablation/sensitivity variants (no LOB, no augmentation, LSTM backbone,
cross-attention conditioning).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .data import N_CONTINUOUS, NormStats
from .diffusion import NoiseSchedule, cosine_schedule

N_ORDER_TYPES = 3

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    layers: int = 8
    attention_heads: int = 2
    aug_dim: int = 64  # D; backbone width is 2D
    dropout: float = 0.1
    window: int = 256  # N
    lob_levels: int = 10
    type_embed_dim: int = 3  # E; order feature width K_o = 5 + E
    ff_mult: int = 4  # encoder feedforward inner width, in units of model width
    backbone: str = "transformer"  # or "lstm"
    conditioning: str = "concat"  # or "cross_attention"
    use_lob: bool = True
    use_augmentation: bool = True

    @property
    def order_dim(self) -> int:  # K_o
        return N_CONTINUOUS + self.type_embed_dim

    @property
    def lob_dim(self) -> int:  # K_l
        return 4 * self.lob_levels

    @property
    def model_dim(self) -> int:
        return 2 * self.aug_dim


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding; positions is any shape, output appends `dim`."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(positions.device)
    args = positions[..., None].double() * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class _AugmentBlock(nn.Module):
    """Two fully connected layers lifting a feature stream to width `out_dim`."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, out_dim), nn.GELU(), nn.Linear(out_dim, out_dim))

    def forward(self, x):
        return self.net(x)


class _PadProjection(nn.Module):
    """Parameter-free stand-in for augmentation: copy features, zero-pad the rest."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x):
        pad = x.new_zeros(*x.shape[:-1], self.out_dim - self.in_dim)
        return torch.cat([x, pad], dim=-1)


class _CrossAttentionLayer(nn.Module):
    """Orders attend only to LOB tokens and vice-versa (no self-attention).

    The readout uses the order stream only, so the final layer skips the
    LOB-stream update; those parameters would never receive gradient.
    """

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float, last: bool = False):
        super().__init__()
        self.attn_o = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ff_o = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))
        self.norm_o1 = nn.LayerNorm(dim)
        self.norm_o2 = nn.LayerNorm(dim)
        self.last = last
        if not last:
            self.attn_l = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
            self.ff_l = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))
            self.norm_l1 = nn.LayerNorm(dim)
            self.norm_l2 = nn.LayerNorm(dim)

    def forward(self, orders, lob):
        o = self.norm_o1(orders + self.attn_o(orders, lob, lob, need_weights=False)[0])
        o = self.norm_o2(o + self.ff_o(o))
        if self.last:
            return o, lob
        l = self.norm_l1(lob + self.attn_l(lob, orders, orders, need_weights=False)[0])
        l = self.norm_l2(l + self.ff_l(l))
        return o, l


class OrderFlowDenoiser(nn.Module):
    """Predicts the injected noise and the variance interpolation weight for the
    generation slot, conditioned on past orders and LOB snapshots."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.type_embedding = nn.Embedding(N_ORDER_TYPES, c.type_embed_dim)
        with torch.no_grad():
            self.type_embedding.weight.copy_(
                torch.eye(N_ORDER_TYPES, c.type_embed_dim)
            )
        # frozen: the table doubles as the diffusion target for the type block,
        # and a trainable target collapses (the loss shrinks the rows together
        # until nearest-row decoding degenerates)
        self.type_embedding.weight.requires_grad_(False)

        aug = _AugmentBlock if c.use_augmentation else _PadProjection
        if c.conditioning == "cross_attention" or not c.use_lob:
            # single-stream widths: each stream carries the full model width
            self.order_aug = aug(c.order_dim, c.model_dim)
            self.lob_aug = aug(c.lob_dim, c.model_dim) if c.use_lob else None
        else:
            self.order_aug = aug(c.order_dim, c.aug_dim)
            self.lob_aug = aug(c.lob_dim, c.aug_dim)

        dim = c.model_dim
        ff_dim = c.ff_mult * dim
        if c.conditioning == "cross_attention":
            self.layers = nn.ModuleList(
                _CrossAttentionLayer(
                    dim, c.attention_heads, ff_dim, c.dropout, last=(i == c.layers - 1)
                )
                for i in range(c.layers)
            )
            self.encoder = None
        elif c.backbone == "lstm":
            hidden = _match_lstm_hidden(dim, ff_dim, c)
            self.encoder = nn.LSTM(dim, hidden, num_layers=2, batch_first=True)
            self.lstm_out = nn.Linear(hidden, dim)
            self.layers = None
        elif c.backbone == "transformer":
            layer = nn.TransformerEncoderLayer(
                d_model=dim,
                nhead=c.attention_heads,
                dim_feedforward=ff_dim,
                dropout=c.dropout,
                activation="gelu",
                batch_first=True,
            )
            self.encoder = nn.TransformerEncoder(layer, num_layers=c.layers)
            self.layers = None
        else:
            raise ValueError(f"unknown backbone {c.backbone!r}")

        self.eps_head = nn.Sequential(
            nn.Linear(dim, c.aug_dim), nn.GELU(), nn.Linear(c.aug_dim, c.order_dim)
        )
        self.v_head = nn.Sequential(
            nn.Linear(dim, c.aug_dim), nn.GELU(), nn.Linear(c.aug_dim, c.order_dim)
        )

    def order_tokens(self, cond_features, cond_types, x_t):
        """Embed types, append the noised target along the sequence axis."""
        cond = torch.cat([cond_features, self.type_embedding(cond_types)], dim=-1)
        return torch.cat([cond, x_t], dim=1)

    def forward(self, cond_features, cond_types, lob, x_t, t):
        """cond_features: (B, N-1, 5); cond_types: (B, N-1); lob: (B, N, 4L);
        x_t: (B, 1, K_o); t: (B,) diffusion steps. Returns (eps_hat, v) of
        shape (B, 1, K_o) with v squashed into [0, 1]."""
        c = self.config
        orders = self.order_tokens(cond_features, cond_types, x_t)
        if orders.shape[1] != c.window or (c.use_lob and lob.shape[1] != c.window):
            raise ValueError(
                f"sequence length mismatch: orders {orders.shape}, lob {None if lob is None else lob.shape},"
                f" expected window {c.window}"
            )
        n = orders.shape[1]
        pos = torch.arange(n, device=orders.device, dtype=orders.dtype)

        if c.conditioning == "cross_attention":
            o = self.order_aug(orders)
            l = self.lob_aug(lob)
            dim = o.shape[-1]
            emb = sinusoidal_embedding(pos, dim).to(o.dtype)
            step = sinusoidal_embedding(t.to(o.dtype), dim).to(o.dtype)[:, None, :]
            o = o + emb + step
            l = l + emb + step
            for layer in self.layers:
                o, l = layer(o, l)
            h = o
        else:
            if c.use_lob:
                features = torch.cat([self.order_aug(orders), self.lob_aug(lob)], dim=-1)
            else:
                features = self.order_aug(orders)
            dim = features.shape[-1]
            emb = sinusoidal_embedding(pos, dim).to(features.dtype)
            step = sinusoidal_embedding(t.to(features.dtype), dim).to(features.dtype)[:, None, :]
            features = features + emb + step
            if isinstance(self.encoder, nn.LSTM):
                h = self.lstm_out(self.encoder(features)[0])
            else:
                h = self.encoder(features)

        slot = h[:, -1:, :]  # generation slot sits at the final position
        eps_hat = self.eps_head(slot)
        v = ((self.v_head(slot) + 1.0) / 2.0).clamp(0.0, 1.0)
        return eps_hat, v

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _transformer_param_count(dim: int, ff_dim: int, layers: int) -> int:
    # per encoder layer: QKV+out projections, two FF layers, two layer norms
    attn = 4 * (dim * dim + dim)
    ff = dim * ff_dim + ff_dim + ff_dim * dim + dim
    norms = 4 * dim
    return layers * (attn + ff + norms)


def _lstm_param_count(dim: int, hidden: int) -> int:
    l1 = 4 * (hidden * dim + hidden * hidden + 2 * hidden)
    l2 = 4 * (hidden * hidden + hidden * hidden + 2 * hidden)
    out = hidden * dim + dim
    return l1 + l2 + out


def _match_lstm_hidden(dim: int, ff_dim: int, config: ModelConfig) -> int:
    """Hidden width for the 2-layer LSTM variant matching the transformer
    backbone's parameter count within 10%."""
    target = _transformer_param_count(dim, ff_dim, config.layers)
    best, best_err = dim, float("inf")
    for hidden in range(4, 4096):
        err = abs(_lstm_param_count(dim, hidden) - target) / target
        if err < best_err:
            best, best_err = hidden, err
        if _lstm_param_count(dim, hidden) > 1.2 * target:
            break
    return best


@dataclass
class ModelBundle:
    """Everything needed to run a frozen model in simulation."""

    model: OrderFlowDenoiser
    config: ModelConfig
    stats: NormStats
    schedule: NoiseSchedule

    def save(self, path) -> None:
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "state_dict": self.model.state_dict(),
                "config": asdict(self.config),
                "stats": self.stats.to_json(),
                "schedule": self.schedule.settings(),
            },
            path,
        )

    @classmethod
    def load(cls, path) -> "ModelBundle":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
        config = ModelConfig(**blob["config"])
        model = OrderFlowDenoiser(config)
        model.load_state_dict(blob["state_dict"])
        model.eval()
        sched = blob["schedule"]
        return cls(model, config, NormStats.from_json(blob["stats"]), cosine_schedule(**sched))
