"""Sequence VAE mapping mixed-type ``(B, T, F)`` windows to ``(B, T, F)`` latents.

Encoder: per-column lookup embeddings for discrete features, sinusoidal
frequency embeddings for continuous ones, an MLP back to ``F`` channels, a
conv/transformer block mixing features, and two LSTMs over time producing the
mean and log-variance. Decoder: MLP block plus one affine head per data type.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .preprocessing import TableSchema

logger = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Non-finite loss or activations during training."""


@dataclass(frozen=True)
class FeatureLayout:
    """Column layout of the processed array: ``[binary | categorical | continuous]``."""

    n_bin: int
    cat_cards: tuple[int, ...]
    n_cont: int

    @classmethod
    def from_schema(cls, schema: TableSchema) -> "FeatureLayout":
        return cls(
            n_bin=len(schema.binary),
            cat_cards=tuple(f.cardinality for f in schema.categorical),
            n_cont=len(schema.continuous),
        )

    @property
    def n_cat(self) -> int:
        return len(self.cat_cards)

    @property
    def m(self) -> int:
        return self.n_bin + self.n_cat

    @property
    def F(self) -> int:
        return self.m + self.n_cont

    @property
    def disc_cards(self) -> tuple[int, ...]:
        return (2,) * self.n_bin + self.cat_cards


@dataclass
class EncoderConfig:
    d: int = 128
    cont_embed_width: int = 16
    channels: int = 64
    attn_heads: int = 8
    attn_layers: int = 1
    attn_ff_width: int = 64
    rnn_hidden: int = 200
    rnn_layers: int = 1
    mlp_hidden: int = 128
    decoder_hidden: int = 128
    # ablation switches
    sinusoidal_embedding: bool = True
    feature_mixer: bool = True


@dataclass
class LatentStats:
    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass
class BetaSchedule:
    beta: float = 0.1
    beta_max: float = 0.1
    beta_min: float = 1e-5
    factor: float = 0.7
    patience: int = 100
    rel_tol: float = 1e-4
    best: float = math.inf  # best reconstruction loss since the last decay
    wait: int = 0  # epochs without improvement since the last decay

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if not self.beta_min <= self.beta <= self.beta_max:
            raise ValueError("beta must lie in [beta_min, beta_max]")


def update_beta(schedule: BetaSchedule, recons: float) -> BetaSchedule:
    """Advance the schedule by one epoch's reconstruction loss.

    An epoch improves when it beats the best loss since the last decay by more
    than ``rel_tol`` (relative). After ``patience`` epochs without improvement
    beta is multiplied by ``factor`` (floored at ``beta_min``) and the stall
    tracking restarts.
    """
    if schedule.best == math.inf or recons < schedule.best - schedule.rel_tol * abs(schedule.best):
        return replace(schedule, best=recons, wait=0)
    if schedule.wait + 1 >= schedule.patience:
        return replace(
            schedule,
            beta=max(schedule.beta * schedule.factor, schedule.beta_min),
            best=math.inf,
            wait=0,
        )
    return replace(schedule, wait=schedule.wait + 1)


def frequency_features(nu: torch.Tensor, n_freq: int = 8) -> torch.Tensor:
    """``[sin(2^k pi nu), cos(2^k pi nu)]`` for ``k < n_freq``, interleaved."""
    scales = (2.0 ** torch.arange(n_freq, dtype=nu.dtype, device=nu.device)) * math.pi
    angle = nu.unsqueeze(-1) * scales
    return torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1).flatten(-2)


class MLPBlock(nn.Sequential):
    """Linear -> ReLU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class DiscreteEmbedding(nn.Module):
    """One lookup table per discrete column, so equal codes in different columns differ."""

    def __init__(self, cards: Sequence[int], d: int):
        super().__init__()
        self.cards = tuple(cards)
        self.tables = nn.ModuleList(nn.Embedding(k, d) for k in self.cards)

    def forward(self, x_disc: torch.Tensor) -> torch.Tensor:
        idx = x_disc.long()
        out = []
        for j, (table, k) in enumerate(zip(self.tables, self.cards)):
            col = idx[..., j]
            if col.numel() and (col.min() < 0 or col.max() >= k):
                raise ValueError(f"discrete column {j}: index outside 0..{k - 1}")
            out.append(table(col))
        return torch.stack(out, dim=-2)


class ContinuousEmbedding(nn.Module):
    """Per-column Linear -> SiLU -> Linear on 16 frequency features of each scalar.

    With ``sinusoidal=False`` the scalar itself is fed through a per-column
    affine map instead (ablation).
    """

    def __init__(self, n_cont: int, width: int, sinusoidal: bool = True, n_freq: int = 8):
        super().__init__()
        self.sinusoidal = sinusoidal
        self.n_freq = n_freq
        d_in = 2 * n_freq if sinusoidal else 1
        self.w1 = nn.Parameter(torch.empty(n_cont, d_in, width))
        self.b1 = nn.Parameter(torch.zeros(n_cont, width))
        weights = [self.w1]
        if sinusoidal:
            self.w2 = nn.Parameter(torch.empty(n_cont, width, width))
            self.b2 = nn.Parameter(torch.zeros(n_cont, width))
            weights.append(self.w2)
        for w in weights:
            bound = 1.0 / math.sqrt(w.shape[1])
            nn.init.uniform_(w, -bound, bound)

    def forward(self, nu: torch.Tensor) -> torch.Tensor:
        if not self.sinusoidal:
            return torch.einsum("...ci,ciw->...cw", nu.unsqueeze(-1), self.w1) + self.b1
        feats = frequency_features(nu, self.n_freq)
        h = F.silu(torch.einsum("...ci,ciw->...cw", feats, self.w1) + self.b1)
        return torch.einsum("...ci,ciw->...cw", h, self.w2) + self.b2


class FeatureMixer(nn.Module):
    """Conv1d to ``C`` channels, transformer over the feature axis, conv back to 1 channel."""

    def __init__(self, channels: int, heads: int, layers: int, ff_width: int):
        super().__init__()
        self.conv_in = nn.Conv1d(1, channels, kernel_size=1)
        layer = nn.TransformerEncoderLayer(
            d_model=channels,
            nhead=heads,
            dim_feedforward=ff_width,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        self.conv_out = nn.Conv1d(channels, 1, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, Fdim = x.shape
        h = self.conv_in(x.reshape(B, 1, T * Fdim))  # (B, C, T*F)
        C = h.shape[1]
        h = h.reshape(B, C, T, Fdim).permute(0, 2, 3, 1).reshape(B * T, Fdim, C)
        h = self.transformer(h)  # attention across the F tokens of each row
        h = h.reshape(B, T, Fdim, C).permute(0, 3, 1, 2).reshape(B, C, T * Fdim)
        return self.conv_out(h).reshape(B, T, Fdim)


class Encoder(nn.Module):
    def __init__(self, layout: FeatureLayout, cfg: EncoderConfig):
        super().__init__()
        self.layout = layout
        self.cfg = cfg
        Fdim = layout.F
        self.disc_embed = DiscreteEmbedding(layout.disc_cards, cfg.d) if layout.m else None
        self.cont_embed = (
            ContinuousEmbedding(layout.n_cont, cfg.cont_embed_width, cfg.sinusoidal_embedding)
            if layout.n_cont
            else None
        )
        width = layout.m * cfg.d + layout.n_cont * cfg.cont_embed_width
        self.mlp = MLPBlock(width, cfg.mlp_hidden, Fdim)
        self.mixer = (
            FeatureMixer(cfg.channels, cfg.attn_heads, cfg.attn_layers, cfg.attn_ff_width)
            if cfg.feature_mixer
            else None
        )
        self.rnn_mu = nn.LSTM(Fdim, cfg.rnn_hidden, cfg.rnn_layers, batch_first=True)
        self.rnn_logvar = nn.LSTM(Fdim, cfg.rnn_hidden, cfg.rnn_layers, batch_first=True)
        self.fc_mu = nn.Linear(cfg.rnn_hidden, Fdim)
        self.fc_logvar = nn.Linear(cfg.rnn_hidden, Fdim)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        parts = []
        m = self.layout.m
        if self.disc_embed is not None:
            parts.append(self.disc_embed(x[..., :m]).flatten(-2))
        if self.cont_embed is not None:
            parts.append(self.cont_embed(x[..., m:]).flatten(-2))
        return torch.cat(parts, dim=-1)

    def forward(self, x: torch.Tensor) -> LatentStats:
        h = self.mlp(self.embed(x))
        if self.mixer is not None:
            h = self.mixer(h)
        mu = self.fc_mu(self.rnn_mu(h)[0])
        log_var = self.fc_logvar(self.rnn_logvar(h)[0])
        if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
            raise TrainingDivergence("encoder produced non-finite activations")
        return LatentStats(mu, log_var)


class Decoder(nn.Module):
    def __init__(self, layout: FeatureLayout, cfg: EncoderConfig):
        super().__init__()
        self.layout = layout
        self.mlp = MLPBlock(layout.F, cfg.decoder_hidden, cfg.decoder_hidden)
        widths = {"cont": layout.n_cont, "bin": layout.n_bin, "cat": sum(layout.cat_cards)}
        self.heads = nn.ModuleDict(
            {name: nn.Linear(cfg.decoder_hidden, w) for name, w in widths.items() if w}
        )

    def forward(self, z: torch.Tensor) -> dict[str, torch.Tensor]:
        h = self.mlp(z)
        out = {}
        for name in ("cont", "bin", "cat"):
            if name in self.heads:
                out[name] = self.heads[name](h)
            else:
                out[name] = h.new_zeros(*h.shape[:-1], 0)
        out["cont"] = torch.sigmoid(out["cont"])
        return out


class VAE(nn.Module):
    def __init__(self, layout: FeatureLayout, cfg: Optional[EncoderConfig] = None):
        super().__init__()
        self.layout = layout
        self.cfg = cfg or EncoderConfig()
        self.encoder = Encoder(layout, self.cfg)
        self.decoder = Decoder(layout, self.cfg)

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None):
        stats = self.encoder(x)
        z = reparameterize(stats, generator)
        return self.decoder(z), stats


def reparameterize(
    stats: LatentStats, generator: Optional[torch.Generator] = None, seed: Optional[int] = None
) -> torch.Tensor:
    """``z = mu + eps * exp(log_var / 2)`` with ``eps`` from a seeded generator."""
    if generator is None and seed is not None:
        generator = torch.Generator(device=stats.mu.device).manual_seed(seed)
    eps = torch.randn(
        stats.mu.shape, generator=generator, dtype=stats.mu.dtype, device=stats.mu.device
    )
    return stats.mu + eps * torch.exp(0.5 * stats.log_var)


def hard_decode(heads: dict[str, torch.Tensor], layout: FeatureLayout) -> torch.Tensor:
    """Argmax per categorical block, logit sign for binary, continuous as-is."""
    parts = [(heads["bin"] > 0).to(heads["cont"].dtype)]
    offset = 0
    for k in layout.cat_cards:
        block = heads["cat"][..., offset : offset + k]
        parts.append(block.argmax(dim=-1, keepdim=True).to(heads["cont"].dtype))
        offset += k
    parts.append(heads["cont"])
    return torch.cat(parts, dim=-1)


def reconstruction_loss(
    x: torch.Tensor, heads: dict[str, torch.Tensor], layout: FeatureLayout
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """MSE (continuous) + BCE (binary) + CE (categorical), each a mean over its entries."""
    zero = x.new_zeros(())
    nb, m = layout.n_bin, layout.m
    cont = F.mse_loss(heads["cont"], x[..., m:]) if layout.n_cont else zero
    binary = (
        F.binary_cross_entropy_with_logits(heads["bin"], x[..., :nb]) if nb else zero
    )
    cat = zero
    if layout.n_cat:
        offset, terms = 0, []
        for j, k in enumerate(layout.cat_cards):
            logits = heads["cat"][..., offset : offset + k].reshape(-1, k)
            target = x[..., nb + j].reshape(-1).long()
            terms.append(F.cross_entropy(logits, target))
            offset += k
        cat = torch.stack(terms).mean()
    total = cont + binary + cat
    return total, {"cont": cont, "bin": binary, "cat": cat}


def kl_divergence(stats: LatentStats, reduction: str = "sum") -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) against the standard normal prior.

    ``"sum"`` sums over each window's latent entries and averages over the
    batch. ``"mean"`` averages over every entry, which puts the term on the
    same per-entry scale as the reconstruction losses.
    """
    kl = 0.5 * (stats.mu.pow(2) + stats.log_var.exp() - 1.0 - stats.log_var)
    if reduction == "mean":
        return kl.mean()
    if reduction != "sum":
        raise ValueError(f"unknown KL reduction {reduction!r}")
    per_window = kl.reshape(kl.shape[0], -1).sum(dim=1) if kl.dim() > 2 else kl.sum().reshape(1)
    return per_window.mean()


def vae_loss(
    x, heads, stats: LatentStats, beta: float, layout: FeatureLayout, kl_reduction: str = "sum"
) -> torch.Tensor:
    recons, _ = reconstruction_loss(x, heads, layout)
    return recons + beta * kl_divergence(stats, kl_reduction)


@dataclass
class VAETrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    kl_reduction: str = "sum"
    log_every: int = 100


@dataclass
class VAEHistory:
    recons: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"recons": self.recons, "kl": self.kl, "beta": self.beta}


def sample_minibatch(n: int, batch_size: int, generator: torch.Generator) -> torch.Tensor:
    """Indices of one epoch's minibatch; the whole set when ``batch_size >= n``."""
    if batch_size >= n:
        return torch.arange(n)
    return torch.randperm(n, generator=generator)[:batch_size]


def train_vae(
    x: np.ndarray | torch.Tensor,
    layout: FeatureLayout,
    enc_cfg: Optional[EncoderConfig] = None,
    train_cfg: Optional[VAETrainConfig] = None,
    model: Optional[VAE] = None,
) -> tuple[VAE, VAEHistory]:
    """Fit the VAE with Adam.

    Each epoch is one gradient step on a random minibatch of ``batch_size``
    windows (full batch when ``batch_size >= B``). Returns the model in eval
    mode and the per-epoch reconstruction loss, KL term and beta.
    """
    train_cfg = train_cfg or VAETrainConfig()
    torch.manual_seed(train_cfg.seed)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    x = torch.as_tensor(np.asarray(x), dtype=torch.get_default_dtype())
    if model is None:
        model = VAE(layout, enc_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    schedule = train_cfg.beta
    history = VAEHistory()
    model.train()
    for epoch in range(train_cfg.epochs):
        xb = x[sample_minibatch(len(x), train_cfg.batch_size, gen)]
        heads, stats = model(xb, gen)
        recons, _ = reconstruction_loss(xb, heads, layout)
        kl = kl_divergence(stats, train_cfg.kl_reduction)
        loss = recons + schedule.beta * kl
        if not torch.isfinite(loss):
            raise TrainingDivergence(
                f"non-finite VAE loss at epoch {epoch}: recons={recons.item()}, kl={kl.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.recons.append(recons.item())
        history.kl.append(kl.item())
        history.beta.append(schedule.beta)
        schedule = update_beta(schedule, history.recons[-1])
        if train_cfg.log_every and (epoch + 1) % train_cfg.log_every == 0:
            logger.info(
                "vae epoch %d recons=%.5f kl=%.3f beta=%.2e",
                epoch + 1,
                history.recons[-1],
                history.kl[-1],
                history.beta[-1],
            )
    model.eval()
    return model, history


@torch.no_grad()
def encode_latents(model: VAE, x: np.ndarray | torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """Posterior means for every window, used as diffusion training data."""
    model.eval()
    x = torch.as_tensor(np.asarray(x), dtype=torch.get_default_dtype())
    return torch.cat([model.encoder(x[i : i + batch_size]).mu for i in range(0, len(x), batch_size)])


@torch.no_grad()
def decode_latents(model: VAE, z: torch.Tensor) -> np.ndarray:
    model.eval()
    return hard_decode(model.decoder(z), model.layout).cpu().numpy()
