"""DDPM over latent ``(T, F)`` matrices with a bidirectional-LSTM noise predictor."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .preprocessing import cyclic_encode
from .vae import MLPBlock, TrainingDivergence, sample_minibatch

logger = logging.getLogger(__name__)

NULL_LABEL = -1  # unconditional class identifier


@dataclass
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def N(self) -> int:
        return len(self.beta)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return schedule_from_betas(np.asarray(data["beta"], dtype=np.float64))


def schedule_from_betas(beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 1:
        raise ValueError("need at least one diffusion step")
    if not np.all((beta > 0) & (beta < 1)):
        raise ValueError("betas must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def make_schedule(N: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``N`` steps (step ``n`` is stored at index ``n - 1``)."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, N))


def forward_perturb(
    z0: torch.Tensor,
    n: int | torch.Tensor,
    schedule: NoiseSchedule,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample ``z_n = sqrt(abar_n) z0 + sqrt(1 - abar_n) E`` entrywise.

    ``n`` is 1-based; a tensor of shape ``(B,)`` gives one step per window.
    """
    n_t = torch.as_tensor(n)
    if n_t.numel() and (n_t.min() < 1 or n_t.max() > schedule.N):
        raise ValueError(f"diffusion step outside 1..{schedule.N}")
    if noise is None:
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(seed)
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    abar = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype)[n_t.long() - 1]
    if abar.dim():
        abar = abar.reshape(-1, *([1] * (z0.dim() - 1)))
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise, noise


def positional_encode(value, width: int) -> torch.Tensor:
    """Transformer sinusoidal encoding: ``sin/cos(v / 10000^(2i/width))`` interleaved."""
    v = torch.as_tensor(value, dtype=torch.get_default_dtype())
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=v.dtype) * 2.0 / width)
    angle = v.unsqueeze(-1) * freqs
    pe = torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1).flatten(-2)
    if width % 2:
        pe = torch.cat([pe, torch.zeros(*pe.shape[:-1], 1, dtype=pe.dtype)], dim=-1)
    return pe


@dataclass
class NoisePredictorConfig:
    encoding_width: int = 200
    brnn_hidden: int = 200
    brnn_layers: int = 2
    mlp_hidden: int = 200
    label_vocab: int = 0  # number of entity labels; 0 means unconditional model
    p_uncond: float = 0.1
    guidance_omega: float = 3.0
    bidirectional: bool = True  # ablation switch
    use_timestamps: bool = True  # ablation switch
    n_years: int = 1
    # the cyclic features of hours, days and months span only ~0.15 rad, so they
    # are standardized with training statistics before the timestamp MLP
    standardize_timestamps: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")
        if self.guidance_omega < 0:
            raise ValueError("guidance_omega must be >= 0")

    @property
    def null_label(self) -> int:
        return NULL_LABEL


class NoisePredictor(nn.Module):
    """eps_theta(z_n, n, t, ts, lbl) -> (B, T, F).

    Encodings of the diffusion step (plus label embedding), normalized time,
    timestamps and the noisy latent are concatenated per row, mapped to ``F``
    channels by an MLP block, passed through a (bi)LSTM, layer norm and an
    affine head.
    """

    def __init__(self, F: int, cfg: Optional[NoisePredictorConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or NoisePredictorConfig()
        self.F = F
        w = cfg.encoding_width
        self.step_mlp = MLPBlock(w, w, w)
        self.time_mlp = MLPBlock(w, w, w)
        self.ts_mlp = MLPBlock(8, w, w)
        self.z_proj = nn.Linear(F, w)
        self.label_embed = nn.Embedding(cfg.label_vocab, w) if cfg.label_vocab else None
        self.label_mlp = MLPBlock(w, w, w) if cfg.label_vocab else None
        self.in_mlp = MLPBlock(4 * w, cfg.mlp_hidden, F)
        self.rnn = nn.LSTM(
            F,
            cfg.brnn_hidden,
            cfg.brnn_layers,
            batch_first=True,
            bidirectional=cfg.bidirectional,
        )
        out_width = cfg.brnn_hidden * (2 if cfg.bidirectional else 1)
        self.norm = nn.LayerNorm(out_width)
        self.head = nn.Linear(out_width, F)
        # flipped by train_diffusion; samplers refuse untrained weights
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))
        self.register_buffer("ts_mean", torch.zeros(8))
        self.register_buffer("ts_std", torch.ones(8))

    def fit_timestamp_scaling(self, ts: torch.Tensor) -> None:
        """Set the per-feature mean and std of the cyclic encodings of ``ts`` (..., 4)."""
        if not self.cfg.standardize_timestamps:
            return
        cyc = torch.as_tensor(cyclic_encode(np.asarray(ts).reshape(-1, 4), self.cfg.n_years))
        std = cyc.std(dim=0)
        self.ts_mean.copy_(cyc.mean(dim=0))
        self.ts_std.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))

    @property
    def conditional(self) -> bool:
        return self.label_embed is not None

    def forward(
        self,
        z_n: torch.Tensor,
        n: torch.Tensor,
        t: torch.Tensor,
        ts: torch.Tensor,
        lbl: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """``z_n`` (B,T,F); ``n`` (B,) 1-based steps; ``t`` (T,); ``ts`` (B,T,4); ``lbl`` (B,) or None.

        Windows whose label equals ``NULL_LABEL`` (or ``lbl=None``) take the
        unconditional path: no label embedding is added.
        """
        B, T, _ = z_n.shape
        w = self.cfg.encoding_width
        dtype = z_n.dtype
        step = self.step_mlp(positional_encode(n.to(dtype), w).to(dtype))  # (B, w)
        if lbl is not None and self.label_embed is not None:
            lbl = lbl.long()
            keep = (lbl != NULL_LABEL).to(dtype).unsqueeze(-1)
            if (lbl[lbl != NULL_LABEL] >= self.cfg.label_vocab).any():
                raise ValueError("entity label outside the trained vocabulary")
            emb = self.label_mlp(self.label_embed(lbl.clamp(min=0)))
            step = step + keep * emb
        time = self.time_mlp(positional_encode(t.to(dtype) * (T - 1), w).to(dtype))  # (T, w)
        if self.cfg.use_timestamps:
            cyc = torch.as_tensor(cyclic_encode(ts.cpu().numpy(), self.cfg.n_years), dtype=dtype)
            cyc = (cyc - self.ts_mean.to(dtype)) / self.ts_std.to(dtype)
        else:
            cyc = torch.zeros(B, T, 8, dtype=dtype)
        stamp = self.ts_mlp(cyc)  # (B, T, w)
        h = torch.cat(
            [
                step.unsqueeze(1).expand(B, T, w),
                time.unsqueeze(0).expand(B, T, w),
                stamp,
                self.z_proj(z_n),
            ],
            dim=-1,
        )
        h = self.rnn(self.in_mlp(h))[0]
        return self.head(self.norm(h))


def diffusion_loss(
    model: NoisePredictor,
    z0: torch.Tensor,
    t: torch.Tensor,
    ts: torch.Tensor,
    schedule: NoiseSchedule,
    lbl: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    seed: Optional[int] = None,
) -> torch.Tensor:
    """Monte-Carlo estimate of ``E ||eps_theta(z_n, n, ...) - E||^2`` per window.

    One step ``n ~ Uniform{1..N}`` and one noise draw per window; squared error
    is summed over the ``T x F`` entries and averaged over the batch.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    B = z0.shape[0]
    n = torch.randint(1, schedule.N + 1, (B,), generator=generator)
    z_n, noise = forward_perturb(z0, n, schedule, generator=generator)
    pred = model(z_n, n, t, ts, lbl)
    return (pred - noise).pow(2).reshape(B, -1).sum(dim=1).mean()


@dataclass
class DiffusionTrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    log_every: int = 100


def train_diffusion(
    latents: torch.Tensor | np.ndarray,
    t: np.ndarray | torch.Tensor,
    ts: np.ndarray | torch.Tensor,
    schedule: NoiseSchedule,
    cfg: Optional[NoisePredictorConfig] = None,
    train_cfg: Optional[DiffusionTrainConfig] = None,
    labels: Optional[np.ndarray | torch.Tensor] = None,
    conditional: bool = False,
) -> tuple[NoisePredictor, list[float]]:
    """Fit the noise predictor; returns the model (eval mode) and per-epoch loss.

    Each epoch is one gradient step on a random minibatch, as in :func:`train_vae`.

    In conditional mode each window's label is replaced by the null label with
    probability ``cfg.p_uncond`` at every step, so one network learns both the
    conditional and the unconditional model.
    """
    cfg = cfg or NoisePredictorConfig()
    train_cfg = train_cfg or DiffusionTrainConfig()
    if conditional:
        if labels is None:
            raise ValueError("conditional training requires entity labels")
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        if cfg.label_vocab <= int(labels.max()):
            raise ValueError("label_vocab is smaller than the largest label")
    elif cfg.label_vocab:
        raise ValueError("label_vocab set but conditional=False")

    torch.manual_seed(train_cfg.seed)
    gen = torch.Generator().manual_seed(train_cfg.seed)
    dtype = torch.get_default_dtype()
    z = torch.as_tensor(latents, dtype=dtype)
    t = torch.as_tensor(np.asarray(t), dtype=dtype)
    ts = torch.as_tensor(np.asarray(ts), dtype=torch.long)
    model = NoisePredictor(z.shape[-1], cfg)
    model.fit_timestamp_scaling(ts)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    history: list[float] = []
    model.train()
    for epoch in range(train_cfg.epochs):
        idx = sample_minibatch(len(z), train_cfg.batch_size, gen)
        lbl = None
        if conditional:
            lbl = labels[idx].clone()
            drop = torch.rand(len(idx), generator=gen) < cfg.p_uncond
            lbl[drop] = NULL_LABEL
        loss = diffusion_loss(model, z[idx], t, ts[idx], schedule, lbl, generator=gen)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite diffusion loss at epoch {epoch}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if train_cfg.log_every and (epoch + 1) % train_cfg.log_every == 0:
            logger.info("diffusion epoch %d loss=%.4f", epoch + 1, history[-1])
    model.trained.fill_(True)
    model.eval()
    return model, history
