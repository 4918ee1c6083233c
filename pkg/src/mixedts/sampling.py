"""Reverse diffusion over whole ``(T, F)`` latent matrices, decoding and post-processing.

Every reverse step evaluates the noise predictor once on the full window, so a
generation costs ``N`` network calls (``2N`` with guidance) regardless of ``T``.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from .diffusion import NULL_LABEL, NoisePredictor, NoiseSchedule
from .preprocessing import SchemaError, inverse_transform
from .vae import decode_latents

NoiseFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class UntrainedModelError(RuntimeError):
    pass


def reverse_step(
    z_n: torch.Tensor,
    eps: torch.Tensor,
    n: int,
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
    literal_paper_sigma: bool = False,
) -> torch.Tensor:
    """One ancestral step ``z_n -> z_{n-1}``.

    The added noise is scaled by ``sqrt(beta_n)``, or by ``beta_n`` with
    ``literal_paper_sigma``; no noise is added at ``n == 1``.
    """
    alpha = float(schedule.alpha[n - 1])
    abar = float(schedule.alpha_bar[n - 1])
    beta = float(schedule.beta[n - 1])
    mean = (z_n - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps) / np.sqrt(alpha)
    if n == 1 or noise is None:
        return mean
    sigma = beta if literal_paper_sigma else np.sqrt(beta)
    return mean + sigma * noise


def run_reverse_chain(
    predict: NoiseFn,
    schedule: NoiseSchedule,
    shape: Sequence[int],
    generator: torch.Generator,
    literal_paper_sigma: bool = False,
    z_start: Optional[torch.Tensor] = None,
    dtype: Optional[torch.dtype] = None,
) -> torch.Tensor:
    """Denoise from ``Z_N ~ N(0, I)`` down to ``Z_0``; ``predict(z_n, n)`` returns the noise estimate."""
    dtype = dtype or torch.get_default_dtype()
    z = z_start if z_start is not None else torch.randn(*shape, generator=generator, dtype=dtype)
    B = z.shape[0]
    for n in range(schedule.N, 0, -1):
        noise = torch.randn(z.shape, generator=generator, dtype=z.dtype) if n > 1 else None
        eps = predict(z, torch.full((B,), n, dtype=torch.long))
        z = reverse_step(z, eps, n, schedule, noise, literal_paper_sigma)
    return z


def guided_noise(cond: torch.Tensor, uncond: torch.Tensor, omega: float) -> torch.Tensor:
    """Classifier-free guidance: ``(1 + omega) * cond - omega * uncond``."""
    return (1.0 + omega) * cond - omega * uncond


def _check_trained(model: NoisePredictor) -> None:
    if not bool(getattr(model, "trained", torch.tensor(False))):
        raise UntrainedModelError("noise predictor has not been trained")


def _as_batch(t, ts, count: Optional[int]):
    t = torch.tensor(np.asarray(t), dtype=torch.get_default_dtype())
    ts = torch.tensor(np.asarray(ts), dtype=torch.long)
    if ts.dim() == 2:
        ts = ts.unsqueeze(0).expand(count or 1, -1, -1)
    if ts.shape[-1] != 4 or ts.shape[1] != t.shape[0]:
        raise ValueError(f"timestamps must be (B, {t.shape[0]}, 4), got {tuple(ts.shape)}")
    return t, ts


@torch.no_grad()
def sample_unconditional(
    model: NoisePredictor,
    schedule: NoiseSchedule,
    t,
    ts,
    seed: int = 0,
    count: Optional[int] = None,
    literal_paper_sigma: bool = False,
) -> torch.Tensor:
    """Algorithm-1 sampling; ``ts`` is ``(T, 4)`` (broadcast to ``count``) or ``(B, T, 4)``.

    Returns latents of shape ``(B, T, F)``.
    """
    _check_trained(model)
    model.eval()
    t, ts = _as_batch(t, ts, count)
    B, T = ts.shape[0], ts.shape[1]
    gen = torch.Generator().manual_seed(seed)

    def predict(z, n):
        return model(z, n, t, ts, None)

    return run_reverse_chain(predict, schedule, (B, T, model.F), gen, literal_paper_sigma)


@torch.no_grad()
def sample_conditional(
    model: NoisePredictor,
    schedule: NoiseSchedule,
    t,
    ts,
    lbl,
    omega: float = 3.0,
    seed: int = 0,
    literal_paper_sigma: bool = False,
    guided: bool = True,
) -> torch.Tensor:
    """Algorithm-2 sampling with guided noise estimates.

    ``lbl`` holds one label code per window (an int is broadcast). With
    ``guided=False`` only the conditional estimate is used.
    """
    _check_trained(model)
    if not model.conditional:
        raise ValueError("model was trained unconditionally; conditional sampling is unavailable")
    if omega < 0:
        raise ValueError("omega must be >= 0")
    model.eval()
    lbl = torch.as_tensor(lbl, dtype=torch.long).reshape(-1)
    count = len(lbl) if len(lbl) > 1 else None
    t, ts = _as_batch(t, ts, count)
    B, T = ts.shape[0], ts.shape[1]
    if len(lbl) == 1:
        lbl = lbl.expand(B)
    if len(lbl) != B:
        raise ValueError(f"got {len(lbl)} labels for {B} windows")
    null = torch.full_like(lbl, NULL_LABEL)
    gen = torch.Generator().manual_seed(seed)

    def predict(z, n):
        cond = model(z, n, t, ts, lbl)
        if not guided:
            return cond
        return guided_noise(cond, model(z, n, t, ts, null), omega)

    return run_reverse_chain(predict, schedule, (B, T, model.F), gen, literal_paper_sigma)


@dataclass
class GenerationRequest:
    count: int = 1
    ts: Optional[np.ndarray] = None  # (T, 4) or (count, T, 4); drawn from training data if None
    lbl: Optional[Any] = None  # raw entity value, or a list of them (one window each)
    omega: float = 3.0
    seed: int = 0
    schema_hash: Optional[str] = None

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")


def _label_codes(bundle, lbl) -> np.ndarray:
    entity = bundle.schema.entity
    if entity is None:
        raise ValueError("bundle has no entity labels")
    mapping = entity.category_map
    values = list(lbl) if isinstance(lbl, (list, tuple, np.ndarray)) else [lbl]
    unknown = [v for v in values if v not in mapping]
    if unknown:
        raise ValueError(f"unknown entity labels: {unknown}")
    return np.array([mapping[v] for v in values], dtype=np.int64)


def _sample_request(request: GenerationRequest, bundle):
    """Shared path of the generators: returns processed windows, timestamps and label codes."""
    if request.schema_hash is not None and request.schema_hash != bundle.schema.hash():
        raise SchemaError("request schema hash does not match the model bundle")
    T = len(bundle.t)
    rng = np.random.default_rng(request.seed)

    codes = None
    count = request.count
    if request.lbl is not None:
        codes = _label_codes(bundle, request.lbl)
        if len(codes) > 1:
            count = len(codes)
        else:
            codes = np.repeat(codes, count)

    if request.ts is None:
        ts = bundle.train_ts[rng.integers(0, len(bundle.train_ts), size=count)]
    else:
        ts = np.asarray(request.ts, dtype=np.int64)
        if ts.ndim == 2:
            ts = np.broadcast_to(ts, (count, *ts.shape))
    if ts.shape != (count, T, 4):
        raise SchemaError(f"timestamps must have shape ({count}, {T}, 4), got {ts.shape}")

    if codes is None:
        z = sample_unconditional(
            bundle.predictor, bundle.schedule, bundle.t, ts, seed=request.seed,
            literal_paper_sigma=bundle.literal_paper_sigma,
        )
    else:
        z = sample_conditional(
            bundle.predictor, bundle.schedule, bundle.t, ts, codes, request.omega,
            seed=request.seed, literal_paper_sigma=bundle.literal_paper_sigma,
        )
    x = decode_latents(bundle.vae, bundle.unscale_latents(z))
    return x, ts, codes


def generate(request: GenerationRequest, bundle) -> list[pd.DataFrame]:
    """Sample latents, decode them and restore raw-format tables (one per window)."""
    x, ts, codes = _sample_request(request, bundle)
    tables = []
    entity = bundle.schema.entity
    for i in range(len(x)):
        df = inverse_transform(x[i], bundle.schema, ts[i])
        if entity is not None and codes is not None:
            df.insert(0, entity.name, entity.categories[codes[i]])
        tables.append(df)
    return tables


def generate_processed(request: GenerationRequest, bundle) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`generate` but returns the hard-decoded ``(count, T, F)`` array and its timestamps."""
    x, ts, _ = _sample_request(request, bundle)
    return x, ts


def measure_sampling_time(
    bundle, repeats: int = 10, request: Optional[GenerationRequest] = None
) -> tuple[float, float]:
    """Wall-clock seconds of ``repeats`` full generations, as (mean, population std)."""
    request = request or GenerationRequest(count=len(bundle.train_ts))
    times = []
    for r in range(repeats):
        req = GenerationRequest(
            count=request.count, ts=request.ts, lbl=request.lbl, omega=request.omega,
            seed=request.seed + r, schema_hash=request.schema_hash,
        )
        start = time.perf_counter()
        generate(req, bundle)
        times.append(time.perf_counter() - start)
    return statistics.fmean(times), statistics.pstdev(times)
