"""Two-stage training, evaluation and ablation runs driven by a :class:`RunConfig`."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from .datasets import Dataset, load_dataset
from .diffusion import DiffusionTrainConfig, NoisePredictorConfig, make_schedule, train_diffusion
from .metrics import EvalReport, evaluate
from .persistence import ModelBundle
from .preprocessing import (
    ProcessedBatch,
    SchemaError,
    TableSchema,
    WindowConfig,
    fit_transform,
    infer_schema,
    make_windows,
    transform,
)
from .sampling import GenerationRequest, generate_processed
from .vae import BetaSchedule, EncoderConfig, FeatureLayout, VAETrainConfig, encode_latents, train_vae

logger = logging.getLogger(__name__)

PROFILES = {
    "desk": dict(epochs_vae=2000, epochs_diff=2000, N=100, beta_start=1e-3, beta_end=0.2, beta_patience=4),
    "full": dict(epochs_vae=50000, epochs_diff=50000, N=1000, beta_start=1e-4, beta_end=0.02, beta_patience=100),
}

VARIANTS = ("no_sinusoidal_embedding", "no_transformer_conv", "no_timestamps", "no_bidirectional")


@dataclass
class RunConfig:
    dataset: str = ""
    adapter: str = "traffic"
    T: Optional[int] = None  # adapter default when None
    target_column: Optional[str] = None
    timestamp_column: Optional[str] = None  # generic csv adapter only
    entity_column: Optional[str] = None  # generic csv adapter only
    first_rows: Optional[int] = None  # generic csv adapter only
    profile: str = "desk"
    epochs_vae: int = 2000
    epochs_diff: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    conditional: bool = False
    omega: float = 3.0
    N: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    stride: int = 1
    distinct_threshold: int = 25
    cont_embed_width: int = 16
    kl_reduction: str = "sum"
    beta_patience: int = 4  # stall window of the VAE beta schedule, in steps
    literal_paper_sigma: bool = False
    variant: Optional[str] = None
    eval_repeats: int = 10
    out_dir: str = "runs/model"

    def __post_init__(self):
        if self.epochs_vae < 1 or self.epochs_diff < 1:
            raise ValueError("epochs must be positive")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")
        if self.beta_patience < 1:
            raise ValueError("beta_patience must be >= 1")
        if self.kl_reduction not in ("mean", "sum"):
            raise ValueError(f"kl_reduction must be 'mean' or 'sum', got {self.kl_reduction!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.variant is not None and self.variant not in VARIANTS:
            raise ValueError(f"unknown ablation variant {self.variant!r}; choose from {list(VARIANTS)}")

    @classmethod
    def from_profile(cls, profile: str = "desk", **overrides) -> "RunConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(profile=profile, **{**PROFILES[profile], **overrides})

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls.from_profile(data.get("profile", "desk"), **{k: v for k, v in data.items() if k != "profile"})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PreparedData:
    dataset: Dataset
    schema: TableSchema
    windows: ProcessedBatch
    target_index: int

    @property
    def cards(self) -> list[int]:
        return [f.cardinality if f.is_discrete else 0 for f in self.schema.modeled]


def load_config_dataset(config: RunConfig) -> Dataset:
    return load_dataset(
        config.adapter,
        config.dataset,
        target_column=config.target_column,
        timestamp_column=config.timestamp_column,
        entity_column=config.entity_column,
        T=config.T,
        first_rows=config.first_rows,
    )


def prepare(config: RunConfig, dataset: Optional[Dataset] = None, schema: Optional[TableSchema] = None) -> PreparedData:
    """Load the dataset, fit (or apply) the schema and cut training windows."""
    ds = dataset or load_config_dataset(config)
    T = config.T or ds.T
    if len(ds.table) < T:
        raise ValueError(f"dataset has {len(ds.table)} rows, fewer than the window length {T}")
    if schema is None:
        schema = infer_schema(
            ds.table,
            distinct_threshold=config.distinct_threshold,
            timestamp_column=ds.timestamp_column,
            entity_column=ds.entity_column,
            datetime_format=ds.datetime_format,
        )
        processed = fit_transform(ds.table, schema)
    else:
        processed = transform(ds.table, schema)
    windows = make_windows(
        processed,
        WindowConfig(T=T, stride=config.stride, multi_sequence=ds.multi_sequence, min_entity_length=T),
    )
    try:
        target = schema.index_of(ds.target_column)
    except KeyError as exc:
        raise SchemaError(f"target column {ds.target_column!r} is not a modeled column") from exc
    return PreparedData(ds, schema, windows, target)


def model_configs(config: RunConfig, schema: TableSchema) -> tuple[EncoderConfig, NoisePredictorConfig]:
    enc = EncoderConfig(cont_embed_width=config.cont_embed_width)
    eps = NoisePredictorConfig(
        guidance_omega=config.omega,
        label_vocab=len(schema.entity.categories) if config.conditional and schema.entity else 0,
        n_years=schema.n_years,
    )
    if config.variant == "no_sinusoidal_embedding":
        enc = replace(enc, sinusoidal_embedding=False)
    elif config.variant == "no_transformer_conv":
        enc = replace(enc, feature_mixer=False)
    elif config.variant == "no_timestamps":
        eps = replace(eps, use_timestamps=False)
    elif config.variant == "no_bidirectional":
        eps = replace(eps, bidirectional=False)
    return enc, eps


def train(config: RunConfig, data: Optional[PreparedData] = None) -> ModelBundle:
    """Stage 1 fits the VAE on the windows; stage 2 fits the diffusion model on their latents."""
    data = data or prepare(config)
    schema, win = data.schema, data.windows
    if config.conditional and win.labels is None:
        raise ValueError("conditional training needs a multi-sequence dataset with an entity column")
    layout = FeatureLayout.from_schema(schema)
    enc_cfg, eps_cfg = model_configs(config, schema)

    logger.info("stage 1: VAE on %d windows of shape %s", win.B, win.x_proc.shape[1:])
    vae, vae_hist = train_vae(
        win.x_proc,
        layout,
        enc_cfg,
        VAETrainConfig(
            epochs=config.epochs_vae,
            lr=config.lr,
            batch_size=config.batch_size,
            seed=config.seed,
            beta=BetaSchedule(patience=config.beta_patience),
            kl_reduction=config.kl_reduction,
        ),
    )

    logger.info("stage 2: diffusion with N=%d", config.N)
    latents = encode_latents(vae, win.x_proc).double()
    mean = latents.mean(dim=(0, 1)).numpy()
    std = latents.std(dim=(0, 1)).numpy()
    std = np.where(std > 1e-8, std, 1.0)
    schedule = make_schedule(config.N, config.beta_start, config.beta_end)
    bundle = ModelBundle(
        schema=schema,
        vae=vae,
        predictor=None,  # filled below
        schedule=schedule,
        latent_mean=mean,
        latent_std=std,
        t=win.t,
        train_ts=win.ts,
        seed=config.seed,
        literal_paper_sigma=config.literal_paper_sigma,
        config=config.to_dict(),
        vae_history=vae_hist.as_dict(),
    )
    predictor, diff_hist = train_diffusion(
        bundle.scale_latents(latents),
        win.t,
        win.ts,
        schedule,
        eps_cfg,
        DiffusionTrainConfig(
            epochs=config.epochs_diff, lr=config.lr, batch_size=config.batch_size, seed=config.seed
        ),
        labels=win.labels if config.conditional else None,
        conditional=config.conditional,
    )
    bundle.predictor = predictor
    bundle.diffusion_history = diff_hist
    return bundle


def synthesize_like(bundle: ModelBundle, data: PreparedData, seed: int = 0, omega: Optional[float] = None) -> np.ndarray:
    """Generate one synthetic window per real window, reusing the real timestamps (and labels)."""
    win = data.windows
    lbl = None
    if bundle.predictor.conditional and win.labels is not None:
        lbl = [bundle.schema.entity.categories[c] for c in win.labels]
    request = GenerationRequest(
        count=win.B,
        ts=win.ts,
        lbl=lbl,
        omega=bundle.predictor.cfg.guidance_omega if omega is None else omega,
        seed=seed,
    )
    return generate_processed(request, bundle)[0]


def evaluate_bundle(
    bundle: ModelBundle, data: PreparedData, repeats: int = 10, seed: int = 0, synth: Optional[np.ndarray] = None
) -> EvalReport:
    if synth is None:
        synth = synthesize_like(bundle, data, seed)
    return evaluate(
        data.windows.x_proc,
        synth,
        data.cards,
        data.target_index,
        target_column=data.dataset.target_column,
        repeats=repeats,
        seed=seed,
    )


def ablate(config: RunConfig, variants=VARIANTS, repeats: Optional[int] = None) -> dict[str, EvalReport]:
    """Train and evaluate the full model and each reduced variant on the same data."""
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    repeats = repeats or config.eval_repeats
    data = prepare(config)
    reports = {}
    for variant in (None, *variants):
        name = variant or "full"
        logger.info("ablation: training %s", name)
        # a fresh schema per run keeps the fitted parameters identical across variants
        run_data = prepare(config, dataset=data.dataset)
        bundle = train(replace(config, variant=variant), run_data)
        reports[name] = evaluate_bundle(bundle, run_data, repeats=repeats, seed=config.seed)
    return reports
