"""Mixed-type time-series synthesis with a sequence VAE and a latent diffusion model."""
from .preprocessing import (
    FeatureKind,
    FeatureSpec,
    ProcessedBatch,
    SchemaError,
    TableSchema,
    WindowConfig,
    fit_transform,
    infer_schema,
    inverse_transform,
    make_windows,
)

__version__ = "0.1.0"
