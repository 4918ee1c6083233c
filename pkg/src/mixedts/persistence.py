"""Saving and loading a trained two-stage model as a single directory bundle.

Layout of a bundle directory::

    manifest.json   format version, seed, hashes, configs, schedule, training traces
    schema.json     fitted TableSchema
    weights.pt      VAE and noise-predictor state dicts, latent scaling, timestamp pool
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .diffusion import NoisePredictor, NoisePredictorConfig, NoiseSchedule
from .preprocessing import SchemaError, TableSchema
from .vae import VAE, EncoderConfig, FeatureLayout

FORMAT_VERSION = 1


class BundleError(RuntimeError):
    pass


@dataclass
class ModelBundle:
    schema: TableSchema
    vae: VAE
    predictor: NoisePredictor
    schedule: NoiseSchedule
    latent_mean: np.ndarray  # (F,) per-channel shift applied before diffusion
    latent_std: np.ndarray  # (F,)
    t: np.ndarray  # (T,) normalized time index
    train_ts: np.ndarray  # (B, T, 4) timestamps of the training windows
    seed: int = 0
    literal_paper_sigma: bool = False
    config: dict = field(default_factory=dict)  # run configuration used for training
    vae_history: dict = field(default_factory=dict)
    diffusion_history: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def scale_latents(self, z) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=torch.get_default_dtype())
        return (z - torch.as_tensor(self.latent_mean, dtype=z.dtype)) / torch.as_tensor(
            self.latent_std, dtype=z.dtype
        )

    def unscale_latents(self, z) -> torch.Tensor:
        z = torch.as_tensor(z, dtype=torch.get_default_dtype())
        return z * torch.as_tensor(self.latent_std, dtype=z.dtype) + torch.as_tensor(
            self.latent_mean, dtype=z.dtype
        )

    @property
    def T(self) -> int:
        return len(self.t)

    def hash(self) -> str:
        """Deterministic digest of the schema, configs, schedule and every weight."""
        h = hashlib.sha256()
        h.update(self.schema.to_json().encode())
        h.update(json.dumps(_manifest_core(self), sort_keys=True).encode())
        for prefix, module in (("vae", self.vae), ("eps", self.predictor)):
            for name, tensor in sorted(module.state_dict().items()):
                h.update(f"{prefix}.{name}".encode())
                h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        for arr in (self.latent_mean, self.latent_std, self.t, self.train_ts):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _manifest_core(bundle: ModelBundle) -> dict[str, Any]:
    return {
        "format_version": bundle.format_version,
        "seed": bundle.seed,
        "literal_paper_sigma": bundle.literal_paper_sigma,
        "encoder_config": asdict(bundle.vae.cfg),
        "predictor_config": asdict(bundle.predictor.cfg),
        "schedule": bundle.schedule.to_dict(),
        "config": bundle.config,
    }


def save_bundle(bundle: ModelBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    schema_hash = bundle.schema.hash()
    (directory / "schema.json").write_text(bundle.schema.to_json())
    torch.save(
        {
            "vae": {"schema_hash": schema_hash, "state": bundle.vae.state_dict()},
            "predictor": {"schema_hash": schema_hash, "state": bundle.predictor.state_dict()},
            "latent_mean": np.asarray(bundle.latent_mean, dtype=np.float64),
            "latent_std": np.asarray(bundle.latent_std, dtype=np.float64),
            "t": np.asarray(bundle.t, dtype=np.float64),
            "train_ts": np.asarray(bundle.train_ts, dtype=np.int64),
        },
        directory / "weights.pt",
    )
    manifest = _manifest_core(bundle)
    manifest.update(
        schema_hash=schema_hash,
        bundle_hash=bundle.hash(),
        vae_history=bundle.vae_history,
        diffusion_history=bundle.diffusion_history,
    )
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def load_bundle(directory: str | Path, verify: bool = True) -> ModelBundle:
    directory = Path(directory)
    for name in ("manifest.json", "schema.json", "weights.pt"):
        if not (directory / name).exists():
            raise BundleError(f"bundle {directory} is missing {name}")
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleError(
            f"unsupported bundle format {manifest.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    schema = TableSchema.from_json((directory / "schema.json").read_text())
    schema_hash = schema.hash()
    weights = torch.load(directory / "weights.pt", weights_only=False)
    for part in ("vae", "predictor"):
        if weights[part]["schema_hash"] != schema_hash:
            raise SchemaError(f"{part} checkpoint was trained on a different schema")

    vae = VAE(FeatureLayout.from_schema(schema), EncoderConfig(**manifest["encoder_config"]))
    vae.load_state_dict(weights["vae"]["state"])
    vae.eval()
    predictor = NoisePredictor(schema.F, NoisePredictorConfig(**manifest["predictor_config"]))
    predictor.load_state_dict(weights["predictor"]["state"])
    predictor.eval()

    bundle = ModelBundle(
        schema=schema,
        vae=vae,
        predictor=predictor,
        schedule=NoiseSchedule.from_dict(manifest["schedule"]),
        latent_mean=weights["latent_mean"],
        latent_std=weights["latent_std"],
        t=weights["t"],
        train_ts=weights["train_ts"],
        seed=manifest["seed"],
        literal_paper_sigma=manifest["literal_paper_sigma"],
        config=manifest["config"],
        vae_history=manifest.get("vae_history", {}),
        diffusion_history=manifest.get("diffusion_history", []),
    )
    if verify and bundle.hash() != manifest["bundle_hash"]:
        raise BundleError("bundle contents do not match the recorded hash")
    return bundle


def read_schema_hash(directory: str | Path) -> Optional[str]:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text()).get("schema_hash")
