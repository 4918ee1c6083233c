"""Command-line entry point: ``mixedts {train,generate,evaluate,ablate}``.

Failures exit with status 1 and print a JSON object ``{"error": ..., "message": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .metrics import EvalReport, evaluate, format_table
from .persistence import load_bundle, save_bundle
from .pipeline import VARIANTS, PreparedData, RunConfig, ablate, prepare, train
from .preprocessing import SchemaError, transform

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("mixedts")

SIDECAR = "generation.json"

# flag name -> RunConfig field
OVERRIDES = {
    "dataset": str,
    "adapter": str,
    "T": int,
    "target_column": str,
    "timestamp_column": str,
    "entity_column": str,
    "first_rows": int,
    "epochs_vae": int,
    "epochs_diff": int,
    "batch_size": int,
    "lr": float,
    "seed": int,
    "omega": float,
    "N": int,
    "beta_start": float,
    "beta_end": float,
    "eval_repeats": int,
    "kl_reduction": str,
    "beta_patience": int,
    "out_dir": str,
}


def load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    if p.suffix == ".toml":
        return tomllib.loads(p.read_text())
    if p.suffix == ".json":
        return json.loads(p.read_text())
    raise ValueError(f"config must be .json or .toml, got {p.name}")


def build_config(args: argparse.Namespace) -> RunConfig:
    data = load_config_file(args.config)
    if args.profile is not None:
        data["profile"] = args.profile
    for name in OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if args.conditional:
        data["conditional"] = True
    if args.literal_paper_sigma:
        data["literal_paper_sigma"] = True
    return RunConfig.from_dict(data)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML run configuration")
    p.add_argument("--profile", choices=["desk", "full"])
    for name, typ in OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--conditional", action="store_true", help="entity-conditional training")
    p.add_argument("--literal-paper-sigma", action="store_true",
                   help="scale reverse-step noise by beta_n instead of sqrt(beta_n)")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> dict:
    config = build_config(args)
    bundle = train(config)
    out = save_bundle(bundle, config.out_dir)
    return {"bundle": str(out), "bundle_hash": bundle.hash(), "schema_hash": bundle.schema.hash()}


def cmd_generate(args) -> dict:
    from .sampling import GenerationRequest, generate

    bundle = load_bundle(args.bundle)
    labels = args.label
    if args.all_labels:
        if bundle.schema.entity is None:
            raise ValueError("--all-labels needs a conditional model")
        labels = list(bundle.schema.entity.categories)
    if labels:
        entity = bundle.schema.entity
        if entity is None:
            raise ValueError("model has no entity labels")
        # CLI values arrive as strings; match them against the stored label values
        lookup = {str(v): v for v in entity.categories}
        unknown = [v for v in labels if v not in lookup]
        if unknown:
            raise ValueError(f"unknown entity labels: {unknown}")
        labels = [lookup[v] for v in labels]
    request = GenerationRequest(
        count=args.count,
        lbl=labels if labels else None,
        omega=args.omega,
        seed=args.seed,
    )
    tables = generate(request, bundle)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, table in enumerate(tables):
        tag = f"{labels[i]}" if labels and len(labels) == len(tables) else f"{i:04d}"
        name = f"synth_{tag}.csv"
        table.to_csv(out / name, index=False)
        files.append(name)
    meta = {
        "files": files,
        "seed": args.seed,
        "omega": args.omega,
        "labels": [str(v) for v in labels] if labels else None,
        "bundle": str(args.bundle),
        "bundle_hash": bundle.hash(),
        "schema_hash": bundle.schema.hash(),
    }
    (out / SIDECAR).write_text(json.dumps(meta, indent=1))
    return {"out_dir": str(out), "files": len(files)}


def read_synthetic(directory: Path, bundle) -> tuple[np.ndarray, dict]:
    """Load generated CSVs back into processed ``(count, T, F)`` windows."""
    if not directory.is_dir():
        raise FileNotFoundError(f"synthetic directory not found: {directory}")
    meta = {}
    if (directory / SIDECAR).exists():
        meta = json.loads((directory / SIDECAR).read_text())
        if meta.get("schema_hash") != bundle.schema.hash():
            raise SchemaError("synthetic data was generated with a different schema than the bundle")
        paths = [directory / f for f in meta["files"]]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing synthetic files: {missing}")
    else:
        paths = sorted(directory.glob("*.csv"))
    if not paths:
        raise FileNotFoundError(f"no synthetic CSV files in {directory}")
    windows = []
    for path in paths:
        table = pd.read_csv(path)
        processed = transform(table, bundle.schema)
        if processed.T != bundle.T:
            raise SchemaError(f"{path} has {processed.T} rows, expected {bundle.T}")
        windows.append(processed.x_proc[0])
    return np.stack(windows), meta


def plot_marginals(real: pd.DataFrame, synth: pd.DataFrame, columns, out_dir: Path) -> list[Path]:
    """One real-vs-synthetic histogram (or bar chart for discrete columns) per column."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for spec in columns:
        fig, ax = plt.subplots(figsize=(4, 3))
        if spec.is_discrete:
            cats = [str(c) for c in spec.categories]
            r = real[spec.name].astype(str).value_counts(normalize=True).reindex(cats, fill_value=0)
            s = synth[spec.name].astype(str).value_counts(normalize=True).reindex(cats, fill_value=0)
            x = np.arange(len(cats))
            ax.bar(x - 0.2, r.values, 0.4, label="real")
            ax.bar(x + 0.2, s.values, 0.4, label="synthetic")
            ax.set_xticks(x, cats, rotation=90, fontsize=6)
        else:
            bins = np.linspace(spec.scale_min, spec.scale_max, 31) if spec.scale_max > spec.scale_min else 10
            ax.hist(real[spec.name], bins=bins, alpha=0.5, density=True, label="real")
            ax.hist(synth[spec.name], bins=bins, alpha=0.5, density=True, label="synthetic")
        ax.set_title(spec.name)
        ax.legend(fontsize=7)
        fig.tight_layout()
        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in spec.name)
        path = out_dir / f"marginal_{safe}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def cmd_evaluate(args) -> dict:
    bundle = load_bundle(args.bundle)
    config = RunConfig.from_dict(bundle.config)
    if args.real:
        config = replace(config, dataset=args.real)
    data: PreparedData = prepare(config, schema=bundle.schema)
    synth, _ = read_synthetic(Path(args.synth_dir), bundle)
    report = evaluate(
        data.windows.x_proc,
        synth,
        data.cards,
        data.target_index,
        target_column=data.dataset.target_column,
        repeats=args.repeats,
        seed=args.seed,
    )
    out = Path(args.out) if args.out else Path(args.synth_dir) / "report.json"
    out.write_text(report.to_json())
    print(format_table({data.dataset.name: report}))
    result = {"report": str(out)}
    if args.plot:
        from .preprocessing import inverse_transform

        real_rows = inverse_transform(data.windows.x_proc[:, 0].reshape(-1, bundle.schema.F), bundle.schema)
        synth_rows = inverse_transform(synth.reshape(-1, bundle.schema.F), bundle.schema)
        plots = plot_marginals(real_rows, synth_rows, bundle.schema.modeled, Path(args.plot))
        result["plots"] = [str(p) for p in plots]
    return result


def cmd_ablate(args) -> dict:
    config = build_config(args)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    reports = ablate(config, variants, repeats=args.repeats)
    print(format_table(reports))
    out = Path(args.out or Path(config.out_dir) / "ablation.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=1))
    return {"report": str(out), "variants": list(reports)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixedts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit the VAE and the latent diffusion model")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample synthetic windows from a trained bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--label", action="append", help="entity label to condition on (repeatable)")
    p.add_argument("--all-labels", action="store_true", help="one window per known entity")
    p.add_argument("--omega", type=float, default=3.0, help="guidance weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated CSVs against the real data")
    p.add_argument("--bundle", required=True)
    p.add_argument("--synth-dir", required=True)
    p.add_argument("--real", help="real dataset path (defaults to the training dataset)")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--plot", metavar="DIR", help="write marginal histograms to DIR")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score reduced model variants")
    _add_run_flags(p)
    p.add_argument("--variant", default="all", choices=["all", *VARIANTS])
    p.add_argument("--repeats", type=int)
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        result = args.func(args)
    except Exception as exc:  # reported as machine-readable JSON
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
