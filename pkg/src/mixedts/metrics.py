"""Fidelity and utility scores for synthetic windowed data.

All scores take processed arrays of shape ``(B, T, F)`` (continuous columns in
[0, 1], discrete columns as category indices) together with ``cards``, the
per-column category counts with ``0`` marking a continuous column.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- associations


def pearson_r(x, y) -> float:
    """Pearson correlation; 0 when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        return 0.0
    return float(np.clip(np.dot(dx, dy) / (np.sqrt(sxx) * np.sqrt(syy)), -1.0, 1.0))


def _codes(v) -> np.ndarray:
    return np.unique(np.asarray(v), return_inverse=True)[1].reshape(-1)


def theils_u(x, y) -> float:
    """Uncertainty coefficient ``U(X|Y) = (H(X) - H(X|Y)) / H(X)`` with natural logs.

    Asymmetric. A constant ``x`` has ``H(X) = 0`` and is fully predictable, so it
    scores 1.
    """
    xc, yc = _codes(x), _codes(y)
    n = len(xc)
    if n != len(yc):
        raise ValueError("x and y must have equal length")
    nx, ny = xc.max() + 1, yc.max() + 1
    joint = np.bincount(xc * ny + yc, minlength=nx * ny).reshape(nx, ny) / n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    h_x = -np.sum(px * np.log(px))
    if h_x == 0:
        return 1.0
    nz = joint > 0
    # H(X|Y) = -sum p(x,y) log(p(x,y) / p(y))
    h_x_given_y = -np.sum(joint[nz] * np.log(joint[nz] / np.broadcast_to(py, joint.shape)[nz]))
    return float(np.clip((h_x - h_x_given_y) / h_x, 0.0, 1.0))


def correlation_ratio(cat, num) -> float:
    """Correlation ratio eta; 0 when the numerical variable is constant."""
    codes = _codes(cat)
    y = np.asarray(num, dtype=np.float64).reshape(-1)
    counts = np.bincount(codes)
    means = np.bincount(codes, weights=y) / counts
    ybar = y.mean()
    total = np.sum((y - ybar) ** 2)
    if total == 0:
        return 0.0
    between = np.sum(counts * (means - ybar) ** 2)
    return float(np.sqrt(np.clip(between / total, 0.0, 1.0)))


def association_matrix(rows: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    """``(F, F)`` association matrix of a ``(rows, F)`` table.

    Entry ``[i, j]`` is Pearson r for two continuous columns, ``U(X_i | X_j)``
    for two discrete columns (binary counts as categorical) and the correlation
    ratio for a mixed pair.
    """
    rows = np.asarray(rows, dtype=np.float64)
    F = rows.shape[1]
    disc = [int(k) > 0 for k in cards]
    if len(disc) != F:
        raise ValueError(f"cards has {len(disc)} entries for {F} columns")
    out = np.zeros((F, F))
    for i in range(F):
        for j in range(F):
            a, b = rows[:, i], rows[:, j]
            if disc[i] and disc[j]:
                out[i, j] = theils_u(a, b)
            elif disc[i]:
                out[i, j] = correlation_ratio(a, b)
            elif disc[j]:
                out[i, j] = correlation_ratio(b, a)
            else:
                out[i, j] = pearson_r(a, b)
    return out


def feature_correlation_score(real: np.ndarray, synth: np.ndarray, cards: Sequence[int]) -> float:
    """Root of the mean squared difference between the two association matrices."""
    real, synth = np.asarray(real), np.asarray(synth)
    F = real.shape[-1]
    if synth.shape[-1] != F:
        raise ValueError("real and synthetic data have different feature counts")
    diff = association_matrix(real.reshape(-1, F), cards) - association_matrix(
        synth.reshape(-1, F), cards
    )
    return float(np.sqrt(np.mean(diff**2)))


# ---------------------------------------------------------------- learned scores


@dataclass
class ScorerConfig:
    hidden: int = 64
    layers: int = 2
    steps: int = 500
    batch_size: int = 128
    lr: float = 1e-3
    test_fraction: float = 0.2


def network_input(x: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    """Divide discrete indices by ``max(K - 1, 1)`` so every column lies in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    scale = np.array([max(int(k) - 1, 1) if k else 1 for k in cards], dtype=np.float64)
    return x / scale


class _GRUHead(nn.Module):
    def __init__(self, F: int, out: int, cfg: ScorerConfig):
        super().__init__()
        self.rnn = nn.GRU(F, cfg.hidden, cfg.layers, batch_first=True)
        self.fc = nn.Linear(cfg.hidden, out)

    def forward(self, x):
        return self.fc(self.rnn(x)[0])


@torch.enable_grad()  # scores may be requested from inside a no_grad block
def _fit(model, inputs, targets, loss_fn, cfg: ScorerConfig, gen: torch.Generator):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(inputs)
    for _ in range(cfg.steps):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        loss = loss_fn(model(inputs[idx]), targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def _match_batches(real, synth, rng):
    real, synth = np.asarray(real), np.asarray(synth)
    if real.shape[1:] != synth.shape[1:]:
        raise ValueError(f"window shapes differ: {real.shape[1:]} vs {synth.shape[1:]}")
    B = min(len(real), len(synth))
    if len(real) > B:
        real = real[rng.choice(len(real), B, replace=False)]
    if len(synth) > B:
        synth = synth[rng.choice(len(synth), B, replace=False)]
    return real, synth


def _discriminate(real: np.ndarray, synth: np.ndarray, seed: int, cfg: ScorerConfig) -> float:
    """Train a recurrent real-vs-synthetic classifier and return ``|acc - 0.5|``."""
    rng = np.random.default_rng(seed)
    real, synth = _match_batches(real, synth, rng)
    B = len(real)
    if B < 10:
        raise ValueError(f"need at least 10 windows per dataset, got {B}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.as_tensor(np.concatenate([real, synth]), dtype=torch.float32)
    y = torch.cat([torch.ones(B), torch.zeros(B)])
    perm = torch.as_tensor(rng.permutation(2 * B))
    n_test = max(1, int(round(cfg.test_fraction * 2 * B)))
    test, train = perm[:n_test], perm[n_test:]

    model = _GRUHead(x.shape[-1], 1, cfg)
    bce = nn.BCEWithLogitsLoss()
    _fit(model, x[train], y[train], lambda out, t: bce(out[:, -1, 0], t), cfg, gen)
    with torch.no_grad():
        pred = model(x[test])[:, -1, 0] > 0
    acc = (pred.float() == y[test]).float().mean().item()
    return float(min(abs(acc - 0.5), 0.5))


def discriminative_score(
    real: np.ndarray,
    synth: np.ndarray,
    cards: Sequence[int],
    seed: int = 0,
    cfg: Optional[ScorerConfig] = None,
) -> float:
    """Post-hoc classifier score in [0, 0.5]; 0 means indistinguishable.

    The larger set is subsampled so both classes have the same window count.
    """
    cfg = cfg or ScorerConfig()
    return _discriminate(network_input(real, cards), network_input(synth, cards), seed, cfg)


def lag_differences(x: np.ndarray, lag: int) -> np.ndarray:
    """``x[:, n + lag] - x[:, n]`` for every valid ``n``; shape ``(B, T - lag, F)``."""
    return x[:, lag:] - x[:, :-lag]


def temporal_discriminative_score(
    real: np.ndarray,
    synth: np.ndarray,
    cards: Sequence[int],
    num_lags: int = 10,
    seed: int = 0,
    cfg: Optional[ScorerConfig] = None,
) -> float:
    """Discriminative score on inter-row differences, averaged over random distinct lags."""
    cfg = cfg or ScorerConfig()
    T = np.asarray(real).shape[1]
    if T < 2:
        raise ValueError("temporal score needs windows of length >= 2")
    rng = np.random.default_rng(seed)
    lags = rng.choice(np.arange(1, T), size=min(num_lags, T - 1), replace=False)
    r, s = network_input(real, cards), network_input(synth, cards)
    scores = [
        _discriminate(lag_differences(r, int(lag)), lag_differences(s, int(lag)), seed + i, cfg)
        for i, lag in enumerate(lags)
    ]
    return float(np.mean(scores))


def predictive_score(
    synth_train: np.ndarray,
    real_test: np.ndarray,
    target: int,
    cards: Sequence[int],
    seed: int = 0,
    cfg: Optional[ScorerConfig] = None,
) -> float:
    """Train-on-synthetic, test-on-real MAE of next-step prediction of column ``target``.

    The regressor reads every feature of rows ``0..T-2`` and predicts the
    target at rows ``1..T-1``; the error is averaged over all predicted steps
    of all real windows, in the processed scale.
    """
    cfg = cfg or ScorerConfig()
    F = np.asarray(synth_train).shape[-1]
    if not 0 <= target < F:
        raise ValueError(f"target column index {target} outside 0..{F - 1}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    s = torch.as_tensor(network_input(synth_train, cards), dtype=torch.float32)
    r = torch.as_tensor(network_input(real_test, cards), dtype=torch.float32)
    model = _GRUHead(F, 1, cfg)
    l1 = nn.L1Loss()
    _fit(model, s[:, :-1], s[:, 1:, target], lambda out, t: l1(out[..., 0], t), cfg, gen)
    with torch.no_grad():
        pred = model(r[:, :-1])[..., 0]
    return float((pred - r[:, 1:, target]).abs().mean())


# ---------------------------------------------------------------- reporting

METRIC_NAMES = ("discriminative", "predictive", "temporal_discriminative", "feature_correlation")


@dataclass
class MetricSummary:
    mean: float
    std: float
    scores: list[float] = field(default_factory=list)

    @classmethod
    def of(cls, scores: Sequence[float]) -> "MetricSummary":
        scores = [float(s) for s in scores]
        return cls(float(np.mean(scores)), float(np.std(scores)), scores)

    def __str__(self) -> str:
        return f"{self.mean:.3f}({self.std:.3f})"


@dataclass
class EvalReport:
    discriminative: MetricSummary
    predictive: MetricSummary
    temporal_discriminative: MetricSummary
    feature_correlation: MetricSummary
    repeats: int = 10
    target_column: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int = 1) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        data = dict(data)
        for name in METRIC_NAMES:
            data[name] = MetricSummary(**data[name])
        return cls(**data)


def evaluate(
    real: np.ndarray,
    synth: np.ndarray,
    cards: Sequence[int],
    target: int,
    target_column: str = "",
    repeats: int = 10,
    seed: int = 0,
    num_lags: int = 10,
    cfg: Optional[ScorerConfig] = None,
) -> EvalReport:
    """Run all four scores ``repeats`` times with distinct seeds.

    Feature correlation is evaluated on equally sized random window subsets of
    both sets, so it varies across repeats only when their sizes differ.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    cfg = cfg or ScorerConfig()
    runs: dict[str, list[float]] = {name: [] for name in METRIC_NAMES}
    for r in range(repeats):
        s = seed + 1000 * r
        runs["discriminative"].append(discriminative_score(real, synth, cards, s, cfg))
        runs["predictive"].append(predictive_score(synth, real, target, cards, s, cfg))
        runs["temporal_discriminative"].append(
            temporal_discriminative_score(real, synth, cards, num_lags, s, cfg)
        )
        a, b = _match_batches(real, synth, np.random.default_rng(s))
        runs["feature_correlation"].append(feature_correlation_score(a, b, cards))
        logger.info("eval repeat %d: %s", r, {k: round(v[-1], 4) for k, v in runs.items()})
    return EvalReport(
        **{name: MetricSummary.of(v) for name, v in runs.items()},
        repeats=repeats,
        target_column=target_column,
    )


def format_table(reports: dict[str, EvalReport]) -> str:
    """Grid of metric rows by column (dataset or variant), each cell ``mean(std)``."""
    names = list(reports)
    width = max([len(n) for n in names] + [12])
    lines = [" " * 24 + "".join(n.rjust(width + 2) for n in names)]
    for metric in METRIC_NAMES:
        cells = "".join(str(getattr(reports[n], metric)).rjust(width + 2) for n in names)
        lines.append(metric.ljust(24) + cells)
    return "\n".join(lines)
