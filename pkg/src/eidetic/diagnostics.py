"""Slice-weight diagnostics and the four-variant ablation.

CSV schemas::

    kl_by_layer.csv     layer,head,kl_mean          (layer is 1-based)
    ablation.csv        variant,rel_l2,final_loss,kl_mean
    slice_weights.csv   x,y,z,w0..w{M-1},argmax
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from .dataio import MeshSample, Normalizer
from .errors import ValidationError
from .model import ModelConfig, ModelParams, collect_slice_weights
from .train import TrainConfig, evaluate, model_predictor, train

ROW_SUM_TOL = 1e-9

# label, switches; ordered as the ablation table reads, baseline first
ABLATION_VARIANTS = (
    ("Transolver", {"ada_temp": False, "reparam": False, "two_projection": True}),
    ("+ Ada-Temp", {"ada_temp": True, "reparam": False, "two_projection": True}),
    ("+ Ada-Temp, Speedup", {"ada_temp": True, "reparam": False, "two_projection": False}),
    ("Transolver++", {"ada_temp": True, "reparam": True, "two_projection": False}),
)


def kl_uniform(w) -> float:
    """Mean over rows of KL(w_i || Uniform(M)); 0 for uniform rows, log M for one-hot rows."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
        raise ValidationError(f"slice weights must be a non-empty N x M array, got shape {w.shape}")
    if np.any(w < 0):
        raise ValidationError("slice weights must be non-negative")
    dev = float(np.abs(w.sum(axis=1) - 1.0).max())
    if dev > ROW_SUM_TOL:
        raise ValidationError(f"slice weight rows must sum to 1 (max deviation {dev:.3e})")
    per_row = xlogy(w, w * w.shape[1]).sum(axis=1)
    return float(np.mean(per_row))


@dataclass
class KLReport:
    layers: list[int]  # 1-based
    heads: int
    kl: dict[tuple[int, int], float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.kl.values())))

    def layer_mean(self, layer: int) -> float:
        return float(np.mean([self.kl[(layer, h)] for h in range(self.heads)]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "head", "kl_mean"])
        for layer in self.layers:
            for h in range(self.heads):
                writer.writerow([layer, h, repr(self.kl[(layer, h)])])
        return buf.getvalue()


def diagnose_kl(params: ModelParams, config: ModelConfig, samples: Sequence[MeshSample], normalizer: Normalizer,
                layers: Sequence[int] | None = None) -> KLReport:
    """Noise-free slice weights per sample, KL averaged over samples for each (layer, head)."""
    if not samples:
        raise ValidationError("KL diagnosis needs at least one sample")
    layers = list(range(1, config.L + 1)) if layers is None else sorted(set(int(i) for i in layers))
    bad = [i for i in layers if not 1 <= i <= config.L]
    if bad:
        raise ValidationError(f"layers must lie in 1..{config.L}, got {bad}")
    sums = {(i, h): 0.0 for i in layers for h in range(config.H)}
    for s in samples:
        weights = collect_slice_weights(params, config, normalizer.inputs(s.features()))
        for i in layers:
            for h in range(config.H):
                sums[(i, h)] += kl_uniform(weights[i - 1][h])
    return KLReport(layers, config.H, {k: v / len(samples) for k, v in sums.items()})


def slice_weights_csv(params: ModelParams, config: ModelConfig, sample: MeshSample, normalizer: Normalizer,
                      layer: int = 1, head: int = 0) -> str:
    """Per-point slice weights of one (1-based) layer and head, for external viewers."""
    if not 1 <= layer <= config.L or not 0 <= head < config.H:
        raise ValidationError(f"layer must be in 1..{config.L} and head in 0..{config.H - 1}")
    w = collect_slice_weights(params, config, normalizer.inputs(sample.features()))[layer - 1][head]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "z"] + [f"w{j}" for j in range(config.M)] + ["argmax"])
    for xyz, row in zip(sample.coords, w):
        writer.writerow([repr(float(v)) for v in xyz] + [repr(float(v)) for v in row] + [int(np.argmax(row))])
    return buf.getvalue()


@dataclass
class AblationRow:
    variant: str
    rel_l2: float
    final_loss: float
    kl_mean: float


def ablation_matrix(base: ModelConfig, train_samples: Sequence[MeshSample], test_samples: Sequence[MeshSample],
                    normalizer: Normalizer, train_config: TrainConfig) -> list[AblationRow]:
    """Train every ablation variant from the same seed and data; test relative L2 and mean KL per variant."""
    rows = []
    for label, switches in ABLATION_VARIANTS:
        config = replace(base, **switches)
        result = train(config, train_samples, normalizer, train_config)
        report = evaluate(model_predictor(result.params, config, normalizer), test_samples)
        kl = diagnose_kl(result.params, config, test_samples, normalizer)
        rows.append(AblationRow(label, float(np.mean(list(report.rel_l2.values()))), result.losses[-1], kl.mean))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "rel_l2", "final_loss", "kl_mean"])
    for r in rows:
        writer.writerow([r.variant, repr(r.rel_l2), repr(r.final_loss), repr(r.kl_mean)])
    return buf.getvalue()
