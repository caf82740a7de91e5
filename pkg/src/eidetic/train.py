"""AdamW optimisation loop, training driver and evaluation report.

Training log CSV columns: ``epoch,loss,lr,seconds`` (``epoch`` is 1-based,
``loss`` the mean per-sample loss seen during that epoch, ``lr`` the rate used
for it, ``seconds`` wall time of the epoch, or 0 when timing is disabled).

Metrics report JSON keys: ``fields``, ``rel_l2`` (per field, mean over
samples), ``rel_l2_per_sample``, ``coefficients`` (per sample ``cd_pred``,
``cd_true``, ``cl_pred``, ``cl_true``), ``mean_coefficients``, ``coef_rel_l2``,
``r2`` (``C_D``/``C_L``, null when undefined), ``n_samples``, ``kl_report``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import NoiseSource
from .dataio import FLOW_DIRECTION, LIFT_DIRECTION, MeshSample, Normalizer, channel_names
from .errors import ConfigError, DomainError, ShapeError, TrainingError
from .metrics import aero_coefficient, r_squared, relative_l2
from .model import ModelConfig, ModelParams, init_params, model_forward, save_checkpoint
from .parallel import Collective, parallel_model_forward, partition_points
from .tensor import Tensor

LOG_HEADER = ("epoch", "loss", "lr", "seconds")
SCHEDULES = ("cosine", "constant")


# -- optimiser ----------------------------------------------------------------

@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                   **kwargs) -> OptimState:
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params],
                   lr=lr, weight_decay=weight_decay, **kwargs)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState,
               lr_t: float | None = None) -> OptimState:
    """One AdamW update in place: decoupled decay first, then bias-corrected Adam."""
    lr = state.lr if lr_t is None else lr_t
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adamw_step got {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and np.shape(g) != p.shape:
            raise ShapeError(f"gradient {i} has shape {np.shape(g)}, parameter has {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        theta = p.data * (1.0 - lr * state.weight_decay)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        theta = theta - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        theta.flags.writeable = False
        p.data = theta
    return state


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-5
    schedule: str = "cosine"
    batch_size: int = 1
    # one weight per field group; groups are output-channel index lists
    loss_weights: tuple[float, ...] = (1.0,)
    field_groups: tuple[tuple[int, ...], ...] | None = None
    seed: int = 0
    ranks: int = 1
    timing: bool = True

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs >= 1 (got {self.epochs})")
        if not self.lr > 0:
            problems.append(f"lr > 0 (got {self.lr})")
        if self.weight_decay < 0:
            problems.append(f"weight_decay >= 0 (got {self.weight_decay})")
        if self.schedule not in SCHEDULES:
            problems.append(f"schedule in {SCHEDULES} (got {self.schedule!r})")
        if self.batch_size < 1 or self.ranks < 1:
            problems.append("batch_size >= 1 and ranks >= 1")
        n_groups = 1 if self.field_groups is None else len(self.field_groups)
        if len(self.loss_weights) != n_groups:
            problems.append(f"one loss weight per field group ({len(self.loss_weights)} vs {n_groups})")
        if problems:
            raise ConfigError("invalid train config, violated: " + "; ".join(problems))

    def lr_at(self, epoch: int) -> float:
        """Rate for 0-based ``epoch``; cosine decays towards zero at the end of training."""
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        data = dict(data)
        if "loss_weights" in data:
            data["loss_weights"] = tuple(float(w) for w in data["loss_weights"])
        if data.get("field_groups") is not None:
            data["field_groups"] = tuple(tuple(int(c) for c in g) for g in data["field_groups"])
        return cls(**data)


# -- generic loop ------------------------------------------------------------------

LossFn = Callable[[int], tuple[Tensor, dict]]


def _first_non_finite(named: Sequence[tuple[str, np.ndarray | None]]) -> str | None:
    for name, arr in named:
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


def optimize(named_params: Sequence[tuple[str, Tensor]], losses: Sequence[LossFn], config: TrainConfig,
             on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Minimise the mean of ``losses`` with AdamW; returns the per-epoch log rows.

    Each loss callable takes the global step (used to key training noise) and
    returns the scalar loss plus named intermediates checked when it is not
    finite. Samples are visited in a seeded shuffled order, ``batch_size`` per
    optimizer step.
    """
    if not losses:
        raise ConfigError("training needs at least one sample")
    params = [p for _, p in named_params]
    state = OptimState.for_params(params, config.lr, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    log, step = [], 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = config.lr_at(epoch)
        order = rng.permutation(len(losses))
        seen = []
        for b in range(0, len(order), config.batch_size):
            batch = order[b:b + config.batch_size]
            T.zero_grad(params)
            for idx in batch:
                loss, parts = losses[idx](step)
                step += 1
                value = float(loss.item())
                if not math.isfinite(value):
                    culprit = _first_non_finite([(n, p.data) for n, p in named_params]
                                                + [(n, t.data) for n, t in parts.items()]) or "loss"
                    raise TrainingError(f"non-finite loss at epoch {epoch + 1}, sample {idx}; "
                                        f"first non-finite tensor: {culprit}")
                seen.append(value)
                (loss * (1.0 / len(batch))).backward()
            culprit = _first_non_finite([(f"grad of {n}", p.grad) for n, p in named_params])
            if culprit:
                raise TrainingError(f"non-finite gradient at epoch {epoch + 1}: {culprit}")
            adamw_step(params, [p.grad for p in params], state, lr)
        row = {"epoch": epoch + 1, "loss": float(np.mean(seen)), "lr": lr,
               "seconds": time.perf_counter() - start if config.timing else 0.0}
        log.append(row)
        if on_epoch:
            on_epoch(row)
    T.zero_grad(params)
    return log


def log_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    for r in rows:
        writer.writerow([r["epoch"], repr(r["loss"]), repr(r["lr"]), f"{r['seconds']:.6f}"])
    return buf.getvalue()


# -- model training --------------------------------------------------------------

def field_loss(pred: Tensor, truth: np.ndarray, normalizer: Normalizer, config: TrainConfig) -> Tensor:
    """Weighted sum over field groups of relative L2 on de-normalised predictions."""
    pred = pred * normalizer.target_std + normalizer.target_mean
    groups = config.field_groups or (tuple(range(truth.shape[1])),)
    total = None
    for weight, cols in zip(config.loss_weights, groups):
        cols = list(cols)
        p = pred if len(cols) == truth.shape[1] else pred[:, cols]
        y = truth[:, cols]
        term = T.sqrt(((p - y) ** 2).sum()) * (weight / _norm(y))
        total = term if total is None else total + term
    return total


def _norm(y: np.ndarray) -> float:
    n = float(np.linalg.norm(y.ravel()))
    if n == 0.0:
        raise DomainError("relative L2 loss needs a non-zero truth field")
    return n


def _parallel_field_loss(outs: Sequence[Tensor], truth: np.ndarray, normalizer: Normalizer, config: TrainConfig,
                         partition, collective: Collective) -> Tensor:
    """Same loss as :func:`field_loss`, with squared errors summed per rank then all-reduced."""
    groups = config.field_groups or (tuple(range(truth.shape[1])),)
    truths = partition.split(truth)
    total = None
    for weight, cols in zip(config.loss_weights, groups):
        cols = list(cols)
        local = []
        for out, y in zip(outs, truths):
            p = out * normalizer.target_std + normalizer.target_mean
            p = p if len(cols) == truth.shape[1] else p[:, cols]
            local.append(((p - y[:, cols]) ** 2).sum().reshape(1))
        sq = collective.all_reduce_sum(local, tag="loss")
        term = T.sqrt(sq.sum()) * (weight / _norm(truth[:, cols]))
        total = term if total is None else total + term
    return total


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    log: list[dict]
    checkpoint: Path | None = None
    log_path: Path | None = None

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.log]


def _check_width(model_config: ModelConfig, samples: Sequence[MeshSample]) -> None:
    for s in samples:
        if s.features().shape[1] != model_config.d_in or s.d_out != model_config.d_out:
            raise ShapeError(f"sample widths (in={s.features().shape[1]}, out={s.d_out}) do not match model "
                             f"(d_in={model_config.d_in}, d_out={model_config.d_out})")


def train(model_config: ModelConfig, samples: Sequence[MeshSample], normalizer: Normalizer,
          config: TrainConfig, params: ModelParams | None = None, out_dir=None) -> TrainResult:
    """Train on ``samples`` with noisy slicing; optionally write ``train_log.csv`` and ``model.tppc``."""
    if not samples:
        raise ConfigError("training needs a non-empty train split")
    _check_width(model_config, samples)
    params = params if params is not None else init_params(model_config)

    def make_loss(sample: MeshSample) -> LossFn:
        x = normalizer.inputs(sample.features())
        truth = sample.targets
        if config.ranks == 1:
            def loss_fn(step):
                pred = model_forward(params, model_config, x, "train_noise", NoiseSource(config.seed, step))
                return field_loss(pred, truth, normalizer, config), {"predictions": pred}
            return loss_fn
        partition = partition_points(sample.n, config.ranks)

        def parallel_loss(step):
            collective = Collective(config.ranks)
            outs = parallel_model_forward(params, model_config, x, partition, collective, "train_noise",
                                          NoiseSource(config.seed, step))
            named = {f"predictions[rank {k}]": o for k, o in enumerate(outs)}
            return _parallel_field_loss(outs, truth, normalizer, config, partition, collective), named
        return parallel_loss

    log = optimize(params.named_parameters(), [make_loss(s) for s in samples], config)
    result = TrainResult(params, model_config, log)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.log_path = out_dir / "train_log.csv"
        result.log_path.write_text(log_to_csv(log))
        result.checkpoint = out_dir / "model.tppc"
        save_checkpoint(result.checkpoint, params, model_config)
    return result


# -- evaluation ------------------------------------------------------------------------

@dataclass
class MetricsReport:
    fields: list[str]
    rel_l2: dict[str, float]
    rel_l2_per_sample: list[dict[str, float]]
    coefficients: list[dict[str, float]] = field(default_factory=list)
    mean_coefficients: dict[str, float] = field(default_factory=dict)
    coef_rel_l2: dict[str, float | None] = field(default_factory=dict)
    r2: dict[str, float | None] = field(default_factory=dict)
    kl_report: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n_samples"] = len(self.rel_l2_per_sample)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def model_predictor(params: ModelParams, model_config: ModelConfig, normalizer: Normalizer):
    """Noise-free predictions in physical (de-normalised) units."""
    def predict(sample: MeshSample) -> np.ndarray:
        pred = model_forward(params, model_config, normalizer.inputs(sample.features()), "no_noise")
        return normalizer.restore_targets(pred.data)
    return predict


def _safe(fn, *args) -> float | None:
    try:
        return fn(*args)
    except DomainError:
        return None


def evaluate(predict: Callable[[MeshSample], np.ndarray], samples: Sequence[MeshSample],
             field_names: Sequence[str] | None = None, pressure_channel: int = 0,
             drag_direction=FLOW_DIRECTION, lift_direction=LIFT_DIRECTION, rho: float = 1.0,
             v_inf: float = 1.0, ref_area: float = 1.0, kl_report: str | None = None) -> MetricsReport:
    """Per-field relative L2 and, when normals and areas exist, drag/lift coefficients with R²."""
    if not samples:
        raise ConfigError("evaluation needs a non-empty test split")
    names = list(field_names) if field_names is not None else channel_names(samples[0])[1]
    per_sample, coefs = [], []
    for s in samples:
        pred = np.asarray(predict(s), dtype=np.float64)
        if pred.shape != s.targets.shape:
            raise ShapeError(f"prediction shape {pred.shape} does not match targets {s.targets.shape}")
        per_sample.append({name: relative_l2(pred[:, j], s.targets[:, j]) for j, name in enumerate(names)})
        if s.normals is not None and s.areas is not None:
            kw = dict(rho=rho, v_inf=v_inf, ref_area=ref_area)
            p_hat, p = pred[:, pressure_channel], s.targets[:, pressure_channel]
            coefs.append({"cd_pred": aero_coefficient(s, p_hat, direction=drag_direction, **kw),
                          "cd_true": aero_coefficient(s, p, direction=drag_direction, **kw),
                          "cl_pred": aero_coefficient(s, p_hat, direction=lift_direction, **kw),
                          "cl_true": aero_coefficient(s, p, direction=lift_direction, **kw)})
    report = MetricsReport(names, {n: float(np.mean([r[n] for r in per_sample])) for n in names}, per_sample,
                           kl_report=kl_report)
    if coefs and len(coefs) == len(samples):
        report.coefficients = coefs
        report.mean_coefficients = {k: float(np.mean([c[k] for c in coefs])) for k in coefs[0]}
        for label, key in (("C_D", "cd"), ("C_L", "cl")):
            pred = [c[f"{key}_pred"] for c in coefs]
            truth = [c[f"{key}_true"] for c in coefs]
            report.r2[label] = _safe(r_squared, pred, truth)
            report.coef_rel_l2[label] = _safe(relative_l2, pred, truth)
    return report
