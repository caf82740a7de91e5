"""Physics-Attention with eidetic states.

Points are softly assigned to ``M`` slices per head (adaptive temperature plus
optional Gumbel reparameterisation), aggregated into slice states, mixed by
ordinary attention among the states, and scattered back to the points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError
from .tensor import Tensor

NOISE_MODES = ("train_noise", "no_noise")
EPS_CLAMP = 1e-12

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class SliceConfig:
    M: int
    H: int
    C: int
    tau0: float = 0.5
    tau_min: float = 0.1
    eps_denom: float = 1e-8
    noise_mode: str = "no_noise"
    ada_temp: bool = True
    two_projection: bool = False

    def __post_init__(self):
        for name in ("M", "H", "C"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.C % self.H:
            raise ConfigError(f"C mod H must be 0 (C={self.C}, H={self.H})")
        if self.tau0 <= 0:
            raise ConfigError(f"tau0 must be positive, got {self.tau0}")
        if self.tau_min <= 0 or self.eps_denom <= 0:
            raise ConfigError("tau_min and eps_denom must be positive")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.C // self.H


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _MIX1
    z = z ^ (z >> np.uint64(27))
    z = z * _MIX2
    return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class NoiseSource:
    """Counter-based uniform stream keyed by (step, layer, head, point, slice).

    Because every value is a pure function of its key, a point draws the same
    noise no matter which rank holds it or in which order ranks run.
    """

    seed: int = 0
    step: int = 0

    def at_step(self, step: int) -> NoiseSource:
        return NoiseSource(self.seed, step)

    def uniform(self, layer: int, head: int, point_ids: np.ndarray, n_slices: int) -> np.ndarray:
        ids = np.asarray(point_ids, dtype=np.uint64).reshape(-1, 1)
        slices = np.arange(n_slices, dtype=np.uint64).reshape(1, -1)
        with np.errstate(over="ignore"):
            h = np.array([self.seed], dtype=np.uint64)
            for part in (self.step, layer, head):
                h = _splitmix(h ^ (np.uint64(part) + _GOLDEN) * _MIX1)
            h = _splitmix(h ^ _splitmix(ids + _GOLDEN))
            h = _splitmix(h + (slices + np.uint64(1)) * _GOLDEN)
        u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return np.clip(u, EPS_CLAMP, 1.0 - EPS_CLAMP)


@dataclass
class HeadParams:
    slice_w: Tensor
    slice_b: Tensor
    temp_w: Tensor
    temp_b: Tensor
    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{name}", getattr(self, name)) for name in
                ("slice_w", "slice_b", "temp_w", "temp_b", "q_w", "q_b", "k_w", "k_b", "v_w", "v_b")]


@dataclass
class PhysicsAttentionParams:
    in_w: Tensor
    in_b: Tensor
    heads: list[HeadParams]
    out_w: Tensor
    out_b: Tensor
    f_w: Tensor | None = None
    f_b: Tensor | None = None

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.in_w", self.in_w), (f"{prefix}.in_b", self.in_b)]
        if self.f_w is not None:
            out += [(f"{prefix}.f_w", self.f_w), (f"{prefix}.f_b", self.f_b)]
        for h, head in enumerate(self.heads):
            out += head.named(f"{prefix}.head{h}")
        return out + [(f"{prefix}.out_w", self.out_w), (f"{prefix}.out_b", self.out_b)]


def uniform_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_physics_attention(config: SliceConfig, rng: np.random.Generator) -> PhysicsAttentionParams:
    C, ch, M = config.C, config.head_dim, config.M
    in_w, in_b = uniform_weight(rng, C, C), zeros(C)
    f_w = f_b = None
    if config.two_projection:
        f_w, f_b = uniform_weight(rng, C, C), zeros(C)
    heads = []
    for _ in range(config.H):
        heads.append(HeadParams(
            slice_w=uniform_weight(rng, ch, M), slice_b=zeros(M),
            temp_w=uniform_weight(rng, ch, 1), temp_b=zeros(1),
            q_w=uniform_weight(rng, ch, ch), q_b=zeros(ch),
            k_w=uniform_weight(rng, ch, ch), k_b=zeros(ch),
            v_w=uniform_weight(rng, ch, ch), v_b=zeros(ch),
        ))
    return PhysicsAttentionParams(in_w, in_b, heads, uniform_weight(rng, C, C), zeros(C), f_w, f_b)


# -- the five stages -------------------------------------------------------

def ada_temp(x: Tensor, head: HeadParams, tau0: float, tau_min: float) -> Tensor:
    """Per-point temperature ``max(tau0 + linear(x), tau_min)``, shape (N, 1)."""
    return T.clamp_min(T.linear(x, head.temp_w, head.temp_b) + tau0, tau_min)


def gumbel_perturbation(eps: np.ndarray) -> np.ndarray:
    eps = np.clip(eps, EPS_CLAMP, 1.0 - EPS_CLAMP)
    return -np.log(-np.log(eps))


def rep_slice(x: Tensor, tau, head: HeadParams, eps: np.ndarray | None = None) -> Tensor:
    """Slice weights ``softmax((linear(x) - log(-log eps)) / tau)``.

    ``eps=None`` is the noise-free reduction (equivalent to eps = 1/e, where
    the Gumbel term vanishes) and skips the perturbation entirely.
    """
    if np.any(T.as_tensor(tau).data <= 0):
        raise DomainError("slice temperature must be positive")
    logits = T.linear(x, head.slice_w, head.slice_b)
    if eps is not None:
        logits = logits + gumbel_perturbation(eps)
    return T.softmax_temp(logits, tau)


def slice_partial_sums(x: Tensor, w: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalised state numerators (M, C_h) and slice masses (M,)."""
    n, m = w.shape
    outer = w.reshape(n, m, 1) * x.reshape(n, 1, x.shape[1])
    return T.sum_points(outer), T.sum_points(w)


def normalise_states(numerator: Tensor, mass: Tensor, eps_denom: float) -> Tensor:
    return numerator / (mass.reshape(mass.shape[0], 1) + eps_denom)


def compute_eidetic_states(x: Tensor, w: Tensor, eps_denom: float) -> Tensor:
    numerator, mass = slice_partial_sums(x, w)
    return normalise_states(numerator, mass, eps_denom)


def state_attention(s: Tensor, head: HeadParams) -> Tensor:
    q = T.linear(s, head.q_w, head.q_b)
    k = T.linear(s, head.k_w, head.k_b)
    v = T.linear(s, head.v_w, head.v_b)
    scores = T.softmax_temp(q @ k.T, math.sqrt(s.shape[1]))
    return scores @ v


def deslice(s_prime: Tensor, w: Tensor) -> Tensor:
    return w @ s_prime


# -- full layer ------------------------------------------------------------

@dataclass
class HeadInputs:
    """Per-head pointwise quantities for one block of points."""
    w: Tensor
    values: Tensor


def head_inputs(x: Tensor, config: SliceConfig, params: PhysicsAttentionParams, noise: NoiseSource | None,
                layer: int, point_ids: np.ndarray, stats: dict | None = None) -> list[HeadInputs]:
    """Project points and compute every head's slice weights (pointwise work only)."""
    z = T.linear(x, params.in_w, params.in_b)
    f = T.linear(x, params.f_w, params.f_b) if config.two_projection else None
    if stats is not None:
        stats["projection_scalars"] = stats.get("projection_scalars", 0) + z.size + (f.size if f is not None else 0)
    ch = config.head_dim
    use_noise = config.noise_mode == "train_noise"
    if use_noise and noise is None:
        raise ConfigError("train_noise mode needs a NoiseSource")
    out = []
    for h, head in enumerate(params.heads):
        cols = (slice(None), slice(h * ch, (h + 1) * ch))
        zh = z[cols]
        tau = ada_temp(zh, head, config.tau0, config.tau_min) if config.ada_temp else config.tau0
        eps = noise.uniform(layer, h, point_ids, config.M) if use_noise else None
        w = rep_slice(zh, tau, head, eps)
        out.append(HeadInputs(w, f[cols] if f is not None else zh))
    return out


def fold(parts: Sequence[Tensor]) -> Tensor:
    acc = parts[0]
    for p in parts[1:]:
        acc = acc + p
    return acc


def physics_attention_forward(x: Tensor, config: SliceConfig, params: PhysicsAttentionParams,
                              noise: NoiseSource | None = None, layer: int = 0,
                              point_ids: np.ndarray | None = None,
                              blocks: Sequence[tuple[int, int]] | None = None,
                              stats: dict | None = None) -> tuple[Tensor, np.ndarray]:
    """Serial Physics-Attention layer; returns ``(output, slice weights H x N x M)``.

    ``blocks`` (contiguous row ranges) switches the point reductions to
    per-block partial sums folded in ascending block order, reproducing the
    exact arithmetic of a rank-partitioned run without any collective.
    """
    n = x.shape[0]
    if point_ids is None:
        point_ids = np.arange(n)
    per_head = head_inputs(x, config, params, noise, layer, point_ids, stats)
    outs = []
    for hi, head in zip(per_head, params.heads):
        if blocks is None:
            s = compute_eidetic_states(hi.values, hi.w, config.eps_denom)
        else:
            rows = [(slice(a, b), slice(None)) for a, b in blocks]
            mass = fold([T.sum_points(hi.w[r]) for r in rows])
            s = fold([normalise_states(slice_partial_sums(hi.values[r], hi.w[r])[0], mass, config.eps_denom)
                      for r in rows])
        outs.append(deslice(state_attention(s, head), hi.w))
    merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    out = T.linear(merged, params.out_w, params.out_b)
    return out, np.stack([hi.w.data for hi in per_head])


def projection_activation_count(n_points: int, config: SliceConfig) -> int:
    """Scalars materialised by the input projection(s) of one layer."""
    return n_points * config.C * (2 if config.two_projection else 1)
