"""Field-prediction model: point embedding, pre-norm blocks, linear head.

Checkpoint layout (``TPPC``, all little-endian)::

    b"TPPC"  u32 version
    i64 x 10 : L, H, C, M, d_in, d_out, seed, ada_temp, reparam, two_projection
    f64 x 4  : mlp_ratio, tau0, tau_min, eps_denom
    f64 ...  : every parameter array, row-major, in ``named_parameters()`` order
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (
    NOISE_MODES,
    NoiseSource,
    PhysicsAttentionParams,
    SliceConfig,
    init_physics_attention,
    physics_attention_forward,
    uniform_weight,
    zeros,
)
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TPPC"
CHECKPOINT_VERSION = 1
_INT_FIELDS = ("L", "H", "C", "M", "d_in", "d_out", "seed", "ada_temp", "reparam", "two_projection")
_FLOAT_FIELDS = ("mlp_ratio", "tau0", "tau_min", "eps_denom")


@dataclass(frozen=True)
class ModelConfig:
    L: int = 2
    H: int = 4
    C: int = 32
    M: int = 8
    d_in: int = 6
    d_out: int = 1
    mlp_ratio: float = 2.0
    tau0: float = 0.5
    tau_min: float = 0.1
    eps_denom: float = 1e-8
    seed: int = 0
    # ablation switches; all-defaults is the full model
    ada_temp: bool = True
    reparam: bool = True
    two_projection: bool = False

    def __post_init__(self):
        problems = []
        for name in ("L", "H", "C", "M", "d_in", "d_out"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} >= 1 (got {getattr(self, name)})")
        if self.H >= 1 and self.C % self.H:
            problems.append(f"C mod H == 0 (got C={self.C}, H={self.H})")
        if self.mlp_ratio <= 0:
            problems.append(f"mlp_ratio > 0 (got {self.mlp_ratio})")
        if self.tau0 <= 0 or self.tau_min <= 0 or self.eps_denom <= 0:
            problems.append("tau0, tau_min, eps_denom > 0")
        if problems:
            raise ConfigError("invalid model config, violated: " + "; ".join(problems))

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.C)))

    def slice_config(self, mode: str = "no_noise") -> SliceConfig:
        if mode not in NOISE_MODES:
            raise ConfigError(f"mode must be one of {NOISE_MODES}, got {mode!r}")
        return SliceConfig(M=self.M, H=self.H, C=self.C, tau0=self.tau0, tau_min=self.tau_min,
                           eps_denom=self.eps_denom, noise_mode=mode if self.reparam else "no_noise",
                           ada_temp=self.ada_temp, two_projection=self.two_projection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: PhysicsAttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.ln1_g", self.ln1_g), (f"{prefix}.ln1_b", self.ln1_b)]
        out += self.attn.named(f"{prefix}.attn")
        out += [(f"{prefix}.{n}", getattr(self, n)) for n in ("ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b")]
        return out


@dataclass
class ModelParams:
    emb1_w: Tensor
    emb1_b: Tensor
    emb2_w: Tensor
    emb2_b: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    head_w: Tensor | None = None
    head_b: Tensor | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("emb1_w", self.emb1_w), ("emb1_b", self.emb1_b), ("emb2_w", self.emb2_w), ("emb2_b", self.emb2_b)]
        for i, layer in enumerate(self.layers):
            out += layer.named(f"layers{i}")
        return out + [("head_w", self.head_w), ("head_b", self.head_b)]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def count(self) -> int:
        return sum(p.size for p in self.parameters())


def init_params(config: ModelConfig) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(config.seed)
    C = config.C
    params = ModelParams(uniform_weight(rng, config.d_in, C), zeros(C), uniform_weight(rng, C, C), zeros(C))
    slice_cfg = config.slice_config()
    for _ in range(config.L):
        params.layers.append(LayerParams(
            ln1_g=Tensor(np.ones(C), requires_grad=True), ln1_b=zeros(C),
            attn=init_physics_attention(slice_cfg, rng),
            ln2_g=Tensor(np.ones(C), requires_grad=True), ln2_b=zeros(C),
            ff1_w=uniform_weight(rng, C, config.hidden), ff1_b=zeros(config.hidden),
            ff2_w=uniform_weight(rng, config.hidden, C), ff2_b=zeros(C),
        ))
    params.head_w = uniform_weight(rng, C, config.d_out)
    params.head_b = zeros(config.d_out)
    return params


def parameter_count(config: ModelConfig) -> int:
    C, ch, M, hid = config.C, config.C // config.H, config.M, config.hidden
    per_head = (ch * M + M) + (ch + 1) + 3 * (ch * ch + ch)
    attn = (C * C + C) * (3 if config.two_projection else 2) + config.H * per_head
    layer = 4 * C + attn + (C * hid + hid) + (hid * C + C)
    return (config.d_in * C + C) + (C * C + C) + config.L * layer + (C * config.d_out + config.d_out)


# -- forward pieces (shared with the rank-parallel runner) ------------------

def embed(params: ModelParams, features: Tensor) -> Tensor:
    h = T.gelu(T.linear(features, params.emb1_w, params.emb1_b))
    return T.linear(h, params.emb2_w, params.emb2_b)


def feedforward(layer: LayerParams, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, layer.ff1_w, layer.ff1_b))
    return T.linear(h, layer.ff2_w, layer.ff2_b)


def head(params: ModelParams, x: Tensor) -> Tensor:
    return T.linear(x, params.head_w, params.head_b)


def check_features(config: ModelConfig, features) -> Tensor:
    features = T.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != config.d_in:
        raise ShapeError(f"features must be N x {config.d_in}, got shape {features.shape}")
    return features


def model_forward(params: ModelParams, config: ModelConfig, features, mode: str = "no_noise",
                  noise: NoiseSource | None = None, point_ids: np.ndarray | None = None,
                  blocks=None, record: list | None = None, stats: dict | None = None) -> Tensor:
    """Predict N x d_out fields.

    ``record`` (a list) receives each layer's H x N x M slice weights;
    ``blocks`` is forwarded to every Physics-Attention layer.
    """
    features = check_features(config, features)
    slice_cfg = config.slice_config(mode)
    if slice_cfg.noise_mode == "train_noise" and noise is None:
        noise = NoiseSource(config.seed)
    x = embed(params, features)
    for i, layer in enumerate(params.layers):
        attn_out, w = physics_attention_forward(T.layer_norm(x, layer.ln1_g, layer.ln1_b), slice_cfg, layer.attn,
                                                noise, layer=i, point_ids=point_ids, blocks=blocks, stats=stats)
        if record is not None:
            record.append(w)
        x = x + attn_out
        x = x + feedforward(layer, T.layer_norm(x, layer.ln2_g, layer.ln2_b))
    return head(params, x)


def collect_slice_weights(params: ModelParams, config: ModelConfig, features) -> list[list[np.ndarray]]:
    """Per layer, per head N x M slice weights of a noise-free forward."""
    record: list[np.ndarray] = []
    model_forward(params, config, features, mode="no_noise", record=record)
    return [[w[h] for h in range(config.H)] for w in record]


# -- checkpoint I/O ---------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack(f"<{len(_INT_FIELDS)}q", *(int(getattr(config, n)) for n in _INT_FIELDS)),
             struct.pack(f"<{len(_FLOAT_FIELDS)}d", *(float(getattr(config, n)) for n in _FLOAT_FIELDS))]
    parts += [np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.parameters()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r} at byte offset 0")
    header = 8 + 8 * len(_INT_FIELDS) + 8 * len(_FLOAT_FIELDS)
    if len(blob) < header:
        raise FormatError(f"checkpoint truncated in header at byte offset {len(blob)}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    ints = struct.unpack_from(f"<{len(_INT_FIELDS)}q", blob, 8)
    floats = struct.unpack_from(f"<{len(_FLOAT_FIELDS)}d", blob, 8 + 8 * len(_INT_FIELDS))
    values: dict = dict(zip(_FLOAT_FIELDS, floats))
    for name, v in zip(_INT_FIELDS, ints):
        values[name] = bool(v) if name in ("ada_temp", "reparam", "two_projection") else int(v)
    config = ModelConfig(**values)
    params = init_params(config)
    offset = header
    for name, p in params.named_parameters():
        nbytes = 8 * p.size
        if offset + nbytes > len(blob):
            raise FormatError(f"checkpoint truncated in parameter {name!r} at byte offset {offset}")
        p.data = np.frombuffer(blob, dtype="<f8", count=p.size, offset=offset).astype(np.float64).reshape(p.shape)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after parameters at byte offset {offset}")
    return params, config
