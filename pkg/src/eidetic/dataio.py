"""Mesh samples on disk, synthetic ellipsoid datasets, feature normalisation.

``TPP1`` sample layout (little-endian)::

    b"TPP1"
    u32 N, u32 d_coords (=3), u32 has_normals, u32 d_extra, u32 d_out, u32 has_areas
    f64 coords[N*3]
    f64 normals[N*3]      if has_normals
    f64 extra[N*d_extra]  if d_extra > 0
    f64 targets[N*d_out]
    f64 areas[N]          if has_areas

``read_sample`` reads the file into memory once, copies each section out and
validates; peak allocation stays below 3x the payload size.

Manifest JSON keys: ``manifest_version`` (1), ``split`` (train|test),
``samples`` (paths relative to the manifest), ``input_channels``,
``output_channels``, ``normalization`` {input_mean, input_std, target_mean,
target_std}.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import ellipeinc, ellipkinc

from .errors import FormatError, ValidationError

SAMPLE_MAGIC = b"TPP1"
STD_FLOOR = 1e-8
FLOW_DIRECTION = (1.0, 0.0, 0.0)
LIFT_DIRECTION = (0.0, 0.0, 1.0)


@dataclass
class MeshSample:
    coords: np.ndarray
    targets: np.ndarray
    normals: np.ndarray | None = None
    extra: np.ndarray | None = None
    areas: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(self.coords.shape[0])

    @property
    def d_out(self) -> int:
        return int(self.targets.shape[1])

    @property
    def d_extra(self) -> int:
        return 0 if self.extra is None else int(self.extra.shape[1])

    def validate(self) -> MeshSample:
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValidationError(f"coords must be N x 3, got {self.coords.shape}")
        n = self.n
        if n < 1:
            raise ValidationError("a sample needs at least one point (N=0)")
        if self.targets.ndim != 2 or self.targets.shape[0] != n or self.targets.shape[1] < 1:
            raise ValidationError(f"targets must be {n} x d_out, got {self.targets.shape}")
        if self.normals is not None:
            if self.normals.shape != (n, 3):
                raise ValidationError(f"normals must be {n} x 3, got {self.normals.shape}")
            dev = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max()
            if dev > 1e-6:
                raise ValidationError(f"normals must be unit length (max deviation {dev:.2e})")
        if self.extra is not None and (self.extra.ndim != 2 or self.extra.shape[0] != n or self.extra.shape[1] < 1):
            raise ValidationError(f"extra must be {n} x d_e, got {self.extra.shape}")
        if self.areas is not None:
            if self.areas.shape != (n,):
                raise ValidationError(f"areas must have shape ({n},), got {self.areas.shape}")
            if np.any(self.areas <= 0):
                raise ValidationError("areas must be strictly positive")
        return self

    def features(self) -> np.ndarray:
        """Per-point model input: coords, then normals, then extra channels."""
        cols = [self.coords] + [a for a in (self.normals, self.extra) if a is not None]
        return np.concatenate(cols, axis=1)


def write_sample(path, sample: MeshSample) -> None:
    sample.validate()
    header = struct.pack("<4s6I", SAMPLE_MAGIC, sample.n, 3, int(sample.normals is not None), sample.d_extra,
                         sample.d_out, int(sample.areas is not None))
    arrays = [sample.coords, sample.normals, sample.extra, sample.targets, sample.areas]
    body = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays if a is not None]
    Path(path).write_bytes(header + b"".join(body))


def read_sample(path) -> MeshSample:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte offset 0")
    if len(blob) < 28:
        raise FormatError(f"{path}: truncated in section 'header' at byte offset {len(blob)}")
    n, d_coords, has_normals, d_extra, d_out, has_areas = struct.unpack_from("<6I", blob, 4)
    if d_coords != 3:
        raise FormatError(f"{path}: d_coords must be 3, got {d_coords} at byte offset 8")
    offset = 28
    sections = [("coords", (n, 3)), ("normals", (n, 3) if has_normals else None),
                ("extra", (n, d_extra) if d_extra else None), ("targets", (n, d_out)),
                ("areas", (n,) if has_areas else None)]
    out = {}
    for name, shape in sections:
        if shape is None:
            out[name] = None
            continue
        count = int(np.prod(shape))
        if offset + 8 * count > len(blob):
            raise FormatError(f"{path}: truncated in section '{name}' at byte offset {offset} "
                              f"(need {8 * count} bytes, {len(blob) - offset} left)")
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes at byte offset {offset}")
    return MeshSample(**out).validate()


# -- synthetic geometry -----------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    """n near-uniform points on the unit sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def ellipsoid_surface_area(a: float, b: float, c: float) -> float:
    """Closed-form surface area of an ellipsoid via incomplete elliptic integrals."""
    a, b, c = sorted((a, b, c), reverse=True)
    if math.isclose(a, c, rel_tol=1e-12):
        return 4.0 * math.pi * a * a
    phi = math.acos(c / a)
    k2 = (a * a * (b * b - c * c)) / (b * b * (a * a - c * c))
    s = math.sin(phi)
    return 2.0 * math.pi * c * c + 2.0 * math.pi * a * b / s * (
        ellipeinc(phi, k2) * s * s + ellipkinc(phi, k2) * math.cos(phi) ** 2)


def surface_pressure(normals: np.ndarray, flow=FLOW_DIRECTION) -> np.ndarray:
    """Synthetic pressure coefficient on a body in a uniform stream.

    With ``c = -n . flow`` (1 at the stagnation point), the field is the
    potential-flow sphere value ``1 - 9/4 (1 - c^2)`` plus an asymmetric
    ``0.5 c`` term that mimics a low-pressure wake and gives non-zero drag and,
    on rotated ellipsoids, non-zero lift.
    """
    c = -normals @ np.asarray(flow, dtype=np.float64)
    return 1.0 - 2.25 * (1.0 - c * c) + 0.5 * c


def make_ellipsoid(n_points: int, axes: Sequence[float], rotation: np.ndarray) -> MeshSample:
    """Ellipsoid point cloud with exact normals and Jacobian-weighted point areas."""
    axes = np.asarray(axes, dtype=np.float64)
    u = fibonacci_sphere(n_points)
    grad = u / axes
    stretch = np.linalg.norm(grad, axis=1)
    areas = (4.0 * math.pi / n_points) * np.prod(axes) * stretch
    coords = (u * axes) @ rotation.T
    normals = (grad / stretch[:, None]) @ rotation.T
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return MeshSample(coords=coords, targets=surface_pressure(normals)[:, None], normals=normals, areas=areas)


def gen_sphere_dataset(count: int, n_points: int, seed: int, axis_range=(0.6, 1.4)) -> list[MeshSample]:
    """Randomly scaled and rotated ellipsoids carrying :func:`surface_pressure` targets."""
    if n_points < 10:
        raise ValidationError(f"n_points must be >= 10, got {n_points}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        axes = rng.uniform(*axis_range, size=3)
        rotation = Rotation.random(random_state=rng).as_matrix()
        samples.append(make_ellipsoid(n_points, axes, rotation).validate())
    return samples


# -- normalisation ----------------------------------------------------------

def _channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # offsetting by the minimum keeps constant channels exactly constant
    low = x.min(axis=0)
    mean = low + (x - low).mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return mean, std


@dataclass
class Normalizer:
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    @classmethod
    def fit(cls, samples: Sequence[MeshSample]) -> Normalizer:
        if not samples:
            raise ValidationError("normalisation needs at least one training sample")
        xm, xs = _channel_stats(np.concatenate([s.features() for s in samples]))
        ym, ys = _channel_stats(np.concatenate([s.targets for s in samples]))
        return cls(xm, xs, ym, ys)

    def inputs(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_std

    def targets(self, y: np.ndarray) -> np.ndarray:
        return (y - self.target_mean) / self.target_std

    def restore_targets(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_std + self.target_mean

    def restore_inputs(self, x: np.ndarray) -> np.ndarray:
        return x * self.input_std + self.input_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("input_mean", "input_std", "target_mean", "target_std")}

    @classmethod
    def from_dict(cls, data: dict) -> Normalizer:
        return cls(**{k: np.asarray(data[k], dtype=np.float64)
                      for k in ("input_mean", "input_std", "target_mean", "target_std")})


def normalize(samples: Sequence[MeshSample], stats: Normalizer | None = None):
    """Normalised (features, targets) pairs plus the statistics used.

    Pass the training statistics when normalising a test split.
    """
    stats = stats or Normalizer.fit(samples)
    return [(stats.inputs(s.features()), stats.targets(s.targets)) for s in samples], stats


# -- manifests ----------------------------------------------------------------

def channel_names(sample: MeshSample) -> tuple[list[str], list[str]]:
    names = ["x", "y", "z"]
    if sample.normals is not None:
        names += ["nx", "ny", "nz"]
    names += [f"extra{i}" for i in range(sample.d_extra)]
    outputs = ["pressure"] + [f"field{i}" for i in range(1, sample.d_out)]
    return names, outputs


@dataclass
class DatasetManifest:
    path: Path
    split: str
    samples: list[str]
    input_channels: list[str]
    output_channels: list[str]
    normalization: Normalizer
    extras: dict = field(default_factory=dict)

    def sample_paths(self) -> list[Path]:
        return [self.path.parent / s for s in self.samples]

    def load(self) -> list[MeshSample]:
        return [read_sample(p) for p in self.sample_paths()]


def write_manifest(path, split: str, sample_paths: Sequence, input_channels, output_channels,
                   normalization: Normalizer, extras: dict | None = None) -> None:
    path = Path(path)
    doc = {
        "manifest_version": 1,
        "split": split,
        "samples": [Path(p).relative_to(path.parent).as_posix() for p in sample_paths],
        "input_channels": list(input_channels),
        "output_channels": list(output_channels),
        "normalization": normalization.to_dict(),
    }
    if extras:
        doc["extras"] = extras
    path.write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path, check_samples: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from exc
    missing = {"split", "samples", "input_channels", "output_channels", "normalization"} - set(doc)
    if missing:
        raise FormatError(f"{path}: manifest missing keys {sorted(missing)}")
    if doc["split"] not in ("train", "test"):
        raise FormatError(f"{path}: split must be train or test, got {doc['split']!r}")
    manifest = DatasetManifest(path, doc["split"], list(doc["samples"]), list(doc["input_channels"]),
                               list(doc["output_channels"]), Normalizer.from_dict(doc["normalization"]),
                               doc.get("extras", {}))
    if check_samples:
        for p in manifest.sample_paths():
            if not p.exists():
                raise ValidationError(f"{path}: listed sample {p} does not exist")
            s = read_sample(p)
            if s.features().shape[1] != len(manifest.input_channels) or s.d_out != len(manifest.output_channels):
                raise ValidationError(f"{path}: channel widths of {p} disagree with the manifest")
    return manifest


def write_dataset(out_dir, train: Sequence[MeshSample], test: Sequence[MeshSample],
                  extras: dict | None = None) -> tuple[Path, Path]:
    """Write both splits plus manifests (test carries the training statistics)."""
    out_dir = Path(out_dir)
    stats = Normalizer.fit(train)
    inputs, outputs = channel_names(train[0])
    manifests = []
    for split, samples in (("train", train), ("test", test)):
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        paths = []
        for i, s in enumerate(samples):
            p = out_dir / split / f"sample_{i:04d}.tpp"
            write_sample(p, s)
            paths.append(p)
        mpath = out_dir / f"{split}_manifest.json"
        write_manifest(mpath, split, paths, inputs, outputs, stats, extras)
        manifests.append(mpath)
    return manifests[0], manifests[1]
