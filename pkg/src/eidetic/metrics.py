"""Field and coefficient error metrics."""

from __future__ import annotations

import numpy as np

from .dataio import MeshSample
from .errors import DomainError, ShapeError, ValidationError
from .tensor import Tensor


def _array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def relative_l2(pred, truth) -> float:
    """||pred - truth|| / ||truth|| over the flattened field."""
    pred, truth = _array(pred), _array(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"relative_l2 needs equal shapes, got {pred.shape} and {truth.shape}")
    denom = float(np.linalg.norm(truth.ravel()))
    if denom == 0.0:
        raise DomainError("relative L2 is undefined for a zero-norm truth field")
    return float(np.linalg.norm((pred - truth).ravel())) / denom


def r_squared(pred, truth) -> float:
    pred, truth = _array(pred).ravel(), _array(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"r_squared needs equal lengths, got {pred.size} and {truth.size}")
    if truth.size < 2:
        raise DomainError(f"r_squared needs at least 2 values, got {truth.size}")
    spread = float(np.sum((truth - truth.mean()) ** 2))
    if spread == 0.0:
        raise DomainError("r_squared is undefined for a constant truth series")
    return 1.0 - float(np.sum((truth - pred) ** 2)) / spread


def aero_coefficient(sample: MeshSample, pressure, shear=None, direction=(1.0, 0.0, 0.0), rho: float = 1.0,
                     v_inf: float = 1.0, ref_area: float = 1.0) -> float:
    """Force coefficient along ``direction`` from surface pressure and optional wall shear.

    ``shear`` holds the per-point traction vector (shear tensor applied to the
    normal), so its contribution is ``shear . d``. Without it the result is the
    pressure-only coefficient. Drag and lift differ only in ``direction``.
    """
    if sample.normals is None or sample.areas is None:
        raise ValidationError("aero_coefficient needs a sample with normals and areas")
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValidationError(f"direction must be a unit 3-vector, got {direction}")
    if rho <= 0 or v_inf <= 0 or ref_area <= 0:
        raise ValidationError("rho, v_inf and ref_area must be positive")
    p = _array(pressure).reshape(-1)
    if p.shape != (sample.n,):
        raise ShapeError(f"pressure must have {sample.n} values, got {p.size}")
    local = -p * (sample.normals @ d)
    if shear is not None:
        tau = _array(shear)
        if tau.shape != (sample.n, 3):
            raise ShapeError(f"shear must be {sample.n} x 3, got {tau.shape}")
        local = local + tau @ d
    # sorted summation keeps the result independent of point order
    force = float(np.sum(np.sort(local * sample.areas)))
    return force / (0.5 * rho * v_inf ** 2 * ref_area)
