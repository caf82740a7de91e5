"""Fast invariant suite run by ``eidetic selftest``.

Each check returns a :class:`CheckResult`; the suite never raises on a failed
check, so one report lists every problem.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import dataio as D
from . import tensor as T
from .attention import NoiseSource, SliceConfig, init_physics_attention, projection_activation_count, rep_slice
from .diagnostics import kl_uniform
from .gradcheck import check_gradients
from .metrics import r_squared, relative_l2
from .model import ModelConfig, init_params, load_checkpoint, model_forward, save_checkpoint
from .parallel import layer_comm_scalars, measure_layer_comm, serial_parallel_check
from .tensor import Tensor
from .train import OptimState, adamw_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def _gradients() -> CheckResult:
    cfg = ModelConfig(L=1, H=2, C=4, M=3, d_in=3, d_out=1, seed=1)
    params = init_params(cfg)
    x = np.random.default_rng(0).standard_normal((4, 3))
    results = check_gradients(lambda: (model_forward(params, cfg, x) ** 2).sum(), params.named_parameters())
    worst = max(results, key=lambda r: r.max_rel_error)
    return CheckResult("gradients", worst.max_rel_error <= 1e-4, f"worst {worst.name} {worst.max_rel_error:.2e}")


def _slice_weights() -> CheckResult:
    config = SliceConfig(M=8, H=2, C=8)
    rng = np.random.default_rng(1)
    params = init_physics_attention(config, rng)
    x = Tensor(rng.standard_normal((200, 4)))
    head = params.heads[0]
    tau = 0.37
    w = rep_slice(x, tau, head)
    ref = T.softmax_temp(T.linear(x, head.slice_w, head.slice_b), tau)
    rows = float(np.abs(w.data.sum(axis=1) - 1).max())
    bitwise = w.data.tobytes() == ref.data.tobytes()
    logits = T.linear(x, head.slice_w, head.slice_b).data
    eps = NoiseSource(3).uniform(0, 0, np.arange(200), 8)
    cold = rep_slice(x, 1e-6, head, eps).data
    agree = float(np.mean(cold.argmax(1) == (logits - np.log(-np.log(eps))).argmax(1)))
    return CheckResult("slice weights", rows <= 1e-12 and bitwise and agree == 1.0,
                       f"row error {rows:.1e}, no-noise bitwise {bitwise}, gumbel argmax {agree:.3f}")


def _permutation() -> CheckResult:
    cfg = ModelConfig(L=2, H=2, C=8, M=4, d_in=3, d_out=1, seed=2)
    params = init_params(cfg)
    x = np.random.default_rng(2).standard_normal((17, 3))
    perm = np.random.default_rng(3).permutation(17)
    ok = True
    for mode in ("no_noise", "train_noise"):
        out = model_forward(params, cfg, x, mode, NoiseSource(4)).data
        ok &= np.array_equal(model_forward(params, cfg, x[perm], mode, NoiseSource(4), point_ids=perm).data,
                             out[perm])
    return CheckResult("permutation equivariance", bool(ok))


def _parallel() -> CheckResult:
    results = serial_parallel_check(ModelConfig(L=2, H=2, C=8, M=4, d_in=3, d_out=1), 32, [1, 2, 4], seed=5)
    return CheckResult("serial/parallel", all(r.passed for r in results), "; ".join(r.line() for r in results))


def _comm() -> CheckResult:
    totals = {n: measure_layer_comm(n, 4, M=4, C=8, H=2).layer_totals()[0] for n in (16, 200, 3000)}
    ok = set(totals.values()) == {layer_comm_scalars(4, 4, 8, 2)}
    return CheckResult("comm invariance", ok, f"scalars per layer {sorted(set(totals.values()))}")


def _speedup() -> CheckResult:
    one = projection_activation_count(100, SliceConfig(M=4, H=2, C=8))
    two = projection_activation_count(100, SliceConfig(M=4, H=2, C=8, two_projection=True))
    return CheckResult("speedup accounting", 2 * one == two, f"{one} vs {two}")


def _metrics() -> CheckResult:
    ok = relative_l2([2.0, 4.0], [1.0, 2.0]) == 1.0 and r_squared([1, 2, 4], [1, 2, 3]) == 0.5
    ok &= abs(kl_uniform([[0.75, 0.25]]) - (0.75 * math.log(1.5) + 0.25 * math.log(0.5))) <= 1e-15
    p = Tensor([0.0])
    adamw_step([p], [np.ones(1)], OptimState.for_params([p], lr=1e-3))
    ok &= abs(p.data[0] + 1e-3 / (1 + 1e-8)) <= 1e-18
    return CheckResult("metric examples", bool(ok))


def _round_trips() -> CheckResult:
    rng = np.random.default_rng(6)
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "s.tpp"
        for mask in range(8):
            n = rng.standard_normal((9, 3))
            s = D.MeshSample(rng.standard_normal((9, 3)), rng.standard_normal((9, 2)),
                             n / np.linalg.norm(n, axis=1, keepdims=True) if mask & 1 else None,
                             rng.standard_normal((9, 1)) if mask & 2 else None,
                             rng.uniform(0.1, 1, 9) if mask & 4 else None)
            D.write_sample(path, s)
            back = D.read_sample(path)
            for name in ("coords", "targets", "normals", "extra", "areas"):
                a, b = getattr(s, name), getattr(back, name)
                ok &= (a is None and b is None) or (a is not None and b is not None and a.tobytes() == b.tobytes())
        cfg = ModelConfig(L=1, H=2, C=4, M=2, d_in=3)
        params = init_params(cfg)
        save_checkpoint(Path(tmp) / "m.tppc", params, cfg)
        loaded, cfg2 = load_checkpoint(Path(tmp) / "m.tppc")
        ok &= cfg2 == cfg and all(a.data.tobytes() == b.data.tobytes()
                                  for a, b in zip(params.parameters(), loaded.parameters()))
    return CheckResult("format round-trips", bool(ok))


CHECKS: tuple[Callable[[], CheckResult], ...] = (
    _gradients, _slice_weights, _permutation, _parallel, _comm, _speedup, _metrics, _round_trips,
)


def run_selftest() -> list[CheckResult]:
    out = []
    for check in CHECKS:
        try:
            out.append(check())
        except Exception as exc:  # a crashing check is reported, not raised
            out.append(CheckResult(check.__name__.strip("_"), False, f"raised {type(exc).__name__}: {exc}"))
    return out
