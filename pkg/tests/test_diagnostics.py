import math

import numpy as np
import pytest

from eidetic import dataio as D
from eidetic.diagnostics import (
    ABLATION_VARIANTS,
    ablation_csv,
    ablation_matrix,
    diagnose_kl,
    kl_uniform,
    slice_weights_csv,
)
from eidetic.errors import ValidationError
from eidetic.model import ModelConfig, init_params
from eidetic.tensor import Tensor
from eidetic.train import TrainConfig

SMALL = ModelConfig(L=3, H=2, C=8, M=4, d_in=6, d_out=1, seed=2)


def test_kl_examples():
    assert kl_uniform(np.full((5, 4), 0.25)) == 0.0
    assert kl_uniform(np.eye(6)) == pytest.approx(math.log(6), abs=1e-15)
    # 0.75 log 1.5 + 0.25 log 0.5, evaluated by hand
    assert kl_uniform([[0.75, 0.25]]) == pytest.approx(0.130812, abs=5e-7)
    with pytest.raises(ValidationError, match="sum to 1"):
        kl_uniform([[0.5, 0.6]])


def test_kl_bounds_on_random_rows():
    rng = np.random.default_rng(0)
    for M in (2, 8, 64):
        w = rng.dirichlet(np.full(M, 0.3), size=100_000)
        w /= w.sum(axis=1, keepdims=True)
        rows = [kl_uniform(w[i:i + 1]) for i in range(0, 100_000, 997)]
        total = kl_uniform(w)
        assert 0.0 <= min(rows) and max(rows) <= math.log(M) + 1e-12
        assert 0.0 <= total <= math.log(M)


def test_kl_permutation_invariance():
    rng = np.random.default_rng(1)
    w = rng.dirichlet(np.ones(5), size=40)
    base = kl_uniform(w)
    assert kl_uniform(w[rng.permutation(40)]) == pytest.approx(base, abs=1e-15)
    assert kl_uniform(w[:, rng.permutation(5)]) == pytest.approx(base, abs=1e-15)


@pytest.fixture(scope="module")
def data():
    samples = D.gen_sphere_dataset(2, 30, seed=0)
    return samples, D.Normalizer.fit(samples)


def test_zero_slice_projection_gives_zero_kl(data):
    samples, norm = data
    params = init_params(SMALL)
    for layer in params.layers:
        for h in layer.attn.heads:
            h.slice_w = Tensor(np.zeros(h.slice_w.shape))
            h.slice_b = Tensor(np.zeros(h.slice_b.shape))
    report = diagnose_kl(params, SMALL, samples, norm)
    assert report.layers == [1, 2, 3]
    assert max(abs(v) for v in report.kl.values()) <= 1e-15


def test_kl_report_subset_and_csv(data):
    samples, norm = data
    report = diagnose_kl(init_params(SMALL), SMALL, samples, norm, layers=[3, 1])
    assert report.layers == [1, 3]
    lines = report.to_csv().splitlines()
    assert lines[0] == "layer,head,kl_mean" and len(lines) == 1 + 2 * SMALL.H
    assert [l.split(",")[:2] for l in lines[1:3]] == [["1", "0"], ["1", "1"]]
    with pytest.raises(ValidationError):
        diagnose_kl(init_params(SMALL), SMALL, samples, norm, layers=[4])


def test_slice_weight_export(data):
    samples, norm = data
    text = slice_weights_csv(init_params(SMALL), SMALL, samples[0], norm, layer=2, head=1)
    lines = text.splitlines()
    assert lines[0] == "x,y,z,w0,w1,w2,w3,argmax" and len(lines) == 31
    row = [float(v) for v in lines[1].split(",")[3:7]]
    assert abs(sum(row) - 1) <= 1e-12


def test_ablation_labels_and_smoke(data):
    samples, norm = data
    assert [v[0] for v in ABLATION_VARIANTS] == ["Transolver", "+ Ada-Temp", "+ Ada-Temp, Speedup", "Transolver++"]
    rows = ablation_matrix(ModelConfig(L=1, H=2, C=8, M=4, d_in=6), samples, samples, norm, TrainConfig(epochs=2))
    assert [r.variant for r in rows] == [v[0] for v in ABLATION_VARIANTS]
    assert all(math.isfinite(r.rel_l2) and math.isfinite(r.final_loss) for r in rows)
    assert len(ablation_csv(rows).splitlines()) == 5
