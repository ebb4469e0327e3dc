from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference

from hflsim.data import gen_blobs
from hflsim.errors import DimensionMismatch, EmptyShard
from hflsim.model import (
    Arch,
    ArchKind,
    Hyperparams,
    ModelParams,
    dump_csv,
    evaluate,
    init_params,
    local_train,
    loss_and_grad,
    predict_proba,
    softmax,
    unpack,
)

LOGREG = Arch(ArchKind.LOGREG, 2, 2)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.mark.parametrize("arch", [Arch(ArchKind.LOGREG, 3, 4), Arch(ArchKind.MLP1, 3, 3, 5)],
                         ids=["logreg", "mlp1"])
def test_gradient_matches_central_differences(arch):
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(25):
        p = ModelParams(rng.normal(0, 0.7, arch.size), arch)
        n = int(rng.integers(1, 9))
        x = rng.normal(size=(n, arch.d))
        y = rng.integers(0, arch.C, n)
        _, g = loss_and_grad(p, x, y)
        worst = max(worst, _rel_err(g, central_difference(p, x, y)))
    assert worst < 1e-5


def test_init_logreg_zeros_and_mlp_deterministic():
    np.testing.assert_array_equal(init_params(LOGREG, 5).values, np.zeros(6))
    mlp = Arch(ArchKind.MLP1, 2, 2, 4)
    assert init_params(mlp, 9) == init_params(mlp, 9)
    assert np.all(np.abs(init_params(mlp, 9).values) <= 1 / math.sqrt(2))


def test_layout():
    p = ModelParams(np.arange(6.0), LOGREG)
    w, b = unpack(p)
    np.testing.assert_array_equal(w, [[0, 1], [2, 3]])
    np.testing.assert_array_equal(b, [4, 5])
    assert Arch(ArchKind.MLP1, 3, 2, 4).size == 4 * 3 + 4 + 2 * 4 + 2


def test_loss_at_zero_is_ln2():
    x = np.random.default_rng(0).normal(size=(7, 2))
    loss, _ = loss_and_grad(init_params(LOGREG, 0), x, np.array([0, 1, 1, 0, 1, 0, 0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=3, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    z = np.array(vals).reshape(-1, 1) * np.array([[1.0, -0.5, 0.2]])
    assert np.all(np.abs(softmax(z).sum(axis=1) - 1) < 1e-12)


def test_single_step_is_negative_gradient():
    p = init_params(LOGREG, 0)
    x, y = np.array([[2.0, -4.0]]), np.array([1])
    out, n = local_train(p, x, y, Hyperparams(1.0, 1, 1), 0)
    _, g = loss_and_grad(p, x, y)
    assert n == 1
    np.testing.assert_array_equal(out.values, -g)
    # closed form: residual [0.5, -0.5]
    np.testing.assert_allclose(out.values, [-1.0, 2.0, 1.0, -2.0, -0.5, 0.5])


def test_zero_learning_rate_is_identity():
    ds = gen_blobs(2, 2, 10, 0.5, 1)
    p = ModelParams(np.linspace(-1, 1, 6), LOGREG)
    out, _ = local_train(p, ds.features, ds.labels, Hyperparams(0.0, 3, 4), 5)
    assert out == p


def test_local_train_pure_and_reduces_loss():
    ds = gen_blobs(2, 2, 40, 0.5, 2)
    p = init_params(LOGREG, 0)
    hp = Hyperparams(0.1, 2, 8)
    a, _ = local_train(p, ds.features, ds.labels, hp, 17)
    b, _ = local_train(p, ds.features, ds.labels, hp, 17)
    assert a == b
    assert loss_and_grad(a, ds.features, ds.labels)[0] < loss_and_grad(p, ds.features, ds.labels)[0]


def test_local_train_empty_shard():
    with pytest.raises(EmptyShard):
        local_train(init_params(LOGREG, 0), np.zeros((0, 2)), np.zeros(0, dtype=int), Hyperparams(), 0)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        loss_and_grad(init_params(LOGREG, 0), np.zeros((2, 3)), np.array([0, 1]))
    with pytest.raises(DimensionMismatch):
        ModelParams(np.zeros(5), LOGREG)


def test_evaluate_tie_rule():
    ds = gen_blobs(2, 2, 25, 0.5, 4)
    acc, loss = evaluate(init_params(LOGREG, 0), ds.features, ds.labels)
    assert acc == 0.5
    assert loss == pytest.approx(math.log(2))
    c3 = Arch(ArchKind.LOGREG, 2, 3)
    ds3 = gen_blobs(3, 2, 10, 0.5, 4)
    assert evaluate(init_params(c3, 0), ds3.features, ds3.labels)[1] == pytest.approx(math.log(3))


def test_long_training_separates_blobs():
    ds = gen_blobs(2, 2, 50, 0.3, 7)
    p, _ = local_train(init_params(LOGREG, 0), ds.features, ds.labels, Hyperparams(0.5, 50, 10), 1)
    assert evaluate(p, ds.features, ds.labels)[0] == 1.0


def test_mlp_trains():
    ds = gen_blobs(4, 2, 30, 0.3, 3)
    arch = Arch(ArchKind.MLP1, 2, 4, 8)
    p, _ = local_train(init_params(arch, 3), ds.features, ds.labels, Hyperparams(0.3, 60, 8), 1)
    assert evaluate(p, ds.features, ds.labels)[0] > 0.95
    assert predict_proba(p, ds.features[:3]).shape == (3, 4)


def test_dump_csv(tmp_path):
    dump_csv(ModelParams(np.array([0.5, -1, 0, 0, 0, 2]), LOGREG), tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "index,value" and lines[1] == "0,0.5" and len(lines) == 7
