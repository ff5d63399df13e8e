"""LoRA experts: zero init, forward deltas, rank bounds, role freezing."""

import numpy as np
import pytest

from moelora.errors import ConfigError, ShapeError
from moelora.lora import (
    ExpertRole,
    experts_unchanged,
    lora_delta_w,
    lora_forward,
    lora_init,
    snapshot_experts,
)
from moelora.tensor import Tensor, matmul

RNG = np.random.default_rng(7)


def random_expert(d=6, k=5, rank=2, seed=0, trainable=True):
    e = lora_init(d, k, rank, ExpertRole.SPECIALIST, seed=seed, trainable=trainable)
    e.b.data[:] = RNG.normal(size=e.b.shape)  # break the zero init for value tests
    return e


def test_init_zero_delta():
    for d, k, r in [(4, 4, 2), (8, 3, 3), (16, 16, 8)]:
        e = lora_init(d, k, r, ExpertRole.BASE, seed=11)
        x = Tensor(RNG.normal(size=k))
        assert np.array_equal(lora_forward(e, x).data, np.zeros(d))
        assert np.array_equal(lora_delta_w(e).data, np.zeros((d, k)))


def test_init_deterministic():
    e1 = lora_init(6, 5, 2, ExpertRole.SPECIALIST, seed=42)
    e2 = lora_init(6, 5, 2, ExpertRole.SPECIALIST, seed=42)
    assert np.array_equal(e1.a.data, e2.a.data)
    e3 = lora_init(6, 5, 2, ExpertRole.SPECIALIST, seed=43)
    assert not np.array_equal(e1.a.data, e3.a.data)


def test_init_shapes_and_alpha_rule():
    e = lora_init(4, 4, 2, ExpertRole.SPECIALIST, seed=0)
    assert e.a.shape == (2, 4)
    assert e.b.shape == (4, 2)
    assert e.alpha == 4.0  # defaults to 2*rank
    assert e.scaling() == 2.0


def test_init_rank_out_of_range():
    with pytest.raises(ConfigError):
        lora_init(4, 4, 5, ExpertRole.SPECIALIST, seed=0)
    with pytest.raises(ConfigError):
        lora_init(4, 4, 0, ExpertRole.SPECIALIST, seed=0)


def test_forward_hand_example():
    e = lora_init(2, 2, 1, ExpertRole.SPECIALIST, seed=0, alpha=2.0)
    e.a.data[:] = [[1.0, 0.0]]
    e.b.data[:] = [[1.0], [0.0]]
    out = lora_forward(e, Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [6.0, 0.0])
    assert np.array_equal(lora_delta_w(e).data, [[2.0, 0.0], [0.0, 0.0]])


def test_forward_matches_materialized_delta():
    e = random_expert()
    x = Tensor(RNG.normal(size=5))
    via_factors = lora_forward(e, x).data
    via_dense = matmul(lora_delta_w(e), x).data
    assert np.max(np.abs(via_factors - via_dense)) < 1e-12


def test_forward_batch_rows():
    e = random_expert()
    xs = RNG.normal(size=(7, 5))
    batched = lora_forward(e, Tensor(xs)).data
    single = np.stack([lora_forward(e, Tensor(x)).data for x in xs])
    assert np.max(np.abs(batched - single)) < 1e-12


def test_forward_shape_errors():
    e = random_expert()
    with pytest.raises(ShapeError):
        lora_forward(e, Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        lora_forward(e, Tensor(np.zeros((3, 4))))


def test_delta_rank_bound():
    for _ in range(10):
        r = int(RNG.integers(1, 4))
        e = lora_init(8, 7, r, ExpertRole.SPECIALIST, seed=int(RNG.integers(1 << 30)))
        e.b.data[:] = RNG.normal(size=e.b.shape)
        sv = np.linalg.svd(lora_delta_w(e).data, compute_uv=False)
        assert int(np.sum(sv > 1e-9)) <= r


def test_forward_linear_in_input():
    e = random_expert()
    x = Tensor(RNG.normal(size=5))
    y = Tensor(RNG.normal(size=5))
    a, b = 0.3, -1.7
    lhs = lora_forward(e, Tensor(a * x.data + b * y.data)).data
    rhs = a * lora_forward(e, x).data + b * lora_forward(e, y).data
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_trainable_flag_controls_gradients():
    frozen = lora_init(4, 3, 2, ExpertRole.BASE, seed=1, trainable=False)
    live = lora_init(4, 3, 2, ExpertRole.SPECIALIST, seed=2, trainable=True)
    live.b.data[:] = RNG.normal(size=live.b.shape)
    frozen.b.data[:] = RNG.normal(size=frozen.b.shape)
    x = Tensor(RNG.normal(size=3))
    (lora_forward(frozen, x) + lora_forward(live, x)).sum().backward()
    assert frozen.a.grad is None and frozen.b.grad is None
    assert live.a.grad is not None and live.b.grad is not None


def test_snapshot_detects_changes():
    e = lora_init(4, 3, 2, ExpertRole.BASE, seed=5, trainable=False)
    snap = snapshot_experts([e])
    assert experts_unchanged([e], snap)
    e.a.data[0, 0] += 1e-16  # any bit flip must be caught
    assert not experts_unchanged([e], snap)


def test_param_count_closed_form():
    e = lora_init(64, 64, 8, ExpertRole.SPECIALIST, seed=0)
    assert e.param_count() == 8 * 128 == 1024
