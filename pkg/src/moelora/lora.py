"""Low-rank adapter experts: construction, initialization, forward deltas.

An expert is an additive update (alpha/rank) * B @ A on some frozen weight.
Experts carry a role: base experts anchor general behavior (frozen by
default), specialist experts are free to adapt.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, matmul


class ExpertRole(Enum):
    BASE = "base"
    SPECIALIST = "specialist"


@dataclass
class LoraExpert:
    """One low-rank adapter attached to a frozen [d x k] weight.

    ``a`` is the [rank x k] down-projection, ``b`` the [d x rank]
    up-projection; the materialized update is (alpha/rank) * b @ a.
    A non-trainable expert never changes after construction.
    """

    a: Tensor
    b: Tensor
    rank: int
    alpha: float
    role: ExpertRole
    trainable: bool

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def k_in(self) -> int:
        return self.a.shape[1]

    def scaling(self) -> float:
        return self.alpha / self.rank

    def param_count(self) -> int:
        """Raw adapter size rank*(d+k), independent of the trainable flag."""
        return self.rank * (self.d_out + self.k_in)


def lora_init(
    d: int,
    k: int,
    rank: int,
    role: ExpertRole,
    seed: int,
    alpha: float | None = None,
    trainable: bool = True,
) -> LoraExpert:
    """Build an expert whose initial delta is exactly zero.

    A is Gaussian with std 1/sqrt(rank) drawn from ``seed``; B starts at
    zero, so the freshly built expert leaves the wrapped weight's output
    untouched. ``alpha`` defaults to 2*rank.
    """
    if not 1 <= rank <= min(d, k):
        raise ConfigError(f"rank {rank} out of range [1, {min(d, k)}] for a {d}x{k} weight")
    if alpha is None:
        alpha = 2.0 * rank
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, k)), requires_grad=trainable)
    b = Tensor(np.zeros((d, rank)), requires_grad=trainable)
    return LoraExpert(a=a, b=b, rank=rank, alpha=float(alpha), role=role, trainable=trainable)


def lora_forward(expert: LoraExpert, x: Tensor) -> Tensor:
    """Delta contribution (alpha/rank) * B (A x).

    Accepts a single input vector [k] or a row batch [n x k]; gradients
    reach A and B only when the expert is trainable.
    """
    if x.ndim == 1:
        if x.shape[0] != expert.k_in:
            raise ShapeError(f"input length {x.shape[0]} != expert k {expert.k_in}")
        return matmul(expert.b, matmul(expert.a, x)) * expert.scaling()
    if x.ndim == 2:
        if x.shape[1] != expert.k_in:
            raise ShapeError(f"input width {x.shape[1]} != expert k {expert.k_in}")
        return matmul(matmul(x, expert.a.T), expert.b.T) * expert.scaling()
    raise ShapeError(f"expert input must be a vector or row batch, got shape {x.shape}")


def lora_delta_w(expert: LoraExpert) -> Tensor:
    """Materialize the dense [d x k] update (alpha/rank) * B A.

    Used by parameter audits and tests only; the forward path never forms
    the dense product.
    """
    return matmul(expert.b, expert.a) * expert.scaling()


def expert_state(expert: LoraExpert) -> dict:
    """Manifest entry describing the expert (not its tensor payloads)."""
    return {
        "rank": expert.rank,
        "role": expert.role.value,
        "alpha": expert.alpha,
        "trainable": expert.trainable,
    }


def snapshot_experts(experts: Sequence[LoraExpert]) -> list[tuple[bytes, bytes]]:
    """Byte-level copies of each expert's (A, B), for frozen-weight audits."""
    return [(e.a.data.tobytes(), e.b.data.tobytes()) for e in experts]


def experts_unchanged(experts: Sequence[LoraExpert], snapshot: list[tuple[bytes, bytes]]) -> bool:
    if len(experts) != len(snapshot):
        return False
    return all(
        e.a.data.tobytes() == sa and e.b.data.tobytes() == sb
        for e, (sa, sb) in zip(experts, snapshot)
    )
