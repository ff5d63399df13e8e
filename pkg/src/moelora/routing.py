"""Per-layer gating: logits, temperature-scaled soft merging, top-k routing.

The temperature is stored as an unconstrained scalar theta and realized as
tau = softplus(theta) + tau_min, so it stays strictly positive for any
parameter value while remaining smoothly learnable. Soft merging blends
every expert by softmax(logits / tau); top-k keeps only the k largest
logits (ties broken toward the lowest expert index) and renormalizes,
leaving the other weights exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .tensor import Tensor, matmul, softmax, softplus

DEFAULT_TAU_MIN = 0.05
ROUTER_INIT_STD = 0.02


def _softplus(x: float) -> float:
    if x > 30.0:  # exp would overflow; softplus(x) == x to double precision
        return x
    return math.log1p(math.exp(x))


def _softplus_inverse(y: float) -> float:
    if not y > 0:
        raise DomainError(f"softplus inverse needs y > 0, got {y}")
    if y > 30.0:
        return y
    return math.log(math.expm1(y))


def _theta_for_tau(tau: float, tau_min: float) -> float:
    """Unconstrained parameter whose effective temperature is ``tau``.

    Nudges over neighboring doubles so that softplus(theta) + tau_min
    reproduces ``tau`` bit-exactly when such a double exists (it does for
    the default tau = 1), falling back to the analytic inverse otherwise.
    """
    if not tau > tau_min:
        raise ConfigError(f"initial tau {tau} must exceed tau_min {tau_min}")
    theta = _softplus_inverse(tau - tau_min)
    if _softplus(theta) + tau_min == tau:
        return theta
    for direction in (math.inf, -math.inf):
        cand = theta
        for _ in range(8):
            cand = math.nextafter(cand, direction)
            if _softplus(cand) + tau_min == tau:
                return cand
    return theta


class Router:
    """Gating projection plus learnable temperature for one layer.

    ``w_g`` maps a hidden state of width k to one logit per expert;
    ``tau_param`` is the unconstrained temperature parameter.
    """

    def __init__(
        self,
        num_experts: int,
        k: int,
        seed: int,
        tau_min: float = DEFAULT_TAU_MIN,
        init_tau: float = 1.0,
    ):
        if num_experts < 1:
            raise ConfigError(f"router needs at least one expert, got {num_experts}")
        if not tau_min > 0:
            raise ConfigError(f"tau_min must be positive, got {tau_min}")
        rng = np.random.default_rng(seed)
        self.num_experts = num_experts
        self.k = k
        self.tau_min = float(tau_min)
        self.w_g = Tensor(rng.normal(0.0, ROUTER_INIT_STD, size=(num_experts, k)),
                          requires_grad=True)
        self.tau_param = Tensor([_theta_for_tau(init_tau, tau_min)], requires_grad=True)

    def tau(self) -> float:
        """Current effective temperature (softplus(theta) + tau_min)."""
        theta = float(self.tau_param.data[0])
        return math.log1p(math.exp(-abs(theta))) + max(theta, 0.0) + self.tau_min

    def tau_tensor(self) -> Tensor:
        """Effective temperature as a differentiable scalar tensor."""
        return softplus(self.tau_param) + self.tau_min

    def params(self) -> list[tuple[str, Tensor]]:
        return [("router.w_g", self.w_g), ("router.tau", self.tau_param)]


def gate_logits(router: Router, x: Tensor) -> Tensor:
    """Raw per-expert scores W_g x (vector input) or x W_g^T (row batch)."""
    if x.ndim == 1:
        if x.shape[0] != router.k:
            raise ShapeError(f"input length {x.shape[0]} != router width {router.k}")
        return matmul(router.w_g, x)
    if x.ndim == 2:
        if x.shape[1] != router.k:
            raise ShapeError(f"input width {x.shape[1]} != router width {router.k}")
        return matmul(x, router.w_g.T)
    raise ShapeError(f"router input must be a vector or row batch, got {x.shape}")


def soft_merge_weights(s: Tensor, router: Router) -> Tensor:
    """softmax(s / tau) with the router's learnable temperature.

    Gradient flows to the logits and, through tau, to the temperature
    parameter. Rows sum to 1.
    """
    inv_tau = router.tau_tensor().reciprocal()
    return softmax(s * inv_tau, temperature=1.0)


def topk_weights(s: Tensor, k: int) -> Tensor:
    """Softmax over the k largest logits only; unselected weights are exactly 0.

    Ties select the lower expert index. With k == N this reduces bit-exactly
    to a plain unit-temperature softmax.
    """
    if s.ndim == 1:
        return _topk_rows(s, k, s.data[None, :])
    if s.ndim == 2:
        return _topk_rows(s, k, s.data)
    raise ShapeError(f"topk_weights supports vectors and matrices, got {s.shape}")


def _topk_rows(s: Tensor, k: int, rows: np.ndarray) -> Tensor:
    n = rows.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k must satisfy 1 <= k <= {n}, got {k}")
    mask = np.zeros_like(rows)
    for i, row in enumerate(rows):
        order = np.argsort(-row, kind="stable")  # stable: ties keep low index first
        mask[i, order[:k]] = 1.0
    mask = mask.reshape(s.shape)
    # Max over the selected entries only; unselected logits never exceed it,
    # so exp stays bounded and the masked weights are exact zeros.
    sel_max = np.max(np.where(mask > 0, s.data, -np.inf), axis=-1, keepdims=True)
    e = np.exp(s.data - sel_max) * mask
    y = e / np.sum(e, axis=-1, keepdims=True)

    def grad_fn(g):
        t = np.sum(g * y, axis=-1, keepdims=True)
        return [y * (g - t)]

    from .tensor import _result  # shared op-construction helper

    return _result(y, (s,), grad_fn)


@dataclass
class GateRecord:
    """One token's routing distribution within one layer."""

    probs: np.ndarray
    layer: int
    position: int

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1:
            raise ShapeError(f"gate probs must be a vector, got shape {self.probs.shape}")


def gates_to_records(gates: Tensor | np.ndarray, layer: int) -> list[GateRecord]:
    """Split a [tokens x experts] gate matrix into per-token records."""
    arr = gates.data if isinstance(gates, Tensor) else np.asarray(gates)
    return [GateRecord(probs=row.copy(), layer=layer, position=i) for i, row in enumerate(arr)]


def load_balance_loss(gates) -> Tensor:
    """N * sum_i (mean_load_i - 1/N)^2 over a batch of gate distributions.

    Zero iff the mean load is exactly uniform; differentiable when given a
    live [tokens x experts] Tensor. Also accepts a list of GateRecord, in
    which case the result is a constant.
    """
    t = _as_gate_tensor(gates)
    tokens, n = t.shape
    mean_load = t.sum(axis=0) * (1.0 / tokens)
    dev = mean_load - (1.0 / n)
    return (dev * dev).sum() * float(n)


def _as_gate_tensor(gates) -> Tensor:
    if isinstance(gates, Tensor):
        if gates.ndim != 2 or gates.shape[0] == 0:
            raise DomainError(f"gate batch must be a non-empty [tokens x experts] matrix, got {gates.shape}")
        return gates
    records = list(gates)
    if not records:
        raise DomainError("gate batch must not be empty")
    widths = {r.probs.shape[0] for r in records}
    if len(widths) != 1:
        raise ShapeError(f"gate records disagree on expert count: {sorted(widths)}")
    return Tensor(np.stack([r.probs for r in records]))


@dataclass
class LayerRouteStats:
    mean_load: np.ndarray
    mean_entropy: float
    tau: float


def gate_entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats, with 0 * log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def routing_stats(records: list[GateRecord], taus: dict[int, float]) -> dict[int, LayerRouteStats]:
    """Per-layer mean expert load, mean token entropy, and effective tau."""
    by_layer: dict[int, list[GateRecord]] = {}
    for r in records:
        by_layer.setdefault(r.layer, []).append(r)
    out: dict[int, LayerRouteStats] = {}
    for layer in sorted(by_layer):
        probs = np.stack([r.probs for r in by_layer[layer]])
        out[layer] = LayerRouteStats(
            mean_load=probs.mean(axis=0),
            mean_entropy=float(np.mean([gate_entropy(p) for p in probs])),
            tau=float(taus.get(layer, math.nan)),
        )
    return out
