"""Adapted toy transformer: frozen base weights composed with expert sets.

Each transformer block wraps one of its projection matrices in a
``MoeLoraLayer``: the frozen weight plus a list of low-rank experts and a
router. With every expert delta at zero the adapted model reproduces the
bare backbone bit for bit, which anchors all equivalence tests.

Layer indices are 1-based to match allocation plans and checkpoint names.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .allocation import AllocationPlan, plan_from_csv, plan_to_csv
from .errors import ConfigError, ShapeError
from .lora import ExpertRole, LoraExpert, expert_state, lora_forward, lora_init
from .routing import Router, gate_logits, soft_merge_weights, topk_weights
from .tensor import (
    Tensor,
    concat,
    dump_tensor,
    load_tensor,
    matmul,
    scale_rows,
    select_col,
    softmax,
    take_rows,
)
from .utils import derive_seed

MASK_NEG = -1e30  # additive causal mask; exp underflows to exactly 0


# -- routing modes -----------------------------------------------------------


@dataclass(frozen=True)
class Soft:
    """Blend all experts with the learnable-temperature softmax."""


@dataclass(frozen=True)
class TopK:
    """Keep only the k strongest experts per token."""

    k: int


@dataclass(frozen=True)
class BaseOnly:
    """Pin the gate to the base experts (uniform over them); diagnostics only."""


RoutingMode = Union[Soft, TopK, BaseOnly]


def parse_mode(text: str) -> RoutingMode:
    t = text.strip().lower()
    if t == "soft":
        return Soft()
    if t == "base-only":
        return BaseOnly()
    if t.startswith("topk:"):
        try:
            return TopK(k=int(t.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"bad routing mode {text!r}; expected soft or topk:<k>") from exc
    raise ConfigError(f"bad routing mode {text!r}; expected soft or topk:<k>")


def mode_to_str(mode: RoutingMode) -> str:
    if isinstance(mode, Soft):
        return "soft"
    if isinstance(mode, TopK):
        return f"topk:{mode.k}"
    return "base-only"


# -- configs ------------------------------------------------------------------


ADAPT_TARGETS = ("ffn_in", "ffn_out", "attn_out")


@dataclass
class BackboneConfig:
    num_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 256
    max_seq_len: int = 32
    adapt_target: str = "ffn_in"
    rmsnorm_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapt_target not in ADAPT_TARGETS:
            raise ConfigError(f"adapt_target must be one of {ADAPT_TARGETS}, got {self.adapt_target!r}")
        for name in ("num_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def adapted_dims(self) -> tuple[int, int]:
        """(d_out, k_in) of the matrix wrapped by each layer's expert set."""
        if self.adapt_target == "ffn_in":
            return self.d_ff, self.d_model
        if self.adapt_target == "ffn_out":
            return self.d_model, self.d_ff
        return self.d_model, self.d_model


# -- adapted layer --------------------------------------------------------------


@dataclass
class ParamCount:
    trainable: int
    active: int
    frozen: int

    def __post_init__(self):
        if min(self.trainable, self.active, self.frozen) < 0:
            raise ConfigError("parameter counts must be nonnegative")
        if self.active > self.trainable:
            raise ConfigError(f"active {self.active} exceeds trainable {self.trainable}")


class MoeLoraLayer:
    """Frozen base weight plus its expert set and router.

    Built bare (no experts) so the backbone can be pretrained; experts may
    only be attached once the base weight is frozen, after which it never
    receives gradient again.
    """

    def __init__(self, w0: Tensor, layer_index: int):
        if w0.ndim != 2:
            raise ShapeError(f"base weight must be a matrix, got shape {w0.shape}")
        self.w0 = w0
        self.layer_index = layer_index
        self.experts: list[LoraExpert] = []
        self.router: Router | None = None

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    @property
    def k_in(self) -> int:
        return self.w0.shape[1]

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def attach(self, experts: Sequence[LoraExpert], router: Router | None) -> None:
        if self.w0.requires_grad:
            raise ConfigError("freeze the base weight before attaching experts")
        experts = list(experts)
        for e in experts:
            if e.d_out != self.d_out or e.k_in != self.k_in:
                raise ShapeError(
                    f"expert dims {e.d_out}x{e.k_in} do not match base weight "
                    f"{self.d_out}x{self.k_in}"
                )
        if router is not None:
            if router.num_experts != len(experts):
                raise ConfigError(
                    f"router expects {router.num_experts} experts, layer has {len(experts)}"
                )
            if router.k != self.k_in:
                raise ConfigError(f"router width {router.k} != layer input width {self.k_in}")
        elif len(experts) > 1:
            raise ConfigError("a routerless layer may hold at most one expert")
        self.experts = experts
        self.router = router

    def gate_weights(self, x: Tensor, mode: RoutingMode) -> Tensor | None:
        """[tokens x experts] blend weights for this layer under ``mode``."""
        n = self.num_experts
        if n == 0:
            return None
        if isinstance(mode, BaseOnly):
            base_idx = [i for i, e in enumerate(self.experts) if e.role is ExpertRole.BASE]
            if not base_idx:
                raise ConfigError(f"layer {self.layer_index} has no base experts to pin to")
            g = np.zeros((x.shape[0], n))
            g[:, base_idx] = 1.0 / len(base_idx)
            return Tensor(g)
        if self.router is None:
            return Tensor(np.ones((x.shape[0], 1)))
        s = gate_logits(self.router, x)
        if isinstance(mode, Soft):
            return soft_merge_weights(s, self.router)
        if isinstance(mode, TopK):
            if not 1 <= mode.k <= n:
                raise ConfigError(f"topk k={mode.k} out of range [1, {n}] at layer {self.layer_index}")
            return topk_weights(s, mode.k)
        raise ConfigError(f"unknown routing mode {mode!r}")

    def forward(self, x: Tensor, mode: RoutingMode) -> tuple[Tensor, Tensor | None]:
        """h = W0 x + sum_i g_i(x) * expert_i(x), per token row.

        Returns the output and the gate matrix (None when no experts are
        attached). Gradient reaches trainable experts and the router but
        never the base weight.
        """
        if x.ndim != 2 or x.shape[1] != self.k_in:
            raise ShapeError(f"layer input must be [tokens x {self.k_in}], got {x.shape}")
        out = matmul(x, self.w0.T)
        gates = self.gate_weights(x, mode)
        if gates is None:
            return out, None
        for i, expert in enumerate(self.experts):
            col = gates.data[:, i]
            if not col.any():
                continue  # unselected under top-k: zero contribution, zero gradient
            out = out + scale_rows(lora_forward(expert, x), select_col(gates, i))
        return out, gates


# -- backbone --------------------------------------------------------------------


class TransformerBlock:
    def __init__(self, heads, ffn_in, ffn_out, attn_out):
        self.heads = heads  # list of (wq, wk, wv), each [d_head x d_model]
        self.ffn_in = ffn_in
        self.ffn_out = ffn_out
        self.attn_out = attn_out


def _maybe_layer_forward(slot, x: Tensor, mode, gates_sink, layer_index):
    if isinstance(slot, MoeLoraLayer):
        out, gates = slot.forward(x, mode)
        if gates is not None:
            gates_sink.append((layer_index, gates))
        return out
    return matmul(x, slot.T)


class ToyBackbone:
    """Small causal transformer whose blocks each expose one adapted matrix.

    Pre-norm blocks: x += attn(norm(x)); x += ffn(norm(x)); frozen output
    head. All weights are plain tensors except the per-block adapted
    projection, which lives inside a MoeLoraLayer.
    """

    def __init__(self, cfg: BackboneConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.plan: AllocationPlan | None = None
        d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
        d_head = d // cfg.n_heads
        rng = np.random.default_rng(derive_seed(seed, "backbone"))

        def mat(rows, cols, std):
            return Tensor(rng.normal(0.0, std, size=(rows, cols)), requires_grad=True)

        self.wte = mat(v, d, 0.5)
        self.wpe = mat(cfg.max_seq_len, d, 0.5)
        self.blocks: list[TransformerBlock] = []
        self.moe_layers: list[MoeLoraLayer] = []
        proj_std = 1.0 / math.sqrt(d)
        for li in range(1, cfg.num_layers + 1):
            heads = [
                (mat(d_head, d, proj_std), mat(d_head, d, proj_std), mat(d_head, d, proj_std))
                for _ in range(cfg.n_heads)
            ]
            attn_out = mat(d, d, proj_std)
            ffn_in = mat(ff, d, proj_std)
            ffn_out = mat(d, ff, 1.0 / math.sqrt(ff))
            slots = {"ffn_in": ffn_in, "ffn_out": ffn_out, "attn_out": attn_out}
            adapted = MoeLoraLayer(slots[cfg.adapt_target], layer_index=li)
            slots[cfg.adapt_target] = adapted
            self.blocks.append(
                TransformerBlock(heads, slots["ffn_in"], slots["ffn_out"], slots["attn_out"])
            )
            self.moe_layers.append(adapted)
        self.head = mat(v, d, proj_std)
        self._masks: dict[int, Tensor] = {}
        self._inv_sqrt_dh = 1.0 / math.sqrt(d_head)

    # -- structure ------------------------------------------------------------

    def backbone_tensors(self) -> dict[str, Tensor]:
        """All frozen-path weights, including each layer's base matrix."""
        out: dict[str, Tensor] = {"backbone.wte": self.wte, "backbone.wpe": self.wpe}
        for li, block in enumerate(self.blocks, start=1):
            for h, (wq, wk, wv) in enumerate(block.heads):
                out[f"block{li}.attn.q{h}"] = wq
                out[f"block{li}.attn.k{h}"] = wk
                out[f"block{li}.attn.v{h}"] = wv
            for slot_name, slot in (
                ("attn.out", block.attn_out),
                ("ffn.w_in", block.ffn_in),
                ("ffn.w_out", block.ffn_out),
            ):
                if isinstance(slot, MoeLoraLayer):
                    out[f"layer{li}.w0"] = slot.w0
                else:
                    out[f"block{li}.{slot_name}"] = slot
        out["backbone.head"] = self.head
        return out

    def adapter_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.moe_layers:
            li = layer.layer_index
            for i, e in enumerate(layer.experts):
                out[f"layer{li}.expert{i}.A"] = e.a
                out[f"layer{li}.expert{i}.B"] = e.b
            if layer.router is not None:
                out[f"layer{li}.router.w_g"] = layer.router.w_g
                out[f"layer{li}.router.tau"] = layer.router.tau_param
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.backbone_tensors()
        out.update(self.adapter_tensors())
        return out

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors().items() if t.requires_grad]

    def set_backbone_trainable(self, flag: bool) -> None:
        for t in self.backbone_tensors().values():
            t.requires_grad = flag

    def freeze_backbone(self) -> None:
        self.set_backbone_trainable(False)

    def taus(self) -> dict[int, float]:
        return {
            layer.layer_index: layer.router.tau()
            for layer in self.moe_layers
            if layer.router is not None
        }

    # -- forward ---------------------------------------------------------------

    def _mask(self, t: int) -> Tensor:
        cached = self._masks.get(t)
        if cached is None:
            m = np.triu(np.full((t, t), MASK_NEG), k=1)
            cached = self._masks[t] = Tensor(m)
        return cached

    def _rms_norm(self, x: Tensor) -> Tensor:
        ms = (x * x).mean(axis=1)
        return scale_rows(x, (ms + self.cfg.rmsnorm_eps).pow_const(-0.5))

    def forward(self, tokens: Sequence[int], mode: RoutingMode = Soft()):
        """Causal forward over one token sequence.

        Returns (logits [T x vocab], gates) where gates lists
        (layer_index, [T x N] gate matrix) for each routed layer.
        """
        t = len(tokens)
        if t < 1 or t > self.cfg.max_seq_len:
            raise ShapeError(f"sequence length {t} outside [1, {self.cfg.max_seq_len}]")
        gates_sink: list[tuple[int, Tensor]] = []
        x = take_rows(self.wte, tokens) + take_rows(self.wpe, range(t))
        for li, block in enumerate(self.blocks, start=1):
            h = self._rms_norm(x)
            ctxs = []
            for wq, wk, wv in block.heads:
                q = matmul(h, wq.T)
                k = matmul(h, wk.T)
                v = matmul(h, wv.T)
                scores = matmul(q, k.T) * self._inv_sqrt_dh + self._mask(t)
                ctxs.append(matmul(softmax(scores), v))
            att = _maybe_layer_forward(block.attn_out, concat(ctxs, axis=1), mode, gates_sink, li)
            x = x + att
            h2 = self._rms_norm(x)
            u = _maybe_layer_forward(block.ffn_in, h2, mode, gates_sink, li)
            y = _maybe_layer_forward(block.ffn_out, u.relu(), mode, gates_sink, li)
            x = x + y
        logits = matmul(self._rms_norm(x), self.head.T)
        return logits, gates_sink


# -- assembly ----------------------------------------------------------------------


def attach_plan(
    model: ToyBackbone,
    plan: AllocationPlan,
    seed: int,
    base_grad_scale: float = 0.0,
    use_router: bool = True,
    tau_min: float = 0.05,
    init_tau: float = 1.0,
) -> None:
    """Instantiate the plan's experts and routers onto a frozen backbone."""
    if plan.num_layers != model.cfg.num_layers:
        raise ConfigError(
            f"plan has {plan.num_layers} layers, model has {model.cfg.num_layers}"
        )
    if not 0.0 <= base_grad_scale <= 1.0:
        raise ConfigError(f"base_grad_scale must be in [0, 1], got {base_grad_scale}")
    model.freeze_backbone()
    d_out, k_in = model.cfg.adapted_dims()
    max_rank = min(d_out, k_in)
    for layer, slots in zip(model.moe_layers, plan.per_layer):
        experts = []
        for slot_idx, slot in enumerate(slots):
            if slot.rank > max_rank:
                raise ConfigError(
                    f"rank {slot.rank} exceeds min(d, k) = {max_rank} for the adapted matrix"
                )
            trainable = slot.role is ExpertRole.SPECIALIST or base_grad_scale > 0.0
            experts.append(
                lora_init(
                    d_out,
                    k_in,
                    slot.rank,
                    slot.role,
                    seed=derive_seed(seed, "expert", layer.layer_index, slot_idx),
                    trainable=trainable,
                )
            )
        if use_router:
            router = Router(
                num_experts=len(experts),
                k=k_in,
                seed=derive_seed(seed, "router", layer.layer_index),
                tau_min=tau_min,
                init_tau=init_tau,
            )
        else:
            if len(experts) > 1:
                raise ConfigError("use_router=false requires at most one expert per layer")
            router = None
        layer.attach(experts, router)
    model.plan = plan


def build_model(
    cfg: BackboneConfig,
    plan: AllocationPlan | None,
    seed: int,
    base_grad_scale: float = 0.0,
    use_router: bool = True,
    tau_min: float = 0.05,
    init_tau: float = 1.0,
    trainable_backbone: bool = False,
) -> ToyBackbone:
    """Backbone plus (optionally) its adapters, deterministically seeded."""
    model = ToyBackbone(cfg, seed=seed)
    if plan is not None:
        attach_plan(
            model,
            plan,
            seed=seed,
            base_grad_scale=base_grad_scale,
            use_router=use_router,
            tau_min=tau_min,
            init_tau=init_tau,
        )
        if trainable_backbone:
            raise ConfigError("backbone must stay frozen once experts are attached")
    else:
        model.set_backbone_trainable(trainable_backbone)
    return model


# -- audits ------------------------------------------------------------------------


def count_params(model: ToyBackbone, mode: RoutingMode = Soft()) -> ParamCount:
    """Closed-form parameter accounting.

    trainable: rank*(d+k) per trainable expert plus N*k + 1 per router.
    active: equal to trainable under soft merging; under top-k, router
    params plus the k largest per-layer trainable expert sizes (worst-case
    selection bound). Frozen experts count zero in both, matching the rule
    that only the adapter population is audited here; everything else lands
    in ``frozen``.
    """
    trainable = 0
    active = 0
    frozen = sum(t.data.size for t in model.backbone_tensors().values())
    for layer in model.moe_layers:
        router_params = 0
        if layer.router is not None:
            router_params = layer.router.num_experts * layer.router.k + 1
        counted = []
        for e in layer.experts:
            size = e.param_count()
            if e.trainable:
                counted.append(size)
            else:
                frozen += size
        trainable += router_params + sum(counted)
        if isinstance(mode, TopK):
            top = sorted(counted, reverse=True)[: mode.k]
            active += router_params + sum(top)
        elif isinstance(mode, Soft):
            active += router_params + sum(counted)
        else:  # BaseOnly: no router on the pinned path, frozen bases count 0
            active += 0
    return ParamCount(trainable=trainable, active=active, frozen=frozen)


def measured_active_params(
    model: ToyBackbone, token_batches: Sequence[Sequence[int]], mode: RoutingMode
) -> int:
    """Exact adapter parameters touched by forwarding the given batch.

    Counts each router once and each trainable expert that receives a
    nonzero gate weight for at least one token.
    """
    from .tensor import no_grad

    used: dict[int, set[int]] = {layer.layer_index: set() for layer in model.moe_layers}
    with no_grad():
        for tokens in token_batches:
            _, gates = model.forward(tokens, mode)
            for layer_index, g in gates:
                hot = np.flatnonzero(np.any(g.data > 0, axis=0))
                used[layer_index].update(int(i) for i in hot)
    total = 0
    for layer in model.moe_layers:
        if layer.router is not None and not isinstance(mode, BaseOnly):
            total += layer.router.num_experts * layer.router.k + 1
        for i in used[layer.layer_index]:
            e = layer.experts[i]
            if e.trainable:
                total += e.param_count()
    return total


def freeze_report(model: ToyBackbone) -> list[tuple[str, bool, str]]:
    """(tensor name, frozen?, role) for every named tensor in the model."""
    rows = []
    for name, t in model.named_tensors().items():
        if ".expert" in name:
            li = int(name.split(".")[0].removeprefix("layer"))
            slot = int(name.split(".")[1].removeprefix("expert"))
            role = model.moe_layers[li - 1].experts[slot].role
            kind = "base_expert" if role is ExpertRole.BASE else "specialist_expert"
        elif ".router" in name:
            kind = "router"
        elif name.endswith(".w0"):
            kind = "adapted_base_weight"
        else:
            kind = "backbone"
        rows.append((name, not t.requires_grad, kind))
    return rows


# -- checkpoints ---------------------------------------------------------------------


def save_checkpoint(model: ToyBackbone, path: str, config_hash: str = "") -> None:
    """Directory of tensor dumps plus a manifest and the allocation plan."""
    os.makedirs(path, exist_ok=True)
    names = model.named_tensors()
    for name, t in names.items():
        dump_tensor(t, os.path.join(path, f"{name}.txt"))
    manifest = {
        "format": 1,
        "config_hash": config_hash,
        "tensors": {name: list(t.shape) for name, t in names.items()},
        "experts": [
            {"layer": layer.layer_index, "slot": i, **expert_state(e)}
            for layer in model.moe_layers
            for i, e in enumerate(layer.experts)
        ],
        "routers": [
            {
                "layer": layer.layer_index,
                "num_experts": layer.router.num_experts,
                "tau_min": layer.router.tau_min,
                "tau": layer.router.tau(),
            }
            for layer in model.moe_layers
            if layer.router is not None
        ],
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if model.plan is not None:
        with open(os.path.join(path, "plan.csv"), "w") as fh:
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            fh.write(plan_to_csv(model.plan))


def load_checkpoint(
    model: ToyBackbone,
    path: str,
    expect_hash: str | None = None,
    only_prefixes: tuple[str, ...] | None = None,
) -> None:
    """Load dumped tensors into a model built from the same config.

    Shapes are checked name by name; a hash mismatch (when ``expect_hash``
    is given) aborts rather than silently mixing configurations.
    ``only_prefixes`` restricts loading (e.g. backbone-only restores).
    """
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if expect_hash is not None and manifest.get("config_hash") != expect_hash:
        raise ConfigError(
            f"checkpoint hash {manifest.get('config_hash')!r} != expected {expect_hash!r}"
        )
    for name, t in model.named_tensors().items():
        if only_prefixes is not None and not name.startswith(only_prefixes):
            continue
        fname = os.path.join(path, f"{name}.txt")
        if not os.path.exists(fname):
            raise ConfigError(f"checkpoint is missing tensor {name!r}")
        loaded = load_tensor(fname)
        if loaded.shape != t.shape:
            raise ShapeError(f"checkpoint tensor {name} has shape {loaded.shape}, model expects {t.shape}")
        t.data[...] = loaded.data


def load_backbone(model: ToyBackbone, path: str) -> None:
    """Restore only the frozen-path weights (backbone and base matrices)."""
    load_checkpoint(model, path, only_prefixes=("backbone.", "block"))
    for layer in model.moe_layers:
        fname = os.path.join(path, f"layer{layer.layer_index}.w0.txt")
        if os.path.exists(fname):
            loaded = load_tensor(fname)
            if loaded.shape != layer.w0.shape:
                raise ShapeError(
                    f"checkpoint base weight layer{layer.layer_index}.w0 has shape "
                    f"{loaded.shape}, model expects {layer.w0.shape}"
                )
            layer.w0.data[...] = loaded.data


def backbone_state(model: ToyBackbone) -> dict[str, np.ndarray]:
    """In-memory copy of the frozen-path weights (for cross-arm reuse)."""
    return {name: t.data.copy() for name, t in model.backbone_tensors().items()}


def restore_backbone_state(model: ToyBackbone, state: dict[str, np.ndarray]) -> None:
    tensors = model.backbone_tensors()
    if set(tensors) != set(state):
        raise ConfigError("backbone state does not match model structure")
    for name, arr in state.items():
        if tensors[name].shape != arr.shape:
            raise ShapeError(f"backbone tensor {name} shape mismatch")
        tensors[name].data[...] = arr
