"""Parameter-efficient adapters attached to a frozen :class:`TransformerLM`.

Four kinds are supported:

* ``lora``   low-rank pairs ``A [d, r]``, ``B [r, d]`` added to attention projections
* ``ia3``    multiplicative scales on keys, values and the feed-forward activation
* ``prefix`` per-layer key/value banks that every position can attend to
* ``qlora``  LoRA trained on top of a per-row absmax-quantized base
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import CompatibilityError
from .model import ModelConfig, TransformerLM, attend
from .tensor import ShapeError, Tensor

KINDS = ("lora", "ia3", "prefix", "qlora")
PROJECTIONS = ("q", "k", "v", "o")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    kind: str = "lora"
    rank: int = 4
    alpha: float = 8.0
    prefix_len: int = 20
    quant_bits: int | None = None
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown adapter kind {self.kind!r}; expected one of {KINDS}")
        if self.rank < 1 or self.alpha <= 0 or self.prefix_len < 1:
            raise SpecError("rank, alpha and prefix_len must be positive")
        if self.kind == "qlora" and self.quant_bits not in (4, 8):
            raise SpecError(f"qlora needs quant_bits 4 or 8, got {self.quant_bits}")
        bad = [t for t in self.targets if t not in PROJECTIONS]
        if bad or not self.targets:
            raise SpecError(f"invalid LoRA targets {self.targets}")
        object.__setattr__(self, "targets", tuple(self.targets))

    def validate(self, config: ModelConfig) -> None:
        if self.kind in ("lora", "qlora") and self.rank > config.embed_dim:
            raise SpecError(f"rank {self.rank} exceeds embed_dim {config.embed_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AdapterSpec:
        d = dict(d)
        d["targets"] = tuple(d.get("targets", ("q", "v")))
        return cls(**d)


@dataclass
class AdapterState:
    """The hotfix: trainable adapter tensors plus the base model they belong to."""

    spec: AdapterSpec
    tensors: dict[str, Tensor]
    base_fingerprint: str | None = None
    # prefix slots to expose (all when None); not persisted
    prefix_mask: np.ndarray | None = None

    def __post_init__(self):
        for name, t in self.tensors.items():
            t.name = name

    # -- hooks used by TransformerLM.forward -------------------------------
    def lora_pair(self, layer: int, target: str):
        if self.spec.kind not in ("lora", "qlora") or target not in self.spec.targets:
            return None
        p = f"layers.{layer}.attn.{target}."
        return self.tensors[p + "lora_A"], self.tensors[p + "lora_B"]

    def ia3_scale(self, layer: int, which: str) -> Tensor | None:
        if self.spec.kind != "ia3":
            return None
        return self.tensors[f"layers.{layer}.ia3.{which}"]

    def prefix_kv(self, layer: int):
        if self.spec.kind != "prefix":
            return None
        return self.tensors["prefix.keys"][layer], self.tensors["prefix.values"][layer]

    def check_compatible(self, model: TransformerLM) -> None:
        if self.base_fingerprint is None:
            return
        if self.spec.kind == "qlora" and not model.quantized:
            raise CompatibilityError("qlora adapter requires a quantized base (see quantize_base)")
        if model.base_fingerprint != self.base_fingerprint:
            raise CompatibilityError(
                f"adapter was trained on base {self.base_fingerprint}, got {model.base_fingerprint}")

    # -- bookkeeping ---------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def copy(self) -> AdapterState:
        return AdapterState(self.spec, {k: Tensor(t.data.copy()) for k, t in self.tensors.items()},
                            self.base_fingerprint)


def init_adapter(spec: AdapterSpec, base: TransformerLM | ModelConfig, seed: int = 0) -> AdapterState:
    """Fresh adapter whose initial contribution is exactly zero (lora/ia3).

    Passing a model binds the adapter to the model's base fingerprint; a bare
    config yields an unbound adapter.
    """
    config = base.config if isinstance(base, TransformerLM) else base
    spec.validate(config)
    rng = np.random.default_rng(seed)
    d, L, r = config.embed_dim, config.n_layers, spec.rank
    tensors: dict[str, Tensor] = {}
    if spec.kind in ("lora", "qlora"):
        for l in range(L):
            for t in spec.targets:
                p = f"layers.{l}.attn.{t}."
                tensors[p + "lora_A"] = Tensor(rng.normal(0.0, 0.02, size=(d, r)))
                tensors[p + "lora_B"] = Tensor(np.zeros((r, d)))
    elif spec.kind == "ia3":
        for l in range(L):
            tensors[f"layers.{l}.ia3.k"] = Tensor(np.ones(d))
            tensors[f"layers.{l}.ia3.v"] = Tensor(np.ones(d))
            tensors[f"layers.{l}.ia3.ff"] = Tensor(np.ones(4 * d))
    else:
        shape = (L, spec.prefix_len, d)
        tensors["prefix.keys"] = Tensor(rng.normal(0.0, 0.02, size=shape))
        tensors["prefix.values"] = Tensor(rng.normal(0.0, 0.02, size=shape))
    fp = base.base_fingerprint if isinstance(base, TransformerLM) else None
    state = AdapterState(spec, tensors, fp)
    state.set_trainable(True)
    return state


def adapted_projection(base_weight: Tensor, x: Tensor, lora: tuple[Tensor, Tensor],
                       alpha: float, rank: int) -> Tensor:
    """``x @ W + (alpha / rank) * (x @ A) @ B`` without merging into ``W``."""
    A, B = lora
    d_in, d_out = base_weight.shape[-2], base_weight.shape[-1]
    if x.shape[-1] != d_in or A.shape != (d_in, rank) or B.shape != (rank, d_out):
        raise ShapeError(f"lora shapes x{x.shape} W{base_weight.shape} A{A.shape} B{B.shape} (r={rank})")
    return x @ base_weight + ((x @ A) @ B) * (alpha / rank)


def merged_weight(base_weight: np.ndarray, A: np.ndarray, B: np.ndarray, alpha: float, rank: int) -> np.ndarray:
    """Dense ``W + (alpha / rank) A B``; used only as a reference in tests."""
    return base_weight + (alpha / rank) * (A @ B)


def prefix_attend(q: Tensor, k: Tensor, v: Tensor, prefix_keys: Tensor, prefix_values: Tensor,
                  n_heads: int, prefix_mask=None, return_weights: bool = False):
    """Attention over ``[prefix ‖ sequence]`` keys and values for one layer.

    ``q, k, v`` are ``[t, d]`` or ``[B, t, d]``; the output keeps the input's
    sequence length. Attention weights have shape ``[B, H, t, p + t]``.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (x.reshape(1, *x.shape) for x in (q, k, v))
    if prefix_keys.shape != prefix_values.shape or prefix_keys.shape[-1] != q.shape[-1]:
        raise ShapeError(f"prefix banks {prefix_keys.shape}/{prefix_values.shape} vs model dim {q.shape[-1]}")
    out = attend(q, k, v, n_heads, prefix_k=prefix_keys, prefix_v=prefix_values,
                 prefix_mask=prefix_mask, return_weights=return_weights)
    if return_weights:
        o, w = out
        return (o[0] if squeeze else o), w
    return out[0] if squeeze else out


# -- quantization ------------------------------------------------------------------

@dataclass
class QuantizedMatrix:
    """Symmetric per-row integer codes with one float64 scale per row."""

    codes: np.ndarray
    scale: np.ndarray
    bits: int

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.scale[:, None]


def quantize_matrix(w: np.ndarray, bits: int) -> QuantizedMatrix:
    if bits not in (4, 8):
        raise SpecError(f"bits must be 4 or 8, got {bits}")
    qmax = 2 ** (bits - 1) - 1
    scale = np.abs(w).max(axis=1) / qmax
    safe = np.where(scale > 0, scale, 1.0)
    codes = np.clip(np.rint(w / safe[:, None]), -qmax, qmax).astype(np.int8)
    return QuantizedMatrix(codes, scale, bits)


def quantize_base(model: TransformerLM, bits: int) -> TransformerLM:
    """Frozen copy of ``model`` whose weight matrices are stored as integer codes."""
    q = model.copy()
    q.source_fingerprint = model.base_fingerprint
    for name, p in q.params.items():
        if p.ndim == 2:
            qm = quantize_matrix(p.data, bits)
            q.quantized[name] = qm
            p.data = qm.dequantize()
    q.set_trainable(False)
    return q


def prepare_base(model: TransformerLM, spec: AdapterSpec) -> TransformerLM:
    """The frozen base an adapter of ``spec`` runs on (quantized for qlora)."""
    if spec.kind == "qlora":
        return quantize_base(model, spec.quant_bits)
    model.set_trainable(False)
    return model
