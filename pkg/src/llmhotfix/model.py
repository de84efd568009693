"""Decoder-only transformer LM on top of :mod:`llmhotfix.tensor`.

Pre-norm blocks, learned positional embeddings, untied output head, no biases
on projections. Adapters (see :mod:`llmhotfix.peft`) are passed into
``forward`` and never stored on the model, so a frozen base can serve several
adapter sets.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class InputError(ValueError):
    pass


class LengthError(InputError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    embed_dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 256
    seed: int = 0

    def __post_init__(self):
        for f in ("vocab_size", "embed_dim", "n_layers", "n_heads", "context_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: ModelConfig) -> int:
    V, d, L, Tm = cfg.vocab_size, cfg.embed_dim, cfg.n_layers, cfg.context_len
    per_layer = 4 * d * d + 2 * 4 * d * d + 2 * 2 * d
    return V * d + Tm * d + L * per_layer + 2 * d + d * V


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    V, d, Tm = cfg.vocab_size, cfg.embed_dim, cfg.context_len
    shapes = [("wte", (V, d)), ("wpe", (Tm, d))]
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.q", (d, d)), (p + "attn.k", (d, d)),
            (p + "attn.v", (d, d)), (p + "attn.o", (d, d)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.fc", (d, 4 * d)), (p + "mlp.proj", (4 * d, d)),
        ]
    shapes += [("lnf.g", (d,)), ("lnf.b", (d,)), ("head", (d, V))]
    return shapes


class TransformerLM:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.quantized: dict = {}
        # qlora bases remember which full-precision base they came from
        self.source_fingerprint: str | None = None
        rng = np.random.default_rng(config.seed)
        for name, shape in _param_shapes(config):
            if params is not None:
                arr = np.array(params[name], dtype=np.float64)
                if arr.shape != shape:
                    raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            elif name.endswith(".g"):
                arr = np.ones(shape)
            elif name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, 0.02, size=shape)
            self.params[name] = Tensor(arr, requires_grad=False, name=name)
        self._fingerprint: str | None = None

    # -- parameter access ---------------------------------------------------
    def weight(self, name: str) -> Tensor:
        # quantized matrices keep their dequantized values in ``params``
        return self.params[name]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        self._fingerprint = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> TransformerLM:
        other = TransformerLM(self.config, self.state_arrays())
        other.quantized = dict(self.quantized)
        other.source_fingerprint = self.source_fingerprint
        return other

    @property
    def fingerprint(self) -> str:
        """FNV-1a 64 of this model's checkpoint payload, as 16 hex digits.

        Cached while every parameter is frozen; edit ``.data`` of a frozen model
        only through :meth:`set_trainable` round trips.
        """
        from .checkpoint import model_fingerprint

        if any(p.requires_grad for p in self.params.values()):
            return model_fingerprint(self)
        if self._fingerprint is None:
            self._fingerprint = model_fingerprint(self)
        return self._fingerprint

    @property
    def base_fingerprint(self) -> str:
        return self.source_fingerprint or self.fingerprint

    # -- forward ------------------------------------------------------------
    def check_tokens(self, ids: np.ndarray) -> None:
        if ids.shape[-1] > self.config.context_len:
            raise LengthError(f"sequence length {ids.shape[-1]} exceeds context_len {self.config.context_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise InputError(f"token id out of range [0, {self.config.vocab_size})")

    def forward(self, tokens, adapters=None) -> Tensor:
        """Logits ``[t, V]`` for a 1-D sequence or ``[B, t, V]`` for a 2-D batch."""
        ids = np.asarray(tokens, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise InputError("tokens must be a non-empty 1-D or 2-D id array")
        self.check_tokens(ids)
        if adapters is not None:
            adapters.check_compatible(self)
        cfg = self.config
        t = ids.shape[1]
        x = T.embedding(self.weight("wte"), ids) + self.weight("wpe")[:t]
        for l in range(cfg.n_layers):
            p = f"layers.{l}."
            h = T.layer_norm(x, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
            x = x + self._attention(h, l, adapters)
            h = T.layer_norm(x, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            x = x + self._mlp(h, l, adapters)
        h = T.layer_norm(x, self.params["lnf.g"], self.params["lnf.b"])
        logits = h @ self.weight("head")
        return logits[0] if squeeze else logits

    __call__ = forward

    def _project(self, h: Tensor, layer: int, target: str, adapters) -> Tensor:
        w = self.weight(f"layers.{layer}.attn.{target}")
        if adapters is not None:
            lora = adapters.lora_pair(layer, target)
            if lora is not None:
                from .peft import adapted_projection

                return adapted_projection(w, h, lora, adapters.spec.alpha, adapters.spec.rank)
        return h @ w

    def _attention(self, h: Tensor, layer: int, adapters) -> Tensor:
        q = self._project(h, layer, "q", adapters)
        k = self._project(h, layer, "k", adapters)
        v = self._project(h, layer, "v", adapters)
        prefix = None
        if adapters is not None:
            lk = adapters.ia3_scale(layer, "k")
            if lk is not None:
                k = k * lk
                v = v * adapters.ia3_scale(layer, "v")
            prefix = adapters.prefix_kv(layer)
        if prefix is None:
            out = attend(q, k, v, self.config.n_heads)
        else:
            out = attend(q, k, v, self.config.n_heads, prefix_k=prefix[0], prefix_v=prefix[1],
                         prefix_mask=adapters.prefix_mask)
        return self._project(out, layer, "o", adapters)

    def _mlp(self, h: Tensor, layer: int, adapters) -> Tensor:
        p = f"layers.{layer}.mlp."
        a = T.gelu(h @ self.weight(p + "fc"))
        if adapters is not None:
            lf = adapters.ia3_scale(layer, "ff")
            if lf is not None:
                a = a * lf
        return a @ self.weight(p + "proj")


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, t, d = x.shape
    return x.reshape(B, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def causal_mask(t: int, n_prefix: int = 0, prefix_mask=None) -> np.ndarray:
    """Additive mask ``[t, n_prefix + t]``: 0 where attention is allowed, -inf elsewhere."""
    mask = np.zeros((t, n_prefix + t))
    mask[:, n_prefix:][np.triu_indices(t, k=1)] = -np.inf
    if prefix_mask is not None:
        blocked = ~np.asarray(prefix_mask, dtype=bool)
        mask[:, :n_prefix][:, blocked] = -np.inf
    return mask


def attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, prefix_k: Tensor | None = None,
           prefix_v: Tensor | None = None, prefix_mask=None, return_weights: bool = False):
    """Causal multi-head attention over ``[B, t, d]`` inputs.

    Optional prefix banks ``[p, d]`` are prepended to keys and values; every
    position may attend to every prefix slot not disabled by ``prefix_mask``.
    """
    B, t, d = q.shape
    qh, kh, vh = (_split_heads(x, n_heads) for x in (q, k, v))
    n_prefix = 0
    if prefix_k is not None:
        n_prefix = prefix_k.shape[0]
        dh = d // n_heads
        pk = prefix_k.reshape(n_prefix, n_heads, dh).transpose(1, 0, 2)
        pv = prefix_v.reshape(n_prefix, n_heads, dh).transpose(1, 0, 2)
        kh = T.concat([T.broadcast_to(pk, (B, n_heads, n_prefix, dh)), kh], axis=2)
        vh = T.concat([T.broadcast_to(pv, (B, n_heads, n_prefix, dh)), vh], axis=2)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // n_heads))
    scores = scores + causal_mask(t, n_prefix, prefix_mask)
    weights = T.softmax(scores, axis=-1)
    out = (weights @ vh).transpose(0, 2, 1, 3).reshape(B, t, d)
    return (out, weights) if return_weights else out


# -- batching -----------------------------------------------------------------

def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a ``[B, t]`` id matrix; also returns the lengths."""
    lengths = np.array([len(s) for s in seqs])
    ids = np.full((len(seqs), lengths.max()), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def next_token_log_probs(model: TransformerLM, ids: np.ndarray, adapters=None) -> Tensor:
    """Log-softmax over the vocabulary for each prefix, ``[..., t, V]``."""
    return T.log_softmax(model.forward(ids, adapters))


# -- sampling -----------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.8
    top_k: int | None = None
    max_new_tokens: int = 16
    num_samples: int = 10
    stop_token: int | None = None
    rng_seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0 (use greedy=True for argmax decoding)")
        if self.num_samples < 1 or self.max_new_tokens < 1:
            raise ValueError("num_samples and max_new_tokens must be >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be a positive integer or None")


def _choose(logits: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.greedy:
        return logits.argmax(axis=-1)
    z = logits / cfg.temperature
    if cfg.top_k is not None and cfg.top_k < z.shape[-1]:
        order = np.argsort(-z, axis=-1, kind="stable")
        drop = order[:, cfg.top_k:]
        z = z.copy()
        np.put_along_axis(z, drop, -np.inf, axis=-1)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(z.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), z.shape[-1] - 1)


def generate(model: TransformerLM, prompt: Sequence[int], cfg: SamplerConfig,
             adapters=None, rng: np.random.Generator | None = None) -> list[list[int]]:
    """``cfg.num_samples`` continuations of ``prompt`` (each returned with the prompt)."""
    prompt = list(prompt)
    if not prompt:
        raise InputError("empty prompt")
    if len(prompt) + cfg.max_new_tokens > model.config.context_len:
        raise LengthError("prompt length + max_new_tokens exceeds context_len")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    seqs = np.tile(np.asarray(prompt, dtype=np.int64), (cfg.num_samples, 1))
    done = np.zeros(cfg.num_samples, dtype=bool)
    ends = np.full(cfg.num_samples, len(prompt) + cfg.max_new_tokens)
    with T.no_grad():
        for step in range(cfg.max_new_tokens):
            logits = model.forward(seqs, adapters).data[:, -1, :]
            nxt = _choose(logits, cfg, rng)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            if cfg.stop_token is not None:
                hit = (nxt == cfg.stop_token) & ~done
                ends[hit] = len(prompt) + step + 1
                done |= hit
                if done.all():
                    break
    return [seqs[i, : ends[i]].tolist() for i in range(cfg.num_samples)]


# -- base training ----------------------------------------------------------------

def sequence_nll(model: TransformerLM, seqs: Sequence[Sequence[int]], adapters=None) -> Tensor:
    """Per-sequence mean next-token NLL, shape ``[B]``."""
    ids, lengths = pad_batch(seqs)
    logp = next_token_log_probs(model, ids[:, :-1], adapters)
    weights = (np.arange(ids.shape[1] - 1)[None, :] < (lengths[:, None] - 1)).astype(np.float64)
    return T.weighted_nll(logp, ids[:, 1:], weights)


def train_base(model: TransformerLM, corpus: Sequence[Sequence[int]], epochs: int,
               batch_size: int, opt: T.Adam, seed: int = 0) -> list[float]:
    """Plain next-token training of every model parameter; returns mean loss per epoch."""
    if not corpus:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    trace = []
    model.set_trainable(True)
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[start:start + batch_size]]
            opt.zero_grad()
            loss = sequence_nll(model, batch).mean()
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
    model.set_trainable(False)
    return trace
