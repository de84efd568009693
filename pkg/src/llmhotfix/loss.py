"""Hotfix objectives: learn the fix, unlearn the bug, retain everything else.

All per-example losses are token-weighted NLLs normalized by the number of
weighted positions; batch values are means over examples.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import DegeneratePairError, HotfixExample
from .model import TransformerLM, next_token_log_probs, pad_batch
from .tensor import Tensor

OBJECTIVES = ("Vanilla", "Guided", "Dual", "Vanilla+KL", "Guided+KL", "Dual+KL")
# direct maximization of the unlearn loss; reproduces a known failure mode, never a default
UNLEARN_MAX = "Unlearn-Max"

RATIO_EPS = 1e-8

_NEEDS = {
    "Vanilla": ("vanilla",),
    "Guided": ("guided",),
    "Dual": ("guided", "unlearn"),
    "Vanilla+KL": ("vanilla", "kl"),
    "Guided+KL": ("guided", "kl"),
    "Dual+KL": ("guided", "unlearn", "kl"),
    UNLEARN_MAX: ("unlearn",),
}


class ConfigurationError(ValueError):
    pass


@dataclass
class LossBreakdown:
    objective_name: str
    l_total: float
    l_vanilla: float | None = None
    l_guided: float | None = None
    l_unlearn: float | None = None
    l_ratio: float | None = None
    l_kl: float | None = None

    def as_row(self) -> dict:
        return asdict(self)


def _val(t: Tensor | None) -> float | None:
    return None if t is None else t.item()


def needs(objective: str) -> tuple[str, ...]:
    if objective not in _NEEDS:
        raise ConfigurationError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    return _NEEDS[objective]


def ratio_term(l_guided: Tensor, l_unlearn: Tensor) -> Tensor:
    return l_guided / (l_guided + l_unlearn + RATIO_EPS)


def combine(objective_name: str, components: dict, allow_unsupported: bool = False):
    """Total loss for ``objective_name`` from named component losses.

    ``components`` maps any of ``vanilla``, ``guided``, ``unlearn``, ``ratio``
    and ``kl`` to scalars (Tensors or floats). A missing ``ratio`` is derived
    from ``guided`` and ``unlearn``.
    """
    if objective_name == UNLEARN_MAX and not allow_unsupported:
        raise ConfigurationError("Unlearn-Max is only available with allow_unsupported=True")
    required = needs(objective_name)
    c = {k: (v if isinstance(v, Tensor) else T.tensor(v)) for k, v in components.items() if v is not None}
    missing = [k for k in required if k not in c]
    if missing:
        raise ConfigurationError(f"{objective_name} needs component(s) {missing}")
    if "guided" in required and "unlearn" in required and "ratio" not in c:
        c["ratio"] = ratio_term(c["guided"], c["unlearn"])
    if objective_name == "Vanilla":
        total = c["vanilla"]
    elif objective_name == "Guided":
        total = c["guided"]
    elif objective_name == "Dual":
        total = (c["guided"] + c["ratio"]) * 0.5
    elif objective_name == "Vanilla+KL":
        total = (c["vanilla"] + c["kl"]) * 0.5
    elif objective_name == "Guided+KL":
        total = (c["guided"] + c["kl"]) * 0.5
    elif objective_name == "Dual+KL":
        total = (c["guided"] + c["ratio"] + c["kl"]) * (1.0 / 3.0)
    else:
        total = -c["unlearn"]
    bd = LossBreakdown(objective_name, total.item(), _val(c.get("vanilla")), _val(c.get("guided")),
                       _val(c.get("unlearn")), _val(c.get("ratio")), _val(c.get("kl")))
    return total, bd


# -- single-example losses ---------------------------------------------------

def _sequence_loss(model, seq, weights, adapters) -> Tensor:
    seq = np.asarray(seq, dtype=np.int64)
    logp = next_token_log_probs(model, seq[:-1], adapters)
    return T.weighted_nll(logp, seq[1:], np.asarray(weights, dtype=np.float64)[1:])


def vanilla_loss(model: TransformerLM, ex: HotfixExample, adapters=None) -> Tensor:
    if len(ex.fixed_tokens) < 2:
        raise ValueError("fixed sequence needs at least two tokens")
    return _sequence_loss(model, ex.fixed_tokens, np.ones(len(ex.fixed_tokens)), adapters)


def guided_loss(model: TransformerLM, ex: HotfixExample, adapters=None) -> Tensor:
    if not np.asarray(ex.w_plus)[1:].any():
        raise DegeneratePairError(f"example {ex.pair_id!r} has no added tokens")
    return _sequence_loss(model, ex.fixed_tokens, ex.w_plus, adapters)


def unlearn_loss(model: TransformerLM, ex: HotfixExample, adapters=None) -> Tensor:
    if not np.asarray(ex.w_minus)[1:].any():
        raise DegeneratePairError(f"example {ex.pair_id!r} has no deleted tokens")
    return _sequence_loss(model, ex.buggy_tokens, ex.w_minus, adapters)


def dual_loss(model: TransformerLM, ex: HotfixExample, adapters=None):
    lg = guided_loss(model, ex, adapters)
    lu = unlearn_loss(model, ex, adapters)
    return combine("Dual", {"guided": lg, "unlearn": lu})


def context_kl_mask(ex: HotfixExample, length: int | None = None) -> np.ndarray:
    """Prediction positions whose next token still lies inside the shared context."""
    n = (length if length is not None else len(ex.fixed_tokens)) - 1
    mask = np.zeros(n)
    mask[: max(ex.context_len - 1, 0)] = 1.0
    return mask


def kl_retain_loss(model: TransformerLM, adapters, tokens, mask=None,
                   reference: TransformerLM | None = None) -> Tensor:
    """Mean KL(reference || adapted) over the selected next-token distributions.

    ``tokens`` is one sequence or a padded ``[B, t]`` batch; ``mask`` selects
    prediction positions (``[t-1]`` or ``[B, t-1]``), all positions by default.
    The reference is the base model without adapters unless given.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    inputs = ids[..., :-1]
    if mask is None:
        mask = np.ones(inputs.shape)
    reference = reference if reference is not None else model
    with T.no_grad():
        ref = next_token_log_probs(reference, inputs).data
    new = next_token_log_probs(model, inputs, adapters)
    return T.kl_from_log_probs(ref, new, mask)


# -- batched objective ---------------------------------------------------------

def _row_weights(seqs, weights, full_len):
    out = np.zeros((len(seqs), full_len - 1))
    for i, (s, w) in enumerate(zip(seqs, weights)):
        w = np.asarray(w, dtype=np.float64)[1:len(s)]
        out[i, : len(w)] = w
    return out


def _last_weighted(w) -> int:
    nz = np.flatnonzero(np.asarray(w))
    return int(nz[-1]) if len(nz) else 0


def _needed_len(ex: HotfixExample, parts) -> int:
    if "vanilla" in parts:
        return len(ex.fixed_tokens)
    n = ex.context_len if "kl" in parts else 1
    if "guided" in parts:
        n = max(n, _last_weighted(ex.w_plus) + 1)
    return n


def objective_loss(model: TransformerLM, adapters, examples: Sequence[HotfixExample], objective: str,
                   neutral: Sequence[Sequence[int]] = (), reference: TransformerLM | None = None,
                   allow_unsupported: bool = False):
    """Batch value of ``objective``; returns ``(total Tensor, LossBreakdown)``.

    One adapted forward covers fixed sequences, buggy sequences (when the
    objective needs the unlearn term) and neutral sequences (KL terms).
    """
    parts = needs(objective)
    if objective == UNLEARN_MAX and not allow_unsupported:
        raise ConfigurationError("Unlearn-Max is only available with allow_unsupported=True")
    B = len(examples)
    use_buggy = "unlearn" in parts
    # causal attention: tokens after the last one a term reads cannot change the loss
    seqs = [ex.fixed_tokens[: _needed_len(ex, parts)] for ex in examples]
    if use_buggy:
        seqs = seqs + [ex.buggy_tokens[: _last_weighted(ex.w_minus) + 1] for ex in examples]
    use_kl = "kl" in parts
    neutral = list(neutral) if use_kl else []
    seqs = seqs + neutral
    ids, lengths = pad_batch(seqs)
    t = ids.shape[1]
    logp = next_token_log_probs(model, ids[:, :-1], adapters)
    targets = ids[:, 1:]
    comps: dict[str, Tensor] = {}

    if "vanilla" in parts:
        w = _row_weights(seqs[:B], [np.ones(len(s)) for s in seqs[:B]], t)
        comps["vanilla"] = T.weighted_nll(logp[:B], targets[:B], w).mean()
    if "guided" in parts:
        w = _row_weights(seqs[:B], [ex.w_plus for ex in examples], t)
        lg = T.weighted_nll(logp[:B], targets[:B], w)
        comps["guided"] = lg.mean()
    if use_buggy:
        w = _row_weights(seqs[B:2 * B], [ex.w_minus for ex in examples], t)
        lu = T.weighted_nll(logp[B:2 * B], targets[B:2 * B], w)
        comps["unlearn"] = lu.mean()
        if "guided" in parts:
            comps["ratio"] = ratio_term(lg, lu).mean()
    if use_kl:
        mask = np.zeros(targets.shape)
        for i, ex in enumerate(examples):
            mask[i, : ex.context_len - 1] = 1.0
        start = len(seqs) - len(neutral)
        for j, n in enumerate(lengths[start:]):
            mask[start + j, : n - 1] = 1.0
        reference = reference if reference is not None else model
        with T.no_grad():
            ref = next_token_log_probs(reference, ids[:, :-1]).data
        comps["kl"] = T.kl_from_log_probs(ref, logp, mask)
    return combine(objective, comps, allow_unsupported=allow_unsupported)
