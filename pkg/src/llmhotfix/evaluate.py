"""Measurement harness: bug/fix outcome counts, perplexity, pass@k and paired tests."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import fnv1a64
from .data import HotfixExample, split_units
from .model import SamplerConfig, TransformerLM, generate, pad_batch, next_token_log_probs

BUGGY, FIXED, NEITHER = "buggy", "fixed", "neither"
EXACT_MAX_N = 12
MIN_NONZERO = 5


class InsufficientDataError(ValueError):
    pass


class UndefinedBaselineError(ValueError):
    pass


# -- classification -----------------------------------------------------------

def _contains(hay: Sequence, needle: Sequence) -> bool:
    n = len(needle)
    return any(list(hay[i:i + n]) == list(needle) for i in range(len(hay) - n + 1))


def classify_tokens(generated: Sequence, buggy_stmt: Sequence, fixed_stmt: Sequence) -> str:
    """Bucket for one sample given token sequences; the fix wins when both occur."""
    if not buggy_stmt or not fixed_stmt or list(buggy_stmt) == list(fixed_stmt):
        raise ValueError("statements must be non-empty and distinct")
    if _contains(generated, fixed_stmt):
        return FIXED
    if _contains(generated, buggy_stmt):
        return BUGGY
    return NEITHER


def classify_output(generated: str, buggy_stmt: str, fixed_stmt: str) -> str:
    """Text version of :func:`classify_tokens` (whitespace-insensitive)."""
    return classify_tokens(split_units(generated), split_units(buggy_stmt), split_units(fixed_stmt))


@dataclass
class OutcomeCounts:
    n_prompts: int
    samples_per_prompt: int = 10
    n_buggy: int = 0
    n_fixed: int = 0
    n_neither: int = 0

    def __post_init__(self):
        if self.n_buggy + self.n_fixed + self.n_neither != self.n_prompts * self.samples_per_prompt:
            raise ValueError(f"bucket totals do not add up: {self}")


def prompt_rng(seed: int, key: str) -> np.random.Generator:
    """Stream for one prompt, independent of evaluation order."""
    h = int(fnv1a64(key.encode("utf-8")), 16)
    return np.random.default_rng(np.random.SeedSequence([seed, h >> 32, h & 0xFFFFFFFF]))


def _outcomes_for(model, adapters, ex: HotfixExample, sampler: SamplerConfig) -> list[str]:
    prompt = ex.fixed_tokens[: ex.context_len]
    outs = generate(model, prompt, sampler, adapters, rng=prompt_rng(sampler.rng_seed, ex.pair_id))
    return [classify_tokens(o[len(prompt):], ex.buggy_stmt, ex.fixed_stmt) for o in outs]


def count_outcomes(model: TransformerLM, test: Sequence[HotfixExample], sampler: SamplerConfig,
                   adapters=None, workers: int = 1) -> OutcomeCounts:
    """Sample completions of each context and tally buggy / fixed / neither."""
    def run(ex):
        return _outcomes_for(model, adapters, ex, sampler)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            labels = list(pool.map(run, test))
    else:
        labels = [run(ex) for ex in test]
    flat = [b for per in labels for b in per]
    return OutcomeCounts(len(test), sampler.num_samples, flat.count(BUGGY), flat.count(FIXED),
                         flat.count(NEITHER))


# -- perplexity ---------------------------------------------------------------------

def total_nll(model: TransformerLM, seqs: Sequence[Sequence[int]], adapters=None,
              batch_size: int = 32) -> tuple[float, int]:
    """Summed next-token NLL and number of predicted tokens."""
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(seqs), batch_size):
            ids, lengths = pad_batch(seqs[s:s + batch_size])
            logp = next_token_log_probs(model, ids[:, :-1], adapters).data
            picked = np.take_along_axis(logp, ids[:, 1:, None], axis=-1)[..., 0]
            mask = np.arange(ids.shape[1] - 1)[None, :] < (lengths[:, None] - 1)
            total -= float(picked[mask].sum())
            count += int(mask.sum())
    return total, count


def perplexity(model: TransformerLM, seqs: Sequence[Sequence[int]], adapters=None) -> float:
    total, count = total_nll(model, seqs, adapters)
    if count < 1:
        raise ValueError("perplexity needs at least one predicted token")
    return math.exp(total / count)


# -- pass@k --------------------------------------------------------------------------

def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimate of P(at least one of k draws without replacement is correct)."""
    if not 0 <= c <= n:
        raise ValueError(f"need 0 <= c <= n, got n={n}, c={c}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    miss = 1.0
    for i in range(n - c + 1, n + 1):
        miss *= 1.0 - k / i
    return 1.0 - miss


@dataclass
class Task:
    task_id: str
    prompt: list[int]
    target: list[int]


def return_tasks(seqs: Sequence[Sequence[int]], return_id: int, ids: Sequence[str] | None = None) -> list[Task]:
    """Completion tasks cut at each sequence's final ``return``: finish the function."""
    tasks = []
    for j, s in enumerate(seqs):
        s = list(s)
        if return_id not in s:
            continue
        cut = len(s) - 1 - s[::-1].index(return_id)
        tasks.append(Task(ids[j] if ids is not None else f"t{j:05d}", s[:cut], s[cut:]))
    return tasks


def task_pass_counts(model: TransformerLM, tasks: Sequence[Task], sampler: SamplerConfig,
                     adapters=None) -> list[int]:
    """Correct samples per task; correct means the continuation starts with the target."""
    out = []
    for task in tasks:
        cfg = SamplerConfig(sampler.temperature, sampler.top_k, len(task.target), sampler.num_samples,
                            None, sampler.rng_seed, sampler.greedy)
        samples = generate(model, task.prompt, cfg, adapters, rng=prompt_rng(sampler.rng_seed, task.task_id))
        out.append(sum(s[len(task.prompt):] == task.target for s in samples))
    return out


# -- Wilcoxon signed-rank ------------------------------------------------------------------

def average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    v = values[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[j + 1] == v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    # ranks are multiples of 1/2, so doubled ranks index an integer count table
    twice = np.rint(ranks * 2).astype(np.int64)
    counts = np.zeros(int(twice.sum()) + 1)
    counts[0] = 1.0
    for r in twice:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    total = 2.0 ** len(ranks)
    w = int(round(w_plus * 2))
    lower = counts[: w + 1].sum() / total
    upper = counts[w:].sum() / total
    return min(1.0, 2.0 * min(lower, upper))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, int]:
    """Two-sided paired test; returns ``(W, p_value, n_effective)``.

    ``W`` is the smaller of the positive and negative rank sums.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n < MIN_NONZERO:
        raise InsufficientDataError(f"{n} nonzero differences, need at least {MIN_NONZERO}")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    if n <= EXACT_MAX_N:
        p = _exact_two_sided(ranks, w_plus)
    else:
        _, ties = np.unique(np.abs(d), return_counts=True)
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((ties ** 3 - ties).sum()) / 48.0
        p = 1.0 if var <= 0 else math.erfc(abs(w_plus - mean) / math.sqrt(var) / math.sqrt(2.0))
    return min(w_plus, w_minus), min(max(p, 0.0), 1.0), n


# -- reporting -----------------------------------------------------------------------------

def percent_change(before: float, after: float) -> float:
    if before == 0:
        raise UndefinedBaselineError("percent change is undefined for a zero baseline")
    return (after - before) / before * 100.0


def format_change(pct: float) -> str:
    """Two-decimal magnitude with a direction arrow, e.g. ``↓44.31%``."""
    text = f"{abs(pct):.2f}%"
    if text == "0.00%":
        return text
    return ("↑" if pct > 0 else "↓") + text


@dataclass
class EvalReport:
    before: OutcomeCounts
    after: OutcomeCounts
    pct_change_bugs: float | None
    pct_change_fixes: float | None
    ppl_before: float
    ppl_after: float
    pass_at_k: list[tuple[int, float, float]] = field(default_factory=list)
    wilcoxon: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pass_at_k"] = [{"k": k, "before": b, "after": a} for k, b, a in self.pass_at_k]
        return d

    def table(self, label: str = "hotfixed") -> str:
        def cell(n, pct):
            return f"{n} ({format_change(pct)})" if pct is not None else f"{n} (n/a)"

        rows = [
            f"{'model':<12} {'# bugs':>18} {'# fixes':>18} {'perplexity':>12}",
            f"{'base':<12} {self.before.n_buggy:>18} {self.before.n_fixed:>18} {self.ppl_before:>12.2f}",
            f"{label:<12} {cell(self.after.n_buggy, self.pct_change_bugs):>18} "
            f"{cell(self.after.n_fixed, self.pct_change_fixes):>18} {self.ppl_after:>12.2f}",
        ]
        for k, b, a in self.pass_at_k:
            rows.append(f"pass@{k:<7} {b:>18.4f} {a:>18.4f}")
        w = self.wilcoxon
        if w.get("p_value") is not None:
            rows.append(f"wilcoxon     W={w['statistic']:.1f} p={w['p_value']:.4f} n={w['n_effective']}")
        elif w:
            rows.append(f"wilcoxon     not computed: {w.get('note')}")
        return "\n".join(rows)


def safe_change(before: int, after: int) -> float | None:
    try:
        return percent_change(before, after)
    except UndefinedBaselineError:
        return None


def build_report(before: OutcomeCounts, after: OutcomeCounts, ppl_before: float, ppl_after: float,
                 pass_before: Sequence[int], pass_after: Sequence[int], n_samples: int,
                 ks: Sequence[int] = (1, 5, 10)) -> EvalReport:
    """Assemble a report from raw counts; per-task pass@1 vectors feed the paired test."""
    rows = []
    for k in ks:
        if k <= n_samples and pass_before:
            rows.append((k, float(np.mean([pass_at_k(n_samples, c, k) for c in pass_before])),
                         float(np.mean([pass_at_k(n_samples, c, k) for c in pass_after]))))
    vb = [c / n_samples for c in pass_before]
    va = [c / n_samples for c in pass_after]
    try:
        stat, p, n_eff = wilcoxon_signed_rank(vb, va)
        wil = {"statistic": stat, "p_value": p, "n_effective": n_eff, "note": None}
    except InsufficientDataError as exc:
        wil = {"statistic": None, "p_value": None,
               "n_effective": int(np.count_nonzero(np.subtract(vb, va))), "note": str(exc)}
    return EvalReport(before, after, safe_change(before.n_buggy, after.n_buggy),
                      safe_change(before.n_fixed, after.n_fixed), ppl_before, ppl_after, rows, wil)


_COUNTS = {
    "type": "object",
    "required": ["n_prompts", "samples_per_prompt", "n_buggy", "n_fixed", "n_neither"],
    "properties": {k: {"type": "integer", "minimum": 0}
                   for k in ["n_prompts", "samples_per_prompt", "n_buggy", "n_fixed", "n_neither"]},
}
_NUM_OR_NULL = {"type": ["number", "null"]}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["before", "after", "pct_change_bugs", "pct_change_fixes", "ppl_before", "ppl_after",
                 "pass_at_k", "wilcoxon"],
    "properties": {
        "before": _COUNTS,
        "after": _COUNTS,
        "pct_change_bugs": _NUM_OR_NULL,
        "pct_change_fixes": _NUM_OR_NULL,
        "ppl_before": {"type": "number", "exclusiveMinimum": 0},
        "ppl_after": {"type": "number", "exclusiveMinimum": 0},
        "pass_at_k": {"type": "array", "items": {
            "type": "object", "required": ["k", "before", "after"],
            "properties": {"k": {"type": "integer", "minimum": 1},
                           "before": {"type": "number", "minimum": 0, "maximum": 1},
                           "after": {"type": "number", "minimum": 0, "maximum": 1}}}},
        "wilcoxon": {"type": "object", "required": ["statistic", "p_value", "n_effective", "note"],
                     "properties": {"statistic": _NUM_OR_NULL,
                                    "p_value": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                                    "n_effective": {"type": "integer", "minimum": 0},
                                    "note": {"type": ["string", "null"]}}},
    },
}
