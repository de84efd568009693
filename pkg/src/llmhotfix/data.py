"""Bug/fix pairs, token-level diff masks and a synthetic single-statement bug corpus."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK = "<pad>", "<unk>"

_TOKEN_RE = re.compile(
    r"[A-Za-z_][A-Za-z_0-9]*"
    r"|\d+(?:\.\d+)?"
    r"|==|!=|<=|>=|&&|\|\||\+\+|--|\+=|-=|\*=|/=|->|::"
    r"|\S"
)


class DegeneratePairError(ValueError):
    """The buggy and fixed versions do not differ on both sides."""


class ParseError(ValueError):
    pass


def split_units(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def normalize(text: str) -> str:
    """Canonical single-space rendering of ``text``'s token units."""
    return " ".join(split_units(text))


class Tokenizer:
    """Identifier/number/operator/punctuation tokenizer with a closed vocabulary."""

    def __init__(self, vocab: Sequence[str]):
        vocab = list(vocab)
        if vocab[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate entries in vocabulary")
        self.vocab = vocab
        self.index = {tok: i for i, tok in enumerate(vocab)}

    pad_id = 0
    unk_id = 1

    @classmethod
    def from_texts(cls, texts: Iterable[str], max_size: int | None = None) -> Tokenizer:
        counts = Counter(u for t in texts for u in split_units(t))
        ordered = sorted(counts, key=lambda u: (-counts[u], u))
        if max_size is not None:
            ordered = ordered[: max_size - 2]
        return cls([PAD, UNK, *ordered])

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(u, self.unk_id) for u in split_units(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i != self.pad_id)


@dataclass(frozen=True)
class CodePair:
    context: str
    buggy_stmt: str
    fixed_stmt: str
    suffix: str = ""
    pair_id: str = ""

    def __post_init__(self):
        if not self.context.strip():
            raise ValueError(f"pair {self.pair_id!r}: empty context")
        if self.buggy_stmt == self.fixed_stmt:
            raise DegeneratePairError(f"pair {self.pair_id!r}: buggy and fixed statements are identical")

    def to_json(self) -> dict:
        return {"id": self.pair_id, "context": self.context, "buggy": self.buggy_stmt,
                "fixed": self.fixed_stmt, "suffix": self.suffix}

    @property
    def buggy_text(self) -> str:
        return " ".join(p for p in (self.context, self.buggy_stmt, self.suffix) if p)

    @property
    def fixed_text(self) -> str:
        return " ".join(p for p in (self.context, self.fixed_stmt, self.suffix) if p)


@dataclass
class HotfixExample:
    fixed_tokens: list[int]
    buggy_tokens: list[int]
    w_plus: np.ndarray
    w_minus: np.ndarray
    context_len: int
    pair_id: str = ""
    buggy_stmt: list[int] = field(default_factory=list)
    fixed_stmt: list[int] = field(default_factory=list)


# -- diff ---------------------------------------------------------------------

def lcs_alignment(a: Sequence, b: Sequence) -> list[tuple[int, int]]:
    """Lexicographically smallest maximum-length list of matched index pairs.

    Matches prefer the earliest position in ``a`` and then in ``b``.
    """
    n, m = len(a), len(b)
    suffix = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                suffix[i, j] = suffix[i + 1, j + 1] + 1
            else:
                suffix[i, j] = max(suffix[i + 1, j], suffix[i, j + 1])
    out: list[tuple[int, int]] = []
    i = j = 0
    while suffix[i, j] > 0:
        need = suffix[i, j]
        found = None
        for ii in range(i, n):
            for jj in range(j, m):
                if a[ii] == b[jj] and suffix[ii + 1, jj + 1] == need - 1:
                    found = (ii, jj)
                    break
            if found:
                break
        out.append(found)
        i, j = found[0] + 1, found[1] + 1
    return out


def diff_masks(buggy_tokens: Sequence, fixed_tokens: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Binary masks ``(w_minus, w_plus)`` marking deleted and added tokens.

    Raises DegeneratePairError unless both sides have at least one unmatched token.
    """
    if not buggy_tokens or not fixed_tokens:
        raise ValueError("both sequences must be non-empty")
    align = lcs_alignment(buggy_tokens, fixed_tokens)
    w_minus = np.ones(len(buggy_tokens))
    w_plus = np.ones(len(fixed_tokens))
    for i, j in align:
        w_minus[i] = 0.0
        w_plus[j] = 0.0
    if not w_minus.any() or not w_plus.any():
        raise DegeneratePairError(
            "pure insertion/deletion or identical sequences: "
            f"{int(w_minus.sum())} deleted, {int(w_plus.sum())} added")
    return w_minus, w_plus


def build_example(pair: CodePair, tok: Tokenizer) -> HotfixExample:
    context = tok.encode(pair.context)
    buggy = tok.encode(pair.buggy_stmt)
    fixed = tok.encode(pair.fixed_stmt)
    suffix = tok.encode(pair.suffix) if pair.suffix else []
    if buggy == fixed:
        raise DegeneratePairError(f"pair {pair.pair_id!r}: statements tokenize identically")
    # the shared context is aligned by construction; only the tail is diffed
    w_minus_tail, w_plus_tail = diff_masks(buggy + suffix, fixed + suffix)
    k = len(context)
    return HotfixExample(
        fixed_tokens=context + fixed + suffix,
        buggy_tokens=context + buggy + suffix,
        w_plus=np.concatenate([np.zeros(k), w_plus_tail]),
        w_minus=np.concatenate([np.zeros(k), w_minus_tail]),
        context_len=k,
        pair_id=pair.pair_id,
        buggy_stmt=buggy,
        fixed_stmt=fixed,
    )


# -- jsonl ------------------------------------------------------------------------

_REQUIRED = ("context", "buggy", "fixed")


def load_jsonl(path: str | Path) -> list[CodePair]:
    pairs, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append(f"line {lineno}: invalid JSON ({exc.msg})")
                continue
            if not isinstance(obj, dict):
                problems.append(f"line {lineno}: expected an object")
                continue
            missing = [k for k in _REQUIRED if not isinstance(obj.get(k), str)]
            if missing:
                problems.append(f"line {lineno}: missing field(s) {', '.join(missing)}")
                continue
            try:
                pairs.append(CodePair(obj["context"], obj["buggy"], obj["fixed"],
                                      obj.get("suffix", "") or "", str(obj.get("id", lineno))))
            except ValueError as exc:
                problems.append(f"line {lineno}: {exc}")
    if problems:
        raise ParseError(f"{path}: " + "; ".join(problems))
    return pairs


def write_jsonl(path: str | Path, pairs: Iterable[CodePair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def split_ids(ids: Sequence[str], seed: int, ratios=(8, 1, 1)) -> dict[str, list[str]]:
    """Deterministic disjoint train/validation/test partition."""
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    total = sum(ratios)
    n_val = len(ids) * ratios[1] // total
    n_test = len(ids) * ratios[2] // total
    n_train = len(ids) - n_val - n_test
    shuffled = [ids[i] for i in order]
    return {
        "train": shuffled[:n_train],
        "validation": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }


# -- synthetic corpus ---------------------------------------------------------------

_VARS = (
    "total count sum acc result value index pos offset size limit width height depth "
    "score delta step start end left right low high first last prev next head tail "
    "node item entry key name line text src dst buf data list items map table cache "
    "queue stack row col cell port host path file token word code flag mode state"
).split()
_METHODS = (
    "process handle compute update build parse load save render merge apply collect "
    "resolve validate scan index fetch flush reset encode decode check visit split "
    "format lookup filter reduce"
).split()
_TYPES = ["int", "long", "void", "boolean"]
_CALLS = ["log", "check", "emit", "touch", "record"]


class _Names:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[str] = set()

    def fresh(self) -> str:
        pool = [v for v in _VARS if v not in self.used]
        name = pool[self.rng.integers(len(pool))]
        self.used.add(name)
        return name


def _filler(rng, names: _Names, known: list[str]) -> str:
    kind = rng.integers(4)
    src = known[rng.integers(len(known))]
    if kind == 0:
        v = names.fresh()
        known.append(v)
        return f"int {v} = {src} + {rng.integers(1, 10)};"
    if kind == 1:
        return f"{src} = {src} * {rng.integers(2, 10)};"
    if kind == 2:
        return f"{_CALLS[rng.integers(len(_CALLS))]}({src});"
    other = known[rng.integers(len(known))]
    return f"check({src}, {other});"


# each family: setup lines, fixed statement, buggy statement, body
def _family(kind: int, names: _Names, known: list[str], rng) -> tuple[str, str, str, str]:
    if kind == 0:
        arr, n, i = names.fresh(), names.fresh(), names.fresh()
        acc = known[0]
        return (f"int[] {arr} = load(); int {n} = {arr}.length; int {i} = 0;",
                f"while ({i} < {n}) {{", f"while ({i} <= {n}) {{",
                f"{acc} += {arr}[{i}]; {i}++; }}")
    if kind == 1:
        src, line, pos = names.fresh(), names.fresh(), names.fresh()
        return (f"String {src} = read(); String {line} = {src}.trim();",
                f"int {pos} = {line}.indexOf(':');", f"int {pos} = {src}.indexOf(':');",
                f"{known[0]} += {pos};")
    if kind == 2:
        tbl, node = names.fresh(), names.fresh()
        return (f"Node {node} = {tbl}.get({known[-1]});",
                f"if ({node} != null) {{", f"if ({node} == null) {{",
                f"{known[0]} += {node}.weight; }}")
    if kind == 3:
        items, n = names.fresh(), names.fresh()
        return (f"List {items} = fetch();",
                f"int {n} = {items}.size();", f"int {n} = {items}.length();",
                f"{known[0]} += {n};")
    if kind == 4:
        a, b = names.fresh(), names.fresh()
        return (f"int {a} = {known[-1]} - 1; int {b} = {known[0]} + 1;",
                f"if ({a} > 0 && {b} > 0) {{", f"if ({a} > 0 || {b} > 0) {{",
                f"{known[0]} += {a}; }}")
    if kind == 5:
        lo, hi, r = names.fresh(), names.fresh(), names.fresh()
        return (f"int {lo} = {known[-1]}; int {hi} = {lo} + 8;",
                f"int {r} = Math.min({lo}, {hi});", f"int {r} = Math.max({lo}, {hi});",
                f"{known[0]} += {r};")
    src, dst = names.fresh(), names.fresh()
    return (f"int[] {src} = load(); int[] {dst} = new int[{src}.length];",
            f"copy({src}, {dst});", f"copy({dst}, {src});",
            f"{known[0]} += {dst}[0];")


N_FAMILIES = 7


def _snippet(rng, site_kind: int | None):
    """Return (context, fixed, buggy, suffix); site_kind None gives a site-free snippet."""
    names = _Names(rng)
    acc = names.fresh()
    method = _METHODS[rng.integers(len(_METHODS))]
    rtype = _TYPES[rng.integers(len(_TYPES))]
    arg = names.fresh()
    known = [acc, arg]
    head = [f"{rtype} {method}(int {arg}) {{", f"int {acc} = 0;"]
    head += [_filler(rng, names, known) for _ in range(rng.integers(1, 3))]
    tail = f"return {acc}; }}"
    if site_kind is None:
        head += [_filler(rng, names, known) for _ in range(2)]
        return " ".join(head), None, None, tail
    setup, fixed, buggy, body = _family(site_kind, names, known, rng)
    head.append(setup)
    return " ".join(head), fixed, buggy, f"{body} {tail}"


def synth_corpus(seed: int, n_pairs: int, n_neutral: int,
                 site_rate: float = 0.3) -> tuple[list[CodePair], list[str]]:
    """Template-generated Java-like pairs with a planted one- or two-token bug.

    Neutral snippets are bug-free; a fraction ``site_rate`` of them contain a
    correct instance of one of the bug families, the rest none.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    pairs: list[CodePair] = []
    seen_contexts: set[str] = set()
    while len(pairs) < n_pairs:
        kind = len(pairs) % N_FAMILIES
        context, fixed, buggy, suffix = _snippet(rng, kind)
        if context in seen_contexts:
            continue
        seen_contexts.add(context)
        pairs.append(CodePair(context, buggy, fixed, suffix, f"p{len(pairs):05d}"))
    neutral = []
    for _ in range(n_neutral):
        if rng.random() < site_rate:
            context, fixed, _, suffix = _snippet(rng, int(rng.integers(N_FAMILIES)))
            neutral.append(f"{context} {fixed} {suffix}")
        else:
            context, _, _, tail = _snippet(rng, None)
            neutral.append(f"{context} {tail}")
    return pairs, neutral
