"""From normalized IR and environment text to model-ready token samples.

Covers identifier splitting, a plain BPE tokenizer, K-instruction grouping
with per-group token budgets and masked-instruction sampling.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import env_lines
from .ir import IrFunction, analyze
from .parser import format_instruction
from .pce import PceTable, compute_pce

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
END = "</w>"

MAX_INSTRUCTIONS = 256
MASK_RATE = 0.15


class SampleError(ValueError):
    pass


# ---------------------------------------------------------------- words

_CASE_RE = re.compile(r"[A-Z]+(?![a-z])\d*|[A-Z]?[a-z]+\d*|\d+")


def split_identifier(name: str) -> list[str]:
    """Split on underscores and case changes; digits stay with the word before."""
    words = []
    for seg in name.split("_"):
        if not seg:
            continue
        parts = _CASE_RE.findall(seg)
        # characters the pattern does not cover (e.g. '$') become their own words
        covered = "".join(parts)
        if covered != seg:
            parts = re.findall(r"[A-Z]+(?![a-z])\d*|[A-Z]?[a-z]+\d*|\d+|[^A-Za-z\d]", seg)
        words.extend(parts)
    return words


_ITANIUM_SOURCE_NAME = re.compile(r"(\d+)")


def simplify_symbol(name: str) -> str:
    """Reduce a symbol to its bare name.

    Itanium-mangled names (``_Z...``) keep only the innermost function name,
    type names lose ``struct.``/``class.``/``union.`` prefixes, namespaces,
    template arguments and numeric suffixes.
    """
    if name.startswith("_Z"):
        last = _last_source_name(name)
        if last:
            return last
    for prefix in ("struct.", "class.", "union."):
        if name.startswith(prefix):
            name = name[len(prefix):]
            break
    name = re.sub(r"<.*>", "", name)
    name = name.split("::")[-1]
    return re.sub(r"\.\d+$", "", name)


def _last_source_name(mangled: str) -> str | None:
    # the final <length><identifier> before the parameter list is the name
    body = mangled[2:]
    if body.startswith("L"):
        body = body[1:]
    names = []
    i = 0
    if body.startswith("N"):
        i = 1
        while i < len(body) and body[i] in "rVKRO":
            i += 1
    while i < len(body):
        m = _ITANIUM_SOURCE_NAME.match(body, i)
        if not m:
            if body[i] in "CD" and i + 1 < len(body) and body[i + 1].isdigit() and names:
                i += 2
                continue
            if body[i] == "I":
                # skip template arguments
                depth, i = 1, i + 1
                while i < len(body) and depth:
                    depth += {"I": 1, "E": -1}.get(body[i], 0)
                    i += 1
                continue
            break
        n = int(m.group(1))
        start = m.end()
        names.append(body[start:start + n])
        i = start + n
    return names[-1] if names else None


_PRE_RE = re.compile(r"""
    (?P<norm>\b[vam]_\d+\b)
  | (?P<sym>[@%](?:"[^"]*"|[-\w.$]+))
  | (?P<num>-?(?:0x[0-9A-Fa-f]+|\d+(?:\.\d+)?(?:e[-+]?\d+)?))
  | (?P<word>[A-Za-z_$][\w.$]*)
  | (?P<op><-|->|<<|>>|<=|>=|==|!=|\.\.\.)
  | (?P<punct>\S)
""", re.VERBOSE)


def _words(ident: str) -> list[str]:
    out = []
    for k, piece in enumerate(ident.split(".")):
        if k:
            out.append(".")
        out.extend(split_identifier(piece) if not piece.isdigit() else [piece])
    return out


def pretokenize(text: str) -> list[str]:
    """Split one line of IR or environment text into words."""
    out: list[str] = []
    for m in _PRE_RE.finditer(text):
        kind = m.lastgroup
        tok = m.group()
        if kind == "sym":
            sigil, name = tok[0], tok[1:].strip('"')
            if re.fullmatch(r"[vam]_\d+", name) or name.isdigit():
                out.extend([sigil, name])
            else:
                out.append(sigil)
                out.extend(_words(simplify_symbol(name)))
        elif kind == "word":
            out.extend(_words(tok))
        else:
            out.append(tok)
    return out


def canonical_text(text: str) -> str:
    return " ".join(pretokenize(text))


# ---------------------------------------------------------------- BPE

@dataclass
class BpeVocab:
    merges: list[tuple[str, str]]
    tokens: list[str]
    _index: dict[str, int] = field(default_factory=dict, repr=False, compare=False)
    _ranks: dict[tuple[str, str], int] = field(default_factory=dict, repr=False, compare=False)
    _cache: dict[str, list[str]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self._ranks = {p: i for i, p in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def segment(self, word: str) -> list[str]:
        if word in self._cache:
            return self._cache[word]
        syms = list(word) + [END]
        while len(syms) > 1:
            best = None
            for k in range(len(syms) - 1):
                r = self._ranks.get((syms[k], syms[k + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, k)
            if best is None:
                break
            k = best[1]
            syms[k:k + 2] = [syms[k] + syms[k + 1]]
        self._cache[word] = syms
        return syms

    def encode_words(self, words: Iterable[str]) -> list[int]:
        return [self.id_of(s) for w in words for s in self.segment(w)]

    def encode(self, text: str) -> list[int]:
        return self.encode_words(pretokenize(text))

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        parts = []
        for i in ids:
            tok = self.tokens[i]
            if tok in SPECIALS:
                if skip_special:
                    continue
                tok = tok + END
            parts.append(tok)
        return "".join(parts).replace(END, " ").strip()

    def save(self, path: str | Path) -> None:
        lines = ["#irsem-bpe 1", f"tokens {len(self.tokens)}"]
        lines += self.tokens
        lines.append(f"merges {len(self.merges)}")
        lines += [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BpeVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines[0] != "#irsem-bpe 1":
            raise ValueError(f"{path}: not a vocabulary file")
        n = int(lines[1].split()[1])
        tokens = lines[2:2 + n]
        m = int(lines[2 + n].split()[1])
        merges = [tuple(l.split(" ")) for l in lines[3 + n:3 + n + m]]
        return cls(merges, tokens)  # type: ignore[arg-type]


def train_bpe(lines: Iterable[str], vocab_size: int, min_frequency: int = 1) -> BpeVocab:
    """Greedy pair-merge training; ties go to the lexicographically smallest pair."""
    counts = Counter(w for line in lines for w in pretokenize(line))
    if not counts:
        raise ValueError("empty corpus")
    alphabet = sorted({c for w in counts for c in w})
    base = list(SPECIALS) + alphabet + [END]
    if vocab_size < len(base):
        raise ValueError(f"vocab_size {vocab_size} is below the alphabet size {len(base)}")
    words = [(list(w) + [END], c) for w, c in sorted(counts.items())]
    merges: list[tuple[str, str]] = []
    tokens = list(base)
    known = set(tokens)
    while len(tokens) < vocab_size:
        pairs: Counter = Counter()
        for syms, c in words:
            for k in range(len(syms) - 1):
                pairs[(syms[k], syms[k + 1])] += c
        if not pairs:
            break
        top = max(pairs.values())
        if top < min_frequency:
            break
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        new = best[0] + best[1]
        if new not in known:
            tokens.append(new)
            known.add(new)
        for syms, _ in words:
            k = 0
            while k < len(syms) - 1:
                if syms[k] == best[0] and syms[k + 1] == best[1]:
                    syms[k:k + 2] = [new]
                k += 1
    return BpeVocab(merges, tokens)


# ---------------------------------------------------------------- samples

def instruction_texts(fn: IrFunction) -> list[str]:
    return [format_instruction(i) for i in fn.instructions]


@dataclass
class MaskPlan:
    """Masked instruction slots per side with their action.

    ``replacements`` hold the token ids used for "random" actions.
    """

    ir: dict[int, str] = field(default_factory=dict)
    env: dict[int, str] = field(default_factory=dict)
    ir_replacements: dict[int, list[int]] = field(default_factory=dict)
    env_replacements: dict[int, list[int]] = field(default_factory=dict)


@dataclass
class TrainingSample:
    function_id: str
    variant_id: str
    ir_tokens: list[list[int]]
    env_tokens: list[list[int]]
    pce: list[tuple[int, int, int]]
    K: int = 4
    B_ir: int = 32
    B_env: int = 16
    mask: MaskPlan | None = None

    def __len__(self) -> int:
        return len(self.ir_tokens)

    @property
    def n_groups(self) -> int:
        return math.ceil(len(self) / self.K)

    def groups(self, side: str) -> list[list[list[int]]]:
        """Instruction slots per group; trailing slots of the last group are empty."""
        toks = self.ir_tokens if side == "ir" else self.env_tokens
        out = []
        for g in range(self.n_groups):
            chunk = [list(t) for t in toks[g * self.K:(g + 1) * self.K]]
            chunk += [[] for _ in range(self.K - len(chunk))]
            out.append(chunk)
        return out

    def to_json(self) -> str:
        return json.dumps({
            "function_id": self.function_id, "variant_id": self.variant_id,
            "ir_tokens": self.ir_tokens, "env_tokens": self.env_tokens,
            "pce": [list(t) for t in self.pce], "K": self.K, "B_ir": self.B_ir, "B_env": self.B_env,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TrainingSample":
        d = json.loads(line)
        return cls(d["function_id"], d["variant_id"], d["ir_tokens"], d["env_tokens"],
                   [tuple(t) for t in d["pce"]], d.get("K", 4), d.get("B_ir", 32), d.get("B_env", 16))


def fit_budget(lengths: Sequence[int], budget: int, K: int) -> list[int]:
    """Token allowance per instruction of one group.

    Each instruction first gets up to floor(budget/K) tokens; the rest of the
    budget goes greedily, in order, to instructions that want more.
    """
    cap = budget // K
    alloc = [min(n, cap) for n in lengths]
    left = budget - sum(alloc)
    for k, n in enumerate(lengths):
        if left <= 0:
            break
        extra = min(n - alloc[k], left)
        alloc[k] += extra
        left -= extra
    return alloc


def _pack(tokens: list[list[int]], budget: int, K: int) -> list[list[int]]:
    out = []
    for g in range(0, len(tokens), K):
        group = tokens[g:g + K]
        alloc = fit_budget([len(t) for t in group], budget, K)
        out.extend(t[:a] for t, a in zip(group, alloc))
    return out


def _cut_triple(t, limit: int) -> tuple[int, int, int]:
    return tuple(x if x < limit else -1 for x in t)


def assemble_sample(fn: IrFunction, env: list[str], pce: PceTable, vocab: BpeVocab,
                    K: int = 4, B_ir: int = 32, B_env: int = 16,
                    function_id: str = "", variant_id: str = "",
                    max_instructions: int = MAX_INSTRUCTIONS, truncate: bool = False) -> TrainingSample:
    """Encode one function. With ``truncate`` a long function keeps its first
    ``max_instructions`` instructions and jumps past the cut become unknown."""
    n = len(fn)
    if n == 0:
        raise SampleError(f"{fn.name}: empty function")
    if len(env) != n or len(pce.triples) != n:
        raise SampleError(f"{fn.name}: environment/PCE rows do not match the instructions")
    texts = instruction_texts(fn)
    triples = [tuple(t) for t in pce.triples]
    if n > max_instructions:
        if not truncate:
            raise SampleError(f"{fn.name}: {n} instructions exceed the limit of {max_instructions}")
        texts, env = texts[:max_instructions], env[:max_instructions]
        triples = [_cut_triple(t, max_instructions) for t in triples[:max_instructions]]
    ir = [vocab.encode(t) for t in texts]
    ev = [vocab.encode(t) for t in env]
    return TrainingSample(function_id or fn.name, variant_id, _pack(ir, B_ir, K), _pack(ev, B_env, K),
                          triples, K, B_ir, B_env)


def sample_from_function(fn: IrFunction, vocab: BpeVocab, K: int = 4, B_ir: int = 32, B_env: int = 16,
                         function_id: str = "", variant_id: str = "", calls: bool = True,
                         max_instructions: int = MAX_INSTRUCTIONS, truncate: bool = False) -> TrainingSample:
    cfg, _, loops = analyze(fn)
    return assemble_sample(fn, env_lines(fn, cfg, loops, calls), compute_pce(fn, cfg), vocab,
                           K, B_ir, B_env, function_id, variant_id, max_instructions, truncate)


def _stochastic_round(x: float, rng: np.random.Generator) -> int:
    base = math.floor(x)
    return base + int(rng.random() < x - base)


def _fit_length(src: list[int], n: int) -> list[int]:
    if n == 0:
        return []
    if not src:
        return [MASK_ID] * n
    return [src[k % len(src)] for k in range(n)]


def sample_mask_plan(sample: TrainingSample, rng: np.random.Generator, rate: float = MASK_RATE,
                     ir_pool: Sequence[list[int]] | None = None,
                     env_pool: Sequence[list[int]] | None = None) -> MaskPlan:
    """Pick ``rate`` of the instructions on each side, never the same one twice.

    The IR set is drawn first and the environment set from the remaining
    slots. Each pick is masked (80%), replaced by a random instruction from
    the same side (10%) or kept (10%). A replacement is trimmed or cycled to
    the original instruction's token count.
    """
    n = len(sample)
    plan = MaskPlan()
    ir_pool = ir_pool if ir_pool is not None else sample.ir_tokens
    env_pool = env_pool if env_pool is not None else sample.env_tokens

    k_ir = min(n, _stochastic_round(rate * n, rng))
    ir_idx = sorted(int(i) for i in rng.choice(n, size=k_ir, replace=False)) if k_ir else []
    rest = np.array([i for i in range(n) if i not in set(ir_idx)], dtype=int)
    k_env = min(len(rest), _stochastic_round(rate * n, rng))
    env_idx = sorted(int(i) for i in rng.choice(rest, size=k_env, replace=False)) if k_env else []

    for side, idx, actions, repl, pool, toks in (
            ("ir", ir_idx, plan.ir, plan.ir_replacements, ir_pool, sample.ir_tokens),
            ("env", env_idx, plan.env, plan.env_replacements, env_pool, sample.env_tokens)):
        for i in idx:
            u = rng.random()
            if u < 0.8:
                actions[i] = "mask"
            elif u < 0.9:
                actions[i] = "random"
                src = pool[int(rng.integers(len(pool)))] if len(pool) else []
                repl[i] = _fit_length(list(src), len(toks[i]))
            else:
                actions[i] = "keep"
    return plan


def apply_mask(tokens: list[list[int]], actions: dict[int, str],
               replacements: dict[int, list[int]]) -> list[list[int]]:
    out = []
    for i, t in enumerate(tokens):
        act = actions.get(i)
        if act == "mask":
            out.append([MASK_ID] * len(t))
        elif act == "random":
            out.append(list(replacements[i]))
        else:
            out.append(list(t))
    return out


# ---------------------------------------------------------------- dataset IO

def write_dataset(path: str | Path, samples: Iterable[TrainingSample]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(s.to_json() + "\n")
            n += 1
    return n


def read_dataset(path: str | Path) -> list[TrainingSample]:
    with open(path, encoding="utf-8") as f:
        return [TrainingSample.from_json(line) for line in f if line.strip()]
