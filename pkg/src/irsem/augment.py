"""Variant recipes from randomized drop-and-shuffle of the -O2 pass list.

Randomness comes from numpy's PCG64 generator (``numpy.random.default_rng``)
so a seed reproduces the same recipes on any platform. Drawing one pass
list consumes, in order: one integer for N, one N-subset of positions, one
integer for m and one m-permutation of ``range(N)``.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# LLVM -O2 legacy pipeline, in order
O2_PASSES: tuple[str, ...] = (
    "-tbaa", "-scoped-noalias", "-forceattrs", "-inferattrs", "-ipsccp",
    "-called-value-propagation", "-attributor", "-globalopt", "-mem2reg",
    "-deadargelim", "-instcombine", "-simplifycfg", "-prune-eh", "-functionattrs",
    "-sroa", "-early-cse-memssa", "-speculative-execution", "-jump-threading",
    "-correlated-propagation", "-simplifycfg", "-domtree", "-instcombine",
    "-libcalls-shrinkwrap", "-pgo-memop-opt", "-tailcallelim", "-simplifycfg",
    "-reassociate", "-loop-simplify", "-lcssa", "-scalar-evolution", "-loop-rotate",
    "-licm", "-loop-unswitch", "-simplifycfg", "-instcombine", "-loop-simplify",
    "-lcssa", "-scalar-evolution", "-indvars", "-loop-idiom", "-loop-deletion",
    "-loop-unroll", "-mldst-motion", "-phi-values", "-gvn", "-phi-values", "-memcpyopt",
    "-sccp", "-demanded-bits", "-bdce", "-instcombine", "-jump-threading",
    "-correlated-propagation", "-phi-values", "-dse", "-loop-simplify", "-lcssa",
    "-scalar-evolution", "-licm", "-adce", "-simplifycfg", "-instcombine", "-barrier",
    "-elim-avail-extern", "-rpo-functionattrs", "-globalopt", "-globaldce",
    "-float2int", "-lower-constant-intrinsics", "-loop-simplify", "-lcssa",
    "-scalar-evolution", "-loop-rotate", "-loop-distribute", "-scalar-evolution",
    "-demanded-bits", "-loop-vectorize", "-loop-simplify", "-scalar-evolution",
    "-loop-load-elim", "-instcombine", "-simplifycfg", "-scalar-evolution",
    "-demanded-bits", "-slp-vectorizer", "-instcombine", "-loop-simplify", "-lcssa",
    "-scalar-evolution", "-loop-unroll", "-instcombine", "-loop-simplify", "-lcssa",
    "-scalar-evolution", "-licm", "-transform-warning", "-alignment-from-assumptions",
    "-strip-dead-prototypes", "-globaldce", "-constmerge", "-loop-simplify", "-lcssa",
    "-scalar-evolution", "-loop-sink", "-instsimplify", "-div-rem-pairs",
    "-simplifycfg",
)

BASELINES: tuple[tuple[str, ...], ...] = (("-O1",), ("-O2",), ("-O3",))
DEFAULT_M = 20
N_GENERATED = 16
OPT_ENV = "IRSEM_OPT"


class OptUnavailableError(RuntimeError):
    """No usable ``opt`` binary was found."""


class OptError(RuntimeError):
    pass


@dataclass(frozen=True)
class PassDraw:
    """One run of the generator with its intermediate choices.

    ``selected`` holds the kept positions of ``P`` (ascending) and ``swaps``
    the position pairs of the kept list that were exchanged.
    """

    selected: tuple[int, ...]
    swaps: tuple[tuple[int, int], ...]
    order: tuple[int, ...]  # indices into P after swapping
    passes: tuple[str, ...]

    @property
    def m(self) -> int:
        return 2 * len(self.swaps)


def draw_pass_list(P: tuple[str, ...] | list[str], M: int, rng: np.random.Generator) -> PassDraw:
    if M % 2:
        raise ValueError(f"M must be even, got {M}")
    if not P:
        raise ValueError("empty pass list")
    n = int(rng.integers(0, len(P) + 1))
    selected = np.sort(rng.choice(len(P), size=n, replace=False)) if n else np.array([], dtype=int)
    # m > N would make the index draw impossible; clamp to the largest even <= N
    m_max = min(M, n - n % 2)
    m = 2 * int(rng.integers(0, m_max // 2 + 1))
    S = rng.choice(n, size=m, replace=False) if m else np.array([], dtype=int)
    order = [int(k) for k in selected]
    swaps = []
    for i in range(0, m - 1, 2):
        a, b = int(S[i]), int(S[i + 1])
        order[a], order[b] = order[b], order[a]
        swaps.append((a, b))
    return PassDraw(tuple(int(k) for k in selected), tuple(swaps), tuple(order),
                    tuple(P[k] for k in order))


def generate_pass_list(P: tuple[str, ...] | list[str], M: int, rng: np.random.Generator) -> list[str]:
    return list(draw_pass_list(P, M, rng).passes)


@dataclass(frozen=True)
class AugmentPlan:
    seed: int
    recipes: tuple[tuple[str, ...], ...]

    def to_text(self) -> str:
        return "".join(" ".join(r) + "\n" for r in self.recipes)

    @classmethod
    def from_text(cls, text: str, seed: int = 0) -> "AugmentPlan":
        return cls(seed, tuple(tuple(line.split()) for line in text.splitlines()))


def make_plan(seed: int, M: int = DEFAULT_M, P: tuple[str, ...] = O2_PASSES) -> AugmentPlan:
    """Three -O1/-O2/-O3 baselines followed by 16 generated lists."""
    rng = np.random.default_rng(seed)
    generated = tuple(tuple(generate_pass_list(P, M, rng)) for _ in range(N_GENERATED))
    return AugmentPlan(seed, BASELINES + generated)


def plan_seed(global_seed: int, content: bytes | str) -> int:
    """Per-program seed from a global seed and the program text."""
    if isinstance(content, str):
        content = content.encode()
    digest = hashlib.sha256(str(global_seed).encode() + b":" + content).digest()
    return int.from_bytes(digest[:8], "little")


def find_opt(explicit: str | None = None) -> str | None:
    """Resolve the opt binary: explicit path, then $IRSEM_OPT, then PATH."""
    for cand in (explicit, os.environ.get(OPT_ENV)):
        if cand:
            return cand if (os.path.isfile(cand) or shutil.which(cand)) else None
    for name in ("opt", *(f"opt-{v}" for v in range(20, 9, -1))):
        found = shutil.which(name)
        if found:
            return found
    return None


def apply_recipe(src: str | Path, recipe: tuple[str, ...] | list[str], out: str | Path | None = None,
                 opt: str | None = None, timeout: float = 120.0) -> Path:
    """Run ``opt -S <recipe>`` on ``src`` and return the output path."""
    binary = find_opt(opt)
    if binary is None:
        raise OptUnavailableError(
            f"no opt binary found (pass one explicitly or set ${OPT_ENV}); "
            "variants can be supplied as pre-generated .ll files instead")
    src = Path(src)
    out = Path(out) if out is not None else src.with_suffix(".opt.ll")
    cmd = [binary, "-S", *recipe, str(src), "-o", str(out)]
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    except subprocess.TimeoutExpired as e:
        raise OptError(f"opt timed out after {timeout}s") from e
    if proc.returncode != 0:
        raise OptError(f"opt failed ({proc.returncode}): {proc.stderr.strip()}")
    return out


def verify_ll(path: str | Path, opt: str | None = None) -> bool:
    """Check a .ll file with ``opt -verify``, falling back to clang's IR reader.

    Raises OptUnavailableError when neither tool exists.
    """
    binary = find_opt(opt)
    if binary is not None:
        cmd = [binary, "-verify", "-disable-output", str(path)]
    elif shutil.which("clang"):
        cmd = ["clang", "-Wno-override-module", "-x", "ir", "-c", "-o", os.devnull, str(path)]
    else:
        raise OptUnavailableError("neither opt nor clang is available")
    return subprocess.run(cmd, capture_output=True).returncode == 0
