"""In-memory IR model plus the CFG, dominator and natural-loop analyses.

Values are referred to by their normalized names: function arguments are
``a_i``, value-producing instructions ``v_i`` (definition order) and the
results of ``alloca`` are additionally known as stack slots ``m_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

BINARY_OPS = frozenset({
    "add", "sub", "mul", "sdiv", "udiv", "srem", "urem",
    "shl", "lshr", "ashr", "and", "or", "xor",
    "fadd", "fsub", "fmul", "fdiv", "frem",
})
UNARY_OPS = frozenset({"fneg"})
CAST_OPS = frozenset({
    "trunc", "zext", "sext", "fptrunc", "fpext", "fptosi", "fptoui",
    "sitofp", "uitofp", "bitcast", "ptrtoint", "inttoptr", "addrspacecast",
})
COMPARE_OPS = frozenset({"icmp", "fcmp"})
MEMORY_OPS = frozenset({"alloca", "load", "store", "getelementptr"})
TERMINATOR_OPS = frozenset({"br", "switch", "ret", "unreachable"})
OTHER_OPS = frozenset({"phi", "select", "call"})

SUPPORTED_OPS = (BINARY_OPS | UNARY_OPS | CAST_OPS | COMPARE_OPS | MEMORY_OPS
                 | TERMINATOR_OPS | OTHER_OPS)

# terminators we do not model, kept as opcode "unknown"
UNKNOWN_TERMINATORS = frozenset({
    "invoke", "resume", "indirectbr", "callbr", "catchswitch",
    "catchret", "cleanupret",
})


class CfgError(ValueError):
    pass


@dataclass(frozen=True)
class Operand:
    """One instruction operand.

    ``kind`` is one of ``value``, ``arg``, ``const``, ``global``, ``label``,
    ``expr`` (constant expressions and aggregates, kept as text) or ``meta``.
    """

    kind: str
    name: str
    ty: str = ""

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Arg:
    name: str
    ty: str
    raw: str = field(default="", compare=False)


@dataclass(frozen=True)
class Instruction:
    index: int
    opcode: str
    operands: tuple[Operand, ...] = ()
    result: str | None = None
    ty: str = ""
    pred: str = ""
    flags: tuple[str, ...] = ()
    # original mnemonic; differs from opcode only for "unknown"
    mnemonic: str = ""
    raw: str = field(default="", compare=False)
    line: int = field(default=0, compare=False)

    @property
    def is_terminator(self) -> bool:
        if self.opcode == "unknown":
            return self.mnemonic in UNKNOWN_TERMINATORS
        return self.opcode in TERMINATOR_OPS

    @property
    def labels(self) -> list[str]:
        return [op.name for op in self.operands if op.kind == "label"]


@dataclass(frozen=True)
class BasicBlock:
    label: str
    instructions: tuple[Instruction, ...]

    @property
    def terminator(self) -> Instruction:
        return self.instructions[-1]


@dataclass(frozen=True)
class IrFunction:
    name: str
    args: tuple[Arg, ...]
    blocks: tuple[BasicBlock, ...]
    ret_ty: str = "void"
    # textual SSA name (as written) -> normalized id
    value_table: dict[str, str] = field(default_factory=dict, compare=False)
    # alloca result v_i -> stack slot m_j
    slots: dict[str, str] = field(default_factory=dict)

    @property
    def instructions(self) -> list[Instruction]:
        return [inst for block in self.blocks for inst in block.instructions]

    def __len__(self) -> int:
        return sum(len(b.instructions) for b in self.blocks)

    def block_index(self, label: str) -> int:
        for i, block in enumerate(self.blocks):
            if block.label == label:
                return i
        raise CfgError(f"{self.name}: branch to undefined label %{label}")

    def block_of(self) -> list[int]:
        """Block index of every instruction, indexed by instruction index."""
        out = []
        for b, block in enumerate(self.blocks):
            out.extend([b] * len(block.instructions))
        return out

    def first_index(self, block: int) -> int:
        return self.blocks[block].instructions[0].index

    def definitions(self) -> dict[str, Instruction]:
        return {i.result: i for i in self.instructions if i.result is not None}


@dataclass(frozen=True)
class Cfg:
    """Block-level control flow graph.

    ``edges[b]`` lists ``(successor, label)`` in terminator operand order;
    ``label`` is ``"true"``/``"false"`` for conditional branches, else None.
    """

    edges: tuple[tuple[tuple[int, str | None], ...], ...]
    entry: int = 0

    def __len__(self) -> int:
        return len(self.edges)

    def succs(self, b: int) -> list[int]:
        seen: list[int] = []
        for dst, _ in self.edges[b]:
            if dst not in seen:
                seen.append(dst)
        return seen

    def preds(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.edges]
        for b in range(len(self.edges)):
            for s in self.succs(b):
                out[s].append(b)
        return out

    def reachable(self) -> set[int]:
        seen = {self.entry}
        work = [self.entry]
        while work:
            b = work.pop()
            for s in self.succs(b):
                if s not in seen:
                    seen.add(s)
                    work.append(s)
        return seen

    @classmethod
    def from_succs(cls, succs: list[list[int]]) -> "Cfg":
        """Unlabeled graph from plain successor lists (tests, synthetic CFGs)."""
        return cls(tuple(tuple((s, None) for s in ss) for ss in succs))


@dataclass(frozen=True)
class Loop:
    header: int
    body: frozenset[int]
    parent: int | None  # index into LoopForest.loops


@dataclass(frozen=True)
class LoopForest:
    loops: tuple[Loop, ...]
    block_depth: tuple[int, ...]
    depth: tuple[int, ...]  # per instruction


def build_cfg(fn: IrFunction) -> Cfg:
    edges = []
    for block in fn.blocks:
        term = block.terminator
        targets = [fn.block_index(label) for label in term.labels]
        if term.opcode == "br" and len(targets) == 2:
            out = ((targets[0], "true"), (targets[1], "false"))
        else:
            out = tuple((t, None) for t in targets)
        edges.append(out)
    return Cfg(tuple(edges))


def reverse_postorder(cfg: Cfg) -> list[int]:
    order: list[int] = []
    seen = {cfg.entry}
    stack: list[tuple[int, Iterator[int]]] = [(cfg.entry, iter(cfg.succs(cfg.entry)))]
    while stack:
        node, it = stack[-1]
        for s in it:
            if s not in seen:
                seen.add(s)
                stack.append((s, iter(cfg.succs(s))))
                break
        else:
            stack.pop()
            order.append(node)
    return order[::-1]


def dominator_tree(cfg: Cfg) -> dict[int, int | None]:
    """Immediate dominators (Cooper, Harvey & Kennedy iteration).

    The entry maps to itself; unreachable blocks map to None.
    """
    rpo = reverse_postorder(cfg)
    rank = {b: i for i, b in enumerate(rpo)}
    preds = cfg.preds()
    idom: dict[int, int | None] = {b: None for b in range(len(cfg))}
    idom[cfg.entry] = cfg.entry

    def intersect(a: int, b: int) -> int:
        while a != b:
            while rank[a] > rank[b]:
                a = idom[a]  # type: ignore[assignment]
            while rank[b] > rank[a]:
                b = idom[b]  # type: ignore[assignment]
        return a

    changed = True
    while changed:
        changed = False
        for b in rpo[1:]:
            done = [p for p in preds[b] if idom[p] is not None]
            new = done[0]
            for p in done[1:]:
                new = intersect(p, new)
            if idom[b] != new:
                idom[b] = new
                changed = True
    return idom


def dominates(idom: dict[int, int | None], a: int, b: int) -> bool:
    """True if block ``a`` dominates block ``b`` (reflexive)."""
    if idom.get(b) is None:
        return False
    while True:
        if a == b:
            return True
        parent = idom[b]
        if parent == b or parent is None:
            return False
        b = parent


def find_loops(cfg: Cfg, idom: dict[int, int | None], fn: IrFunction | None = None) -> LoopForest:
    """Natural loops from back edges, merged per header.

    ``fn`` is only needed for the per-instruction depth table.
    """
    preds = cfg.preds()
    bodies: dict[int, set[int]] = {}
    for tail in range(len(cfg)):
        if idom[tail] is None:
            continue
        for head in cfg.succs(tail):
            if not dominates(idom, head, tail):
                continue
            body = bodies.setdefault(head, {head})
            work = [tail]
            while work:
                b = work.pop()
                if b in body:
                    continue
                body.add(b)
                work.extend(p for p in preds[b] if idom[p] is not None)

    # smallest first, so the first enclosing loop found is the innermost
    headers = sorted(bodies, key=lambda h: (len(bodies[h]), h))
    loops: list[Loop] = []
    order = sorted(headers, key=lambda h: (-len(bodies[h]), h))
    index = {h: i for i, h in enumerate(order)}
    for h in order:
        parent = None
        for other in headers:
            if other != h and h in bodies[other] and bodies[h] <= bodies[other]:
                parent = index[other]
                break
        loops.append(Loop(h, frozenset(bodies[h]), parent))

    block_depth = [0] * len(cfg)
    for body in bodies.values():
        for b in body:
            block_depth[b] += 1
    depth: tuple[int, ...] = ()
    if fn is not None:
        depth = tuple(block_depth[b] for b in fn.block_of())
    return LoopForest(tuple(loops), tuple(block_depth), depth)


def analyze(fn: IrFunction) -> tuple[Cfg, dict[int, int | None], LoopForest]:
    cfg = build_cfg(fn)
    idom = dominator_tree(cfg)
    return cfg, idom, find_loops(cfg, idom, fn)
