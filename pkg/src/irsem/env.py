"""Abstract environment constraints, one list per instruction.

Each instruction is summarized by the relations it establishes between
values, memory and control: SSA arithmetic, stack reads and writes (with the
set of values a load may observe), address computation, selection, return
value and loop depth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .ir import (
    BINARY_OPS, CAST_OPS, Cfg, Instruction, IrFunction, LoopForest, Operand,
)

KINDS = ("Arith", "Reference", "Load", "Store", "Gep", "Phi", "Select", "Ret",
         "LoopDepth", "Call")

BINARY_SYMBOLS = {
    "add": "+", "fadd": "+", "sub": "-", "fsub": "-", "mul": "*", "fmul": "*",
    "sdiv": "/", "udiv": "/", "fdiv": "/", "srem": "%", "urem": "%", "frem": "%",
    "shl": "<<", "ashr": ">>", "lshr": ">>", "and": "&", "or": "|", "xor": "^",
}
COMPARE_SYMBOLS = {
    "eq": "==", "ne": "!=", "oeq": "==", "ueq": "==", "one": "!=", "une": "!=",
    "slt": "<", "ult": "<", "olt": "<", "sle": "<=", "ule": "<=", "ole": "<=",
    "sgt": ">", "ugt": ">", "ogt": ">", "sge": ">=", "uge": ">=", "oge": ">=",
}


@dataclass(frozen=True)
class EnvConstraint:
    kind: str
    operands: tuple[str, ...]
    rendered: str

    def __str__(self) -> str:
        return self.rendered


# ---------------------------------------------------------------- constants

def render_constant(text: str) -> str:
    """Decimal for integers, shortest round-trip form for floats."""
    if text in ("true", "false"):
        return text
    if text.startswith(("0x", "-0x", "+0x")) and text.lstrip("+-")[2:3] not in ("K", "L", "M", "H", "R"):
        bits = int(text.lstrip("+-"), 16)
        value = struct.unpack("<d", struct.pack("<Q", bits))[0]
        return _float_text(-value if text.startswith("-") else value)
    try:
        return str(int(text))
    except ValueError:
        pass
    try:
        return _float_text(float(text))
    except ValueError:
        return text


def _float_text(value: float) -> str:
    # repr gives the shortest text that round-trips
    return repr(value)


def constant_value(text: str) -> float | None:
    r = render_constant(text)
    if r == "true":
        return 1.0
    if r == "false":
        return 0.0
    try:
        return float(r)
    except ValueError:
        return None


def render_operand(op: Operand, fn: IrFunction, as_address: bool = False) -> str:
    if op.kind == "value":
        if as_address and op.name in fn.slots:
            return fn.slots[op.name]
        return op.name
    if op.kind == "arg":
        return op.name
    if op.kind == "global":
        return "@" + op.name
    if op.kind == "const":
        return render_constant(op.name)
    return op.name


def _value_key(op: Operand, defs: dict[str, int]) -> tuple:
    """Sort key: arguments, then values by definition index, then constants."""
    if op.kind == "arg":
        return (0, int(op.name[2:]), "")
    if op.kind == "value":
        return (1, defs.get(op.name, 0), "")
    if op.kind == "const":
        v = constant_value(op.name)
        if v is not None:
            return (2, v, "")
    return (3, 0, op.name)


# ---------------------------------------------------------------- memory

@dataclass(frozen=True)
class ReachingStores:
    """Possible values of each stack load.

    ``values[load index]`` is a tuple of ``(store index, operand)`` pairs in
    store order, or None when the slot's address has escaped and nothing is
    known. Loads through non-stack addresses do not appear.
    """

    values: dict[int, tuple[tuple[int, Operand], ...] | None]


def _slot_of(op: Operand, fn: IrFunction) -> str | None:
    if op.kind == "value":
        return fn.slots.get(op.name)
    return None


def escaping_uses(inst: Instruction, fn: IrFunction) -> set[str]:
    """Stack slots whose address leaves direct load/store use at ``inst``."""
    out = set()
    for k, op in enumerate(inst.operands):
        slot = _slot_of(op, fn)
        if slot is None:
            continue
        if inst.opcode == "load" and k == 0:
            continue
        if inst.opcode == "store" and k == 1:
            continue
        if inst.opcode in ("icmp", "fcmp"):
            continue
        out.add(slot)
    return out


def transfer(inst: Instruction, fn: IrFunction, state: dict[str, frozenset], escaped: frozenset
             ) -> tuple[dict[str, frozenset], frozenset]:
    """One instruction's effect on (slot -> reaching stores, escaped slots)."""
    esc = escaping_uses(inst, fn)
    if esc:
        escaped = escaped | esc
    if inst.opcode == "store":
        slot = _slot_of(inst.operands[1], fn)
        if slot is not None:
            state = dict(state)
            state[slot] = frozenset({(inst.index, inst.operands[0])})
    return state, escaped


def _join(states: list[tuple[dict[str, frozenset], frozenset]]) -> tuple[dict[str, frozenset], frozenset]:
    merged: dict[str, frozenset] = {}
    escaped: frozenset = frozenset()
    for st, esc in states:
        escaped = escaped | esc
        for slot, facts in st.items():
            merged[slot] = merged.get(slot, frozenset()) | facts
    return merged, escaped


def reaching_stores(fn: IrFunction, cfg: Cfg) -> ReachingStores:
    """Flow-sensitive reaching stores per stack slot (strong updates).

    A store reaches a load when some CFG path leads from the store to the
    load without another store to the same slot on the way.
    """
    n = len(cfg)
    preds = cfg.preds()
    empty: tuple[dict[str, frozenset], frozenset] = ({}, frozenset())
    out_state = [empty] * n

    # a store reaches a load if some CFG path joins them, so unreachable
    # blocks take part like any other
    def state_in(b: int) -> tuple[dict[str, frozenset], frozenset]:
        return _join([out_state[p] for p in preds[b]])

    changed = True
    while changed:
        changed = False
        for b in range(n):
            state, esc = state_in(b)
            for inst in fn.blocks[b].instructions:
                state, esc = transfer(inst, fn, state, esc)
            if (state, esc) != out_state[b]:
                out_state[b] = (state, esc)
                changed = True

    values: dict[int, tuple[tuple[int, Operand], ...] | None] = {}
    for b in range(n):
        state, esc = state_in(b)
        for inst in fn.blocks[b].instructions:
            if inst.opcode == "load":
                slot = _slot_of(inst.operands[0], fn)
                if slot is not None:
                    if slot in esc:
                        values[inst.index] = None
                    else:
                        values[inst.index] = _ordered_facts(state.get(slot, frozenset()), fn)
            state, esc = transfer(inst, fn, state, esc)
    return ReachingStores(values)


def _ordered_facts(facts: frozenset, fn: IrFunction) -> tuple[tuple[int, Operand], ...]:
    seen: dict[str, tuple[int, Operand]] = {}
    for idx, op in sorted(facts, key=lambda f: f[0]):
        key = render_operand(op, fn)
        if key not in seen:
            seen[key] = (idx, op)
    return tuple(seen.values())


# ---------------------------------------------------------------- rendering

def _c(kind: str, operands: list[str], text: str) -> EnvConstraint:
    return EnvConstraint(kind, tuple(operands), text)


def instruction_constraints(inst: Instruction, fn: IrFunction, stores: ReachingStores,
                            defs: dict[str, int], calls: bool = True) -> list[EnvConstraint]:
    op = inst.opcode
    r = inst.result
    ops = inst.operands

    def val(o: Operand) -> str:
        return render_operand(o, fn)

    def addr(o: Operand) -> str:
        return render_operand(o, fn, as_address=True)

    if op in BINARY_OPS:
        x, y = val(ops[0]), val(ops[1])
        return [_c("Arith", [r, x, y], f"{r} = {x} {BINARY_SYMBOLS[op]} {y}")]
    if op in ("icmp", "fcmp"):
        x, y = val(ops[0]), val(ops[1])
        sym = COMPARE_SYMBOLS.get(inst.pred, inst.pred)
        return [_c("Arith", [r, x, y], f"{r} = {x} {sym} {y}")]
    if op in CAST_OPS or op == "fneg":
        x = val(ops[0])
        return [_c("Arith", [r, x], f"{r} = {op} {x}")]
    if op == "alloca":
        m = fn.slots[r]
        return [_c("Reference", [r, m], f"{r} = reference {m}")]
    if op == "load":
        ptr = ops[0]
        slot = _slot_of(ptr, fn)
        if slot is None:
            x = val(ptr)
            return [_c("Load", [r, x], f"{r} <- dereference {x}")]
        facts = stores.values.get(inst.index)
        if not facts:
            return [_c("Load", [r, slot], f"{r} <- {slot}")]
        ys = [val(o) for _, o in facts]
        return [_c("Load", [r, slot, *ys], f"{r} <- {slot} = {', '.join(ys)}")]
    if op == "store":
        v = val(ops[0])
        slot = _slot_of(ops[1], fn)
        if slot is None:
            x = val(ops[1])
            return [_c("Store", [v, x], f"{v} -> dereference {x}")]
        return [_c("Store", [v, slot], f"{v} -> {slot}")]
    if op == "getelementptr":
        base = addr(ops[0])
        idx = [val(o) for o in ops[1:]]
        return [_c("Gep", [r, base, *idx], f"{r} = gep {base} {', '.join(idx)}".rstrip())]
    if op == "phi":
        incoming = [ops[k] for k in range(0, len(ops), 2)]
        uniq: dict[str, Operand] = {}
        for o in sorted(incoming, key=lambda o: _value_key(o, defs)):
            uniq.setdefault(val(o), o)
        xs = list(uniq)
        return [_c("Phi", [r, *xs], f"{r} = {', '.join(xs)}")]
    if op == "select":
        c, a, b = (val(o) for o in ops)
        return [_c("Select", [r, c, a, b], f"{r} = select {c} {a} {b}")]
    if op == "ret":
        if not ops:
            return []
        x = val(ops[0])
        return [_c("Ret", [x], f"ret = {x}")]
    if op == "call" and calls:
        callee = val(ops[0])
        if r is None:
            return [_c("Call", [callee], f"call {callee}")]
        return [_c("Call", [r, callee], f"{r} = call {callee}")]
    return []


def extract_constraints(fn: IrFunction, cfg: Cfg, loops: LoopForest, calls: bool = True
                        ) -> list[list[EnvConstraint]]:
    """Constraint list for every instruction, indexed by instruction index.

    ``calls`` toggles the ``v_i = call f`` extension.
    """
    stores = reaching_stores(fn, cfg)
    defs = {i.result: i.index for i in fn.instructions if i.result is not None}
    out = []
    for inst in fn.instructions:
        cs = instruction_constraints(inst, fn, stores, defs, calls)
        depth = loops.depth[inst.index] if loops.depth else 0
        if depth > 0:
            cs.append(_c("LoopDepth", [str(depth)], f"loop = {depth}"))
        out.append(cs)
    return out


def render_env_line(constraints: list[EnvConstraint]) -> str:
    ordered = sorted(constraints, key=lambda c: c.kind == "LoopDepth")
    return "; ".join(c.rendered for c in ordered)


def env_lines(fn: IrFunction, cfg: Cfg, loops: LoopForest, calls: bool = True) -> list[str]:
    return [render_env_line(cs) for cs in extract_constraints(fn, cfg, loops, calls)]


def format_env_file(lines: list[str]) -> str:
    return "".join(f"{i}\t{line}\n" for i, line in enumerate(lines))
