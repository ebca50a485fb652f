"""Independent brute-force oracles shared by the test suite.

These deliberately avoid the library's own algorithms: dominators come from
simple-path enumeration, reaching stores from bounded path walks, loops from
plain reachability.
"""

from __future__ import annotations

import math
from pathlib import Path

from hypothesis import strategies as st

FIXTURES = Path(__file__).parent / "fixtures"


def simple_paths(succs: list[list[int]], src: int, dst: int) -> list[list[int]]:
    out = []

    def walk(node: int, path: list[int]) -> None:
        if node == dst:
            out.append(path)
            return
        for s in succs[node]:
            if s not in path:
                walk(s, path + [s])

    walk(src, [src])
    return out


def brute_dominators(succs: list[list[int]], entry: int = 0) -> dict[int, int | None]:
    """idom via 'd dominates b iff d lies on every simple entry->b path'."""
    n = len(succs)
    doms: dict[int, set[int] | None] = {}
    for b in range(n):
        paths = simple_paths(succs, entry, b)
        doms[b] = set.intersection(*(set(p) for p in paths)) if paths else None
    idom: dict[int, int | None] = {}
    for b in range(n):
        if doms[b] is None:
            idom[b] = None
        elif b == entry:
            idom[b] = entry
        else:
            strict = doms[b] - {b}
            # the strict dominator that every other strict dominator dominates
            idom[b] = next(d for d in strict if all(o in doms[d] for o in strict))
    return idom


def brute_loop_depth(succs: list[list[int]], idom: dict[int, int | None]) -> list[int]:
    """Per-block count of natural loops (merged per header) containing it."""
    n = len(succs)
    doms = {b: _dom_set(idom, b) for b in range(n)}
    bodies: dict[int, set[int]] = {}
    for t in range(n):
        if idom[t] is None:
            continue
        for h in succs[t]:
            if h in doms[t]:
                body = bodies.setdefault(h, {h})
                for b in range(n):
                    if idom[b] is not None and _reaches_avoiding(succs, b, t, h):
                        body.add(b)
    depth = [0] * n
    for body in bodies.values():
        for b in body:
            depth[b] += 1
    return depth


def _dom_set(idom: dict[int, int | None], b: int) -> set[int]:
    out = set()
    if idom[b] is None:
        return out
    while True:
        out.add(b)
        if idom[b] == b:
            return out
        b = idom[b]


def _reaches_avoiding(succs: list[list[int]], a: int, t: int, h: int) -> bool:
    if a == h:
        return False
    seen, work = {a}, [a]
    while work:
        x = work.pop()
        if x == t:
            return True
        for s in succs[x]:
            if s != h and s not in seen:
                seen.add(s)
                work.append(s)
    return False


def brute_reaching(fn, cfg) -> dict[int, object]:
    """Reaching stores per slot load by walking block paths of at most
    2*|blocks| blocks, starting anywhere.

    Result per load: None when the slot escaped on some path into the load,
    else the set of store indices that are last-before-load on some path.
    Walks are pruned when they revisit a block with an already-seen state
    and no more remaining depth.
    """
    succs = [cfg.succs(b) for b in range(len(cfg))]
    limit = 2 * len(fn.blocks)
    slots = fn.slots
    loads = {}
    for b, block in enumerate(fn.blocks):
        for inst in block.instructions:
            op = inst.operands[0] if inst.operands else None
            if inst.opcode == "load" and op.kind == "value" and op.name in slots:
                loads[inst.index] = slots[op.name]
    result: dict[int, object] = {i: set() for i in loads}
    escaped_at: set[int] = set()
    seen: dict[tuple, int] = {}

    def walk(b: int, last: dict[str, int], esc: set[str], left: int) -> None:
        key = (b, tuple(sorted(last.items())), tuple(sorted(esc)))
        if seen.get(key, -1) >= left:
            return
        seen[key] = left
        last, esc = dict(last), set(esc)
        for inst in fn.blocks[b].instructions:
            if inst.index in loads:
                slot = loads[inst.index]
                if slot in esc:
                    escaped_at.add(inst.index)
                elif slot in last:
                    result[inst.index].add(last[slot])
            _apply(inst, last, esc, slots)
        if left > 1:
            for s in succs[b]:
                walk(s, last, esc, left - 1)

    for start in range(len(fn.blocks)):
        walk(start, {}, set(), limit)
    for i in escaped_at:
        result[i] = None
    return result


def _apply(inst, last: dict[str, int], esc: set[str], slots: dict[str, str]) -> None:
    for k, op in enumerate(inst.operands):
        if op.kind != "value" or op.name not in slots:
            continue
        if (inst.opcode == "load" and k == 0) or (inst.opcode == "store" and k == 1):
            continue
        if inst.opcode in ("icmp", "fcmp"):
            continue
        esc.add(slots[op.name])
    if inst.opcode == "store":
        ptr = inst.operands[1]
        if ptr.kind == "value" and ptr.name in slots:
            last[slots[ptr.name]] = inst.index


@st.composite
def random_function(draw, max_blocks: int = 8, with_escape: bool = True) -> str:
    """Random well-formed function over 1-3 stack slots and up to 8 blocks."""
    n_blocks = draw(st.integers(1, max_blocks))
    n_slots = draw(st.integers(1, 3))
    lines = ["declare void @sink(i32*)", "", "define i32 @rand(i32 %a, i32 %b) {", "b0:"]
    lines += [f"  %s{k} = alloca i32, align 4" for k in range(n_slots)]
    counter = 0
    for b in range(n_blocks):
        if b:
            lines.append(f"b{b}:")
        for _ in range(draw(st.integers(0, 4))):
            kind = draw(st.sampled_from(["store", "store", "load", "escape"] if with_escape
                                        else ["store", "load"]))
            slot = draw(st.integers(0, n_slots - 1))
            if kind == "store":
                val = draw(st.sampled_from(["%a", "%b", "0", "1", "7"]))
                lines.append(f"  store i32 {val}, i32* %s{slot}, align 4")
            elif kind == "load":
                lines.append(f"  %l{counter} = load i32, i32* %s{slot}, align 4")
                counter += 1
            else:
                lines.append(f"  call void @sink(i32* %s{slot})")
        # the entry block may not be a branch target
        term = draw(st.sampled_from(["ret", "br", "cond"])) if n_blocks > 1 else "ret"
        if term == "ret":
            lines.append("  ret i32 0")
        elif term == "br":
            lines.append(f"  br label %b{draw(st.integers(1, n_blocks - 1))}")
        else:
            t = draw(st.integers(1, n_blocks - 1))
            f = draw(st.integers(1, n_blocks - 1))
            lines.append(f"  %c{counter} = icmp slt i32 %a, %b")
            lines.append(f"  br i1 %c{counter}, label %b{t}, label %b{f}")
            counter += 1
    lines.append("}")
    return "\n".join(lines) + "\n"


@st.composite
def random_cfg(draw, max_blocks: int = 8) -> list[list[int]]:
    """Successor lists with 0-2 successors per block; entry has no preds."""
    n = draw(st.integers(1, max_blocks))
    succs = []
    for b in range(n):
        k = draw(st.integers(0, 2))
        targets = [draw(st.integers(1, n - 1)) for _ in range(k)] if n > 1 else []
        succs.append(list(dict.fromkeys(targets)))
    return succs


def scalar_softmax_ce(logits: list[float], target: int) -> float:
    m = max(logits)
    z = sum(math.exp(x - m) for x in logits)
    return -(logits[target] - m - math.log(z))


def central_differences(loss_fn, params, eps=1e-6, coords=None):
    """Central finite-difference gradient of ``loss_fn()`` for every tensor.

    ``coords`` optionally restricts each tensor to a list of flat indices;
    entries outside it are left as NaN.
    """
    import torch

    grads = []
    with torch.no_grad():
        for k, p in enumerate(params):
            flat = p.data.view(-1)
            g = torch.full_like(flat, float("nan"))
            idx = range(flat.numel()) if coords is None else coords[k]
            for i in idx:
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                g[i] = (up - down) / (2 * eps)
            grads.append(g.view_as(p))
    return grads


def relative_error(a, b, floor=1e-8):
    """||a - b|| / max(||a||, ||b||, floor) over the entries that are not NaN."""
    keep = ~(a.isnan() | b.isnan())
    a, b = a[keep], b[keep]
    return float((a - b).norm() / max(a.norm().item(), b.norm().item(), floor))
