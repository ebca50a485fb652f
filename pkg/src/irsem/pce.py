"""Positional condition encoding: (current, true target, false target) per instruction."""

from __future__ import annotations

from dataclasses import dataclass

from .ir import Cfg, IrFunction, build_cfg

UNKNOWN = -1
# reserved codes for the leading special token of each side
CLS_CODE = -2
SEP_CODE = -3

# embedding rows; real positions start at POSITION_OFFSET
PAD_ROW = 0
CLS_ROW = 1
SEP_ROW = 2
UNKNOWN_ROW = 3
POSITION_OFFSET = 4


class PceError(ValueError):
    pass


@dataclass(frozen=True)
class PceTriple:
    cur: int
    t_true: int
    t_false: int

    def __iter__(self):
        return iter((self.cur, self.t_true, self.t_false))


CLS_TRIPLE = PceTriple(CLS_CODE, CLS_CODE, CLS_CODE)
SEP_TRIPLE = PceTriple(SEP_CODE, SEP_CODE, SEP_CODE)


@dataclass(frozen=True)
class PceTable:
    """Triples for instructions ``0..N-1`` preceded by one reserved special slot."""

    special: PceTriple
    triples: tuple[PceTriple, ...]

    def __len__(self) -> int:
        return len(self.triples) + 1

    @property
    def rows(self) -> list[PceTriple]:
        return [self.special, *self.triples]

    def for_env(self) -> "PceTable":
        """Same triples with the [SEP] code in the special slot."""
        return PceTable(SEP_TRIPLE, self.triples)


def compute_pce(fn: IrFunction, cfg: Cfg | None = None, limit: int | None = None) -> PceTable:
    """PCE table, optionally for the first ``limit`` instructions only.

    Targets that fall at or beyond the limit become the unknown code, so
    every emitted index is in range.
    """
    if cfg is None:
        cfg = build_cfg(fn)
    for b, block in enumerate(fn.blocks):
        if not block.instructions:
            raise PceError(f"{fn.name}: block {block.label} is empty")
    n = len(fn) if limit is None else min(limit, len(fn))

    def first(b: int) -> int:
        return fn.first_index(b)

    out = []
    for block_id, block in enumerate(fn.blocks):
        for inst in block.instructions:
            i = inst.index
            if i >= n:
                break
            if inst.opcode == "br":
                edges = cfg.edges[block_id]
                if len(edges) == 2:
                    t, f = first(edges[0][0]), first(edges[1][0])
                else:
                    t = f = first(edges[0][0])
            elif inst.is_terminator or inst.opcode in ("switch", "call", "ret", "unreachable"):
                t = f = UNKNOWN
            else:
                t = f = i + 1
            t = t if t < n else UNKNOWN
            f = f if f < n else UNKNOWN
            out.append(PceTriple(i, t, f))
    return PceTable(CLS_TRIPLE, tuple(out))


def _row(code: int, max_positions: int) -> int:
    if code == UNKNOWN:
        return UNKNOWN_ROW
    if code == CLS_CODE:
        return CLS_ROW
    if code == SEP_CODE:
        return SEP_ROW
    if code < 0:
        raise PceError(f"invalid position code {code}")
    if code >= max_positions:
        raise PceError(f"position {code} exceeds the budget of {max_positions}")
    return code + POSITION_OFFSET


def pce_to_embedding_indices(table: PceTable, max_positions: int) -> tuple[list[int], list[int], list[int]]:
    """Row ids for the current, true and false embedding tables.

    Each table has ``max_positions + POSITION_OFFSET`` rows.
    """
    cur, tru, fal = [], [], []
    for tr in table.rows:
        cur.append(_row(tr.cur, max_positions))
        tru.append(_row(tr.t_true, max_positions))
        fal.append(_row(tr.t_false, max_positions))
    return cur, tru, fal


def reconstruct_edges(table: PceTable) -> set[tuple[int, int]]:
    """Instruction-level successor edges readable from the table alone."""
    edges = set()
    for tr in table.triples:
        for t in (tr.t_true, tr.t_false):
            if t >= 0:
                edges.add((tr.cur, t))
    return edges


def format_pce(table: PceTable) -> str:
    return "".join(f"{k}\t{tr.cur}\t{tr.t_true}\t{tr.t_false}\n"
                   for k, tr in enumerate(table.triples))
