import pytest
from hypothesis import given, settings

from irsem.ir import Cfg, build_cfg
from irsem.parser import parse_file, parse_function, parse_module
from irsem.pce import (
    CLS_ROW, POSITION_OFFSET, SEP_ROW, UNKNOWN_ROW, PceError, PceTriple, compute_pce,
    format_pce, pce_to_embedding_indices, reconstruct_edges,
)

from oracles import FIXTURES, random_function

ALL_FIXTURES = sorted(p.name for p in FIXTURES.glob("*.ll"))


def table_of(name):
    fn = parse_file(FIXTURES / name, strict=True).functions[0]
    return [tuple(t) for t in compute_pce(fn).triples]


def test_straight_line():
    assert table_of("add_ret.ll") == [(0, 1, 1), (1, 2, 2), (2, -1, -1)]


def test_if_else_hand_derived():
    # entry: icmp, sub, br | small: mul, add, br | big: sdiv, br | out: phi, ret
    assert table_of("branch.ll") == [
        (0, 1, 1), (1, 2, 2), (2, 3, 6),
        (3, 4, 4), (4, 5, 5), (5, 8, 8),
        (6, 7, 7), (7, 8, 8),
        (8, 9, 9), (9, -1, -1),
    ]


def test_loop_hand_derived():
    assert table_of("loop_store.ll") == [
        (0, 1, 1), (1, 2, 2), (2, 3, 3),
        (3, 4, 4), (4, 5, 5), (5, 6, 10),
        (6, 7, 7), (7, 8, 8), (8, 9, 9), (9, 3, 3),
        (10, 11, 11), (11, -1, -1),
    ]
    assert table_of("self_loop.ll") == [
        (0, 1, 1), (1, 2, 2), (2, 3, 3), (3, 4, 4), (4, 1, 5), (5, -1, -1),
    ]


def test_switch_call_sentinels():
    assert table_of("switch_call.ll") == [
        (0, -1, -1),   # call
        (1, -1, -1),   # switch
        (2, 7, 7), (3, 7, 7),
        (4, -1, -1),   # call
        (5, -1, -1),   # unreachable
        (6, 7, 7),
        (7, 8, 8), (8, -1, -1),
    ]


def test_truncation_maps_out_of_range_targets_to_unknown():
    fn = parse_file(FIXTURES / "branch.ll").functions[0]
    tab = compute_pce(fn, limit=5)
    assert [tuple(t) for t in tab.triples] == [
        (0, 1, 1), (1, 2, 2), (2, 3, -1), (3, 4, 4), (4, -1, -1)]


def test_empty_block_rejected():
    from irsem.ir import BasicBlock, IrFunction
    fn = IrFunction("f", (), (BasicBlock("entry", ()),))
    with pytest.raises(PceError):
        compute_pce(fn, cfg=Cfg(((),)))


def test_embedding_indices():
    fn = parse_function("define void @f() {\n  ret void\n}\n")
    tab = compute_pce(fn)
    assert len(tab) == 2
    cur, t, f = pce_to_embedding_indices(tab, 8)
    assert cur == [CLS_ROW, POSITION_OFFSET]
    assert t == f == [CLS_ROW, UNKNOWN_ROW]
    env = tab.for_env()
    cur, t, f = pce_to_embedding_indices(env, 8)
    assert cur[0] == t[0] == f[0] == SEP_ROW


def test_single_fall_through_row():
    fn = parse_function("define i32 @f(i32 %x) {\n  %y = add i32 %x, 1\n  ret i32 %y\n}\n")
    cur, t, f = pce_to_embedding_indices(compute_pce(fn), 4)
    assert (cur[1], t[1], f[1]) == (POSITION_OFFSET, POSITION_OFFSET + 1, POSITION_OFFSET + 1)


def test_call_row_unknown():
    fn = parse_file(FIXTURES / "switch_call.ll").functions[0]
    cur, t, f = pce_to_embedding_indices(compute_pce(fn), 16)
    assert t[1 + 4] == f[1 + 4] == UNKNOWN_ROW
    assert cur[1 + 4] == POSITION_OFFSET + 4


def test_position_overflow():
    fn = parse_file(FIXTURES / "branch.ll").functions[0]
    with pytest.raises(PceError):
        pce_to_embedding_indices(compute_pce(fn), 5)


def _expected_edges(fn):
    """Instruction-level successors except through switch/call/ret."""
    cfg = build_cfg(fn)
    edges = set()
    for b, block in enumerate(fn.blocks):
        for k, inst in enumerate(block.instructions):
            if inst.opcode in ("switch", "call", "ret", "unreachable", "unknown"):
                continue
            if k + 1 < len(block.instructions):
                edges.add((inst.index, inst.index + 1))
            else:
                for dst in cfg.succs(b):
                    edges.add((inst.index, fn.first_index(dst)))
    return edges


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_edge_reconstruction(name):
    for fn in parse_file(FIXTURES / name).functions:
        assert reconstruct_edges(compute_pce(fn)) == _expected_edges(fn)


@settings(max_examples=200, deadline=None)
@given(random_function())
def test_edge_reconstruction_random(text):
    fn = parse_module(text).functions[0]
    tab = compute_pce(fn)
    assert reconstruct_edges(tab) == _expected_edges(fn)
    assert compute_pce(fn) == tab
    for inst, tr in zip(fn.instructions, tab.triples):
        assert 0 <= tr.cur < len(fn)
        assert -1 <= tr.t_true < len(fn) and -1 <= tr.t_false < len(fn)
        if not inst.is_terminator:
            assert tr.t_true == tr.t_false
        if inst.opcode == "br" and len(inst.operands) == 1:
            assert tr.t_true == tr.t_false


def test_format():
    fn = parse_file(FIXTURES / "add_ret.ll").functions[0]
    assert format_pce(compute_pce(fn)) == "0\t0\t1\t1\n1\t1\t2\t2\n2\t2\t-1\t-1\n"


def test_triple_iter():
    assert tuple(PceTriple(1, 2, 3)) == (1, 2, 3)
