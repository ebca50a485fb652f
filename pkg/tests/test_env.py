import pytest
from hypothesis import given, settings

from irsem.env import (
    EnvConstraint, env_lines, extract_constraints, format_env_file, reaching_stores,
    render_constant, render_env_line,
)
from irsem.ir import analyze, build_cfg
from irsem.parser import parse_file, parse_function, parse_module

from oracles import FIXTURES, brute_reaching, random_function

ALL_FIXTURES = sorted(p.name for p in FIXTURES.glob("*.ll"))


def lines_of(name, **kw):
    fn = parse_file(FIXTURES / name, strict=True).functions[0]
    cfg, _, loops = analyze(fn)
    return env_lines(fn, cfg, loops, **kw)


def test_add_constant():
    fn = parse_function("""
define i32 @f(i32 %a0) {
  %v0 = add i32 %a0, 1
  %v1 = add i32 %a0, 2
  %v2 = add i32 %a0, 7
  ret i32 %v2
}
""")
    cfg, _, loops = analyze(fn)
    assert env_lines(fn, cfg, loops)[2] == "v_2 = a_0 + 7"
    assert env_lines(fn, cfg, loops)[3] == "ret = v_2"


def test_diamond_hand_derived():
    assert lines_of("diamond.ll") == [
        "v_0 = reference m_0",
        "v_1 = a_0 > 0",
        "",
        "5 -> m_0",
        "",
        "v_2 = a_0 * a_0",
        "v_3 = v_2 + 1",
        "v_3 -> m_0",
        "",
        "v_4 <- m_0 = 5, v_3",
        "ret = v_4",
    ]


def test_loop_store_hand_derived():
    assert lines_of("loop_store.ll") == [
        "v_0 = reference m_0",
        "1 -> m_0",
        "",
        "v_1 = v_4, 0; loop = 1",
        "v_2 = v_1 < a_0; loop = 1",
        "loop = 1",
        "v_3 = v_1 * v_1; loop = 1",
        "v_3 -> m_0; loop = 1",
        "v_4 = v_1 + 1; loop = 1",
        "loop = 1",
        "v_5 <- m_0 = 1, v_3",
        "ret = v_5",
    ]


def test_memory_hand_derived():
    assert lines_of("memory.ll") == [
        "v_0 = gep a_0 0, 1",
        "a_2 -> dereference v_0",
        "v_1 = gep a_1 2",
        "v_2 <- dereference v_1",
        "v_3 = v_2 == 0",
        "v_4 = select v_3 a_2 v_2",
        "v_5 <- dereference v_0",
        "v_6 = v_4 + v_5",
        "ret = v_6",
    ]


def test_escape_hides_later_loads():
    assert lines_of("escape.ll") == [
        "v_0 = reference m_0",
        "a_0 -> m_0",
        "v_1 <- m_0 = a_0",
        "call @sink",
        "v_2 <- m_0",
        "v_3 = v_1 + v_2",
        "ret = v_3",
    ]


def test_floats_and_casts():
    got = lines_of("floats.ll")
    assert got[2] == "v_2 = v_1 * 0.5"
    assert got[3] == "v_3 = fneg v_2"
    assert got[4] == "v_4 = v_3 < 1.5"
    assert got[0] == "v_0 = sitofp a_1"
    assert got[9] == "v_9 = v_8 << 2"


def test_nested_phi_and_depth():
    got = lines_of("nested_loop.ll")
    assert got[5] == "v_3 = v_1, v_5; loop = 2"
    assert got[11] == "v_8 = v_5; loop = 1"
    assert got[15] == "ret = v_8"


def test_calls_switchable():
    on = lines_of("switch_call.ll")
    off = lines_of("switch_call.ll", calls=False)
    assert on[0] == "v_0 = call @helper" and on[4] == "call @llvm.trap"
    assert off[0] == "" and off[4] == ""
    assert on[7] == off[7] == "v_1 = v_0, 10, 20"


def test_render_env_line():
    arith = EnvConstraint("Arith", ("v_1", "a_0", "a_0"), "v_1 = a_0 * a_0")
    depth = EnvConstraint("LoopDepth", ("1",), "loop = 1")
    assert render_env_line([arith, depth]) == "v_1 = a_0 * a_0; loop = 1"
    assert render_env_line([depth, arith]) == "v_1 = a_0 * a_0; loop = 1"
    assert render_env_line([]) == ""


def test_phi_two_incomings():
    assert lines_of("branch.ll")[8] == "v_5 = v_3, v_4"


@pytest.mark.parametrize("text, expected", [
    ("7", "7"), ("-3", "-3"), ("5.000000e-01", "0.5"), ("0x3FF8000000000000", "1.5"),
    ("1.000000e+00", "1.0"), ("true", "true"), ("0x7FF0000000000000", "inf"),
])
def test_constant_rendering(text, expected):
    assert render_constant(text) == expected


def test_straight_line_and_no_store():
    fn = parse_function("""
define i32 @f() {
  %p = alloca i32
  %q = alloca i32
  store i32 1, i32* %p
  %x = load i32, i32* %p
  %y = load i32, i32* %q
  ret i32 %x
}
""")
    rs = reaching_stores(fn, build_cfg(fn))
    assert [op.name for _, op in rs.values[3]] == ["1"]
    assert rs.values[4] == ()
    cfg, _, loops = analyze(fn)
    assert env_lines(fn, cfg, loops)[4] == "v_3 <- m_1"


def _check_against_oracle(fn):
    cfg = build_cfg(fn)
    got = reaching_stores(fn, cfg).values
    want = brute_reaching(fn, cfg)
    assert set(got) == set(want)
    for load, facts in got.items():
        if want[load] is None:
            assert facts is None
        else:
            # the rendering collapses equal values; compare on store indices
            # via the value each store writes
            stores = {i.index: i for i in fn.instructions}
            want_vals = {stores[s].operands[0].name for s in want[load]}
            assert facts is not None
            assert {op.name for _, op in facts} == want_vals


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_reaching_stores_fixture_oracle(name):
    for fn in parse_file(FIXTURES / name).functions:
        if len(fn.blocks) <= 8:
            _check_against_oracle(fn)


@settings(max_examples=300, deadline=None)
@given(random_function())
def test_reaching_stores_random_oracle(text):
    res = parse_module(text, strict=True)
    assert not res.errors, res.errors
    _check_against_oracle(res.functions[0])


def _lhs(c):
    if c.kind in ("Arith", "Reference", "Gep", "Phi", "Select", "Load", "Call") and c.operands:
        if c.kind == "Call" and len(c.operands) == 1:
            return None
        return c.operands[0]
    return None


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_result_defined_exactly_once(name):
    for fn in parse_file(FIXTURES / name).functions:
        cfg, _, loops = analyze(fn)
        cons = extract_constraints(fn, cfg, loops)
        for inst, cs in zip(fn.instructions, cons):
            if inst.result is None:
                continue
            everywhere = [c for row in cons for c in row if _lhs(c) == inst.result]
            assert len(everywhere) == 1, (inst, everywhere)
            assert everywhere[0] in cs


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_deterministic_and_loopdepth_last(name):
    a = lines_of(name)
    assert a == lines_of(name)
    for line in a:
        parts = line.split("; ")
        assert all(not p.startswith("loop = ") for p in parts[:-1])


def test_env_file_format():
    text = format_env_file(lines_of("add_ret.ll"))
    assert text == "0\tv_0 = a_0 + a_1\n1\tv_1 = v_0 + 3\n2\tret = v_1\n"
