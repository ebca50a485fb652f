import shutil
import subprocess

import pytest
from hypothesis import given, settings

from irsem.parser import (
    IrParseError, format_function, format_module, normalize_values, parse_file,
    parse_function, parse_module,
)

from oracles import FIXTURES, random_function

ALL_FIXTURES = sorted(p.name for p in FIXTURES.glob("*.ll"))
CORPUS = sorted((FIXTURES.parent / "data" / "toy").glob("*.ll"))


def _verify_external(path) -> bool | None:
    opt = shutil.which("opt")
    if opt:
        cmd = [opt, "-verify", "-disable-output", str(path)]
    elif shutil.which("clang"):
        cmd = ["clang", "-Wno-override-module", "-x", "ir", "-c", "-o", "/dev/null", str(path)]
    else:
        return None
    return subprocess.run(cmd, capture_output=True).returncode == 0


def test_empty_module():
    res = parse_module("")
    assert res.functions == [] and res.diagnostics == []


def test_add_ret_fixture():
    res = parse_file(FIXTURES / "add_ret.ll", strict=True)
    assert res.ok and len(res.functions) == 1
    fn = res.functions[0]
    assert len(fn.blocks) == 1
    assert [i.index for i in fn.instructions] == [0, 1, 2]
    assert [a.name for a in fn.args] == ["a_0", "a_1"]
    ok = _verify_external(FIXTURES / "add_ret.ll")
    if ok is None:
        pytest.skip("no external IR verifier")
    assert ok


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_fixtures_verify_externally(name):
    ok = _verify_external(FIXTURES / name)
    if ok is None:
        pytest.skip("no external IR verifier")
    assert ok


def test_allocas_then_add_naming():
    fn = parse_file(FIXTURES / "allocas.ll").functions[0]
    defs = {i.result: i.opcode for i in fn.instructions if i.result}
    assert defs["v_0"] == defs["v_1"] == "alloca"
    assert defs["v_2"] == "add"
    assert fn.slots == {"v_0": "m_0", "v_1": "m_1"}
    assert fn.value_table["i"] == "v_0" and fn.value_table["acc"] == "v_1"


def test_no_values_only_args():
    fn = parse_function("define void @f(i32 %x) {\n  ret void\n}\n")
    ren = normalize_values(fn)
    assert ren.values == {"x": "a_0"} and ren.slots == {}


def test_numbered_names_and_implicit_blocks():
    fn = parse_function("""
define i32 @g(i32 %0, i32) {
  %3 = add i32 %0, %1
  br label %4

4:
  ret i32 %3
}
""")
    assert [a.name for a in fn.args] == ["a_0", "a_1"]
    assert [b.label for b in fn.blocks] == ["2", "4"]
    assert fn.instructions[0].result == "v_0"


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_renaming_is_bijection(name):
    for fn in parse_file(FIXTURES / name).functions:
        producers = [i for i in fn.instructions if i.result is not None]
        ids = [i.result for i in producers]
        assert ids == [f"v_{k}" for k in range(len(producers))]
        inv = {}
        for raw, norm in fn.value_table.items():
            assert norm not in inv
            inv[norm] = raw
        assert set(ids) <= set(inv)
        allocas = [i.result for i in fn.instructions if i.opcode == "alloca"]
        assert [fn.slots[v] for v in allocas] == [f"m_{k}" for k in range(len(allocas))]


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_normalization_deterministic(name):
    text = (FIXTURES / name).read_text()
    a, b = parse_module(text), parse_module(text)
    for fa, fb in zip(a.functions, b.functions):
        assert fa == fb
        assert fa.value_table == fb.value_table
        assert normalize_values(fa) == normalize_values(fb)
        assert normalize_values(fa).values == fa.value_table


def _round_trip(text):
    first = parse_module(text)
    once = format_module(first.functions)
    second = parse_module(once)
    assert not second.errors, second.errors
    twice = format_module(second.functions)
    third = parse_module(twice)
    return once, twice, second.functions, third.functions


@pytest.mark.parametrize("path", [FIXTURES / n for n in ALL_FIXTURES] + CORPUS,
                         ids=lambda p: p.name)
def test_round_trip_fixed_point(path):
    once, twice, second, third = _round_trip(path.read_text())
    assert once == twice
    assert second == third


@settings(max_examples=100, deadline=None)
@given(random_function())
def test_round_trip_random(text):
    once, twice, second, third = _round_trip(text)
    assert once == twice and second == third


@pytest.mark.parametrize("path", [FIXTURES / n for n in ALL_FIXTURES] + CORPUS,
                         ids=lambda p: p.name)
def test_use_def_sanity(path):
    for fn in parse_file(path).functions:
        defined = {i.result for i in fn.instructions if i.result}
        args = {a.name for a in fn.args}
        for inst in fn.instructions:
            for op in inst.operands:
                if op.kind == "value":
                    assert op.name in defined
                elif op.kind == "arg":
                    assert op.name in args


def test_skipped_constructs_warn():
    res = parse_module("""
declare i32 @x(i32)
attributes #0 = { nounwind }
module asm "nop"
!0 = !{}
""")
    assert res.functions == []
    assert len(res.diagnostics) == 4
    assert all(d.severity == "warning" for d in res.diagnostics)


UNSUPPORTED = """
define void @u(i32* %p) {
entry:
  %old = atomicrmw add i32* %p, i32 1 seq_cst
  ret void
}
"""


def test_unknown_opcode_lenient_and_strict():
    fn = parse_module(UNSUPPORTED).functions[0]
    assert fn.instructions[0].opcode == "unknown"
    assert fn.instructions[0].mnemonic == "atomicrmw"
    res = parse_module(UNSUPPORTED, strict=True)
    assert res.functions == []
    assert res.errors and res.errors[0].line == 4


@pytest.mark.parametrize("text, line, fragment", [
    ("define i32 @f(i32 %x) {\n  %a = add i32 %x, 1\n  %a = add i32 %x, 2\n  ret i32 %a\n}\n",
     3, "duplicate SSA"),
    ("define void @f() {\nentry:\n  br label %nowhere\n}\n", 3, "undefined label"),
    ("define void @f() {\nentry:\n  %a = add i32 1, 2\n}\n", 3, "terminator"),
    ("define void @f() {\nentry:\n  ret void\n", 1, "unterminated"),
    ("define i32 @f() {\nentry:\n  ret i32 %ghost\n}\n", 3, "undefined value"),
    ("define i32 @f(i32 %x, i32 %x) {\n  ret i32 %x\n}\n", 1, "duplicate argument"),
    ("define void @f() {\nentry:\n  store i32 1, i32* null, align 4 (\n  ret void\n}\n", 3, "unbalanced"),
])
def test_malformed_diagnostics(text, line, fragment):
    res = parse_module(text)
    assert res.functions == []
    assert res.errors
    assert res.errors[0].line == line
    assert fragment in res.errors[0].message


def test_parse_function_raises():
    with pytest.raises(IrParseError):
        parse_function("define void @f() {\nentry:\n  br label %x\n}\n")


def test_format_uses_normalized_names():
    fn = parse_file(FIXTURES / "diamond.ll").functions[0]
    text = format_function(fn)
    assert "%v_4 = load i32, i32* %v_0" in text
    assert "%a_0" in text and "%x" not in text
