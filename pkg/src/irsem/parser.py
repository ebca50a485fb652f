"""Parser for a subset of textual LLVM IR (``.ll``).

Covers what clang emits for plain C/C++ at any -O level, minus vector and
exception-handling instructions, which become opcode ``unknown`` unless
``strict`` is set. Value names are normalized on the way in (see
:func:`normalize_values`).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .ir import (
    BINARY_OPS, CAST_OPS, SUPPORTED_OPS, UNKNOWN_TERMINATORS,
    Arg, BasicBlock, Instruction, IrFunction, Operand,
)


@dataclass(frozen=True)
class Diagnostic:
    line: int
    column: int
    message: str
    severity: str = "error"  # "error" | "warning"

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.severity}: {self.message}"


@dataclass
class ParseResult:
    functions: list[IrFunction] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == "error"]

    @property
    def ok(self) -> bool:
        return not self.errors


class IrParseError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


class _Error(Exception):
    def __init__(self, message: str, column: int = 0):
        super().__init__(message)
        self.message = message
        self.column = column


# ---------------------------------------------------------------- lexing

_IDENT = r'(?:"(?:[^"\\]|\\.)*"|[-a-zA-Z$._][-a-zA-Z$._0-9]*|\d+)'
_TOKEN_RE = re.compile(r'''
    (?P<ws>\s+)
  | (?P<comment>;[^\n]*)
  | (?P<str>c?"(?:[^"\\]|\\.)*")
  | (?P<local>%IDENT)
  | (?P<global>@IDENT)
  | (?P<meta>!(?:[-a-zA-Z$._][-a-zA-Z$._0-9]*|\d+)?)
  | (?P<attrgrp>\#\d+)
  | (?P<num>[-+]?(?:0x[KLMHR]?[0-9A-Fa-f]+|\d+\.\d*(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?))
  | (?P<ellipsis>\.\.\.)
  | (?P<word>[A-Za-z_$.][-A-Za-z_$.0-9]*)
  | (?P<punct>[=,()\[\]{}<>*:|])
'''.replace("IDENT", _IDENT), re.VERBOSE)


@dataclass(frozen=True)
class Tok:
    kind: str
    text: str
    col: int


def tokenize(text: str) -> list[Tok]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise _Error(f"unexpected character {text[pos]!r}", pos + 1)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            out.append(Tok(kind, m.group(), pos + 1))
        pos = m.end()
    return out


def join_tokens(toks: list[Tok]) -> str:
    """Canonical spacing for type and constant-expression text."""
    out = ""
    prev = ""
    for t in toks:
        s = t.text
        if out and prev not in "([{<" and s not in (")", "]", "}", ">", ",", "*"):
            out += " "
        out += s
        prev = s
    return out


_PRIMITIVE = re.compile(
    r"^(i\d+|void|half|bfloat|float|double|x86_fp80|fp128|ppc_fp128|label|"
    r"metadata|ptr|x86_mmx|x86_amx|token|opaque)$")
_CONST_WORDS = frozenset({"true", "false", "null", "undef", "poison",
                          "zeroinitializer", "none"})
_CMP_PREDS = frozenset({
    "eq", "ne", "ugt", "uge", "ult", "ule", "sgt", "sge", "slt", "sle",
    "false", "oeq", "ogt", "oge", "olt", "ole", "one", "ord", "ueq", "une",
    "uno", "true",
})
_INST_FLAGS = frozenset({
    "nuw", "nsw", "exact", "fast", "nnan", "ninf", "nsz", "arcp", "contract",
    "afn", "reassoc", "inbounds", "volatile", "atomic", "inalloca", "disjoint",
    "nneg",
})
_CALL_PREFIX = frozenset({"tail", "musttail", "notail"})
_CONSTEXPR_WORDS = (SUPPORTED_OPS - {"alloca", "load", "store", "phi", "call", "br", "switch",
                                     "ret", "unreachable"}) | {
    "blockaddress", "dso_local_equivalent", "no_cfi", "extractvalue", "insertvalue",
    "extractelement", "insertelement", "shufflevector"}


class _Cursor:
    def __init__(self, toks: list[Tok]):
        self.toks = toks
        self.i = 0

    def peek(self, k: int = 0) -> Tok | None:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def at(self, text: str, k: int = 0) -> bool:
        t = self.peek(k)
        return t is not None and t.text == text

    def next(self) -> Tok:
        t = self.peek()
        if t is None:
            col = self.toks[-1].col if self.toks else 0
            raise _Error("unexpected end of instruction", col)
        self.i += 1
        return t

    def expect(self, text: str) -> Tok:
        t = self.next()
        if t.text != text:
            raise _Error(f"expected {text!r}, found {t.text!r}", t.col)
        return t

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.i += 1
            return True
        return False

    def done(self) -> bool:
        return self.i >= len(self.toks)

    def balanced(self) -> list[Tok]:
        """Consume one bracketed group starting at the current token."""
        pairs = {"(": ")", "[": "]", "{": "}", "<": ">"}
        start = self.next()
        close = pairs[start.text]
        out = [start]
        depth = 1
        while depth:
            t = self.next()
            out.append(t)
            if t.text == start.text:
                depth += 1
            elif t.text == close:
                depth -= 1
        return out


def _is_type_start(c: _Cursor) -> bool:
    t = c.peek()
    if t is None:
        return False
    if t.kind == "word":
        return bool(_PRIMITIVE.match(t.text))
    return t.kind == "local" or t.text in ("[", "{", "<")


def _parse_type(c: _Cursor) -> str:
    toks = _type_tokens(c)
    return join_tokens(toks)


def _type_tokens(c: _Cursor) -> list[Tok]:
    t = c.peek()
    if t is None:
        raise _Error("expected type")
    if t.text in ("[", "{", "<"):
        toks = c.balanced()  # also covers packed structs <{...}>
    elif t.kind == "local" or (t.kind == "word" and _PRIMITIVE.match(t.text)):
        toks = [c.next()]
    else:
        raise _Error(f"expected type, found {t.text!r}", t.col)
    while True:
        if c.at("*"):
            toks.append(c.next())
        elif c.at("addrspace") and c.at("(", 1):
            toks.append(c.next())
            toks.extend(c.balanced())
        elif c.at("("):
            toks.extend(c.balanced())  # function type
        else:
            break
    return toks


def _skip_attrs(c: _Cursor) -> list[str]:
    """Skip parameter/return attributes up to the next type or value."""
    skipped = []
    while True:
        t = c.peek()
        if t is None:
            return skipped
        if t.kind == "attrgrp":
            c.next()
            continue
        if (t.kind != "word" or _PRIMITIVE.match(t.text) or t.text in _CONST_WORDS
                or t.text in _CONSTEXPR_WORDS or t.text == "asm"):
            return skipped
        c.next()
        skipped.append(t.text)
        if c.at("("):
            c.balanced()
        elif t.text in ("align", "cc", "addrspace") and c.peek() and c.peek().kind == "num":
            c.next()


def _parse_value(c: _Cursor, ty: str = "") -> Operand:
    t = c.peek()
    if t is None:
        raise _Error("expected value")
    if t.kind == "local":
        c.next()
        return Operand("local", t.text[1:], ty)
    if t.kind == "global":
        c.next()
        return Operand("global", t.text[1:], ty)
    if t.kind == "num":
        c.next()
        return Operand("const", t.text, ty)
    if t.kind == "str":
        c.next()
        return Operand("const", t.text, ty)
    if ty == "metadata" and _is_type_start(c):
        inner = _typed_value(c)
        return Operand("meta", f"{inner.ty} {inner.name}", ty)
    if t.kind == "meta":
        toks = [c.next()]
        if c.at("{") or c.at("("):
            toks.extend(c.balanced())
        return Operand("meta", join_tokens(toks), ty)
    if t.text in ("[", "{", "<"):
        return Operand("expr", join_tokens(c.balanced()), ty)
    if t.kind == "word":
        if t.text in _CONST_WORDS:
            c.next()
            return Operand("const", t.text, ty)
        # constant expression: keyword [flags] ( ... )
        toks = [c.next()]
        while c.peek() is not None and c.peek().kind == "word" and not c.at("("):
            toks.append(c.next())
        if c.at("("):
            toks.extend(c.balanced())
            return Operand("expr", join_tokens(toks), ty)
        raise _Error(f"unexpected {t.text!r}", t.col)
    raise _Error(f"unexpected {t.text!r}", t.col)


def _typed_value(c: _Cursor) -> Operand:
    ty = _parse_type(c)
    _skip_attrs(c)
    return _parse_value(c, ty)


def _label(c: _Cursor) -> Operand:
    c.expect("label")
    t = c.next()
    if t.kind != "local":
        raise _Error(f"expected label, found {t.text!r}", t.col)
    return Operand("label", _unquote(t.text[1:]), "label")


def _unquote(name: str) -> str:
    if len(name) >= 2 and name[0] == '"' and name[-1] == '"':
        return name[1:-1]
    return name


# ---------------------------------------------------------------- instructions

@dataclass
class _RawInst:
    opcode: str
    operands: list[Operand]
    result: str | None
    ty: str = ""
    pred: str = ""
    flags: tuple[str, ...] = ()
    mnemonic: str = ""
    raw: str = ""
    line: int = 0


def _flags(c: _Cursor) -> tuple[str, ...]:
    out = []
    while c.peek() is not None and c.peek().text in _INST_FLAGS:
        out.append(c.next().text)
    return tuple(out)


def _parse_instruction(c: _Cursor, opcode: str) -> _RawInst:
    inst = _RawInst(opcode, [], None, mnemonic=opcode)
    if opcode in BINARY_OPS:
        inst.flags = _flags(c)
        a = _typed_value(c)
        c.expect(",")
        b = _parse_value(c, a.ty)
        inst.operands = [a, b]
        inst.ty = a.ty
    elif opcode == "fneg":
        inst.flags = _flags(c)
        a = _typed_value(c)
        inst.operands = [a]
        inst.ty = a.ty
    elif opcode in CAST_OPS:
        a = _typed_value(c)
        c.expect("to")
        inst.operands = [a]
        inst.ty = _parse_type(c)
    elif opcode in ("icmp", "fcmp"):
        inst.flags = _flags(c)
        p = c.next()
        if p.text not in _CMP_PREDS:
            raise _Error(f"bad comparison predicate {p.text!r}", p.col)
        inst.pred = p.text
        a = _typed_value(c)
        c.expect(",")
        inst.operands = [a, _parse_value(c, a.ty)]
        inst.ty = "i1"
    elif opcode == "alloca":
        inst.flags = _flags(c)
        inst.ty = _parse_type(c)
        if c.accept(","):
            if not (c.at("align") or c.at("addrspace")):
                inst.operands = [_typed_value(c)]
    elif opcode == "load":
        inst.flags = _flags(c)
        inst.ty = _parse_type(c)
        c.expect(",")
        inst.operands = [_typed_value(c)]
    elif opcode == "store":
        inst.flags = _flags(c)
        v = _typed_value(c)
        c.expect(",")
        inst.operands = [v, _typed_value(c)]
    elif opcode == "getelementptr":
        inst.flags = _flags(c)
        inst.ty = _parse_type(c)
        c.expect(",")
        ops = [_typed_value(c)]
        while c.accept(","):
            if c.peek() is not None and c.peek().kind == "meta":
                break
            c.accept("inrange")
            ops.append(_typed_value(c))
        inst.operands = ops
    elif opcode == "phi":
        inst.flags = _flags(c)
        inst.ty = _parse_type(c)
        ops = []
        while True:
            c.expect("[")
            ops.append(_parse_value(c, inst.ty))
            c.expect(",")
            t = c.next()
            if t.kind != "local":
                raise _Error("expected incoming block label", t.col)
            ops.append(Operand("label", _unquote(t.text[1:]), "label"))
            c.expect("]")
            if not (c.at(",") and c.at("[", 1)):
                break
            c.next()
        inst.operands = ops
    elif opcode == "select":
        inst.flags = _flags(c)
        cond = _typed_value(c)
        c.expect(",")
        a = _typed_value(c)
        c.expect(",")
        b = _typed_value(c)
        inst.operands = [cond, a, b]
        inst.ty = a.ty
    elif opcode == "call":
        inst.flags = _flags(c)
        _skip_attrs(c)
        ret = _type_tokens(c)
        inst.ty = join_tokens(ret)
        _skip_attrs(c)
        if c.at("asm"):
            raise _Unsupported("inline asm")
        callee = _parse_value(c)
        args = [callee]
        c.expect("(")
        if not c.at(")"):
            while True:
                if c.at("..."):
                    c.next()
                else:
                    ty = _parse_type(c)
                    _skip_attrs(c)
                    args.append(_parse_value(c, ty))
                if not c.accept(","):
                    break
        c.expect(")")
        inst.operands = args
    elif opcode == "br":
        if c.at("label"):
            inst.operands = [_label(c)]
        else:
            cond = _typed_value(c)
            c.expect(",")
            t = _label(c)
            c.expect(",")
            inst.operands = [cond, t, _label(c)]
    elif opcode == "switch":
        v = _typed_value(c)
        c.expect(",")
        ops = [v, _label(c)]
        c.expect("[")
        while not c.at("]"):
            ops.append(_typed_value(c))
            c.expect(",")
            ops.append(_label(c))
        c.expect("]")
        inst.operands = ops
    elif opcode == "ret":
        if c.accept("void"):
            inst.ty = "void"
        else:
            v = _typed_value(c)
            inst.operands = [v]
            inst.ty = v.ty
    elif opcode == "unreachable":
        pass
    else:
        raise AssertionError(opcode)
    # trailing ", align 4", ", !dbg !7" and friends are dropped
    return inst


class _Unsupported(Exception):
    pass


def _unknown(opcode: str, toks: list[Tok], result: str | None) -> _RawInst:
    ops = [Operand("expr", join_tokens(toks))] if toks else []
    if opcode in UNKNOWN_TERMINATORS:
        ops += [Operand("label", _unquote(t.text[1:]), "label")
                for k, t in enumerate(toks) if t.kind == "local" and k and toks[k - 1].text == "label"]
    return _RawInst("unknown", ops, result, mnemonic=opcode)


def parse_instruction_text(text: str, strict: bool = False) -> _RawInst:
    c = _Cursor(tokenize(text))
    result = None
    if c.peek() is not None and c.peek().kind == "local" and c.at("=", 1):
        result = _unquote(c.next().text[1:])
        c.next()
    first = c.next()
    opcode = first.text
    if opcode in _CALL_PREFIX:
        opcode = c.next().text
    if opcode not in SUPPORTED_OPS:
        if strict:
            raise _Error(f"unsupported instruction {opcode!r}", first.col)
        return _unknown(opcode, c.toks[c.i:], result)
    try:
        inst = _parse_instruction(c, opcode)
    except _Unsupported:
        if strict:
            raise _Error(f"unsupported construct in {opcode!r}", first.col)
        return _unknown(opcode, c.toks[c.i:], result)
    inst.result = result
    return inst


# ---------------------------------------------------------------- module

_LABEL_RE = re.compile(r'^\s*("(?:[^"\\]|\\.)*"|[-a-zA-Z$._0-9]+):')
_SKIP_WARN = (
    ("declare", "function declaration"),
    ("attributes", "attribute group"),
    ("module asm", "module-level asm"),
    ("!", "metadata"),
)


def _bracket_depth(text: str) -> int:
    depth = 0
    for t in tokenize(text):
        if t.text in "([{":
            depth += 1
        elif t.text in ")]}":
            depth -= 1
    return depth


def parse_module(text: str, strict: bool = False) -> ParseResult:
    """Parse every ``define`` in ``text``.

    Functions with errors are dropped and reported; the rest are returned
    normalized.
    """
    result = ParseResult()
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        stripped = line.strip()
        lineno = i + 1
        if stripped.startswith("define"):
            header = stripped
            # header may span lines until "{"
            while "{" not in _strip_comment(header) and i + 1 < len(lines):
                i += 1
                header += " " + lines[i].strip()
            body: list[tuple[int, str]] = []
            i += 1
            closed = False
            while i < len(lines):
                if lines[i].strip() == "}":
                    closed = True
                    break
                body.append((i + 1, lines[i]))
                i += 1
            i += 1
            if not closed:
                result.diagnostics.append(Diagnostic(lineno, 1, "unterminated function body"))
                break
            try:
                fn = _parse_function(header, lineno, body, strict, result.diagnostics)
            except _Error as e:
                result.diagnostics.append(Diagnostic(getattr(e, "line", lineno), e.column, e.message))
                continue
            result.functions.append(fn)
            continue
        for prefix, what in _SKIP_WARN:
            if stripped.startswith(prefix):
                result.diagnostics.append(Diagnostic(lineno, 1, f"skipped {what}", "warning"))
                break
        i += 1
    return result


def _strip_comment(text: str) -> str:
    return re.sub(r';[^"]*$', "", text)


class _LineError(_Error):
    def __init__(self, message: str, line: int, column: int = 0):
        super().__init__(message, column)
        self.line = line


def _parse_header(header: str, lineno: int) -> tuple[str, str, list[tuple[str, str | None]]]:
    try:
        c = _Cursor(tokenize(header))
    except _Error as e:
        raise _LineError(e.message, lineno, e.column)
    c.expect("define")
    try:
        _skip_attrs(c)
        ret = _parse_type(c)
        _skip_attrs(c)
        name = c.next()
        if name.kind != "global":
            raise _Error("expected function name", name.col)
        c.expect("(")
        args: list[tuple[str, str | None]] = []
        if not c.at(")"):
            while True:
                if c.accept("..."):
                    break
                ty = _parse_type(c)
                _skip_attrs(c)
                arg_name = None
                if c.peek() is not None and c.peek().kind == "local":
                    arg_name = _unquote(c.next().text[1:])
                args.append((ty, arg_name))
                if not c.accept(","):
                    break
        c.expect(")")
    except _Error as e:
        raise _LineError(e.message, lineno, e.column)
    return _unquote(name.text[1:]), ret, args


def _parse_function(header: str, lineno: int, body: list[tuple[int, str]], strict: bool,
                    diags: list[Diagnostic]) -> IrFunction:
    name, ret_ty, raw_args = _parse_header(header, lineno)
    counter = 0
    args: list[tuple[str, str]] = []
    for ty, arg_name in raw_args:
        if arg_name is None:
            arg_name = str(counter)
        if arg_name.isdigit():
            counter = int(arg_name) + 1
        args.append((arg_name, ty))

    # group continuation lines (multi-line switch)
    stmts: list[tuple[int, str]] = []
    pending = ""
    pending_line = 0
    for ln, text in body:
        code = text
        if not code.strip() or code.strip().startswith(";"):
            continue
        if pending:
            pending += " " + code.strip()
        else:
            pending, pending_line = code.strip(), ln
        try:
            depth = _bracket_depth(pending)
        except _Error as e:
            raise _LineError(e.message, ln, e.column)
        if depth <= 0:
            stmts.append((pending_line, pending))
            pending = ""
    if pending:
        raise _LineError("unbalanced brackets", pending_line)

    blocks: list[tuple[str, list[_RawInst], int]] = []
    current: list[_RawInst] | None = None
    for ln, text in stmts:
        m = _LABEL_RE.match(text)
        if m and not text.lstrip().startswith("%"):
            label = _unquote(m.group(1))
            if current is not None and (not current or not _is_term(current[-1])):
                raise _LineError(f"block %{blocks[-1][0]} does not end with a terminator",
                                 current[-1].line if current else blocks[-1][2])
            if label.isdigit():
                counter = int(label) + 1
            current = []
            blocks.append((label, current, ln))
            rest = text[m.end():].strip()
            if rest and not rest.startswith(";"):
                raise _LineError("unexpected text after label", ln)
            continue
        if current is None or (current and _is_term(current[-1])):
            # implicit (unnamed) block
            label = str(counter)
            counter += 1
            current = []
            blocks.append((label, current, ln))
        try:
            inst = parse_instruction_text(text, strict)
        except _Error as e:
            raise _LineError(e.message, ln, e.column)
        inst.raw = text
        inst.line = ln
        if inst.result is not None and inst.result.isdigit():
            counter = int(inst.result) + 1
        current.append(inst)
    if not blocks:
        raise _LineError(f"function @{name} has no body", lineno)
    last = blocks[-1][1]
    if not last or not _is_term(last[-1]):
        raise _LineError(f"block %{blocks[-1][0]} does not end with a terminator",
                         last[-1].line if last else blocks[-1][2])
    return _build(name, ret_ty, args, blocks, lineno)


def _is_term(inst: _RawInst) -> bool:
    if inst.opcode == "unknown":
        return inst.mnemonic in UNKNOWN_TERMINATORS
    return inst.opcode in ("br", "switch", "ret", "unreachable")


def _renaming(arg_names: list[str], results: list[tuple[str | None, str]]) -> dict[str, str]:
    # alloca results are additionally recorded under "slot:v_i" -> m_j
    table: dict[str, str] = {}
    for i, a in enumerate(arg_names):
        table[a] = f"a_{i}"
    v = m = 0
    for res, opcode in results:
        if res is None:
            continue
        vid = f"v_{v}"
        table[res] = vid
        v += 1
        if opcode == "alloca":
            table["slot:" + vid] = f"m_{m}"
            m += 1
    return table


def _build(name: str, ret_ty: str, args: list[tuple[str, str]],
           blocks: list[tuple[str, list[_RawInst], int]], lineno: int = 0) -> IrFunction:
    seen: dict[str, int] = {}
    for a, _ in args:
        if a in seen:
            raise _LineError(f"duplicate argument name %{a}", lineno)
        seen[a] = 0
    labels: dict[str, int] = {}
    for label, insts, ln in blocks:
        if label in labels:
            raise _LineError(f"duplicate block label %{label}", ln)
        labels[label] = ln
    flat = [inst for _, insts, _ in blocks for inst in insts]
    for inst in flat:
        if inst.result is not None:
            if inst.result in seen:
                raise _LineError(f"duplicate SSA name %{inst.result}", inst.line)
            seen[inst.result] = inst.line
        if inst.result is not None and inst.opcode in ("store", "br", "switch", "ret", "unreachable"):
            raise _LineError(f"{inst.opcode} does not produce a value", inst.line)
        if inst.result is None and inst.opcode not in ("store", "br", "switch", "ret", "unreachable",
                                                       "call", "unknown"):
            raise _LineError(f"{inst.opcode} result must be named", inst.line)
        for op in inst.operands:
            if op.kind == "label" and op.name not in labels:
                raise _LineError(f"branch to undefined label %{op.name}", inst.line)

    table = _renaming([a for a, _ in args], [(i.result, i.opcode) for i in flat])
    arg_set = {a for a, _ in args}

    def resolve(op: Operand, line: int) -> Operand:
        if op.kind != "local":
            return op
        raw = _unquote(op.name)
        if raw not in table:
            raise _LineError(f"use of undefined value %{raw}", line)
        return Operand("arg" if raw in arg_set else "value", table[raw], op.ty)

    out_blocks = []
    index = 0
    for label, insts, _ in blocks:
        built = []
        for r in insts:
            ops = tuple(resolve(op, r.line) for op in r.operands)
            built.append(Instruction(
                index=index, opcode=r.opcode, operands=ops,
                result=table[r.result] if r.result is not None else None,
                ty=r.ty, pred=r.pred, flags=r.flags, mnemonic=r.mnemonic,
                raw=r.raw, line=r.line))
            index += 1
        out_blocks.append(BasicBlock(label, tuple(built)))

    slots = {k[5:]: v for k, v in table.items() if k.startswith("slot:")}
    value_table = {k: v for k, v in table.items() if not k.startswith("slot:")}
    fn_args = tuple(Arg(f"a_{i}", ty, raw=a) for i, (a, ty) in enumerate(args))
    return IrFunction(name, fn_args, tuple(out_blocks), ret_ty, value_table, slots)


@dataclass(frozen=True)
class Renaming:
    values: dict[str, str]  # textual name -> a_i / v_i
    slots: dict[str, str]   # v_i -> m_j for alloca results


def normalize_values(fn: IrFunction) -> Renaming:
    """Recompute the renaming of ``fn`` from its textual names.

    Arguments become ``a_i`` in order, instruction results ``v_i`` in
    definition order, and alloca results are also stack slots ``m_j``.
    """
    textual = {v: k for k, v in fn.value_table.items()}
    results = [(textual.get(i.result, i.result) if i.result else None, i.opcode)
               for i in fn.instructions]
    table = _renaming([a.raw or a.name for a in fn.args], results)
    return Renaming({k: v for k, v in table.items() if not k.startswith("slot:")},
                    {k[5:]: v for k, v in table.items() if k.startswith("slot:")})


def parse_function(text: str, strict: bool = False) -> IrFunction:
    """Parse a module holding exactly one function; raise on any error."""
    res = parse_module(text, strict)
    if res.errors:
        raise IrParseError(res.errors)
    if len(res.functions) != 1:
        raise IrParseError([Diagnostic(0, 0, f"expected 1 function, found {len(res.functions)}")])
    return res.functions[0]


def parse_file(path, strict: bool = False) -> ParseResult:
    with open(path, encoding="utf-8") as f:
        return parse_module(f.read(), strict)


# ---------------------------------------------------------------- printing

def _label_name(label: str) -> str:
    return f"bb{label}" if label.isdigit() else label


def format_operand(op: Operand, typed: bool = True) -> str:
    if op.kind in ("value", "arg"):
        text = "%" + op.name
    elif op.kind == "global":
        text = "@" + op.name
    elif op.kind == "label":
        text = "%" + _label_name(op.name)
    else:
        text = op.name
    if typed and op.ty:
        return f"{op.ty} {text}"
    return text


def format_instruction(inst: Instruction) -> str:
    """LLVM-style text for one instruction using normalized names."""
    ops = inst.operands
    f = format_operand
    head = f"%{inst.result} = " if inst.result is not None else ""
    flags = "".join(fl + " " for fl in inst.flags)
    op = inst.opcode
    if op == "unknown":
        return head + inst.mnemonic + (" " + ops[0].name if ops and ops[0].kind == "expr" else "")
    if op in BINARY_OPS:
        body = f"{op} {flags}{f(ops[0])}, {f(ops[1], False)}"
    elif op == "fneg":
        body = f"fneg {flags}{f(ops[0])}"
    elif op in CAST_OPS:
        body = f"{op} {f(ops[0])} to {inst.ty}"
    elif op in ("icmp", "fcmp"):
        body = f"{op} {flags}{inst.pred} {f(ops[0])}, {f(ops[1], False)}"
    elif op == "alloca":
        body = f"alloca {flags}{inst.ty}" + (f", {f(ops[0])}" if ops else "")
    elif op == "load":
        body = f"load {flags}{inst.ty}, {f(ops[0])}"
    elif op == "store":
        body = f"store {flags}{f(ops[0])}, {f(ops[1])}"
    elif op == "getelementptr":
        body = f"getelementptr {flags}{inst.ty}, " + ", ".join(f(o) for o in ops)
    elif op == "phi":
        pairs = [f"[ {f(ops[k], False)}, {f(ops[k + 1], False)} ]" for k in range(0, len(ops), 2)]
        body = f"phi {flags}{inst.ty} " + ", ".join(pairs)
    elif op == "select":
        body = f"select {flags}" + ", ".join(f(o) for o in ops)
    elif op == "call":
        args = ", ".join(f(o) for o in ops[1:])
        body = f"call {flags}{inst.ty} {f(ops[0], False)}({args})"
    elif op == "br":
        body = "br " + ", ".join(f(o) for o in ops)
    elif op == "switch":
        cases = "  ".join(f"{f(ops[k])}, {f(ops[k + 1])}" for k in range(2, len(ops), 2))
        body = f"switch {f(ops[0])}, {f(ops[1])} [ {cases} ]"
    elif op == "ret":
        body = "ret " + (f(ops[0]) if ops else "void")
    elif op == "unreachable":
        body = "unreachable"
    else:
        raise ValueError(op)
    return head + body


def format_function(fn: IrFunction) -> str:
    args = ", ".join(f"{a.ty} %{a.name}" for a in fn.args)
    lines = [f"define {fn.ret_ty} @{fn.name}({args}) {{"]
    for block in fn.blocks:
        lines.append(f"{_label_name(block.label)}:")
        for inst in block.instructions:
            lines.append("  " + format_instruction(inst))
    lines.append("}")
    return "\n".join(lines) + "\n"


def format_module(fns: list[IrFunction]) -> str:
    return "\n".join(format_function(fn) for fn in fns)


def with_names(fn: IrFunction, **changes) -> IrFunction:
    return replace(fn, **changes)
