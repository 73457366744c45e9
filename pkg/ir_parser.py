"""Parser for the textual SSA-IR subset consumed by the compiler

Only the fragment produced by the front end for MPC entry points is accepted:
integer arithmetic on i32 and <N x i32>, i1 comparisons, loads and stores
through parameter pointers, phi/br/ret control flow, and a handful of calls
(`mark_linear_layer`, `llvm.var.annotation`, vector reductions). Anything else
is reported as a diagnostic carrying its line and column.
"""
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import errors
from errors import Diagnostic, IrParseError

logger = logging.getLogger(__name__)


# ===== TYPES AND VALUES =====

class TypeKind(str, Enum):
    INT = "int"
    VECTOR = "vector"
    POINTER = "pointer"
    LABEL = "label"
    VOID = "void"


@dataclass(frozen=True)
class IrType:
    kind: TypeKind
    bits: int = 0
    lanes: int = 1

    @property
    def is_int(self) -> bool:
        return self.kind == TypeKind.INT

    @property
    def is_vector(self) -> bool:
        return self.kind == TypeKind.VECTOR

    @property
    def is_pointer(self) -> bool:
        return self.kind == TypeKind.POINTER

    @property
    def is_bit(self) -> bool:
        return self.kind == TypeKind.INT and self.bits == 1

    def __str__(self) -> str:
        if self.kind == TypeKind.INT:
            return f"i{self.bits}"
        if self.kind == TypeKind.VECTOR:
            return f"<{self.lanes} x i{self.bits}>"
        if self.kind == TypeKind.POINTER:
            return "ptr"
        return self.kind.value


I1 = IrType(TypeKind.INT, 1)
I32 = IrType(TypeKind.INT, 32)
PTR = IrType(TypeKind.POINTER)
VOID = IrType(TypeKind.VOID)
LABEL = IrType(TypeKind.LABEL)


def vector_of(lanes: int) -> IrType:
    return IrType(TypeKind.VECTOR, 32, lanes)


class ValueKind(str, Enum):
    LOCAL = "local"
    GLOBAL = "global"
    CONST_INT = "constant-int"
    CONST_VECTOR = "constant-vector"
    LABEL_REF = "label-ref"


@dataclass(frozen=True)
class IrValue:
    kind: ValueKind
    type: IrType
    name: Optional[str] = None
    values: Tuple[int, ...] = ()

    @property
    def is_const(self) -> bool:
        return self.kind in (ValueKind.CONST_INT, ValueKind.CONST_VECTOR)

    @property
    def const(self) -> int:
        return self.values[0]

    def text(self) -> str:
        """Render the value without its type"""
        if self.kind == ValueKind.LOCAL or self.kind == ValueKind.LABEL_REF:
            return f"%{self.name}"
        if self.kind == ValueKind.GLOBAL:
            return f"@{self.name}"
        if self.kind == ValueKind.CONST_VECTOR:
            inner = ", ".join(f"i{self.type.bits} {v}" for v in self.values)
            return f"<{inner}>"
        if self.type.is_pointer:
            return "null"
        if self.type.is_bit:
            return "true" if self.values[0] else "false"
        return str(self.values[0])

    def typed(self) -> str:
        return f"{self.type} {self.text()}"


def local(name: str, type_: IrType) -> IrValue:
    return IrValue(ValueKind.LOCAL, type_, name=name)


def label_ref(name: str) -> IrValue:
    return IrValue(ValueKind.LABEL_REF, LABEL, name=name)


def const_int(value: int, type_: IrType = I32) -> IrValue:
    return IrValue(ValueKind.CONST_INT, type_, values=(value,))


# ===== INSTRUCTIONS AND MODULES =====

ACCEPTED_OPCODES = (
    "add", "sub", "mul", "shl", "and", "or", "xor", "icmp", "select", "zext",
    "load", "store", "getelementptr", "br", "ret", "phi", "call",
)
BINARY_OPCODES = ("add", "sub", "mul", "shl", "and", "or", "xor")
TERMINATORS = ("br", "ret")
ICMP_PREDICATES = ("eq", "ne", "slt", "sgt", "sle", "sge")

LINEAR_LAYER_HOOK = "mark_linear_layer"
ANNOTATION_PREFIX = "llvm.var.annotation"
REDUCE_ADD_PREFIX = "llvm.vector.reduce.add."
REDUCE_MUL_PREFIX = "llvm.vector.reduce.mul."

_SKIPPED_FLAGS = {"nsw", "nuw", "exact", "inbounds", "disjoint", "nneg", "fast", "nnan", "ninf"}
_CALL_PREFIXES = {"tail", "musttail", "notail"}


@dataclass
class IrInstruction:
    opcode: str
    type: IrType
    operands: List[IrValue]
    result: Optional[str] = None
    predicate: Optional[str] = None
    callee: Optional[str] = None
    annotation: Optional[str] = None
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)

    @property
    def is_terminator(self) -> bool:
        return self.opcode in TERMINATORS

    def phi_pairs(self) -> List[Tuple[IrValue, str]]:
        """(value, predecessor label) pairs of a phi"""
        return [(self.operands[i], self.operands[i + 1].name) for i in range(0, len(self.operands), 2)]

    def branch_targets(self) -> List[str]:
        return [op.name for op in self.operands if op.kind == ValueKind.LABEL_REF]


@dataclass
class IrBlock:
    label: str
    instructions: List[IrInstruction] = field(default_factory=list)
    line: int = field(default=0, compare=False)

    @property
    def terminator(self) -> Optional[IrInstruction]:
        if self.instructions and self.instructions[-1].is_terminator:
            return self.instructions[-1]
        return None


@dataclass
class IrParam:
    name: str
    type: IrType
    annotation: Optional[str] = None


@dataclass
class IrFunction:
    name: str
    return_type: IrType
    params: List[IrParam] = field(default_factory=list)
    blocks: List[IrBlock] = field(default_factory=list)
    line: int = field(default=0, compare=False)

    def block(self, label: str) -> IrBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def param(self, name: str) -> Optional[IrParam]:
        for p in self.params:
            if p.name == name:
                return p
        return None


@dataclass
class IrModule:
    functions: List[IrFunction] = field(default_factory=list)
    globals: Dict[str, str] = field(default_factory=dict)

    def function(self, name: str) -> Optional[IrFunction]:
        for f in self.functions:
            if f.name == name:
                return f
        return None


# ===== TOKENIZER =====

_TOKEN_RE = re.compile(r'''
    (?P<ws>\s+)
  | (?P<local>%(?:[-a-zA-Z$._0-9]+|"[^"]*"))
  | (?P<global>@(?:[-a-zA-Z$._0-9]+|"[^"]*"))
  | (?P<meta>![-a-zA-Z$._0-9]*)
  | (?P<attr>\#[0-9]+)
  | (?P<cstr>c"(?:[^"\\]|\\.)*")
  | (?P<str>"(?:[^"\\]|\\.)*")
  | (?P<int>-?[0-9]+)
  | (?P<word>[a-zA-Z_.$][-a-zA-Z$._0-9]*)
  | (?P<punct>[,()\[\]<>={}*:])
''', re.VERBOSE)

_LABEL_RE = re.compile(r'^\s*([-a-zA-Z$._0-9]+|"[^"]+")\s*:')
_GLOBAL_STRING_RE = re.compile(r'^@([-a-zA-Z$._0-9]+)\s*=.*?c"((?:[^"\\]|\\.)*)"')
_SKIP_TOPLEVEL = ("declare", "attributes", "source_filename", "target", "!", "$", "module")


@dataclass
class _Token:
    kind: str
    text: str
    col: int


class _LineError(Exception):
    def __init__(self, kind: str, col: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.col = col
        self.message = message


def _strip_comment(line: str) -> str:
    in_string = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_string = not in_string
        elif ch == ";" and not in_string:
            return line[:i]
    return line


def _tokenize(line: str) -> List[_Token]:
    tokens = []
    pos = 0
    while pos < len(line):
        m = _TOKEN_RE.match(line, pos)
        if not m:
            raise _LineError(errors.SYNTAX_ERROR, pos + 1, f"unexpected character {line[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            text = m.group(kind)
            if kind in ("local", "global"):
                text = text[1:].strip('"')
            tokens.append(_Token(kind, text, pos + 1))
        pos = m.end()
    return tokens


def _unescape(text: str) -> str:
    """Decode LLVM c-string escapes (\\XX hex pairs and \\\\)"""
    out = []
    i = 0
    while i < len(text):
        if text[i] == "\\" and i + 1 < len(text):
            if text[i + 1] == "\\":
                out.append("\\")
                i += 2
                continue
            try:
                out.append(chr(int(text[i + 1:i + 3], 16)))
                i += 3
                continue
            except ValueError:
                pass
        out.append(text[i])
        i += 1
    return "".join(out).rstrip("\x00")


def _escape(text: str) -> str:
    out = []
    for ch in text:
        if ch == "\\":
            out.append("\\\\")
        elif ch == '"' or not (32 <= ord(ch) < 127):
            out.append(f"\\{ord(ch):02X}")
        else:
            out.append(ch)
    return "".join(out)


# ===== LINE PARSER =====

class _Cursor:
    """Recursive-descent helper over the tokens of one line"""

    def __init__(self, tokens: List[_Token], line_len: int):
        self.tokens = tokens
        self.pos = 0
        self.line_len = line_len

    def peek(self, offset: int = 0) -> Optional[_Token]:
        i = self.pos + offset
        return self.tokens[i] if i < len(self.tokens) else None

    def col(self) -> int:
        tok = self.peek()
        return tok.col if tok else self.line_len + 1

    def next(self) -> _Token:
        tok = self.peek()
        if tok is None:
            raise _LineError(errors.SYNTAX_ERROR, self.col(), "unexpected end of line")
        self.pos += 1
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.text == text and tok.kind in ("punct", "word")

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.pos += 1
            return True
        return False

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if not self.at(text):
            found = tok.text if tok else "end of line"
            raise _LineError(errors.SYNTAX_ERROR, self.col(), f"expected '{text}', found '{found}'")
        return self.next()

    def done(self) -> bool:
        return self.pos >= len(self.tokens)

    def skip_trailing_attachments(self):
        """Drop `, align N`, `, !dbg !N` and `#N` tails"""
        while not self.done():
            tok = self.peek()
            if tok.kind in ("attr", "meta"):
                self.pos += 1
                continue
            nxt = self.peek(1)
            if tok.text == "," and nxt is not None:
                if nxt.kind == "meta":
                    self.pos += 2
                    continue
                if nxt.kind == "word" and nxt.text == "align":
                    self.pos += 3
                    continue
            break

    def expect_end(self):
        self.skip_trailing_attachments()
        if not self.done():
            tok = self.peek()
            raise _LineError(errors.SYNTAX_ERROR, tok.col, f"unexpected '{tok.text}'")


def _parse_type(cur: _Cursor) -> IrType:
    col = cur.col()
    tok = cur.next()
    if tok.text == "<" and tok.kind == "punct":
        lanes_tok = cur.next()
        if lanes_tok.kind != "int":
            raise _LineError(errors.MALFORMED_TYPE, lanes_tok.col, "vector lane count must be an integer")
        cur.expect("x")
        elem = _parse_type(cur)
        cur.expect(">")
        lanes = int(lanes_tok.text)
        if elem != I32:
            raise _LineError(errors.MALFORMED_TYPE, col, f"vector element type must be i32, got {elem}")
        if lanes < 2:
            raise _LineError(errors.MALFORMED_TYPE, col, "vector types need at least 2 lanes")
        ty = vector_of(lanes)
    elif tok.kind == "word" and tok.text == "ptr":
        ty = PTR
    elif tok.kind == "word" and tok.text == "void":
        ty = VOID
    elif tok.kind == "word" and tok.text == "label":
        ty = LABEL
    elif tok.kind == "word" and re.fullmatch(r"i[0-9]+", tok.text):
        bits = int(tok.text[1:])
        if cur.at("*"):
            ty = None
        elif bits not in (1, 32):
            raise _LineError(errors.MALFORMED_TYPE, col, f"integer width {bits} is not supported (use i1 or i32)")
        else:
            ty = IrType(TypeKind.INT, bits)
    elif tok.text == "[":
        raise _LineError(errors.MALFORMED_TYPE, col, "aggregate types are not supported")
    else:
        raise _LineError(errors.MALFORMED_TYPE, col, f"unknown type '{tok.text}'")
    # typed pointers such as `i32*` collapse to ptr
    while cur.at("*"):
        cur.next()
        ty = PTR
    return ty


def _check_range(value: int, ty: IrType, col: int) -> int:
    if ty.bits == 1:
        if value not in (0, 1, -1):
            raise _LineError(errors.CONSTANT_OVERFLOW, col, f"constant {value} does not fit i1")
        return 1 if value else 0
    if not (-(1 << 31) <= value < (1 << 32)):
        raise _LineError(errors.CONSTANT_OVERFLOW, col, f"constant {value} does not fit in 32 bits")
    return value


def _parse_value(cur: _Cursor, ty: IrType) -> IrValue:
    col = cur.col()
    tok = cur.next()
    if tok.kind == "local":
        if ty.kind == TypeKind.LABEL:
            return label_ref(tok.text)
        return local(tok.text, ty)
    if tok.kind == "global":
        return IrValue(ValueKind.GLOBAL, ty, name=tok.text)
    if tok.kind == "int":
        if not ty.is_int:
            raise _LineError(errors.MALFORMED_TYPE, col, f"integer constant used as {ty}")
        return const_int(_check_range(int(tok.text), ty, col), ty)
    if tok.kind == "word" and tok.text in ("true", "false"):
        if not ty.is_bit:
            raise _LineError(errors.MALFORMED_TYPE, col, f"'{tok.text}' used as {ty}")
        return const_int(1 if tok.text == "true" else 0, ty)
    if tok.kind == "word" and tok.text == "null":
        if not ty.is_pointer:
            raise _LineError(errors.MALFORMED_TYPE, col, f"null used as {ty}")
        return const_int(0, ty)
    if tok.kind == "word" and tok.text == "zeroinitializer":
        if not ty.is_vector:
            raise _LineError(errors.MALFORMED_TYPE, col, "zeroinitializer needs a vector type")
        return IrValue(ValueKind.CONST_VECTOR, ty, values=(0,) * ty.lanes)
    if tok.kind == "punct" and tok.text == "<":
        if not ty.is_vector:
            raise _LineError(errors.MALFORMED_TYPE, col, f"vector constant used as {ty}")
        values = []
        while True:
            elem_ty = _parse_type(cur)
            elem_col = cur.col()
            elem = cur.next()
            if elem_ty != I32 or elem.kind != "int":
                raise _LineError(errors.MALFORMED_TYPE, elem_col, "vector constants hold i32 integers")
            values.append(_check_range(int(elem.text), I32, elem_col))
            if cur.accept(">"):
                break
            cur.expect(",")
        if len(values) != ty.lanes:
            raise _LineError(errors.MALFORMED_TYPE, col, f"vector constant has {len(values)} lanes, type says {ty.lanes}")
        return IrValue(ValueKind.CONST_VECTOR, ty, values=tuple(values))
    if tok.kind == "word" and tok.text in ("undef", "poison"):
        raise _LineError(errors.MALFORMED_TYPE, col, f"'{tok.text}' values are not supported")
    raise _LineError(errors.SYNTAX_ERROR, col, f"expected a value, found '{tok.text}'")


def _parse_typed_value(cur: _Cursor) -> IrValue:
    ty = _parse_type(cur)
    # parameter attributes between type and value
    while cur.peek() is not None and cur.peek().kind == "word" and cur.peek().text in _PARAM_ATTRS:
        cur.next()
    return _parse_value(cur, ty)


_PARAM_ATTRS = {
    "noundef", "nocapture", "readonly", "readnone", "writeonly", "nonnull", "zeroext",
    "signext", "noalias", "immarg", "returned", "nofree", "dereferenceable",
}


def _skip_flags(cur: _Cursor):
    while cur.peek() is not None and cur.peek().kind == "word" and cur.peek().text in _SKIPPED_FLAGS:
        cur.next()


def _require(cond: bool, kind: str, col: int, message: str):
    if not cond:
        raise _LineError(kind, col, message)


def _parse_instruction(cur: _Cursor, line: int) -> IrInstruction:
    result = None
    if cur.peek() is not None and cur.peek().kind == "local" and cur.peek(1) is not None and cur.peek(1).text == "=":
        result = cur.next().text
        cur.next()
    while cur.peek() is not None and cur.peek().text in _CALL_PREFIXES:
        cur.next()
    op_col = cur.col()
    op_tok = cur.next()
    opcode = op_tok.text
    if op_tok.kind != "word" or opcode not in ACCEPTED_OPCODES:
        raise _LineError(errors.UNSUPPORTED_OPCODE, op_col, f"unsupported opcode '{opcode}'")

    def make(type_, operands, **kw) -> IrInstruction:
        return IrInstruction(opcode=opcode, type=type_, operands=operands, result=result,
                             line=line, col=op_col, **kw)

    needs_result = opcode not in ("store", "br", "ret", "call")
    if needs_result and result is None:
        raise _LineError(errors.SYNTAX_ERROR, op_col, f"'{opcode}' must define a value")
    if opcode in ("store", "br", "ret") and result is not None:
        raise _LineError(errors.SYNTAX_ERROR, op_col, f"'{opcode}' does not define a value")

    if opcode in BINARY_OPCODES:
        _skip_flags(cur)
        ty_col = cur.col()
        ty = _parse_type(cur)
        _require(ty.is_int or ty.is_vector, errors.MALFORMED_TYPE, ty_col, f"'{opcode}' needs an integer type, got {ty}")
        a = _parse_value(cur, ty)
        cur.expect(",")
        b = _parse_value(cur, ty)
        if opcode == "shl":
            _require(b.is_const, errors.UNSUPPORTED_OPCODE, op_col, "shl is only supported by an immediate amount")
        cur.expect_end()
        return make(ty, [a, b])

    if opcode == "icmp":
        pred_col = cur.col()
        pred = cur.next().text
        _require(pred in ICMP_PREDICATES, errors.UNSUPPORTED_OPCODE, pred_col, f"icmp predicate '{pred}' is not supported")
        ty_col = cur.col()
        ty = _parse_type(cur)
        _require(ty.is_int, errors.MALFORMED_TYPE, ty_col, f"icmp operands must be scalar integers, got {ty}")
        a = _parse_value(cur, ty)
        cur.expect(",")
        b = _parse_value(cur, ty)
        cur.expect_end()
        return make(I1, [a, b], predicate=pred)

    if opcode == "select":
        c = _parse_typed_value(cur)
        _require(c.type == I1, errors.MALFORMED_TYPE, op_col, "select condition must be i1")
        cur.expect(",")
        t = _parse_typed_value(cur)
        cur.expect(",")
        f = _parse_typed_value(cur)
        _require(t.type == f.type and t.type.is_int, errors.MALFORMED_TYPE, op_col,
                 "select operands must share one scalar integer type")
        cur.expect_end()
        return make(t.type, [c, t, f])

    if opcode == "zext":
        src = _parse_typed_value(cur)
        cur.expect("to")
        dst = _parse_type(cur)
        _require(src.type == I1 and dst == I32, errors.MALFORMED_TYPE, op_col, "zext is only supported from i1 to i32")
        cur.expect_end()
        return make(dst, [src])

    if opcode == "load":
        ty_col = cur.col()
        ty = _parse_type(cur)
        _require(ty.is_int or ty.is_vector, errors.MALFORMED_TYPE, ty_col, f"cannot load {ty}")
        cur.expect(",")
        ptr = _parse_typed_value(cur)
        _require(ptr.type.is_pointer, errors.MALFORMED_TYPE, op_col, "load address must be a pointer")
        cur.expect_end()
        return make(ty, [ptr])

    if opcode == "store":
        value = _parse_typed_value(cur)
        cur.expect(",")
        ptr = _parse_typed_value(cur)
        _require(ptr.type.is_pointer, errors.MALFORMED_TYPE, op_col, "store address must be a pointer")
        cur.expect_end()
        return make(value.type, [value, ptr])

    if opcode == "getelementptr":
        _skip_flags(cur)
        elem_col = cur.col()
        elem = _parse_type(cur)
        _require(elem == I32, errors.MALFORMED_TYPE, elem_col,
                 f"getelementptr is only supported over i32 elements, got {elem}")
        cur.expect(",")
        base = _parse_typed_value(cur)
        _require(base.type.is_pointer, errors.MALFORMED_TYPE, op_col, "getelementptr base must be a pointer")
        cur.expect(",")
        index = _parse_typed_value(cur)
        _require(index.type == I32, errors.MALFORMED_TYPE, op_col, "getelementptr index must be i32")
        cur.skip_trailing_attachments()
        _require(not cur.at(","), errors.MALFORMED_TYPE, cur.col(), "multi-dimensional getelementptr is not supported")
        cur.expect_end()
        return make(PTR, [base, index])

    if opcode == "br":
        if cur.accept("label"):
            target = _parse_value(cur, LABEL)
            cur.expect_end()
            return make(VOID, [target])
        cond = _parse_typed_value(cur)
        _require(cond.type == I1, errors.MALFORMED_TYPE, op_col, "branch condition must be i1")
        cur.expect(",")
        cur.expect("label")
        t = _parse_value(cur, LABEL)
        cur.expect(",")
        cur.expect("label")
        f = _parse_value(cur, LABEL)
        cur.expect_end()
        return make(VOID, [cond, t, f])

    if opcode == "ret":
        if cur.accept("void"):
            cur.expect_end()
            return make(VOID, [])
        value = _parse_typed_value(cur)
        cur.expect_end()
        return make(value.type, [value])

    if opcode == "phi":
        ty = _parse_type(cur)
        operands = []
        while True:
            cur.expect("[")
            operands.append(_parse_value(cur, ty))
            cur.expect(",")
            operands.append(_parse_value(cur, LABEL))
            cur.expect("]")
            if not cur.accept(","):
                break
            if cur.peek() is not None and cur.peek().text != "[":
                cur.pos -= 1
                break
        cur.expect_end()
        return make(ty, operands)

    # call
    while cur.peek() is not None and cur.peek().kind == "word" and cur.peek().text in _PARAM_ATTRS:
        cur.next()
    ret_ty = _parse_type(cur)
    callee_col = cur.col()
    callee_tok = cur.next()
    _require(callee_tok.kind == "global", errors.SYNTAX_ERROR, callee_col, "call target must be a global function")
    callee = callee_tok.text
    allowed = (callee == LINEAR_LAYER_HOOK or callee.startswith(ANNOTATION_PREFIX)
               or callee.startswith(REDUCE_ADD_PREFIX) or callee.startswith(REDUCE_MUL_PREFIX))
    _require(allowed, errors.UNSUPPORTED_OPCODE, callee_col, f"call to '@{callee}' is not supported")
    cur.expect("(")
    args = []
    if not cur.accept(")"):
        while True:
            args.append(_parse_typed_value(cur))
            if cur.accept(")"):
                break
            cur.expect(",")
    cur.expect_end()
    if ret_ty != VOID and result is None:
        raise _LineError(errors.SYNTAX_ERROR, op_col, f"call to '@{callee}' must define a value")
    inst = make(ret_ty, args, callee=callee)
    _check_call_shape(inst)
    return inst


def _check_call_shape(inst: IrInstruction):
    callee = inst.callee
    args = inst.operands
    if callee == LINEAR_LAYER_HOOK:
        ok = len(args) == 5 and all(a.type.is_pointer for a in args[:3]) and all(a.type == I32 for a in args[3:])
        _require(ok and inst.type.is_pointer, errors.MALFORMED_TYPE, inst.col,
                 "mark_linear_layer expects (ptr x, ptr W, ptr b, i32 DIN, i32 DOUT) and returns ptr")
    elif callee.startswith(ANNOTATION_PREFIX):
        ok = len(args) >= 2 and args[1].kind == ValueKind.GLOBAL
        _require(ok and inst.type == VOID, errors.MALFORMED_TYPE, inst.col,
                 "llvm.var.annotation expects (value, annotation string, ...)")
    else:
        ok = len(args) == 1 and args[0].type.is_vector and inst.type == I32
        _require(ok, errors.MALFORMED_TYPE, inst.col, f"@{callee} expects one <N x i32> operand and returns i32")


def _parse_define(cur: _Cursor, line: int) -> IrFunction:
    cur.expect("define")
    # return type sits right before the function name
    at = cur.pos
    while at < len(cur.tokens) and cur.tokens[at].kind != "global":
        at += 1
    if at >= len(cur.tokens):
        raise _LineError(errors.SYNTAX_ERROR, cur.col(), "missing function name")
    start = at - 1
    if cur.tokens[start].text == ">":
        while start > cur.pos and cur.tokens[start].text != "<":
            start -= 1
    else:
        while start > cur.pos and cur.tokens[start].text == "*":
            start -= 1
    cur.pos = start
    ret_ty = _parse_type(cur)
    name = cur.next().text
    cur.expect("(")
    params = []
    if not cur.accept(")"):
        while True:
            ty = _parse_type(cur)
            while cur.peek() is not None and cur.peek().kind in ("word", "int") and cur.peek().text not in (",", ")"):
                cur.next()
            tok = cur.next()
            if tok.kind != "local":
                raise _LineError(errors.SYNTAX_ERROR, tok.col, "parameters must be named")
            params.append(IrParam(tok.text, ty))
            if cur.accept(")"):
                break
            cur.expect(",")
    # function attributes until the opening brace
    while not cur.done() and not cur.at("{"):
        cur.next()
    cur.expect("{")
    return IrFunction(name=name, return_type=ret_ty, params=params, line=line)


# ===== MODULE PARSER =====

def parse_module(text: str, filename: str = "<input>") -> IrModule:
    """Parse IR text into an IrModule or raise IrParseError with every diagnostic"""
    module = IrModule()
    diagnostics: List[Diagnostic] = []
    func: Optional[IrFunction] = None
    block: Optional[IrBlock] = None

    def diag(line: int, col: int, kind: str, message: str):
        diagnostics.append(Diagnostic(line, col, kind, message))

    def close_block(line: int):
        if block is not None and block.terminator is None:
            diag(block.line, 1, errors.UNTERMINATED_BLOCK, f"block '{block.label}' does not end in br or ret")

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).rstrip()
        if not line.strip():
            continue
        stripped = line.strip()

        if func is None:
            if stripped.startswith("define"):
                try:
                    cur = _Cursor(_tokenize(line), len(line))
                    func = _parse_define(cur, lineno)
                    block = None
                except _LineError as e:
                    diag(lineno, e.col, e.kind, e.message)
                    # keep scanning inside the body so later errors still surface
                    func = IrFunction(name="<invalid>", return_type=VOID, line=lineno)
                    block = None
                continue
            if stripped.startswith("@"):
                m = _GLOBAL_STRING_RE.match(stripped)
                if m:
                    module.globals[m.group(1)] = _unescape(m.group(2))
                continue
            if stripped.startswith(_SKIP_TOPLEVEL):
                continue
            diag(lineno, len(line) - len(line.lstrip()) + 1, errors.SYNTAX_ERROR, f"unexpected top-level text '{stripped}'")
            continue

        if stripped == "}":
            close_block(lineno)
            if not func.blocks:
                diag(func.line, 1, errors.UNTERMINATED_BLOCK, f"function '@{func.name}' has no body")
            if func.name != "<invalid>":
                module.functions.append(func)
            func = None
            block = None
            continue

        label_match = _LABEL_RE.match(line)
        if label_match and not stripped.startswith("%"):
            close_block(lineno)
            block = IrBlock(label=label_match.group(1).strip('"'), line=lineno)
            func.blocks.append(block)
            continue

        try:
            cur = _Cursor(_tokenize(line), len(line))
            inst = _parse_instruction(cur, lineno)
        except _LineError as e:
            diag(lineno, e.col, e.kind, e.message)
            continue
        if block is None:
            if func.blocks:
                diag(lineno, 1, errors.SYNTAX_ERROR, "instruction outside of a block")
                continue
            block = IrBlock(label="entry", line=lineno)
            func.blocks.append(block)
        if block.terminator is not None:
            diag(lineno, inst.col, errors.SYNTAX_ERROR, f"instruction follows the terminator of block '{block.label}'")
            continue
        block.instructions.append(inst)

    if func is not None:
        diag(func.line, 1, errors.UNTERMINATED_BLOCK, f"function '@{func.name}' is missing its closing brace")
        close_block(func.line)

    for f in module.functions:
        diagnostics.extend(_check_function(f))
        _resolve_annotations(f, module.globals)

    if diagnostics:
        diagnostics.sort(key=lambda d: (d.line, d.col))
        raise IrParseError(diagnostics, filename)
    logger.debug("parsed %d function(s) from %s", len(module.functions), filename)
    return module


def _check_function(func: IrFunction) -> List[Diagnostic]:
    """SSA uniqueness, label resolution and definedness of locals"""
    found = []
    defined: Dict[str, int] = {p.name: func.line for p in func.params}
    for block in func.blocks:
        for inst in block.instructions:
            if inst.result is None:
                continue
            if inst.result in defined:
                found.append(Diagnostic(inst.line, 1, errors.DUPLICATE_SSA_NAME,
                                        f"'%{inst.result}' is already defined"))
            else:
                defined[inst.result] = inst.line
    labels = set()
    for block in func.blocks:
        if block.label in labels:
            found.append(Diagnostic(block.line, 1, errors.DUPLICATE_SSA_NAME, f"label '{block.label}' is defined twice"))
        labels.add(block.label)
    for block in func.blocks:
        for inst in block.instructions:
            for op in inst.operands:
                if op.kind == ValueKind.LABEL_REF and op.name not in labels:
                    found.append(Diagnostic(inst.line, inst.col, errors.UNRESOLVED_LABEL, f"no block named '%{op.name}'"))
                elif op.kind == ValueKind.LOCAL and op.name not in defined:
                    found.append(Diagnostic(inst.line, inst.col, errors.UNDEFINED_VALUE, f"'%{op.name}' is never defined"))
    return found


def _resolve_annotations(func: IrFunction, strings: Dict[str, str]):
    """Attach llvm.var.annotation payloads to their instructions and parameters"""
    for block in func.blocks:
        for inst in block.instructions:
            if inst.opcode != "call" or not inst.callee.startswith(ANNOTATION_PREFIX):
                continue
            inst.annotation = strings.get(inst.operands[1].name)
            target = inst.operands[0]
            if target.kind == ValueKind.LOCAL:
                param = func.param(target.name)
                if param is not None and inst.annotation is not None:
                    param.annotation = inst.annotation


# ===== PRINTER =====

def print_instruction(inst: IrInstruction) -> str:
    prefix = f"%{inst.result} = " if inst.result is not None else ""
    ops = inst.operands
    op = inst.opcode
    if op in BINARY_OPCODES:
        body = f"{op} {inst.type} {ops[0].text()}, {ops[1].text()}"
    elif op == "icmp":
        body = f"icmp {inst.predicate} {ops[0].type} {ops[0].text()}, {ops[1].text()}"
    elif op == "select":
        body = f"select {ops[0].typed()}, {ops[1].typed()}, {ops[2].typed()}"
    elif op == "zext":
        body = f"zext {ops[0].typed()} to {inst.type}"
    elif op == "load":
        body = f"load {inst.type}, {ops[0].typed()}"
    elif op == "store":
        body = f"store {ops[0].typed()}, {ops[1].typed()}"
    elif op == "getelementptr":
        body = f"getelementptr inbounds i32, {ops[0].typed()}, {ops[1].typed()}"
    elif op == "br":
        if len(ops) == 1:
            body = f"br label {ops[0].text()}"
        else:
            body = f"br {ops[0].typed()}, label {ops[1].text()}, label {ops[2].text()}"
    elif op == "ret":
        body = f"ret {ops[0].typed()}" if ops else "ret void"
    elif op == "phi":
        pairs = ", ".join(f"[ {ops[i].text()}, {ops[i + 1].text()} ]" for i in range(0, len(ops), 2))
        body = f"phi {inst.type} {pairs}"
    else:
        args = ", ".join(a.typed() for a in ops)
        body = f"call {inst.type} @{inst.callee}({args})"
    return prefix + body


def print_module(module: IrModule) -> str:
    """Render a module in the accepted dialect; re-parsing yields an equal module"""
    lines = []
    for name, text in module.globals.items():
        lines.append(f'@{name} = private unnamed_addr constant [{len(text) + 1} x i8] c"{_escape(text)}\\00", '
                     f'section "llvm.metadata"')
    if lines:
        lines.append("")
    for func in module.functions:
        params = ", ".join(f"{p.type} %{p.name}" for p in func.params)
        lines.append(f"define {func.return_type} @{func.name}({params}) {{")
        for block in func.blocks:
            lines.append(f"{block.label}:")
            for inst in block.instructions:
                lines.append("  " + print_instruction(inst))
        lines.append("}")
        lines.append("")
    return "\n".join(lines)


# ===== ENTRY VALIDATION =====

PRIVATE = "private"
PUBLIC = "public"


@dataclass
class EntryParam:
    name: str
    type: IrType
    privacy: str


@dataclass
class EntryView:
    """A module whose entry function passed validation"""
    module: IrModule
    function: IrFunction
    params: List[EntryParam]


def validate_entry(module: IrModule, entry_name: Optional[str] = None) -> EntryView:
    """Check the MPC entry point and its parameter annotations"""
    if entry_name is None:
        if len(module.functions) != 1:
            raise errors.NoSuchEntry(f"module defines {len(module.functions)} functions; name the entry point")
        func = module.functions[0]
    else:
        func = module.function(entry_name)
        if func is None:
            raise errors.NoSuchEntry(f"no function named '@{entry_name}'")

    params = []
    for p in func.params:
        annotation = (p.annotation or "").strip().lower()
        if p.type.is_pointer and annotation not in (PRIVATE, PUBLIC):
            detail = f" (found '{p.annotation}')" if p.annotation else ""
            raise errors.MissingAnnotation(f"pointer parameter '%{p.name}' needs a private/public annotation{detail}")
        params.append(EntryParam(p.name, p.type, PRIVATE if annotation == PRIVATE else PUBLIC))

    rt = func.return_type
    if not (rt.is_int or rt.is_vector or rt.is_pointer):
        raise errors.BadReturnType(f"entry '@{func.name}' must return an integer, vector or pointer, not {rt}")
    logger.info("entry '@%s' validated with %d parameter(s)", func.name, len(params))
    return EntryView(module=module, function=func, params=params)
