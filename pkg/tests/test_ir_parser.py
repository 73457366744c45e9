import pytest

import errors
from ir_parser import PRIVATE, PUBLIC, parse_module, print_module, validate_entry
from tests.helpers import fixture_path, read_fixture

SIMPLE = """
define i32 @f(i32 %a, i32 %b) {
entry:
  %s = add nsw i32 %a, %b
  %c = icmp slt i32 %s, 10
  br i1 %c, label %small, label %big

small:
  %m = mul i32 %s, 3
  br label %big

big:
  %r = phi i32 [ %s, %entry ], [ %m, %small ]
  ret i32 %r
}
"""


def test_parses_blocks_and_instructions():
    module = parse_module(SIMPLE)
    func = module.function("f")
    assert [b.label for b in func.blocks] == ["entry", "small", "big"]
    assert [i.opcode for i in func.block("entry").instructions] == ["add", "icmp", "br"]
    phi = func.block("big").instructions[0]
    assert [label for _, label in phi.phi_pairs()] == ["entry", "small"]


def test_print_then_parse_is_stable():
    module = parse_module(SIMPLE)
    again = parse_module(print_module(module))
    assert again == module


def test_annotations_tag_parameters():
    view = validate_entry(parse_module(read_fixture("linear_layer.ll")))
    privacy = {p.name: p.privacy for p in view.params}
    assert privacy == {"x": PRIVATE, "W": PRIVATE, "b": PUBLIC}


def test_unannotated_scalars_are_public():
    view = validate_entry(parse_module(read_fixture("diamond.ll")))
    assert {p.name: p.privacy for p in view.params} == {"x": PRIVATE, "k": PUBLIC}


def test_unsupported_opcode_reports_position():
    with pytest.raises(errors.IrParseError) as exc:
        parse_module(read_fixture("unsupported.ll"), filename="unsupported.ll")
    diag = exc.value.diagnostics[0]
    assert diag.kind == errors.UNSUPPORTED_OPCODE
    assert diag.line == 3
    assert diag.col == 8
    assert str(exc.value).startswith("unsupported.ll:3:8: UnsupportedOpcode:")


def test_every_diagnostic_is_collected():
    text = """
define i32 @f(i32 %a) {
entry:
  %x = add i32 %a, 1
  %x = add i32 %a, 2
  %y = sdiv i32 %a, 3
  %z = add i64 %a, 1
  br label %nowhere
}
"""
    with pytest.raises(errors.IrParseError) as exc:
        parse_module(text)
    kinds = exc.value.kinds()
    assert errors.DUPLICATE_SSA_NAME in kinds
    assert errors.UNSUPPORTED_OPCODE in kinds
    assert errors.MALFORMED_TYPE in kinds
    assert errors.UNRESOLVED_LABEL in kinds


def test_constant_overflow():
    text = "define i32 @f(i32 %a) {\nentry:\n  %x = add i32 %a, 4294967296\n  ret i32 %x\n}\n"
    with pytest.raises(errors.IrParseError) as exc:
        parse_module(text)
    assert exc.value.kinds()[0] == errors.CONSTANT_OVERFLOW


def test_unterminated_block():
    text = "define i32 @f(i32 %a) {\nentry:\n  %x = add i32 %a, 1\n}\n"
    with pytest.raises(errors.IrParseError) as exc:
        parse_module(text)
    assert errors.UNTERMINATED_BLOCK in exc.value.kinds()


def test_undefined_value():
    text = "define i32 @f(i32 %a) {\nentry:\n  %x = add i32 %a, %ghost\n  ret i32 %x\n}\n"
    with pytest.raises(errors.IrParseError) as exc:
        parse_module(text)
    assert exc.value.kinds() == [errors.UNDEFINED_VALUE]


def test_unknown_call_target_is_rejected():
    text = "define i32 @f(i32 %a) {\nentry:\n  %x = call i32 @printf(i32 %a)\n  ret i32 %x\n}\n"
    with pytest.raises(errors.IrParseError) as exc:
        parse_module(text)
    assert exc.value.kinds()[0] == errors.UNSUPPORTED_OPCODE


def test_vector_types_and_reductions():
    text = """
define i32 @dot(<4 x i32> %a, <4 x i32> %b) {
entry:
  %p = mul <4 x i32> %a, %b
  %s = call i32 @llvm.vector.reduce.add.v4i32(<4 x i32> %p)
  ret i32 %s
}
"""
    func = parse_module(text).functions[0]
    assert func.params[0].type.lanes == 4
    assert func.blocks[0].instructions[1].callee == "llvm.vector.reduce.add.v4i32"


def test_pointer_without_annotation_fails_validation():
    text = "define i32 @f(ptr %x) {\nentry:\n  %v = load i32, ptr %x\n  ret i32 %v\n}\n"
    with pytest.raises(errors.MissingAnnotation):
        validate_entry(parse_module(text))


def test_entry_selection():
    text = SIMPLE + "\ndefine i32 @g(i32 %a) {\nentry:\n  ret i32 %a\n}\n"
    module = parse_module(text)
    with pytest.raises(errors.NoSuchEntry):
        validate_entry(module)
    with pytest.raises(errors.NoSuchEntry):
        validate_entry(module, "h")
    assert validate_entry(module, "g").function.name == "g"


def test_void_entry_is_rejected():
    text = "define void @f(i32 %a) {\nentry:\n  ret void\n}\n"
    with pytest.raises(errors.BadReturnType):
        validate_entry(parse_module(text))


def test_fixture_files_exist():
    for name in ("straight_line.ll", "diamond.ll", "loop.ll", "nested_loop.ll", "linear_layer.ll"):
        with open(fixture_path(name), encoding="utf-8") as f:
            assert "define" in f.read()
