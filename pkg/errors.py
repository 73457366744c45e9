"""Exception hierarchy shared by the compiler and the runtime"""
from dataclasses import dataclass
from typing import List, Optional


class MpcError(Exception):
    """Base class for every error raised by this project"""


# ===== FILE FORMATS =====

class FileFormatError(MpcError):
    pass


class VersionMismatch(FileFormatError):
    pass


class CorruptPayload(FileFormatError):
    pass


# ===== IR PARSER =====

# Diagnostic kinds collected by the parser
UNSUPPORTED_OPCODE = "UnsupportedOpcode"
MALFORMED_TYPE = "MalformedType"
DUPLICATE_SSA_NAME = "DuplicateSsaName"
UNTERMINATED_BLOCK = "UnterminatedBlock"
CONSTANT_OVERFLOW = "ConstantOverflow"
UNRESOLVED_LABEL = "UnresolvedLabel"
UNDEFINED_VALUE = "UndefinedValue"
SYNTAX_ERROR = "SyntaxError"


@dataclass
class Diagnostic:
    line: int
    col: int
    kind: str
    message: str

    def format(self, filename: str = "<input>") -> str:
        return f"{filename}:{self.line}:{self.col}: {self.kind}: {self.message}"


class IrParseError(MpcError):
    """Raised with every diagnostic found in one source text"""

    def __init__(self, diagnostics: List[Diagnostic], filename: str = "<input>"):
        self.diagnostics = list(diagnostics)
        self.filename = filename
        super().__init__("\n".join(d.format(filename) for d in self.diagnostics))

    def kinds(self) -> List[str]:
        return [d.kind for d in self.diagnostics]


class ValidationError(MpcError):
    pass


class MissingAnnotation(ValidationError):
    pass


class NoSuchEntry(ValidationError):
    pass


class BadReturnType(ValidationError):
    pass


# ===== GRAPH BUILDER =====

class GraphError(MpcError):
    pass


class UnloweredInstruction(GraphError):
    pass


class UntraceableBase(GraphError):
    pass


class SecretComparisonUnsupported(GraphError):
    pass


class WideBitwiseUnsupported(GraphError):
    pass


class NonConstantDims(GraphError):
    pass


class IrreducibleControlFlow(GraphError):
    pass


class SecretIndexUnsupported(GraphError):
    pass


# ===== SCHEDULER / RUNTIME =====

class SchedulerError(MpcError):
    pass


class SecretControlFlow(SchedulerError):
    pass


class DoubleCompletion(SchedulerError):
    pass


class UnknownPredecessor(SchedulerError):
    pass


class SchedulerStalled(SchedulerError):
    pass


class LoadOutOfBounds(SchedulerError):
    pass


# ===== PROTOCOL =====

class ProtocolError(MpcError):
    """Protocol aborts: the whole run stops"""


class TripleExhausted(ProtocolError):
    pass


class MaskExhausted(ProtocolError):
    pass


class MalformedShareMessage(ProtocolError):
    pass


class MacCheckFailed(ProtocolError):
    pass


class CommitmentMismatch(ProtocolError):
    pass


class TripleShapeMismatch(ProtocolError):
    pass


# ===== NETWORK =====

class NetworkError(MpcError):
    pass


class ConnectTimeout(NetworkError):
    def __init__(self, peer: int, endpoint: Optional[str] = None):
        self.peer = peer
        where = f" at {endpoint}" if endpoint else ""
        super().__init__(f"could not reach party {peer}{where}")


class IndexCollision(NetworkError):
    pass


class PeerTimeout(NetworkError):
    pass


class LaneCountMismatch(NetworkError):
    pass


class BatchIdExhausted(NetworkError):
    pass


# ===== BACKEND =====

class BackendError(MpcError):
    pass


class LaneMismatch(BackendError):
    pass


class TripleShortage(BackendError):
    pass


class BackendUnavailable(BackendError):
    pass


# ===== LINEAR LAYER =====

class LinearLayerError(MpcError):
    pass


class SliceTooSmall(LinearLayerError):
    pass


# ===== PREPROCESSING =====

class PreprocessingError(MpcError):
    pass


class ShapeMismatch(PreprocessingError):
    pass


class InsufficientTriples(PreprocessingError):
    pass


class InputMismatch(PreprocessingError):
    """Parties received different broadcast values for the same input"""


# ===== ORACLE =====

class OracleError(MpcError):
    pass


class NonTerminating(OracleError):
    pass
