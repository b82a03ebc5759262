"""Tensor dataflow IR: dtypes, shapes, opcodes, instructions and graphs.

A graph is an SSA sequence of instructions; every instruction records its
result type so that size arithmetic never needs to re-derive shapes.  Graphs
are treated as immutable after validation; passes build new graphs instead of
mutating.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from enum import Enum
from typing import ClassVar, Iterator, Sequence, Union

import numpy as np

# Sizes must stay addressable with signed 64-bit arithmetic even for tensors
# that are never materialised (multi-terabyte kernel matrices).
MAX_BYTES = 2**63 - 1

# Dense constants above this are rejected at build time; large tensors must be
# parameters or computed values.
CONSTANT_BYTE_LIMIT = 1 << 20


class CycleDetected(Exception):
    """Instruction dependencies contain a cycle outside any loop body."""


class DType(Enum):
    F32 = ("f32", 4)
    F64 = ("f64", 8)

    def __init__(self, label: str, byte_size: int):
        self.label = label
        self.byte_size = byte_size

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is DType.F32 else np.float64)

    @classmethod
    def from_np(cls, dtype) -> "DType":
        dtype = np.dtype(dtype)
        if dtype == np.float32:
            return cls.F32
        if dtype == np.float64:
            return cls.F64
        raise ValueError(f"unsupported dtype {dtype}; only f32/f64 tensors exist")

    def __str__(self) -> str:
        return self.label


def _dims(values) -> tuple[int, ...]:
    return tuple(int(v) for v in values)


@dataclass(frozen=True)
class Shape:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = _dims(self.dims)
        if any(d < 0 for d in dims):
            raise ValueError(f"negative dimension in shape {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
            if n > MAX_BYTES:
                raise OverflowError(f"element count of shape {self} exceeds 2**63-1")
        return n

    def byte_size(self, dtype: DType) -> int:
        n = self.element_count * dtype.byte_size
        if n > MAX_BYTES:
            raise OverflowError(f"byte size of {self}:{dtype} exceeds 2**63-1")
        return n

    def replace_dim(self, dim: int, extent: int) -> "Shape":
        dims = list(self.dims)
        dims[dim] = extent
        return Shape(tuple(dims))

    def __iter__(self) -> Iterator[int]:
        return iter(self.dims)

    def __len__(self) -> int:
        return len(self.dims)

    def __getitem__(self, i):
        return self.dims[i]

    def __str__(self) -> str:
        return "[" + ",".join(str(d) for d in self.dims) + "]"


SCALAR = Shape(())


@dataclass(frozen=True)
class TensorType:
    shape: Shape
    dtype: DType

    @property
    def byte_size(self) -> int:
        return self.shape.byte_size(self.dtype)

    def __str__(self) -> str:
        return f"({self.shape}, {self.dtype})"


@dataclass(frozen=True)
class TupleType:
    elements: tuple[TensorType, ...]

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    @property
    def byte_size(self) -> int:
        return sum(e.byte_size for e in self.elements)

    def __str__(self) -> str:
        return "(" + ", ".join(str(e) for e in self.elements) + ")"


VType = Union[TensorType, TupleType]


# ---------------------------------------------------------------------------
# Opcodes.  Each opcode carries exactly its attributes; nothing else.
# ---------------------------------------------------------------------------

UNARY_OPS = ("neg", "exp", "abs", "square", "sqrt", "reciprocal")
BINARY_OPS = ("add", "sub", "mul", "div", "pow", "max", "min")


@dataclass(frozen=True)
class Parameter:
    kind: ClassVar[str] = "parameter"
    index: int


@dataclass(frozen=True, eq=False)
class Constant:
    kind: ClassVar[str] = "constant"
    value: np.ndarray

    def __post_init__(self):
        # np.array (not ascontiguousarray) so 0-d scalars keep their shape.
        arr = np.array(self.value, order="C")
        DType.from_np(arr.dtype)
        if arr.nbytes > CONSTANT_BYTE_LIMIT:
            raise ValueError(
                f"dense constant of {arr.nbytes} bytes exceeds the "
                f"{CONSTANT_BYTE_LIMIT}-byte limit; pass large tensors as parameters"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "value", arr)


@dataclass(frozen=True)
class Unary:
    kind: ClassVar[str] = "unary"
    op: str

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary op {self.op!r}")


@dataclass(frozen=True)
class Binary:
    kind: ClassVar[str] = "binary"
    op: str

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary op {self.op!r}")


@dataclass(frozen=True)
class Broadcast:
    """Maps operand dim i to result dim mapped_dims[i]; other dims are new."""

    kind: ClassVar[str] = "broadcast"
    result_dims: tuple[int, ...]
    mapped_dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "result_dims", _dims(self.result_dims))
        object.__setattr__(self, "mapped_dims", _dims(self.mapped_dims))


@dataclass(frozen=True)
class ReduceSum:
    kind: ClassVar[str] = "reduce_sum"
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", _dims(self.dims))


@dataclass(frozen=True)
class ReduceMax:
    kind: ClassVar[str] = "reduce_max"
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", _dims(self.dims))


@dataclass(frozen=True)
class Dot:
    """General contraction: result dims are batch + lhs free + rhs free."""

    kind: ClassVar[str] = "dot"
    lhs_contracting: tuple[int, ...]
    rhs_contracting: tuple[int, ...]
    lhs_batch: tuple[int, ...] = ()
    rhs_batch: tuple[int, ...] = ()

    def __post_init__(self):
        for name in ("lhs_contracting", "rhs_contracting", "lhs_batch", "rhs_batch"):
            object.__setattr__(self, name, _dims(getattr(self, name)))


@dataclass(frozen=True)
class Transpose:
    kind: ClassVar[str] = "transpose"
    perm: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "perm", _dims(self.perm))


@dataclass(frozen=True)
class Slice:
    kind: ClassVar[str] = "slice"
    starts: tuple[int, ...]
    limits: tuple[int, ...]
    strides: tuple[int, ...]

    def __post_init__(self):
        for name in ("starts", "limits", "strides"):
            object.__setattr__(self, name, _dims(getattr(self, name)))


@dataclass(frozen=True)
class Concat:
    kind: ClassVar[str] = "concat"
    dim: int


@dataclass(frozen=True)
class Iota:
    """1-D vector [0, 1, ..., size-1]; dtype is recorded on the instruction."""

    kind: ClassVar[str] = "iota"
    size: int


@dataclass(frozen=True)
class TopK:
    """Returns a (values, indices) tuple; indices are exact integers stored
    in the operand's float dtype."""

    kind: ClassVar[str] = "top_k"
    k: int
    dim: int
    largest: bool


@dataclass(frozen=True)
class TriangularSolve:
    """Solves a @ x = b for triangular a; batch dims are the leading dims."""

    kind: ClassVar[str] = "triangular_solve"
    lower: bool


@dataclass(frozen=True)
class DynamicSlice:
    """Extracts a fixed-size window at runtime offsets.

    Operands are (source, start_0, ..., start_{rank-1}); starts are scalars
    holding exact integers, clamped so the window stays in bounds.
    """

    kind: ClassVar[str] = "dynamic_slice"
    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", _dims(self.sizes))


@dataclass(frozen=True)
class DynamicUpdateSlice:
    """Writes `update` into `target` at runtime offsets, returning the whole
    target.  Operands are (target, update, start_0, ..., start_{rank-1})."""

    kind: ClassVar[str] = "dynamic_update_slice"


@dataclass(frozen=True, eq=False)
class While:
    """Carries a tuple of values; operands are the initial carried values.

    The loop keeps iterating while the condition graph's scalar root is
    strictly positive, so `counter < limit` is written as `limit - counter`.
    """

    kind: ClassVar[str] = "while"
    cond: "Graph"
    body: "Graph"


@dataclass(frozen=True)
class Tuple:
    kind: ClassVar[str] = "tuple"


@dataclass(frozen=True)
class GetTupleElement:
    kind: ClassVar[str] = "get_tuple_element"
    index: int


OpKind = Union[
    Parameter, Constant, Unary, Binary, Broadcast, ReduceSum, ReduceMax, Dot,
    Transpose, Slice, Concat, Iota, TopK, TriangularSolve, DynamicSlice,
    DynamicUpdateSlice, While, Tuple, GetTupleElement,
]

REDUCE_OPS = (ReduceSum, ReduceMax)


@dataclass(frozen=True)
class Instruction:
    id: int
    op: OpKind
    operands: tuple[int, ...]
    type: VType

    def __post_init__(self):
        object.__setattr__(self, "operands", tuple(int(o) for o in self.operands))

    @property
    def is_tuple(self) -> bool:
        return isinstance(self.type, TupleType)

    @property
    def shape(self) -> Shape:
        if self.is_tuple:
            raise TypeError(f"%{self.id} is tuple-valued and has no single shape")
        return self.type.shape

    @property
    def dtype(self) -> DType:
        if self.is_tuple:
            raise TypeError(f"%{self.id} is tuple-valued and has no single dtype")
        return self.type.dtype

    @property
    def byte_size(self) -> int:
        return self.type.byte_size


def byte_size(instr: Instruction) -> int:
    """Total result bytes of an instruction (sum over tuple elements)."""
    return instr.byte_size


@dataclass(eq=False)
class Graph:
    name: str
    parameters: tuple[TensorType, ...]
    instructions: dict[int, Instruction]
    root: int

    def __post_init__(self):
        self.parameters = tuple(self.parameters)

    def __iter__(self) -> Iterator[Instruction]:
        return iter(self.instructions.values())

    def __getitem__(self, instr_id: int) -> Instruction:
        return self.instructions[instr_id]

    @property
    def root_instruction(self) -> Instruction:
        return self.instructions[self.root]

    def users(self) -> dict[int, list[int]]:
        """Consumer map; an id appears once per use (duplicates kept)."""
        out: dict[int, list[int]] = {i: [] for i in self.instructions}
        for instr in self:
            for o in instr.operands:
                if o in out:
                    out[o].append(instr.id)
        return out

    def subgraphs(self) -> Iterator["Graph"]:
        for instr in self:
            if isinstance(instr.op, While):
                yield instr.op.cond
                yield instr.op.body

    def dump(self) -> str:
        return dump(self)


def topological_order(graph: Graph) -> list[int]:
    """Deterministic execution order of the instructions reachable from root.

    Among ready instructions the smallest id goes first, so the order is a
    stable function of the graph alone.  Raises CycleDetected when operand
    edges in the reachable subgraph form a cycle.
    """
    reachable: set[int] = set()
    stack = [graph.root]
    while stack:
        iid = stack.pop()
        if iid in reachable:
            continue
        reachable.add(iid)
        stack.extend(graph.instructions[iid].operands)

    indegree = {i: 0 for i in reachable}
    users: dict[int, list[int]] = {i: [] for i in reachable}
    for iid in reachable:
        for o in set(graph.instructions[iid].operands):
            indegree[iid] += 1
            users[o].append(iid)

    ready = [i for i in reachable if indegree[i] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        iid = heapq.heappop(ready)
        order.append(iid)
        for u in users[iid]:
            indegree[u] -= 1
            if indegree[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(reachable):
        raise CycleDetected(f"graph {graph.name!r} has a dependency cycle")
    return order


def max_instruction_bytes(graph: Graph, include_bodies: bool = True) -> int:
    """Largest single-tensor result size, optionally recursing into loop
    bodies.  Tuple-valued instructions are carriers, not tensors: their
    elements are counted where they are produced or unpacked."""
    best = 0
    for instr in graph:
        if not instr.is_tuple:
            best = max(best, instr.byte_size)
        if include_bodies and isinstance(instr.op, While):
            best = max(best, max_instruction_bytes(instr.op.cond),
                       max_instruction_bytes(instr.op.body))
    return best


# ---------------------------------------------------------------------------
# Textual dump: one instruction per line, stable and diffable.
# ---------------------------------------------------------------------------

def _fmt_num(v: float) -> str:
    f = float(v)
    if f == int(f) and abs(f) < 1e16 and np.isfinite(f):
        return str(int(f))
    return repr(f)


def _fmt_list(vals) -> str:
    return "[" + ",".join(str(v) for v in vals) + "]"


def _fmt_constant(arr: np.ndarray) -> str:
    if arr.size <= 8:
        flat = ",".join(_fmt_num(v) for v in arr.reshape(-1))
        return f"value=[{flat}]"
    digest = hashlib.sha1(arr.tobytes()).hexdigest()[:12]
    return f"value=#{digest}"


def _op_attrs(op: OpKind) -> str:
    if isinstance(op, Parameter):
        return f"index={op.index}"
    if isinstance(op, Constant):
        return _fmt_constant(op.value)
    if isinstance(op, Broadcast):
        return f"dims={_fmt_list(op.mapped_dims)}"
    if isinstance(op, (ReduceSum, ReduceMax)):
        return f"dims={_fmt_list(op.dims)}"
    if isinstance(op, Dot):
        parts = [f"lhs_contract={_fmt_list(op.lhs_contracting)}",
                 f"rhs_contract={_fmt_list(op.rhs_contracting)}"]
        if op.lhs_batch or op.rhs_batch:
            parts.append(f"lhs_batch={_fmt_list(op.lhs_batch)}")
            parts.append(f"rhs_batch={_fmt_list(op.rhs_batch)}")
        return ", ".join(parts)
    if isinstance(op, Transpose):
        return f"perm={_fmt_list(op.perm)}"
    if isinstance(op, Slice):
        return (f"starts={_fmt_list(op.starts)}, limits={_fmt_list(op.limits)}, "
                f"strides={_fmt_list(op.strides)}")
    if isinstance(op, Concat):
        return f"dim={op.dim}"
    if isinstance(op, Iota):
        return f"size={op.size}"
    if isinstance(op, TopK):
        return f"k={op.k}, dim={op.dim}, largest={str(op.largest).lower()}"
    if isinstance(op, TriangularSolve):
        return f"lower={str(op.lower).lower()}"
    if isinstance(op, DynamicSlice):
        return f"sizes={_fmt_list(op.sizes)}"
    if isinstance(op, While):
        return f"cond={op.cond.name}, body={op.body.name}"
    if isinstance(op, GetTupleElement):
        return f"index={op.index}"
    return ""


def _op_name(op: OpKind) -> str:
    if isinstance(op, (Unary, Binary)):
        return op.op
    return op.kind


def _dump_one(graph: Graph) -> str:
    lines = [f"graph {graph.name} {{"]
    for instr in graph:
        text = f"  %{instr.id} = {_op_name(instr.op)}{instr.type}"
        if instr.operands:
            text += " " + ", ".join(f"%{o}" for o in instr.operands)
        attrs = _op_attrs(instr.op)
        if attrs:
            text += f" [{attrs}]"
        lines.append(text)
    lines.append(f"  root %{graph.root}")
    lines.append("}")
    return "\n".join(lines)


def dump(graph: Graph) -> str:
    """Stable textual form of a graph followed by its nested loop graphs."""
    sections = []
    queue = [graph]
    while queue:
        g = queue.pop(0)
        sections.append(_dump_one(g))
        queue.extend(g.subgraphs())
    return "\n\n".join(sections) + "\n"
