"""Incremental graph construction with eager type checking."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .inference import infer_type, require_valid
from .ir import (
    Binary, Broadcast, Concat, Constant, Dot, DType, DynamicSlice,
    DynamicUpdateSlice, GetTupleElement, Graph, Instruction, Iota, OpKind,
    Parameter, ReduceMax, ReduceSum, Shape, Slice, TensorType, TopK,
    Transpose, TriangularSolve, Tuple, TupleType, Unary, VType, While,
)


def _shape(dims) -> Shape:
    if isinstance(dims, Shape):
        return dims
    return Shape(tuple(dims))


class GraphBuilder:
    """Appends instructions in SSA order; every emit re-runs inference so a
    malformed graph fails at the offending call, not at build time."""

    def __init__(self, name: str):
        self.name = name
        self._parameters: list[TensorType] = []
        self._instructions: dict[int, Instruction] = {}
        self._next_id = 0

    # -- low level ---------------------------------------------------------

    def _append(self, op: OpKind, operands: Sequence[int], vtype: VType) -> int:
        for o in operands:
            if o not in self._instructions:
                raise KeyError(f"operand %{o} has not been emitted")
        iid = self._next_id
        self._next_id += 1
        self._instructions[iid] = Instruction(iid, op, tuple(operands), vtype)
        return iid

    def emit(self, op: OpKind, operands: Sequence[int]) -> int:
        vtype = infer_type(op, [self._instructions[o].type for o in operands])
        return self._append(op, operands, vtype)

    def type_of(self, iid: int) -> VType:
        return self._instructions[iid].type

    def instruction(self, iid: int) -> Instruction:
        return self._instructions[iid]

    # -- sources -----------------------------------------------------------

    def param(self, dims, dtype: DType) -> int:
        t = TensorType(_shape(dims), dtype)
        index = len(self._parameters)
        self._parameters.append(t)
        return self._append(Parameter(index), (), t)

    def constant(self, value, dtype: DType | None = None) -> int:
        arr = np.asarray(value)
        if dtype is not None:
            arr = arr.astype(dtype.np_dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        op = Constant(arr)
        return self._append(op, (), TensorType(Shape(arr.shape), DType.from_np(arr.dtype)))

    def iota(self, size: int, dtype: DType) -> int:
        return self._append(Iota(size), (), TensorType(Shape((size,)), dtype))

    # -- elementwise ---------------------------------------------------------

    def unary(self, op: str, x: int) -> int:
        return self.emit(Unary(op), (x,))

    def neg(self, x: int) -> int:
        return self.unary("neg", x)

    def exp(self, x: int) -> int:
        return self.unary("exp", x)

    def abs(self, x: int) -> int:
        return self.unary("abs", x)

    def square(self, x: int) -> int:
        return self.unary("square", x)

    def sqrt(self, x: int) -> int:
        return self.unary("sqrt", x)

    def reciprocal(self, x: int) -> int:
        return self.unary("reciprocal", x)

    def binary(self, op: str, a: int, b: int) -> int:
        return self.emit(Binary(op), (a, b))

    def add(self, a: int, b: int) -> int:
        return self.binary("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self.binary("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self.binary("mul", a, b)

    def div(self, a: int, b: int) -> int:
        return self.binary("div", a, b)

    def pow(self, a: int, b: int) -> int:
        return self.binary("pow", a, b)

    def maximum(self, a: int, b: int) -> int:
        return self.binary("max", a, b)

    def minimum(self, a: int, b: int) -> int:
        return self.binary("min", a, b)

    # -- structure -----------------------------------------------------------

    def broadcast(self, x: int, result_dims, mapped_dims) -> int:
        return self.emit(Broadcast(tuple(result_dims), tuple(mapped_dims)), (x,))

    def scalar_broadcast(self, x: int, result_dims) -> int:
        """Broadcast a scalar across a full result shape."""
        return self.broadcast(x, result_dims, ())

    def reduce_sum(self, x: int, dims) -> int:
        return self.emit(ReduceSum(tuple(dims)), (x,))

    def reduce_max(self, x: int, dims) -> int:
        return self.emit(ReduceMax(tuple(dims)), (x,))

    def dot(self, a: int, b: int, lhs_contracting, rhs_contracting,
            lhs_batch=(), rhs_batch=()) -> int:
        op = Dot(tuple(lhs_contracting), tuple(rhs_contracting),
                 tuple(lhs_batch), tuple(rhs_batch))
        return self.emit(op, (a, b))

    def matmul(self, a: int, b: int) -> int:
        """Plain 2-D (or matrix-vector) product contracting the inner dims."""
        a_rank = self._instructions[a].shape.rank
        return self.emit(Dot((a_rank - 1,), (0,)), (a, b))

    def transpose(self, x: int, perm) -> int:
        return self.emit(Transpose(tuple(perm)), (x,))

    def slice(self, x: int, starts, limits, strides=None) -> int:
        starts = tuple(starts)
        if strides is None:
            strides = (1,) * len(starts)
        return self.emit(Slice(starts, tuple(limits), tuple(strides)), (x,))

    def concat(self, xs: Sequence[int], dim: int) -> int:
        return self.emit(Concat(dim), tuple(xs))

    def top_k(self, x: int, k: int, dim: int, largest: bool) -> int:
        return self.emit(TopK(k, dim, largest), (x,))

    def triangular_solve(self, a: int, b: int, lower: bool) -> int:
        return self.emit(TriangularSolve(lower), (a, b))

    def dynamic_slice(self, x: int, starts: Sequence[int], sizes) -> int:
        return self.emit(DynamicSlice(tuple(sizes)), (x, *starts))

    def dynamic_update_slice(self, target: int, update: int,
                             starts: Sequence[int]) -> int:
        return self.emit(DynamicUpdateSlice(), (target, update, *starts))

    def while_loop(self, cond: Graph, body: Graph, carried: Sequence[int]) -> int:
        return self.emit(While(cond, body), tuple(carried))

    def tuple(self, xs: Sequence[int]) -> int:
        return self.emit(Tuple(), tuple(xs))

    def get_tuple_element(self, x: int, index: int) -> int:
        return self.emit(GetTupleElement(index), (x,))

    # -- finish --------------------------------------------------------------

    def build(self, root: int, dce: bool = False) -> Graph:
        graph = Graph(self.name, tuple(self._parameters), dict(self._instructions), root)
        if dce:
            graph = dead_code_eliminate(graph)
        return require_valid(graph)


def dead_code_eliminate(graph: Graph) -> Graph:
    """Drops instructions unreachable from the root.

    Parameter instructions are kept even when unused: they are part of the
    graph signature and their buffers exist at execution time regardless.
    """
    keep: set[int] = set()
    stack = [graph.root]
    while stack:
        iid = stack.pop()
        if iid in keep:
            continue
        keep.add(iid)
        stack.extend(graph.instructions[iid].operands)
    instrs = {iid: instr for iid, instr in graph.instructions.items()
              if iid in keep or isinstance(instr.op, Parameter)}
    return Graph(graph.name, graph.parameters, instrs, graph.root)


def copy_instruction(builder: GraphBuilder, instr: Instruction,
                     operand_map: dict[int, int]) -> int:
    """Re-emits an instruction into `builder` with operands remapped."""
    operands = tuple(operand_map[o] for o in instr.operands)
    op = instr.op
    if isinstance(op, Parameter):
        raise ValueError("parameters must be re-declared, not copied")
    if isinstance(op, (Constant, Iota)):
        return builder._append(op, operands, instr.type)
    return builder.emit(op, operands)


def rebuild(graph: Graph, replacements=None, name: str | None = None) -> Graph:
    """Copies a graph in stored order, letting `replacements` substitute the
    value of selected instructions.

    A replacement callback receives (builder, operand_map) and returns the new
    id standing in for the original instruction; downstream copies then use it.
    Dead code left behind by replacements is eliminated.
    """
    replacements = replacements or {}
    nb = GraphBuilder(name or graph.name)
    operand_map: dict[int, int] = {}
    for instr in graph:
        if isinstance(instr.op, Parameter):
            new_id = nb.param(instr.shape, instr.dtype)
            if nb.instruction(new_id).op.index != instr.op.index:
                raise ValueError("parameter instructions must appear in index order")
            operand_map[instr.id] = new_id
            if instr.id in replacements:
                operand_map[instr.id] = replacements[instr.id](nb, operand_map)
            continue
        if instr.id in replacements:
            operand_map[instr.id] = replacements[instr.id](nb, operand_map)
            continue
        operand_map[instr.id] = copy_instruction(nb, instr, operand_map)
    return nb.build(operand_map[graph.root], dce=bool(replacements))
