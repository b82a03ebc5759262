"""Shape/type inference and structural validation for dataflow graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ir import (
    Binary, Broadcast, Concat, Constant, CycleDetected, Dot, DType,
    DynamicSlice, DynamicUpdateSlice, GetTupleElement, Graph, Instruction,
    Iota, OpKind, Parameter, ReduceMax, ReduceSum, Shape, Slice, TensorType,
    TopK, Transpose, TriangularSolve, Tuple, TupleType, Unary, VType, While,
    topological_order,
)


class ShapeMismatch(Exception):
    """Operand shapes or dtypes are incompatible with the opcode."""


class AttributeOutOfRange(Exception):
    """An opcode attribute (dim index, permutation, size) is invalid."""


@dataclass(frozen=True)
class Diagnostic:
    instruction: int | None
    message: str

    def __str__(self) -> str:
        where = f"%{self.instruction}: " if self.instruction is not None else ""
        return where + self.message


class InvalidGraph(Exception):
    def __init__(self, graph_name: str, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        text = "; ".join(str(d) for d in diagnostics[:8])
        super().__init__(f"graph {graph_name!r} failed validation: {text}")


def _tensor(t: VType, what: str) -> TensorType:
    if not isinstance(t, TensorType):
        raise ShapeMismatch(f"{what} must be tensor-valued, got {t}")
    return t


def _same_dtype(types: Sequence[TensorType], what: str) -> DType:
    dtypes = {t.dtype for t in types}
    if len(dtypes) != 1:
        raise ShapeMismatch(f"{what} operands mix dtypes {sorted(d.label for d in dtypes)}")
    return dtypes.pop()


def _check_arity(op: OpKind, n: int, expected: int) -> None:
    if n != expected:
        raise ShapeMismatch(f"{op.kind} expects {expected} operands, got {n}")


def _check_dims_attr(dims: tuple[int, ...], rank: int, what: str) -> None:
    if list(dims) != sorted(set(dims)):
        raise AttributeOutOfRange(f"{what} {list(dims)} must be sorted and unique")
    if any(d < 0 or d >= rank for d in dims):
        raise AttributeOutOfRange(f"{what} {list(dims)} out of range for rank {rank}")


def infer_type(op: OpKind, operand_types: Sequence[VType]) -> VType:
    """Result type of `op` over the given operand types.

    Deterministic; raises ShapeMismatch/AttributeOutOfRange instead of
    guessing.  Source ops (parameter, constant, iota) carry their own type
    and are not inferable from operands.
    """
    n = len(operand_types)

    if isinstance(op, Parameter):
        raise ShapeMismatch("parameter type comes from the graph signature")

    if isinstance(op, Constant):
        _check_arity(op, n, 0)
        return TensorType(Shape(op.value.shape), DType.from_np(op.value.dtype))

    if isinstance(op, Iota):
        _check_arity(op, n, 0)
        raise ShapeMismatch("iota dtype is recorded on the instruction")

    if isinstance(op, Unary):
        _check_arity(op, n, 1)
        return _tensor(operand_types[0], "unary operand")

    if isinstance(op, Binary):
        _check_arity(op, n, 2)
        a = _tensor(operand_types[0], "binary lhs")
        b = _tensor(operand_types[1], "binary rhs")
        if a.shape != b.shape:
            raise ShapeMismatch(f"{op.op} operands {a.shape} vs {b.shape} differ")
        _same_dtype((a, b), op.op)
        return a

    if isinstance(op, Broadcast):
        _check_arity(op, n, 1)
        src = _tensor(operand_types[0], "broadcast operand")
        result = Shape(op.result_dims)
        if len(op.mapped_dims) != src.shape.rank:
            raise AttributeOutOfRange(
                f"broadcast maps {len(op.mapped_dims)} dims but operand has rank {src.shape.rank}")
        if list(op.mapped_dims) != sorted(set(op.mapped_dims)):
            raise AttributeOutOfRange(f"broadcast dims {list(op.mapped_dims)} must be strictly increasing")
        for i, d in enumerate(op.mapped_dims):
            if d < 0 or d >= result.rank:
                raise AttributeOutOfRange(f"broadcast dim {d} out of range for {result}")
            if result[d] != src.shape[i]:
                raise ShapeMismatch(
                    f"broadcast maps operand dim {i} (={src.shape[i]}) to result dim {d} (={result[d]})")
        return TensorType(result, src.dtype)

    if isinstance(op, (ReduceSum, ReduceMax)):
        _check_arity(op, n, 1)
        src = _tensor(operand_types[0], "reduce operand")
        _check_dims_attr(op.dims, src.shape.rank, "reduce dims")
        kept = tuple(e for i, e in enumerate(src.shape) if i not in op.dims)
        return TensorType(Shape(kept), src.dtype)

    if isinstance(op, Dot):
        _check_arity(op, n, 2)
        lhs = _tensor(operand_types[0], "dot lhs")
        rhs = _tensor(operand_types[1], "dot rhs")
        _same_dtype((lhs, rhs), "dot")
        if len(op.lhs_batch) != len(op.rhs_batch):
            raise AttributeOutOfRange("dot batch dim lists differ in length")
        if len(op.lhs_contracting) != len(op.rhs_contracting):
            raise AttributeOutOfRange("dot contracting dim lists differ in length")
        for side, shape, contracting, batch in (
                ("lhs", lhs.shape, op.lhs_contracting, op.lhs_batch),
                ("rhs", rhs.shape, op.rhs_contracting, op.rhs_batch)):
            used = list(contracting) + list(batch)
            if len(set(used)) != len(used):
                raise AttributeOutOfRange(f"dot {side} reuses a dim in batch/contracting")
            if any(d < 0 or d >= shape.rank for d in used):
                raise AttributeOutOfRange(f"dot {side} dims {used} out of range for {shape}")
        for lb, rb in zip(op.lhs_batch, op.rhs_batch):
            if lhs.shape[lb] != rhs.shape[rb]:
                raise ShapeMismatch(f"dot batch extents {lhs.shape[lb]} vs {rhs.shape[rb]} differ")
        for lc, rc in zip(op.lhs_contracting, op.rhs_contracting):
            if lhs.shape[lc] != rhs.shape[rc]:
                raise ShapeMismatch(
                    f"dot contracting extents {lhs.shape[lc]} vs {rhs.shape[rc]} differ")
        lhs_free = [i for i in range(lhs.shape.rank)
                    if i not in op.lhs_batch and i not in op.lhs_contracting]
        rhs_free = [i for i in range(rhs.shape.rank)
                    if i not in op.rhs_batch and i not in op.rhs_contracting]
        dims = tuple(lhs.shape[d] for d in op.lhs_batch)
        dims += tuple(lhs.shape[d] for d in lhs_free)
        dims += tuple(rhs.shape[d] for d in rhs_free)
        return TensorType(Shape(dims), lhs.dtype)

    if isinstance(op, Transpose):
        _check_arity(op, n, 1)
        src = _tensor(operand_types[0], "transpose operand")
        if sorted(op.perm) != list(range(src.shape.rank)):
            raise AttributeOutOfRange(f"perm {list(op.perm)} is not a permutation of rank {src.shape.rank}")
        return TensorType(Shape(tuple(src.shape[d] for d in op.perm)), src.dtype)

    if isinstance(op, Slice):
        _check_arity(op, n, 1)
        src = _tensor(operand_types[0], "slice operand")
        rank = src.shape.rank
        if not (len(op.starts) == len(op.limits) == len(op.strides) == rank):
            raise AttributeOutOfRange("slice attribute lists must match operand rank")
        dims = []
        for d in range(rank):
            s, l, st = op.starts[d], op.limits[d], op.strides[d]
            if st < 1:
                raise AttributeOutOfRange(f"slice stride {st} at dim {d} must be >= 1")
            if not (0 <= s <= l <= src.shape[d]):
                raise AttributeOutOfRange(
                    f"slice bounds [{s}:{l}] invalid for extent {src.shape[d]} at dim {d}")
            dims.append(-(-(l - s) // st))
        return TensorType(Shape(tuple(dims)), src.dtype)

    if isinstance(op, Concat):
        if n < 1:
            raise ShapeMismatch("concat needs at least one operand")
        parts = [_tensor(t, "concat operand") for t in operand_types]
        _same_dtype(parts, "concat")
        rank = parts[0].shape.rank
        if any(p.shape.rank != rank for p in parts):
            raise ShapeMismatch("concat operands differ in rank")
        if not (0 <= op.dim < rank):
            raise AttributeOutOfRange(f"concat dim {op.dim} out of range for rank {rank}")
        for d in range(rank):
            if d != op.dim and len({p.shape[d] for p in parts}) != 1:
                raise ShapeMismatch(f"concat operands differ at non-concat dim {d}")
        dims = list(parts[0].shape.dims)
        dims[op.dim] = sum(p.shape[op.dim] for p in parts)
        return TensorType(Shape(tuple(dims)), parts[0].dtype)

    if isinstance(op, TopK):
        _check_arity(op, n, 1)
        src = _tensor(operand_types[0], "top_k operand")
        if not (0 <= op.dim < src.shape.rank):
            raise AttributeOutOfRange(f"top_k dim {op.dim} out of range for {src.shape}")
        if not (1 <= op.k <= src.shape[op.dim]):
            raise AttributeOutOfRange(f"top_k k={op.k} invalid for extent {src.shape[op.dim]}")
        out = TensorType(src.shape.replace_dim(op.dim, op.k), src.dtype)
        return TupleType((out, out))

    if isinstance(op, TriangularSolve):
        _check_arity(op, n, 2)
        a = _tensor(operand_types[0], "triangular_solve matrix")
        b = _tensor(operand_types[1], "triangular_solve rhs")
        _same_dtype((a, b), "triangular_solve")
        if a.shape.rank < 2 or b.shape.rank != a.shape.rank:
            raise ShapeMismatch("triangular_solve operands must share rank >= 2")
        if a.shape[-1] != a.shape[-2]:
            raise ShapeMismatch(f"triangular matrix {a.shape} is not square")
        if b.shape[-2] != a.shape[-1]:
            raise ShapeMismatch(f"rhs rows {b.shape[-2]} do not match matrix size {a.shape[-1]}")
        if a.shape.dims[:-2] != b.shape.dims[:-2]:
            raise ShapeMismatch("triangular_solve batch dims differ")
        return b

    if isinstance(op, DynamicSlice):
        if n < 1:
            raise ShapeMismatch("dynamic_slice needs a source operand")
        src = _tensor(operand_types[0], "dynamic_slice operand")
        rank = src.shape.rank
        _check_arity(op, n, 1 + rank)
        if len(op.sizes) != rank:
            raise AttributeOutOfRange("dynamic_slice sizes must match operand rank")
        for d, sz in enumerate(op.sizes):
            if not (1 <= sz <= src.shape[d]):
                raise AttributeOutOfRange(
                    f"dynamic_slice size {sz} invalid for extent {src.shape[d]} at dim {d}")
        for i, t in enumerate(operand_types[1:]):
            start = _tensor(t, f"dynamic_slice start {i}")
            if start.shape.rank != 0 or start.dtype != src.dtype:
                raise ShapeMismatch(f"dynamic_slice start {i} must be a scalar of {src.dtype}")
        return TensorType(Shape(op.sizes), src.dtype)

    if isinstance(op, DynamicUpdateSlice):
        if n < 2:
            raise ShapeMismatch("dynamic_update_slice needs target and update")
        target = _tensor(operand_types[0], "dynamic_update_slice target")
        update = _tensor(operand_types[1], "dynamic_update_slice update")
        rank = target.shape.rank
        _check_arity(op, n, 2 + rank)
        _same_dtype((target, update), "dynamic_update_slice")
        if update.shape.rank != rank:
            raise ShapeMismatch("update rank differs from target rank")
        if any(update.shape[d] > target.shape[d] for d in range(rank)):
            raise ShapeMismatch(f"update {update.shape} exceeds target {target.shape}")
        for i, t in enumerate(operand_types[2:]):
            start = _tensor(t, f"dynamic_update_slice start {i}")
            if start.shape.rank != 0 or start.dtype != target.dtype:
                raise ShapeMismatch(f"dynamic_update_slice start {i} must be a scalar of {target.dtype}")
        return target

    if isinstance(op, While):
        carried = tuple(_tensor(t, "while carried value") for t in operand_types)
        for name, g in (("condition", op.cond), ("body", op.body)):
            if g.parameters != carried:
                raise ShapeMismatch(
                    f"while {name} graph signature {[str(p) for p in g.parameters]} does not "
                    f"match carried values {[str(c) for c in carried]}")
        cond_root = op.cond.root_instruction.type
        if not isinstance(cond_root, TensorType) or cond_root.shape.rank != 0:
            raise ShapeMismatch("while condition root must be a scalar")
        body_root = op.body.root_instruction.type
        if body_root != TupleType(carried):
            raise ShapeMismatch(
                f"while body root {body_root} does not preserve the carried tuple")
        return TupleType(carried)

    if isinstance(op, Tuple):
        return TupleType(tuple(_tensor(t, "tuple element") for t in operand_types))

    if isinstance(op, GetTupleElement):
        _check_arity(op, n, 1)
        src = operand_types[0]
        if not isinstance(src, TupleType):
            raise ShapeMismatch("get_tuple_element operand is not tuple-valued")
        if not (0 <= op.index < len(src.elements)):
            raise AttributeOutOfRange(
                f"tuple index {op.index} out of range for {len(src.elements)} elements")
        return src.elements[op.index]

    raise ShapeMismatch(f"unknown opcode {op!r}")


def infer_shape(op: OpKind, operand_shapes: Sequence[Shape],
                dtype: DType = DType.F64) -> Shape | tuple[Shape, ...]:
    """Shape-only inference; tuple-valued ops return a tuple of shapes."""
    result = infer_type(op, [TensorType(s, dtype) for s in operand_shapes])
    if isinstance(result, TupleType):
        return tuple(e.shape for e in result.elements)
    return result.shape


def _source_type(graph: Graph, instr: Instruction) -> VType | None:
    """Expected type for ops whose type is not derived from operands."""
    op = instr.op
    if isinstance(op, Parameter):
        if not (0 <= op.index < len(graph.parameters)):
            raise AttributeOutOfRange(
                f"parameter index {op.index} out of range for {len(graph.parameters)} parameters")
        return graph.parameters[op.index]
    if isinstance(op, Constant):
        return TensorType(Shape(op.value.shape), DType.from_np(op.value.dtype))
    if isinstance(op, Iota):
        if op.size < 0:
            raise AttributeOutOfRange("iota size must be non-negative")
        return TensorType(Shape((op.size,)), instr.dtype)
    return None


def validate(graph: Graph) -> list[Diagnostic]:
    """Structural checks; returns diagnostics (empty means valid), never mutates.

    Verifies SSA ordering, recorded types against re-inference, loop graph
    signatures, and that tuple-valued results are only consumed through
    get_tuple_element.
    """
    diags: list[Diagnostic] = []
    position = {iid: i for i, iid in enumerate(graph.instructions)}

    if graph.root not in graph.instructions:
        diags.append(Diagnostic(None, f"root %{graph.root} is not an instruction"))
        return diags

    seen_param_indices: set[int] = set()
    for instr in graph:
        for o in instr.operands:
            if o not in graph.instructions:
                diags.append(Diagnostic(instr.id, f"operand %{o} does not exist"))
            elif position[o] >= position[instr.id]:
                diags.append(Diagnostic(instr.id, f"operand %{o} does not precede its user"))

    if any(d for d in diags):
        return diags

    users = graph.users()
    for instr in graph:
        op = instr.op
        try:
            if isinstance(op, Parameter):
                if op.index in seen_param_indices:
                    diags.append(Diagnostic(instr.id, f"duplicate parameter index {op.index}"))
                seen_param_indices.add(op.index)
            expected = _source_type(graph, instr)
            if expected is None:
                expected = infer_type(op, [graph.instructions[o].type for o in instr.operands])
            if expected != instr.type:
                diags.append(Diagnostic(
                    instr.id, f"recorded type {instr.type} disagrees with inferred {expected}"))
        except (ShapeMismatch, AttributeOutOfRange, OverflowError) as exc:
            diags.append(Diagnostic(instr.id, str(exc)))
            continue

        if instr.is_tuple:
            for uid in users[instr.id]:
                if not isinstance(graph.instructions[uid].op, GetTupleElement):
                    diags.append(Diagnostic(
                        uid, f"tuple-valued %{instr.id} consumed by non-tuple-element op"))

        if isinstance(op, While):
            for sub in (op.cond, op.body):
                for d in validate(sub):
                    diags.append(Diagnostic(instr.id, f"[{sub.name}] {d}"))

    try:
        topological_order(graph)
    except CycleDetected as exc:
        diags.append(Diagnostic(None, str(exc)))

    return diags


def require_valid(graph: Graph) -> Graph:
    diags = validate(graph)
    if diags:
        raise InvalidGraph(graph.name, diags)
    return graph
