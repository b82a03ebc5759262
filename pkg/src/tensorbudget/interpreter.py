"""Reference evaluator with exact liveness-based memory accounting.

Execution follows the deterministic topological order.  Every buffer is freed
immediately after its last consumer runs, so the recorded peak is the peak of
an eager schedule, reproducible across runs.  The same engine runs in a dry
mode (no data, byte arithmetic only) to produce static peak estimates.

Accounting conventions that the passes rely on:
  * broadcasts are zero-copy views of their operand;
  * elementwise ops, dynamic updates and the like write in place when their
    operand buffer is exclusively owned and at its last use;
  * parameters are copied in at entry, counted live from the start, and
    never written.
Library-internal scratch (e.g. the sort workspace behind top_k) is outside
the buffer model and is not traced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ir import (
    Binary, Broadcast, Concat, Constant, Dot, DType, DynamicSlice,
    DynamicUpdateSlice, GetTupleElement, Graph, Instruction, Iota, Parameter,
    ReduceMax, ReduceSum, Shape, Slice, TensorType, TopK, Transpose,
    TriangularSolve, Tuple, TupleType, Unary, While, topological_order,
)



def _contig(a: np.ndarray) -> np.ndarray:
    """C-contiguous copy-if-needed that preserves 0-d shapes."""
    out = np.ascontiguousarray(a)
    return out.reshape(a.shape) if out.shape != a.shape else out

class EvaluationError(Exception):
    pass


class BudgetExceeded(RuntimeError):
    """An allocation would push live bytes over the configured budget."""

    def __init__(self, instruction: str, requested: int, live: int, trace: "MemoryTrace"):
        self.instruction = instruction
        self.requested = requested
        self.live = live
        self.trace = trace
        super().__init__(
            f"{instruction}: allocating {requested} bytes would exceed the budget "
            f"(live={live})")


@dataclass(frozen=True)
class MemoryEvent:
    instruction: str
    event: str          # "alloc" | "free"
    bytes: int
    live_after: int

    def as_row(self) -> str:
        return f"{self.instruction},{self.event},{self.bytes},{self.live_after}"


@dataclass
class MemoryTrace:
    events: list[MemoryEvent] = field(default_factory=list)
    peak_live_bytes: int = 0

    def to_csv(self) -> str:
        lines = ["instruction,event,bytes,live_after"]
        lines.extend(e.as_row() for e in self.events)
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TensorValue:
    """Concrete tensor: dense row-major buffer plus its shape and dtype."""

    array: np.ndarray

    def __post_init__(self):
        arr = _contig(self.array)
        DType.from_np(arr.dtype)
        object.__setattr__(self, "array", arr)

    @property
    def shape(self) -> Shape:
        return Shape(self.array.shape)

    @property
    def dtype(self) -> DType:
        return DType.from_np(self.array.dtype)

    @property
    def data(self) -> np.ndarray:
        return self.array


_UNARY_FNS = {
    "neg": np.negative, "exp": np.exp, "abs": np.abs, "square": np.square,
    "sqrt": np.sqrt, "reciprocal": np.reciprocal,
}
_BINARY_FNS = {
    "add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide,
    "pow": np.power, "max": np.maximum, "min": np.minimum,
}


class _Buffer:
    __slots__ = ("nbytes", "refs", "array", "readonly", "freed")

    def __init__(self, nbytes: int, array, readonly: bool = False):
        self.nbytes = nbytes
        self.refs = 1
        self.array = array
        self.readonly = readonly
        self.freed = False


class _TV:
    """A tensor value inside the engine: a buffer plus the array view of it.

    `exclusive` marks values that fully own their buffer (fresh allocations
    and in-place results); only those may be written in place.
    """

    __slots__ = ("buffer", "array", "exclusive")

    def __init__(self, buffer: _Buffer, array, exclusive: bool):
        self.buffer = buffer
        self.array = array
        self.exclusive = exclusive


class _Engine:
    def __init__(self, budget: int | None, dry: bool, poison: bool):
        self.budget = budget
        self.dry = dry
        self.poison = poison
        self.live = 0
        self.trace = MemoryTrace()

    # -- buffer lifecycle ----------------------------------------------------

    def alloc(self, nbytes: int, label: str, array=None, readonly: bool = False) -> _Buffer:
        if self.budget is not None and self.live + nbytes > self.budget:
            raise BudgetExceeded(label, nbytes, self.live, self.trace)
        self.live += nbytes
        self.trace.events.append(MemoryEvent(label, "alloc", nbytes, self.live))
        self.trace.peak_live_bytes = max(self.trace.peak_live_bytes, self.live)
        return _Buffer(nbytes, array, readonly)

    def retain(self, buf: _Buffer) -> None:
        buf.refs += 1

    def release(self, buf: _Buffer, label: str) -> None:
        buf.refs -= 1
        if buf.refs == 0:
            buf.freed = True
            self.live -= buf.nbytes
            self.trace.events.append(MemoryEvent(label, "free", buf.nbytes, self.live))
            if self.poison and buf.array is not None and not buf.readonly:
                buf.array.fill(np.nan)

    def release_value(self, value, label: str) -> None:
        if isinstance(value, list):
            for tv in value:
                self.release(tv.buffer, label)
        else:
            self.release(value.buffer, label)

    def retain_value(self, value):
        if isinstance(value, list):
            for tv in value:
                self.retain(tv.buffer)
        else:
            self.retain(value.buffer)

    # -- helpers -------------------------------------------------------------

    def fresh(self, ttype: TensorType, label: str, array=None) -> _TV:
        buf = self.alloc(ttype.byte_size, label, array)
        return _TV(buf, array, exclusive=True)

    def can_write_in_place(self, tv: _TV, remaining_uses: int) -> bool:
        return (tv.exclusive and remaining_uses == 1 and tv.buffer.refs == 1
                and not tv.buffer.readonly)

    # -- graph execution ------------------------------------------------------

    def run_graph(self, graph: Graph, args: list, consume_args: bool):
        """Executes a graph over argument values; returns the root value with
        ownership transferred to the caller.

        With consume_args=True the arguments' references are handed over to
        their parameter instructions (an in-place-eligible argument stays
        in-place-eligible inside the graph); unused arguments are released.
        """
        order = topological_order(graph)
        uses: dict[int, int] = {iid: 0 for iid in order}
        uses[graph.root] += 1
        in_order = set(order)
        for iid in order:
            for o in graph.instructions[iid].operands:
                if o in in_order:
                    uses[o] += 1

        values: dict[int, object] = {}
        claimed: set[int] = set()
        for iid in order:
            instr = graph.instructions[iid]
            label = f"{graph.name}/%{iid}"
            if isinstance(instr.op, Parameter):
                tv = args[instr.op.index]
                if consume_args and instr.op.index not in claimed:
                    claimed.add(instr.op.index)
                    values[iid] = tv
                else:
                    self.retain(tv.buffer)
                    values[iid] = _TV(tv.buffer, tv.array, tv.exclusive)
            else:
                values[iid] = self._execute(graph, instr, label, values, uses)
            for o in instr.operands:
                uses[o] -= 1
                if uses[o] == 0:
                    self.release_value(values.pop(o), f"{graph.name}/%{o}")

        root_value = values.pop(graph.root)
        for iid, value in values.items():
            self.release_value(value, f"{graph.name}/%{iid}")
        if consume_args:
            for index, tv in enumerate(args):
                if index not in claimed:
                    self.release(tv.buffer, f"{graph.name}/arg{index}")
        return root_value

    # -- single instruction ----------------------------------------------------

    def _execute(self, graph: Graph, instr: Instruction, label: str,
                 values: dict, uses: dict[int, int]):
        op = instr.op
        operand_tvs = [values[o] for o in instr.operands]

        if isinstance(op, Constant):
            arr = None if self.dry else op.value.astype(op.value.dtype, copy=True)
            return self.fresh(instr.type, label, arr)

        if isinstance(op, Iota):
            arr = None if self.dry else np.arange(op.size, dtype=instr.dtype.np_dtype)
            return self.fresh(instr.type, label, arr)

        if isinstance(op, Unary):
            src = operand_tvs[0]
            if self.can_write_in_place(src, uses[instr.operands[0]]):
                self.retain(src.buffer)
                arr = None if self.dry else _UNARY_FNS[op.op](src.array, out=src.array)
                return _TV(src.buffer, arr, exclusive=True)
            tv = self.fresh(instr.type, label)
            if not self.dry:
                tv.array = _UNARY_FNS[op.op](src.array)
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, Binary):
            a, b = operand_tvs
            rem_a = uses[instr.operands[0]]
            rem_b = uses[instr.operands[1]]
            target = None
            if self.can_write_in_place(a, rem_a):
                target = a
            elif instr.operands[0] != instr.operands[1] and self.can_write_in_place(b, rem_b):
                target = b
            if target is not None:
                self.retain(target.buffer)
                arr = None
                if not self.dry:
                    arr = _BINARY_FNS[op.op](a.array, b.array, out=target.array)
                return _TV(target.buffer, arr, exclusive=True)
            tv = self.fresh(instr.type, label)
            if not self.dry:
                tv.array = _BINARY_FNS[op.op](a.array, b.array)
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, Broadcast):
            src = operand_tvs[0]
            self.retain(src.buffer)
            arr = None
            if not self.dry:
                view = src.array
                for d in range(instr.shape.rank):
                    if d not in op.mapped_dims:
                        view = np.expand_dims(view, d)
                arr = np.broadcast_to(view, instr.shape.dims)
            return _TV(src.buffer, arr, exclusive=False)

        if isinstance(op, (ReduceSum, ReduceMax)):
            src = operand_tvs[0]
            tv = self.fresh(instr.type, label)
            if not self.dry:
                fn = np.sum if isinstance(op, ReduceSum) else np.max
                tv.array = np.asarray(fn(src.array, axis=tuple(op.dims)),
                                      dtype=src.array.dtype)
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, Dot):
            a, b = operand_tvs
            tv = self.fresh(instr.type, label)
            if not self.dry:
                tv.array = _dot(op, a.array, b.array)
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, Transpose):
            src = operand_tvs[0]
            tv = self.fresh(instr.type, label)
            if not self.dry:
                tv.array = _contig(np.transpose(src.array, op.perm))
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, Slice):
            src = operand_tvs[0]
            tv = self.fresh(instr.type, label)
            if not self.dry:
                idx = tuple(slice(s, l, st)
                            for s, l, st in zip(op.starts, op.limits, op.strides))
                tv.array = _contig(src.array[idx])
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, Concat):
            tv = self.fresh(instr.type, label)
            if not self.dry:
                tv.array = np.concatenate([t.array for t in operand_tvs], axis=op.dim)
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, DynamicSlice):
            src = operand_tvs[0]
            tv = self.fresh(instr.type, label)
            if not self.dry:
                starts = _clamped_starts(operand_tvs[1:], src.array.shape, op.sizes)
                idx = tuple(slice(s, s + sz) for s, sz in zip(starts, op.sizes))
                tv.array = _contig(src.array[idx])
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, DynamicUpdateSlice):
            target, update = operand_tvs[0], operand_tvs[1]
            update_shape = graph.instructions[instr.operands[1]].shape.dims
            if self.can_write_in_place(target, uses[instr.operands[0]]):
                self.retain(target.buffer)
                out = _TV(target.buffer, target.array, exclusive=True)
            else:
                out = self.fresh(instr.type, label)
                if not self.dry:
                    out.array = target.array.copy()
                    out.buffer.array = out.array
            if not self.dry:
                starts = _clamped_starts(operand_tvs[2:], out.array.shape, update_shape)
                idx = tuple(slice(s, s + sz) for s, sz in zip(starts, update_shape))
                out.array[idx] = update.array
            return out

        if isinstance(op, TopK):
            src = operand_tvs[0]
            vals_t, idx_t = instr.type.elements
            vals_tv = self.fresh(vals_t, label)
            idx_tv = self.fresh(idx_t, label)
            if not self.dry:
                arr = src.array
                key = -arr if op.largest else arr
                # Deliberately a full sort: ties resolve to the lower index and
                # the baseline cost model stays honest.
                order = np.argsort(key, axis=op.dim, kind="stable")
                head = tuple(slice(0, op.k) if d == op.dim else slice(None)
                             for d in range(arr.ndim))
                take = order[head]
                vals_tv.array = _contig(
                    np.take_along_axis(arr, take, axis=op.dim))
                idx_tv.array = _contig(take.astype(arr.dtype))
                vals_tv.buffer.array = vals_tv.array
                idx_tv.buffer.array = idx_tv.array
            return [vals_tv, idx_tv]

        if isinstance(op, TriangularSolve):
            a, b = operand_tvs
            tv = self.fresh(instr.type, label)
            if not self.dry:
                tv.array = _triangular_solve(a.array, b.array, op.lower)
                tv.buffer.array = tv.array
            return tv

        if isinstance(op, Tuple):
            out = []
            for t in operand_tvs:
                self.retain(t.buffer)
                out.append(_TV(t.buffer, t.array, t.exclusive))
            return out

        if isinstance(op, GetTupleElement):
            element = operand_tvs[0][op.index]
            self.retain(element.buffer)
            return _TV(element.buffer, element.array, element.exclusive)

        if isinstance(op, While):
            return self._execute_while(graph, instr, operand_tvs)

        raise EvaluationError(f"no evaluator for opcode {op!r}")

    def _execute_while(self, graph: Graph, instr: Instruction, operand_tvs):
        op = instr.op
        state = []
        for tv in operand_tvs:
            self.retain(tv.buffer)
            state.append(_TV(tv.buffer, tv.array, tv.exclusive))

        if self.dry:
            trips = _static_trip_count(graph, instr)
            for _ in range(min(trips, 2)):
                state = self.run_graph(op.body, state, consume_args=True)
            return state

        while True:
            cond = self.run_graph(op.cond, state, consume_args=False)
            keep_going = float(cond.array) > 0.0
            self.release(cond.buffer, f"{op.cond.name}/root")
            if not keep_going:
                return state
            state = self.run_graph(op.body, state, consume_args=True)


def _clamped_starts(start_tvs, target_shape, sizes) -> list[int]:
    starts = []
    for tv, extent, size in zip(start_tvs, target_shape, sizes):
        s = int(round(float(tv.array)))
        starts.append(min(max(s, 0), extent - size))
    return starts


def _dot(op: Dot, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if (not op.lhs_batch and len(op.lhs_contracting) == 1
            and op.lhs_contracting[0] == a.ndim - 1 and op.rhs_contracting[0] == 0):
        return _contig(np.matmul(a, b))
    letters = "abcdefghijklmnopqrstuvwxyz"
    pos = iter(letters)
    lhs_sub = [""] * a.ndim
    rhs_sub = [""] * b.ndim
    out_sub = []
    for lb, rb in zip(op.lhs_batch, op.rhs_batch):
        c = next(pos)
        lhs_sub[lb] = rhs_sub[rb] = c
        out_sub.append(c)
    for lc, rc in zip(op.lhs_contracting, op.rhs_contracting):
        c = next(pos)
        lhs_sub[lc] = rhs_sub[rc] = c
    for d in range(a.ndim):
        if not lhs_sub[d]:
            lhs_sub[d] = next(pos)
            out_sub.append(lhs_sub[d])
    for d in range(b.ndim):
        if not rhs_sub[d]:
            rhs_sub[d] = next(pos)
            out_sub.append(rhs_sub[d])
    spec = f"{''.join(lhs_sub)},{''.join(rhs_sub)}->{''.join(out_sub)}"
    return _contig(np.einsum(spec, a, b, optimize=True))


def _triangular_solve(a: np.ndarray, b: np.ndarray, lower: bool) -> np.ndarray:
    n = a.shape[-1]
    k = b.shape[-1]
    a2 = a.reshape(-1, n, n)
    b2 = b.reshape(-1, n, k)
    out = np.empty_like(b2)
    rows = range(n) if lower else range(n - 1, -1, -1)
    for batch in range(a2.shape[0]):
        m, rhs, x = a2[batch], b2[batch], out[batch]
        for i in rows:
            if lower:
                acc = m[i, :i] @ x[:i] if i else 0.0
            else:
                acc = m[i, i + 1:] @ x[i + 1:] if i < n - 1 else 0.0
            x[i] = (rhs[i] - acc) / m[i, i]
    return out.reshape(b.shape)


def _static_trip_count(graph: Graph, instr: Instruction) -> int:
    """Trip count of the canonical counter loop: condition `limit - counter`
    with a constant limit and constant initial counter.  Falls back to 2
    (enough to reach the steady-state allocation pattern) otherwise."""
    op = instr.op
    root = op.cond.root_instruction
    if not (isinstance(root.op, Binary) and root.op.op == "sub"):
        return 2
    limit_instr = op.cond.instructions[root.operands[0]]
    counter_instr = op.cond.instructions[root.operands[1]]
    if not (isinstance(limit_instr.op, Constant) and limit_instr.shape.rank == 0):
        return 2
    if not isinstance(counter_instr.op, Parameter):
        return 2
    init_id = instr.operands[counter_instr.op.index]
    init_instr = graph.instructions[init_id]
    if not (isinstance(init_instr.op, Constant) and init_instr.shape.rank == 0):
        return 2
    limit = float(limit_instr.op.value)
    init = float(init_instr.op.value)
    return max(0, math.ceil(limit - init))


def _copy_out(value) -> TensorValue | tuple[TensorValue, ...]:
    if isinstance(value, list):
        return tuple(TensorValue(tv.array.copy()) for tv in value)
    return TensorValue(value.array.copy())


def evaluate(graph: Graph, inputs: Sequence[np.ndarray | TensorValue],
             budget: int | None = None, *, poison_freed: bool = False,
             ) -> tuple[TensorValue | tuple[TensorValue, ...], MemoryTrace]:
    """Evaluates a graph on concrete inputs.

    Returns the root value (a tuple of values when the root is tuple-valued)
    together with the memory trace of the run.  Raises BudgetExceeded as soon
    as an allocation would push live bytes over `budget`.
    """
    if len(inputs) != len(graph.parameters):
        raise EvaluationError(
            f"graph {graph.name!r} takes {len(graph.parameters)} inputs, got {len(inputs)}")

    engine = _Engine(budget, dry=False, poison=poison_freed)
    args = []
    for i, (raw, expected) in enumerate(zip(inputs, graph.parameters)):
        arr = raw.array if isinstance(raw, TensorValue) else np.asarray(raw)
        if Shape(arr.shape) != expected.shape or DType.from_np(arr.dtype) != expected.dtype:
            raise EvaluationError(
                f"input {i} is {arr.dtype}{list(arr.shape)}, expected "
                f"{expected.dtype}{expected.shape}")
        arr = _contig(arr).copy()
        buf = engine.alloc(expected.byte_size, f"{graph.name}/param{i}", arr,
                           readonly=True)
        args.append(_TV(buf, arr, exclusive=False))

    root_value = engine.run_graph(graph, args, consume_args=True)
    outputs = _copy_out(root_value)
    engine.release_value(root_value, f"{graph.name}/root")
    return outputs, engine.trace


def estimate_peak_memory(graph: Graph) -> int:
    """Static peak of the same schedule `evaluate` uses, without touching data.

    Exact for loop-free graphs and for counter loops with static trip counts
    (iterations beyond the second repeat the steady-state allocation pattern).
    """
    engine = _Engine(budget=None, dry=True, poison=False)
    args = []
    for i, expected in enumerate(graph.parameters):
        buf = engine.alloc(expected.byte_size, f"{graph.name}/param{i}", None,
                           readonly=True)
        args.append(_TV(buf, None, exclusive=False))
    root_value = engine.run_graph(graph, args, consume_args=True)
    engine.release_value(root_value, f"{graph.name}/root")
    return engine.trace.peak_live_bytes
