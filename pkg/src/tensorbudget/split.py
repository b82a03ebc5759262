"""Threshold-driven graph splitting: oversized operands of reducing ops are
chunked along a splittable dimension and the producing subgraph is rewritten
into a counter loop over slices.

The traversal looks at dot / reduce / top-k roots whose own output is small
but whose operand is at or above the size threshold.  The region between the
operand's producers and the root is cloned into a loop body that re-runs the
producing ops on one slice per iteration; partial results land in an
accumulator either by offset writes (free-dimension splits) or by a running
add/max (contracted- and reduced-dimension splits, ascending iteration order,
so results are deterministic).  Remainders run as one statically-shaped
epilogue step after the loop rather than as a dynamic-extent iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .builder import GraphBuilder, copy_instruction, dead_code_eliminate, rebuild
from .inference import require_valid
from .ir import (
    Binary, Broadcast, Concat, Constant, Dot, DType, Graph, GetTupleElement,
    Instruction, Iota, Parameter, ReduceMax, ReduceSum, Shape, Slice,
    TensorType, TopK, Transpose, TriangularSolve, Tuple, TupleType, Unary,
    While, topological_order,
)


class UnsplittableCandidate(Exception):
    """Even a single-index slice of the operand exceeds the split size."""


@dataclass(frozen=True)
class SplitDiagnostic:
    instruction: int
    reason: str


_LEAF_OPS = (Parameter, Constant, Iota)
_ROOT_OPS = (Dot, ReduceSum, ReduceMax, TopK)


def splittable_dims(graph: Graph, instr: Instruction, operand_index: int) -> frozenset[int]:
    """Dimensions of the given operand along which the op acts independently,
    i.e. slicing the operand first commutes with the op."""
    op = instr.op
    operand = graph.instructions[instr.operands[operand_index]]
    if operand.is_tuple:
        return frozenset()
    rank = operand.shape.rank

    if isinstance(op, (Unary, Binary, Transpose, Broadcast)):
        return frozenset(range(rank))
    if isinstance(op, (ReduceSum, ReduceMax)):
        return frozenset(range(rank)) - set(op.dims)
    if isinstance(op, Dot):
        if operand_index == 0:
            used = set(op.lhs_contracting)
        else:
            used = set(op.rhs_contracting)
        return frozenset(range(rank)) - used
    if isinstance(op, Slice):
        out = set()
        for d in range(rank):
            if (op.starts[d], op.limits[d], op.strides[d]) == (0, operand.shape[d], 1):
                out.add(d)
        return frozenset(out)
    if isinstance(op, Concat):
        return frozenset(range(rank)) - {op.dim}
    if isinstance(op, TriangularSolve):
        return frozenset(range(rank - 2))
    if isinstance(op, TopK):
        return frozenset(range(rank)) - {op.dim}
    # while / dynamic slice and update / tuple plumbing: opaque
    return frozenset()


def _operand_dim_map(graph: Graph, instr: Instruction,
                     result_dim: int) -> list[tuple[int, int]] | None:
    """How a slice of `instr`'s result along `result_dim` pushes onto its
    operands.

    Returns (operand_position, operand_dim) pairs for the operands that must
    be sliced; operands absent from the list are consumed whole.  None means
    slicing cannot be pushed through this op along that dimension.
    """
    op = instr.op
    d = result_dim
    if isinstance(op, Unary):
        return [(0, d)]
    if isinstance(op, Binary):
        return [(0, d), (1, d)]
    if isinstance(op, Broadcast):
        if d in op.mapped_dims:
            return [(0, op.mapped_dims.index(d))]
        return []
    if isinstance(op, (ReduceSum, ReduceMax)):
        operand_rank = graph.instructions[instr.operands[0]].shape.rank
        kept = [i for i in range(operand_rank) if i not in op.dims]
        return [(0, kept[d])]
    if isinstance(op, Dot):
        lhs = graph.instructions[instr.operands[0]].shape
        rhs = graph.instructions[instr.operands[1]].shape
        lhs_free = [i for i in range(lhs.rank)
                    if i not in op.lhs_batch and i not in op.lhs_contracting]
        rhs_free = [i for i in range(rhs.rank)
                    if i not in op.rhs_batch and i not in op.rhs_contracting]
        nb = len(op.lhs_batch)
        if d < nb:
            return [(0, op.lhs_batch[d]), (1, op.rhs_batch[d])]
        if d < nb + len(lhs_free):
            return [(0, lhs_free[d - nb])]
        return [(1, rhs_free[d - nb - len(lhs_free)])]
    if isinstance(op, Transpose):
        return [(0, op.perm[d])]
    if isinstance(op, Slice):
        extent = graph.instructions[instr.operands[0]].shape[d]
        if (op.starts[d], op.limits[d], op.strides[d]) == (0, extent, 1):
            return [(0, d)]
        return None
    if isinstance(op, Concat):
        if d == op.dim:
            return None
        return [(i, d) for i in range(len(instr.operands))]
    if isinstance(op, TriangularSolve):
        rank = instr.shape.rank
        if d < rank - 2:
            return [(0, d), (1, d)]
        return None
    return None


@dataclass(frozen=True)
class _Region:
    dim: int
    ops: Mapping[int, int]           # in-region instruction -> traced result dim
    sliced_leaves: Mapping[int, int]  # leaf instruction -> dim sliced per iteration
    whole_inputs: frozenset[int]      # boundary values consumed whole
    producers: frozenset[int]


def _trace_region(graph: Graph, users: dict[int, list[int]], operand_id: int,
                  dim: int, threshold: int, root_id: int) -> _Region | None:
    ops: dict[int, int] = {}
    leaves: dict[int, int] = {}
    whole: set[int] = set()
    pending = [(operand_id, dim)]
    while pending:
        iid, d = pending.pop()
        if iid in ops or iid in leaves:
            if ops.get(iid, leaves.get(iid)) != d:
                return None  # the dim arrives inconsistently on two paths
            continue
        instr = graph.instructions[iid]
        if isinstance(instr.op, _LEAF_OPS):
            if instr.byte_size > threshold:
                return None  # producer inputs must already be small
            leaves[iid] = d
            continue
        mapping = _operand_dim_map(graph, instr, d)
        if mapping is None:
            return None
        ops[iid] = d
        by_pos = dict(mapping)
        for pos, o in enumerate(instr.operands):
            if pos in by_pos:
                pending.append((o, by_pos[pos]))
            else:
                whole.add(o)

    if not ops:
        return None  # the oversized operand is itself a leaf; nothing to loop
    if whole & set(ops):
        return None  # a replaced op is also needed whole; its full value is gone
    for iid in whole:
        if graph.instructions[iid].byte_size > threshold:
            return None
    region_and_root = set(ops) | {root_id}
    for iid in ops:
        if any(u not in region_and_root for u in users[iid]):
            return None  # shared with consumers that keep the full tensor alive
    producers = frozenset(
        iid for iid, _ in ops.items()
        if all(o not in ops for o in graph.instructions[iid].operands))
    return _Region(dim, ops, leaves, frozenset(whole), producers)


@dataclass(frozen=True)
class SplitCandidate:
    root: int
    operand_to_split: int
    operand_positions: tuple[int, ...]
    split_dims: frozenset[int]
    split_producers: frozenset[int]
    reduce_dims: frozenset[int]       # dims accumulated by running add/max
    regions: Mapping[int, _Region]

    def region(self, dim: int) -> _Region:
        return self.regions[dim]


def _candidate_dims(root: Instruction, positions: tuple[int, ...],
                    operand_rank: int) -> tuple[set[int], set[int]]:
    """(sliceable dims, subset needing running accumulation) of the split
    operand with respect to the root op."""
    op = root.op
    if isinstance(op, Dot):
        if len(positions) == 2:
            # Same instruction on both sides: only identically-positioned
            # batch dims decompose the output.
            dims = {lb for lb, rb in zip(op.lhs_batch, op.rhs_batch) if lb == rb}
            return dims, set()
        contracting = op.lhs_contracting if positions[0] == 0 else op.rhs_contracting
        batch = op.lhs_batch if positions[0] == 0 else op.rhs_batch
        free = set(range(operand_rank)) - set(contracting) - set(batch)
        return free | set(batch) | set(contracting), set(contracting)
    if isinstance(op, (ReduceSum, ReduceMax)):
        return set(range(operand_rank)), set(op.dims)
    if isinstance(op, TopK):
        return set(range(operand_rank)) - {op.dim}, set()
    raise ValueError(f"{op.kind} is not a splitting root")


def find_candidate(graph: Graph, root_id: int, config) -> SplitCandidate | None:
    """Decides whether the region feeding `root_id` can be split, mirroring
    the size checks of the loop-splitting traversal.

    Returns None when the root's own output is oversized (the shrink must
    happen further downstream), when no operand is oversized, when two
    distinct operands are, or when no dimension admits a consistent region.
    """
    root = graph.instructions[root_id]
    if not isinstance(root.op, _ROOT_OPS):
        return None
    threshold = config.tensor_size_threshold
    if root.byte_size >= threshold:
        return None

    seen: dict[int, list[int]] = {}
    for pos, oid in enumerate(root.operands):
        seen.setdefault(oid, []).append(pos)
    oversized = [oid for oid in seen
                 if graph.instructions[oid].byte_size > threshold]
    if not oversized:
        return None
    if len(oversized) > 1:
        return None
    target = oversized[0]
    if graph.instructions[target].is_tuple:
        return None
    positions = tuple(seen[target])

    users = graph.users()
    dims, reduce_dims = _candidate_dims(root, positions, graph.instructions[target].shape.rank)
    regions: dict[int, _Region] = {}
    for d in sorted(dims):
        region = _trace_region(graph, users, target, d, threshold, root_id)
        if region is None:
            continue
        if isinstance(root.op, Dot) and len(positions) == 1:
            other = root.operands[1 - positions[0]]
            if other in region.ops:
                continue  # the loop would consume its own sliced region whole
        regions[d] = region
    if not regions:
        return None
    producers = frozenset().union(*(r.producers for r in regions.values()))
    return SplitCandidate(
        root=root_id, operand_to_split=target, operand_positions=positions,
        split_dims=frozenset(regions), split_producers=producers,
        reduce_dims=frozenset(reduce_dims) & frozenset(regions), regions=regions)


@dataclass(frozen=True)
class SplitPlan:
    candidate: SplitCandidate
    best_split_dim: int
    split_size: int
    trip_count: int
    remainder: int


def plan_split(candidate: SplitCandidate, config, graph: Graph) -> SplitPlan:
    """Chooses the largest-extent splittable dim (ties to the lowest index)
    and the largest slice extent whose bytes fit the split size."""
    operand = graph.instructions[candidate.operand_to_split]
    shape = operand.shape
    best = max(sorted(candidate.split_dims), key=lambda d: shape[d])
    extent = shape[best]
    per_index = (shape.element_count // extent) * operand.dtype.byte_size
    split_size = config.tensor_split_size // per_index
    if split_size < 1:
        raise UnsplittableCandidate(
            f"%{candidate.operand_to_split}: one slice along dim {best} is "
            f"{per_index} bytes, above the split size {config.tensor_split_size}")
    split_size = min(split_size, extent)
    trip_count = -(-extent // split_size)
    remainder = extent % split_size
    return SplitPlan(candidate, best, split_size, trip_count, remainder)


# ---------------------------------------------------------------------------
# Loop construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Accum:
    mode: str           # "dus" | "add" | "max"
    out_dim: int | None  # result dim receiving offset writes (dus only)


def _root_accumulation(graph: Graph, root: Instruction,
                       positions: tuple[int, ...], dim: int) -> list[_Accum]:
    """How partial root results combine: one entry per root output element."""
    op = root.op
    if isinstance(op, Dot):
        if len(positions) == 2:
            return [_Accum("dus", op.lhs_batch.index(dim))]
        p = positions[0]
        contracting = op.lhs_contracting if p == 0 else op.rhs_contracting
        if dim in contracting:
            return [_Accum("add", None)]
        batch = op.lhs_batch if p == 0 else op.rhs_batch
        if dim in batch:
            return [_Accum("dus", batch.index(dim))]
        lhs = graph.instructions[root.operands[0]].shape
        rhs = graph.instructions[root.operands[1]].shape
        lhs_free = [i for i in range(lhs.rank)
                    if i not in op.lhs_batch and i not in op.lhs_contracting]
        rhs_free = [i for i in range(rhs.rank)
                    if i not in op.rhs_batch and i not in op.rhs_contracting]
        if p == 0:
            return [_Accum("dus", len(op.lhs_batch) + lhs_free.index(dim))]
        return [_Accum("dus", len(op.lhs_batch) + len(lhs_free) + rhs_free.index(dim))]
    if isinstance(op, (ReduceSum, ReduceMax)):
        if dim in op.dims:
            return [_Accum("add" if isinstance(op, ReduceSum) else "max", None)]
        kept_before = len([i for i in op.dims if i < dim])
        return [_Accum("dus", dim - kept_before)]
    if isinstance(op, TopK):
        return [_Accum("dus", dim), _Accum("dus", dim)]
    raise ValueError(f"{op.kind} is not a splitting root")


def _other_side_slice(root: Instruction, positions: tuple[int, ...],
                      dim: int) -> tuple[int, int] | None:
    """(operand_position, operand_dim) of the non-split dot operand that must
    be sliced in step with the split one (contracted and batch dims)."""
    op = root.op
    if not isinstance(op, Dot) or len(positions) != 1:
        return None
    p = positions[0]
    if p == 0:
        if dim in op.lhs_contracting:
            return 1, op.rhs_contracting[op.lhs_contracting.index(dim)]
        if dim in op.lhs_batch:
            return 1, op.rhs_batch[op.lhs_batch.index(dim)]
    else:
        if dim in op.rhs_contracting:
            return 0, op.lhs_contracting[op.rhs_contracting.index(dim)]
        if dim in op.rhs_batch:
            return 0, op.lhs_batch[op.rhs_batch.index(dim)]
    return None


def _clone_region_op(nb: GraphBuilder, instr: Instruction, operands: list[int],
                     local_dim: int, extent: int) -> int:
    """Re-emits a region op with its traced result dim shrunk to `extent`."""
    op = instr.op
    if isinstance(op, Broadcast):
        dims = list(op.result_dims)
        dims[local_dim] = extent
        op = Broadcast(tuple(dims), op.mapped_dims)
    elif isinstance(op, Slice):
        starts = list(op.starts)
        limits = list(op.limits)
        starts[local_dim] = 0
        limits[local_dim] = extent
        op = Slice(tuple(starts), tuple(limits), op.strides)
    return nb.emit(op, operands)


def _root_output_types(root: Instruction) -> list[TensorType]:
    if isinstance(root.type, TupleType):
        return list(root.type.elements)
    return [root.type]


class _LoopAssembler:
    """Emits the while construct replacing one planned split."""

    def __init__(self, plan: SplitPlan, graph: Graph, nb: GraphBuilder,
                 env: dict[int, int]):
        self.plan = plan
        self.cand = plan.candidate
        self.graph = graph
        self.nb = nb
        self.env = env
        self.root = graph.instructions[self.cand.root]
        self.region = self.cand.region(plan.best_split_dim)
        self.operand = graph.instructions[self.cand.operand_to_split]
        self.dtype = self.operand.dtype
        self.accums = _root_accumulation(graph, self.root,
                                         self.cand.operand_positions,
                                         plan.best_split_dim)
        self.other = _other_side_slice(self.root, self.cand.operand_positions,
                                       plan.best_split_dim)
        invariants = set(self.region.sliced_leaves) | set(self.region.whole_inputs)
        if self.other is not None:
            invariants.add(self.root.operands[self.other[0]])
        if isinstance(self.root.op, Dot) and len(self.cand.operand_positions) == 1:
            other_id = self.root.operands[1 - self.cand.operand_positions[0]]
            invariants.add(other_id)
        self.invariants = sorted(invariants)
        self.out_types = _root_output_types(self.root)
        self.full_trips = (plan.trip_count if plan.remainder == 0
                           else plan.trip_count - 1)

    # carried layout: (counter, acc_0..acc_{A-1}, inv_0..inv_{L-1})

    def carried_types(self) -> list[TensorType]:
        types = [TensorType(Shape(()), self.dtype)]
        types.extend(self.out_types)
        types.extend(self.graph.instructions[i].type for i in self.invariants)
        return types

    def emit(self) -> list[int]:
        """Returns the new ids standing in for the root's output element(s)."""
        nb = self.nb
        cond = self._build_cond()
        body = self._build_body()

        counter0 = nb.constant(0.0, self.dtype)
        carried = [counter0]
        for acc, out_t in zip(self.accums, self.out_types):
            fill = -math.inf if acc.mode == "max" else 0.0
            carried.append(nb.scalar_broadcast(
                nb.constant(fill, self.dtype), out_t.shape.dims))
        carried.extend(self.env[i] for i in self.invariants)
        loop = nb.while_loop(cond, body, carried)
        results = [nb.get_tuple_element(loop, 1 + j)
                   for j in range(len(self.out_types))]
        if self.plan.remainder:
            results = self._emit_epilogue(results)
        return results

    def _build_cond(self) -> Graph:
        cb = GraphBuilder(f"{self.graph.name}.split{self.cand.root}.cond")
        counter = None
        for t in self.carried_types():
            pid = cb.param(t.shape, t.dtype)
            if counter is None:
                counter = pid
        limit = cb.constant(float(self.full_trips), self.dtype)
        return cb.build(cb.sub(limit, counter))

    def _build_body(self) -> Graph:
        bb = GraphBuilder(f"{self.graph.name}.split{self.cand.root}.body")
        params = [bb.param(t.shape, t.dtype) for t in self.carried_types()]
        counter = params[0]
        accs = params[1:1 + len(self.out_types)]
        inv_env = {iid: params[1 + len(self.out_types) + k]
                   for k, iid in enumerate(self.invariants)}

        offset = bb.mul(counter, bb.constant(float(self.plan.split_size), self.dtype))
        zero = bb.constant(0.0, self.dtype)

        partials = self._emit_partial(bb, inv_env, offset, zero,
                                      self.plan.split_size, dynamic=True)
        new_accs = []
        for acc_param, accum, partial in zip(accs, self.accums, partials):
            new_accs.append(self._combine(bb, acc_param, accum, partial,
                                          offset, zero))
        step = bb.add(counter, bb.constant(1.0, self.dtype))
        passthrough = [inv_env[i] for i in self.invariants]
        return bb.build(bb.tuple([step, *new_accs, *passthrough]))

    def _emit_partial(self, b: GraphBuilder, source_env: dict[int, int],
                      offset, zero, extent: int, dynamic: bool) -> list[int]:
        """Clones the region at one chunk and applies the root to it.

        With dynamic=True the chunk begins at the loop offset (DynamicSlice);
        otherwise static slices at the remainder offset are used.  Returns the
        per-output partial ids.
        """
        region = self.region
        chunk_env: dict[int, int] = {}
        leaf_slices: dict[int, int] = {}

        def slice_value(vid: int, dim: int, shape: Shape) -> int:
            sizes = list(shape.dims)
            sizes[dim] = extent
            if dynamic:
                starts = [offset if d == dim else zero for d in range(shape.rank)]
                return b.dynamic_slice(source_env[vid], starts, sizes)
            base = self.full_trips * self.plan.split_size
            starts = [base if d == dim else 0 for d in range(shape.rank)]
            limits = [base + extent if d == dim else shape[d]
                      for d in range(shape.rank)]
            return b.slice(source_env[vid], starts, limits)

        def sliced_form(oid: int) -> int:
            if oid in chunk_env:
                return chunk_env[oid]
            if oid not in leaf_slices:
                leaf = self.graph.instructions[oid]
                leaf_slices[oid] = slice_value(oid, region.sliced_leaves[oid],
                                               leaf.shape)
            return leaf_slices[oid]

        for instr in self.graph:
            if instr.id not in region.ops:
                continue
            # the same value can feed one position sliced and another whole
            by_pos = dict(_operand_dim_map(self.graph, instr,
                                           region.ops[instr.id]) or [])
            operands = [sliced_form(o) if pos in by_pos else source_env[o]
                        for pos, o in enumerate(instr.operands)]
            chunk_env[instr.id] = _clone_region_op(
                b, instr, operands, region.ops[instr.id], extent)

        # root over the chunk
        root_operands = []
        for pos, oid in enumerate(self.root.operands):
            if oid == self.cand.operand_to_split:
                root_operands.append(chunk_env[oid])
            elif self.other is not None and pos == self.other[0]:
                other_shape = self.graph.instructions[oid].shape
                root_operands.append(slice_value(oid, self.other[1], other_shape))
            else:
                root_operands.append(source_env[oid])
        partial = b.emit(self.root.op, root_operands)
        if isinstance(self.root.op, TopK):
            return [b.get_tuple_element(partial, 0), b.get_tuple_element(partial, 1)]
        return [partial]

    def _combine(self, b: GraphBuilder, acc: int, accum: _Accum, partial: int,
                 offset, zero) -> int:
        if accum.mode == "add":
            return b.add(acc, partial)
        if accum.mode == "max":
            return b.maximum(acc, partial)
        rank = b.type_of(acc).shape.rank
        starts = [offset if d == accum.out_dim else zero for d in range(rank)]
        return b.dynamic_update_slice(acc, partial, starts)

    def _emit_epilogue(self, results: list[int]) -> list[int]:
        """One statically-shaped remainder step after the loop."""
        nb = self.nb
        base = self.full_trips * self.plan.split_size
        partials = self._emit_partial(nb, self.env, None, None,
                                      self.plan.remainder, dynamic=False)
        combined = []
        for res, accum, partial in zip(results, self.accums, partials):
            if accum.mode == "add":
                combined.append(nb.add(res, partial))
            elif accum.mode == "max":
                combined.append(nb.maximum(res, partial))
            else:
                rank = nb.type_of(res).shape.rank
                starts = [
                    nb.constant(float(base) if d == accum.out_dim else 0.0, self.dtype)
                    for d in range(rank)]
                combined.append(nb.dynamic_update_slice(res, partial, starts))
        return combined


def build_while(plan: SplitPlan, graph: Graph) -> Graph:
    """Replaces the planned region and root with a counter loop over slices;
    the returned graph validates and computes the same values."""
    cand = plan.candidate
    region_ids = set(cand.region(plan.best_split_dim).ops)
    root = graph.instructions[cand.root]
    nb = GraphBuilder(graph.name)
    env: dict[int, int] = {}
    replacement: list[int] | None = None

    for instr in graph:
        if instr.id in region_ids:
            continue
        if instr.id == cand.root:
            replacement = _LoopAssembler(plan, graph, nb, env).emit()
            if not root.is_tuple:
                env[instr.id] = replacement[0]
            continue
        if (root.is_tuple and isinstance(instr.op, GetTupleElement)
                and instr.operands[0] == cand.root):
            env[instr.id] = replacement[instr.op.index]
            continue
        if isinstance(instr.op, Parameter):
            env[instr.id] = nb.param(instr.shape, instr.dtype)
            continue
        env[instr.id] = copy_instruction(nb, instr, env)

    if graph.root == cand.root and root.is_tuple:
        new_root = nb.tuple(replacement)
    else:
        new_root = env[graph.root]
    return require_valid(dead_code_eliminate(nb.build(new_root)))


def _scan_once(graph: Graph, config, diagnostics: list[SplitDiagnostic],
               skip: set[int]) -> Graph | None:
    """Applies the first applicable split; None when nothing fires."""
    for iid in topological_order(graph):
        if iid in skip:
            continue
        instr = graph.instructions[iid]
        if not isinstance(instr.op, _ROOT_OPS):
            continue
        cand = find_candidate(graph, iid, config)
        if cand is None:
            continue
        try:
            plan = plan_split(cand, config, graph)
        except UnsplittableCandidate as exc:
            diagnostics.append(SplitDiagnostic(iid, str(exc)))
            skip.add(iid)
            continue
        return build_while(plan, graph)
    return None


_MAX_APPLICATIONS = 100


def _fixpoint(graph: Graph, config, diagnostics: list[SplitDiagnostic]) -> Graph:
    skip: set[int] = set()
    for _ in range(_MAX_APPLICATIONS):
        new = _scan_once(graph, config, diagnostics, skip)
        if new is None:
            return graph
        graph = new
        skip.clear()
    raise RuntimeError("split pass did not reach a fixed point")


def split_pass(graph: Graph, config,
               diagnostics: list[SplitDiagnostic] | None = None) -> Graph:
    """Splits every splittable oversized region into a loop.

    Loop bodies produced by earlier applications are revisited once, so a
    body that still holds an oversized tensor gets one nested level of
    splitting; anything oversized after that is reported in `diagnostics`
    rather than failing the pass.
    """
    diags = diagnostics if diagnostics is not None else []
    graph = _fixpoint(graph, config, diags)

    body_updates = {}
    for instr in graph:
        if not isinstance(instr.op, While):
            continue
        new_body = _fixpoint(instr.op.body, config, diags)
        if new_body is not instr.op.body:
            body_updates[instr.id] = While(instr.op.cond, new_body)
    if body_updates:
        def swap(wid, op):
            return lambda nb, env: nb.emit(op, [env[o] for o in
                                                graph.instructions[wid].operands])
        graph = rebuild(graph, {wid: swap(wid, op)
                                for wid, op in body_updates.items()})

    for instr in graph:
        if instr.is_tuple or isinstance(instr.op, While):
            continue
        if instr.byte_size > config.tensor_size_threshold:
            diags.append(SplitDiagnostic(
                instr.id,
                f"{_fmt_bytes(instr.byte_size)} tensor remains above the "
                f"{_fmt_bytes(config.tensor_size_threshold)} threshold"))
    return graph


def _fmt_bytes(n: int) -> str:
    return f"{n}B"

