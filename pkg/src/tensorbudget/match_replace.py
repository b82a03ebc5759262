"""Pattern-directed rewrites that shrink known-inefficient subgraphs.

Two rules are implemented:

* pairwise squared Euclidean distance in broadcast form, whose rank-3
  difference tensor is replaced by row norms plus a contraction, dropping the
  largest intermediate from n*m*d to n*m elements;
* adding a scaled identity matrix to a square matrix, replaced by a loop of
  per-row scalar updates that never materialises the dense identity.

Matching is syntactic over a canonicalised graph: `mul(x, x)` becomes
`square(x)` and `add(a, neg(b))` becomes `sub(a, b)` first.

The expanded distance form trades the rank-3 intermediate for cancellation
error: for nearly coincident points the result can go slightly negative.
When every consumer is a sqrt the result is clamped at zero; otherwise raw
values are kept so naive and rewritten graphs stay comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .builder import GraphBuilder, rebuild
from .ir import (
    Binary, Broadcast, Constant, DType, Graph, GetTupleElement, Instruction,
    Iota, ReduceSum, Unary, While,
)


@dataclass(frozen=True)
class RewriteRule:
    name: str
    matcher: Callable[[Graph, int], object | None]
    builder: Callable[[GraphBuilder, dict, object], int]


def canonicalize(graph: Graph) -> Graph:
    """mul(x, x) -> square(x); add(a, neg(b)) -> sub(a, b)."""
    replacements = {}
    for instr in graph:
        op = instr.op
        if not isinstance(op, Binary):
            continue
        if op.op == "mul" and instr.operands[0] == instr.operands[1]:
            src = instr.operands[0]
            replacements[instr.id] = (
                lambda nb, env, _src=src: nb.square(env[_src]))
        elif op.op == "add":
            a, b = instr.operands
            b_instr = graph.instructions[b]
            a_instr = graph.instructions[a]
            if isinstance(b_instr.op, Unary) and b_instr.op.op == "neg":
                inner = b_instr.operands[0]
                replacements[instr.id] = (
                    lambda nb, env, _a=a, _i=inner: nb.sub(env[_a], env[_i]))
            elif isinstance(a_instr.op, Unary) and a_instr.op.op == "neg":
                inner = a_instr.operands[0]
                replacements[instr.id] = (
                    lambda nb, env, _b=b, _i=inner: nb.sub(env[_b], env[_i]))
    if not replacements:
        return graph
    return rebuild(graph, replacements)


def _single_user_chain(users: dict[int, list[int]], *ids: int) -> bool:
    return all(len(users[i]) == 1 for i in ids)


def _is_scalar_broadcast(graph: Graph, iid: int) -> int | None:
    """Returns the scalar operand id when `iid` broadcasts a rank-0 value."""
    instr = graph.instructions[iid]
    if isinstance(instr.op, Broadcast) and instr.op.mapped_dims == ():
        return instr.operands[0]
    return None


# ---------------------------------------------------------------------------
# Euclidean distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _DistanceMatch:
    root: int               # reduce_sum producing the [n, m] distances
    x: int                  # first rank-2 operand
    y: int                  # second rank-2 operand
    x_feature_dim: int      # operand dim contracted away (the shared one)
    y_feature_dim: int
    x_leads: bool           # x's free dim is output dim 0
    clamp: bool             # all consumers take sqrt


def _match_distance(graph: Graph, root_id: int,
                    users: dict[int, list[int]]) -> _DistanceMatch | None:
    root = graph.instructions[root_id]
    if not (isinstance(root.op, ReduceSum) and len(root.op.dims) == 1):
        return None
    sq = graph.instructions[root.operands[0]]
    if not (isinstance(sq.op, Unary) and sq.op.op == "square"):
        return None
    if sq.shape.rank != 3:
        return None
    diff = graph.instructions[sq.operands[0]]
    if not (isinstance(diff.op, Binary) and diff.op.op == "sub"):
        return None
    bx = graph.instructions[diff.operands[0]]
    by = graph.instructions[diff.operands[1]]
    if not (isinstance(bx.op, Broadcast) and isinstance(by.op, Broadcast)):
        return None
    if not _single_user_chain(users, sq.id, diff.id, bx.id, by.id):
        return None

    x = graph.instructions[bx.operands[0]]
    y = graph.instructions[by.operands[0]]
    if x.is_tuple or y.is_tuple or x.shape.rank != 2 or y.shape.rank != 2:
        return None
    reduce_dim = root.op.dims[0]
    if reduce_dim not in bx.op.mapped_dims or reduce_dim not in by.op.mapped_dims:
        return None
    x_free = [d for d in bx.op.mapped_dims if d != reduce_dim]
    y_free = [d for d in by.op.mapped_dims if d != reduce_dim]
    if len(x_free) != 1 or len(y_free) != 1 or x_free[0] == y_free[0]:
        return None

    consumers = users[root_id]
    clamp = bool(consumers) and all(
        isinstance(graph.instructions[u].op, Unary)
        and graph.instructions[u].op.op == "sqrt" for u in consumers)
    return _DistanceMatch(
        root=root_id, x=x.id, y=y.id,
        x_feature_dim=bx.op.mapped_dims.index(reduce_dim),
        y_feature_dim=by.op.mapped_dims.index(reduce_dim),
        x_leads=x_free[0] < y_free[0], clamp=clamp)


def _build_distance(nb: GraphBuilder, env: dict, m: _DistanceMatch,
                    out_dims: tuple[int, ...], dtype: DType) -> int:
    x, y = env[m.x], env[m.y]
    if m.x_leads:
        lhs, rhs = x, y
        lhs_feat, rhs_feat = m.x_feature_dim, m.y_feature_dim
    else:
        lhs, rhs = y, x
        lhs_feat, rhs_feat = m.y_feature_dim, m.x_feature_dim

    cross = nb.dot(lhs, rhs, (lhs_feat,), (rhs_feat,))
    lhs_norm = nb.reduce_sum(nb.square(lhs), (lhs_feat,))
    rhs_norm = nb.reduce_sum(nb.square(rhs), (rhs_feat,))
    norms = nb.add(nb.broadcast(lhs_norm, out_dims, (0,)),
                   nb.broadcast(rhs_norm, out_dims, (1,)))
    scale = nb.scalar_broadcast(nb.constant(-2.0, dtype), out_dims)
    result = nb.add(norms, nb.mul(scale, cross))
    if m.clamp:
        zero = nb.scalar_broadcast(nb.constant(0.0, dtype), out_dims)
        result = nb.maximum(zero, result)
    return result


def rewrite_euclidean_distance(graph: Graph) -> Graph:
    """Replaces broadcast-form pairwise squared distances with
    norms + contraction; graphs without the pattern pass through unchanged."""
    users = graph.users()
    replacements = {}
    for instr in graph:
        m = _match_distance(graph, instr.id, users)
        if m is None:
            continue
        out_dims = instr.shape.dims
        dtype = instr.dtype
        replacements[instr.id] = (
            lambda nb, env, _m=m, _d=out_dims, _t=dtype:
            _build_distance(nb, env, _m, _d, _t))
    if not replacements:
        return graph
    return rebuild(graph, replacements)


# ---------------------------------------------------------------------------
# Diagonal update
# ---------------------------------------------------------------------------

def build_identity(b: GraphBuilder, n: int, dtype: DType) -> int:
    """Canonical dense identity idiom: max(0, 1 - |row - col|) over iota
    broadcasts.  The diagonal rewrite recognises exactly this shape."""
    rows = b.broadcast(b.iota(n, dtype), (n, n), (0,))
    cols = b.broadcast(b.iota(n, dtype), (n, n), (1,))
    gap = b.abs(b.sub(rows, cols))
    one = b.scalar_broadcast(b.constant(1.0, dtype), (n, n))
    zero = b.scalar_broadcast(b.constant(0.0, dtype), (n, n))
    return b.maximum(zero, b.sub(one, gap))


def _is_constant_scalar_broadcast(graph: Graph, iid: int, value: float) -> bool:
    scalar = _is_scalar_broadcast(graph, iid)
    if scalar is None:
        return False
    op = graph.instructions[scalar].op
    return isinstance(op, Constant) and op.value.shape == () and float(op.value) == value


def _match_identity(graph: Graph, iid: int, users: dict[int, list[int]]) -> bool:
    ident = graph.instructions[iid]
    if not (isinstance(ident.op, Binary) and ident.op.op == "max"):
        return False
    zero_bc, body = ident.operands
    if not _is_constant_scalar_broadcast(graph, zero_bc, 0.0):
        zero_bc, body = body, zero_bc
        if not _is_constant_scalar_broadcast(graph, zero_bc, 0.0):
            return False
    sub1 = graph.instructions[body]
    if not (isinstance(sub1.op, Binary) and sub1.op.op == "sub"):
        return False
    one_bc, gap_id = sub1.operands
    if not _is_constant_scalar_broadcast(graph, one_bc, 1.0):
        return False
    gap = graph.instructions[gap_id]
    if not (isinstance(gap.op, Unary) and gap.op.op == "abs"):
        return False
    diff = graph.instructions[gap.operands[0]]
    if not (isinstance(diff.op, Binary) and diff.op.op == "sub"):
        return False
    rows = graph.instructions[diff.operands[0]]
    cols = graph.instructions[diff.operands[1]]
    for bc, dim in ((rows, 0), (cols, 1)):
        if not (isinstance(bc.op, Broadcast) and bc.op.mapped_dims == (dim,)):
            return False
        if not isinstance(graph.instructions[bc.operands[0]].op, Iota):
            return False
    if not _single_user_chain(users, body, gap_id, diff.id, rows.id, cols.id):
        return False
    return True


@dataclass(frozen=True)
class _DiagonalMatch:
    root: int       # the add
    matrix: int     # square matrix operand
    scalar: int     # rank-0 scale operand


def _match_diagonal(graph: Graph, root_id: int,
                    users: dict[int, list[int]]) -> _DiagonalMatch | None:
    root = graph.instructions[root_id]
    if not (isinstance(root.op, Binary) and root.op.op == "add"):
        return None
    if root.shape.rank != 2 or root.shape[0] != root.shape[1]:
        return None
    for matrix_id, product_id in (root.operands, root.operands[::-1]):
        product = graph.instructions[product_id]
        if not (isinstance(product.op, Binary) and product.op.op == "mul"):
            continue
        if not _single_user_chain(users, product_id):
            continue
        for scale_id, ident_id in (product.operands, product.operands[::-1]):
            scalar = _is_scalar_broadcast(graph, scale_id)
            if scalar is None:
                continue
            if not _match_identity(graph, ident_id, users):
                continue
            if len(users[ident_id]) != 1:
                continue
            return _DiagonalMatch(root=root_id, matrix=matrix_id, scalar=scalar)
    return None


def _build_diagonal_update(nb: GraphBuilder, env: dict, m: _DiagonalMatch,
                           n: int, dtype: DType) -> int:
    scalar_t = nb.type_of(env[m.scalar])
    matrix_t = nb.type_of(env[m.matrix])

    cb = GraphBuilder(f"{nb.name}.diag{m.root}.cond")
    ci = cb.param((), dtype)
    cb.param(matrix_t.shape, dtype)
    cb.param((), dtype)
    cond = cb.build(cb.sub(cb.constant(float(n), dtype), ci))

    bb = GraphBuilder(f"{nb.name}.diag{m.root}.body")
    bi = bb.param((), dtype)
    bm = bb.param(matrix_t.shape, dtype)
    bs = bb.param((), dtype)
    cell = bb.dynamic_slice(bm, [bi, bi], (1, 1))
    bumped = bb.add(cell, bb.scalar_broadcast(bs, (1, 1)))
    updated = bb.dynamic_update_slice(bm, bumped, [bi, bi])
    step = bb.add(bi, bb.constant(1.0, dtype))
    body = bb.build(bb.tuple([step, updated, bs]))

    start = nb.constant(0.0, dtype)
    loop = nb.while_loop(cond, body, [start, env[m.matrix], env[m.scalar]])
    return nb.get_tuple_element(loop, 1)


def rewrite_add_diagonal(graph: Graph) -> Graph:
    """Replaces add(M, scalar * identity) with a per-row update loop."""
    users = graph.users()
    replacements = {}
    for instr in graph:
        m = _match_diagonal(graph, instr.id, users)
        if m is None:
            continue
        n = instr.shape[0]
        dtype = instr.dtype
        replacements[instr.id] = (
            lambda nb, env, _m=m, _n=n, _t=dtype:
            _build_diagonal_update(nb, env, _m, _n, _t))
    if not replacements:
        return graph
    return rebuild(graph, replacements)


def match_replace_pass(graph: Graph) -> Graph:
    graph = canonicalize(graph)
    graph = rewrite_euclidean_distance(graph)
    graph = rewrite_add_diagonal(graph)
    return graph
