"""Reassociates matrix-multiplication chains so intermediates shrink.

The rewrite applies one deliberately simple rule: when a chain ends in a
factor whose trailing dimension is strictly smaller than every interior
connecting dimension (the classic matrix-matrix-vector case), right-to-left
association keeps every intermediate at the small trailing width.  A rewrite
only happens when it strictly shrinks the peak intermediate, so ties keep
source order and the pass is deterministic and idempotent.

Chains whose interior products feed other consumers are skipped entirely:
reassociating them would force recomputation or duplicate the shared value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .builder import GraphBuilder, rebuild
from .ir import Dot, DType, Graph, Instruction, Shape

# A parenthesization: a factor position or a (left, right) product.
Paren = Union[int, tuple]


@dataclass(frozen=True)
class MatmulChain:
    factors: tuple[int, ...]
    shapes: tuple[Shape, ...]
    root: int
    current: Paren

    @property
    def no_gain(self) -> bool:
        return len(self.factors) < 3


def _is_plain_matmul(graph: Graph, instr: Instruction) -> bool:
    """2-D x 2-D (or a trailing vector) contracting the inner dimensions."""
    op = instr.op
    if not isinstance(op, Dot) or op.lhs_batch or op.rhs_batch:
        return False
    if op.lhs_contracting != (1,) or op.rhs_contracting != (0,):
        return False
    lhs = graph.instructions[instr.operands[0]]
    rhs = graph.instructions[instr.operands[1]]
    return lhs.shape.rank == 2 and rhs.shape.rank in (1, 2)


def _expand(graph: Graph, iid: int, users: dict[int, list[int]],
            is_root: bool):
    """Flattens nested single-use matmuls under `iid` into factor leaves.

    Returns (factors, tree, interior_ids) or None when an interior product
    has outside consumers (reassociation would duplicate it).
    """
    instr = graph.instructions[iid]
    if _is_plain_matmul(graph, instr) and (is_root or len(users[iid]) == 1):
        sides = []
        interior: set[int] = set()
        for o in instr.operands:
            child = graph.instructions[o]
            if _is_plain_matmul(graph, child):
                if len(users[o]) != 1:
                    return None
                sub = _expand(graph, o, users, is_root=False)
                if sub is None:
                    return None
                sub_factors, sub_tree, sub_interior = sub
                sides.append((sub_factors, sub_tree))
                interior |= sub_interior | {o}
            else:
                sides.append(([o], o))
        (lf, lt), (rf, rt) = sides
        return lf + rf, (lt, rt), interior
    return [iid], iid, set()


def detect_chains(graph: Graph) -> list[MatmulChain]:
    """Maximal plain-matmul chains, in deterministic root-id order."""
    users = graph.users()
    absorbed: set[int] = set()
    chains: list[MatmulChain] = []
    for instr in graph:
        if not _is_plain_matmul(graph, instr) or instr.id in absorbed:
            continue
        consumers = users[instr.id]
        if (len(consumers) == 1
                and _is_plain_matmul(graph, graph.instructions[consumers[0]])):
            continue  # will be reported from the outermost product
        expansion = _expand(graph, instr.id, users, is_root=True)
        if expansion is None:
            continue
        factors, tree, interior = expansion
        absorbed |= interior
        if len(factors) < 2:
            continue
        shapes = tuple(graph.instructions[f].shape for f in factors)
        pos = {f: i for i, f in enumerate(factors)}
        chains.append(MatmulChain(
            factors=tuple(factors), shapes=shapes, root=instr.id,
            current=_positions(tree, pos)))
    return chains


def _positions(tree, pos: dict[int, int]) -> Paren:
    if isinstance(tree, tuple):
        return (_positions(tree[0], pos), _positions(tree[1], pos))
    return pos[tree]


def _chain_dims(shapes: tuple[Shape, ...]) -> list[int]:
    """Connecting dimensions d_0..d_k; a trailing vector counts as width 1."""
    dims = [shapes[0][0]]
    for s in shapes:
        dims.append(s[1] if s.rank == 2 else 1)
    return dims


def _tree_extents(tree: Paren, dims: list[int]) -> tuple[int, int, list[int]]:
    """(rows, cols, intermediate element counts) of a parenthesization."""
    if isinstance(tree, int):
        return dims[tree], dims[tree + 1], []
    (lr, lc, li) = _tree_extents(tree[0], dims)
    (rr, rc, ri) = _tree_extents(tree[1], dims)
    if lc != rr:
        raise ValueError("non-conformable parenthesization")
    return lr, rc, li + ri + [lr * rc]


def peak_intermediate_bytes(tree: Paren, shapes: tuple[Shape, ...],
                            dtype: DType) -> int:
    """Largest intermediate product under `tree`, excluding the final result
    (its shape is the same under every parenthesization)."""
    dims = _chain_dims(shapes)
    _, _, intermediates = _tree_extents(tree, dims)
    inner = intermediates[:-1]
    return max(inner) * dtype.byte_size if inner else 0


def _right_assoc(k: int) -> Paren:
    tree: Paren = k - 1
    for i in range(k - 2, -1, -1):
        tree = (i, tree)
    return tree


def reorder_chain(chain: MatmulChain) -> Paren:
    """Chooses the parenthesization for one chain.

    Fires only on the shrinking-tail shape (trailing width strictly below all
    interior connecting dims) and only when the peak intermediate strictly
    drops; otherwise the existing association is kept.
    """
    if chain.no_gain:
        return chain.current
    dims = _chain_dims(chain.shapes)
    tail = dims[-1]
    interior = dims[1:-1]
    if not interior or any(tail >= d for d in interior):
        return chain.current
    dtype = DType.F64
    proposed = _right_assoc(len(chain.factors))
    if (peak_intermediate_bytes(proposed, chain.shapes, dtype)
            < peak_intermediate_bytes(chain.current, chain.shapes, dtype)):
        return proposed
    return chain.current


def _emit_tree(nb: GraphBuilder, tree: Paren, factor_env: list[int]) -> int:
    if isinstance(tree, int):
        return factor_env[tree]
    return nb.matmul(_emit_tree(nb, tree[0], factor_env),
                     _emit_tree(nb, tree[1], factor_env))


def reorder_pass(graph: Graph) -> Graph:
    """Applies reorder_chain to every detected chain; values are preserved
    because matrix multiplication is associative."""
    while True:
        todo = None
        for chain in detect_chains(graph):
            if reorder_chain(chain) != chain.current:
                todo = chain
                break
        if todo is None:
            return graph
        tree = reorder_chain(todo)
        factors = todo.factors

        def build(nb: GraphBuilder, env: dict, _tree=tree, _factors=factors):
            return _emit_tree(nb, _tree, [env[f] for f in _factors])

        graph = rebuild(graph, {todo.root: build})
