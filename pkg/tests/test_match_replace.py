import numpy as np
import pytest

from tensorbudget import (
    DType, GraphBuilder, build_identity, build_pairwise_distance, canonicalize,
    dump, evaluate, match_replace_pass, random_inputs,
    rewrite_add_diagonal, rewrite_euclidean_distance,
)
from tensorbudget.ir import Iota, Unary, While

from conftest import rel_err

F64 = DType.F64


class TestCanonicalize:
    def test_self_mul_becomes_square(self):
        b = GraphBuilder("c")
        p = b.param((4,), F64)
        g = b.build(b.mul(p, p))
        g2 = canonicalize(g)
        assert isinstance(g2.root_instruction.op, Unary)
        assert g2.root_instruction.op.op == "square"

    def test_add_neg_becomes_sub(self):
        b = GraphBuilder("c")
        x = b.param((4,), F64)
        y = b.param((4,), F64)
        g = b.build(b.add(x, b.neg(y)))
        g2 = canonicalize(g)
        assert g2.root_instruction.op.op == "sub"
        xs, ys = np.arange(4.0), np.ones(4)
        assert np.array_equal(evaluate(g2, [xs, ys])[0].array, xs - ys)

    def test_neg_first_operand(self):
        b = GraphBuilder("c")
        x = b.param((4,), F64)
        y = b.param((4,), F64)
        g = b.build(b.add(b.neg(x), y))
        g2 = canonicalize(g)
        xs, ys = np.arange(4.0), np.full(4, 9.0)
        assert np.array_equal(evaluate(g2, [xs, ys])[0].array, ys - xs)

    def test_no_change_returns_same_object(self, matvec_graph):
        assert canonicalize(matvec_graph) is matvec_graph


class TestEuclideanRewrite:
    def test_three_four_five_triangle(self):
        g = rewrite_euclidean_distance(build_pairwise_distance(1, 1, 2))
        out, _ = evaluate(g, [np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]])])
        assert np.allclose(out.array, [[25.0]], atol=1e-12)

    def test_matches_naive_oracle(self):
        g = build_pairwise_distance(4, 3, 2)
        inputs = random_inputs(g, seed=11)
        reference, _ = evaluate(g, inputs)  # the pre-rewrite graph is the oracle
        rewritten = rewrite_euclidean_distance(g)
        assert rewritten is not g
        out, _ = evaluate(rewritten, inputs)
        assert rel_err(out.array, reference.array) < 1e-12

    def test_largest_intermediate_shrinks(self):
        n = m = d = 16
        g = build_pairwise_distance(n, m, d)
        before = max(i.type.byte_size for i in g if not i.is_tuple)
        g2 = rewrite_euclidean_distance(g)
        after = max(i.type.byte_size for i in g2 if not i.is_tuple)
        assert before == n * m * d * 8
        assert after == n * m * 8

    def test_no_rank3_remains(self):
        g2 = rewrite_euclidean_distance(build_pairwise_distance(8, 6, 4))
        assert all(i.shape.rank <= 2 for i in g2 if not i.is_tuple)

    def test_non_matching_graph_unchanged(self, matvec_graph):
        assert rewrite_euclidean_distance(matvec_graph) is matvec_graph

    def test_l1_not_matched(self):
        g = build_pairwise_distance(5, 4, 3, "l1")
        assert rewrite_euclidean_distance(g) is g

    @pytest.mark.parametrize("seed", range(25))
    def test_randomized_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        n, m, d = rng.integers(1, 20, 3)
        g = build_pairwise_distance(int(n), int(m), int(d))
        inputs = random_inputs(g, seed=seed)
        reference, _ = evaluate(g, inputs)
        out, _ = evaluate(rewrite_euclidean_distance(g), inputs)
        assert rel_err(out.array, reference.array) < 1e-12

    def test_large_norm_caveat(self):
        # documented numerical caveat: norms up to 1e3 keep relative 1e-9
        g = build_pairwise_distance(30, 20, 8)
        inputs = random_inputs(g, seed=3, low=-1000.0, high=1000.0)
        reference, _ = evaluate(g, inputs)
        out, _ = evaluate(rewrite_euclidean_distance(g), inputs)
        assert rel_err(out.array, reference.array) < 1e-9

    def test_clamped_under_sqrt_consumer(self):
        b = GraphBuilder("norms")
        x = b.param((3, 2), F64)
        q = b.param((3, 2), F64)
        bq = b.broadcast(q, (3, 3, 2), (0, 2))
        bx = b.broadcast(x, (3, 3, 2), (1, 2))
        dist = b.reduce_sum(b.square(b.sub(bq, bx)), (2,))
        g = b.build(b.sqrt(dist))
        g2 = rewrite_euclidean_distance(g)
        assert g2 is not g
        # coincident points cancel; without clamping sqrt would return NaN
        pts = np.array([[0.1, 0.2], [1e3, -1e3], [5.0, 5.0]])
        out, _ = evaluate(g2, [pts, pts])
        assert np.all(np.isfinite(out.array))
        assert np.allclose(np.diag(out.array), 0.0, atol=1e-5)


def _diagonal_graph(n, matrix_param=True):
    b = GraphBuilder("diag")
    m = b.param((n, n), F64)
    s = b.param((), F64)
    scaled = b.mul(b.scalar_broadcast(s, (n, n)), build_identity(b, n, F64))
    return b.build(b.add(m, scaled))


class TestDiagonalRewrite:
    def test_two_by_two_by_hand(self):
        g = rewrite_add_diagonal(_diagonal_graph(2))
        out, _ = evaluate(g, [np.array([[1., 2.], [3., 4.]]), np.array(10.0)])
        assert np.array_equal(out.array, [[11., 2.], [3., 14.]])

    def test_random_50x50_matches_naive(self):
        g = _diagonal_graph(50)
        m = np.random.default_rng(0).uniform(-1, 1, (50, 50))
        s = np.array(2.5)
        reference, _ = evaluate(g, [m, s])
        g2 = rewrite_add_diagonal(g)
        assert g2 is not g
        out, _ = evaluate(g2, [m, s])
        assert rel_err(out.array, reference.array) < 1e-14

    def test_rewrite_structure(self):
        g2 = rewrite_add_diagonal(_diagonal_graph(8))
        assert any(isinstance(i.op, While) for i in g2)
        assert not any(isinstance(i.op, Iota) for i in g2)

    def test_dense_identity_never_materialised(self):
        from tensorbudget import estimate_peak_memory
        n = 64
        naive = _diagonal_graph(n)
        fused = rewrite_add_diagonal(naive)
        # naive: matrix + at least one dense identity intermediate
        assert estimate_peak_memory(naive) >= 2 * n * n * 8
        assert estimate_peak_memory(fused) < 2 * n * n * 8

    def test_lookalike_does_not_fire(self):
        b = GraphBuilder("fake")
        m = b.param((4, 4), F64)
        s = b.param((), F64)
        rows = b.broadcast(b.iota(4, F64), (4, 4), (0,))
        cols = b.broadcast(b.iota(4, F64), (4, 4), (1,))
        gap = b.abs(b.sub(rows, cols))
        one = b.scalar_broadcast(b.constant(1.0, F64), (4, 4))
        zero = b.scalar_broadcast(b.constant(0.0, F64), (4, 4))
        not_identity = b.minimum(zero, b.sub(one, gap))  # min, not max
        g = b.build(b.add(m, b.mul(b.scalar_broadcast(s, (4, 4)), not_identity)))
        assert rewrite_add_diagonal(g) is g

    def test_rectangular_add_untouched(self):
        b = GraphBuilder("rect")
        m = b.param((3, 5), F64)
        o = b.param((3, 5), F64)
        g = b.build(b.add(m, o))
        assert rewrite_add_diagonal(g) is g


class TestPassComposition:
    def test_pass_applies_after_canonicalization(self):
        # the naive form written with mul(d, d) instead of square(d)
        b = GraphBuilder("pairwise_mul")
        n, m, d = 5, 4, 3
        x = b.param((n, d), F64)
        q = b.param((m, d), F64)
        bq = b.broadcast(q, (m, n, d), (0, 2))
        bx = b.broadcast(x, (m, n, d), (1, 2))
        diff = b.sub(bq, bx)
        g = b.build(b.reduce_sum(b.mul(diff, diff), (2,)))
        inputs = random_inputs(g, seed=9)
        reference, _ = evaluate(g, inputs)
        g2 = match_replace_pass(g)
        assert all(i.shape.rank <= 2 for i in g2 if not i.is_tuple)
        out, _ = evaluate(g2, inputs)
        assert rel_err(out.array, reference.array) < 1e-12
