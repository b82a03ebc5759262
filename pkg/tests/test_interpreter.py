import numpy as np
import pytest

from tensorbudget import (
    BudgetExceeded, DType, GraphBuilder, PassConfig, build_pairwise_distance,
    estimate_peak_memory, evaluate, random_inputs, run_pipeline,
)
from tensorbudget.interpreter import EvaluationError, TensorValue

from conftest import rel_err

F64 = DType.F64
F32 = DType.F32
RNG = np.random.default_rng(7)


def test_matvec_by_hand(matvec_graph):
    out, _ = evaluate(matvec_graph, [np.array([[1., 2.], [3., 4.]]),
                                     np.array([5., 6.])])
    assert np.array_equal(out.array, [17., 39.])


class TestOpSemantics:
    """Each opcode against its direct numpy counterpart."""

    def _run1(self, build, x):
        b = GraphBuilder("t")
        p = b.param(x.shape, DType.from_np(x.dtype))
        g = b.build(build(b, p))
        out, _ = evaluate(g, [x])
        return out.array

    @pytest.mark.parametrize("name,fn", [
        ("neg", np.negative), ("exp", np.exp), ("abs", np.abs),
        ("square", np.square), ("sqrt", np.sqrt), ("reciprocal", np.reciprocal),
    ])
    def test_unary(self, name, fn):
        x = RNG.uniform(0.1, 2.0, (3, 4))
        got = self._run1(lambda b, p: b.unary(name, p), x)
        assert np.array_equal(got, fn(x))

    @pytest.mark.parametrize("name,fn", [
        ("add", np.add), ("sub", np.subtract), ("mul", np.multiply),
        ("div", np.divide), ("pow", np.power), ("max", np.maximum),
        ("min", np.minimum),
    ])
    def test_binary(self, name, fn):
        x = RNG.uniform(0.1, 2.0, (5,))
        y = RNG.uniform(0.1, 2.0, (5,))
        b = GraphBuilder("t")
        px, py = b.param((5,), F64), b.param((5,), F64)
        g = b.build(b.binary(name, px, py))
        out, _ = evaluate(g, [x, y])
        assert np.array_equal(out.array, fn(x, y))

    def test_broadcast_middle_dims(self):
        x = RNG.uniform(-1, 1, (4, 2))
        got = self._run1(lambda b, p: b.broadcast(p, (4, 3, 2), (0, 2)), x)
        assert np.array_equal(got, np.broadcast_to(x[:, None, :], (4, 3, 2)))

    def test_reduce_sum_multi(self):
        x = RNG.uniform(-1, 1, (3, 4, 5))
        got = self._run1(lambda b, p: b.reduce_sum(p, (0, 2)), x)
        assert np.allclose(got, x.sum(axis=(0, 2)), rtol=1e-15)

    def test_reduce_max(self):
        x = RNG.uniform(-1, 1, (3, 4))
        got = self._run1(lambda b, p: b.reduce_max(p, (1,)), x)
        assert np.array_equal(got, x.max(axis=1))

    def test_dot_general_batched(self):
        a = RNG.uniform(-1, 1, (5, 4, 8))
        c = RNG.uniform(-1, 1, (5, 8, 3))
        b = GraphBuilder("t")
        pa, pc = b.param(a.shape, F64), b.param(c.shape, F64)
        g = b.build(b.dot(pa, pc, (2,), (1,), (0,), (0,)))
        out, _ = evaluate(g, [a, c])
        assert np.allclose(out.array, np.einsum("bij,bjk->bik", a, c), rtol=1e-14)

    def test_dot_shared_contraction(self):
        q = RNG.uniform(-1, 1, (4, 6))
        x = RNG.uniform(-1, 1, (9, 6))
        b = GraphBuilder("t")
        pq, px = b.param(q.shape, F64), b.param(x.shape, F64)
        g = b.build(b.dot(pq, px, (1,), (1,)))
        out, _ = evaluate(g, [q, x])
        assert np.allclose(out.array, q @ x.T, rtol=1e-14)

    def test_transpose(self):
        x = RNG.uniform(-1, 1, (2, 3, 4))
        got = self._run1(lambda b, p: b.transpose(p, (2, 0, 1)), x)
        assert np.array_equal(got, np.transpose(x, (2, 0, 1)))

    def test_slice_strided(self):
        x = RNG.uniform(-1, 1, (10, 8))
        got = self._run1(lambda b, p: b.slice(p, (1, 0), (9, 8), (2, 3)), x)
        assert np.array_equal(got, x[1:9:2, 0:8:3])

    def test_concat(self):
        x = RNG.uniform(-1, 1, (2, 3))
        y = RNG.uniform(-1, 1, (2, 5))
        b = GraphBuilder("t")
        px, py = b.param(x.shape, F64), b.param(y.shape, F64)
        g = b.build(b.concat([px, py], 1))
        out, _ = evaluate(g, [x, y])
        assert np.array_equal(out.array, np.concatenate([x, y], axis=1))

    def test_iota(self):
        b = GraphBuilder("t")
        g = b.build(b.iota(6, F64))
        out, _ = evaluate(g, [])
        assert np.array_equal(out.array, np.arange(6.0))

    def test_top_k_smallest_with_ties(self):
        x = np.array([[3.0, 1.0, 1.0, 2.0]])
        b = GraphBuilder("t")
        p = b.param(x.shape, F64)
        g = b.build(b.top_k(p, 3, dim=1, largest=False))
        (vals, idx), _ = evaluate(g, [x])
        assert np.array_equal(vals.array, [[1.0, 1.0, 2.0]])
        assert np.array_equal(idx.array, [[1.0, 2.0, 3.0]])  # tie -> lower index

    def test_top_k_largest_with_ties(self):
        x = np.array([[3.0, 5.0, 5.0, 2.0]])
        b = GraphBuilder("t")
        p = b.param(x.shape, F64)
        g = b.build(b.top_k(p, 2, dim=1, largest=True))
        (vals, idx), _ = evaluate(g, [x])
        assert np.array_equal(vals.array, [[5.0, 5.0]])
        assert np.array_equal(idx.array, [[1.0, 2.0]])

    @pytest.mark.parametrize("lower", [True, False])
    def test_triangular_solve(self, lower):
        n, k = 6, 3
        a = RNG.uniform(0.5, 2.0, (2, n, n))
        a = np.tril(a) if lower else np.triu(a)
        x_true = RNG.uniform(-1, 1, (2, n, k))
        rhs = a @ x_true
        b = GraphBuilder("t")
        pa, pb = b.param(a.shape, F64), b.param(rhs.shape, F64)
        g = b.build(b.triangular_solve(pa, pb, lower))
        out, _ = evaluate(g, [a, rhs])
        assert np.allclose(out.array, x_true, rtol=1e-9)

    def test_dynamic_slice_clamps(self):
        x = np.arange(10.0)
        b = GraphBuilder("t")
        p = b.param((10,), F64)
        s = b.constant(8.0)  # start 8 with window 4 clamps to 6
        g = b.build(b.dynamic_slice(p, [s], (4,)))
        out, _ = evaluate(g, [x])
        assert np.array_equal(out.array, [6., 7., 8., 9.])

    def test_dynamic_update_slice(self):
        x = np.zeros((4, 4))
        u = np.ones((2, 2))
        b = GraphBuilder("t")
        px, pu = b.param((4, 4), F64), b.param((2, 2), F64)
        g = b.build(b.dynamic_update_slice(px, pu, [b.constant(1.0), b.constant(2.0)]))
        out, _ = evaluate(g, [x, u])
        expected = np.zeros((4, 4))
        expected[1:3, 2:4] = 1.0
        assert np.array_equal(out.array, expected)
        assert np.array_equal(x, np.zeros((4, 4)))  # caller's buffer untouched


class TestMemoryAccounting:
    def test_budget_exceeded_on_naive_distance(self):
        g = build_pairwise_distance(100, 100, 100)
        inputs = random_inputs(g, seed=0)
        with pytest.raises(BudgetExceeded) as info:
            evaluate(g, inputs, budget=10**6)
        assert info.value.requested == 8 * 10**6  # the [100,100,100] f64 block

    def test_pipeline_fits_budget_afterwards(self):
        g = build_pairwise_distance(100, 100, 100)
        inputs = random_inputs(g, seed=0)
        optimised = run_pipeline(g, PassConfig(tensor_size_threshold=512_000))
        out, trace = evaluate(optimised, inputs, budget=4 * 10**6)
        assert trace.peak_live_bytes <= 4 * 10**6

    def test_budget_monotonicity(self):
        g = build_pairwise_distance(20, 10, 4)
        inputs = random_inputs(g, seed=1)
        with pytest.raises(BudgetExceeded):
            evaluate(g, inputs, budget=4_000)
        ref, trace = evaluate(g, inputs, budget=20_000)
        for budget in (trace.peak_live_bytes, 10**8):
            out, _ = evaluate(g, inputs, budget=budget)
            assert np.array_equal(out.array, ref.array)

    def test_trace_balances_and_peak(self, matvec_graph):
        _, trace = evaluate(matvec_graph, [np.eye(2), np.ones(2)])
        live = 0
        peak = 0
        for e in trace.events:
            live += e.bytes if e.event == "alloc" else -e.bytes
            assert live == e.live_after
            peak = max(peak, live)
        assert live == 0
        assert peak == trace.peak_live_bytes

    def test_estimate_matches_trace_on_corpus(self):
        from tensorbudget import build_kernel_mvm, build_knn
        graphs = [
            build_kernel_mvm(32),
            build_pairwise_distance(12, 8, 5),
            build_pairwise_distance(12, 8, 5, "cosine"),
            build_knn(16, 6, 3, 4),
        ]
        cfg = PassConfig(tensor_size_threshold=1024, tensor_split_size=1024)
        graphs += [run_pipeline(g, cfg) for g in list(graphs)]
        for g in graphs:
            inputs = random_inputs(g, seed=3)
            _, trace = evaluate(g, inputs)
            assert estimate_peak_memory(g) == trace.peak_live_bytes, g.name

    def test_estimate_of_bare_parameter(self):
        b = GraphBuilder("id")
        p = b.param((16,), F64)
        g = b.build(p)
        assert estimate_peak_memory(g) == 16 * 8


class TestDeterminismAndSafety:
    def test_bit_identical_runs(self):
        g = build_pairwise_distance(9, 7, 3)
        inputs = random_inputs(g, seed=5)
        out1, t1 = evaluate(g, inputs)
        out2, t2 = evaluate(g, inputs)
        assert out1.array.tobytes() == out2.array.tobytes()
        assert [(e.instruction, e.event, e.bytes) for e in t1.events] == \
               [(e.instruction, e.event, e.bytes) for e in t2.events]

    def test_poisoning_detects_nothing_on_corpus(self):
        cfg = PassConfig(tensor_size_threshold=600, tensor_split_size=600)
        g = run_pipeline(build_pairwise_distance(10, 6, 4), cfg)
        inputs = random_inputs(g, seed=2)
        clean, _ = evaluate(g, inputs)
        poisoned, _ = evaluate(g, inputs, poison_freed=True)
        assert np.array_equal(clean.array, poisoned.array)
        assert np.all(np.isfinite(poisoned.array))

    def test_wrong_input_arity(self, matvec_graph):
        with pytest.raises(EvaluationError):
            evaluate(matvec_graph, [np.eye(2)])

    def test_wrong_input_shape(self, matvec_graph):
        with pytest.raises(EvaluationError):
            evaluate(matvec_graph, [np.eye(3), np.ones(3)])

    def test_tensor_value_roundtrip(self, matvec_graph):
        inputs = [TensorValue(np.eye(2)), TensorValue(np.ones(2))]
        out, _ = evaluate(matvec_graph, inputs)
        assert out.shape.dims == (2,)
        assert out.dtype is F64
