import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorbudget import (
    CycleDetected, DType, Graph, GraphBuilder, Shape, TensorType,
    byte_size, dump, infer_shape, topological_order, validate,
)
from tensorbudget.inference import AttributeOutOfRange, ShapeMismatch, infer_type
from tensorbudget.ir import (
    Binary, Broadcast, Constant, Dot, Instruction, Parameter, ReduceSum,
    Transpose, Tuple, While,
)

F64 = DType.F64
F32 = DType.F32


class TestInferShape:
    def test_dot_matmul(self):
        out = infer_shape(Dot((1,), (0,)), [Shape((4, 8)), Shape((8, 3))])
        assert out == Shape((4, 3))

    def test_broadcast(self):
        out = infer_shape(Broadcast((4, 3, 2), (0,)), [Shape((4,))])
        assert out == Shape((4, 3, 2))

    def test_reduce_removes_dim(self):
        out = infer_shape(ReduceSum((2,)), [Shape((10, 20, 5))])
        assert out == Shape((10, 20))

    def test_dot_batch(self):
        op = Dot((2,), (1,), lhs_batch=(0,), rhs_batch=(0,))
        out = infer_shape(op, [Shape((5, 4, 8)), Shape((5, 8, 3))])
        assert out == Shape((5, 4, 3))

    def test_mismatched_contraction(self):
        with pytest.raises(ShapeMismatch):
            infer_shape(Dot((1,), (0,)), [Shape((4, 8)), Shape((7, 3))])

    def test_bad_transpose_perm(self):
        with pytest.raises(AttributeOutOfRange):
            infer_shape(Transpose((0, 0)), [Shape((2, 3))])

    def test_binary_shape_disagreement(self):
        with pytest.raises(ShapeMismatch):
            infer_shape(Binary("add"), [Shape((2, 3)), Shape((3, 2))])


class TestByteSize:
    def test_kernel_matrix_is_8tb(self):
        assert Shape((10**6, 10**6)).byte_size(F64) == 8 * 10**12

    def test_scalar_f32(self):
        assert Shape(()).byte_size(F32) == 4

    def test_gigabyte_chunk(self):
        assert Shape((125, 10**6)).byte_size(F64) == 10**9

    def test_overflow_detected(self):
        with pytest.raises(OverflowError):
            Shape((2**40, 2**40)).byte_size(F64)

    @given(dims=st.lists(st.integers(0, 2**13), min_size=1, max_size=4),
           bump=st.integers(0, 2**13))
    @settings(max_examples=60, deadline=None)
    def test_monotone_and_exact(self, dims, bump):
        base = Shape(tuple(dims))
        expected = 8
        for d in dims:
            expected *= d
        assert base.byte_size(F64) == expected
        grown = Shape((dims[0] + bump, *dims[1:]))
        assert grown.byte_size(F64) >= base.byte_size(F64)


def _chain_graph():
    b = GraphBuilder("chain")
    p = b.param((4,), F64)
    e = b.exp(p)
    r = b.reduce_sum(e, (0,))
    return b.build(r), (p, e, r)


class TestTopologicalOrder:
    def test_linear_chain(self):
        g, ids = _chain_graph()
        assert topological_order(g) == list(ids)

    def test_diamond_users_in_id_order(self):
        b = GraphBuilder("diamond")
        p = b.param((4,), F64)
        left = b.exp(p)
        right = b.neg(p)
        root = b.add(left, right)
        g = b.build(root)
        assert topological_order(g) == [p, left, right, root]

    def test_back_edge_cycle(self):
        t = TensorType(Shape((2,)), F64)
        instrs = {
            0: Instruction(0, Parameter(0), (), t),
            1: Instruction(1, Binary("add"), (0, 2), t),
            2: Instruction(2, Binary("add"), (1, 1), t),
        }
        g = Graph("cyclic", (t,), instrs, 2)
        with pytest.raises(CycleDetected):
            topological_order(g)

    def test_repeated_calls_identical(self):
        g, _ = _chain_graph()
        assert topological_order(g) == topological_order(g)


class TestValidate:
    def test_well_formed_ok(self, matvec_graph):
        assert validate(matvec_graph) == []

    def test_shape_disagreement_names_instruction(self, matvec_graph):
        bad = dict(matvec_graph.instructions)
        instr = bad[2]
        bad[2] = Instruction(2, instr.op, instr.operands,
                             TensorType(Shape((3,)), F64))
        g = Graph("bad", matvec_graph.parameters, bad, matvec_graph.root)
        diags = validate(g)
        assert any(d.instruction == 2 for d in diags)

    def test_while_body_breaking_carried_shape(self):
        t_scalar = TensorType(Shape(()), F64)
        cb = GraphBuilder("c")
        ci = cb.param((), F64)
        cond = cb.build(cb.sub(cb.constant(1.0), ci))

        bb = GraphBuilder("b")
        bi = bb.param((), F64)
        grown = bb.broadcast(bi, (2,), ())
        body_root = bb.tuple([grown])
        body = bb.build(body_root)

        g = GraphBuilder("outer")
        start = g.constant(0.0)
        with pytest.raises(ShapeMismatch):
            g.while_loop(cond, body, [start])

    def test_duplicate_parameter_index(self):
        t = TensorType(Shape((2,)), F64)
        instrs = {
            0: Instruction(0, Parameter(0), (), t),
            1: Instruction(1, Parameter(0), (), t),
            2: Instruction(2, Binary("add"), (0, 1), t),
        }
        g = Graph("dup", (t,), instrs, 2)
        assert any("duplicate" in d.message for d in validate(g))

    def test_tuple_consumed_directly(self):
        t = TensorType(Shape((2,)), F64)
        instrs = {
            0: Instruction(0, Parameter(0), (), t),
            1: Instruction(1, Tuple(), (0,), __import__("tensorbudget").TupleType((t,))),
            2: Instruction(2, Binary("add"), (1, 1), t),
        }
        g = Graph("tup", (t,), instrs, 2)
        assert validate(g)

    def test_reinference_reproduces_recorded_types(self):
        from tensorbudget import build_kernel_mvm, build_knn
        for g in (build_kernel_mvm(6), build_knn(10, 4, 3, 2)):
            for instr in g:
                if isinstance(instr.op, (Parameter, Constant)):
                    continue
                if instr.op.kind == "iota":
                    continue
                inferred = infer_type(
                    instr.op, [g.instructions[o].type for o in instr.operands])
                assert inferred == instr.type


class TestConstants:
    def test_large_constant_rejected(self):
        b = GraphBuilder("big")
        with pytest.raises(ValueError):
            b.constant(np.zeros((600, 600)))  # 2.88 MB > 1 MiB

    def test_scalar_constant_stays_scalar(self):
        b = GraphBuilder("s")
        c = b.constant(4.0)
        assert b.instruction(c).shape == Shape(())


class TestDump:
    def test_golden_matvec(self, matvec_graph):
        assert dump(matvec_graph) == (
            "graph matvec {\n"
            "  %0 = parameter([2,2], f64) [index=0]\n"
            "  %1 = parameter([2], f64) [index=1]\n"
            "  %2 = dot([2], f64) %0, %1 [lhs_contract=[1], rhs_contract=[0]]\n"
            "  root %2\n"
            "}\n"
        )

    def test_dump_stable(self, matvec_graph):
        assert dump(matvec_graph) == dump(matvec_graph)

    def test_byte_size_helper(self, matvec_graph):
        assert byte_size(matvec_graph.instructions[0]) == 32
