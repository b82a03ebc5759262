import numpy as np
import pytest

from tensorbudget import DType, GraphBuilder


def rel_err(a, b) -> float:
    """Max absolute deviation over the reference's max magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def unwrap(value):
    """TensorValue(s) -> ndarray(s)."""
    if isinstance(value, tuple):
        return tuple(v.array for v in value)
    return value.array


@pytest.fixture
def matvec_graph():
    b = GraphBuilder("matvec")
    a = b.param((2, 2), DType.F64)
    v = b.param((2,), DType.F64)
    return b.build(b.matmul(a, v))
