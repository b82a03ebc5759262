"""Builders for the benchmark graphs: squared-exponential kernel
matrix-vector products, pairwise distances, and brute-force k-nearest
neighbours.

All builders emit the naive broadcast forms on purpose, so the optimisation
passes have real work to do; the interpreter then serves as the before/after
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .builder import GraphBuilder
from .ir import DType, Graph

METRICS = ("l2", "l1", "cosine")


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential kernel k(x, y) = variance * exp(-(x-y)^2 / (2 l^2))."""

    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        if self.variance <= 0 or self.lengthscale <= 0:
            raise ValueError("variance and lengthscale must be strictly positive")


def build_kernel_mvm(n: int, spec: KernelSpec = KernelSpec(),
                     dtype: DType = DType.F64) -> Graph:
    """y = K v for the n-by-n kernel matrix over 1-D inputs x, y.

    Parameters: x[n], y[n], v[n].  The kernel matrix is built in naive
    broadcast form, so the unoptimised graph materialises all n*n entries.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    b = GraphBuilder(f"se_kernel_mvm_n{n}")
    x = b.param((n,), dtype)
    y = b.param((n,), dtype)
    v = b.param((n,), dtype)
    bx = b.broadcast(x, (n, n), (0,))
    by = b.broadcast(y, (n, n), (1,))
    sq = b.square(b.sub(bx, by))
    scale = b.scalar_broadcast(
        b.constant(-0.5 / spec.lengthscale**2, dtype), (n, n))
    kernel = b.mul(b.scalar_broadcast(b.constant(spec.variance, dtype), (n, n)),
                   b.exp(b.mul(sq, scale)))
    return b.build(b.matmul(kernel, v))


def _l2_or_l1(b: GraphBuilder, x: int, q: int, n: int, m: int, d: int,
              metric: str) -> int:
    bq = b.broadcast(q, (m, n, d), (0, 2))
    bx = b.broadcast(x, (m, n, d), (1, 2))
    diff = b.sub(bq, bx)
    per_dim = b.square(diff) if metric == "l2" else b.abs(diff)
    return b.reduce_sum(per_dim, (2,))


def _cosine(b: GraphBuilder, x: int, q: int, n: int, m: int, d: int,
            dtype: DType) -> int:
    cross = b.dot(q, x, (1,), (1,))
    qn = b.sqrt(b.reduce_sum(b.square(q), (1,)))
    xn = b.sqrt(b.reduce_sum(b.square(x), (1,)))
    denom = b.mul(b.broadcast(qn, (m, n), (0,)), b.broadcast(xn, (m, n), (1,)))
    one = b.scalar_broadcast(b.constant(1.0, dtype), (m, n))
    return b.sub(one, b.div(cross, denom))


def build_pairwise_distance(n: int, m: int, d: int, metric: str = "l2",
                            dtype: DType = DType.F64) -> Graph:
    """[m, n] distances between m query rows and n data rows.

    l2 is the squared Euclidean distance in naive broadcast form; l1 sums
    absolute differences; cosine is 1 - cos similarity.  Cosine is undefined
    for zero rows: evaluation rejects such inputs (see random_inputs).
    """
    if min(n, m, d) < 1:
        raise ValueError("n, m and d must be at least 1")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    b = GraphBuilder(f"pairwise_{metric}_n{n}_m{m}_d{d}")
    x = b.param((n, d), dtype)
    q = b.param((m, d), dtype)
    if metric == "cosine":
        root = _cosine(b, x, q, n, m, d, dtype)
    else:
        root = _l2_or_l1(b, x, q, n, m, d, metric)
    return b.build(root)


def build_knn(n: int, m: int, d: int, k: int, metric: str = "l2",
              dtype: DType = DType.F64) -> Graph:
    """Brute-force kNN: distances then a smallest-k selection along the data
    axis.  The root is a (distances[m,k], indices[m,k]) tuple; equal
    distances resolve to the lower data index."""
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must satisfy 1 <= k <= n={n}")
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    b = GraphBuilder(f"knn_{metric}_n{n}_m{m}_d{d}_k{k}")
    x = b.param((n, d), dtype)
    q = b.param((m, d), dtype)
    if metric == "cosine":
        dist = _cosine(b, x, q, n, m, d, dtype)
    else:
        dist = _l2_or_l1(b, x, q, n, m, d, metric)
    return b.build(b.top_k(dist, k, dim=1, largest=False))


def check_inputs(graph: Graph, arrays) -> None:
    """Rejects inputs a builder graph cannot evaluate meaningfully: cosine
    distance is undefined for all-zero rows."""
    if "cosine" not in graph.name:
        return
    for arr in arrays:
        arr = np.asarray(arr)
        if arr.ndim == 2 and np.any(np.linalg.norm(arr, axis=1) == 0.0):
            raise ValueError("cosine distance is undefined for zero rows")


def random_inputs(graph: Graph, seed: int, low: float = -1.0,
                  high: float = 1.0) -> list[np.ndarray]:
    """Seeded uniform inputs matching the graph signature; with continuous
    uniform data the zero-row check never triggers in practice."""
    rng = np.random.default_rng(seed)
    out = []
    for p in graph.parameters:
        arr = rng.uniform(low, high, size=p.shape.dims).astype(p.dtype.np_dtype)
        out.append(arr)
    check_inputs(graph, out)
    return out
