"""Memory-budget-aware tensor dataflow compiler.

A small SSA tensor IR, three memory-footprint optimisation passes
(match-and-replace, matmul-chain reordering, threshold-driven loop
splitting), and a reference interpreter whose peak-live-byte accounting
proves that transformed graphs compute the same values inside a memory
budget.
"""

from .builder import GraphBuilder, dead_code_eliminate, rebuild
from .frontend import (
    KernelSpec, build_kernel_mvm, build_knn, build_pairwise_distance,
    random_inputs,
)
from .inference import (
    AttributeOutOfRange, Diagnostic, InvalidGraph, ShapeMismatch, infer_shape,
    infer_type, require_valid, validate,
)
from .interpreter import (
    BudgetExceeded, MemoryEvent, MemoryTrace, TensorValue,
    estimate_peak_memory, evaluate,
)
from .ir import (
    CycleDetected, DType, Graph, Instruction, Shape, TensorType, TupleType,
    byte_size, dump, max_instruction_bytes, topological_order,
)
from .match_replace import (
    build_identity, canonicalize, match_replace_pass, rewrite_add_diagonal,
    rewrite_euclidean_distance,
)
from .pipeline import PassConfig, PipelineInvariantViolation, run_pipeline
from .reorder import MatmulChain, detect_chains, reorder_chain, reorder_pass
from .split import (
    SplitCandidate, SplitDiagnostic, SplitPlan, UnsplittableCandidate,
    build_while, find_candidate, plan_split, split_pass, splittable_dims,
)

__all__ = [
    "AttributeOutOfRange", "BudgetExceeded", "CycleDetected", "DType",
    "Diagnostic", "Graph", "GraphBuilder", "Instruction", "InvalidGraph",
    "KernelSpec", "MatmulChain", "MemoryEvent", "MemoryTrace", "PassConfig",
    "PipelineInvariantViolation", "Shape", "ShapeMismatch", "SplitCandidate",
    "SplitDiagnostic", "SplitPlan", "TensorType", "TensorValue", "TupleType",
    "UnsplittableCandidate", "build_identity", "build_kernel_mvm", "build_knn",
    "build_pairwise_distance", "build_while", "byte_size", "canonicalize",
    "dead_code_eliminate", "detect_chains", "dump", "estimate_peak_memory",
    "evaluate", "find_candidate", "infer_shape", "infer_type",
    "match_replace_pass", "max_instruction_bytes", "plan_split",
    "random_inputs", "rebuild", "reorder_chain", "reorder_pass",
    "require_valid", "rewrite_add_diagonal", "rewrite_euclidean_distance",
    "run_pipeline", "split_pass", "splittable_dims", "topological_order",
    "validate",
]
