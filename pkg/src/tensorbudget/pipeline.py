"""Pass configuration and the fixed-order optimisation pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

from .inference import validate
from .ir import Graph
from .match_replace import match_replace_pass
from .reorder import reorder_pass
from .split import SplitDiagnostic, split_pass


class PipelineInvariantViolation(Exception):
    """A pass produced a graph that fails validation."""


@dataclass
class PassConfig:
    """User-facing memory options.

    tensor_size_threshold marks tensors as split candidates;
    tensor_split_size caps the bytes of any slice the splitter produces and
    defaults to the threshold when unset.
    """

    tensor_size_threshold: int = 10**9
    tensor_split_size: int | None = None
    enable_match_replace: bool = True
    enable_reorder: bool = True
    enable_split: bool = True

    def __post_init__(self):
        if self.tensor_split_size is None:
            self.tensor_split_size = self.tensor_size_threshold
        if self.tensor_size_threshold <= 0 or self.tensor_split_size <= 0:
            raise ValueError("size options must be positive byte counts")
        if self.tensor_split_size > self.tensor_size_threshold:
            raise ValueError(
                f"tensor_split_size ({self.tensor_split_size}) must not exceed "
                f"tensor_size_threshold ({self.tensor_size_threshold})")


def run_pipeline(graph: Graph, config: PassConfig,
                 diagnostics: list[SplitDiagnostic] | None = None) -> Graph:
    """Runs the enabled passes in fixed order and re-validates after each.

    Order: match_replace shrinks the largest intermediates first, reordering
    can remove the need to split at all, and splitting then works with the
    smallest candidate set.  The output computes the same function of the
    parameters as the input; running the pipeline twice is a no-op.
    """
    _check(graph, "input")
    if config.enable_match_replace:
        graph = _check(match_replace_pass(graph), "match_replace")
    if config.enable_reorder:
        graph = _check(reorder_pass(graph), "reorder")
    if config.enable_split:
        graph = _check(split_pass(graph, config, diagnostics), "split")
    return graph


def _check(graph: Graph, stage: str) -> Graph:
    diags = validate(graph)
    if diags:
        details = "; ".join(str(d) for d in diags[:5])
        raise PipelineInvariantViolation(f"after {stage}: {details}")
    return graph
