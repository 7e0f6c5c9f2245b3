"""Parameter counts and a FLOP proxy for compiled graphs.

Parameter conventions: every normalized tensor contributes a learnable pair
(2 terms per output map); separable convolutions split into depthwise +
pointwise, each normalized; dilation is parameter-free; the classifier uses a
bias and no norm.  The stem enters as a single constant from the space config
and is never recomputed.

The FLOP proxy counts 2 * (conv multiply weights) * output pixels per node;
norm/bias terms are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

from .genotype import OpKind, SpaceConfig
from .graph import _OP_KERNELS, GraphIR, Node, NodeKind, downsample_factor

DEFAULT_FLOPS_HW = (64, 64)


@dataclass(frozen=True)
class CostReport:
    params_total: int
    params_generated: int  # excludes the stem constant
    per_node: tuple[tuple[int, str, int], ...]  # (node id, label, params)
    output_down_exp: int
    downsample_factor: int
    flops: int | None = None
    flops_hw: tuple[int, int] | None = None

    @property
    def output_resolution(self) -> str:
        return f"1/{2 ** self.output_down_exp}"


def count_params(graph: GraphIR, cfg: SpaceConfig) -> CostReport:
    per_node = tuple(
        (n.id, n.label(), n.param_count) for n in graph.nodes if n.param_count
    )
    generated = sum(p for _, _, p in per_node)
    return CostReport(
        params_total=generated + cfg.stem_param_count,
        params_generated=generated,
        per_node=per_node,
        output_down_exp=graph.output_down_exp,
        downsample_factor=downsample_factor(graph),
    )


def _conv_multiply_terms(node: Node, graph: GraphIR, cfg: SpaceConfig) -> int:
    """Multiplicative conv weights of a node (no norm, no bias)."""
    if node.param_count == 0:
        return 0
    c_in = graph.node(node.inputs[0]).out.channels
    c_out = node.out.channels
    if node.kind in (NodeKind.TRANSFORM_1X1, NodeKind.REDUCE_1X1):
        return c_in * c_out
    if node.kind is NodeKind.CLASSIFIER_3X3:
        return 9 * c_in * cfg.num_classes
    if node.kind is NodeKind.OP:
        if node.op in _OP_KERNELS:
            k = _OP_KERNELS[node.op]
            return k * k * c_in + c_in * c_out
        if node.op is OpKind.GAP_CONV_1X1:
            return c_in * c_out
    raise AssertionError(f"parameter-bearing node of unhandled kind {node.kind}")


def count_flops(graph: GraphIR, cfg: SpaceConfig, input_hw: tuple[int, int]) -> int:
    """Deterministic FLOP proxy at a reference input resolution."""
    h, w = input_hw
    scale = 2 ** graph.max_down_exp
    if h % scale or w % scale:
        raise ValueError(
            f"input {h}x{w} not divisible by the deepest resolution factor {scale}"
        )
    total = 0
    for node in graph.nodes:
        terms = _conv_multiply_terms(node, graph, cfg)
        if terms:
            d = node.out.down_exp
            total += 2 * terms * (h >> d) * (w >> d)
    return total


def cost_report(
    graph: GraphIR, cfg: SpaceConfig, input_hw: tuple[int, int] | None = None
) -> CostReport:
    """Parameter report, optionally with the FLOP proxy at ``input_hw``."""
    report = count_params(graph, cfg)
    if input_hw is None:
        return report
    return CostReport(
        params_total=report.params_total,
        params_generated=report.params_generated,
        per_node=report.per_node,
        output_down_exp=report.output_down_exp,
        downsample_factor=report.downsample_factor,
        flops=count_flops(graph, cfg, input_hw),
        flops_hw=input_hw,
    )


def summarize(
    graph: GraphIR, cfg: SpaceConfig, input_hw: tuple[int, int] = DEFAULT_FLOPS_HW
) -> dict:
    """Graph summary record used by the evaluator protocol."""
    report = count_params(graph, cfg)
    return {
        "params": report.params_total,
        "flops": count_flops(graph, cfg, input_hw),
        "max_down_exp": graph.max_down_exp,
        "output_down_exp": graph.output_down_exp,
        "num_nodes": len(graph.nodes),
        "downsample_factor": report.downsample_factor,
    }
