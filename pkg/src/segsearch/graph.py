"""Compiles a validated genotype into a dataflow-graph IR.

The compiler applies the structural rules of the space:

* two stem seeds (24ch at 1/4, 32ch at 1/8), each transformed to the working
  width by a 1x1 conv; the transformed tensors seed the sampling pool;
* per block, the chosen template is instantiated on the two sampled pool
  entries; the working width is the max of the input widths, doubled when the
  block is strided; the stride applies to both ops of the first instantiation
  only;
* operand resolutions are aligned before aggregation: downsampled to the
  coarser operand in the first half of the blocks, upsampled to the finer in
  the second half;
* repeats re-instantiate the template with fresh parameters on (previous
  output, second input); the last output joins the pool;
* the head concatenates all never-sampled pool entries at the finest of their
  resolutions, reduces to the working width with a 1x1 conv, and classifies
  with a single 3x3 conv.

No tensor arithmetic happens here; nodes carry channel counts, a resolution
exponent (spatial size = input / 2^down_exp) and a parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .genotype import (
    AGG_NAMES,
    OP_NAMES,
    AggKind,
    Genotype,
    OpKind,
    SpaceConfig,
    validate,
)


class GraphInvariantError(RuntimeError):
    """An internal construction invariant was breached; indicates a compiler
    defect rather than a bad genotype."""


class NodeKind(Enum):
    STEM_SEED = "stem_seed"
    TRANSFORM_1X1 = "transform1x1"
    OP = "op"
    AGGREGATE = "aggregate"
    ALIGN_DOWN = "align_down"
    ALIGN_UP = "align_up"
    CONCAT_HEAD = "concat_head"
    REDUCE_1X1 = "reduce1x1"
    CLASSIFIER_3X3 = "classifier3x3"


@dataclass(frozen=True)
class TensorSpec:
    channels: int
    down_exp: int  # spatial size = input_size / 2**down_exp


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    inputs: tuple[int, ...]
    out: TensorSpec
    stride: int = 1
    param_count: int = 0
    op: OpKind | None = None
    agg: AggKind | None = None
    block: int | None = None  # owning block index, None for stem/head
    repeat: int | None = None  # instantiation index within the block, 0-based

    def label(self) -> str:
        if self.kind is NodeKind.OP:
            return OP_NAMES[self.op]
        if self.kind is NodeKind.AGGREGATE:
            return AGG_NAMES[self.agg]
        return self.kind.value


@dataclass(frozen=True)
class GraphIR:
    """Topologically ordered node list plus the final sampling pool.

    ``pool[i]`` is the node id of the i-th pool entry and ``consumed[i]`` the
    number of times it was sampled as a block input.  ``output`` is the
    classifier node id.
    """

    nodes: tuple[Node, ...]
    pool: tuple[int, ...]
    consumed: tuple[int, ...]
    output: int
    _by_id: dict[int, Node] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})

    def node(self, node_id: int) -> Node:
        return self._by_id[node_id]

    @property
    def max_down_exp(self) -> int:
        return max(n.out.down_exp for n in self.nodes)

    @property
    def output_down_exp(self) -> int:
        return self.node(self.output).out.down_exp

    @property
    def strided_blocks(self) -> int:
        """Number of blocks whose ops downsample (stride 2)."""
        return len(
            {n.block for n in self.nodes if n.kind is NodeKind.OP and n.stride == 2}
        )


def downsample_factor(graph: GraphIR) -> int:
    """Architecture downsampling factor relative to the stem: 2^(number of
    stride-2 blocks)."""
    return 2 ** graph.strided_blocks


# Stem constants: two recorded outputs at 1/4 and 1/8 resolution with 24 and
# 32 channels.  The stem itself is never expanded into layers; its parameters
# enter the cost report as a single constant.
STEM_SEEDS = ((24, 2), (32, 3))


def _plain_conv_params(k: int, c_in: int, c_out: int) -> int:
    # conv weight + batch-norm pair
    return k * k * c_in * c_out + 2 * c_out


def _sep_conv_params(k: int, c_in: int, c_out: int) -> int:
    # depthwise + norm pair, pointwise + norm pair; dilation adds nothing
    return k * k * c_in + 2 * c_in + c_in * c_out + 2 * c_out


_OP_KERNELS = {
    OpKind.SEP_CONV_3X3: 3,
    OpKind.SEP_CONV_5X5: 5,
    OpKind.SEP_CONV_5X5_DIL6: 5,
}


def _op_params(op: OpKind, c_in: int, c_out: int) -> int:
    if op in _OP_KERNELS:
        return _sep_conv_params(_OP_KERNELS[op], c_in, c_out)
    if op is OpKind.GAP_CONV_1X1:
        return _plain_conv_params(1, c_in, c_out)
    # skip / max-pool: parameter-free (channel fixes use a separate
    # projection node)
    return 0


class _Builder:
    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def add(self, **kw) -> Node:
        node = Node(id=len(self.nodes), **kw)
        self.nodes.append(node)
        return node

    def spec(self, node_id: int) -> TensorSpec:
        return self.nodes[node_id].out


def _instantiate(
    b: _Builder,
    template,
    in1: int,
    in2: int,
    stride: int,
    mult: int,
    first_half: bool,
    concat_reduce: bool,
    block: int,
    repeat: int,
) -> int:
    """One template instantiation on inputs (in1, in2); returns output node id."""
    s1, s2 = b.spec(in1), b.spec(in2)
    target = max(s1.channels, s2.channels)
    if stride == 2:
        target *= mult

    ops = []
    for op_kind, src in ((template.op1, in1), (template.op2, in2)):
        src_spec = b.spec(src)
        if op_kind in (OpKind.SKIP, OpKind.MAX_POOL_3X3) and src_spec.channels != target:
            # parameter-free ops cannot change width; project first
            proj = b.add(
                kind=NodeKind.TRANSFORM_1X1,
                inputs=(src,),
                out=TensorSpec(target, src_spec.down_exp),
                param_count=_plain_conv_params(1, src_spec.channels, target),
                block=block,
                repeat=repeat,
            )
            src, src_spec = proj.id, proj.out
        down = src_spec.down_exp + (1 if stride == 2 else 0)
        node = b.add(
            kind=NodeKind.OP,
            inputs=(src,),
            out=TensorSpec(target, down),
            stride=stride,
            param_count=_op_params(op_kind, src_spec.channels, target),
            op=op_kind,
            block=block,
            repeat=repeat,
        )
        ops.append(node)

    d1, d2 = ops[0].out.down_exp, ops[1].out.down_exp
    agg_down = max(d1, d2) if first_half else min(d1, d2)
    aligned = []
    for node in ops:
        if node.out.down_exp == agg_down:
            aligned.append(node.id)
            continue
        kind = NodeKind.ALIGN_DOWN if node.out.down_exp < agg_down else NodeKind.ALIGN_UP
        align = b.add(
            kind=kind,
            inputs=(node.id,),
            out=TensorSpec(node.out.channels, agg_down),
            block=block,
            repeat=repeat,
        )
        aligned.append(align.id)

    if b.spec(aligned[0]) != b.spec(aligned[1]):
        raise GraphInvariantError(
            f"block {block}: aggregate operands disagree after alignment: "
            f"{b.spec(aligned[0])} vs {b.spec(aligned[1])}"
        )

    if template.agg is AggKind.SUM:
        out_ch = target
    else:
        out_ch = 2 * target
    agg = b.add(
        kind=NodeKind.AGGREGATE,
        inputs=tuple(aligned),
        out=TensorSpec(out_ch, agg_down),
        agg=template.agg,
        block=block,
        repeat=repeat,
    )
    out = agg
    if template.agg is AggKind.CONCAT and concat_reduce:
        out = b.add(
            kind=NodeKind.REDUCE_1X1,
            inputs=(agg.id,),
            out=TensorSpec(target, agg_down),
            param_count=_plain_conv_params(1, out_ch, target),
            block=block,
            repeat=repeat,
        )
    return out.id


def compile(genotype: Genotype, cfg: SpaceConfig) -> GraphIR:  # noqa: A001
    """Compile a genotype into a GraphIR; rejects invalid genotypes."""
    validate(genotype, cfg).raise_if_invalid()

    b = _Builder()
    pool: list[int] = []
    for channels, down in STEM_SEEDS:
        seed = b.add(
            kind=NodeKind.STEM_SEED, inputs=(), out=TensorSpec(channels, down)
        )
        transform = b.add(
            kind=NodeKind.TRANSFORM_1X1,
            inputs=(seed.id,),
            out=TensorSpec(cfg.base_channels, down),
            param_count=_plain_conv_params(1, channels, cfg.base_channels),
        )
        pool.append(transform.id)
    consumed = [0, 0]

    for j, blk in enumerate(genotype.blocks):
        template = genotype.templates[blk.template_id]
        first_half = j < cfg.stride_blocks
        in1, in2 = pool[blk.loc1], pool[blk.loc2]
        consumed[blk.loc1] += 1
        consumed[blk.loc2] += 1

        out = _instantiate(
            b, template, in1, in2, blk.stride, cfg.channel_multiplier,
            first_half, cfg.concat_reduce, block=j, repeat=0,
        )
        for rep in range(1, blk.repeats):
            # fresh parameters each time: previous output becomes the first
            # input, the block's second input is reused
            out = _instantiate(
                b, template, out, in2, 1, cfg.channel_multiplier,
                first_half, cfg.concat_reduce, block=j, repeat=rep,
            )
        pool.append(out)
        consumed.append(0)

    if len(pool) != 2 + cfg.num_blocks:
        raise GraphInvariantError(f"pool size {len(pool)} != {2 + cfg.num_blocks}")
    unused = [pool[i] for i, c in enumerate(consumed) if c == 0]
    if not unused:
        raise GraphInvariantError("no unused pool entry for the head")

    head_down = min(b.spec(n).down_exp for n in unused)
    head_inputs = []
    for node_id in unused:
        spec = b.spec(node_id)
        if spec.down_exp != head_down:
            align = b.add(
                kind=NodeKind.ALIGN_UP,
                inputs=(node_id,),
                out=TensorSpec(spec.channels, head_down),
            )
            node_id = align.id
        head_inputs.append(node_id)
    concat_ch = sum(b.spec(n).channels for n in head_inputs)
    concat = b.add(
        kind=NodeKind.CONCAT_HEAD,
        inputs=tuple(head_inputs),
        out=TensorSpec(concat_ch, head_down),
    )
    reduce = b.add(
        kind=NodeKind.REDUCE_1X1,
        inputs=(concat.id,),
        out=TensorSpec(cfg.base_channels, head_down),
        param_count=_plain_conv_params(1, concat_ch, cfg.base_channels),
    )
    classifier = b.add(
        kind=NodeKind.CLASSIFIER_3X3,
        inputs=(reduce.id,),
        out=TensorSpec(cfg.num_classes, head_down),
        # 3x3 conv with bias, no norm
        param_count=9 * cfg.base_channels * cfg.num_classes + cfg.num_classes,
    )

    return GraphIR(
        nodes=tuple(b.nodes),
        pool=tuple(pool),
        consumed=tuple(consumed),
        output=classifier.id,
    )


def export_dot(graph: GraphIR) -> str:
    """Render the graph as a DOT digraph, one cluster per template
    instantiation grouped inside a cluster per block."""
    lines = [
        "digraph architecture {",
        "  rankdir=TB;",
        '  node [shape=box, fontsize=10, fontname="Helvetica"];',
    ]

    def emit(node: Node, indent: str) -> None:
        res = f"1/{2 ** node.out.down_exp}"
        label = f"{node.label()}\\n{node.out.channels}ch @ {res}"
        if node.stride == 2:
            label += "\\ns2"
        lines.append(f'{indent}n{node.id} [label="{label}"];')

    by_block: dict[int, dict[int, list[Node]]] = {}
    loose: list[Node] = []
    for node in graph.nodes:
        if node.block is None:
            loose.append(node)
        else:
            by_block.setdefault(node.block, {}).setdefault(node.repeat, []).append(node)

    for node in loose:
        emit(node, "  ")
    for block in sorted(by_block):
        lines.append(f"  subgraph cluster_block{block} {{")
        lines.append(f'    label="block {block}";')
        for rep in sorted(by_block[block]):
            lines.append(f"    subgraph cluster_block{block}_rep{rep} {{")
            lines.append(f'      label="instantiation {rep + 1}";')
            for node in by_block[block][rep]:
                emit(node, "      ")
            lines.append("    }")
        lines.append("  }")

    for node in graph.nodes:
        for src in node.inputs:
            lines.append(f"  n{src} -> n{node.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"
