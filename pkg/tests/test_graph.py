import dataclasses
import random
import re
from collections import Counter

import pytest

from graph_checks import check_structure, expected_pool_specs
from segsearch.genotype import (
    AggKind,
    BlockDecision,
    Genotype,
    OpKind,
    SpaceConfig,
    Template,
    sample_uniform,
)
from segsearch.graph import (
    GraphIR,
    Node,
    NodeKind,
    TensorSpec,
    compile as compile_graph,
    downsample_factor,
    export_dot,
)

SKIP_SUM = Template(OpKind.SKIP, OpKind.SKIP, AggKind.SUM)
SEP_SUM = Template(OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_3X3, AggKind.SUM)
SEP_SKIP_SUM = Template(OpKind.SEP_CONV_3X3, OpKind.SKIP, AggKind.SUM)


def block(loc1, loc2, template_id=0, repeats=1, stride=1):
    return BlockDecision(loc1=loc1, loc2=loc2, template_id=template_id,
                         repeats=repeats, stride=stride)


@pytest.fixture
def single_block_graph(tiny_space):
    g = Genotype(templates=(SEP_SKIP_SUM,), blocks=(block(0, 0),))
    return g, compile_graph(g, tiny_space)


class TestSingleBlock:
    def test_node_census(self, single_block_graph):
        _, graph = single_block_graph
        census = Counter(n.kind for n in graph.nodes)
        assert census == {
            NodeKind.STEM_SEED: 2,
            NodeKind.TRANSFORM_1X1: 2,
            NodeKind.OP: 2,
            NodeKind.AGGREGATE: 1,
            NodeKind.ALIGN_UP: 1,
            NodeKind.CONCAT_HEAD: 1,
            NodeKind.REDUCE_1X1: 1,
            NodeKind.CLASSIFIER_3X3: 1,
        }
        assert len(graph.nodes) == 11

    def test_ops_and_widths(self, single_block_graph):
        _, graph = single_block_graph
        ops = {n.op: n for n in graph.nodes if n.kind is NodeKind.OP}
        assert set(ops) == {OpKind.SEP_CONV_3X3, OpKind.SKIP}
        # both inputs are the 1/4 stem transform, already at the working width
        for n in ops.values():
            assert n.out == TensorSpec(48, 2)
            assert graph.node(n.inputs[0]).out.channels == 48

    def test_head_joins_both_unused_entries(self, single_block_graph):
        _, graph = single_block_graph
        assert graph.consumed == (2, 0, 0)
        head = next(n for n in graph.nodes if n.kind is NodeKind.CONCAT_HEAD)
        assert len(head.inputs) == 2
        assert head.out == TensorSpec(96, 2)
        # the 1/8 stem transform reaches the head through one upsample
        align = next(n for n in graph.nodes if n.kind is NodeKind.ALIGN_UP)
        assert graph.node(align.inputs[0]).out.down_exp == 3
        assert align.out.down_exp == 2

    def test_output(self, single_block_graph, tiny_space):
        _, graph = single_block_graph
        out = graph.node(graph.output)
        assert out.kind is NodeKind.CLASSIFIER_3X3
        assert out.out == TensorSpec(tiny_space.num_classes, 2)
        assert graph.output_down_exp == 2
        assert downsample_factor(graph) == 1

    def test_structure_checker_agrees(self, single_block_graph, tiny_space):
        g, graph = single_block_graph
        assert check_structure(g, tiny_space, graph) == []


class TestResolutionAndWidth:
    def test_all_skip_keeps_width_and_resolution(self, space):
        g = Genotype(
            templates=(SKIP_SUM,) * space.num_templates,
            blocks=tuple(block(1, 1) for _ in range(space.num_blocks)),
        )
        graph = compile_graph(g, space)
        for i in range(2, len(graph.pool)):
            assert graph.node(graph.pool[i]).out == TensorSpec(48, 3)
        # the untouched 1/4 stem transform pins the head to 1/4
        assert graph.output_down_exp == 2
        assert downsample_factor(graph) == 1
        assert check_structure(g, space, graph) == []

    def test_chained_strides_deepen_and_widen(self, space):
        blocks = [
            block(1, 1, stride=2),   # 48@1/8  -> 96@1/16
            block(2, 2, stride=2),   # 96@1/16 -> 192@1/32
            block(3, 3, stride=2),   # 192@1/32 -> 384@1/64
        ] + [block(0, 0) for _ in range(space.num_blocks - 3)]
        g = Genotype(templates=(SEP_SUM,) * space.num_templates, blocks=tuple(blocks))
        graph = compile_graph(g, space)
        assert graph.node(graph.pool[2]).out == TensorSpec(96, 4)
        assert graph.node(graph.pool[3]).out == TensorSpec(192, 5)
        assert graph.node(graph.pool[4]).out == TensorSpec(384, 6)
        assert graph.max_down_exp == 6
        assert graph.strided_blocks == 3
        assert downsample_factor(graph) == 8
        assert check_structure(g, space, graph) == []

    def test_stride_hits_first_instantiation_only(self, space):
        blocks = [block(0, 1, repeats=3, stride=2)] + [
            block(0, 0) for _ in range(space.num_blocks - 1)
        ]
        g = Genotype(templates=(SEP_SUM,) * space.num_templates, blocks=tuple(blocks))
        graph = compile_graph(g, space)
        strides = [
            (n.repeat, n.stride) for n in graph.nodes
            if n.kind is NodeKind.OP and n.block == 0
        ]
        assert sorted(strides) == [(0, 2), (0, 2), (1, 1), (1, 1), (2, 1), (2, 1)]
        assert downsample_factor(graph) == 2

    def test_alignment_direction_depends_on_block_half(self, space):
        # inputs at 1/4 and 1/8: early blocks settle on the coarser grid,
        # late blocks on the finer one
        early = Genotype(
            templates=(SKIP_SUM,) * space.num_templates,
            blocks=tuple(block(0, 1) for _ in range(space.num_blocks)),
        )
        graph = compile_graph(early, space)
        agg0 = next(n for n in graph.nodes
                    if n.kind is NodeKind.AGGREGATE and n.block == 0)
        agg_last = next(n for n in graph.nodes
                        if n.kind is NodeKind.AGGREGATE and n.block == space.num_blocks - 1)
        assert agg0.out.down_exp == 3
        assert agg_last.out.down_exp == 2
        kinds0 = {n.kind for n in graph.nodes if n.block == 0}
        assert NodeKind.ALIGN_DOWN in kinds0
        kinds_last = {n.kind for n in graph.nodes if n.block == space.num_blocks - 1}
        assert NodeKind.ALIGN_UP in kinds_last


class TestProjectionsAndAggregates:
    def test_parameter_free_ops_get_projected_on_mismatch(self, space):
        g = Genotype(
            templates=(Template(OpKind.SKIP, OpKind.MAX_POOL_3X3, AggKind.SUM),)
            * space.num_templates,
            blocks=tuple([block(0, 0, stride=2)]
                         + [block(0, 0) for _ in range(space.num_blocks - 1)]),
        )
        graph = compile_graph(g, space)
        projs = [n for n in graph.nodes
                 if n.kind is NodeKind.TRANSFORM_1X1 and n.block == 0]
        assert len(projs) == 2
        for p in projs:
            assert graph.node(p.inputs[0]).out.channels == 48
            assert p.out.channels == 96
            assert p.param_count == 1 * 48 * 96 + 2 * 96
        assert check_structure(g, space, graph) == []

    def test_conv_ops_never_projected(self, space):
        g = Genotype(
            templates=(SEP_SUM,) * space.num_templates,
            blocks=tuple([block(0, 0, stride=2)]
                         + [block(0, 0) for _ in range(space.num_blocks - 1)]),
        )
        graph = compile_graph(g, space)
        assert not [n for n in graph.nodes
                    if n.kind is NodeKind.TRANSFORM_1X1 and n.block == 0]

    def test_concat_doubles_then_reduces(self, space):
        g = Genotype(
            templates=(Template(OpKind.SKIP, OpKind.SKIP, AggKind.CONCAT),)
            * space.num_templates,
            blocks=tuple(block(0, 1) for _ in range(space.num_blocks)),
        )
        graph = compile_graph(g, space)
        agg = next(n for n in graph.nodes
                   if n.kind is NodeKind.AGGREGATE and n.block == 0)
        assert agg.out.channels == 96
        red = next(n for n in graph.nodes
                   if n.kind is NodeKind.REDUCE_1X1 and n.block == 0)
        assert red.out.channels == 48
        assert graph.node(graph.pool[2]).out.channels == 48
        assert check_structure(g, space, graph) == []

    def test_concat_without_reduce_keeps_double_width(self):
        space = SpaceConfig(concat_reduce=False)
        g = Genotype(
            templates=(Template(OpKind.SKIP, OpKind.SKIP, AggKind.CONCAT),)
            * space.num_templates,
            blocks=tuple(block(0, 1) for _ in range(space.num_blocks)),
        )
        graph = compile_graph(g, space)
        assert graph.node(graph.pool[2]).out.channels == 96
        assert not [n for n in graph.nodes
                    if n.kind is NodeKind.REDUCE_1X1 and n.block is not None]
        assert check_structure(g, space, graph) == []


class TestRepeats:
    def test_repeats_chain_with_fresh_nodes(self, space):
        blocks = [block(0, 1, repeats=3)] + [block(0, 0)
                                             for _ in range(space.num_blocks - 1)]
        g = Genotype(templates=(SEP_SUM,) * space.num_templates, blocks=tuple(blocks))
        graph = compile_graph(g, space)
        aggs = [n for n in graph.nodes
                if n.kind is NodeKind.AGGREGATE and n.block == 0]
        assert [n.repeat for n in aggs] == [0, 1, 2]
        ops = [n for n in graph.nodes if n.kind is NodeKind.OP and n.block == 0]
        assert len(ops) == 6
        assert len({n.id for n in ops}) == 6
        # chaining: each later instantiation consumes the previous aggregate,
        # directly or through a projection/alignment node
        def feeds(src_id, node):
            if src_id in node.inputs:
                return True
            return any(src_id in graph.node(i).inputs for i in node.inputs)

        for rep in (1, 2):
            prev_agg = next(a for a in aggs if a.repeat == rep - 1)
            rep_ops = [n for n in ops if n.repeat == rep]
            assert any(feeds(prev_agg.id, n) for n in rep_ops)
        # the pool records only the final instantiation
        assert graph.pool[2] == aggs[2].id
        assert check_structure(g, space, graph) == []

    def test_pool_entry_spec_matches_rule_replay(self, space):
        rng = random.Random(9)
        for _ in range(50):
            g = sample_uniform(space, rng)
            graph = compile_graph(g, space)
            specs = expected_pool_specs(g, space)
            got = [(graph.node(i).out.channels, graph.node(i).out.down_exp)
                   for i in graph.pool]
            assert got == specs


class TestBookkeeping:
    def test_consumed_counts_double_reference(self, tiny_space):
        g = Genotype(templates=(SEP_SKIP_SUM,), blocks=(block(0, 0),))
        graph = compile_graph(g, tiny_space)
        assert graph.consumed == (2, 0, 0)

    def test_pool_size(self, space):
        g = sample_uniform(space, random.Random(1))
        graph = compile_graph(g, space)
        assert len(graph.pool) == 2 + space.num_blocks
        assert len(graph.consumed) == len(graph.pool)

    def test_invalid_genotype_rejected(self, space):
        g = sample_uniform(space, random.Random(1))
        bad = Genotype(templates=g.templates, blocks=g.blocks[:-1])
        with pytest.raises(ValueError, match="invalid genotype"):
            compile_graph(bad, space)

    def test_compile_is_deterministic(self, space):
        g = sample_uniform(space, random.Random(4))
        a = compile_graph(g, space)
        b = compile_graph(g, space)
        assert a.nodes == b.nodes
        assert a.pool == b.pool and a.consumed == b.consumed

    def test_invariants_on_random_sample(self, space):
        rng = random.Random(21)
        for _ in range(100):
            g = sample_uniform(space, rng)
            graph = compile_graph(g, space)
            assert check_structure(g, space, graph) == []

    def test_checker_detects_tampering(self, space):
        g = sample_uniform(space, random.Random(3))
        graph = compile_graph(g, space)
        nodes = list(graph.nodes)
        victim = next(i for i, n in enumerate(nodes) if n.kind is NodeKind.AGGREGATE)
        spec = nodes[victim].out
        nodes[victim] = dataclasses.replace(
            nodes[victim], out=TensorSpec(spec.channels + 1, spec.down_exp)
        )
        forged = GraphIR(nodes=tuple(nodes), pool=graph.pool,
                         consumed=graph.consumed, output=graph.output)
        assert check_structure(g, space, forged) != []


class TestDotExport:
    def test_dot_shape(self, single_block_graph):
        _, graph = single_block_graph
        dot = export_dot(graph)
        assert dot.startswith("digraph")
        assert dot.rstrip().endswith("}")
        node_lines = re.findall(r"^\s*n\d+ \[label=", dot, flags=re.M)
        assert len(node_lines) == 11
        assert "48ch @ 1/4" in dot and "96ch @ 1/4" in dot

    def test_dot_edges_match_graph(self, single_block_graph):
        _, graph = single_block_graph
        dot = export_dot(graph)
        edges = [l for l in dot.splitlines() if "->" in l]
        assert len(edges) == sum(len(n.inputs) for n in graph.nodes)

    def test_dot_marks_strides_and_repeats(self, space):
        blocks = [block(0, 1, repeats=2, stride=2)] + [
            block(0, 0) for _ in range(space.num_blocks - 1)
        ]
        g = Genotype(templates=(SEP_SUM,) * space.num_templates, blocks=tuple(blocks))
        dot = export_dot(compile_graph(g, space))
        assert "s2" in dot
        assert "cluster_block0_rep0" in dot
        assert "cluster_block0_rep1" in dot
        assert "cluster_block3" in dot
