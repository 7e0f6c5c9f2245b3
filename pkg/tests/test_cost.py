import random

import pytest

from cost_oracle import oracle_flops, oracle_generated_params
from segsearch.cost import (
    DEFAULT_FLOPS_HW,
    cost_report,
    count_flops,
    count_params,
    summarize,
)
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
)

SEP_SKIP_SUM = Template(OpKind.SEP_CONV_3X3, OpKind.SKIP, AggKind.SUM)
SKIP_SUM = Template(OpKind.SKIP, OpKind.SKIP, AggKind.SUM)


def block(loc1, loc2, template_id=0, repeats=1, stride=1):
    return BlockDecision(loc1=loc1, loc2=loc2, template_id=template_id,
                         repeats=repeats, stride=stride)


@pytest.fixture
def single_block(tiny_space):
    g = Genotype(templates=(SEP_SKIP_SUM,), blocks=(block(0, 0),))
    return g, compile_graph(g, tiny_space)


class TestParams:
    def test_separable_conv_node(self, single_block):
        _, graph = single_block
        sep = next(n for n in graph.nodes
                   if n.kind is NodeKind.OP and n.op is OpKind.SEP_CONV_3X3)
        # 9*48 + 2*48 + 48*48 + 2*48
        assert sep.param_count == 2928

    def test_skip_node_free(self, single_block):
        _, graph = single_block
        skip = next(n for n in graph.nodes
                    if n.kind is NodeKind.OP and n.op is OpKind.SKIP)
        assert skip.param_count == 0

    def test_single_block_totals(self, single_block, tiny_space):
        _, graph = single_block
        report = count_params(graph, tiny_space)
        # 1248 + 1632 stem transforms, 2928 sep conv, 4704 head reduce
        # (96 -> 48), 8227 classifier
        assert report.params_generated == 18739
        assert report.params_total == 78739

    def test_report_invariants(self, space):
        rng = random.Random(17)
        for _ in range(30):
            g = sample_uniform(space, rng)
            report = count_params(compile_graph(g, space), space)
            assert report.params_total == report.params_generated + space.stem_param_count
            assert sum(p for _, _, p in report.per_node) == report.params_generated
            assert all(p > 0 for _, _, p in report.per_node)

    def test_matches_oracle_on_random_genotypes(self, space):
        rng = random.Random(99)
        for _ in range(100):
            g = sample_uniform(space, rng)
            graph = compile_graph(g, space)
            assert count_params(graph, space).params_generated == \
                oracle_generated_params(graph)

    def test_matches_oracle_without_concat_reduce(self):
        space = SpaceConfig(concat_reduce=False)
        rng = random.Random(5)
        for _ in range(30):
            g = sample_uniform(space, rng)
            graph = compile_graph(g, space)
            assert count_params(graph, space).params_generated == \
                oracle_generated_params(graph)

    def test_dilation_is_parameter_free(self, space):
        rng = random.Random(31)
        for _ in range(30):
            g = sample_uniform(space, rng)
            swapped = Genotype(
                templates=tuple(
                    Template(
                        *(OpKind.SEP_CONV_5X5_DIL6 if o is OpKind.SEP_CONV_5X5 else o
                          for o in (t.op1, t.op2)),
                        t.agg,
                    )
                    for t in g.templates
                ),
                blocks=g.blocks,
            )
            a = count_params(compile_graph(g, space), space)
            b = count_params(compile_graph(swapped, space), space)
            assert a.params_generated == b.params_generated
            assert count_flops(compile_graph(g, space), space, DEFAULT_FLOPS_HW) == \
                count_flops(compile_graph(swapped, space), space, DEFAULT_FLOPS_HW)


class TestMonotonicity:
    @staticmethod
    def _extend(g, space, rng):
        """Same genotype plus one extra block that carries a conv op."""
        bigger = SpaceConfig(
            num_blocks=space.num_blocks + 1, num_templates=space.num_templates
        )
        conv_ids = [
            i for i, t in enumerate(g.templates)
            if t.op1 not in (OpKind.SKIP, OpKind.MAX_POOL_3X3)
            or t.op2 not in (OpKind.SKIP, OpKind.MAX_POOL_3X3)
        ]
        if not conv_ids:
            return None, None
        pool = 2 + space.num_blocks
        extra = BlockDecision(
            loc1=rng.randrange(pool), loc2=rng.randrange(pool),
            template_id=rng.choice(conv_ids), repeats=rng.randint(1, bigger.k_max),
            stride=1,
        )
        return Genotype(g.templates, g.blocks + (extra,)), bigger

    def test_conv_extension_never_shrinks(self):
        rng = random.Random(7)
        for _ in range(200):
            space = SpaceConfig(num_blocks=rng.randint(1, 6), num_templates=3)
            g = sample_uniform(space, rng)
            extended, bigger = self._extend(g, space, rng)
            if extended is None:
                continue
            before = count_params(compile_graph(g, space), space).params_generated
            after = count_params(compile_graph(extended, bigger), bigger).params_generated
            assert after >= before

    def test_parameter_free_extension_can_shrink(self):
        # boundary case: a skip/skip/sum block that swallows two previously
        # unused same-width pool entries removes their channels from the head
        # concat, shrinking the head reduce while adding nothing itself
        small = SpaceConfig(num_blocks=1, num_templates=1)
        g1 = Genotype(templates=(SKIP_SUM,), blocks=(block(0, 0),))
        before = count_params(compile_graph(g1, small), small).params_generated

        big = SpaceConfig(num_blocks=2, num_templates=1)
        g2 = Genotype(templates=(SKIP_SUM,), blocks=(block(0, 0), block(1, 2)))
        after = count_params(compile_graph(g2, big), big).params_generated
        assert after == before - 48 * 48


class TestFlops:
    def test_single_block_total(self, single_block, tiny_space):
        _, graph = single_block
        assert count_flops(graph, tiny_space, (64, 64)) == 8_749_056

    def test_single_conv_closed_form(self, tiny_space):
        nodes = (
            Node(id=0, kind=NodeKind.STEM_SEED, inputs=(), out=TensorSpec(48, 2)),
            Node(id=1, kind=NodeKind.TRANSFORM_1X1, inputs=(0,),
                 out=TensorSpec(48, 2), param_count=48 * 48 + 96),
        )
        graph = GraphIR(nodes=nodes, pool=(1,), consumed=(0,), output=1)
        assert count_flops(graph, tiny_space, (64, 64)) == 1_179_648

    def test_zero_param_graph(self, tiny_space):
        nodes = (
            Node(id=0, kind=NodeKind.STEM_SEED, inputs=(), out=TensorSpec(48, 2)),
            Node(id=1, kind=NodeKind.ALIGN_UP, inputs=(0,), out=TensorSpec(48, 1)),
        )
        graph = GraphIR(nodes=nodes, pool=(1,), consumed=(0,), output=1)
        assert count_flops(graph, tiny_space, (64, 64)) == 0

    def test_quadratic_scaling(self, space):
        rng = random.Random(13)
        for _ in range(20):
            g = sample_uniform(space, rng)
            graph = compile_graph(g, space)
            base = count_flops(graph, space, (64, 64))
            assert count_flops(graph, space, (128, 128)) == 4 * base

    def test_matches_oracle(self, space):
        rng = random.Random(43)
        for _ in range(100):
            g = sample_uniform(space, rng)
            graph = compile_graph(g, space)
            assert count_flops(graph, space, (64, 64)) == oracle_flops(graph, (64, 64))

    def test_indivisible_resolution_rejected(self, space):
        g = sample_uniform(space, random.Random(3))
        graph = compile_graph(g, space)
        with pytest.raises(ValueError, match="divisible"):
            count_flops(graph, space, (60, 64))


class TestReporting:
    def test_cost_report_with_flops(self, single_block, tiny_space):
        _, graph = single_block
        report = cost_report(graph, tiny_space, (64, 64))
        assert report.flops == 8_749_056
        assert report.flops_hw == (64, 64)
        assert report.output_resolution == "1/4"

    def test_summarize_record(self, single_block, tiny_space):
        _, graph = single_block
        record = summarize(graph, tiny_space)
        assert record["params"] == 78739
        assert record["flops"] == 8_749_056
        assert record["downsample_factor"] == 1
        assert record["output_down_exp"] == 2
        assert record["max_down_exp"] == 3
        assert record["num_nodes"] == 11
