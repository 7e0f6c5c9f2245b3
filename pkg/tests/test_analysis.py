import json
import math
import random

import pytest

from segsearch.analysis import (
    GROUPINGS,
    downsampling_proportions,
    read_log,
    reward_by_group,
    reward_windows,
    spearman,
    top_templates,
    used_templates,
)
from segsearch.genotype import (
    AggKind,
    BlockDecision,
    Genotype,
    OpKind,
    Template,
    to_obj,
)

T_SEP_SKIP = Template(OpKind.SEP_CONV_3X3, OpKind.SKIP, AggKind.SUM)
T_SKIP_SEP = Template(OpKind.SKIP, OpKind.SEP_CONV_3X3, AggKind.SUM)  # same canonical
T_GAP_CAT = Template(OpKind.GAP_CONV_1X1, OpKind.GAP_CONV_1X1, AggKind.CONCAT)


def geno(template_ids, templates=(T_SEP_SKIP, T_SKIP_SEP, T_GAP_CAT)):
    blocks = tuple(
        BlockDecision(loc1=0, loc2=0, template_id=tid, repeats=1, stride=1)
        for tid in template_ids
    )
    return Genotype(templates=tuple(templates), blocks=blocks)


def record(reward, factor=1, params=100_000, genotype=None):
    return {
        "index": 0,
        "epoch": 0,
        "genotype": to_obj(genotype if genotype is not None else geno([0])),
        "reward": reward,
        "metrics": None,
        "params": params,
        "downsample_factor": factor,
        "source": "controller",
    }


class TestSpearman:
    def test_identical_order(self):
        assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)

    def test_reversed_order(self):
        assert spearman([1, 2, 3, 4], [9, 7, 5, 3]) == pytest.approx(-1.0)

    def test_partial_agreement(self):
        # rank differences (0, -1, 1, -1, 1): 1 - 6*4/(5*24)
        assert spearman([1, 2, 3, 4, 5],
                        [10, 30, 20, 50, 40]) == pytest.approx(0.8)

    def test_ties_use_rank_correlation(self):
        # x ranks (1.5, 1.5, 3), y ranks (1, 2, 3): cov 1.5, sd sqrt(1.5)*sqrt(2)
        assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(math.sqrt(3) / 2)

    def test_monotone_transform_invariance(self):
        rng = random.Random(0)
        x = [rng.random() for _ in range(50)]
        y = [rng.random() for _ in range(50)]
        base = spearman(x, y)
        assert spearman(x, [math.exp(5 * v) for v in y]) == pytest.approx(base)
        assert spearman([v ** 3 for v in x], y) == pytest.approx(base)

    def test_errors(self):
        with pytest.raises(ValueError, match="mismatch"):
            spearman([1, 2], [1, 2, 3])
        with pytest.raises(ValueError, match="at least 2"):
            spearman([1], [1])
        with pytest.raises(ValueError, match="constant"):
            spearman([1, 1, 1], [1, 2, 3])


class TestDownsamplingProportions:
    def test_known_window(self):
        records = [record(0.5, factor=f) for f in (1, 2, 2, 4, 4, 4, 8, 8)]
        series = downsampling_proportions(records, window=8)
        assert series == [{1: 0.125, 2: 0.25, 4: 0.375, 8: 0.25}]

    def test_single_factor(self):
        records = [record(0.5, factor=1) for _ in range(4)]
        series = downsampling_proportions(records, window=4)
        assert series == [{1: 1.0, 2: 0.0, 4: 0.0, 8: 0.0}]

    def test_short_final_window_self_normalizes(self):
        records = [record(0.5, factor=1)] * 4 + [record(0.5, factor=8)] * 2
        series = downsampling_proportions(records, window=4)
        assert len(series) == 2
        for shares in series:
            assert sum(shares.values()) == pytest.approx(1.0)
        assert series[1][8] == pytest.approx(1.0)

    def test_domain_extends_beyond_eight(self):
        records = [record(0.5, factor=16), record(0.5, factor=1)]
        series = downsampling_proportions(records, window=2)
        assert set(series[0]) == {1, 2, 4, 8, 16}

    def test_errors(self):
        with pytest.raises(ValueError):
            downsampling_proportions([record(0.5)], window=0)
        with pytest.raises(ValueError):
            downsampling_proportions([], window=4)


class TestRewardWindows:
    def test_medians_per_window(self):
        records = [record(r / 10) for r in range(10)]
        assert reward_windows(records, 5) == pytest.approx([0.2, 0.7])
        assert reward_windows(records, 4) == pytest.approx([0.15, 0.55, 0.85])

    def test_whole_log_window(self):
        records = [record(r) for r in (0.2, 0.9, 0.4)]
        assert reward_windows(records, 100) == pytest.approx([0.4])


class TestRewardByGroup:
    def test_single_record_stats(self):
        stats = reward_by_group([record(0.6, factor=2)], "downsample_factor")
        assert set(stats) == {2}
        s = stats[2]
        assert s.count == 1
        assert s.minimum == s.q1 == s.median == s.q3 == s.maximum == s.mean == 0.6

    def test_quartiles(self):
        records = [record(r, factor=4) for r in (0.1, 0.2, 0.3, 0.4)]
        s = reward_by_group(records, "downsample_factor")[4]
        assert (s.minimum, s.q1, s.median, s.q3, s.maximum) == pytest.approx(
            (0.1, 0.175, 0.25, 0.325, 0.4)
        )
        assert s.mean == pytest.approx(0.25)

    def test_param_buckets(self):
        records = [
            record(0.5, params=49_999),
            record(0.6, params=50_000),
            record(0.7, params=125_000),
        ]
        stats = reward_by_group(records, "param_bucket", bucket_width=50_000)
        assert set(stats) == {0, 1, 2}
        assert stats[2].mean == pytest.approx(0.7)

    def test_min_reward_filter(self):
        records = [record(0.2, factor=1), record(0.8, factor=1)]
        stats = reward_by_group(records, "downsample_factor", min_reward=0.4)
        assert stats[1].count == 1
        assert stats[1].mean == pytest.approx(0.8)

    def test_template_grouping_merges_canonical_forms(self):
        # blocks pick templates 0 and 1, which canonicalize identically
        records = [record(0.5, genotype=geno([0, 1]))]
        stats = reward_by_group(records, "template_id")
        assert set(stats) == {T_SEP_SKIP.canonical()}
        assert stats[T_SEP_SKIP.canonical()].count == 1

    def test_template_grouping_shares_reward_across_templates(self):
        records = [record(0.5, genotype=geno([0, 2])), record(0.9, genotype=geno([2]))]
        stats = reward_by_group(records, "template_id")
        assert stats[T_SEP_SKIP.canonical()].count == 1
        cat = stats[T_GAP_CAT.canonical()]
        assert cat.count == 2
        assert cat.mean == pytest.approx(0.7)

    def test_unused_template_not_counted(self):
        assert used_templates(geno([0])) == {T_SEP_SKIP.canonical()}

    def test_unknown_grouping_rejected(self):
        with pytest.raises(ValueError, match="grouping"):
            reward_by_group([record(0.5)], "flops")
        assert "template_id" in GROUPINGS

    def test_bad_bucket_width_rejected(self):
        with pytest.raises(ValueError):
            reward_by_group([record(0.5)], "param_bucket", bucket_width=0)


class TestTopTemplates:
    def test_orders_by_mean_reward(self):
        records = [
            record(0.9, genotype=geno([0])),
            record(0.3, genotype=geno([2])),
            record(0.5, genotype=geno([2])),
        ]
        top = top_templates(records, k=2)
        assert [t for t, _ in top] == [T_SEP_SKIP.canonical(), T_GAP_CAT.canonical()]
        assert top[0][1] == pytest.approx(0.9)
        assert top[1][1] == pytest.approx(0.4)

    def test_tie_broken_by_usage_count(self):
        records = [
            record(0.5, genotype=geno([0])),
            record(0.5, genotype=geno([2])),
            record(0.5, genotype=geno([2])),
        ]
        top = top_templates(records, k=1)
        assert top[0][0] == T_GAP_CAT.canonical()

    def test_k_larger_than_observed(self):
        records = [record(0.5, genotype=geno([0]))]
        assert len(top_templates(records, k=10)) == 1

    def test_min_reward_filter(self):
        records = [
            record(0.2, genotype=geno([0])),
            record(0.9, genotype=geno([2])),
        ]
        top = top_templates(records, k=5, min_reward=0.4)
        assert [t for t, _ in top] == [T_GAP_CAT.canonical()]

    def test_k_validation(self):
        with pytest.raises(ValueError):
            top_templates([record(0.5)], k=0)


class TestReadLog:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "log.jsonl"
        records = [record(0.1 * (i + 1), factor=2 ** (i % 4)) for i in range(8)]
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        loaded = read_log(path)
        assert loaded == records
        series = downsampling_proportions(loaded, window=8)
        assert sum(series[0].values()) == pytest.approx(1.0)
