"""Post-hoc diagnostics over search logs.

Everything here is a pure function of parsed log records (dicts, one per
architecture), so analyses can be rerun at any time and always agree with the
log on disk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .genotype import Genotype, Template, from_obj as genotype_from_obj

GROUPINGS = ("downsample_factor", "param_bucket", "template_id")


def read_log(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _ranks(values: list[float]) -> list[float]:
    """Ranks 1..n; ties share the average of the ranks they straddle."""
    n = len(values)
    order = sorted(range(n), key=lambda i: values[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        shared = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = shared
        i = j + 1
    return ranks


def spearman(x: list[float], y: list[float]) -> float:
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise ValueError("need at least 2 points")
    rx, ry = _ranks(list(x)), _ranks(list(y))
    if len(set(x)) == n and len(set(y)) == n:
        d2 = sum((a - b) ** 2 for a, b in zip(rx, ry))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    # ties: fall back to the product-moment correlation of the ranks
    mx = sum(rx) / n
    my = sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0 or vy == 0:
        raise ValueError("constant input has no rank correlation")
    return cov / math.sqrt(vx * vy)


def _factor_domain(records: list[dict]) -> list[int]:
    top = 8
    for rec in records:
        top = max(top, int(rec["downsample_factor"]))
    exps = int(math.log2(top))
    return [2**e for e in range(exps + 1)]


def downsampling_proportions(
    records: list[dict], window: int
) -> list[dict[int, float]]:
    """Per consecutive window of ``window`` records, the share of each
    downsampling factor.  Shares in every window sum to 1; a short final
    window is normalized over its own size."""
    if window <= 0:
        raise ValueError("window must be positive")
    if not records:
        raise ValueError("empty log")
    factors = _factor_domain(records)
    series = []
    for start in range(0, len(records), window):
        chunk = records[start : start + window]
        counts = {f: 0 for f in factors}
        for rec in chunk:
            counts[int(rec["downsample_factor"])] += 1
        series.append({f: counts[f] / len(chunk) for f in factors})
    return series


def reward_windows(records: list[dict], window: int) -> list[float]:
    """Median reward per consecutive window of ``window`` records."""
    if window <= 0:
        raise ValueError("window must be positive")
    if not records:
        raise ValueError("empty log")
    return [
        float(np.median([rec["reward"] for rec in records[start : start + window]]))
        for start in range(0, len(records), window)
    ]


@dataclass(frozen=True)
class GroupStats:
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    mean: float


def _stats(rewards: list[float]) -> GroupStats:
    lo, q1, med, q3, hi = (
        float(v) for v in np.percentile(rewards, [0, 25, 50, 75, 100])
    )
    return GroupStats(
        count=len(rewards),
        minimum=lo,
        q1=q1,
        median=med,
        q3=q3,
        maximum=hi,
        mean=float(np.mean(rewards)),
    )


def used_templates(genotype: Genotype) -> set[Template]:
    """Canonical templates the architecture actually instantiates: a template
    counts only if at least one block chose it."""
    chosen = {blk.template_id for blk in genotype.blocks}
    return {genotype.templates[tid].canonical() for tid in chosen}


def reward_by_group(
    records: list[dict],
    grouping: str,
    min_reward: float | None = None,
    bucket_width: int = 50_000,
):
    """Reward distribution per group.

    Groupings: "downsample_factor" (architecture factor), "param_bucket"
    (floor(params / bucket_width)), "template_id" (canonical template; one
    architecture contributes its reward to every distinct template it uses,
    so one reward may appear under several templates).
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")
    if bucket_width <= 0:
        raise ValueError("bucket_width must be positive")
    kept = [
        rec
        for rec in records
        if min_reward is None or rec["reward"] >= min_reward
    ]
    rewards_by_key: dict = {}
    for rec in kept:
        if grouping == "downsample_factor":
            keys = [int(rec["downsample_factor"])]
        elif grouping == "param_bucket":
            keys = [int(rec["params"]) // bucket_width]
        else:
            keys = sorted(
                used_templates(genotype_from_obj(rec["genotype"])),
                key=lambda t: (int(t.op1), int(t.op2), int(t.agg)),
            )
        for key in keys:
            rewards_by_key.setdefault(key, []).append(float(rec["reward"]))
    return {key: _stats(vals) for key, vals in sorted(rewards_by_key.items(), key=_key_order)}


def _key_order(item):
    key = item[0]
    if isinstance(key, Template):
        return (int(key.op1), int(key.op2), int(key.agg))
    return (key,)


def top_templates(
    records: list[dict], k: int, min_reward: float | None = None
) -> list[tuple[Template, float]]:
    """The k canonical templates with the highest mean reward; ties broken by
    higher usage count, then template code order."""
    if k <= 0:
        raise ValueError("k must be positive")
    stats = reward_by_group(records, "template_id", min_reward=min_reward)
    ordered = sorted(
        stats.items(),
        key=lambda item: (
            -item[1].mean,
            -item[1].count,
            int(item[0].op1),
            int(item[0].op2),
            int(item[0].agg),
        ),
    )
    return [(template, s.mean) for template, s in ordered[:k]]
