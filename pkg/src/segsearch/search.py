"""Search orchestration: run directories, checkpoints, resumption, the
random-search baseline, and the two-evaluator reranking experiment.

A run directory holds a config snapshot, the append-only search log (one JSON
line per architecture), periodic controller checkpoints, and a summary record.
Checkpoints are written atomically so a killed run always resumes from a
consistent state; on resume the log is truncated to the checkpoint's index,
which keeps indices unique.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import analysis
from .genotype import Genotype, SpaceConfig, sample_uniform, to_obj as genotype_to_obj
from .policy import Controller, ControllerConfig, load_checkpoint, save_checkpoint
from .rl import (
    Baseline,
    Evaluator,
    PpoConfig,
    SearchRecord,
    build_record,
    evaluate_batch,
    make_optimizer,
    train_controller,
)

LOG_NAME = "log.jsonl"
CONFIG_NAME = "config.json"
SUMMARY_NAME = "summary.json"
CHECKPOINT_DIR = "checkpoints"
LATEST_CHECKPOINT = "latest.pt"


@dataclass(frozen=True)
class SearchSettings:
    budget: int = 2000
    seed: int = 0
    checkpoint_every: int = 100
    best_k: int = 5
    window: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.checkpoint_every <= 0 or self.window <= 0 or self.best_k <= 0:
            raise ValueError("checkpoint_every, window, best_k must be positive")


@dataclass
class SearchSummary:
    budget: int
    window: int
    best: list[dict] = field(default_factory=list)
    median_reward_windows: list[float] = field(default_factory=list)
    downsampling_windows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "window": self.window,
            "best": self.best,
            "median_reward_windows": self.median_reward_windows,
            "downsampling_windows": [
                {str(k): v for k, v in window.items()}
                for window in self.downsampling_windows
            ],
        }


def write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _truncate_log(log_path: Path, next_index: int) -> None:
    if not log_path.exists():
        return
    kept = [
        line
        for line in log_path.read_text(encoding="utf-8").splitlines()
        if line.strip() and json.loads(line)["index"] < next_index
    ]
    tmp = log_path.with_name(log_path.name + ".tmp")
    tmp.write_text("".join(l + "\n" for l in kept), encoding="utf-8")
    os.replace(tmp, log_path)


def summarize_run(records: list[dict], settings: SearchSettings) -> SearchSummary:
    summary = SearchSummary(budget=settings.budget, window=settings.window)
    if not records:
        return summary
    ranked = sorted(records, key=lambda r: (-r["reward"], r["index"]))
    summary.best = [
        {"index": r["index"], "reward": r["reward"], "genotype": r["genotype"]}
        for r in ranked[: settings.best_k]
    ]
    summary.median_reward_windows = analysis.reward_windows(records, settings.window)
    summary.downsampling_windows = analysis.downsampling_proportions(
        records, settings.window
    )
    return summary


def run_search(
    out_dir,
    space: SpaceConfig,
    ppo: PpoConfig,
    settings: SearchSettings,
    evaluator: Evaluator,
    resume: bool = False,
    config_snapshot: dict | None = None,
) -> SearchSummary:
    out = Path(out_dir)
    ckpt_dir = out / CHECKPOINT_DIR
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME
    latest = ckpt_dir / LATEST_CHECKPOINT

    snap = {
        "space": asdict(space),
        "ppo": asdict(ppo),
        "settings": asdict(settings),
    }
    if config_snapshot:
        snap.update(config_snapshot)
    write_json_atomic(out / CONFIG_NAME, snap)

    start_index = 0
    optimizer = None
    baseline = None
    generator = torch.Generator().manual_seed(settings.seed)
    if resume and latest.exists():
        controller, extra = load_checkpoint(latest, expected_space=space)
        optimizer = make_optimizer(controller, ppo)
        optimizer.load_state_dict(extra["optimizer"])
        baseline = Baseline(
            decay=extra["baseline"]["decay"],
            ema_reward=extra["baseline"]["ema_reward"],
            initialized=extra["baseline"]["initialized"],
        )
        generator.set_state(extra["torch_rng"])
        start_index = int(extra["next_index"])
        _truncate_log(log_path, start_index)
    else:
        controller = Controller(space, ControllerConfig(seed=settings.seed))
        if log_path.exists():
            log_path.unlink()

    def checkpoint(next_index: int) -> None:
        extra = {
            "optimizer": optimizer.state_dict(),
            "baseline": asdict(baseline),
            "torch_rng": generator.get_state(),
            "next_index": next_index,
        }
        tmp = ckpt_dir / (LATEST_CHECKPOINT + ".tmp")
        save_checkpoint(controller, tmp, extra)
        os.replace(tmp, latest)
        numbered = ckpt_dir / f"ckpt_{next_index:06d}.pt"
        save_checkpoint(controller, numbered, extra)

    last_ckpt = start_index
    remaining = settings.budget - start_index
    if remaining > 0:
        optimizer = optimizer or make_optimizer(controller, ppo)
        baseline = baseline or Baseline(decay=ppo.baseline_decay)
        with open(log_path, "a", encoding="utf-8") as log_fh:

            def on_record(record: SearchRecord) -> None:
                log_fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                log_fh.flush()

            def on_batch_end(next_index: int, _stats) -> None:
                nonlocal last_ckpt
                crossed = (
                    next_index // settings.checkpoint_every
                    > last_ckpt // settings.checkpoint_every
                )
                if crossed or next_index >= settings.budget:
                    checkpoint(next_index)
                    last_ckpt = next_index

            train_controller(
                controller,
                evaluator,
                ppo,
                remaining,
                generator,
                optimizer=optimizer,
                baseline=baseline,
                start_index=start_index,
                workers=settings.workers,
                on_record=on_record,
                on_batch_end=on_batch_end,
            )

    records = analysis.read_log(log_path) if log_path.exists() else []
    summary = summarize_run(records, settings)
    write_json_atomic(out / SUMMARY_NAME, summary.to_dict())
    return summary


def run_random(
    space: SpaceConfig,
    count: int,
    seed: int,
    evaluator: Evaluator,
    out_dir=None,
    workers: int = 1,
    batch_size: int = 16,
) -> list[SearchRecord]:
    """Evaluate ``count`` genotypes drawn from the masked-uniform prior (the
    untrained controller distribution), tagged source="random"."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = random.Random(seed)
    genotypes = [sample_uniform(space, rng) for _ in range(count)]
    outcomes = evaluate_batch(
        evaluator, list(zip(genotypes, range(count))), workers
    )
    records = [
        build_record(space, g, i, i // batch_size, metrics, rew, "random")
        for i, (g, (metrics, rew, _exc)) in enumerate(zip(genotypes, outcomes))
    ]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json_atomic(
            out / CONFIG_NAME,
            {"space": asdict(space), "count": count, "seed": seed},
        )
        with open(out / LOG_NAME, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    return records


@dataclass(frozen=True)
class RerankPair:
    genotype: Genotype
    reward_short: float
    reward_long: float


@dataclass(frozen=True)
class RerankResult:
    pairs: tuple[RerankPair, ...]

    @property
    def short_rewards(self) -> list[float]:
        return [p.reward_short for p in self.pairs]

    @property
    def long_rewards(self) -> list[float]:
        return [p.reward_long for p in self.pairs]

    def spearman_rho(self) -> float:
        return analysis.spearman(self.short_rewards, self.long_rewards)


def rerank_experiment(
    genotypes: list[Genotype],
    evaluator_short: Evaluator,
    evaluator_long: Evaluator,
) -> RerankResult:
    """Score each genotype under two evaluators for rank-correlation analysis.
    Per-genotype failures score 0 under the failing evaluator."""
    if len(genotypes) < 3:
        raise ValueError(f"need at least 3 genotypes, got {len(genotypes)}")
    items = list(zip(genotypes, range(len(genotypes))))
    short = evaluate_batch(evaluator_short, items)
    long_ = evaluate_batch(evaluator_long, items)
    pairs = tuple(
        RerankPair(g, s_rew, l_rew)
        for g, (_m1, s_rew, _e1), (_m2, l_rew, _e2) in zip(genotypes, short, long_)
    )
    return RerankResult(pairs)


def rerank_records(result: RerankResult) -> list[dict]:
    """Line-delimited form of a rerank result: one record per pair plus a
    trailing record with the rank correlation."""
    lines = [
        {
            "index": i,
            "genotype": genotype_to_obj(p.genotype),
            "reward_short": p.reward_short,
            "reward_long": p.reward_long,
        }
        for i, p in enumerate(result.pairs)
    ]
    lines.append({"spearman": result.spearman_rho()})
    return lines
