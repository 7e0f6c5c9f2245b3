"""PPO training for the controller.

One architecture is one episode: the reward is terminal, so a single
episode-level advantage (reward minus a moving-average baseline) is broadcast
to every decision of the trajectory.  Updates use the clipped surrogate with
an entropy bonus, global-norm gradient clipping, and several passes over each
batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import torch

from .cost import cost_report
from .evaluators import EvaluationFailed, MetricTriple, reward as reward_of
from .genotype import Genotype, SpaceConfig, from_obj as genotype_from_obj, to_obj as genotype_to_obj
from .graph import compile as compile_graph
from .policy import Controller, Trajectory, genotype_to_decisions


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float = 1e-4
    clip_epsilon: float = 0.2
    update_epochs: int = 4
    batch_size: int = 16
    entropy_coef: float = 0.01
    baseline_decay: float = 0.95
    max_grad_norm: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError(f"clip_epsilon must be in (0,1), got {self.clip_epsilon}")
        if not 0.0 < self.baseline_decay < 1.0:
            raise ValueError(f"baseline_decay must be in (0,1), got {self.baseline_decay}")
        if self.batch_size < 1 or self.update_epochs < 1:
            raise ValueError("batch_size and update_epochs must be >= 1")


@dataclass
class Baseline:
    """Exponential moving average of batch-mean rewards."""

    decay: float = 0.95
    ema_reward: float = 0.0
    initialized: bool = False

    def update(self, batch_mean: float) -> None:
        if self.initialized:
            self.ema_reward = self.decay * self.ema_reward + (1.0 - self.decay) * batch_mean
        else:
            self.ema_reward = batch_mean
            self.initialized = True


def compute_advantages(batch: list[Trajectory], baseline: Baseline) -> list[Trajectory]:
    """Attach advantage = reward − baseline to every trajectory, then fold the
    batch mean into the baseline.  An uninitialized baseline is set to the
    batch mean first, so the first batch is centered."""
    if not batch:
        raise ValueError("empty batch")
    rewards = []
    for traj in batch:
        if traj.reward is None:
            raise ValueError("trajectory has no reward")
        rewards.append(traj.reward)
    mean = sum(rewards) / len(rewards)
    if not baseline.initialized:
        baseline.update(mean)
        ref = baseline.ema_reward
    else:
        ref = baseline.ema_reward
        baseline.update(mean)
    for traj in batch:
        traj.advantage = traj.reward - ref
    return batch


@dataclass(frozen=True)
class UpdateStats:
    loss: float
    policy_loss: float
    entropy: float
    first_epoch_mean_ratio: float
    clip_fraction: float
    grad_norm: float


def ppo_update(
    controller: Controller,
    optimizer: torch.optim.Optimizer,
    batch: list[Trajectory],
    cfg: PpoConfig,
) -> UpdateStats:
    space = controller.space
    idx = torch.tensor(
        [genotype_to_decisions(space, t.genotype) for t in batch], dtype=torch.long
    )
    old_logps = torch.tensor(
        [[d.log_prob for d in t.decisions] for t in batch], dtype=controller.dtype
    )
    for t in batch:
        if t.advantage is None:
            raise ValueError("trajectory has no advantage; run compute_advantages")
    adv = torch.tensor(
        [t.advantage for t in batch], dtype=controller.dtype
    ).unsqueeze(1)

    losses, policy_losses, entropies, clip_fracs, grad_norms = [], [], [], [], []
    first_ratio = None
    for _ in range(cfg.update_epochs):
        new_logps, ents = controller.evaluate_decisions(idx)
        ratio = torch.exp(new_logps - old_logps)
        if first_ratio is None:
            first_ratio = float(ratio.detach().mean())
        clipped = torch.clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
        surrogate = torch.minimum(ratio * adv, clipped * adv)
        policy_loss = -surrogate.mean()
        entropy = ents.mean()
        loss = policy_loss - cfg.entropy_coef * entropy
        if not torch.isfinite(loss):
            bad = torch.nonzero(~torch.isfinite(surrogate).all(dim=1)).flatten()
            which = int(bad[0]) if len(bad) else -1
            raise NonFiniteLossError(
                f"non-finite PPO loss (batch element {which}): "
                f"genotype {genotype_to_obj(batch[which].genotype) if which >= 0 else '?'}"
            )
        optimizer.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(
            controller.parameters(), cfg.max_grad_norm
        )
        optimizer.step()
        losses.append(float(loss.detach()))
        policy_losses.append(float(policy_loss.detach()))
        entropies.append(float(entropy.detach()))
        clip_fracs.append(
            float(((ratio.detach() - 1.0).abs() > cfg.clip_epsilon).double().mean())
        )
        grad_norms.append(float(grad_norm))

    n = len(losses)
    return UpdateStats(
        loss=sum(losses) / n,
        policy_loss=sum(policy_losses) / n,
        entropy=sum(entropies) / n,
        first_epoch_mean_ratio=first_ratio,
        clip_fraction=sum(clip_fracs) / n,
        grad_norm=sum(grad_norms) / n,
    )


def make_optimizer(controller: Controller, cfg: PpoConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        controller.parameters(),
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
    )


@dataclass(frozen=True)
class SearchRecord:
    """One line of the search log: everything needed to re-analyse a run
    without re-running it."""

    index: int
    epoch: int
    genotype: Genotype
    reward: float
    metrics: MetricTriple | None
    params: int
    downsample_factor: int
    source: str  # "controller" or "random"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "epoch": self.epoch,
            "genotype": genotype_to_obj(self.genotype),
            "reward": self.reward,
            "metrics": None
            if self.metrics is None
            else {
                "miou": self.metrics.miou,
                "mean_acc": self.metrics.mean_acc,
                "fw_iou": self.metrics.fw_iou,
            },
            "params": self.params,
            "downsample_factor": self.downsample_factor,
            "source": self.source,
        }

    @staticmethod
    def from_dict(obj: dict) -> "SearchRecord":
        metrics = obj.get("metrics")
        return SearchRecord(
            index=int(obj["index"]),
            epoch=int(obj["epoch"]),
            genotype=genotype_from_obj(obj["genotype"]),
            reward=float(obj["reward"]),
            metrics=None
            if metrics is None
            else MetricTriple(
                float(metrics["miou"]),
                float(metrics["mean_acc"]),
                float(metrics["fw_iou"]),
            ),
            params=int(obj["params"]),
            downsample_factor=int(obj["downsample_factor"]),
            source=str(obj["source"]),
        )


class Evaluator(Protocol):
    def evaluate(self, genotype: Genotype, index: int) -> MetricTriple: ...


@dataclass
class TrainHistory:
    records: list[SearchRecord] = field(default_factory=list)
    update_stats: list[UpdateStats] = field(default_factory=list)


def evaluate_outcome(
    evaluator: Evaluator, genotype: Genotype, index: int
) -> tuple[MetricTriple | None, float, Exception | None]:
    """Score one architecture; failures become (None, 0.0, error) so the
    search records them instead of dying."""
    try:
        metrics = evaluator.evaluate(genotype, index)
        return metrics, reward_of(metrics), None
    except EvaluationFailed as exc:
        return None, 0.0, exc


def evaluate_batch(
    evaluator: Evaluator,
    items: list[tuple[Genotype, int]],
    workers: int = 1,
) -> list[tuple[MetricTriple | None, float, Exception | None]]:
    if workers <= 1 or len(items) <= 1:
        return [evaluate_outcome(evaluator, g, i) for g, i in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda gi: evaluate_outcome(evaluator, *gi), items))


def build_record(
    space: SpaceConfig,
    genotype: Genotype,
    index: int,
    epoch: int,
    metrics: MetricTriple | None,
    rew: float,
    source: str,
) -> SearchRecord:
    report = cost_report(compile_graph(genotype, space), space)
    return SearchRecord(
        index=index,
        epoch=epoch,
        genotype=genotype,
        reward=rew,
        metrics=metrics,
        params=report.params_total,
        downsample_factor=report.downsample_factor,
        source=source,
    )


def train_controller(
    controller: Controller,
    evaluator: Evaluator,
    cfg: PpoConfig,
    budget: int,
    generator: torch.Generator,
    optimizer: torch.optim.Optimizer | None = None,
    baseline: Baseline | None = None,
    start_index: int = 0,
    workers: int = 1,
    on_record: Callable[[SearchRecord], None] | None = None,
    on_batch_end: Callable[[int, UpdateStats], None] | None = None,
    on_failure: Callable[[int, Exception], None] | None = None,
) -> TrainHistory:
    """Sample/evaluate/update until ``budget`` architectures have been scored,
    counting from ``start_index``.  Per-architecture records stream through
    ``on_record`` as they are produced; ``on_batch_end`` fires after each
    parameter update with the next architecture index."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    optimizer = optimizer or make_optimizer(controller, cfg)
    baseline = baseline or Baseline(decay=cfg.baseline_decay)
    history = TrainHistory()
    index = start_index
    end = start_index + budget
    while index < end:
        take = min(cfg.batch_size, end - index)
        batch = controller.sample_batch(take, generator)
        indices = list(range(index, index + take))
        outcomes = evaluate_batch(
            evaluator, [(t.genotype, i) for t, i in zip(batch, indices)], workers
        )
        for traj, i, (metrics, rew, exc) in zip(batch, indices, outcomes):
            traj.reward = rew
            if exc is not None and on_failure is not None:
                on_failure(i, exc)
            record = build_record(
                controller.space, traj.genotype, i, i // cfg.batch_size,
                metrics, rew, "controller",
            )
            history.records.append(record)
            if on_record is not None:
                on_record(record)
        index += take
        compute_advantages(batch, baseline)
        stats = ppo_update(controller, optimizer, batch, cfg)
        history.update_stats.append(stats)
        if on_batch_end is not None:
            on_batch_end(index, stats)
    return history
