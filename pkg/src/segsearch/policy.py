"""Recurrent controller emitting architecture decisions as masked categorical
choices.

The decision sequence is fixed by the space: for each of the M templates
(op1, op2, agg), then for each block j (loc1, loc2, template id, repeats) plus
a stride decision for the first floor(N/2) blocks only.  Location heads are
masked to the current sampling-pool size; masked log-probabilities are taken
over the renormalized valid support.

The controller is a single-layer GRU cell with a learned start input and a
learned initial hidden state, per-family embeddings of the previous decision,
and one linear output head per decision family.  Output heads start at zero so
the untrained policy is exactly uniform over every masked domain.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from enum import Enum

import torch
from torch import nn

from .genotype import (
    AggKind,
    BlockDecision,
    Genotype,
    OpKind,
    SpaceConfig,
    Template,
    decision_count,
    validate,
)

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class Family(Enum):
    OP = "op"
    AGG = "agg"
    LOC = "loc"
    TEMPLATE = "template"
    REPEATS = "repeats"
    STRIDE = "stride"


@dataclass(frozen=True)
class ControllerConfig:
    hidden_size: int = 100
    embedding_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class Step:
    """One slot of the decision schedule: which head fires and how many of its
    leading indices are valid."""

    family: Family
    valid: int


def head_widths(space: SpaceConfig) -> dict[Family, int]:
    return {
        Family.OP: len(OpKind),
        Family.AGG: len(AggKind),
        Family.LOC: 2 + space.num_blocks,
        Family.TEMPLATE: space.num_templates,
        Family.REPEATS: space.k_max,
        Family.STRIDE: 2,
    }


def decision_schedule(space: SpaceConfig) -> tuple[Step, ...]:
    steps: list[Step] = []
    for _ in range(space.num_templates):
        steps.append(Step(Family.OP, len(OpKind)))
        steps.append(Step(Family.OP, len(OpKind)))
        steps.append(Step(Family.AGG, len(AggKind)))
    for j in range(space.num_blocks):
        pool = space.pool_size_at(j)
        steps.append(Step(Family.LOC, pool))
        steps.append(Step(Family.LOC, pool))
        steps.append(Step(Family.TEMPLATE, space.num_templates))
        steps.append(Step(Family.REPEATS, space.k_max))
        if j < space.stride_blocks:
            steps.append(Step(Family.STRIDE, 2))
    assert len(steps) == decision_count(space, "template_with_ks")
    return tuple(steps)


@dataclass(frozen=True)
class Decision:
    family: Family
    index: int
    log_prob: float
    entropy: float
    mask_size: int  # number of valid leading indices at this step


@dataclass
class Trajectory:
    """One controller episode: the decision sequence and its genotype; reward
    and advantage are attached later."""

    decisions: tuple[Decision, ...]
    genotype: Genotype
    reward: float | None = None
    advantage: float | None = None

    @property
    def log_prob(self) -> float:
        return sum(d.log_prob for d in self.decisions)


def decisions_to_genotype(space: SpaceConfig, indices: list[int]) -> Genotype:
    schedule = decision_schedule(space)
    if len(indices) != len(schedule):
        raise ValueError(f"expected {len(schedule)} decisions, got {len(indices)}")
    it = iter(indices)
    templates = tuple(
        Template(OpKind(next(it)), OpKind(next(it)), AggKind(next(it)))
        for _ in range(space.num_templates)
    )
    blocks = []
    for j in range(space.num_blocks):
        loc1, loc2, tid, k_idx = next(it), next(it), next(it), next(it)
        stride = 1 + next(it) if j < space.stride_blocks else 1
        blocks.append(BlockDecision(loc1, loc2, tid, k_idx + 1, stride))
    return Genotype(templates, tuple(blocks))


def genotype_to_decisions(space: SpaceConfig, genotype: Genotype) -> list[int]:
    indices: list[int] = []
    for t in genotype.templates:
        indices += [int(t.op1), int(t.op2), int(t.agg)]
    for j, blk in enumerate(genotype.blocks):
        indices += [blk.loc1, blk.loc2, blk.template_id, blk.repeats - 1]
        if j < space.stride_blocks:
            indices.append(blk.stride - 1)
    return indices


class Controller(nn.Module):
    def __init__(
        self,
        space: SpaceConfig,
        config: ControllerConfig = ControllerConfig(),
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.space = space
        self.config = config
        self.schedule = decision_schedule(space)

        h, e = config.hidden_size, config.embedding_size
        widths = head_widths(space)
        self.cell = nn.GRUCell(e, h)
        self.embeddings = nn.ModuleDict(
            {f.value: nn.Embedding(w, e) for f, w in widths.items()}
        )
        self.heads = nn.ModuleDict(
            {f.value: nn.Linear(h, w) for f, w in widths.items()}
        )
        self.start_input = nn.Parameter(torch.empty(e))
        self.start_hidden = nn.Parameter(torch.empty(h))
        self.to(dtype)

        gen = torch.Generator().manual_seed(config.seed)
        with torch.no_grad():
            for p in self.parameters():
                p.uniform_(-0.1, 0.1, generator=gen)
            # zero heads: the untrained policy is exactly uniform, so the
            # initial downsampling-factor distribution is the binomial prior
            for head in self.heads.values():
                head.weight.zero_()
                head.bias.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.start_input.dtype

    def _masked_log_probs(self, step: Step, hidden: torch.Tensor) -> torch.Tensor:
        logits = self.heads[step.family.value](hidden)
        if step.valid < logits.shape[-1]:
            mask = torch.full_like(logits, float("-inf"))
            mask[..., : step.valid] = 0.0
            logits = logits + mask
        return torch.log_softmax(logits, dim=-1)

    def _walk(self, batch: int, pick):
        """Run the schedule; ``pick(t, step, log_probs) -> indices [batch]``
        chooses each decision.  Returns (chosen, log_probs, entropies), each a
        list of per-step tensors of shape [batch]."""
        hidden = self.start_hidden.unsqueeze(0).expand(batch, -1).contiguous()
        x = self.start_input.unsqueeze(0).expand(batch, -1)
        chosen, logps, ents = [], [], []
        for t, step in enumerate(self.schedule):
            hidden = self.cell(x, hidden)
            log_probs = self._masked_log_probs(step, hidden)
            idx = pick(t, step, log_probs)
            probs = log_probs.exp()
            ent = -(probs[:, : step.valid] * log_probs[:, : step.valid]).sum(dim=-1)
            chosen.append(idx)
            logps.append(log_probs.gather(1, idx.unsqueeze(1)).squeeze(1))
            ents.append(ent)
            x = self.embeddings[step.family.value](idx)
        return chosen, logps, ents

    def sample_batch(
        self, batch: int, generator: torch.Generator
    ) -> list[Trajectory]:
        def pick(_t, _step, log_probs):
            return torch.multinomial(
                log_probs.exp(), 1, generator=generator
            ).squeeze(1)

        with torch.no_grad():
            chosen, logps, ents = self._walk(batch, pick)

        trajectories = []
        for i in range(batch):
            decisions = tuple(
                Decision(
                    family=step.family,
                    index=int(chosen[t][i]),
                    log_prob=float(logps[t][i]),
                    entropy=float(ents[t][i]),
                    mask_size=step.valid,
                )
                for t, step in enumerate(self.schedule)
            )
            genotype = decisions_to_genotype(
                self.space, [d.index for d in decisions]
            )
            trajectories.append(Trajectory(decisions=decisions, genotype=genotype))
        return trajectories

    def sample(self, generator: torch.Generator) -> Trajectory:
        return self.sample_batch(1, generator)[0]

    def evaluate_decisions(
        self, indices: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced pass over decision indices [batch, T]; returns
        differentiable per-decision log-probs and entropies, both [batch, T]."""
        if indices.ndim != 2 or indices.shape[1] != len(self.schedule):
            raise ValueError(
                f"expected indices of shape [batch, {len(self.schedule)}]"
            )

        def pick(t, _step, _log_probs):
            return indices[:, t]

        _, logps, ents = self._walk(indices.shape[0], pick)
        return torch.stack(logps, dim=1), torch.stack(ents, dim=1)

    def log_prob_of(self, genotype: Genotype) -> tuple[torch.Tensor, torch.Tensor]:
        """Total log-probability of emitting ``genotype`` under the current
        parameters, plus per-decision entropies.  Differentiable."""
        validate(genotype, self.space).raise_if_invalid()
        idx = torch.tensor(
            [genotype_to_decisions(self.space, genotype)], dtype=torch.long
        )
        logps, ents = self.evaluate_decisions(idx)
        return logps.sum(), ents.squeeze(0)


def sample(controller: Controller, generator: torch.Generator) -> Trajectory:
    return controller.sample(generator)


def log_prob_of(
    controller: Controller, genotype: Genotype
) -> tuple[float, list[float]]:
    with torch.no_grad():
        total, ents = controller.log_prob_of(genotype)
    return float(total), [float(e) for e in ents]


def save_checkpoint(controller: Controller, path, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "space": asdict(controller.space),
        "controller": asdict(controller.config),
        "state": controller.state_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(
    path, expected_space: SpaceConfig | None = None
) -> tuple[Controller, dict]:
    payload = torch.load(path, weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    space = SpaceConfig(**payload["space"])
    if expected_space is not None and space != expected_space:
        raise CheckpointError(
            f"checkpoint space {space} does not match configured space {expected_space}"
        )
    controller = Controller(space, ControllerConfig(**payload["controller"]))
    controller.load_state_dict(payload["state"])
    return controller, payload["extra"]
