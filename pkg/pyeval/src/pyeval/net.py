"""Materialize a genotype description as a small segmentation network.

The genotype arrives as the engine's JSON object: named op/agg strings in
templates plus per-block wiring decisions.  This module interprets it
independently -- all branches run at one fixed width, two frozen stem
convolutions stand in for a pretrained prefix, and every block output joins
a growing feature pool exactly as the wiring decisions dictate.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

WIDTH = 16

OP_NAMES = ("sep3x3", "sep5x5", "gap1x1", "maxpool3x3", "sep5x5d6", "skip")
AGG_NAMES = ("sum", "concat")


class BuildError(ValueError):
    """The genotype cannot be materialized as a network."""


def _sep_conv(kernel: int, stride: int, dilation: int = 1) -> nn.Module:
    pad = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(WIDTH, WIDTH, kernel, stride=stride, padding=pad,
                  dilation=dilation, groups=WIDTH),
        nn.Conv2d(WIDTH, WIDTH, 1),
        nn.ReLU(inplace=True),
    )


class _GlobalContext(nn.Module):
    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride
        self.project = nn.Conv2d(WIDTH, WIDTH, 1)

    def forward(self, x):
        h = (x.shape[2] + self.stride - 1) // self.stride
        w = (x.shape[3] + self.stride - 1) // self.stride
        pooled = F.relu(self.project(x.mean(dim=(2, 3), keepdim=True)))
        return pooled.expand(-1, -1, h, w)


class _Skip(nn.Module):
    def __init__(self, stride: int):
        super().__init__()
        self.pool = nn.AvgPool2d(stride) if stride > 1 else None

    def forward(self, x):
        return self.pool(x) if self.pool is not None else x


def _make_op(name: str, stride: int) -> nn.Module:
    if name == "sep3x3":
        return _sep_conv(3, stride)
    if name == "sep5x5":
        return _sep_conv(5, stride)
    if name == "sep5x5d6":
        return _sep_conv(5, stride, dilation=6)
    if name == "gap1x1":
        return _GlobalContext(stride)
    if name == "maxpool3x3":
        return nn.MaxPool2d(3, stride=stride, padding=1)
    if name == "skip":
        return _Skip(stride)
    raise BuildError(f"unknown op {name!r}")


def _match(x, reference):
    if x.shape[2:] != reference.shape[2:]:
        x = F.interpolate(x, size=reference.shape[2:], mode="nearest")
    return x


class _Instantiation(nn.Module):
    """One template application: two ops and an aggregation."""

    def __init__(self, op1: str, op2: str, agg: str, stride: int):
        super().__init__()
        self.op1 = _make_op(op1, stride)
        self.op2 = _make_op(op2, stride)
        if agg not in AGG_NAMES:
            raise BuildError(f"unknown aggregation {agg!r}")
        self.agg = agg
        self.reduce = nn.Conv2d(2 * WIDTH, WIDTH, 1) if agg == "concat" else None

    def forward(self, a, b):
        x = self.op1(a)
        y = _match(self.op2(b), x)
        if self.agg == "sum":
            return x + y
        return self.reduce(torch.cat([x, y], dim=1))


def _field(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise BuildError(f"{path} missing {key!r}")
    return obj[key]


class ToyNet(nn.Module):
    """Genotype-directed network over a fixed-width feature pool.

    Stems are frozen so an all-skip genotype degenerates to a linear probe
    on fixed features, while conv-bearing genotypes can reshape them."""

    def __init__(self, genotype: dict, num_classes: int):
        super().__init__()
        templates = _field(genotype, "templates", "genotype")
        blocks = _field(genotype, "blocks", "genotype")
        if not isinstance(templates, list) or not templates:
            raise BuildError("genotype has no templates")
        if not isinstance(blocks, list) or not blocks:
            raise BuildError("genotype has no blocks")

        self.stem1 = nn.Conv2d(3, WIDTH, 3, padding=1)
        self.stem2 = nn.Conv2d(WIDTH, WIDTH, 3, stride=2, padding=1)
        for p in (*self.stem1.parameters(), *self.stem2.parameters()):
            p.requires_grad_(False)

        self.wiring: list[tuple[int, int, int]] = []  # (loc1, loc2, repeats)
        self.instantiations = nn.ModuleList()
        pool_size = 2
        for j, blk in enumerate(blocks):
            path = f"blocks[{j}]"
            loc1 = _field(blk, "loc1", path)
            loc2 = _field(blk, "loc2", path)
            tid = _field(blk, "template_id", path)
            repeats = _field(blk, "repeats", path)
            stride = _field(blk, "stride", path)
            if not all(isinstance(v, int) and not isinstance(v, bool)
                       for v in (loc1, loc2, tid, repeats, stride)):
                raise BuildError(f"{path}: fields must be integers")
            if not (0 <= loc1 < pool_size and 0 <= loc2 < pool_size):
                raise BuildError(f"{path}: location outside pool of {pool_size}")
            if not 0 <= tid < len(templates):
                raise BuildError(f"{path}: template_id {tid} out of range")
            if repeats < 1:
                raise BuildError(f"{path}: repeats must be >= 1")
            if stride not in (1, 2):
                raise BuildError(f"{path}: stride must be 1 or 2")
            t = templates[tid]
            tpath = f"templates[{tid}]"
            reps = nn.ModuleList()
            for r in range(repeats):
                reps.append(
                    _Instantiation(
                        _field(t, "op1", tpath),
                        _field(t, "op2", tpath),
                        _field(t, "agg", tpath),
                        stride if r == 0 else 1,
                    )
                )
            self.instantiations.append(reps)
            self.wiring.append((loc1, loc2, repeats))
            pool_size += 1

        self.head = nn.Conv2d(WIDTH, WIDTH, 1)
        self.classifier = nn.Conv2d(WIDTH, num_classes, 1)

    def forward(self, x):
        s1 = F.relu(self.stem1(x))
        s2 = F.relu(self.stem2(s1))
        pool = [s1, s2]
        used = [0, 0]
        for (loc1, loc2, _), reps in zip(self.wiring, self.instantiations):
            a, b = pool[loc1], pool[loc2]
            used[loc1] += 1
            used[loc2] += 1
            out = a
            for inst in reps:
                out = inst(out, b)
            pool.append(out)
            used.append(0)

        # unused pool entries feed the head, summed at the finest unused scale
        leftovers = [f for f, u in zip(pool, used) if u == 0] or [pool[-1]]
        finest = max(leftovers, key=lambda f: f.shape[2])
        merged = sum(_match(f, finest) for f in leftovers)
        logits = self.classifier(F.relu(self.head(merged)))
        if logits.shape[2:] != x.shape[2:]:
            logits = F.interpolate(
                logits, size=x.shape[2:], mode="bilinear", align_corners=False
            )
        return logits
