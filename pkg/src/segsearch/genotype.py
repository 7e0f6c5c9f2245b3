"""Search-space grammar: operation/aggregation vocabularies, templates and
per-block structural decisions, with validation and JSON serialization.

A full architecture description ("genotype") is a list of M reusable templates
plus N block decisions.  Each template is a triple (op1, op2, agg) taking two
inputs and producing one output.  Each block decision picks two inputs from a
growing sampling pool, a template id, a repeat count k, and (for the first
half of the blocks only) a stride.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, field
from enum import IntEnum


class OpKind(IntEnum):
    """The six candidate operations a template slot can hold."""

    SEP_CONV_3X3 = 0
    SEP_CONV_5X5 = 1
    GAP_CONV_1X1 = 2
    MAX_POOL_3X3 = 3
    SEP_CONV_5X5_DIL6 = 4
    SKIP = 5


class AggKind(IntEnum):
    """How a template fuses its two intermediate outputs."""

    SUM = 0
    CONCAT = 1


OP_NAMES = {
    OpKind.SEP_CONV_3X3: "sep3x3",
    OpKind.SEP_CONV_5X5: "sep5x5",
    OpKind.GAP_CONV_1X1: "gap1x1",
    OpKind.MAX_POOL_3X3: "maxpool3x3",
    OpKind.SEP_CONV_5X5_DIL6: "sep5x5d6",
    OpKind.SKIP: "skip",
}
OP_BY_NAME = {v: k for k, v in OP_NAMES.items()}

AGG_NAMES = {AggKind.SUM: "sum", AggKind.CONCAT: "concat"}
AGG_BY_NAME = {v: k for k, v in AGG_NAMES.items()}


class GenotypeParseError(ValueError):
    """Raised when genotype text does not match the documented file format.

    The message carries a locus ("blocks[2].repeats", ...) for the offending
    field.
    """


@dataclass(frozen=True)
class Template:
    """A reusable (op1, op2, agg) triple; op1/op2 bind to loc1/loc2."""

    op1: OpKind
    op2: OpKind
    agg: AggKind

    def canonical(self) -> "Template":
        """Canonical form for uniqueness counting: (op1, op2) unordered.

        The sampled order is preserved in genotypes because op1/op2 bind to
        loc1/loc2 respectively; canonicalization only matters when asking
        whether two templates have the same structure.
        """
        a, b = sorted((self.op1, self.op2))
        return Template(OpKind(a), OpKind(b), self.agg)


@dataclass(frozen=True)
class BlockDecision:
    """One block: two pool indices, a template id, repeats k, and a stride."""

    loc1: int
    loc2: int
    template_id: int
    repeats: int
    stride: int


@dataclass(frozen=True)
class Genotype:
    """Complete architecture description: M templates + N block decisions."""

    templates: tuple[Template, ...]
    blocks: tuple[BlockDecision, ...]


@dataclass(frozen=True)
class SpaceConfig:
    """Dimensions and constants of the search space.

    Defaults follow the search configuration used in the reference setup:
    7 blocks, 3 templates, up to 4 repeats, 48-channel working width, channel
    doubling on downsampling, 19 output classes, and a fixed ~60K-parameter
    stem.  ``concat_reduce`` controls whether a concat aggregation is followed
    by a 1x1 reduction back to the block width (bounds channel growth under
    repeats).
    """

    num_blocks: int = 7
    num_templates: int = 3
    k_max: int = 4
    base_channels: int = 48
    channel_multiplier: int = 2
    num_classes: int = 19
    stem_param_count: int = 60_000
    concat_reduce: bool = True

    def __post_init__(self) -> None:
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.num_templates < 1:
            raise ValueError("num_templates must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.channel_multiplier < 1:
            raise ValueError("channel_multiplier must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    @property
    def stride_blocks(self) -> int:
        """Number of leading blocks that carry a stride decision."""
        return self.num_blocks // 2

    def pool_size_at(self, block: int) -> int:
        """Sampling-pool size when block ``block`` picks its inputs:
        two stem outputs plus one output per preceding block."""
        return 2 + block

    @property
    def max_pool_size(self) -> int:
        return 2 + self.num_blocks - 1


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple[str, ...] = field(default=())

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise ValueError("invalid genotype: " + "; ".join(self.violations))


def validate(genotype: Genotype, cfg: SpaceConfig) -> ValidationResult:
    """Check a genotype against the structural rules of the space.

    Violations are returned as data (never raised) and carry the offending
    block/template index.
    """
    bad: list[str] = []
    if len(genotype.templates) != cfg.num_templates:
        bad.append(
            f"expected {cfg.num_templates} templates, got {len(genotype.templates)}"
        )
    if len(genotype.blocks) != cfg.num_blocks:
        bad.append(f"expected {cfg.num_blocks} blocks, got {len(genotype.blocks)}")

    for j, blk in enumerate(genotype.blocks):
        pool = cfg.pool_size_at(j)
        for name, loc in (("loc1", blk.loc1), ("loc2", blk.loc2)):
            if not 0 <= loc < pool:
                bad.append(f"block {j}: {name}={loc} out of range for pool size {pool}")
        if not 0 <= blk.template_id < len(genotype.templates):
            bad.append(
                f"block {j}: template_id={blk.template_id} out of range "
                f"for {len(genotype.templates)} templates"
            )
        if not 1 <= blk.repeats <= cfg.k_max:
            bad.append(f"block {j}: repeats={blk.repeats} not in [1, {cfg.k_max}]")
        if blk.stride not in (1, 2):
            bad.append(f"block {j}: stride={blk.stride} not in {{1, 2}}")
        elif blk.stride == 2 and j >= cfg.stride_blocks:
            bad.append(f"block {j}: stride must be 1 for block >= {cfg.stride_blocks}")
    return ValidationResult(tuple(bad))


def decision_count(cfg: SpaceConfig, encoding: str) -> int:
    """Length of the controller's decision sequence under an encoding.

    ``baseline``   per-block op sampling: 5 decisions per block.
    ``template``   shared templates: 3 per block + 3 per template.
    ``template_with_ks``  the full schedule with repeats and first-half
    strides: 3M + 4N + floor(N/2).
    """
    n, m = cfg.num_blocks, cfg.num_templates
    if encoding == "baseline":
        return 5 * n
    if encoding == "template":
        return 3 * n + 3 * m
    if encoding == "template_with_ks":
        return 3 * m + 4 * n + cfg.stride_blocks
    raise ValueError(f"unknown encoding {encoding!r}")


def template_universe(num_ops: int = 6, num_aggs: int = 2) -> list[Template]:
    """All canonical templates over the first ``num_ops`` operations and
    ``num_aggs`` aggregations: one per unordered (op1, op2) pair and
    aggregation, C(num_ops+1, 2) * num_aggs in total."""
    if not 1 <= num_ops <= len(OpKind):
        raise ValueError(f"num_ops must be in [1, {len(OpKind)}]")
    if not 1 <= num_aggs <= len(AggKind):
        raise ValueError(f"num_aggs must be in [1, {len(AggKind)}]")
    out = []
    for a, b in itertools.combinations_with_replacement(range(num_ops), 2):
        for g in range(num_aggs):
            out.append(Template(OpKind(a), OpKind(b), AggKind(g)))
    return out


def sample_uniform(cfg: SpaceConfig, rng: random.Random) -> Genotype:
    """Draw a genotype from the masked-uniform prior (the distribution an
    untrained controller samples from)."""
    templates = tuple(
        Template(
            OpKind(rng.randrange(len(OpKind))),
            OpKind(rng.randrange(len(OpKind))),
            AggKind(rng.randrange(len(AggKind))),
        )
        for _ in range(cfg.num_templates)
    )
    blocks = []
    for j in range(cfg.num_blocks):
        pool = cfg.pool_size_at(j)
        stride = rng.choice((1, 2)) if j < cfg.stride_blocks else 1
        blocks.append(
            BlockDecision(
                loc1=rng.randrange(pool),
                loc2=rng.randrange(pool),
                template_id=rng.randrange(cfg.num_templates),
                repeats=rng.randint(1, cfg.k_max),
                stride=stride,
            )
        )
    return Genotype(templates, tuple(blocks))


# --- JSON file format -------------------------------------------------------
#
# { "templates": [ {"op1": "sep3x3", "op2": "skip", "agg": "concat"}, ... ],
#   "blocks": [ {"loc1": 0, "loc2": 1, "template": 2, "repeats": 3,
#                "stride": 2}, ... ] }


def to_obj(genotype: Genotype) -> dict:
    return {
        "templates": [
            {"op1": OP_NAMES[t.op1], "op2": OP_NAMES[t.op2], "agg": AGG_NAMES[t.agg]}
            for t in genotype.templates
        ],
        "blocks": [
            {
                "loc1": b.loc1,
                "loc2": b.loc2,
                "template": b.template_id,
                "repeats": b.repeats,
                "stride": b.stride,
            }
            for b in genotype.blocks
        ],
    }


def _want(obj: dict, key: str, kind, locus: str):
    if not isinstance(obj, dict):
        raise GenotypeParseError(f"{locus}: expected object, got {type(obj).__name__}")
    if key not in obj:
        raise GenotypeParseError(f"{locus}.{key}: missing field")
    val = obj[key]
    # bool is an int subclass; never acceptable where an int is expected
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise GenotypeParseError(f"{locus}.{key}: expected integer")
    if kind is str and not isinstance(val, str):
        raise GenotypeParseError(f"{locus}.{key}: expected string")
    return val


def _check_keys(obj: dict, allowed: set[str], locus: str) -> None:
    extra = set(obj) - allowed
    if extra:
        raise GenotypeParseError(f"{locus}: unknown field(s) {sorted(extra)}")


def from_obj(obj) -> Genotype:
    """Strict structural parse of the genotype object format.

    Only field shapes and name strings are checked here; range/length rules
    against a concrete space are the job of :func:`validate`.
    """
    if not isinstance(obj, dict):
        raise GenotypeParseError("top level: expected object")
    _check_keys(obj, {"templates", "blocks"}, "top level")
    raw_templates = _want(obj, "templates", list, "top level")
    raw_blocks = _want(obj, "blocks", list, "top level")
    if not isinstance(raw_templates, list):
        raise GenotypeParseError("templates: expected array")
    if not isinstance(raw_blocks, list):
        raise GenotypeParseError("blocks: expected array")

    templates = []
    for i, t in enumerate(raw_templates):
        locus = f"templates[{i}]"
        if not isinstance(t, dict):
            raise GenotypeParseError(f"{locus}: expected object")
        _check_keys(t, {"op1", "op2", "agg"}, locus)
        ops = []
        for key in ("op1", "op2"):
            name = _want(t, key, str, locus)
            if name not in OP_BY_NAME:
                raise GenotypeParseError(f"{locus}.{key}: unknown operation {name!r}")
            ops.append(OP_BY_NAME[name])
        agg_name = _want(t, "agg", str, locus)
        if agg_name not in AGG_BY_NAME:
            raise GenotypeParseError(f"{locus}.agg: unknown aggregation {agg_name!r}")
        templates.append(Template(ops[0], ops[1], AGG_BY_NAME[agg_name]))

    blocks = []
    for j, b in enumerate(raw_blocks):
        locus = f"blocks[{j}]"
        if not isinstance(b, dict):
            raise GenotypeParseError(f"{locus}: expected object")
        _check_keys(b, {"loc1", "loc2", "template", "repeats", "stride"}, locus)
        blocks.append(
            BlockDecision(
                loc1=_want(b, "loc1", int, locus),
                loc2=_want(b, "loc2", int, locus),
                template_id=_want(b, "template", int, locus),
                repeats=_want(b, "repeats", int, locus),
                stride=_want(b, "stride", int, locus),
            )
        )
    return Genotype(tuple(templates), tuple(blocks))


def serialize(genotype: Genotype) -> str:
    return json.dumps(to_obj(genotype), indent=2) + "\n"


def deserialize(text: str) -> Genotype:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise GenotypeParseError(f"not valid JSON: {err}") from err
    return from_obj(obj)
