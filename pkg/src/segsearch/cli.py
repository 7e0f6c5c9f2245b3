"""Command-line front end.

Subcommands: search, random, decode, inspect, export-dot, analyze, rerank.
Exit codes: 0 success, 1 usage error, 2 validation/protocol error,
3 evaluator failure.  All commands are deterministic given --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import analysis
from .cost import DEFAULT_FLOPS_HW, cost_report, summarize
from .evaluators import (
    EvaluatorUnavailable,
    ExternalConfig,
    ExternalEvaluator,
    ProtocolError,
    SurrogateConfig,
    SurrogateEvaluator,
    longer_variant,
)
from .genotype import (
    AGG_NAMES,
    OP_NAMES,
    GenotypeParseError,
    SpaceConfig,
    Template,
    deserialize,
    from_obj as genotype_from_obj,
    validate,
)
from .graph import GraphInvariantError, compile as compile_graph, export_dot
from .rl import PpoConfig
from .search import (
    SearchSettings,
    rerank_experiment,
    rerank_records,
    run_random,
    run_search,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_EVALUATOR = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # exit code 1 on usage problems (argparse's default is 2, which this
    # tool reserves for validation errors)
    def error(self, message):
        raise UsageError(message)


def template_name(t: Template) -> str:
    return f"{OP_NAMES[t.op1]}+{OP_NAMES[t.op2]}>{AGG_NAMES[t.agg]}"


# -- config plumbing ----------------------------------------------------------


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise UsageError(f"config {path}: {err}")
    if not isinstance(obj, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    return obj


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except (TypeError, ValueError) as err:
        raise UsageError(f"{name} config: {err}")


def _configs(args) -> tuple[dict, SpaceConfig, PpoConfig, SurrogateConfig]:
    cfg = _load_config_file(getattr(args, "config", None))
    space = _build(SpaceConfig, cfg.get("space", {}), "space")
    ppo = _build(PpoConfig, cfg.get("ppo", {}), "ppo")
    surrogate = _build(SurrogateConfig, cfg.get("surrogate", {}), "surrogate")
    return cfg, space, ppo, surrogate


def _settings(cfg: dict, args, **forced) -> SearchSettings:
    merged = dict(cfg.get("settings", {}))
    for key in ("budget", "seed", "checkpoint_every", "best_k", "window", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    merged.update(forced)
    return _build(SearchSettings, merged, "settings")


def _make_evaluator(space, spec: str, surrogate_cfg, timeout: float):
    if spec == "surrogate":
        return SurrogateEvaluator(space, surrogate_cfg)
    if spec.startswith("external:"):
        command = spec[len("external:") :].strip()
        if not command:
            raise UsageError("external evaluator needs a command: external:CMD")
        return ExternalEvaluator(
            space, ExternalConfig(command=command, timeout=timeout)
        )
    raise UsageError(f"unknown evaluator {spec!r}; use surrogate or external:CMD")


def _read_genotype(path: str):
    return deserialize(Path(path).read_text(encoding="utf-8"))


def _check_valid(genotype, space) -> int | None:
    result = validate(genotype, space)
    if result.ok:
        return None
    for violation in result.violations:
        print(f"invalid: {violation}", file=sys.stderr)
    return EXIT_INVALID


def _flops_hw(graph, args=None) -> tuple[int, int]:
    hw = getattr(args, "input_hw", None) if args is not None else None
    if hw is not None:
        return (hw[0], hw[1])
    side = max(DEFAULT_FLOPS_HW[0], 1 << graph.max_down_exp)
    return (side, side)


# -- subcommands --------------------------------------------------------------


def cmd_search(args) -> int:
    import torch

    torch.set_num_threads(1)
    cfg, space, ppo, surrogate = _configs(args)
    settings = _settings(cfg, args)
    spec = args.evaluator or cfg.get("evaluator", "surrogate")
    evaluator = _make_evaluator(space, spec, surrogate, args.timeout)
    try:
        summary = run_search(
            args.out,
            space,
            ppo,
            settings,
            evaluator,
            resume=args.resume,
            config_snapshot={"evaluator": spec, "surrogate": dataclasses.asdict(surrogate)},
        )
    finally:
        if isinstance(evaluator, ExternalEvaluator):
            evaluator.close()
    out = {
        "out": str(args.out),
        "evaluated": settings.budget,
        "best_reward": summary.best[0]["reward"] if summary.best else None,
    }
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_random(args) -> int:
    import torch

    torch.set_num_threads(1)
    cfg, space, _ppo, surrogate = _configs(args)
    seed = args.seed if args.seed is not None else cfg.get("settings", {}).get("seed", 0)
    spec = args.evaluator or cfg.get("evaluator", "surrogate")
    evaluator = _make_evaluator(space, spec, surrogate, args.timeout)
    try:
        records = run_random(
            space,
            args.count,
            seed,
            evaluator,
            out_dir=args.out,
            workers=args.workers or 1,
        )
    finally:
        if isinstance(evaluator, ExternalEvaluator):
            evaluator.close()
    mean = sum(r.reward for r in records) / len(records) if records else None
    print(json.dumps({"count": len(records), "mean_reward": mean}, sort_keys=True))
    return EXIT_OK


def cmd_decode(args) -> int:
    _cfg, space, _ppo, _surrogate = _configs(args)
    genotype = _read_genotype(args.genotype)
    bad = _check_valid(genotype, space)
    if bad is not None:
        return bad
    graph = compile_graph(genotype, space)
    summary = {"valid": True, **summarize(graph, space, _flops_hw(graph))}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    _cfg, space, _ppo, _surrogate = _configs(args)
    genotype = _read_genotype(args.genotype)
    bad = _check_valid(genotype, space)
    if bad is not None:
        return bad
    graph = compile_graph(genotype, space)
    hw = _flops_hw(graph, args)
    report = cost_report(graph, space, hw)
    print("  id      params  label")
    for node_id, label, params in report.per_node:
        print(f"{node_id:>4}  {params:>10}  {label}")
    print(f"generated_params {report.params_generated}")
    print(f"stem_params {space.stem_param_count}")
    print(f"total_params {report.params_total}")
    print(f"output_resolution {report.output_resolution}")
    print(f"downsample_factor {report.downsample_factor}")
    print(f"flops {report.flops} @ {hw[0]}x{hw[1]}")
    return EXIT_OK


def cmd_export_dot(args) -> int:
    _cfg, space, _ppo, _surrogate = _configs(args)
    genotype = _read_genotype(args.genotype)
    bad = _check_valid(genotype, space)
    if bad is not None:
        return bad
    Path(args.out).write_text(export_dot(compile_graph(genotype, space)), encoding="utf-8")
    return EXIT_OK


def _analyze_rewards(records, args, out):
    series = analysis.reward_windows(records, args.window)
    if args.json:
        out.append({"report": "rewards", "window": args.window, "medians": series})
        return
    out.append("window  start  median_reward")
    for i, median in enumerate(series):
        out.append(f"{i:>6}  {i * args.window:>5}  {median:.6f}")


def _analyze_strides(records, args, out):
    series = analysis.downsampling_proportions(records, args.window)
    factors = sorted(series[0])
    if args.json:
        out.append(
            {
                "report": "strides",
                "window": args.window,
                "series": [
                    {"start": i * args.window, "shares": {str(f): w[f] for f in factors}}
                    for i, w in enumerate(series)
                ],
            }
        )
        return
    out.append("window  start  " + "  ".join(f"f{f}" for f in factors))
    for i, shares in enumerate(series):
        row = "  ".join(f"{shares[f]:.4f}" for f in factors)
        out.append(f"{i:>6}  {i * args.window:>5}  {row}")


def _analyze_templates(records, args, out):
    stats = analysis.reward_by_group(
        records, "template_id", min_reward=args.min_reward
    )
    top = analysis.top_templates(records, args.top_k, min_reward=args.min_reward)
    if args.json:
        out.append(
            {
                "report": "templates",
                "min_reward": args.min_reward,
                "groups": [
                    {
                        "template": template_name(t),
                        "count": s.count,
                        "mean": s.mean,
                        "median": s.median,
                    }
                    for t, s in stats.items()
                ],
                "top": [
                    {"template": template_name(t), "mean": mean} for t, mean in top
                ],
            }
        )
        return
    out.append("template                        count  mean      median")
    for t, s in stats.items():
        out.append(
            f"{template_name(t):<30}  {s.count:>5}  {s.mean:.6f}  {s.median:.6f}"
        )
    out.append(f"top {args.top_k} by mean reward:")
    for t, mean in top:
        out.append(f"{template_name(t):<30}  {mean:.6f}")


def _analyze_params(records, args, out):
    stats = analysis.reward_by_group(
        records,
        "param_bucket",
        min_reward=args.min_reward,
        bucket_width=args.bucket_width,
    )
    if args.json:
        out.append(
            {
                "report": "params",
                "bucket_width": args.bucket_width,
                "min_reward": args.min_reward,
                "groups": [
                    {
                        "bucket": b,
                        "lo": b * args.bucket_width,
                        "count": s.count,
                        "mean": s.mean,
                        "median": s.median,
                    }
                    for b, s in stats.items()
                ],
            }
        )
        return
    out.append("bucket  params_lo  count  mean      median")
    for b, s in stats.items():
        out.append(
            f"{b:>6}  {b * args.bucket_width:>9}  {s.count:>5}  {s.mean:.6f}  {s.median:.6f}"
        )


def _analyze_spearman(records, args, out):
    pairs = [
        (r["reward_short"], r["reward_long"])
        for r in records
        if "reward_short" in r and "reward_long" in r
    ]
    if len(pairs) < 2:
        raise GenotypeParseError(
            "log has no reward_short/reward_long pairs; run the rerank command first"
        )
    rho = analysis.spearman([p[0] for p in pairs], [p[1] for p in pairs])
    if args.json:
        out.append({"report": "spearman", "n": len(pairs), "spearman": rho})
        return
    out.append(f"n {len(pairs)}")
    out.append(f"spearman {rho:.6f}")


def cmd_analyze(args) -> int:
    records = analysis.read_log(args.log)
    out: list = []
    handler = {
        "rewards": _analyze_rewards,
        "strides": _analyze_strides,
        "templates": _analyze_templates,
        "params": _analyze_params,
        "spearman": _analyze_spearman,
    }[args.report]
    handler(records, args, out)
    for item in out:
        print(json.dumps(item, sort_keys=True) if isinstance(item, dict) else item)
    return EXIT_OK


def cmd_rerank(args) -> int:
    _cfg, space, _ppo, surrogate = _configs(args)
    if args.seed is not None:
        surrogate = dataclasses.replace(surrogate, seed=args.seed)
    records = analysis.read_log(args.log)
    ranked = sorted(records, key=lambda r: (-r["reward"], r["index"]))
    genotypes, seen = [], set()
    for rec in ranked:
        key = json.dumps(rec["genotype"], sort_keys=True)
        if key in seen:
            continue
        seen.add(key)
        genotypes.append(genotype_from_obj(rec["genotype"]))
        if len(genotypes) == args.count:
            break
    if len(genotypes) < 3:
        print(
            f"error: need at least 3 distinct genotypes, found {len(genotypes)}",
            file=sys.stderr,
        )
        return EXIT_INVALID
    short = SurrogateEvaluator(space, surrogate)
    long_ = SurrogateEvaluator(space, longer_variant(surrogate))
    result = rerank_experiment(genotypes, short, long_)
    lines = rerank_records(result)
    with open(args.out, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    print(json.dumps({"n": len(genotypes), "spearman": result.spearman_rho()}, sort_keys=True))
    return EXIT_OK


# -- wiring -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="segsearch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (space/ppo/surrogate/settings)")

    p = sub.add_parser("search", help="run controller search")
    common(p)
    p.add_argument("--budget", type=int)
    p.add_argument("--evaluator", help="surrogate or external:CMD")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--best-k", dest="best_k", type=int)
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("random", help="evaluate uniformly sampled genotypes")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--evaluator")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_random)

    p = sub.add_parser("decode", help="validate a genotype file and summarize it")
    common(p)
    p.add_argument("--genotype", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("inspect", help="compile a genotype and print its cost report")
    common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--input-hw", dest="input_hw", type=int, nargs=2, metavar=("H", "W"))
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export-dot", help="write the compiled graph as DOT")
    common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("analyze", help="post-hoc diagnostics over a search log")
    p.add_argument("--log", required=True)
    p.add_argument(
        "--report",
        required=True,
        choices=["rewards", "strides", "templates", "params", "spearman"],
    )
    p.add_argument("--min-reward", dest="min_reward", type=float, default=0.4)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--bucket-width", dest="bucket_width", type=int, default=50_000)
    p.add_argument("--top-k", dest="top_k", type=int, default=5)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rerank", help="score top log genotypes under two evaluators")
    common(p)
    p.add_argument("--log", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_rerank)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (GenotypeParseError, GraphInvariantError, ProtocolError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except EvaluatorUnavailable as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_EVALUATOR


def entrypoint() -> None:
    sys.exit(main())
