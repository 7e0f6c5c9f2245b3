"""Evaluator contract and implementations.

An evaluator maps a genotype to three segmentation metrics; the search reward
is their geometric mean.  Two implementations live here: a deterministic
surrogate shaped so the controller has a learnable signal without training
any networks, and a client for an external evaluator process speaking
line-delimited JSON over its standard streams.
"""

from __future__ import annotations

import json
import math
import random
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, replace

from .cost import DEFAULT_FLOPS_HW, count_flops, count_params
from .genotype import Genotype, SpaceConfig, to_obj as genotype_to_obj
from .graph import GraphIR, compile as compile_graph

PROTOCOL_VERSION = 1


class MetricError(ValueError):
    """A metric outside (0, 1]; the geometric mean would be undefined."""


class EvaluationFailed(RuntimeError):
    """A single architecture could not be scored; it is recorded with reward 0."""


class ProtocolError(RuntimeError):
    """The external evaluator violated the line protocol; the raw line is attached."""

    def __init__(self, message: str, raw_line: str | None = None):
        super().__init__(message if raw_line is None else f"{message}: {raw_line!r}")
        self.raw_line = raw_line


class EvaluatorUnavailable(RuntimeError):
    """The external evaluator is gone and the restart budget is spent."""


@dataclass(frozen=True)
class MetricTriple:
    miou: float
    mean_acc: float
    fw_iou: float

    def __post_init__(self):
        for name, value in (
            ("miou", self.miou),
            ("mean_acc", self.mean_acc),
            ("fw_iou", self.fw_iou),
        ):
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise MetricError(f"{name} must be a finite number, got {value!r}")
            if not 0.0 < value <= 1.0:
                raise MetricError(f"{name} must be in (0, 1], got {value}")


def reward(metrics: MetricTriple) -> float:
    """Geometric mean of the three metrics."""
    return (metrics.miou * metrics.mean_acc * metrics.fw_iou) ** (1.0 / 3.0)


@dataclass(frozen=True)
class SurrogateConfig:
    target_params: int = 300_000
    connectivity_scale: float = 0.5
    target_strided_blocks: int = 2
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.target_params <= 0:
            raise ValueError("target_params must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.target_strided_blocks < 0:
            raise ValueError("target_strided_blocks must be >= 0")


def longer_variant(cfg: SurrogateConfig) -> SurrogateConfig:
    """Stand-in for scoring the same architectures under a longer training
    budget: correlated with the base surrogate (same shaping terms) but with
    halved noise and an independent noise stream."""
    return replace(cfg, noise_sigma=cfg.noise_sigma / 2.0, seed=cfg.seed + 7919)


def _clamp(value: float, lo: float, hi: float) -> float:
    return min(hi, max(lo, value))


class SurrogateEvaluator:
    """Deterministic desk-scale evaluator.

    Three shaped terms: closeness of generated parameter count to a target,
    how much of the sampling pool the architecture actually wires in, and
    closeness of the stride-2 block count to a target depth.  Each term is
    perturbed by a small multiplicative noise seeded from (config seed,
    architecture index), so identical inputs always score identically.
    """

    def __init__(self, space: SpaceConfig, config: SurrogateConfig = SurrogateConfig()):
        if config.target_strided_blocks > space.stride_blocks:
            raise ValueError(
                f"target_strided_blocks {config.target_strided_blocks} exceeds "
                f"the {space.stride_blocks} stride decisions of the space"
            )
        self.space = space
        self.config = config

    def score_graph(self, graph: GraphIR) -> MetricTriple:
        cfg = self.config
        pool_size = 2 + self.space.num_blocks

        generated = count_params(graph, self.space).params_generated
        if generated <= 0:
            m1 = 0.05
        else:
            m1 = math.exp(-abs(math.log2(generated / cfg.target_params)) / 4.0)
        m1 = _clamp(m1, 0.05, 1.0)

        used = sum(1 for count in graph.consumed if count >= 1)
        m2 = _clamp(0.5 + cfg.connectivity_scale * used / pool_size, 0.05, 1.0)

        depth_miss = abs(graph.strided_blocks - cfg.target_strided_blocks)
        m3 = _clamp(1.0 - 0.15 * depth_miss, 0.05, 1.0)
        return MetricTriple(m1, m2, m3)

    def evaluate(self, genotype: Genotype, index: int) -> MetricTriple:
        graph = compile_graph(genotype, self.space)
        clean = self.score_graph(graph)
        rng = random.Random(self.config.seed * 1_000_003 + index)
        sigma = self.config.noise_sigma
        noised = []
        for value in (clean.miou, clean.mean_acc, clean.fw_iou):
            value *= 1.0 + rng.uniform(-sigma, sigma)
            noised.append(min(1.0, max(value, 1e-9)))
        return MetricTriple(*noised)


@dataclass(frozen=True)
class ExternalConfig:
    command: str
    timeout: float = 600.0
    handshake_timeout: float = 30.0
    restart_limit: int = 1


class ExternalEvaluator:
    """Client for an evaluator child process.

    Requests and responses are single JSON lines over the child's standard
    streams, matched by id, so many requests may be in flight at once.  The
    child must print a protocol handshake before anything else.  If the child
    exits mid-evaluation the in-flight architectures fail (reward 0) and the
    process is restarted once; a second exit makes the evaluator unavailable.
    """

    def __init__(self, space: SpaceConfig, config: ExternalConfig):
        self.space = space
        self.config = config
        self._proc: subprocess.Popen | None = None
        self._cond = threading.Condition()
        self._write_lock = threading.Lock()
        self._pending: dict[int, int] = {}  # id -> process generation
        self._responses: dict[int, dict] = {}
        self._stream_error: ProtocolError | None = None
        self._gen = 0
        self._dead_gen = 0  # all generations <= this are gone
        self._restarts_left = config.restart_limit
        self._start_process()

    # -- process lifecycle ---------------------------------------------------

    def _start_process(self) -> None:
        argv = shlex.split(self.config.command)
        proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )
        gen = self._gen + 1

        line = self._read_with_deadline(proc, self.config.handshake_timeout)
        if line is None:
            proc.kill()
            raise EvaluatorUnavailable(
                f"no handshake within {self.config.handshake_timeout}s"
            )
        try:
            handshake = json.loads(line)
        except json.JSONDecodeError:
            proc.kill()
            raise ProtocolError("handshake is not JSON", line.decode(errors="replace"))
        if not isinstance(handshake, dict) or handshake.get("protocol") != PROTOCOL_VERSION:
            proc.kill()
            raise ProtocolError(
                f"unsupported protocol handshake (want {{'protocol': {PROTOCOL_VERSION}}})",
                line.decode(errors="replace"),
            )

        self._proc = proc
        self._gen = gen
        reader = threading.Thread(
            target=self._read_loop, args=(proc, gen), daemon=True
        )
        reader.start()

    @staticmethod
    def _read_with_deadline(proc: subprocess.Popen, timeout: float) -> bytes | None:
        box: dict[str, bytes] = {}

        def run():
            box["line"] = proc.stdout.readline()

        t = threading.Thread(target=run, daemon=True)
        t.start()
        t.join(timeout)
        return box.get("line")

    def _read_loop(self, proc: subprocess.Popen, gen: int) -> None:
        for raw in proc.stdout:
            line = raw.decode(errors="replace").strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                if not isinstance(payload, dict) or not isinstance(
                    payload.get("id"), int
                ):
                    raise ValueError
            except (json.JSONDecodeError, ValueError):
                with self._cond:
                    self._stream_error = ProtocolError("malformed response line", line)
                    self._cond.notify_all()
                return
            with self._cond:
                # responses for ids we no longer wait on (e.g. after a
                # timeout) are dropped silently
                if self._pending.get(payload["id"]) == gen:
                    self._responses[payload["id"]] = payload
                    self._cond.notify_all()
        with self._cond:
            self._dead_gen = max(self._dead_gen, gen)
            self._cond.notify_all()

    def _ensure_process_locked(self) -> None:
        if self._gen > self._dead_gen and self._proc is not None:
            if self._proc.poll() is None:
                return
            self._dead_gen = max(self._dead_gen, self._gen)
        if self._restarts_left <= 0:
            raise EvaluatorUnavailable("evaluator process exited; restart budget spent")
        self._restarts_left -= 1
        self._start_process()

    def close(self) -> None:
        with self._cond:
            proc = self._proc
            self._proc = None
            self._dead_gen = max(self._dead_gen, self._gen)
        if proc is not None and proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- protocol ------------------------------------------------------------

    def _summary_for(self, graph: GraphIR) -> dict:
        side = max(DEFAULT_FLOPS_HW[0], 1 << graph.max_down_exp)
        report = count_params(graph, self.space)
        return {
            "params": report.params_total,
            "flops": count_flops(graph, self.space, (side, side)),
            "downsample_factor": report.downsample_factor,
            "output_down_exp": report.output_down_exp,
        }

    def submit(self, genotype: Genotype, index: int) -> int:
        """Send one request without waiting; pair with ``result``."""
        graph = compile_graph(genotype, self.space)
        request = {
            "id": index,
            "genotype": genotype_to_obj(genotype),
            "summary": self._summary_for(graph),
        }
        line = (json.dumps(request, separators=(",", ":")) + "\n").encode()
        with self._cond:
            self._ensure_process_locked()
            self._pending[index] = self._gen
            proc = self._proc
        with self._write_lock:
            try:
                proc.stdin.write(line)
                proc.stdin.flush()
            except (BrokenPipeError, OSError):
                pass  # the reader loop surfaces the death
        return index

    def result(self, index: int, timeout: float | None = None) -> MetricTriple:
        deadline = time.monotonic() + (self.config.timeout if timeout is None else timeout)
        with self._cond:
            while True:
                if index in self._responses:
                    payload = self._responses.pop(index)
                    del self._pending[index]
                    return self._interpret(payload)
                if self._stream_error is not None:
                    raise self._stream_error
                gen = self._pending.get(index)
                if gen is None:
                    raise KeyError(f"no request in flight with id {index}")
                if gen <= self._dead_gen:
                    del self._pending[index]
                    raise EvaluationFailed("evaluator process exited mid-evaluation")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    del self._pending[index]
                    raise EvaluationFailed(
                        f"no response for id {index} within the timeout"
                    )
                self._cond.wait(remaining)

    @staticmethod
    def _interpret(payload: dict) -> MetricTriple:
        if "error" in payload:
            raise EvaluationFailed(f"evaluator error: {payload['error']}")
        try:
            return MetricTriple(
                float(payload["miou"]),
                float(payload["mean_acc"]),
                float(payload["fw_iou"]),
            )
        except (KeyError, TypeError, MetricError) as exc:
            raise ProtocolError(
                f"response is not a valid metric triple ({exc})",
                json.dumps(payload),
            )

    def evaluate(self, genotype: Genotype, index: int) -> MetricTriple:
        self.submit(genotype, index)
        return self.result(index)
