"""Line-protocol server.

Reads one JSON request per line from the input stream, answers one JSON
response per line on the output stream, and never lets a bad request kill
the loop.  The protocol version line goes out first, before anything else.

Requests:  {"id": 17, "genotype": {...}, "summary": {...}}
Responses: {"id": 17, "miou": ..., "mean_acc": ..., "fw_iou": ...}
           {"id": 17, "error": "<why>"}
"""

from __future__ import annotations

import json
import random

PROTOCOL_VERSION = 1


class EchoScorer:
    """Fixed or lookup-table metrics; no training involved.

    The lookup file maps canonical genotype JSON (sorted keys) to a
    [miou, mean_acc, fw_iou] triple; anything not listed gets the default."""

    def __init__(self, metrics=(0.5, 0.5, 0.5), lookup_path=None):
        self.metrics = tuple(metrics)
        self.lookup = {}
        if lookup_path is not None:
            with open(lookup_path, encoding="utf-8") as fh:
                table = json.load(fh)
            self.lookup = {key: tuple(value) for key, value in table.items()}

    def score(self, genotype: dict) -> tuple[float, float, float]:
        key = json.dumps(genotype, sort_keys=True)
        return self.lookup.get(key, self.metrics)


class ToyScorer:
    def __init__(self, seed: int, steps: int):
        self.seed = seed
        self.steps = steps

    def score(self, genotype: dict) -> tuple[float, float, float]:
        from .toy import train_and_score

        return train_and_score(genotype, self.seed, self.steps)


def _response(request_line: str, scorer) -> dict:
    try:
        request = json.loads(request_line)
    except json.JSONDecodeError as err:
        return {"id": None, "error": f"unparseable request: {err}"}
    if not isinstance(request, dict) or "id" not in request:
        return {"id": None, "error": "request is not an object with an id"}
    rid = request["id"]
    try:
        genotype = request["genotype"]
        if not isinstance(genotype, dict):
            raise ValueError("genotype must be an object")
        miou, mean_acc, fw_iou = scorer.score(genotype)
        return {"id": rid, "miou": miou, "mean_acc": mean_acc, "fw_iou": fw_iou}
    except Exception as err:  # uninstantiable genotype, scorer failure, ...
        return {"id": rid, "error": str(err)}


def serve(scorer, stdin, stdout, shuffle_buffer: int = 0, shuffle_seed: int = 0) -> int:
    """Run the request loop until the input stream closes.

    ``shuffle_buffer`` > 1 holds that many requests and answers them in a
    seeded random order -- a test hook proving the engine matches responses
    by id, not by arrival order."""

    def emit(response):
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()

    emit({"protocol": PROTOCOL_VERSION})
    rng = random.Random(shuffle_seed)
    pending: list[dict] = []
    for line in stdin:
        if not line.strip():
            continue
        response = _response(line, scorer)
        if shuffle_buffer > 1:
            pending.append(response)
            if len(pending) >= shuffle_buffer:
                rng.shuffle(pending)
                for queued in pending:
                    emit(queued)
                pending.clear()
        else:
            emit(response)
    for queued in pending:
        emit(queued)
    return 0
