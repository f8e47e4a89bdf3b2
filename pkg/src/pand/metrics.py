"""Append-only per-epoch metrics with a line-delimited JSON file format.

Each line of the metrics file is one JSON object with sorted keys. Fields:

``stage``        "psc" or "nsd"
``epoch``        0-based epoch index
``lr``           learning rate used during the epoch
``calibration``  mean calibration loss (psc)
``teacher_top1`` held-out teacher accuracy in percent (psc, when evaluated)
``cls``, ``vis``, ``txt``, ``nsd``, ``base``, ``total``
                 sample-weighted epoch means of the loss components (nsd);
                 ``nsd`` is null when the structural term is not computed
``top1``         held-out student accuracy in percent (nsd, when evaluated)

Wall-clock seconds are kept out of the metrics file so that repeated runs
produce identical bytes; they go to a ``<name>.timing.jsonl`` sidecar.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterator

import torch

from .errors import EvaluationError


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricsLog:
    def __init__(self, path: str | Path | None = None):
        self.records: list[dict[str, Any]] = []
        self.timings: list[float] = []
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")
            self.timing_path.write_text("", encoding="utf-8")

    @property
    def timing_path(self) -> Path:
        assert self.path is not None
        return self.path.with_name(self.path.stem + ".timing.jsonl")

    def append(self, record: dict[str, Any], seconds: float | None = None) -> None:
        record = {k: _clean(v) for k, v in record.items()}
        self.records.append(record)
        self.timings.append(seconds if seconds is not None else float("nan"))
        if self.path is not None:
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if seconds is not None:
                with self.timing_path.open("a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps({"stage": record.get("stage"), "epoch": record.get("epoch"),
                                         "seconds": seconds}, sort_keys=True) + "\n")

    def stage(self, name: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r.get("stage") == name]

    def series(self, key: str, stage: str | None = None) -> list[Any]:
        rows = self.records if stage is None else self.stage(stage)
        return [r.get(key) for r in rows]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[dict[str, Any]]:
        return iter(self.records)

    @staticmethod
    def read(path: str | Path) -> list[dict[str, Any]]:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return [json.loads(line) for line in lines if line.strip()]


def accuracy_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Top-1 accuracy in percent; ties resolve to the lowest class index."""
    if logits.shape[0] == 0:
        raise EvaluationError("cannot score an empty split")
    # argmax returns the first maximal index
    pred = logits.argmax(dim=1)
    return 100.0 * float((pred == labels).double().mean())
