"""Accuracy, neighborhood diagnostics, and sweep/ablation harnesses.

Result tables are keyed by ``(method, dataset, student)`` so that cells computed
in any order (or in worker processes) assemble to the same table.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import torch
import torch.nn.functional as F

from .anchors import ClassVocabulary, EncoderPair, SemanticAnchors, template_anchors
from .config import TrainConfig
from .data import DatasetSplit
from .errors import ConfigError, EvaluationError
from .losses import nsd_loss
from .metrics import MetricsLog, accuracy_from_logits
from .student import StudentModel, student_forward
from .teacher import Teacher
from .train import build_encoders, build_student, calibrate, evaluate_losses, run_nsd_stage

logger = logging.getLogger(__name__)

__all__ = [
    "ResultRow", "ResultTable", "accuracy_from_logits", "export_embeddings", "kd_loss", "model_logits",
    "neighborhood_consistency", "run_ablation", "run_sweep", "top1_accuracy",
]


def model_logits(model: Any, inputs: torch.Tensor) -> torch.Tensor:
    """Logits from a student, a teacher, or any callable returning logits."""
    with torch.no_grad():
        if isinstance(model, StudentModel):
            model.eval()
            return student_forward(model, inputs).logits
        out = model(inputs)
        return getattr(out, "logits", out)


def top1_accuracy(model: Any, split: DatasetSplit) -> float:
    """Percentage of samples whose arg-max logit (lowest index on ties) equals the label."""
    if len(split) == 0:
        raise EvaluationError(f"{split.split_name} split is empty")
    return accuracy_from_logits(model_logits(model, split.inputs()), split.labels())


def neighborhood_consistency(teacher: Teacher, student: Any, split: DatasetSplit, k: int = 3) -> float:
    """Mean JS between teacher and student neighborhood relation distributions on ``split``."""
    if len(split) == 0:
        raise EvaluationError(f"{split.split_name} split is empty")
    x, y = split.inputs(), split.labels()
    with torch.no_grad():
        return float(nsd_loss(teacher(x).logits, model_logits(student, x), y, k))


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Reference temperature-softened KL distillation loss (scaled by T^2)."""
    log_p = F.log_softmax(student_logits / temperature, dim=1)
    q = F.softmax(teacher_logits.detach() / temperature, dim=1)
    return F.kl_div(log_p, q, reduction="batchmean") * temperature ** 2


@dataclass
class ResultRow:
    method: str
    dataset: str
    student: str
    accuracy: float
    config_hash: str
    seed: int
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.method, self.dataset, self.student)


class ResultTable:
    def __init__(self, rows: Iterable[ResultRow] = (), metadata: dict[str, Any] | None = None):
        self._rows: dict[tuple[str, str, str], ResultRow] = {}
        self.metadata = dict(metadata or {})
        self.logs: dict[tuple[str, str, str], MetricsLog] = {}
        for row in rows:
            self.add(row)

    def add(self, row: ResultRow, log: MetricsLog | None = None) -> None:
        if not 0.0 <= row.accuracy <= 100.0:
            raise ValueError(f"accuracy {row.accuracy} outside [0, 100]")
        self._rows[row.key] = row
        if log is not None:
            self.logs[row.key] = log

    @property
    def rows(self) -> list[ResultRow]:
        return list(self._rows.values())

    def __len__(self) -> int:
        return len(self._rows)

    def __getitem__(self, key: tuple[str, str, str]) -> ResultRow:
        return self._rows[key]

    def _columns(self) -> list[str]:
        extra = []
        for row in self._rows.values():
            extra.extend(k for k in row.extra if k not in extra)
        return ["method", "dataset", "student", "accuracy", *extra, "seed", "config_hash"]

    def _cells(self, row: ResultRow, cols: Sequence[str]) -> list[str]:
        out = []
        for col in cols:
            value = getattr(row, col) if hasattr(row, col) else row.extra.get(col, "")
            if isinstance(value, float):
                value = f"{value:.2f}" if col == "accuracy" else repr(value)
            out.append(str(value))
        return out

    def to_csv(self) -> str:
        cols = self._columns()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for row in self._rows.values():
            writer.writerow(self._cells(row, cols))
        return buf.getvalue()

    def to_text(self) -> str:
        cols = self._columns()
        body = [self._cells(r, cols) for r in self._rows.values()]
        body = [[c[:16] if cols[i] == "config_hash" else c for i, c in enumerate(cells)] for cells in body]
        widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(cols)]
        fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
        lines = [fmt(cols), "  ".join("-" * w for w in widths)]
        lines.extend(fmt(r) for r in body)
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        """Write the delimited table to ``path`` and the aligned text next to it (``.txt``)."""
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        path.with_suffix(".txt").write_text(self.to_text(), encoding="utf-8")


def export_embeddings(model: Any, split: DatasetSplit, path: str | Path, which: str = "features") -> Path:
    """Write ``(id, label, vector)`` records for external visualization.

    Format: a header line ``N d``, then one tab-separated line per sample:
    ``id<TAB>label<TAB>v_1 v_2 ... v_d`` with float32 values printed to 9
    significant digits. For a :class:`Teacher` the unit-norm image features are
    written; for a student ``which`` selects ``features`` or ``projected``.
    """
    if len(split) == 0:
        raise EvaluationError(f"{split.split_name} split is empty")
    x = split.inputs()
    with torch.no_grad():
        if isinstance(model, Teacher):
            feats = model(x).features
        elif isinstance(model, StudentModel):
            model.eval()
            out = student_forward(model, x)
            if which not in ("features", "projected"):
                raise ValueError(f"which must be 'features' or 'projected', got {which!r}")
            feats = getattr(out, which)
        else:
            out = model(x)
            feats = getattr(out, "features", out)
    feats = feats.to(torch.float32)
    n, d = feats.shape
    lines = [f"{n} {d}"]
    for sample, row in zip(split.samples, feats.tolist()):
        values = " ".join(format(v, ".9g") for v in row)
        lines.append(f"{sample.id}\t{sample.label}\t{values}")
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def read_embeddings(path: str | Path) -> tuple[list[str], list[int], torch.Tensor]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    n, d = map(int, lines[0].split())
    ids, labels, rows = [], [], []
    for line in lines[1:1 + n]:
        sid, label, values = line.split("\t")
        ids.append(sid)
        labels.append(int(label))
        rows.append([float(v) for v in values.split()])
    return ids, labels, torch.tensor(rows, dtype=torch.float32).reshape(n, d)


@dataclass
class _Cell:
    method: str
    config: TrainConfig
    anchors: SemanticAnchors
    structural: bool = True


def _run_cell(cell: _Cell, train: DatasetSplit, test: DatasetSplit, pair: EncoderPair,
              dataset: str) -> tuple[ResultRow, MetricsLog]:
    cfg = cell.config
    teacher = Teacher(pair, cell.anchors)
    before = teacher.state_hash()
    student = build_student(cfg, train.inputs().shape[1], len(train.vocab))
    student, log = run_nsd_stage(cfg, teacher, cell.anchors, student, train, eval_split=test,
                                 structural=cell.structural)
    if teacher.state_hash() != before:
        raise RuntimeError("teacher changed during a sweep cell")
    k = cfg.nsd.weights.k
    final = evaluate_losses(teacher, student, train, cfg.nsd.weights, cell.structural)
    extra = {
        "lambda_nsd": cfg.nsd.weights.lambda_nsd,
        "prompt": cfg.psc.prompt,
        "teacher_top1": top1_accuracy(teacher, test),
        "consistency": neighborhood_consistency(teacher, student, test, k),
        "final_total": final["total"],
    }
    row = ResultRow(cell.method, dataset, "toy-mlp", top1_accuracy(student, test), cfg.config_hash(),
                    cfg.nsd.seed, extra)
    return row, log


def _run_cell_job(args):
    torch.set_num_threads(1)
    return _run_cell(*args)


def _run_cells(cells: list[_Cell], train, test, pair, dataset: str, workers: int,
               metadata: dict[str, Any]) -> ResultTable:
    table = ResultTable(metadata=metadata)
    jobs = [(cell, train, test, pair, dataset) for cell in cells]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_job, jobs))
    else:
        results = [_run_cell(*job) for job in jobs]
    for row, log in results:
        table.add(row, log)
    return table


def _prepare(base_config: TrainConfig, train: DatasetSplit, test: DatasetSplit | None,
             pair: EncoderPair | None, vocab: ClassVocabulary | None):
    vocab = vocab or train.vocab
    base_config.validate(len(vocab))
    pair = pair or build_encoders(base_config, train.inputs().shape[1])
    return vocab, pair, test if test is not None else train


def run_sweep(base_config: TrainConfig, lambda_grid: Sequence[float], train: DatasetSplit,
              test: DatasetSplit | None = None, *, pair: EncoderPair | None = None,
              vocab: ClassVocabulary | None = None, anchors: SemanticAnchors | None = None,
              workers: int = 1, dataset: str = "toy") -> ResultTable:
    """One distillation run per structural weight, all sharing the same calibrated anchors.

    The ``lambda_nsd = 0`` row is the baseline distillation framework.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ConfigError("lambda grid must be non-empty")
    if any(not (v >= 0 and math.isfinite(v)) for v in grid):
        raise ConfigError(f"lambda grid values must be finite and >= 0, got {grid}")
    vocab, pair, test = _prepare(base_config, train, test, pair, vocab)
    if anchors is None:
        anchors, _ = calibrate(base_config, train, pair, vocab,
                               template=base_config.psc.prompt == "template")
    cells = []
    for lam in grid:
        cfg = copy.deepcopy(base_config)
        cfg = cfg.replace(nsd__weights__lambda_nsd=lam)
        cells.append(_Cell(f"lambda_nsd={lam:g}", cfg, anchors))
    meta = {"config_hash": base_config.config_hash(), "anchors": anchors.digest(), "grid": grid}
    return _run_cells(cells, train, test, pair, dataset, workers, meta)


ABLATION_ROWS = (
    ("baseline", "template", False),
    ("+PSC", "learned", False),
    ("+NSD", "template", True),
    ("full", "learned", True),
)


def run_ablation(base_config: TrainConfig, train: DatasetSplit, test: DatasetSplit | None = None, *,
                 pair: EncoderPair | None = None, vocab: ClassVocabulary | None = None,
                 learned_anchors: SemanticAnchors | None = None, workers: int = 1,
                 dataset: str = "toy") -> ResultTable:
    """Four-row component matrix: {template, learned} anchors x {without, with} the structural term.

    Rows without the structural term set ``lambda_nsd = 0``; rows with it use the
    base config's value (0.5 when the base config has it at 0).
    """
    vocab, pair, test = _prepare(base_config, train, test, pair, vocab)
    lam = base_config.nsd.weights.lambda_nsd or 0.5
    fixed = template_anchors(pair, vocab)
    if learned_anchors is None:
        learned_anchors, _ = calibrate(base_config.replace(psc__prompt="learned"), train, pair, vocab)
    cells = []
    for method, prompt, structural in ABLATION_ROWS:
        cfg = base_config.replace(psc__prompt=prompt, nsd__weights__lambda_nsd=lam if structural else 0.0)
        cells.append(_Cell(method, cfg, learned_anchors if prompt == "learned" else fixed, structural))
    meta = {"config_hash": base_config.config_hash(), "learned_anchors": learned_anchors.digest(),
            "template_anchors": fixed.digest()}
    return _run_cells(cells, train, test, pair, dataset, workers, meta)
