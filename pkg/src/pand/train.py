"""Two-stage orchestration: prompt calibration, then distillation into the student.

The stages are strictly sequential. Calibration touches only the context
tokens; the resulting anchors are frozen and persisted before distillation
begins. Distillation updates only student parameters, and the pipeline checks
that encoder and anchor hashes are unchanged across it.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .anchors import (ClassVocabulary, ContextTokens, EncoderPair, SemanticAnchors, make_toy_encoders,
                      run_psc, save_anchors, template_anchors)
from .config import TrainConfig
from .data import DatasetSplit, iter_batches, load_image_folder, load_toy, make_toy
from .errors import ConfigError, DivergenceError, FreezeViolation, NumericError
from .losses import LossBreakdown, LossWeights, base_loss, nsd_loss, total_loss
from .metrics import MetricsLog, accuracy_from_logits
from .student import StudentModel, build_toy_student, save_checkpoint, student_forward
from .teacher import Teacher

logger = logging.getLogger(__name__)

LOSS_KEYS = ("cls", "vis", "txt", "nsd", "base", "total")


def cosine_lr(epoch: int, total_epochs: int, lr0: float, min_lr: float) -> float:
    """``min_lr + (lr0 - min_lr) * (1 + cos(pi * epoch / total_epochs)) / 2``."""
    if total_epochs <= 0:
        return lr0
    return min_lr + 0.5 * (lr0 - min_lr) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def epoch_weights(config: TrainConfig, epoch: int) -> LossWeights:
    nsd = config.nsd
    if nsd.weight_schedule == "fixed" or nsd.epochs <= 1:
        return nsd.weights
    return nsd.weights.interpolate(nsd.weights_end, epoch / (nsd.epochs - 1))


def load_data(config: TrainConfig) -> tuple[DatasetSplit, DatasetSplit]:
    d = config.data
    if d.source == "toy":
        return make_toy(d.classes, d.n_per_class, d.dim, d.separation, d.seed,
                        noise=d.noise, token_dim=d.token_dim)
    if d.source == "file":
        if not d.path:
            raise ConfigError("data.source = file requires data.path")
        return load_toy(d.path)
    root = d.root or os.environ.get("PAND_DATA_ROOT", "")
    if not root:
        raise ConfigError("data.source = folder requires data.root or PAND_DATA_ROOT")
    train = load_image_folder(root, d.train_split, split_name="train", token_dim=d.token_dim, vocab_seed=d.seed)
    test = load_image_folder(root, d.test_split, split_name="test", token_dim=d.token_dim, vocab_seed=d.seed)
    return train, test


def build_encoders(config: TrainConfig, input_dim: int) -> EncoderPair:
    m = config.model
    return make_toy_encoders(input_dim, token_dim=config.data.token_dim, embed_dim=m.embed_dim,
                             key_dim=m.key_dim, hidden=m.teacher_hidden, seed=m.encoder_seed)


def build_student(config: TrainConfig, input_dim: int, num_classes: int) -> StudentModel:
    m = config.model
    return build_toy_student(input_dim, num_classes, m.embed_dim, hidden=m.student_hidden,
                             feature_dim=m.student_dim, seed=config.nsd.seed, std=m.init_std)


def compute_losses(teacher: Teacher, student: StudentModel, images: torch.Tensor, labels: torch.Tensor,
                   weights: LossWeights, structural: bool = True) -> LossBreakdown:
    """Loss breakdown for one batch; the structural term is skipped when unused."""
    t_out = teacher(images)
    s_out = student_forward(student, images)
    breakdown = base_loss(s_out, t_out, teacher.anchors, labels, weights)
    nsd = None
    if structural and weights.lambda_nsd != 0:
        nsd = nsd_loss(t_out.logits, s_out.logits, labels, weights)
    return total_loss(breakdown, nsd, weights)


def evaluate_losses(teacher: Teacher, student: StudentModel, split: DatasetSplit, weights: LossWeights,
                    structural: bool = True) -> dict[str, float | None]:
    """Full-split loss breakdown without gradient."""
    with torch.no_grad():
        return compute_losses(teacher, student, split.inputs(), split.labels(), weights, structural).as_floats()


def run_nsd_stage(config: TrainConfig, teacher: Teacher, anchors: SemanticAnchors, student: StudentModel,
                  data: DatasetSplit, *, eval_split: DatasetSplit | None = None, log: MetricsLog | None = None,
                  structural: bool = True, checkpoint_dir: str | Path | None = None
                  ) -> tuple[StudentModel, MetricsLog]:
    """Train ``student`` with AdamW under a per-epoch cosine-annealed learning rate.

    ``structural=False`` removes the neighborhood term from the code path
    entirely (it is never evaluated), which is the reference baseline.
    """
    if not anchors.frozen:
        raise ValueError("distillation requires frozen anchors")
    if teacher.anchors is not anchors and teacher.anchors.digest() != anchors.digest():
        raise ValueError("teacher anchors differ from the anchors passed in")
    nsd = config.nsd
    config.validate(anchors.num_classes)
    log = log if log is not None else MetricsLog()
    params = [p for p in student.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=nsd.lr, weight_decay=nsd.weight_decay)
    g = torch.Generator().manual_seed(nsd.seed)
    images, labels = data.inputs(), data.labels()

    for epoch in range(nsd.epochs):
        start = time.perf_counter()
        lr = cosine_lr(epoch, nsd.epochs, nsd.lr, nsd.min_lr)
        for group in opt.param_groups:
            group["lr"] = lr
        weights = epoch_weights(config, epoch)
        student.train()
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        seen = 0
        for batch, idx in enumerate(iter_batches(len(data), nsd.batch_size, g)):
            try:
                bd = compute_losses(teacher, student, images[idx], labels[idx], weights, structural)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {batch}: {exc}", epoch=epoch, batch=batch) from exc
            if not torch.isfinite(bd.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch}", epoch=epoch, batch=batch)
            opt.zero_grad(set_to_none=True)
            bd.total.backward()
            if nsd.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, nsd.grad_clip)
            opt.step()
            n = len(idx)
            for key, value in bd.as_floats().items():
                if value is not None:
                    sums[key] += value * n
            seen += n
        record = {"stage": "nsd", "epoch": epoch, "lr": lr}
        for key in LOSS_KEYS:
            record[key] = sums[key] / seen if seen else None
        if not (structural and weights.lambda_nsd != 0):
            record["nsd"] = None
        if eval_split is not None and len(eval_split):
            student.eval()
            with torch.no_grad():
                record["top1"] = accuracy_from_logits(student_forward(student, eval_split.inputs()).logits,
                                                      eval_split.labels())
        log.append(record, seconds=time.perf_counter() - start)
        logger.debug("nsd epoch %d: %s", epoch, record)

    student.eval()
    if checkpoint_dir:
        path = Path(checkpoint_dir)
        path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path / "student.ckpt", student, optimizer=opt, epoch=nsd.epochs,
                        config=config.to_dict())
    return student, log


@dataclass
class PipelineResult:
    anchors: SemanticAnchors
    student: StudentModel
    log: MetricsLog
    teacher: Teacher
    ctx: ContextTokens | None


def calibrate(config: TrainConfig, train: DatasetSplit, pair: EncoderPair, vocab: ClassVocabulary, *,
              eval_split: DatasetSplit | None = None, log: MetricsLog | None = None,
              template: bool = False) -> tuple[SemanticAnchors, ContextTokens | None]:
    """Run calibration (or build template anchors) and check the encoders stayed frozen."""
    before = pair.state_hash()
    if template:
        anchors, ctx = template_anchors(pair, vocab), None
    else:
        ctx = ContextTokens.init(config.psc.n_ctx, vocab.token_dim, seed=config.psc.seed,
                                 std=config.psc.init_std)
        anchors = run_psc(config, train, pair, vocab, ctx=ctx, eval_split=eval_split, log=log)
    if pair.state_hash() != before:
        raise FreezeViolation("encoder weights changed during calibration")
    return anchors, ctx


def run_pipeline(config: TrainConfig, data: tuple[DatasetSplit, DatasetSplit] | DatasetSplit,
                 encoders: EncoderPair | None = None, vocab: ClassVocabulary | None = None, *,
                 anchors: SemanticAnchors | None = None, structural: bool = True) -> PipelineResult:
    """Calibrate (unless ``anchors`` are given), freeze and persist anchors, then distill.

    With ``psc.prompt = template`` the calibration stage is replaced by fixed
    ``"a photo of a [CLASS]"`` anchors.

    ``data`` is a train split or a ``(train, test)`` pair; the test split is
    only used for per-epoch held-out accuracy.
    """
    train, test = data if isinstance(data, tuple) else (data, None)
    vocab = vocab or train.vocab
    config.validate(len(vocab))
    input_dim = train.inputs().shape[1]
    pair = encoders or build_encoders(config, input_dim)
    log = MetricsLog(config.paths.metrics or None)

    ctx = None
    if anchors is None:
        anchors, ctx = calibrate(config, train, pair, vocab, eval_split=test, log=log,
                                 template=config.psc.prompt == "template")
    if not anchors.frozen:
        raise ValueError("anchors passed to the pipeline must be frozen")
    if anchors.class_names != vocab.names:
        raise ConfigError("anchor class names do not match the dataset vocabulary")
    if config.paths.anchors:
        save_anchors(anchors, config.paths.anchors)

    teacher = Teacher(pair, anchors)
    frozen_before = teacher.state_hash()
    student = build_student(config, input_dim, len(vocab))
    student, log = run_nsd_stage(config, teacher, anchors, student, train, eval_split=test, log=log,
                                 structural=structural, checkpoint_dir=config.paths.checkpoints or None)
    if teacher.state_hash() != frozen_before:
        raise FreezeViolation("teacher encoders or anchors changed during distillation")
    return PipelineResult(anchors, student, log, teacher, ctx)
