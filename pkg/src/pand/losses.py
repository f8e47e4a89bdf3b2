"""Training objectives for the distillation stage.

The structural term compares how a teacher and a student rank the few classes
the teacher finds most confusable with the true one. For each sample the top-K
non-ground-truth classes by teacher logit form a neighborhood; margins between
the ground-truth logit and each neighbor are turned into a distribution with a
softmax over negative margins, and teacher/student distributions are matched
with the Jensen-Shannon divergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError

if TYPE_CHECKING:
    from .student import StudentOutput
    from .teacher import TeacherOutput

LN2 = math.log(2.0)


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 0.01
    lambda_vis: float = 0.495
    lambda_txt: float = 0.495
    lambda_nsd: float = 0.5
    tau: float = 2.0
    k: int = 3
    nsd_temperature: float = 1.0

    def validate(self, num_classes: int | None = None) -> "LossWeights":
        for name in ("lambda_cls", "lambda_vis", "lambda_txt", "lambda_nsd"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a finite non-negative number, got {value}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.nsd_temperature > 0:
            raise ConfigError(f"nsd_temperature must be positive, got {self.nsd_temperature}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if num_classes is not None and self.k > num_classes - 1:
            raise ConfigError(f"k exceeds C-1: k={self.k}, C={num_classes}")
        return self

    def interpolate(self, end: "LossWeights", t: float) -> "LossWeights":
        """Linearly move the four lambdas toward ``end``; ``t`` in [0, 1]."""
        lerp = lambda a, b: a + (b - a) * t  # noqa: E731
        return LossWeights(
            lambda_cls=lerp(self.lambda_cls, end.lambda_cls),
            lambda_vis=lerp(self.lambda_vis, end.lambda_vis),
            lambda_txt=lerp(self.lambda_txt, end.lambda_txt),
            lambda_nsd=lerp(self.lambda_nsd, end.lambda_nsd),
            tau=self.tau, k=self.k, nsd_temperature=self.nsd_temperature,
        )


@dataclass(frozen=True)
class NeighborhoodSet:
    indices: torch.Tensor  # (N, K) long

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class RelationDistribution:
    rho: torch.Tensor  # (N, K), rows sum to 1


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    vis: torch.Tensor
    txt: torch.Tensor
    base: torch.Tensor
    total: torch.Tensor
    nsd: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float | None]:
        return {
            "cls": float(self.cls.detach()), "vis": float(self.vis.detach()), "txt": float(self.txt.detach()),
            "nsd": None if self.nsd is None else float(self.nsd.detach()),
            "base": float(self.base.detach()), "total": float(self.total.detach()),
        }


def _check_labels(labels: torch.Tensor, n: int, c: int) -> None:
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {tuple(labels.shape)} does not match batch size {n}")
    if n and (int(labels.min()) < 0 or int(labels.max()) >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{int(labels.min())}, {int(labels.max())}]")


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


def select_neighborhood(teacher_logits: torch.Tensor, labels: torch.Tensor, k: int) -> NeighborhoodSet:
    """Top-``k`` non-ground-truth classes per row, by descending teacher logit.

    Ties go to the lower class index. Only the teacher's logits are consulted.
    """
    logits = teacher_logits.detach()
    if logits.ndim != 2:
        raise ShapeError(f"teacher logits must be 2-D, got shape {tuple(logits.shape)}")
    n, c = logits.shape
    if not 1 <= k <= c - 1:
        raise ConfigError(f"k exceeds C-1: k={k}, C={c}" if k > c - 1 else f"k must be >= 1, got {k}")
    _check_labels(labels, n, c)
    _check_finite(logits, "teacher logits")
    # Stable descending sort keeps ascending index order among equal logits.
    order = torch.sort(logits, dim=1, descending=True, stable=True).indices
    keep = order != labels.unsqueeze(1)
    indices = order[keep].view(n, c - 1)[:, :k]
    return NeighborhoodSet(indices.contiguous())


def neighborhood_distribution(logits: torch.Tensor, labels: torch.Tensor, nbhd: NeighborhoodSet,
                              temperature: float = 1.0) -> RelationDistribution:
    """Softmax over negative ground-truth margins restricted to the neighborhood."""
    if logits.ndim != 2 or logits.shape[0] != nbhd.indices.shape[0]:
        raise ShapeError(
            f"logits shape {tuple(logits.shape)} incompatible with neighborhood {tuple(nbhd.indices.shape)}"
        )
    _check_finite(logits, "logits")
    _check_labels(labels, logits.shape[0], logits.shape[1])
    gt = logits.gather(1, labels.unsqueeze(1))
    margins = gt - logits.gather(1, nbhd.indices)
    # softmax subtracts the row max internally.
    return RelationDistribution(torch.softmax(-margins / temperature, dim=1))


def js_divergence(p: torch.Tensor, q: torch.Tensor, atol: float = 1e-5) -> torch.Tensor:
    """Jensen-Shannon divergence (natural log) over the last axis.

    Leading axes are batch axes. Zero-probability entries contribute nothing.
    """
    p = torch.as_tensor(p)
    q = torch.as_tensor(q, dtype=p.dtype)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    for name, x in (("p", p), ("q", q)):
        sums = x.detach().sum(-1)
        if not torch.all((sums - 1).abs() <= atol):
            raise ValueError(f"{name} is not a probability vector (sums to {sums.flatten()[:4].tolist()})")
    m = 0.5 * (p + q)
    kl_pm = (torch.xlogy(p, p) - torch.xlogy(p, m)).sum(-1)
    kl_qm = (torch.xlogy(q, q) - torch.xlogy(q, m)).sum(-1)
    return (0.5 * kl_pm + 0.5 * kl_qm).clamp(0.0, LN2)


def nsd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, labels: torch.Tensor,
             weights: LossWeights | int) -> torch.Tensor:
    """Mean per-sample JS between teacher and student neighborhood relation distributions.

    ``weights`` may be a :class:`LossWeights` or just the neighborhood size.
    Gradients reach the student logits only.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"teacher logits {tuple(teacher_logits.shape)} vs student logits {tuple(student_logits.shape)}"
        )
    if isinstance(weights, LossWeights):
        k, temperature = weights.k, weights.nsd_temperature
    else:
        k, temperature = int(weights), 1.0
    teacher_logits = teacher_logits.detach()
    nbhd = select_neighborhood(teacher_logits, labels, k)
    teacher_logits = teacher_logits.to(student_logits.dtype)
    rho_t = neighborhood_distribution(teacher_logits, labels, nbhd, temperature).rho
    rho_s = neighborhood_distribution(student_logits, labels, nbhd, temperature).rho
    return js_divergence(rho_t, rho_s).mean()


def classification_loss(student_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(student_logits, labels)


def visual_alignment_loss(projected: torch.Tensor, teacher_features: torch.Tensor) -> torch.Tensor:
    """One minus the mean cosine between student projections and teacher image features."""
    if projected.shape != teacher_features.shape:
        raise ShapeError(
            f"projected student features {tuple(projected.shape)} vs teacher features {tuple(teacher_features.shape)}"
        )
    return 1.0 - F.cosine_similarity(projected, teacher_features.detach(), dim=1).mean()


def text_alignment_loss(projected: torch.Tensor, anchors: torch.Tensor, labels: torch.Tensor,
                        tau: float) -> torch.Tensor:
    """Cross-entropy of student projections scored against the frozen anchors at temperature ``tau``."""
    if projected.shape[1] != anchors.shape[1]:
        raise ShapeError(f"projected dim {projected.shape[1]} vs anchor dim {anchors.shape[1]}")
    return F.cross_entropy(projected @ anchors.detach().T / tau, labels)


def base_loss(student: "StudentOutput", teacher: "TeacherOutput", anchors, labels: torch.Tensor,
              weights: LossWeights) -> LossBreakdown:
    """Global alignment: weighted label CE, visual cosine alignment and anchor CE."""
    matrix = getattr(anchors, "matrix", anchors)
    _check_labels(labels, student.logits.shape[0], student.logits.shape[1])
    cls = classification_loss(student.logits, labels)
    vis = visual_alignment_loss(student.projected, teacher.features)
    txt = text_alignment_loss(student.projected, matrix, labels, weights.tau)
    for name, value in (("cls", cls), ("vis", vis), ("txt", txt)):
        if not torch.isfinite(value):
            raise NumericError(f"non-finite {name} loss: {float(value.detach())}")
    base = weights.lambda_cls * cls + weights.lambda_vis * vis + weights.lambda_txt * txt
    return LossBreakdown(cls=cls, vis=vis, txt=txt, base=base, total=base)


def total_loss(breakdown: LossBreakdown, nsd: torch.Tensor | None, weights: LossWeights) -> LossBreakdown:
    """Add the weighted structural term to ``breakdown``.

    With ``lambda_nsd == 0`` or ``nsd is None`` the total is the base tensor itself.
    """
    if nsd is None or weights.lambda_nsd == 0:
        total = breakdown.base
    else:
        total = breakdown.base + weights.lambda_nsd * nsd
    return LossBreakdown(cls=breakdown.cls, vis=breakdown.vis, txt=breakdown.txt,
                         base=breakdown.base, total=total, nsd=nsd)
