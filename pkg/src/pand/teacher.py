"""Frozen teacher: image features scored against the calibrated anchors.

Teacher logits are raw cosine similarities, ``features @ anchors.T``, with no
temperature or logit scale; losses that need a temperature apply their own.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .anchors import EncoderPair, SemanticAnchors
from .errors import ShapeError


@dataclass(frozen=True)
class TeacherOutput:
    features: torch.Tensor  # (N, d), unit rows
    logits: torch.Tensor  # (N, C)


def teacher_forward(pair: EncoderPair, anchors: SemanticAnchors, images: torch.Tensor) -> TeacherOutput:
    if not anchors.frozen:
        raise ValueError("teacher requires frozen anchors")
    with torch.no_grad():
        feats = pair.encode_images(images)
        if feats.shape[-1] != anchors.dim:
            raise ShapeError(f"image feature dim {feats.shape[-1]} != anchor dim {anchors.dim}")
        feats = F.normalize(feats, dim=-1)
        logits = feats @ anchors.matrix.to(feats.dtype).T
    return TeacherOutput(feats, logits)


class Teacher:
    """Bundle of frozen encoders and frozen anchors."""

    def __init__(self, pair: EncoderPair, anchors: SemanticAnchors):
        if not anchors.frozen:
            raise ValueError("teacher requires frozen anchors")
        self.pair = pair
        self.anchors = anchors

    def __call__(self, images: torch.Tensor) -> TeacherOutput:
        return teacher_forward(self.pair, self.anchors, images)

    @property
    def num_classes(self) -> int:
        return self.anchors.num_classes

    def state_hash(self) -> str:
        h = hashlib.sha256(self.pair.state_hash().encode())
        h.update(self.anchors.digest().encode())
        return h.hexdigest()
