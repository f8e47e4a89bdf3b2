"""Lightweight student: backbone, linear classifier head and projection head.

The classifier sees raw backbone features. The projection head maps them into
the teacher's feature space, where they are l2-normalized for the alignment
losses.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from . import _binary
from .errors import FormatError, ShapeError

CHECKPOINT_MAGIC = b"PANDCKPT"


@dataclass(frozen=True)
class StudentOutput:
    features: torch.Tensor  # (N, d_s)
    projected: torch.Tensor  # (N, d), unit rows
    logits: torch.Tensor  # (N, C)


class MLPBackbone(nn.Module):
    def __init__(self, input_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(input_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))
        self.input_dim = input_dim
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x)


class StudentModel(nn.Module):
    """``backbone`` must map a batch to ``(N, feature_dim)``."""

    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int, embed_dim: int):
        super().__init__()
        self.backbone = backbone
        self.fc_head = nn.Linear(feature_dim, num_classes)
        self.projector = nn.Linear(feature_dim, embed_dim)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.arch: dict[str, Any] = {}

    def forward(self, images: torch.Tensor) -> StudentOutput:
        return student_forward(self, images)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_toy_student(input_dim: int, num_classes: int, embed_dim: int, hidden: int = 64,
                      feature_dim: int = 32, seed: int = 0, std: float = 0.02) -> StudentModel:
    """Two-layer perceptron student with seeded Gaussian weights and zero biases."""
    model = StudentModel(MLPBackbone(input_dim, hidden, feature_dim), feature_dim, num_classes, embed_dim)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g) * std)
    model.arch = dict(input_dim=input_dim, num_classes=num_classes, embed_dim=embed_dim,
                      hidden=hidden, feature_dim=feature_dim)
    return model


def student_forward(model: StudentModel, images: torch.Tensor) -> StudentOutput:
    expected = getattr(model.backbone, "input_dim", None)
    if expected is not None and (images.ndim != 2 or images.shape[1] != expected):
        raise ShapeError(f"student expects inputs of shape (N, {expected}), got {tuple(images.shape)}")
    feats = model.backbone(images)
    if feats.ndim != 2 or feats.shape[1] != model.feature_dim:
        raise ShapeError(f"backbone produced {tuple(feats.shape)}, expected (N, {model.feature_dim})")
    proj = model.projector(feats)
    proj = proj / proj.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return StudentOutput(features=feats, projected=proj, logits=model.fc_head(feats))


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    optimizer_state: dict[str, Any] | None
    epoch: int
    config: dict[str, Any]
    arch: dict[str, Any]
    content_hash: str

    def build_model(self) -> StudentModel:
        """Reconstruct a toy student from the stored architecture and weights."""
        if not self.arch:
            raise FormatError("checkpoint has no architecture record")
        model = build_toy_student(**self.arch)
        model.load_state_dict(self.state)
        return model


def save_checkpoint(path: str | Path, model: StudentModel, *, optimizer: torch.optim.Optimizer | None = None,
                    epoch: int = 0, config: dict[str, Any] | None = None) -> str:
    """Write a ``PANDCKPT`` container; returns the hex content hash."""
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        tensors[f"model.{name}"] = t.detach().cpu().to(torch.float32).numpy()
    meta: dict[str, Any] = {"epoch": epoch, "config": config or {}, "arch": model.arch,
                            "param_names": list(model.state_dict())}
    if optimizer is not None:
        sd = optimizer.state_dict()
        meta["optimizer"] = {"param_groups": sd["param_groups"], "state_keys": {}}
        for pid, st in sd["state"].items():
            keys = []
            for key, value in st.items():
                keys.append(key)
                tensors[f"optim.{pid}.{key}"] = torch.as_tensor(value).detach().cpu().to(torch.float32).numpy()
            meta["optimizer"]["state_keys"][str(pid)] = keys
    blob = _binary.write_container(path, CHECKPOINT_MAGIC, tensors, meta)
    return blob[-32:].hex()


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, meta = _binary.read_container(path, CHECKPOINT_MAGIC)
    digest = Path(path).read_bytes()[-32:].hex()
    try:
        state = {name: torch.from_numpy(tensors[f"model.{name}"].copy()) for name in meta["param_names"]}
        opt_state = None
        if "optimizer" in meta:
            per_param = {}
            for pid, keys in meta["optimizer"]["state_keys"].items():
                per_param[int(pid)] = {k: torch.from_numpy(tensors[f"optim.{pid}.{k}"].copy()) for k in keys}
            opt_state = {"state": per_param, "param_groups": meta["optimizer"]["param_groups"]}
        return Checkpoint(state, opt_state, int(meta["epoch"]), meta["config"], meta.get("arch", {}), digest)
    except KeyError as exc:
        raise FormatError(f"checkpoint missing field {exc.args[0]!r}") from exc
