"""Prompt calibration: learn shared context tokens against frozen encoders.

Each class prompt is ``[v_1, ..., v_n, w_c]``: ``n`` learnable context vectors
shared by every class, followed by the fixed embedding of the class name. The
frozen text encoder turns each prompt into a feature; after l2 normalization the
C features are the semantic anchors that later act as the teacher's classifier.

The toy encoders in this module stand in for a pretrained dual-encoder model.
Any pair of modules honouring the :class:`EncoderPair` contract can replace them.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._binary import Reader, check_magic, pack_string
from .errors import ConfigError, DivergenceError, FormatError, NumericError, ShapeError

if TYPE_CHECKING:
    from .config import PSCConfig, TrainConfig
    from .data import DatasetSplit
    from .metrics import MetricsLog

logger = logging.getLogger(__name__)

ANCHOR_MAGIC = b"PANDANCH"
ANCHOR_VERSION = 1
TEMPLATE = "a photo of a [CLASS]"


def hash_embedding(text: str, dim: int, seed: int = 0) -> torch.Tensor:
    """Deterministic unit-scale token embedding for ``text`` (independent of process hash seed)."""
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    g = torch.Generator().manual_seed(int.from_bytes(digest[:8], "little"))
    return torch.randn(dim, generator=g) / math.sqrt(dim)


@dataclass
class ContextTokens:
    """Learnable context vectors, one ``(n_ctx, token_dim)`` matrix shared by all classes."""

    vectors: nn.Parameter

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ConfigError(f"context must be a non-empty (n_ctx, token_dim) matrix, got {tuple(self.vectors.shape)}")
        if not torch.isfinite(self.vectors).all():
            raise NumericError("context tokens contain non-finite entries")

    @classmethod
    def init(cls, n_ctx: int = 16, token_dim: int = 64, seed: int = 0, std: float = 0.02,
             dtype: torch.dtype = torch.float32) -> "ContextTokens":
        if n_ctx < 1:
            raise ConfigError(f"n_ctx must be >= 1, got {n_ctx}")
        g = torch.Generator().manual_seed(seed)
        vec = torch.randn(n_ctx, token_dim, generator=g, dtype=dtype) * std
        return cls(nn.Parameter(vec))

    @property
    def n_ctx(self) -> int:
        return self.vectors.shape[0]

    @property
    def token_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ClassVocabulary:
    names: tuple[str, ...]
    embeddings: list[torch.Tensor]  # per class: (L_c, token_dim)
    seed: int = 0

    def __post_init__(self):
        self.names = tuple(self.names)
        if len(self.names) < 2:
            raise ConfigError(f"need at least 2 classes, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("class names must be unique")
        if len(self.embeddings) != len(self.names):
            raise ShapeError(f"{len(self.names)} names but {len(self.embeddings)} embeddings")
        for name, emb in zip(self.names, self.embeddings):
            if emb.ndim != 2 or emb.shape[0] == 0:
                raise ShapeError(f"class {name!r}: embedding must be a non-empty (L, token_dim) matrix")

    @classmethod
    def from_names(cls, names: Sequence[str], token_dim: int = 64, seed: int = 0) -> "ClassVocabulary":
        """One hashed token per class name."""
        embs = [hash_embedding(n, token_dim, seed).unsqueeze(0) for n in names]
        return cls(tuple(names), embs, seed)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def token_dim(self) -> int:
        return self.embeddings[0].shape[1]

    def template_tokens(self, template: str = TEMPLATE) -> tuple[torch.Tensor, torch.Tensor]:
        """Hashed word tokens before and after the ``[CLASS]`` slot of ``template``."""
        before, slot, after = template.partition("[CLASS]")
        if not slot:
            raise ConfigError(f"template {template!r} lacks a [CLASS] slot")

        def words(text):
            toks = [hash_embedding(w, self.token_dim, self.seed) for w in text.split()]
            return torch.stack(toks) if toks else torch.empty(0, self.token_dim)

        return words(before), words(after)


@dataclass(frozen=True)
class SemanticAnchors:
    matrix: torch.Tensor  # (C, d), unit rows
    class_names: tuple[str, ...]
    frozen: bool = False

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.class_names):
            raise ShapeError(
                f"anchor matrix {tuple(self.matrix.shape)} does not match {len(self.class_names)} class names"
            )

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def freeze(self) -> "SemanticAnchors":
        """Detached float32 copy marked frozen."""
        m = self.matrix.detach().to(torch.float32).clone()
        m.requires_grad_(False)
        return SemanticAnchors(m, tuple(self.class_names), frozen=True)

    def digest(self) -> str:
        h = hashlib.sha256(self.matrix.detach().cpu().numpy().astype("<f4").tobytes())
        h.update("\x00".join(self.class_names).encode("utf-8"))
        return h.hexdigest()


def _init_linear(layer: nn.Linear, g: torch.Generator) -> None:
    with torch.no_grad():
        layer.weight.copy_(torch.randn(layer.weight.shape, generator=g) / math.sqrt(layer.in_features))
        if layer.bias is not None:
            layer.bias.zero_()


class ToyImageEncoder(nn.Module):
    """Frozen two-layer tanh MLP standing in for a pretrained image tower."""

    def __init__(self, input_dim: int, embed_dim: int, hidden: int = 256, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.fc1 = nn.Linear(input_dim, hidden)
        self.fc2 = nn.Linear(hidden, embed_dim)
        _init_linear(self.fc1, g)
        _init_linear(self.fc2, g)
        self.input_dim = input_dim
        self.embed_dim = embed_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.tanh(self.fc1(x)))


class ToyTextEncoder(nn.Module):
    """One linear-attention layer read out at the last (class) token, then projected.

    ``out = W_o (x_L + sum_j <W_q x_L, W_k x_j> / sqrt(d_k) * W_v x_j)``
    """

    def __init__(self, token_dim: int, embed_dim: int, key_dim: int = 16, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.query = nn.Linear(token_dim, key_dim, bias=False)
        self.key = nn.Linear(token_dim, key_dim, bias=False)
        self.value = nn.Linear(token_dim, token_dim, bias=False)
        self.proj = nn.Linear(token_dim, embed_dim, bias=False)
        for layer in (self.query, self.key, self.value, self.proj):
            _init_linear(layer, g)
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        self.key_dim = key_dim

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim == 2:
            return self.forward(tokens.unsqueeze(0)).squeeze(0)
        if tokens.shape[-1] != self.token_dim:
            raise ShapeError(f"token dim {tokens.shape[-1]} != encoder token dim {self.token_dim}")
        last = tokens[:, -1]
        scores = torch.einsum("bk,blk->bl", self.query(last), self.key(tokens)) / math.sqrt(self.key_dim)
        mixed = last + torch.einsum("bl,bld->bd", scores, self.value(tokens))
        return self.proj(mixed)


def _param_hash(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class EncoderPair:
    """Frozen image and text encoders sharing a ``d``-dimensional output space.

    Parameters are switched to ``requires_grad=False`` and eval mode on
    construction and stay that way.
    """

    def __init__(self, image_encoder: nn.Module, text_encoder: nn.Module):
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        for m in (image_encoder, text_encoder):
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    @property
    def trainable(self) -> bool:
        return False

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(images)

    def encode_text(self, prompts: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(prompts)

    def parameter_count(self) -> int:
        return sum(p.numel() for m in (self.image_encoder, self.text_encoder) for p in m.parameters())

    def state_hash(self) -> str:
        return _param_hash(self.image_encoder, self.text_encoder)

    def to(self, dtype: torch.dtype) -> "EncoderPair":
        self.image_encoder.to(dtype)
        self.text_encoder.to(dtype)
        return self


def make_toy_encoders(input_dim: int, token_dim: int = 64, embed_dim: int = 32,
                      key_dim: int = 16, hidden: int = 256, seed: int = 1234) -> EncoderPair:
    return EncoderPair(
        ToyImageEncoder(input_dim, embed_dim, hidden=hidden, seed=seed),
        ToyTextEncoder(token_dim, embed_dim, key_dim=key_dim, seed=seed + 1),
    )


def assemble_prompt(ctx: ContextTokens, vocab: ClassVocabulary, class_index: int) -> torch.Tensor:
    """``[v_1, ..., v_n, w_c]`` as an ``(n_ctx + L_c, token_dim)`` tensor; gradients reach ``ctx``."""
    if not 0 <= class_index < len(vocab):
        raise IndexError(f"class_index {class_index} out of range for {len(vocab)} classes")
    w = vocab.embeddings[class_index].to(ctx.vectors.dtype)
    if w.shape[1] != ctx.token_dim:
        raise ShapeError(f"class embedding dim {w.shape[1]} != context dim {ctx.token_dim}")
    return torch.cat([ctx.vectors, w], dim=0)


def _normalize_rows(feats: torch.Tensor, names: Sequence[str]) -> torch.Tensor:
    norms = feats.norm(dim=1)
    bad = torch.nonzero(~(norms > 0) | ~torch.isfinite(norms)).flatten().tolist()
    if bad:
        c = bad[0]
        raise NumericError(f"text feature for class {c} ({names[c]!r}) has zero or non-finite norm")
    return feats / norms.unsqueeze(1)


def _encode_prompts(pair: EncoderPair, prompts: list[torch.Tensor]) -> torch.Tensor:
    # Batch equal-length prompts; keep class order.
    out: list[torch.Tensor | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_len.setdefault(p.shape[0], []).append(i)
    for idx in by_len.values():
        feats = pair.encode_text(torch.stack([prompts[i] for i in idx]))
        for j, i in enumerate(idx):
            out[i] = feats[j]
    return torch.stack(out)


def encode_anchors(pair: EncoderPair, ctx: ContextTokens, vocab: ClassVocabulary) -> SemanticAnchors:
    """Encode every class prompt and l2-normalize; differentiable w.r.t. ``ctx``."""
    if pair.trainable:
        raise RuntimeError("encoders must be frozen")
    prompts = [assemble_prompt(ctx, vocab, c) for c in range(len(vocab))]
    feats = _encode_prompts(pair, prompts)
    return SemanticAnchors(_normalize_rows(feats, vocab.names), vocab.names, frozen=False)


def template_anchors(pair: EncoderPair, vocab: ClassVocabulary, template: str = TEMPLATE) -> SemanticAnchors:
    """Frozen anchors from a fixed hand-written prompt such as ``"a photo of a [CLASS]"``."""
    before, after = vocab.template_tokens(template)
    with torch.no_grad():
        prompts = [torch.cat([before, vocab.embeddings[c], after]) for c in range(len(vocab))]
        feats = _encode_prompts(pair, prompts)
        return SemanticAnchors(_normalize_rows(feats, vocab.names), vocab.names).freeze()


def calibration_loss(image_feats: torch.Tensor, anchors: SemanticAnchors | torch.Tensor,
                     labels: torch.Tensor, temperature: float, symmetric: bool = False) -> torch.Tensor:
    """Mean cross-entropy of cosine similarities scaled by ``1/temperature``.

    With ``symmetric=True`` the image-to-text term is averaged 50/50 with a
    text-to-image term: for each sample, its class anchor's softmax over the
    batch images.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    matrix = anchors.matrix if isinstance(anchors, SemanticAnchors) else anchors
    if image_feats.shape[1] != matrix.shape[1]:
        raise ShapeError(f"image feature dim {image_feats.shape[1]} != anchor dim {matrix.shape[1]}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= matrix.shape[0]):
        raise IndexError(f"labels must lie in [0, {matrix.shape[0]})")
    sims = image_feats @ matrix.T / temperature
    if not torch.isfinite(sims).all():
        raise NumericError("non-finite similarity in calibration loss")
    loss = F.cross_entropy(sims, labels)
    if symmetric:
        # column y_i of sims, softmax over the batch, target row i
        t2i = -torch.log_softmax(sims.T[labels], dim=1).diagonal().mean()
        loss = 0.5 * loss + 0.5 * t2i
    return loss


def run_psc(config: "TrainConfig | PSCConfig", data: "DatasetSplit", pair: EncoderPair,
            vocab: ClassVocabulary, *, ctx: ContextTokens | None = None,
            eval_split: "DatasetSplit | None" = None, log: "MetricsLog | None" = None) -> SemanticAnchors:
    """Optimize only the context tokens with SGD, then return frozen anchors.

    ``ctx`` is created from the config seed when omitted; pass one in to inspect
    it afterwards. Per-epoch calibration loss (and held-out teacher top-1 when
    ``eval_split`` is given) is appended to ``log``.
    """
    psc = getattr(config, "psc", config)
    if not psc.tau_psc > 0:
        raise ConfigError(f"psc.tau_psc must be positive, got {psc.tau_psc}")
    if len(data) and int(data.labels().max()) >= len(vocab):
        raise IndexError("dataset labels exceed vocabulary size")
    if ctx is None:
        ctx = ContextTokens.init(psc.n_ctx, vocab.token_dim, seed=psc.seed, std=psc.init_std)
    opt = torch.optim.SGD([ctx.vectors], lr=psc.lr, momentum=psc.momentum, weight_decay=psc.weight_decay)
    g = torch.Generator().manual_seed(psc.seed)

    from .data import iter_batches  # local: data imports this module

    with torch.no_grad():
        feats = F.normalize(pair.encode_images(data.inputs()), dim=1) if len(data) else None
        eval_feats = eval_labels = None
        if eval_split is not None and len(eval_split):
            eval_feats = F.normalize(pair.encode_images(eval_split.inputs()), dim=1)
            eval_labels = eval_split.labels()
    labels = data.labels()

    for epoch in range(psc.epochs):
        total, count = 0.0, 0
        for idx in iter_batches(len(data), psc.batch_size, g):
            anchors = encode_anchors(pair, ctx, vocab)
            loss = calibration_loss(feats[idx], anchors, labels[idx], psc.tau_psc, psc.symmetric)
            if not torch.isfinite(loss):
                raise DivergenceError(f"calibration loss diverged at epoch {epoch}", epoch=epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        record = {"stage": "psc", "epoch": epoch, "lr": psc.lr, "calibration": total / max(count, 1)}
        if eval_feats is not None:
            with torch.no_grad():
                m = encode_anchors(pair, ctx, vocab).matrix
                pred = (eval_feats @ m.T).argmax(1)
                record["teacher_top1"] = 100.0 * float((pred == eval_labels).double().mean())
        if log is not None:
            log.append(record)
        logger.debug("psc epoch %d: %s", epoch, record)

    with torch.no_grad():
        return encode_anchors(pair, ctx, vocab).freeze()


def save_anchors(anchors: SemanticAnchors, path: str | Path) -> None:
    """Write ``PANDANCH | version | C | d | C*d float32 | C x (len, UTF-8 name)``, little-endian."""
    if not anchors.frozen:
        raise ValueError("only frozen anchors may be saved")
    m = anchors.matrix.detach().cpu().numpy().astype("<f4")
    c, d = m.shape
    parts = [ANCHOR_MAGIC, struct.pack("<III", ANCHOR_VERSION, c, d), m.tobytes()]
    parts.extend(pack_string(n) for n in anchors.class_names)
    Path(path).write_bytes(b"".join(parts))


def load_anchors(path: str | Path) -> SemanticAnchors:
    reader = Reader(Path(path).read_bytes())
    check_magic(reader, ANCHOR_MAGIC)
    c = reader.u32("class count")
    d = reader.u32("dim")
    need = c * d
    if reader.remaining() < 4 * need:
        raise FormatError(f"payload short: expected {need} floats ({4 * need} bytes)")
    matrix = np.frombuffer(reader.take(4 * need, "payload"), dtype="<f4").reshape(c, d)
    names = [reader.string(f"class name {i}") for i in range(c)]
    if reader.remaining():
        raise FormatError(f"trailing bytes: {reader.remaining()}")
    tensor = torch.from_numpy(matrix.astype(np.float32))
    return SemanticAnchors(tensor, tuple(names), frozen=True)
