"""Dataset ingestion and deterministic synthetic toy datasets.

Inputs are treated as opaque tensors; decoding real images is left to encoder
adapters. Two sources are supported:

* :func:`load_image_folder` -- one subdirectory per class plus a split file.
* :func:`make_toy` -- seeded Gaussian clusters around well-separated unit means.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator

import numpy as np
import torch

from . import _binary
from .anchors import ClassVocabulary
from .errors import ConfigError, FormatError, IngestionError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
TOY_MAGIC = b"PANDDATA"


@dataclass(frozen=True)
class Sample:
    input: Any
    label: int
    id: str


@dataclass
class DatasetSplit:
    samples: list[Sample]
    vocab: ClassVocabulary
    split_name: str = "train"
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.split_name not in SPLITS:
            raise ConfigError(f"split_name must be one of {SPLITS}, got {self.split_name!r}")
        c = len(self.vocab)
        seen = set()
        for s in self.samples:
            if not 0 <= s.label < c:
                raise IndexError(f"sample {s.id!r}: label {s.label} outside vocabulary of {c}")
            if s.id in seen:
                raise ValueError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.vocab)

    def inputs(self) -> torch.Tensor:
        """Stack all inputs into one float32 tensor."""
        if not self.samples:
            return torch.empty(0)
        return torch.stack([torch.as_tensor(s.input, dtype=torch.float32) for s in self.samples])

    def labels(self) -> torch.Tensor:
        return torch.tensor([s.label for s in self.samples], dtype=torch.long)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


def iter_batches(n: int, batch_size: int, generator: torch.Generator | None = None,
                 shuffle: bool = True) -> Iterator[torch.Tensor]:
    """Yield index batches of ``batch_size`` (last may be short) in seeded order."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _default_loader(path: Path) -> Any:
    if path.suffix == ".npy":
        return torch.from_numpy(np.load(path).astype(np.float32))
    return path


def load_image_folder(root: str | Path, split_file: str | Path, *,
                      loader: Callable[[Path], Any] | None = None,
                      split_name: str = "train", token_dim: int = 64,
                      vocab_seed: int = 0) -> DatasetSplit:
    """Load a class-per-directory dataset restricted to the entries of ``split_file``.

    Each split-file line is ``<relative path> <class name>``. The vocabulary is
    built from the sorted subdirectory names of ``root``; samples keep the
    split-file order. ``.npy`` files are loaded as float32 tensors, anything else
    is passed through as a path unless a ``loader`` is supplied.
    """
    root = Path(root)
    loader = loader or _default_loader
    if not root.is_dir():
        raise IngestionError(f"dataset root is not a directory: {root}")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(class_names) < 2:
        raise IngestionError(f"{root}: need at least 2 class directories, found {len(class_names)}")
    index = {name: i for i, name in enumerate(class_names)}

    split_path = Path(split_file)
    if not split_path.is_absolute() and not split_path.exists():
        split_path = root / split_path
    try:
        lines = split_path.read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise IngestionError(f"cannot read split file {split_path}: {exc}") from exc

    samples = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        rel, sep, cls = line.partition(" ")
        if not sep or not cls:
            raise IngestionError(f"{split_path}:{lineno}: expected '<path> <class>', got {line!r}")
        if cls not in index:
            raise IngestionError(f"{split_path}:{lineno}: unknown class directory {cls!r} for {rel}")
        path = root / rel
        if not path.is_file():
            raise IngestionError(f"{split_path}:{lineno}: missing file {path}")
        samples.append(Sample(input=loader(path), label=index[cls], id=rel))

    counts = np.bincount([s.label for s in samples], minlength=len(class_names))
    warnings = []
    for name, count in zip(class_names, counts):
        if count == 0:
            msg = f"class {name!r} has no samples in {split_path.name}"
            logger.warning(msg)
            warnings.append(msg)
    vocab = ClassVocabulary.from_names(class_names, token_dim=token_dim, seed=vocab_seed)
    return DatasetSplit(samples, vocab, split_name, warnings)


def toy_class_names(c: int) -> list[str]:
    width = max(2, len(str(c - 1)))
    return [f"class_{i:0{width}d}" for i in range(c)]


def _separated_means(c: int, dim: int, separation: float, g: torch.Generator,
                     max_tries: int = 20000) -> torch.Tensor:
    limit = math.cos(separation)
    means: list[torch.Tensor] = []
    tries = 0
    while len(means) < c:
        tries += 1
        if tries > max_tries:
            raise ConfigError(
                f"could not place {c} unit means in {dim} dims with separation "
                f"{separation:.4f} rad after {max_tries} draws"
            )
        v = torch.randn(dim, generator=g, dtype=torch.float64)
        v = v / v.norm()
        if all(float(v @ u) <= limit for u in means):
            means.append(v)
    return torch.stack(means)


def make_toy(c: int, n_per_class: int, dim: int, separation: float, seed: int, *,
             noise: float = 0.15, train_fraction: float = 0.8, token_dim: int = 64,
             vocab_seed: int | None = None) -> tuple[DatasetSplit, DatasetSplit]:
    """Gaussian clusters around unit-norm class means at least ``separation`` radians apart.

    Each class contributes ``n_per_class`` samples, split per class into train and
    test by ``train_fraction``. The output is a pure function of the arguments.
    """
    if c < 2:
        raise ConfigError(f"need c >= 2 classes, got {c}")
    if dim < 2:
        raise ConfigError(f"need dim >= 2, got {dim}")
    if not separation > 0:
        raise ConfigError(f"separation must be positive, got {separation}")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    # c unit vectors cannot all be further apart than the regular simplex allows.
    if separation > math.acos(-1.0 / (c - 1)) + 1e-12:
        raise ConfigError(
            f"separation {separation:.4f} rad infeasible for {c} classes "
            f"(maximum {math.acos(-1.0 / (c - 1)):.4f})"
        )

    g = torch.Generator().manual_seed(seed)
    means = _separated_means(c, dim, separation, g)
    n_train = int(round(n_per_class * train_fraction))
    names = toy_class_names(c)
    vocab = ClassVocabulary.from_names(names, token_dim=token_dim,
                                       seed=seed if vocab_seed is None else vocab_seed)

    train, test = [], []
    for label in range(c):
        pts = means[label] + noise * torch.randn(n_per_class, dim, generator=g, dtype=torch.float64)
        pts = pts.float()
        for j in range(n_per_class):
            s = Sample(input=pts[j], label=label, id=f"toy-{label:03d}-{j:04d}")
            (train if j < n_train else test).append(s)
    train = [train[i] for i in torch.randperm(len(train), generator=g).tolist()]
    test = [test[i] for i in torch.randperm(len(test), generator=g).tolist()]
    return DatasetSplit(train, vocab, "train"), DatasetSplit(test, vocab, "test")


def save_toy(path: str | Path, train: DatasetSplit, test: DatasetSplit) -> None:
    """Write a train/test pair using the checkpoint container layout (magic ``PANDDATA``)."""
    if train.vocab.names != test.vocab.names:
        raise ValueError("train and test vocabularies differ")
    tensors = {}
    meta: dict[str, Any] = {
        "class_names": list(train.vocab.names),
        "token_dim": train.vocab.token_dim,
        "vocab_seed": train.vocab.seed,
    }
    for split in (train, test):
        tensors[f"{split.split_name}.inputs"] = split.inputs().numpy()
        tensors[f"{split.split_name}.labels"] = split.labels().numpy()
        meta[f"{split.split_name}.ids"] = split.ids()
    _binary.write_container(path, TOY_MAGIC, tensors, meta)


def load_toy(path: str | Path) -> tuple[DatasetSplit, DatasetSplit]:
    tensors, meta = _binary.read_container(path, TOY_MAGIC)
    try:
        vocab = ClassVocabulary.from_names(meta["class_names"], token_dim=meta["token_dim"],
                                           seed=meta["vocab_seed"])
        out = []
        for name in SPLITS:
            x = torch.from_numpy(tensors[f"{name}.inputs"].copy())
            y = tensors[f"{name}.labels"].tolist()
            ids = meta[f"{name}.ids"]
            samples = [Sample(x[i], int(y[i]), ids[i]) for i in range(len(ids))]
            out.append(DatasetSplit(samples, vocab, name))
    except KeyError as exc:
        raise FormatError(f"dataset file missing field {exc.args[0]!r}") from exc
    return out[0], out[1]
