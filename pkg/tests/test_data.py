import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pand.data import iter_batches, load_image_folder, load_toy, make_toy, save_toy, toy_class_names
from pand.errors import ConfigError, FormatError, IngestionError


@pytest.fixture
def bird_root(tmp_path):
    root = tmp_path / "birds"
    for cls in ("crow", "albatross"):
        (root / cls).mkdir(parents=True)
        for j in range(2):
            np.save(root / cls / f"{j}.npy", np.full(3, j + (cls == "crow") * 10, dtype=np.float32))
    (root / "train.txt").write_text("albatross/0.npy albatross\ncrow/1.npy crow\ncrow/0.npy crow\n")
    return root


def test_image_folder_sorted_vocabulary_and_split_order(bird_root):
    split = load_image_folder(bird_root, "train.txt", token_dim=8)
    assert split.vocab.names == ("albatross", "crow")
    assert split.labels().tolist() == [0, 1, 1]
    assert split.ids() == ["albatross/0.npy", "crow/1.npy", "crow/0.npy"]
    assert torch.equal(split.inputs()[1], torch.full((3,), 11.0))
    assert split.warnings == []


def test_image_folder_deterministic(bird_root):
    a = load_image_folder(bird_root, "train.txt", token_dim=8)
    b = load_image_folder(bird_root, "train.txt", token_dim=8)
    assert a.ids() == b.ids() and torch.equal(a.inputs(), b.inputs())
    assert all(torch.equal(x, y) for x, y in zip(a.vocab.embeddings, b.vocab.embeddings))


def test_image_folder_missing_file(bird_root):
    (bird_root / "bad.txt").write_text("crow/7.npy crow\n")
    with pytest.raises(IngestionError, match="missing file"):
        load_image_folder(bird_root, "bad.txt")


def test_image_folder_unknown_class_and_bad_line(bird_root):
    (bird_root / "bad.txt").write_text("crow/0.npy raven\n")
    with pytest.raises(IngestionError, match="unknown class"):
        load_image_folder(bird_root, "bad.txt")
    (bird_root / "bad2.txt").write_text("crow/0.npy\n")
    with pytest.raises(IngestionError, match="expected"):
        load_image_folder(bird_root, "bad2.txt")


def test_image_folder_empty_class_warns(bird_root):
    (bird_root / "test.txt").write_text("crow/0.npy crow\n")
    split = load_image_folder(bird_root, "test.txt", split_name="test")
    assert len(split.warnings) == 1 and "albatross" in split.warnings[0]


def test_image_folder_missing_root(tmp_path):
    with pytest.raises(IngestionError):
        load_image_folder(tmp_path / "nope", "train.txt")


def test_make_toy_counts_and_ids():
    train, test = make_toy(10, 50, 16, math.pi / 3, 0)
    assert len(train) == 400 and len(test) == 100
    assert torch.bincount(train.labels()).tolist() == [40] * 10
    assert torch.bincount(test.labels()).tolist() == [10] * 10
    assert not set(train.ids()) & set(test.ids())
    assert train.vocab.names == tuple(toy_class_names(10))


def test_make_toy_is_pure_function_of_arguments():
    a, _ = make_toy(4, 10, 8, 0.5, 3)
    b, _ = make_toy(4, 10, 8, 0.5, 3)
    c, _ = make_toy(4, 10, 8, 0.5, 4)
    assert torch.equal(a.inputs(), b.inputs()) and a.ids() == b.ids()
    assert not torch.equal(a.inputs(), c.inputs())


def test_make_toy_respects_separation():
    train, test = make_toy(6, 200, 16, 1.2, 1, noise=0.01)
    x = torch.cat([train.inputs(), test.inputs()])
    y = torch.cat([train.labels(), test.labels()])
    means = F.normalize(torch.stack([x[y == c].mean(0) for c in range(6)]), dim=1)
    cos = means @ means.T
    off = cos[~torch.eye(6, dtype=torch.bool)]
    # empirical means sit near the sampled ones, so allow a small slack
    assert float(off.max()) <= math.cos(1.2) + 0.02


def test_make_toy_infeasible_separation():
    with pytest.raises(ConfigError, match="infeasible"):
        make_toy(3, 5, 4, 2.2, 0)
    make_toy(3, 5, 4, 2.0, 0)


def test_make_toy_argument_errors():
    for kwargs in (dict(c=1), dict(dim=1), dict(separation=0.0), dict(n_per_class=0)):
        args = dict(c=3, n_per_class=5, dim=4, separation=0.5, seed=0) | kwargs
        with pytest.raises(ConfigError):
            make_toy(**args)


def test_toy_linearly_separable_least_squares_oracle(toy_splits):
    train, test = toy_splits
    x = torch.cat([train.inputs(), torch.ones(len(train), 1)], 1).double()
    w = torch.linalg.lstsq(x, F.one_hot(train.labels(), 10).double()).solution
    xt = torch.cat([test.inputs(), torch.ones(len(test), 1)], 1).double()
    acc = float(((xt @ w).argmax(1) == test.labels()).double().mean())
    assert acc >= 0.95


def test_toy_file_roundtrip(tmp_path, toy_splits):
    train, test = toy_splits
    save_toy(tmp_path / "toy.bin", train, test)
    tr2, te2 = load_toy(tmp_path / "toy.bin")
    assert tr2.ids() == train.ids() and te2.ids() == test.ids()
    assert train.inputs().numpy().tobytes() == tr2.inputs().numpy().tobytes()
    assert torch.equal(te2.labels(), test.labels())
    assert all(torch.equal(a, b) for a, b in zip(tr2.vocab.embeddings, train.vocab.embeddings))
    raw = (tmp_path / "toy.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-40])
    with pytest.raises(FormatError):
        load_toy(tmp_path / "cut.bin")


def test_iter_batches_cover_every_index_once():
    g = torch.Generator().manual_seed(0)
    batches = list(iter_batches(10, 3, g))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(torch.cat(batches).tolist()) == list(range(10))
    assert torch.cat(list(iter_batches(5, 2, shuffle=False))).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ConfigError):
        list(iter_batches(5, 0))
