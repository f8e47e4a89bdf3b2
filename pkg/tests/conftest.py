import sys

import pytest
import torch

from pand.anchors import ClassVocabulary, make_toy_encoders
from pand.config import toy_config
from pand.data import make_toy


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_splits():
    cfg = toy_config()
    d = cfg.data
    return make_toy(d.classes, d.n_per_class, d.dim, d.separation, d.seed, noise=d.noise, token_dim=d.token_dim)


@pytest.fixture
def tiny_encoders():
    """4-dim token / feature space encoder pair in float64 for gradient checks."""
    return make_toy_encoders(input_dim=3, token_dim=4, embed_dim=4, key_dim=4, hidden=8, seed=7).to(torch.float64)


@pytest.fixture
def tiny_vocab():
    vocab = ClassVocabulary.from_names(["a", "b", "c"], token_dim=4, seed=3)
    vocab.embeddings = [e.double() for e in vocab.embeddings]
    return vocab


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
