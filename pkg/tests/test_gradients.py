"""Autograd against central finite differences (step 1e-3, float64)."""

import pytest
import torch
import torch.nn.functional as F

from pand.anchors import ContextTokens, calibration_loss, encode_anchors
from pand.losses import (LossWeights, classification_loss, nsd_loss, text_alignment_loss,
                         visual_alignment_loss)

from oracles import central_fd, rel_err

SEEDS = [0, 1, 2, 3, 4]
N, C, K, D = 8, 10, 3, 6
TOL = 1e-4


def _check(fn, x):
    x.requires_grad_(True)
    x.grad = None
    fn().backward()
    analytic = x.grad.clone()
    with torch.no_grad():
        numeric = central_fd(fn, x)
    assert rel_err(analytic, numeric) < TOL


def _unit(g, *shape):
    return F.normalize(torch.randn(*shape, generator=g, dtype=torch.float64), dim=-1)


@pytest.mark.parametrize("seed", SEEDS)
def test_nsd_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(N, C, generator=g, dtype=torch.float64) * 2
    s = torch.randn(N, C, generator=g, dtype=torch.float64) * 2
    y = torch.randint(0, C, (N,), generator=g)
    _check(lambda: nsd_loss(t, s, y, K), s)


@pytest.mark.parametrize("seed", SEEDS)
def test_calibration_gradient_wrt_anchor_matrix(seed):
    g = torch.Generator().manual_seed(seed)
    feats = _unit(g, N, D)
    anchors = _unit(g, C, D)
    y = torch.randint(0, C, (N,), generator=g)
    _check(lambda: calibration_loss(feats, anchors, y, 0.5), anchors)
    _check(lambda: calibration_loss(feats, anchors, y, 0.5, symmetric=True), anchors)


@pytest.mark.parametrize("seed", SEEDS)
def test_calibration_gradient_wrt_context(seed, tiny_encoders, tiny_vocab):
    g = torch.Generator().manual_seed(seed)
    ctx = ContextTokens.init(n_ctx=2, token_dim=4, seed=seed, std=0.5, dtype=torch.float64)
    with torch.no_grad():
        feats = F.normalize(tiny_encoders.encode_images(torch.randn(N, 3, generator=g, dtype=torch.float64)), dim=1)
    y = torch.randint(0, 3, (N,), generator=g)

    def fn():
        return calibration_loss(feats, encode_anchors(tiny_encoders, ctx, tiny_vocab), y, 0.5)

    _check(fn, ctx.vectors)


@pytest.mark.parametrize("seed", SEEDS)
def test_classification_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(N, C, generator=g, dtype=torch.float64)
    y = torch.randint(0, C, (N,), generator=g)
    _check(lambda: classification_loss(z, y), z)


@pytest.mark.parametrize("seed", SEEDS)
def test_visual_alignment_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(N, D, generator=g, dtype=torch.float64)
    f_img = _unit(g, N, D)
    # through the normalization, as in the student projector path
    _check(lambda: visual_alignment_loss(F.normalize(raw, dim=1), f_img), raw)


@pytest.mark.parametrize("seed", SEEDS)
def test_text_alignment_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(N, D, generator=g, dtype=torch.float64)
    anchors = _unit(g, C, D)
    y = torch.randint(0, C, (N,), generator=g)
    tau = LossWeights().tau
    _check(lambda: text_alignment_loss(F.normalize(raw, dim=1), anchors, y, tau), raw)
