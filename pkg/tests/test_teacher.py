import pytest
import torch
import torch.nn.functional as F

from pand.anchors import SemanticAnchors, make_toy_encoders, template_anchors
from pand.errors import ShapeError
from pand.teacher import Teacher, teacher_forward


def _setup(seed=0):
    pair = make_toy_encoders(5, token_dim=8, embed_dim=4, key_dim=4, hidden=16, seed=seed)
    g = torch.Generator().manual_seed(seed)
    anchors = SemanticAnchors(F.normalize(torch.randn(3, 4, generator=g), dim=1), ("a", "b", "c")).freeze()
    return pair, anchors


def test_logits_are_cosines_to_anchors():
    pair, anchors = _setup()
    x = torch.randn(6, 5)
    out = teacher_forward(pair, anchors, x)
    feats = pair.encode_images(x)
    for i in range(6):
        for c in range(3):
            cos = float(feats[i] @ anchors.matrix[c]) / float(feats[i].norm() * anchors.matrix[c].norm())
            assert float(out.logits[i, c]) == pytest.approx(cos, abs=1e-6)
    assert torch.all(out.logits.abs() <= 1 + 1e-6)
    assert torch.allclose(out.features.norm(dim=1), torch.ones(6), atol=1e-6)


def test_anchor_equal_feature_gives_logit_one():
    pair, _ = _setup()
    x = torch.randn(2, 5)
    feats = F.normalize(pair.encode_images(x), dim=1)
    anchors = SemanticAnchors(torch.cat([feats, -feats[:1]]), ("p", "q", "r")).freeze()
    out = teacher_forward(pair, anchors, x)
    assert float(out.logits[0, 0]) == pytest.approx(1.0, abs=1e-6)
    assert float(out.logits[0, 2]) == pytest.approx(-1.0, abs=1e-6)


def test_teacher_outputs_carry_no_gradient():
    pair, anchors = _setup()
    x = torch.randn(4, 5, requires_grad=True)
    out = Teacher(pair, anchors)(x)
    assert not out.logits.requires_grad and not out.features.requires_grad


def test_teacher_requires_frozen_anchors_and_matching_dims():
    pair, anchors = _setup()
    with pytest.raises(ValueError):
        Teacher(pair, SemanticAnchors(anchors.matrix.clone(), anchors.class_names))
    wide = SemanticAnchors(torch.eye(3, 6)[:, :6], ("a", "b", "c")).freeze()
    with pytest.raises(ShapeError):
        teacher_forward(pair, wide, torch.randn(2, 5))


def test_teacher_state_hash_stable_over_forward_passes():
    pair, anchors = _setup()
    t = Teacher(pair, anchors)
    h = t.state_hash()
    for _ in range(3):
        t(torch.randn(8, 5))
    assert t.state_hash() == h
    assert t.num_classes == 3
    assert not pair.trainable


def test_template_teacher_is_deterministic():
    from pand.anchors import ClassVocabulary

    pair, _ = _setup()
    vocab = ClassVocabulary.from_names(["a", "b", "c"], token_dim=8, seed=1)
    a1, a2 = template_anchors(pair, vocab), template_anchors(pair, vocab)
    assert a1.digest() == a2.digest()
