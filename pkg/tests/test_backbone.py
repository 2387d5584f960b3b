import pytest
import torch

from core.backbone import Backbone, ClipBatch, FrameEncoder, MoeLayer, TemporalBlock, center_index, top_k_gates
from core.errors import ConfigurationError, InvalidArgumentError
from core.numerics import DTYPE, grad_check, layer_norm, seeded_generator
from ontology.config import MoeConfig


def _x(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def test_top_k_gates_renormalize():
    logits = _x(5, 4)
    indices, weights = top_k_gates(logits, 2)
    assert indices.shape == (5, 2)
    assert torch.allclose(weights.sum(dim=1), torch.ones(5, dtype=DTYPE), atol=1e-12)
    assert torch.equal(indices[:, 0], torch.argmax(logits, dim=1))


def test_moe_with_zero_gamma_equals_shared_expert():
    moe = MoeLayer(6, 4, 2, 5, generator=seeded_generator(0, 1))
    x = _x(3, 6)
    assert torch.equal(moe(x), moe.shared_expert(layer_norm(x)))


def test_shared_expert_is_a_frozen_copy_of_the_block_feed_forward():
    encoder = FrameEncoder(5, 6, MoeConfig(num_experts=4, top_k=2, d_hidden=4), 3)
    shared, original = encoder.moe.shared_expert, encoder.block_ffn
    assert shared is not original
    for (name, a), (_, b) in zip(shared.named_parameters(), original.named_parameters()):
        assert torch.equal(a, b), name
        assert a.data_ptr() != b.data_ptr()
        assert not a.requires_grad
    frames = _x(2, 3, 5)
    assert torch.equal(encoder(frames), encoder.forward_without_moe(frames))
    with torch.no_grad():
        encoder.moe.gamma.fill_(0.5)
    assert not torch.equal(encoder(frames), encoder.forward_without_moe(frames))


def test_moe_evaluates_exactly_top_k_experts_per_token():
    moe = MoeLayer(6, 4, 2, 5, generator=seeded_generator(0, 1))
    moe(_x(2, 5, 6))
    assert moe.tokens_seen == 10
    assert sum(moe.expert_load) == 2 * 10


def test_moe_rejects_bad_top_k():
    with pytest.raises(ConfigurationError):
        MoeLayer(6, 2, 3)


def test_shared_expert_is_frozen():
    moe = MoeLayer(6, 4, 2, 5)
    trainable = {n for n, p in moe.named_parameters() if p.requires_grad}
    assert not any(n.startswith("shared_expert") for n in trainable)
    assert {"router", "gamma"} <= trainable


def test_moe_gradients_with_nonzero_gamma():
    moe = MoeLayer(4, 3, 2, 3, generator=seeded_generator(2, 1))
    with torch.no_grad():
        moe.gamma.fill_(0.7)
    x = _x(3, 4, seed=4)
    w = _x(3, 4, seed=5)
    params = [(n, p) for n, p in moe.named_parameters() if p.requires_grad]
    report = grad_check(lambda: (moe(x) * w).sum(), params)
    assert report.passed, report.as_dict()


def test_temporal_block_gradients():
    block = TemporalBlock(4, heads=2, ffn_hidden=6, generator=seeded_generator(0, 3))
    x = _x(2, 3, 4, seed=1)
    w = _x(2, 3, 4, seed=2)
    report = grad_check(lambda: (block(x) * w).sum(), list(block.named_parameters()))
    assert report.passed, report.as_dict()


def test_temporal_block_width_must_split_into_heads():
    with pytest.raises(ConfigurationError):
        TemporalBlock(5, heads=2)


def test_center_index():
    assert center_index(16) == 8
    assert center_index(5) == 2
    assert center_index(1) == 0


def test_backbone_shapes_and_single_frame_clip(config):
    backbone = Backbone(config, 0)
    frames = _x(3, config.frames, config.d_raw)
    assert backbone.expression_features(frames).shape == (3, config.d)
    assert backbone.au_features(frames).shape == (3, config.d)
    one = _x(2, 1, config.d_raw)
    assert backbone.expression_features(one).shape == (2, config.d)


def test_au_branch_uses_whole_clip_as_context(config):
    backbone = Backbone(config, 0)
    frames = _x(1, config.frames, config.d_raw)
    changed = frames.clone()
    changed[0, 0] += 1.0
    assert not torch.equal(backbone.au_features(frames), backbone.au_features(changed))


def test_encoder_is_seeded_and_checks_width():
    moe = MoeConfig(num_experts=4, top_k=2, d_hidden=4)
    a, b = FrameEncoder(5, 6, moe, 1), FrameEncoder(5, 6, moe, 1)
    x = _x(2, 3, 5)
    assert torch.equal(a(x), b(x))
    with pytest.raises(ConfigurationError):
        a(_x(2, 3, 4))


def test_clip_batch_validation():
    with pytest.raises(InvalidArgumentError):
        ClipBatch(_x(2, 3), "expression", torch.zeros(2, dtype=torch.long))
    with pytest.raises(InvalidArgumentError):
        ClipBatch(_x(2, 3, 4), "au", torch.zeros(2))


def test_expression_pooling_ignores_frame_order_without_positions(make_config):
    config = make_config(temporal={"heads": 1, "ffn_hidden": 8, "positional": False})
    backbone = Backbone(config, 0)
    features = _x(2, 5, config.d, seed=7)
    order = torch.tensor([3, 0, 4, 1, 2])
    assert torch.allclose(backbone.temporal_expression(features), backbone.temporal_expression(features[:, order]),
        atol=1e-12)

    positional = Backbone(make_config(), 0)
    assert not torch.allclose(positional.temporal_expression(features),
        positional.temporal_expression(features[:, order]), atol=1e-6)
