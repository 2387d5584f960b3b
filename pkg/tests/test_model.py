import torch

from core.model import SsmModel
from core.numerics import ENCODER_GROUP, HEAD_GROUP


def _frames(config, batch=3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, config.frames, config.d_raw, generator=gen, dtype=torch.float64)


def test_prototype_model_scores(config):
    model = SsmModel(config, 0)
    s_exp, s_au = model(_frames(config), _frames(config, 5))
    assert s_exp.shape == (3, config.K)
    assert s_au.shape == (5, config.M)
    # cosine similarities divided by tau
    assert bool((s_exp.abs() <= 1.0 / config.tau + 1e-9).all())
    assert model.mapping is model.dpm


def test_linear_model_has_no_mapping(make_config):
    config = make_config(head="linear")
    model = SsmModel(config, 0)
    assert model.mapping is None
    s_exp, s_au = model(_frames(config), None)
    assert s_exp.shape == (3, config.K) and s_au is None


def test_parameter_groups(config):
    params = SsmModel(config, 0).trainable_parameters()
    groups = {p.name: p.group for p in params}
    assert groups["backbone.encoder.moe.router"] == ENCODER_GROUP
    assert groups["backbone.exp_block.wq"] == HEAD_GROUP
    assert groups["dpm.W_ae"] == HEAD_GROUP
    assert groups["text.expression_prompts.context"] == HEAD_GROUP
    assert not any("shared_expert" in name for name in groups)
    assert not any(name.startswith("text.provider") for name in groups)


def test_same_seed_same_model(config):
    a, b = SsmModel(config, 4), SsmModel(config, 4)
    frames = _frames(config)
    assert torch.equal(a.expression_scores(frames), b.expression_scores(frames))
