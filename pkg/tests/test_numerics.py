import math

import pytest
import torch

from core.errors import DegenerateVectorError, DeterminismError, InvalidArgumentError, NonFiniteError
from core.numerics import (
    DTYPE,
    ENCODER_GROUP,
    HEAD_GROUP,
    AdamW,
    adamw_step,
    check_finite,
    collect_parameters,
    frobenius_distance,
    grad_check,
    l2_normalize,
    layer_norm,
    row_softmax,
    seeded_generator,
)


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


def test_row_softmax_rows_sum_to_one():
    m = _rand(5, 7) * 30
    p = row_softmax(m, 0.01)
    assert torch.allclose(p.sum(dim=1), torch.ones(5, dtype=DTYPE), atol=1e-9)
    assert bool((p >= 0).all())


def test_row_softmax_is_shift_invariant_and_handles_large_inputs():
    m = _rand(3, 4)
    assert torch.allclose(row_softmax(m, 0.5), row_softmax(m + 1000.0, 0.5), atol=1e-12)
    big = torch.tensor([[1e4, 0.0, -1e4]], dtype=DTYPE)
    assert torch.isfinite(row_softmax(big, 0.01)).all()


def test_row_softmax_rejects_bad_temperature_and_nan():
    with pytest.raises(InvalidArgumentError):
        row_softmax(_rand(2, 2), 0.0)
    with pytest.raises(NonFiniteError):
        row_softmax(torch.tensor([[float("nan"), 1.0]], dtype=DTYPE))


def test_l2_normalize_unit_norm_and_idempotent():
    v = _rand(6, 5)
    u = l2_normalize(v)
    assert torch.allclose(torch.linalg.vector_norm(u, dim=1), torch.ones(6, dtype=DTYPE), atol=1e-12)
    assert torch.equal(l2_normalize(u), u)


def test_l2_normalize_zero_vector_raises():
    with pytest.raises(DegenerateVectorError):
        l2_normalize(torch.zeros(2, 3, dtype=DTYPE))


def test_layer_norm_standardizes_and_floors_constant_rows():
    x = _rand(4, 9)
    y = layer_norm(x)
    assert torch.allclose(y.mean(dim=1), torch.zeros(4, dtype=DTYPE), atol=1e-12)
    assert torch.allclose((y * y).mean(dim=1), torch.ones(4, dtype=DTYPE), atol=1e-9)
    flat = layer_norm(torch.full((2, 5), 3.0, dtype=DTYPE))
    assert torch.equal(flat, torch.zeros(2, 5, dtype=DTYPE))


@pytest.mark.parametrize("seed", range(10))
def test_primitive_adjoints_match_finite_differences(seed):
    m = torch.nn.Parameter(_rand(3, 4, seed=seed) * 0.05)
    v = torch.nn.Parameter(_rand(3, 4, seed=seed + 10))
    x = torch.nn.Parameter(_rand(3, 4, seed=seed + 20))
    w = _rand(3, 4, seed=seed + 30)

    def fn():
        return (row_softmax(m, 0.01) * w).sum() + (l2_normalize(v) * w).sum() + (layer_norm(x) * w * w).sum()

    report = grad_check(fn, [("m", m), ("v", v), ("x", x)], h=1e-6)
    assert report.passed, report.as_dict()
    assert {e.name for e in report.entries} == {"m", "v", "x"}


def test_grad_check_detects_wrong_gradient():
    p = torch.nn.Parameter(_rand(3))

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, t):
            return (t * t).sum()

        @staticmethod
        def backward(ctx, g):
            return torch.ones(3, dtype=DTYPE) * g

    report = grad_check(lambda: Wrong.apply(p), [("p", p)])
    assert not report.passed
    assert report.worst.name == "p"


def test_grad_check_rejects_nondeterministic_function_and_bad_step():
    p = torch.nn.Parameter(_rand(2))
    calls = {"n": 0}

    def flaky():
        calls["n"] += 1
        return p.sum() + calls["n"]

    with pytest.raises(DeterminismError):
        grad_check(flaky, [("p", p)])
    with pytest.raises(InvalidArgumentError):
        grad_check(lambda: p.sum(), [("p", p)], h=1e-2)


def test_grad_check_perturbs_transposed_parameters():
    base = _rand(4, 3) * 0.05
    p = torch.nn.Parameter(base.t())
    assert not p.is_contiguous()
    before = p.detach().clone()
    w = _rand(3, 4, seed=5)

    report = grad_check(lambda: (row_softmax(p, 0.01) * w).sum(), [("p", p)], h=1e-6)
    assert report.passed, report.as_dict()
    assert report.entries[0].entries_checked == 12
    assert torch.equal(p.detach(), before)


def test_grad_check_samples_entries_when_capped():
    p = torch.nn.Parameter(_rand(50))
    report = grad_check(lambda: (p ** 3).sum(), [("p", p)], max_entries=5)
    assert report.entries[0].entries_checked == 5
    assert report.passed


def test_adamw_step_matches_closed_form_first_step():
    param = torch.tensor([1.0, -2.0], dtype=DTYPE)
    grad = torch.tensor([0.5, 0.25], dtype=DTYPE)
    m, v = torch.zeros(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE)
    adamw_step(param, grad, m, v, step=1, lr=0.1, weight_decay=0.01, eps=1e-8)
    # first step: bias-corrected m / sqrt(v) is sign(grad)
    expected = torch.tensor([1.0, -2.0], dtype=DTYPE) * (1 - 0.1 * 0.01) - 0.1 * grad / (grad.abs() + 1e-8)
    assert torch.allclose(param, expected, atol=1e-12)


def test_adamw_decay_is_decoupled_from_moments():
    param = torch.tensor([3.0], dtype=DTYPE)
    m, v = torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE)
    adamw_step(param, torch.zeros(1, dtype=DTYPE), m, v, step=1, lr=0.5, weight_decay=0.2)
    assert torch.equal(m, torch.zeros(1, dtype=DTYPE))
    assert math.isclose(param.item(), 3.0 * (1 - 0.5 * 0.2), rel_tol=0, abs_tol=1e-15)


def test_adamw_optimizer_rejects_zero_rate_and_skips_missing_grads():
    a = torch.nn.Parameter(torch.ones(2, dtype=DTYPE))
    b = torch.nn.Parameter(torch.ones(2, dtype=DTYPE))
    with pytest.raises(InvalidArgumentError):
        AdamW([{"params": [a], "lr": 0.0}])
    opt = AdamW([{"params": [a], "lr": 0.1, "name": "x"}, {"params": [b], "lr": 0.1, "name": "y"}])
    a.grad = torch.ones(2, dtype=DTYPE)
    opt.step()
    assert torch.equal(b.detach(), torch.ones(2, dtype=DTYPE))
    assert not torch.equal(a.detach(), torch.ones(2, dtype=DTYPE))
    assert opt.state[a]["step"] == 1


def test_collect_parameters_groups_by_prefix():
    class Net(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.backbone = torch.nn.Module()
            self.backbone.encoder = torch.nn.Linear(2, 2)
            self.head = torch.nn.Linear(2, 2)
            self.frozen = torch.nn.Parameter(torch.zeros(1), requires_grad=False)

    params = {p.name: p.group for p in collect_parameters(Net())}
    assert params["backbone.encoder.weight"] == ENCODER_GROUP
    assert params["head.bias"] == HEAD_GROUP
    assert "frozen" not in params


def test_seeded_generators_are_reproducible_and_independent():
    a = torch.rand(4, generator=seeded_generator(3, 1))
    b = torch.rand(4, generator=seeded_generator(3, 1))
    c = torch.rand(4, generator=seeded_generator(3, 2))
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_check_finite_and_frobenius():
    with pytest.raises(NonFiniteError) as err:
        check_finite("scores", torch.tensor([1.0, float("inf")]))
    assert err.value.tensor_name == "scores"
    assert frobenius_distance(torch.eye(2, dtype=DTYPE), torch.zeros(2, 2, dtype=DTYPE)) == pytest.approx(math.sqrt(2))
