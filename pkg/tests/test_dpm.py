import pytest
import torch

from core.dpm import DpmState, build_dpm, enhance, init_prior, init_random, map_prototypes
from core.errors import ConfigurationError, InvalidArgumentError
from core.facs import BASIC_EXPRESSIONS, BP4D_AUS, build_prior_matrix, builtin_facs_table, normalize_rows
from core.numerics import DTYPE, grad_check

K, M, D = 7, 12, 5


@pytest.fixture
def W0():
    return normalize_rows(build_prior_matrix(builtin_facs_table(), BASIC_EXPRESSIONS, BP4D_AUS))


def _protos(seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(K, D, generator=gen, dtype=DTYPE), torch.randn(M, D, generator=gen, dtype=DTYPE)


def test_prior_init_is_exact_transpose(W0):
    state = init_prior(W0, K, M)
    assert torch.equal(state.W_ea, state.W_ae.t())
    assert torch.equal(state.W_ae.detach(), W0)
    assert state.W_ae.is_contiguous() and state.W_ea.is_contiguous()
    frozen = init_prior(W0, mode="frozen")
    assert frozen.W_ea.is_contiguous()


def test_prior_shape_mismatch_raises(W0):
    with pytest.raises(ConfigurationError):
        init_prior(W0, K, M + 1)


def test_mixing_weights_are_row_stochastic(W0):
    A_ae, A_ea = init_prior(W0).mixing_weights()
    assert torch.allclose(A_ae.sum(dim=1), torch.ones(K, dtype=DTYPE), atol=1e-9)
    assert torch.allclose(A_ea.sum(dim=1), torch.ones(M, dtype=DTYPE), atol=1e-9)


def test_zero_coefficients_reproduce_base_prototypes(W0):
    T_exp, T_au = _protos()
    state = init_prior(W0, alpha0=0.0, beta0=0.0)
    out_exp, out_au = state(T_exp, T_au)
    assert torch.equal(out_exp, T_exp)
    assert torch.equal(out_au, T_au)


def test_enhanced_expression_rows_follow_formula(W0):
    T_exp, T_au = _protos(1)
    state = init_prior(W0, alpha0=0.3, beta0=0.2, tau_m=0.5)
    out_exp, out_au = state(T_exp, T_au)
    A_ae = torch.softmax(W0 / 0.5, dim=1)
    A_ea = torch.softmax(W0.t() / 0.5, dim=1)
    assert torch.allclose(out_exp, T_exp + 0.3 * A_ae @ T_au, atol=1e-12)
    assert torch.allclose(out_au, T_au + 0.2 * A_ea @ T_exp, atol=1e-12)


def test_mapped_rows_lie_in_convex_hull(W0):
    T_exp, T_au = _protos(2)
    mapped_exp, _ = map_prototypes(init_random(0, K, M), T_exp, T_au)
    lo, hi = T_au.min(dim=0).values, T_au.max(dim=0).values
    assert bool((mapped_exp >= lo - 1e-12).all()) and bool((mapped_exp <= hi + 1e-12).all())


def test_modes_expose_expected_trainables(W0):
    names = lambda s: {n for n, p in s.named_parameters() if p.requires_grad}
    assert names(build_dpm(W0, "learnable-dual", "prior", 0)) == {"W_ae", "W_ea", "alpha", "beta"}
    assert names(build_dpm(W0, "frozen", "prior", 0)) == {"alpha", "beta"}
    tied = build_dpm(W0, "transpose-tied", "prior", 0)
    assert names(tied) == {"W_ae", "alpha", "beta"}
    assert torch.equal(tied.ea_matrix(), tied.W_ae.t())
    assert names(build_dpm(W0, "linear", "prior", 0)) == {"A_ae", "A_ea", "alpha", "beta"}
    assert names(build_dpm(W0, "mlp", "prior", 0)) == {"ae_in", "ae_out", "ea_in", "ea_out", "alpha", "beta"}
    fixed = build_dpm(W0, "learnable-dual", "prior", 0, coeffs_trainable=False)
    assert names(fixed) == {"W_ae", "W_ea"}


def test_random_init_is_seeded(W0):
    a = build_dpm(W0, "learnable-dual", "random", 3)
    b = build_dpm(W0, "learnable-dual", "random", 3)
    c = build_dpm(W0, "learnable-dual", "random", 4)
    assert torch.equal(a.W_ae, b.W_ae)
    assert not torch.equal(a.W_ae, c.W_ae)
    assert not torch.equal(a.W_ea, a.W_ae.t())


def test_random_entries_stay_within_tail_bound():
    state = init_random(0, 100, 100)
    entries = torch.cat([state.W_ae.detach().reshape(-1), state.W_ea.detach().reshape(-1)])
    assert entries.numel() == 20000
    inside = (entries.abs() <= 0.2).to(DTYPE).mean().item()
    assert inside >= 0.999
    assert abs(entries.mean().item()) < 0.001
    assert entries.std().item() == pytest.approx(0.02, rel=0.05)


def test_variant_modes_have_no_matrices(W0):
    state = build_dpm(W0, "linear", "prior", 0)
    assert not state.has_matrices
    with pytest.raises(InvalidArgumentError):
        state.mixing_weights()
    T_exp, T_au = _protos()
    out_exp, out_au = state(T_exp, T_au)
    assert out_exp.shape == (K, D) and out_au.shape == (M, D)


def test_prototype_count_mismatch_raises(W0):
    T_exp, T_au = _protos()
    with pytest.raises(ConfigurationError):
        init_prior(W0)(T_exp[:3], T_au)
    with pytest.raises(InvalidArgumentError):
        enhance(T_exp, T_au, torch.tensor(1.0, dtype=DTYPE))


def test_invalid_mode_and_temperature(W0):
    with pytest.raises(InvalidArgumentError):
        DpmState(W0, W0.t(), mode="bogus")
    with pytest.raises(InvalidArgumentError):
        DpmState(W0, W0.t(), tau_m=0.0)


@pytest.mark.parametrize("mode", ["learnable-dual", "transpose-tied", "mlp", "linear"])
def test_mapping_gradients(W0, mode):
    state = build_dpm(W0, mode, "random", 1, tau_m=0.5, alpha0=0.4, beta0=0.6)
    T_exp, T_au = _protos(5)
    T_exp.requires_grad_(True)
    weights = torch.linspace(-1, 1, (K + M) * D, dtype=DTYPE)

    def fn():
        out_exp, out_au = state(T_exp, T_au)
        return (torch.cat([out_exp.flatten(), out_au.flatten()]) * weights).sum()

    params = [(n, p) for n, p in state.named_parameters()] + [("T_exp", T_exp)]
    report = grad_check(fn, params)
    assert report.passed, report.as_dict()
