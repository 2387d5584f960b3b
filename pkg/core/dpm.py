"""Dynamic prior mapping between expression and AU prototypes.

Two mapping matrices mix one task's prototypes into the other's through a
temperature row softmax; the mixed prototypes are added back residually:

    T_exp' = T_exp + alpha * softmax_row(W_ae / tau_m) @ T_au
    T_au'  = T_au  + beta  * softmax_row(W_ea / tau_m) @ T_exp

Base prototypes are re-encoded on every forward pass, so nothing accumulates
across steps.
"""
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from core.errors import ConfigurationError, InvalidArgumentError
from core.numerics import DTYPE, gaussian, row_softmax, seeded_generator

MODES = ("learnable-dual", "frozen", "transpose-tied", "linear", "mlp", "none")
SOFTMAX_MODES = ("learnable-dual", "frozen", "transpose-tied")
VARIANT_MODES = ("linear", "mlp", "none")

RANDOM_STD = 0.02
_DPM_STREAM = 201


def _owned(W: torch.Tensor) -> torch.Tensor:
    """Row-major float64 copy; a transposed view would otherwise keep its strides."""
    return W.detach().to(DTYPE).clone(memory_format=torch.contiguous_format)


class DpmState(nn.Module):

    def __init__(self, W_ae: torch.Tensor, W_ea: Optional[torch.Tensor], mode: str = "learnable-dual",
        alpha0: float = 0.1, beta0: float = 0.1, tau_m: float = 0.01, coeffs_trainable: bool = True,
        generator: Optional[torch.Generator] = None):
        super().__init__()
        if mode not in MODES:
            raise InvalidArgumentError(f"Unknown DPM mode '{mode}'")
        if not tau_m > 0:
            raise InvalidArgumentError(f"Mapping temperature must be positive, got {tau_m}")
        self.mode = mode
        self.tau_m = float(tau_m)
        self.K, self.M = int(W_ae.shape[0]), int(W_ae.shape[1])

        if mode == "learnable-dual":
            self.W_ae = nn.Parameter(_owned(W_ae))
            self.W_ea = nn.Parameter(_owned(W_ea))
        elif mode == "frozen":
            self.register_buffer("W_ae", _owned(W_ae))
            self.register_buffer("W_ea", _owned(W_ea))
        elif mode == "transpose-tied":
            self.W_ae = nn.Parameter(_owned(W_ae))
        elif mode == "linear":
            self.A_ae = nn.Parameter(torch.eye(self.K, self.M, dtype=DTYPE))
            self.A_ea = nn.Parameter(torch.eye(self.M, self.K, dtype=DTYPE))
        elif mode == "mlp":
            gen = generator if generator is not None else seeded_generator(0, _DPM_STREAM)
            hidden = max(self.K, self.M)
            self.ae_in = nn.Parameter(gaussian((hidden, self.M), RANDOM_STD, gen))
            self.ae_out = nn.Parameter(gaussian((self.K, hidden), RANDOM_STD, gen))
            self.ea_in = nn.Parameter(gaussian((hidden, self.K), RANDOM_STD, gen))
            self.ea_out = nn.Parameter(gaussian((self.M, hidden), RANDOM_STD, gen))

        self.alpha = nn.Parameter(torch.tensor(float(alpha0), dtype=DTYPE), requires_grad=coeffs_trainable)
        self.beta = nn.Parameter(torch.tensor(float(beta0), dtype=DTYPE), requires_grad=coeffs_trainable)

    def ea_matrix(self) -> Optional[torch.Tensor]:
        """W_ea; in transpose-tied mode it is rebuilt from W_ae on every call."""
        if self.mode == "transpose-tied":
            return self.W_ae.t()
        if self.mode in SOFTMAX_MODES:
            return self.W_ea
        return None

    @property
    def has_matrices(self) -> bool:
        return self.mode in SOFTMAX_MODES

    def mixing_weights(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Row-stochastic (au->exp, exp->au) weights the model actually applies."""
        if not self.has_matrices:
            raise InvalidArgumentError(f"DPM mode '{self.mode}' has no mapping matrices")
        return row_softmax(self.W_ae, self.tau_m), row_softmax(self.ea_matrix(), self.tau_m)

    def raw_matrices(self) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.has_matrices:
            raise InvalidArgumentError(f"DPM mode '{self.mode}' has no mapping matrices")
        return self.W_ae, self.ea_matrix()

    def forward(self, T_exp: torch.Tensor, T_au: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mapped_exp, mapped_au = map_prototypes(self, T_exp, T_au)
        return enhance(T_exp, mapped_exp, self.alpha), enhance(T_au, mapped_au, self.beta)


def init_prior(W0: torch.Tensor, K: Optional[int] = None, M: Optional[int] = None, **kwargs) -> DpmState:
    """W_ae = W0 and W_ea = W0 transposed, both starting from the FACS prior."""
    if K is not None and M is not None and tuple(W0.shape) != (K, M):
        raise ConfigurationError(f"Prior of shape {tuple(W0.shape)} does not match configured ({K}, {M})")
    return DpmState(W0, W0.t(), **kwargs)


def init_random(seed: int, K: int, M: int, **kwargs) -> DpmState:
    gen = seeded_generator(seed, _DPM_STREAM)
    W_ae = gaussian((K, M), RANDOM_STD, gen)
    W_ea = gaussian((M, K), RANDOM_STD, gen)
    return DpmState(W_ae, W_ea, generator=gen, **kwargs)


def build_dpm(W0: torch.Tensor, mode: str, init: str, seed: int, **kwargs) -> DpmState:
    K, M = int(W0.shape[0]), int(W0.shape[1])
    if mode in VARIANT_MODES:
        # linear / mlp / none ignore the prior; mlp draws its weights from the seed
        return DpmState(W0, W0.t(), mode=mode, generator=seeded_generator(seed, _DPM_STREAM), **kwargs)
    if init == "random":
        return init_random(seed, K, M, mode=mode, **kwargs)
    return init_prior(W0, K, M, mode=mode, **kwargs)


def variant_transform(state: DpmState, T_src: torch.Tensor, direction: str) -> torch.Tensor:
    """Replacement mappings: ``direction`` is "ae" (AU rows to K rows) or "ea"."""
    if state.mode == "none":
        rows = state.K if direction == "ae" else state.M
        return torch.zeros(rows, T_src.shape[1], dtype=T_src.dtype)
    if state.mode == "linear":
        A = state.A_ae if direction == "ae" else state.A_ea
        return A @ T_src
    if state.mode == "mlp":
        w_in, w_out = (state.ae_in, state.ae_out) if direction == "ae" else (state.ea_in, state.ea_out)
        return w_out @ F.gelu(w_in @ T_src)
    raise InvalidArgumentError(f"DPM mode '{state.mode}' is not a replacement variant")


def map_prototypes(state: DpmState, T_exp: torch.Tensor, T_au: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if T_exp.shape[0] != state.K or T_au.shape[0] != state.M:
        raise ConfigurationError(
            f"Prototype counts ({T_exp.shape[0]}, {T_au.shape[0]}) do not match mapping ({state.K}, {state.M})")
    if not state.has_matrices:
        return variant_transform(state, T_au, "ae"), variant_transform(state, T_exp, "ea")
    A_ae, A_ea = state.mixing_weights()
    return A_ae @ T_au, A_ea @ T_exp


def enhance(T: torch.Tensor, T_mapped: torch.Tensor, coeff: torch.Tensor) -> torch.Tensor:
    if T.shape != T_mapped.shape:
        raise InvalidArgumentError(f"Cannot enhance {tuple(T.shape)} with {tuple(T_mapped.shape)}")
    return T + coeff * T_mapped
