"""Float64 tensor substrate: explicit-adjoint primitives, a finite-difference
gradient oracle and the AdamW update used by the trainer.

Everything here works on ``torch.float64`` tensors. The three primitives the
model leans on (row softmax, L2 normalization, layer normalization) are
``torch.autograd.Function`` subclasses with hand-written backward formulas, so
the reverse pass is exactly the adjoint below and not whatever torch would
derive on its own.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.optim import Optimizer

from core.errors import (
    DegenerateVectorError,
    DeterminismError,
    InvalidArgumentError,
    NonFiniteError,
)

DTYPE = torch.float64

ENCODER_GROUP = "encoder-group"
HEAD_GROUP = "head-group"
GROUPS = (ENCODER_GROUP, HEAD_GROUP)

NORM_EPS = 1e-12
VARIANCE_FLOOR = 1e-6


def check_finite(name: str, tensor: torch.Tensor) -> torch.Tensor:
    finite = torch.isfinite(tensor)
    if not bool(finite.all()):
        bad = int((~finite).sum())
        raise NonFiniteError(name, f"{bad} of {tensor.numel()} entries")
    return tensor


# ----------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Parameter:
    name: str
    tensor: nn.Parameter
    group: str


def collect_parameters(module: nn.Module,
    encoder_prefixes: Sequence[str] = ("backbone.encoder.",)) -> List[Parameter]:
    """Trainable parameters of ``module`` tagged with their learning-rate group."""
    params = []
    for name, tensor in module.named_parameters():
        if not tensor.requires_grad:
            continue
        group = ENCODER_GROUP if name.startswith(tuple(encoder_prefixes)) else HEAD_GROUP
        params.append(Parameter(name=name, tensor=tensor, group=group))
    return params


# ----------------------------------------------------------------------
# Primitives
# ----------------------------------------------------------------------
class _RowSoftmax(torch.autograd.Function):

    @staticmethod
    def forward(ctx, m: torch.Tensor, tau: float) -> torch.Tensor:
        z = m / tau
        z = z - z.amax(dim=-1, keepdim=True)
        e = torch.exp(z)
        p = e / e.sum(dim=-1, keepdim=True)
        ctx.save_for_backward(p)
        ctx.tau = tau
        return p

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (p,) = ctx.saved_tensors
        inner = (grad_out * p).sum(dim=-1, keepdim=True)
        return p * (grad_out - inner) / ctx.tau, None


class _L2Normalize(torch.autograd.Function):

    @staticmethod
    def forward(ctx, v: torch.Tensor, eps: float) -> torch.Tensor:
        norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
        if bool((norm <= eps).any()):
            raise DegenerateVectorError(f"Cannot normalize a vector with norm <= {eps}")
        # Inputs that are already unit length pass through untouched, which keeps
        # normalize(normalize(v)) bitwise equal to normalize(v).
        slack = 4 * v.shape[-1] * torch.finfo(v.dtype).eps
        unit = (norm - 1).abs() <= slack
        u = torch.where(unit, v, v / norm)
        ctx.save_for_backward(u, norm)
        return u

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        u, norm = ctx.saved_tensors
        radial = (u * grad_out).sum(dim=-1, keepdim=True)
        return (grad_out - u * radial) / norm, None


class _LayerNorm(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x: torch.Tensor, floor: float) -> torch.Tensor:
        centered = x - x.mean(dim=-1, keepdim=True)
        var = (centered * centered).mean(dim=-1, keepdim=True)
        above = var >= floor
        sigma = torch.sqrt(torch.clamp(var, min=floor))
        y = centered / sigma
        ctx.save_for_backward(y, sigma, above)
        return y

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        y, sigma, above = ctx.saved_tensors
        g_mean = grad_out.mean(dim=-1, keepdim=True)
        gy_mean = (grad_out * y).mean(dim=-1, keepdim=True)
        full = (grad_out - g_mean - y * gy_mean) / sigma
        # below the floor sigma is a constant, so only the centering term remains
        floored = (grad_out - g_mean) / sigma
        return torch.where(above, full, floored), None


def row_softmax(m: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Temperature-scaled softmax over the last dimension (max-subtracted)."""
    if not tau > 0:
        raise InvalidArgumentError(f"Softmax temperature must be positive, got {tau}")
    check_finite("row_softmax.input", m)
    return _RowSoftmax.apply(m, float(tau))


def l2_normalize(v: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Scale each vector along the last dimension to unit Euclidean norm."""
    return _L2Normalize.apply(v, float(eps))


def layer_norm(x: torch.Tensor, floor: float = VARIANCE_FLOOR) -> torch.Tensor:
    """Standardize along the last dimension, no affine terms.

    The variance is floored at ``floor`` so constant inputs map to zeros
    instead of NaN.
    """
    if x.shape[-1] < 2:
        raise InvalidArgumentError("layer_norm needs at least two features")
    return _LayerNorm.apply(x, float(floor))


# ----------------------------------------------------------------------
# Finite-difference oracle
# ----------------------------------------------------------------------
@dataclass
class ParameterError:
    name: str
    max_relative_error: float
    entries_checked: int
    worst_index: Optional[int] = None


@dataclass
class GradCheckReport:
    entries: List[ParameterError] = field(default_factory=list)
    tolerance: float = 1e-4
    step: float = 1e-5

    @property
    def max_error(self) -> float:
        return max((e.max_relative_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[ParameterError]:
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: e.max_relative_error)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def as_dict(self) -> Dict[str, object]:
        worst = self.worst
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "step": self.step,
            "max_relative_error": self.max_error,
            "worst_parameter": worst.name if worst else None,
            "parameters": {
                e.name: {"max_relative_error": e.max_relative_error, "entries_checked": e.entries_checked}
                for e in self.entries
            },
        }


def _as_named_tensors(params) -> List[Tuple[str, torch.Tensor]]:
    named = []
    for item in params:
        if isinstance(item, Parameter):
            named.append((item.name, item.tensor))
        else:
            name, tensor = item
            named.append((name, tensor))
    return named


def grad_check(fn: Callable[[], torch.Tensor],
    params: Iterable,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of the scalar ``fn()`` with central differences.

    ``params`` holds :class:`Parameter` records or ``(name, tensor)`` pairs.
    With ``max_entries`` set, that many coordinates per parameter are sampled
    (seeded) instead of sweeping every entry.
    """
    if not 1e-6 <= h <= 1e-4:
        raise InvalidArgumentError(f"Finite-difference step must lie in [1e-6, 1e-4], got {h}")
    named = _as_named_tensors(params)
    tensors = [t for _, t in named]

    with torch.enable_grad():
        loss = fn()
    if loss.numel() != 1:
        raise InvalidArgumentError("grad_check needs a scalar function")
    with torch.no_grad():
        again = fn()
    if not torch.equal(loss.detach(), again.detach()):
        raise DeterminismError("Two forward passes with identical parameters disagree")

    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    generator = torch.Generator().manual_seed(seed)
    report = GradCheckReport(tolerance=tol, step=h)

    for (name, tensor), grad in zip(named, grads):
        if grad is None:
            grad = torch.zeros_like(tensor)
        count = tensor.numel()
        if max_entries is not None and count > max_entries:
            indices = torch.randperm(count, generator=generator)[:max_entries].sort().values.tolist()
        else:
            indices = list(range(count))

        shape = tuple(tensor.shape)
        flat_grad = grad.reshape(-1)
        worst, worst_index = 0.0, None
        with torch.no_grad():
            for i in indices:
                # row-major coordinates, so strided views are perturbed in place too
                at = tuple(int(c) for c in np.unravel_index(i, shape)) if shape else ()
                original = tensor.data[at].item()
                tensor.data[at] = original + h
                plus = fn().item()
                tensor.data[at] = original - h
                minus = fn().item()
                tensor.data[at] = original
                numeric = (plus - minus) / (2 * h)
                analytic = flat_grad[i].item()
                error = abs(analytic - numeric) / max(1.0, abs(numeric))
                if error > worst or worst_index is None:
                    worst, worst_index = error, i
        report.entries.append(ParameterError(name, worst, len(indices), worst_index))
        logging.debug(f"grad_check {name}: {len(indices)} entries, max rel error {worst:.3e}")

    return report


# ----------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------
def adamw_step(param: torch.Tensor,
    grad: torch.Tensor,
    exp_avg: torch.Tensor,
    exp_avg_sq: torch.Tensor,
    step: int,
    lr: float,
    weight_decay: float = 0.0,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8) -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``step`` counts from 1. Decay multiplies the weights directly and never
    passes through the moment estimates.
    """
    if not lr > 0:
        raise InvalidArgumentError(f"Learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    if weight_decay != 0.0:
        param.mul_(1 - lr * weight_decay)
    exp_avg.mul_(beta1).add_(grad, alpha=1 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    bias_c1 = 1 - beta1 ** step
    bias_c2 = 1 - beta2 ** step
    denom = (exp_avg_sq / bias_c2).sqrt_().add_(eps)
    param.addcdiv_(exp_avg / bias_c1, denom, value=-lr)


class AdamW(Optimizer):
    """AdamW over parameter groups, each group carrying its own ``lr``."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
        weight_decay: float = 0.0):
        if not (0.0 <= betas[0] < 1.0) or not (0.0 <= betas[1] < 1.0):
            raise InvalidArgumentError(f"Invalid betas: {betas}")
        if eps <= 0.0:
            raise InvalidArgumentError(f"Invalid eps: {eps}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    def add_param_group(self, param_group: dict) -> None:
        lr = param_group.get("lr", self.defaults["lr"])
        if not lr > 0:
            raise InvalidArgumentError(f"Learning rate must be positive, got {lr}")
        super().add_param_group(param_group)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if len(state) == 0:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                    state["exp_avg_sq"] = torch.zeros_like(p, memory_format=torch.preserve_format)
                state["step"] += 1
                adamw_step(p, p.grad, state["exp_avg"], state["exp_avg_sq"], state["step"],
                    lr=group["lr"], weight_decay=group["weight_decay"],
                    betas=group["betas"], eps=group["eps"])

        return loss


def frobenius_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(torch.linalg.matrix_norm(a - b))


def seeded_generator(seed: int, stream: int = 0) -> torch.Generator:
    """Independent generator per (seed, stream) so components never share draws."""
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(stream))


def gaussian(shape: Sequence[int], std: float, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE) * std


def xavier(rows: int, cols: int, generator: torch.Generator) -> torch.Tensor:
    return gaussian((rows, cols), math.sqrt(2.0 / (rows + cols)), generator)
