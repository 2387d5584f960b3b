"""Visual trunk: shared frame encoder with a MoE block and one temporal
attention block per task."""
import copy
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from core.errors import ConfigurationError, InvalidArgumentError
from core.numerics import DTYPE, gaussian, layer_norm, row_softmax, seeded_generator, xavier

EXPRESSION = "expression"
AU = "au"

_ENCODER_STREAM = 301
_MOE_STREAM = 302
_TEMPORAL_STREAMS = {EXPRESSION: 303, AU: 304}


@dataclass
class ClipBatch:
    frames: torch.Tensor
    task: str
    labels: torch.Tensor
    domain_id: int = 0

    def __post_init__(self):
        if self.frames.dim() != 3:
            raise InvalidArgumentError(f"Expected B x n x d_raw frames, got shape {tuple(self.frames.shape)}")
        if self.task == EXPRESSION and self.labels.dim() != 1:
            raise InvalidArgumentError("Expression labels are class indices, one per clip")
        if self.task == AU and self.labels.dim() != 2:
            raise InvalidArgumentError("AU labels are B x M binary activations")

    def __len__(self) -> int:
        return int(self.frames.shape[0])


class Expert(nn.Module):
    """Two affine maps with an optional GELU between them."""

    def __init__(self, d: int, d_hidden: int, generator: torch.Generator, activation: str = "gelu"):
        super().__init__()
        self.activation = activation
        self.w1 = nn.Parameter(xavier(d_hidden, d, generator))
        self.b1 = nn.Parameter(torch.zeros(d_hidden, dtype=DTYPE))
        self.w2 = nn.Parameter(xavier(d, d_hidden, generator))
        self.b2 = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.linear(x, self.w1, self.b1)
        if self.activation == "gelu":
            h = F.gelu(h)
        return F.linear(h, self.w2, self.b2)


def top_k_gates(logits: torch.Tensor, k: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Softmax over experts, keep the k largest and renormalize them to sum 1."""
    gates = row_softmax(logits)
    values, indices = torch.topk(gates, k, dim=-1)
    return indices, values / values.sum(dim=-1, keepdim=True)


class MoeLayer(nn.Module):
    """Frozen shared expert plus gated private experts.

    The shared expert is a copy of ``feed_forward`` when one is given, i.e. the
    transform the layer replaces; otherwise it is drawn fresh.
    """

    def __init__(self, d: int, num_experts: int = 4, top_k: int = 2, d_hidden: int = 32,
        activation: str = "gelu", generator: Optional[torch.Generator] = None,
        feed_forward: Optional[Expert] = None):
        super().__init__()
        if not 1 <= top_k <= num_experts:
            raise ConfigurationError(f"top_k must lie in [1, {num_experts}], got {top_k}")
        gen = generator if generator is not None else seeded_generator(0, _MOE_STREAM)
        self.top_k = top_k
        self.router = nn.Parameter(xavier(num_experts, d, gen))
        if feed_forward is not None:
            self.shared_expert = copy.deepcopy(feed_forward)
        else:
            self.shared_expert = Expert(d, d_hidden, gen, activation)
        self.shared_expert.requires_grad_(False)
        self.experts = nn.ModuleList([Expert(d, d_hidden, gen, activation) for _ in range(num_experts)])
        self.gamma = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.reset_load()

    def reset_load(self) -> None:
        self.expert_load = [0] * len(self.experts)
        self.tokens_seen = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        tokens = x.reshape(-1, shape[-1])
        x_norm = layer_norm(tokens)
        indices, weights = top_k_gates(F.linear(x_norm, self.router), self.top_k)

        mixed = torch.zeros_like(x_norm)
        for j, expert in enumerate(self.experts):
            rows, slot = (indices == j).nonzero(as_tuple=True)
            if rows.numel() == 0:
                continue
            out = expert(x_norm[rows]) * weights[rows, slot].unsqueeze(-1)
            mixed = mixed.index_add(0, rows, out)
            self.expert_load[j] += int(rows.numel())
        self.tokens_seen += int(tokens.shape[0])

        y = self.shared_expert(x_norm) + self.gamma * mixed
        return y.reshape(shape)


class FrameEncoder(nn.Module):
    """Frozen seeded projection d_raw -> d followed by a residual MoE block.

    ``block_ffn`` is the block's original feed-forward (frozen, seeded); the MoE
    layer that replaces it starts from a copy of it as its shared expert.
    """

    def __init__(self, d_raw: int, d: int, moe_config, seed: int):
        super().__init__()
        self.d_raw = d_raw
        self.d = d
        gen = seeded_generator(seed, _ENCODER_STREAM)
        self.register_buffer("proj_weight", xavier(d, d_raw, gen))
        self.register_buffer("proj_bias", gaussian((d,), 0.1, gen))
        self.block_ffn = Expert(d, moe_config.d_hidden, gen, moe_config.expert_activation)
        self.block_ffn.requires_grad_(False)
        self.moe = MoeLayer(d, moe_config.num_experts, moe_config.top_k, moe_config.d_hidden,
            moe_config.expert_activation, seeded_generator(seed, _MOE_STREAM), feed_forward=self.block_ffn)

    def project(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != self.d_raw:
            raise ConfigurationError(f"Frames have {frames.shape[-1]} features, encoder expects {self.d_raw}")
        return F.linear(frames.to(DTYPE), self.proj_weight, self.proj_bias)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        h = self.project(frames)
        return h + self.moe(h)

    def forward_without_moe(self, frames: torch.Tensor) -> torch.Tensor:
        h = self.project(frames)
        tokens = h.reshape(-1, h.shape[-1])
        return h + self.block_ffn(layer_norm(tokens)).reshape(h.shape)


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    position = torch.arange(n, dtype=DTYPE).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=DTYPE) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)[:, : d // 2]
    return pe


class TemporalBlock(nn.Module):
    """Single pre-norm Transformer layer over the frame axis."""

    def __init__(self, d: int, heads: int = 1, ffn_hidden: int = 128, positional: bool = True,
        generator: Optional[torch.Generator] = None):
        super().__init__()
        if d % heads:
            raise ConfigurationError(f"Width {d} is not divisible by {heads} heads")
        gen = generator if generator is not None else seeded_generator(0, _TEMPORAL_STREAMS[EXPRESSION])
        self.heads = heads
        self.positional = positional
        self.wq = nn.Parameter(xavier(d, d, gen))
        self.wk = nn.Parameter(xavier(d, d, gen))
        self.wv = nn.Parameter(xavier(d, d, gen))
        self.wo = nn.Parameter(xavier(d, d, gen))
        self.ffn = Expert(d, ffn_hidden, gen)

    def attention(self, h: torch.Tensor) -> torch.Tensor:
        B, n, d = h.shape
        dh = d // self.heads

        def split(t):
            return t.reshape(B, n, self.heads, dh).transpose(1, 2)

        q, k, v = split(F.linear(h, self.wq)), split(F.linear(h, self.wk)), split(F.linear(h, self.wv))
        weights = row_softmax(q @ k.transpose(-2, -1), math.sqrt(dh))
        ctx = (weights @ v).transpose(1, 2).reshape(B, n, d)
        return F.linear(ctx, self.wo)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] < 1:
            raise InvalidArgumentError("Temporal block needs at least one frame")
        if self.positional:
            x = x + sinusoidal_positions(x.shape[1], x.shape[2])
        x = x + self.attention(layer_norm(x))
        return x + self.ffn(layer_norm(x))


def center_index(n: int) -> int:
    return n // 2


class Backbone(nn.Module):

    def __init__(self, config, seed: int):
        super().__init__()
        self.encoder = FrameEncoder(config.d_raw, config.d, config.moe, seed)
        t = config.temporal
        self.exp_block = TemporalBlock(config.d, t.heads, t.ffn_hidden, t.positional,
            seeded_generator(seed, _TEMPORAL_STREAMS[EXPRESSION]))
        self.au_block = TemporalBlock(config.d, t.heads, t.ffn_hidden, t.positional,
            seeded_generator(seed, _TEMPORAL_STREAMS[AU]))

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        return self.encoder(frames)

    def temporal_expression(self, features: torch.Tensor) -> torch.Tensor:
        """Clip vector: mean of the attended frame vectors."""
        return self.exp_block(features).mean(dim=1)

    def temporal_au(self, features: torch.Tensor) -> torch.Tensor:
        """Attended vector of the center frame, index n // 2."""
        return self.au_block(features)[:, center_index(features.shape[1])]

    def expression_features(self, frames: torch.Tensor) -> torch.Tensor:
        return self.temporal_expression(self.encode_frames(frames))

    def au_features(self, frames: torch.Tensor) -> torch.Tensor:
        return self.temporal_au(self.encode_frames(frames))

