"""Assembly of the trunk with either baseline linear heads or prototype heads."""
from typing import List, Optional, Tuple

import torch
from torch import nn

from core.backbone import AU, EXPRESSION, Backbone
from core.dpm import DpmState, build_dpm
from core.facs import FacsTable, build_prior_matrix, normalize_rows, resolve_facs_table
from core.numerics import DTYPE, Parameter, collect_parameters, seeded_generator, xavier
from core.objective import baseline_heads, similarity_scores
from core.tsp import PrototypeSet, build_text_prototypes
from ontology.config import ExperimentConfig

ENCODER_PREFIXES = ("backbone.encoder.",)
_HEAD_STREAMS = {EXPRESSION: 501, AU: 502}


class LinearHead(nn.Module):

    def __init__(self, d: int, classes: int, generator: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(xavier(classes, d, generator))
        self.bias = nn.Parameter(torch.zeros(classes, dtype=DTYPE))

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return baseline_heads(Z, self.weight, self.bias)


class SsmModel(nn.Module):
    """Shared trunk plus task heads.

    ``head="linear"`` is the baseline. ``head="prototype"`` scores clips
    against text prototypes, enhanced by the mapping module unless its mode
    is ``none``.
    """

    def __init__(self, config: ExperimentConfig, seed: int, table: Optional[FacsTable] = None):
        super().__init__()
        self.config = config
        self.head = config.head
        self.tau = config.tau
        table = table or resolve_facs_table(config.facs_table_path)
        self.backbone = Backbone(config, seed)
        if self.head == "linear":
            self.exp_head = LinearHead(config.d, config.K, seeded_generator(seed, _HEAD_STREAMS[EXPRESSION]))
            self.au_head = LinearHead(config.d, config.M, seeded_generator(seed, _HEAD_STREAMS[AU]))
        else:
            self.text = build_text_prototypes(table, config.expr_set, config.au_set, config.tsp_style,
                config.context_length, config.d, seed, config.text_encoder)
            W0 = normalize_rows(build_prior_matrix(table, config.expr_set, config.au_set))
            self.dpm = build_dpm(W0, config.dpm_mode, config.dpm_init, seed, alpha0=config.alpha0,
                beta0=config.beta0, tau_m=config.tau_m, coeffs_trainable=config.coeffs_trainable)

    @property
    def mapping(self) -> Optional[DpmState]:
        return getattr(self, "dpm", None) if self.head == "prototype" else None

    def prototypes(self) -> PrototypeSet:
        base = self.text()
        if self.dpm.mode == "none":
            return base
        T_exp, T_au = self.dpm(base.T_exp, base.T_au)
        return PrototypeSet(T_exp=T_exp, T_au=T_au, style=base.style)

    def expression_scores(self, frames: torch.Tensor, prototypes: Optional[PrototypeSet] = None) -> torch.Tensor:
        Z = self.backbone.expression_features(frames)
        if self.head == "linear":
            return self.exp_head(Z)
        prototypes = prototypes or self.prototypes()
        return similarity_scores(Z, prototypes.T_exp, self.tau)

    def au_scores(self, frames: torch.Tensor, prototypes: Optional[PrototypeSet] = None) -> torch.Tensor:
        Z = self.backbone.au_features(frames)
        if self.head == "linear":
            return self.au_head(Z)
        prototypes = prototypes or self.prototypes()
        return similarity_scores(Z, prototypes.T_au, self.tau)

    def forward(self, fe_frames: Optional[torch.Tensor], au_frames: Optional[torch.Tensor]
        ) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """Scores for one expression batch and one AU batch, sharing one prototype encoding."""
        prototypes = self.prototypes() if self.head == "prototype" else None
        s_exp = self.expression_scores(fe_frames, prototypes) if fe_frames is not None else None
        s_au = self.au_scores(au_frames, prototypes) if au_frames is not None else None
        return s_exp, s_au

    def trainable_parameters(self) -> List[Parameter]:
        return collect_parameters(self, ENCODER_PREFIXES)
