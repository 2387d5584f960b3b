from dataclasses import dataclass, field
from typing import List, Optional

from marshmallow import RAISE, Schema, ValidationError, fields, post_load, validate, validates_schema

from ontology.world import SyntheticWorldSpec, SyntheticWorldSpecSchema

DPM_MODES = ("learnable-dual", "frozen", "transpose-tied", "linear", "mlp", "none")
DPM_INITS = ("prior", "random")
TSP_STYLES = ("compound", "standalone", "words")
HEAD_KINDS = ("prototype", "linear")
RATE_PRESETS = ("desk", "reference", "custom")
ENCODER_KINDS = ("seeded-surrogate", "file-backed")
ACTIVATIONS = ("gelu", "identity")

DEFAULT_EXPRESSIONS = ["Happiness", "Sadness", "Neutral", "Anger", "Surprise", "Disgust", "Fear"]
DEFAULT_AUS = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24]

_positive = validate.Range(min=0.0, min_inclusive=False)
_non_negative = validate.Range(min=0.0)
_fraction = validate.Range(min=0.0, max=1.0, min_inclusive=False)


################################################################
# MoE concept class
################################################################
@dataclass
class MoeConfig:
    num_experts: int = 4
    top_k: int = 2
    d_hidden: int = 32
    expert_activation: str = "gelu"


class MoeConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    num_experts = fields.Integer(load_default=4, validate=validate.Range(min=1))
    top_k = fields.Integer(load_default=2, validate=validate.Range(min=1))
    d_hidden = fields.Integer(load_default=32, validate=validate.Range(min=1))
    expert_activation = fields.String(load_default="gelu", validate=validate.OneOf(ACTIVATIONS))

    @validates_schema
    def check_top_k(self, data, **kwargs):
        if data.get("top_k", 2) > data.get("num_experts", 4):
            raise ValidationError("top_k cannot exceed num_experts", field_name="top_k")

    @post_load
    def create(self, data, **kwargs):
        return MoeConfig(**data)


################################################################
# Temporal model concept class
################################################################
@dataclass
class TemporalConfig:
    heads: int = 1
    ffn_hidden: int = 128
    positional: bool = True


class TemporalConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    heads = fields.Integer(load_default=1, validate=validate.Range(min=1))
    ffn_hidden = fields.Integer(load_default=128, validate=validate.Range(min=1))
    positional = fields.Boolean(load_default=True)

    @post_load
    def create(self, data, **kwargs):
        return TemporalConfig(**data)


################################################################
# Text encoder concept class
################################################################
@dataclass
class TextEncoderConfig:
    kind: str = "seeded-surrogate"
    d_tok: int = 64
    vocab_size: int = 8192
    max_tokens: int = 77
    embeddings_path: Optional[str] = None


class TextEncoderConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    kind = fields.String(load_default="seeded-surrogate", validate=validate.OneOf(ENCODER_KINDS))
    d_tok = fields.Integer(load_default=64, validate=validate.Range(min=1))
    vocab_size = fields.Integer(load_default=8192, validate=validate.Range(min=2))
    max_tokens = fields.Integer(load_default=77, validate=validate.Range(min=1))
    embeddings_path = fields.String(load_default=None, allow_none=True)

    @validates_schema
    def check_file_backed(self, data, **kwargs):
        if data.get("kind") == "file-backed" and not data.get("embeddings_path"):
            raise ValidationError("file-backed text encoder needs embeddings_path", field_name="embeddings_path")

    @post_load
    def create(self, data, **kwargs):
        return TextEncoderConfig(**data)


################################################################
# Experiment concept class
################################################################
@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    expr_set: List[str] = field(default_factory=lambda: list(DEFAULT_EXPRESSIONS))
    au_set: List[int] = field(default_factory=lambda: list(DEFAULT_AUS))
    lam: float = 2.0
    tau: float = 0.01
    tau_m: float = 0.01
    context_length: int = 8
    alpha0: float = 0.1
    beta0: float = 0.1
    coeffs_trainable: bool = True
    head: str = "prototype"
    joint: bool = True
    dpm_mode: str = "learnable-dual"
    dpm_init: str = "prior"
    tsp_style: str = "compound"
    rates: str = "desk"
    lr_encoder: Optional[float] = None
    lr_heads: Optional[float] = None
    weight_decay: float = 1e-4
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    epochs: int = 30
    decay_every: int = 10
    decay_factor: float = 0.1
    batch_dfer: int = 12
    batch_au: int = 128
    frames: int = 16
    d_raw: int = 32
    d: int = 64
    data_fraction_fe: float = 1.0
    data_fraction_au: float = 1.0
    steps_per_epoch: Optional[int] = None
    eval_batch: int = 256
    num_threads: int = 1
    workers: int = 1
    facs_table_path: Optional[str] = None
    moe: MoeConfig = field(default_factory=MoeConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    world: SyntheticWorldSpec = field(default_factory=SyntheticWorldSpec)

    @property
    def K(self) -> int:
        return len(self.expr_set)

    @property
    def M(self) -> int:
        return len(self.au_set)


class ExperimentConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    seed = fields.Integer(load_default=0, validate=validate.Range(min=0))
    seeds = fields.List(fields.Integer(validate=validate.Range(min=0)), load_default=lambda: [0, 1, 2, 3, 4],
        validate=validate.Length(min=1))
    expr_set = fields.List(fields.String(), load_default=lambda: list(DEFAULT_EXPRESSIONS),
        validate=validate.Length(min=2))
    au_set = fields.List(fields.Integer(), load_default=lambda: list(DEFAULT_AUS), validate=validate.Length(min=1))
    lam = fields.Float(data_key="lambda", load_default=2.0, validate=_non_negative)
    tau = fields.Float(load_default=0.01, validate=_positive)
    tau_m = fields.Float(load_default=0.01, validate=_positive)
    context_length = fields.Integer(load_default=8, validate=validate.Range(min=0))
    alpha0 = fields.Float(load_default=0.1)
    beta0 = fields.Float(load_default=0.1)
    coeffs_trainable = fields.Boolean(load_default=True)
    head = fields.String(load_default="prototype", validate=validate.OneOf(HEAD_KINDS))
    joint = fields.Boolean(load_default=True)
    dpm_mode = fields.String(load_default="learnable-dual", validate=validate.OneOf(DPM_MODES))
    dpm_init = fields.String(load_default="prior", validate=validate.OneOf(DPM_INITS))
    tsp_style = fields.String(load_default="compound", validate=validate.OneOf(TSP_STYLES))
    rates = fields.String(load_default="desk", validate=validate.OneOf(RATE_PRESETS))
    lr_encoder = fields.Float(load_default=None, allow_none=True, validate=_non_negative)
    lr_heads = fields.Float(load_default=None, allow_none=True, validate=_non_negative)
    weight_decay = fields.Float(load_default=1e-4, validate=_non_negative)
    betas = fields.List(fields.Float(validate=validate.Range(min=0.0, max=1.0, max_inclusive=False)),
        load_default=lambda: [0.9, 0.999], validate=validate.Length(equal=2))
    eps = fields.Float(load_default=1e-8, validate=_positive)
    epochs = fields.Integer(load_default=30, validate=validate.Range(min=0))
    decay_every = fields.Integer(load_default=10, validate=validate.Range(min=1))
    decay_factor = fields.Float(load_default=0.1, validate=_positive)
    batch_dfer = fields.Integer(load_default=12, validate=validate.Range(min=1))
    batch_au = fields.Integer(load_default=128, validate=validate.Range(min=1))
    frames = fields.Integer(load_default=16, validate=validate.Range(min=1))
    d_raw = fields.Integer(load_default=32, validate=validate.Range(min=1))
    d = fields.Integer(load_default=64, validate=validate.Range(min=2))
    data_fraction_fe = fields.Float(load_default=1.0, validate=_fraction)
    data_fraction_au = fields.Float(load_default=1.0, validate=_fraction)
    steps_per_epoch = fields.Integer(load_default=None, allow_none=True, validate=validate.Range(min=1))
    eval_batch = fields.Integer(load_default=256, validate=validate.Range(min=1))
    num_threads = fields.Integer(load_default=1, validate=validate.Range(min=1))
    workers = fields.Integer(load_default=1, validate=validate.Range(min=1))
    facs_table_path = fields.String(load_default=None, allow_none=True)
    moe = fields.Nested(MoeConfigSchema, load_default=MoeConfig)
    temporal = fields.Nested(TemporalConfigSchema, load_default=TemporalConfig)
    text_encoder = fields.Nested(TextEncoderConfigSchema, load_default=TextEncoderConfig)
    world = fields.Nested(SyntheticWorldSpecSchema, load_default=SyntheticWorldSpec)

    @validates_schema
    def check_rates(self, data, **kwargs):
        if data.get("rates") == "custom":
            for key in ("lr_encoder", "lr_heads"):
                if data.get(key) is None:
                    raise ValidationError("custom rates need an explicit value", field_name=key)
        if len(set(data.get("expr_set", []))) != len(data.get("expr_set", [])):
            raise ValidationError("duplicate expression names", field_name="expr_set")
        if len(set(data.get("au_set", []))) != len(data.get("au_set", [])):
            raise ValidationError("duplicate AU ids", field_name="au_set")

    @post_load
    def create(self, data, **kwargs):
        return ExperimentConfig(**data)
