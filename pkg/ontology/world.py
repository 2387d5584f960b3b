from dataclasses import dataclass, field
from typing import List, Optional

from marshmallow import RAISE, Schema, fields, post_load, validate

DEFAULT_CROSS_AUS = [1, 2, 4, 6, 9, 12, 25, 26]


################################################################
# Synthetic world concept class
################################################################
@dataclass
class SyntheticWorldSpec:
    # label spaces default to the experiment's when left unset
    au_set: Optional[List[int]] = None
    expr_set: Optional[List[str]] = None
    cross_au_set: List[int] = field(default_factory=lambda: list(DEFAULT_CROSS_AUS))
    frames: Optional[int] = None
    d_raw: Optional[int] = None
    fe_samples: int = 480
    au_samples: int = 960
    cross_samples: int = 200
    test_ratio: float = 0.25
    prevalence: Optional[List[float]] = None
    background_prevalence: float = 0.08
    p_on: float = 0.85
    off_prior_mass: float = 0.1
    label_noise: float = 0.2
    feature_noise: float = 0.3
    domain_shift: float = 0.5
    # per-domain additive offset scale, kept apart from the map mixing
    domain_offset: float = 0.1
    envelope_width: float = 0.25


class SyntheticWorldSpecSchema(Schema):
    class Meta:
        unknown = RAISE

    au_set = fields.List(fields.Integer(), load_default=None, allow_none=True)
    expr_set = fields.List(fields.String(), load_default=None, allow_none=True)
    cross_au_set = fields.List(fields.Integer(), load_default=lambda: list(DEFAULT_CROSS_AUS))
    frames = fields.Integer(load_default=None, allow_none=True, validate=validate.Range(min=1))
    d_raw = fields.Integer(load_default=None, allow_none=True, validate=validate.Range(min=1))
    fe_samples = fields.Integer(load_default=480, validate=validate.Range(min=2))
    au_samples = fields.Integer(load_default=960, validate=validate.Range(min=2))
    cross_samples = fields.Integer(load_default=200, validate=validate.Range(min=0))
    test_ratio = fields.Float(load_default=0.25, validate=validate.Range(min=0.0, max=1.0,
        min_inclusive=False, max_inclusive=False))
    prevalence = fields.List(fields.Float(validate=validate.Range(min=0.0, max=1.0)), load_default=None,
        allow_none=True)
    background_prevalence = fields.Float(load_default=0.08, validate=validate.Range(min=0.0, max=1.0))
    p_on = fields.Float(load_default=0.85, validate=validate.Range(min=0.0, max=1.0))
    off_prior_mass = fields.Float(load_default=0.1, validate=validate.Range(min=0.0, max=1.0, max_inclusive=False))
    label_noise = fields.Float(load_default=0.2, validate=validate.Range(min=0.0))
    feature_noise = fields.Float(load_default=0.3, validate=validate.Range(min=0.0))
    domain_shift = fields.Float(load_default=0.5, validate=validate.Range(min=0.0, max=1.0))
    domain_offset = fields.Float(load_default=0.1, validate=validate.Range(min=0.0))
    envelope_width = fields.Float(load_default=0.25, validate=validate.Range(min=0.0, min_inclusive=False))

    @post_load
    def create(self, data, **kwargs):
        return SyntheticWorldSpec(**data)
