from dataclasses import dataclass, field
from typing import Dict, List, Optional

from marshmallow import Schema, fields, post_load


################################################################
# Metrics concept class
################################################################
@dataclass
class MetricsReport:
    task: str = "au"
    per_au_f1: List[float] = field(default_factory=list)
    au_ids: List[int] = field(default_factory=list)
    avg_f1: Optional[float] = None
    uar: Optional[float] = None
    war: Optional[float] = None
    confusion: List[List[int]] = field(default_factory=list)
    class_names: List[str] = field(default_factory=list)
    samples: int = 0


class MetricsReportSchema(Schema):
    task = fields.String(required=True)
    per_au_f1 = fields.List(fields.Float())
    au_ids = fields.List(fields.Integer())
    avg_f1 = fields.Float(allow_none=True)
    uar = fields.Float(allow_none=True)
    war = fields.Float(allow_none=True)
    confusion = fields.List(fields.List(fields.Integer()))
    class_names = fields.List(fields.String())
    samples = fields.Integer()

    @post_load
    def create(self, data, **kwargs):
        return MetricsReport(**data)


################################################################
# Ablation concept classes
################################################################
@dataclass
class AblationRow:
    grid: str
    setting: str
    task: str
    metric: str
    median: float
    per_seed: Dict[str, float] = field(default_factory=dict)


class AblationRowSchema(Schema):
    grid = fields.String(required=True)
    setting = fields.String(required=True)
    task = fields.String(required=True)
    metric = fields.String(required=True)
    median = fields.Float(required=True)
    per_seed = fields.Dict(keys=fields.String(), values=fields.Float())

    @post_load
    def create(self, data, **kwargs):
        return AblationRow(**data)


@dataclass
class OrderingCheck:
    name: str
    passed: bool
    lhs: str
    rhs: str
    lhs_value: float
    rhs_value: float


class OrderingCheckSchema(Schema):
    name = fields.String(required=True)
    passed = fields.Boolean(required=True)
    lhs = fields.String()
    rhs = fields.String()
    lhs_value = fields.Float()
    rhs_value = fields.Float()

    @post_load
    def create(self, data, **kwargs):
        return OrderingCheck(**data)
