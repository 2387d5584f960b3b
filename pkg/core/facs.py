import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, List, NamedTuple, Optional, Sequence, Union

import torch

from core.errors import FacsLookupError, SpecError
from core.numerics import DTYPE

BUILTIN_TABLE_PATH = Path(__file__).parent / "data" / "facs_table.tsv"
TABLE_HEADER = "# FACS semantic table: kind, label, AU combination, compound, standalone, words (tab-separated)"

BASIC_EXPRESSIONS = ["Happiness", "Sadness", "Neutral", "Anger", "Surprise", "Disgust", "Fear"]
EXTENDED_EXPRESSIONS = BASIC_EXPRESSIONS + ["Contempt", "Anxiety", "Helplessness", "Disappointment"]

BP4D_AUS = [1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24]
DISFA_AUS = [1, 2, 4, 6, 9, 12, 25, 26]


@dataclass(frozen=True)
class ActionUnitDef:
    au_id: int
    description: str


@dataclass(frozen=True)
class ExpressionDef:
    name: str
    au_combination: FrozenSet[int]
    compound_description: str
    standalone_description: str
    word_description: str


class FacsTable(NamedTuple):
    aus: List[ActionUnitDef]
    expressions: List[ExpressionDef]

    def au(self, au_id: int) -> ActionUnitDef:
        for au in self.aus:
            if au.au_id == au_id:
                return au
        raise FacsLookupError(f"AU{au_id}")

    def expression(self, name: str) -> ExpressionDef:
        for expr in self.expressions:
            if expr.name.lower() == str(name).lower():
                return expr
        raise FacsLookupError(name)


@dataclass(frozen=True)
class PriorMatrix:
    P: torch.Tensor
    expr_order: List[str]
    au_order: List[int]


# ----------------------------------------------------------------------
# Table parsing
# ----------------------------------------------------------------------
def _parse_combination(field: str) -> FrozenSet[int]:
    if field in ("None", "-", ""):
        return frozenset()
    return frozenset(int(part.strip().upper().replace("AU", "")) for part in field.split("+"))


def _format_combination(combination: FrozenSet[int]) -> str:
    if not combination:
        return "None"
    return "+".join(str(au) for au in sorted(combination))


def _validate_table(table: FacsTable, source: str) -> FacsTable:
    seen = set()
    for au in table.aus:
        if au.au_id in seen:
            raise SpecError(f"{source}: duplicate AU{au.au_id}")
        if not au.description:
            raise SpecError(f"{source}: AU{au.au_id} has an empty description")
        seen.add(au.au_id)

    descriptions = {au.au_id: au.description for au in table.aus}
    for expr in table.expressions:
        missing = sorted(expr.au_combination - seen)
        if missing:
            raise SpecError(f"{source}: {expr.name} references unknown AUs {missing}")
        if not expr.au_combination:
            continue
        # Each phrase names one AU of the combination, in ascending order; a leading
        # qualifier such as "slight" is allowed.
        phrases = [p.strip() for p in expr.compound_description.split(",")]
        expected = [descriptions[au] for au in sorted(expr.au_combination)]
        if len(phrases) != len(expected) or not all(p.endswith(e) for p, e in zip(phrases, expected)):
            raise SpecError(f"{source}: compound description of {expr.name} does not follow its AU combination")
    return table


def load_facs_table(path: Union[str, Path]) -> FacsTable:
    """Read a tab-separated FACS table (see ``core/data/facs_table.tsv``)."""
    aus: List[ActionUnitDef] = []
    expressions: List[ExpressionDef] = []
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise SpecError(f"{path}:{lineno}: expected 6 tab-separated fields, found {len(fields)}")
            kind, label, combination, compound, standalone, words = fields
            if kind == "au":
                aus.append(ActionUnitDef(au_id=int(label), description=compound))
            elif kind == "expression":
                expressions.append(ExpressionDef(
                    name=label,
                    au_combination=_parse_combination(combination),
                    compound_description=compound,
                    standalone_description=standalone,
                    word_description=words,
                ))
            else:
                raise SpecError(f"{path}:{lineno}: unknown record kind '{kind}'")
    logging.info(f"Loaded FACS table from {path}: {len(aus)} AUs, {len(expressions)} expressions")
    return _validate_table(FacsTable(aus, expressions), str(path))


def render_facs_table(table: FacsTable) -> str:
    lines = [TABLE_HEADER]
    for au in table.aus:
        lines.append("\t".join(["au", str(au.au_id), "-", au.description, "-", "-"]))
    for expr in table.expressions:
        lines.append("\t".join([
            "expression", expr.name, _format_combination(expr.au_combination),
            expr.compound_description, expr.standalone_description, expr.word_description,
        ]))
    return "\n".join(lines) + "\n"


_BUILTIN: Optional[FacsTable] = None


def builtin_facs_table() -> FacsTable:
    """The 17 AUs and 11 expressions shipped with the package."""
    global _BUILTIN
    if _BUILTIN is None:
        _BUILTIN = load_facs_table(BUILTIN_TABLE_PATH)
    return _BUILTIN


def resolve_facs_table(path: Optional[str]) -> FacsTable:
    return load_facs_table(path) if path else builtin_facs_table()


# ----------------------------------------------------------------------
# Prior matrix
# ----------------------------------------------------------------------
def build_prior_matrix(table: FacsTable, expr_list: Sequence[str], au_list: Sequence[int]) -> PriorMatrix:
    """Binary K x M matrix: 1 where the AU belongs to the expression's combination.

    Combinations are intersected with ``au_list``, so AUs a dataset does not
    annotate simply drop out of the row.
    """
    for au_id in au_list:
        table.au(au_id)
    combos: Dict[str, FrozenSet[int]] = {name: table.expression(name).au_combination for name in expr_list}

    P = torch.zeros(len(expr_list), len(au_list), dtype=DTYPE)
    for k, name in enumerate(expr_list):
        for m, au_id in enumerate(au_list):
            if au_id in combos[name]:
                P[k, m] = 1.0
    return PriorMatrix(P=P, expr_order=list(expr_list), au_order=[int(a) for a in au_list])


def normalize_rows(prior: PriorMatrix) -> torch.Tensor:
    """Row-normalized prior W0; all-zero rows (e.g. Neutral) stay zero."""
    sums = prior.P.sum(dim=1, keepdim=True)
    safe = torch.where(sums > 0, sums, torch.ones_like(sums))
    return prior.P / safe
