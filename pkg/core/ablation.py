"""Ablation grids, median-over-seeds tables and the directional ordering checks."""
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from core.backbone import AU, EXPRESSION
from core.config import resolve_config
from core.trainer import train
from core.world import SyntheticWorld, generate_synthetic_world
from ontology.config import ExperimentConfig
from ontology.output import AblationRow, OrderingCheck

FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
COEFFICIENTS = (0.01, 0.05, 0.1, 0.5, 1.0)
CONTEXT_LENGTHS = (0, 4, 8, 12, 16)

STL = "STL"
BASELINE = "Baseline"
BASELINE_TSP = "Baseline+TSP"
SSM = "Baseline+TSP+DPM"


@dataclass
class GridPoint:
    setting: str
    overrides: Dict[str, object] = field(default_factory=dict)
    tasks: Tuple[str, ...] = (EXPRESSION, AU)


def _stl() -> Dict[str, object]:
    return {"joint": False, "head": "linear"}


def component_grid() -> List[GridPoint]:
    return [
        GridPoint(STL, _stl()),
        GridPoint(BASELINE, {"head": "linear"}),
        GridPoint(BASELINE_TSP, {"head": "prototype", "dpm_mode": "none"}),
        GridPoint(SSM, {"head": "prototype", "dpm_mode": "learnable-dual", "dpm_init": "prior"}),
    ]


def dpm_grid() -> List[GridPoint]:
    points = []
    for init in ("random", "prior"):
        for mode in ("learnable-dual", "transpose-tied", "frozen"):
            points.append(GridPoint(f"{init}/{mode}", {"dpm_init": init, "dpm_mode": mode}))
    points.append(GridPoint("linear", {"dpm_mode": "linear"}))
    points.append(GridPoint("mlp", {"dpm_mode": "mlp"}))
    return points


def style_grid() -> List[GridPoint]:
    return [GridPoint(style, {"tsp_style": style}) for style in ("words", "standalone", "compound")]


def context_grid() -> List[GridPoint]:
    return [GridPoint(f"c={c}", {"context_length": c}) for c in CONTEXT_LENGTHS]


def data_fraction_grid() -> List[GridPoint]:
    """FE->AU varies expression data and reads AU F1; AU->FE the reverse. 0% is single-task."""
    points = [GridPoint("fe->au 0%", _stl(), (AU,)), GridPoint("au->fe 0%", _stl(), (EXPRESSION,))]
    for fraction in FRACTIONS:
        pct = int(round(fraction * 100))
        points.append(GridPoint(f"fe->au {pct}%", {"data_fraction_fe": fraction}, (AU,)))
        points.append(GridPoint(f"au->fe {pct}%", {"data_fraction_au": fraction}, (EXPRESSION,)))
    return points


def alpha_beta_grid() -> List[GridPoint]:
    return [GridPoint(f"alpha=beta={c:g}", {"alpha0": c, "beta0": c}) for c in COEFFICIENTS]


def cross_grid() -> List[GridPoint]:
    return [
        GridPoint(STL, _stl(), ("cross_au", "cross_expression")),
        GridPoint(BASELINE, {"head": "linear"}, ("cross_au", "cross_expression")),
        GridPoint(SSM, {"head": "prototype", "dpm_mode": "learnable-dual"}, ("cross_au", "cross_expression")),
    ]


GRIDS: Dict[str, Callable[[], List[GridPoint]]] = {
    "component": component_grid,
    "dpm": dpm_grid,
    "style": style_grid,
    "context": context_grid,
    "data-fraction": data_fraction_grid,
    "alpha-beta": alpha_beta_grid,
    "cross": cross_grid,
}

_REPORT_METRICS = {AU: ("avg_f1",), EXPRESSION: ("uar", "war"), "cross_au": ("avg_f1",),
                   "cross_expression": ("uar", "war")}


def _run_point(config: ExperimentConfig, point: GridPoint, seed: int, world: SyntheticWorld,
    grid: str) -> Dict[Tuple[str, str], float]:
    run_config = resolve_config(replace(config, seed=seed, **point.overrides))
    state = train(run_config, world, seed, tag=f"{grid}:{point.setting}:{seed}")
    values = {}
    for task in point.tasks:
        report = state.metrics[task]
        for metric in _REPORT_METRICS[task]:
            values[(task, metric)] = float(getattr(report, metric))
    return values


def ablation_suite(config: ExperimentConfig, grid: str, seeds: Sequence[int],
    world_factory: Optional[Callable[[int], SyntheticWorld]] = None, workers: int = 1) -> List[AblationRow]:
    """Train every grid point for every seed and report median metrics.

    Each seed gets its own synthetic world unless ``world_factory`` says otherwise.
    """
    if grid not in GRIDS:
        raise KeyError(f"Unknown ablation grid '{grid}'")
    points = GRIDS[grid]()
    factory = world_factory or (lambda s: generate_synthetic_world(config.world, s))
    worlds = {seed: factory(seed) for seed in seeds}
    jobs = [(point, seed) for point in points for seed in seeds]
    logging.info(f"[ablate:{grid}] {len(points)} settings x {len(seeds)} seeds, {workers} worker(s)")

    def run(job):
        point, seed = job
        return _run_point(config, point, seed, worlds[seed], grid)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    rows = []
    for point in points:
        per_seed: Dict[Tuple[str, str], Dict[str, float]] = {}
        for (job_point, seed), values in zip(jobs, results):
            if job_point is not point:
                continue
            for key, value in values.items():
                per_seed.setdefault(key, {})[str(seed)] = value
        for (task, metric), by_seed in per_seed.items():
            rows.append(AblationRow(grid, point.setting, task, metric, statistics.median(by_seed.values()), by_seed))
    return rows


# ----------------------------------------------------------------------
# Orderings
# ----------------------------------------------------------------------
def _lookup(rows: Sequence[AblationRow]) -> Dict[Tuple[str, str, str], float]:
    return {(r.setting, r.task, r.metric): r.median for r in rows}


def _at_least(name: str, table, lhs: Tuple[str, str, str], rhs: Tuple[str, str, str]) -> Optional[OrderingCheck]:
    if lhs not in table or rhs not in table:
        return None
    return OrderingCheck(name, table[lhs] >= table[rhs], "/".join(lhs), "/".join(rhs), table[lhs], table[rhs])


def check_orderings(rows: Sequence[AblationRow]) -> List[OrderingCheck]:
    """Directional checks on median tables; checks whose rows are missing are skipped."""
    table = _lookup(rows)
    candidates = [
        _at_least("joint >= single-task (AU F1)", table, (SSM, AU, "avg_f1"), (STL, AU, "avg_f1")),
        _at_least("joint >= single-task (FE UAR)", table, (SSM, EXPRESSION, "uar"), (STL, EXPRESSION, "uar")),
        _at_least("TSP >= baseline (AU F1)", table, (BASELINE_TSP, AU, "avg_f1"), (BASELINE, AU, "avg_f1")),
        _at_least("DPM >= TSP (AU F1)", table, (SSM, AU, "avg_f1"), (BASELINE_TSP, AU, "avg_f1")),
        _at_least("prior >= random init (AU F1)", table,
            ("prior/learnable-dual", AU, "avg_f1"), ("random/learnable-dual", AU, "avg_f1")),
        _at_least("prior >= random init (FE UAR)", table,
            ("prior/learnable-dual", EXPRESSION, "uar"), ("random/learnable-dual", EXPRESSION, "uar")),
        _at_least("learnable >= frozen (AU F1)", table,
            ("prior/learnable-dual", AU, "avg_f1"), ("prior/frozen", AU, "avg_f1")),
        _at_least("learnable >= frozen (FE UAR)", table,
            ("prior/learnable-dual", EXPRESSION, "uar"), ("prior/frozen", EXPRESSION, "uar")),
    ]
    for pct in (20, 60, 100):
        candidates.append(_at_least(f"fe->au {pct}% >= single-task (AU F1)", table,
            (f"fe->au {pct}%", AU, "avg_f1"), ("fe->au 0%", AU, "avg_f1")))
    checks = [c for c in candidates if c is not None]
    for check in checks:
        logging.info(f"[orderings] {'PASS' if check.passed else 'FAIL'} {check.name}: "
                     f"{check.lhs_value:.4f} vs {check.rhs_value:.4f}")
    return checks
