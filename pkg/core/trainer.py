import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from core.backbone import AU, EXPRESSION
from core.config import base_rates
from core.errors import ConfigurationError
from core.facs import resolve_facs_table
from core.model import SsmModel
from core.numerics import GROUPS, AdamW, GradCheckReport, check_finite, grad_check, seeded_generator
from core.objective import au_loss, au_report, dfer_loss, expression_report, subset_eval, task_weights, total_loss
from core.storage import CHECKPOINT_MAGIC, entries_with_prefix, read_container, write_container
from core.world import ClipDataset, SyntheticWorld
from ontology.config import ExperimentConfig
from ontology.output import MetricsReport

JOINT = "model"
_CYCLER_STREAMS = {EXPRESSION: 601, AU: 602}


class BatchCycler:
    """Seeded shuffled passes over a dataset; a batch may span two passes."""

    def __init__(self, size: int, batch_size: int, generator: torch.Generator):
        if size < 1:
            raise ConfigurationError("Cannot draw batches from an empty dataset")
        self.size = size
        self.batch_size = batch_size
        self.generator = generator
        self.batches = 0
        self.passes = 0
        self._order = torch.randperm(size, generator=generator)
        self._pos = 0

    def next(self) -> torch.Tensor:
        picked = []
        need = self.batch_size
        while need > 0:
            if self._pos == self.size:
                self._order = torch.randperm(self.size, generator=self.generator)
                self._pos = 0
                self.passes += 1
            take = min(need, self.size - self._pos)
            picked.append(self._order[self._pos:self._pos + take])
            self._pos += take
            need -= take
        self.batches += 1
        return torch.cat(picked)


@dataclass
class RunState:
    config: ExperimentConfig
    seed: int
    models: Dict[str, SsmModel]
    optimizers: Dict[str, Optional[AdamW]] = field(default_factory=dict)
    loss_curve: List[float] = field(default_factory=list)
    task_loss_curves: Dict[str, List[float]] = field(default_factory=lambda: {EXPRESSION: [], AU: []})
    lr_history: List[Dict[str, float]] = field(default_factory=list)
    metrics: Dict[str, MetricsReport] = field(default_factory=dict)
    mapping_snapshots: List[Dict[str, torch.Tensor]] = field(default_factory=list)
    steps: int = 0
    fe_batches: int = 0
    au_batches: int = 0

    @property
    def joint(self) -> bool:
        return JOINT in self.models

    def model_for(self, task: str) -> SsmModel:
        return self.models[JOINT] if self.joint else self.models[task]


def lr_schedule(epoch: int, base: Dict[str, float], decay_every: int = 10, factor: float = 0.1) -> Dict[str, float]:
    """Step decay: base * factor ** floor(epoch / decay_every) for every group."""
    if epoch < 0:
        raise ConfigurationError(f"Epoch must be non-negative, got {epoch}")
    scale = factor ** (epoch // decay_every)
    return {group: rate * scale for group, rate in base.items()}


def build_models(config: ExperimentConfig, seed: int) -> Dict[str, SsmModel]:
    table = resolve_facs_table(config.facs_table_path)
    if config.joint:
        return {JOINT: SsmModel(config, seed, table)}
    # single-task runs: one trunk per task, nothing shared
    return {EXPRESSION: SsmModel(config, seed, table), AU: SsmModel(config, seed + 1, table)}


def build_optimizer(model: SsmModel, rates: Dict[str, float], config: ExperimentConfig) -> Optional[AdamW]:
    """AdamW with one group per learning-rate group; groups at rate 0 are left out."""
    groups = []
    params = model.trainable_parameters()
    for group in GROUPS:
        tensors = [p.tensor for p in params if p.group == group]
        if tensors and rates[group] > 0:
            groups.append({"params": tensors, "lr": rates[group], "name": group})
    if not groups:
        return None
    return AdamW(groups, betas=tuple(config.betas), eps=config.eps, weight_decay=config.weight_decay)


def steps_per_epoch(config: ExperimentConfig, world: SyntheticWorld) -> int:
    """Batches in one pass over whichever full-size training set has fewer clips.

    The larger set cycles. Training fractions do not change the count.
    """
    if config.steps_per_epoch:
        return config.steps_per_epoch
    n_fe, n_au = len(world["fe_train"]), len(world["au_train"])
    if n_fe <= n_au:
        return math.ceil(n_fe / config.batch_dfer)
    return math.ceil(n_au / config.batch_au)


def _check_gradients(model: SsmModel) -> None:
    for p in model.trainable_parameters():
        if p.tensor.grad is not None:
            check_finite(f"grad:{p.name}", p.tensor.grad)


class Trainer:

    def __init__(self, config: ExperimentConfig, world: SyntheticWorld, seed: Optional[int] = None,
        tag: Optional[str] = None):
        self.config = config
        self.world = world
        self.seed = config.seed if seed is None else seed
        self.tag = tag or f"run-{self.seed}"
        self.rates = base_rates(config)
        self.fe = self._train_split("fe_train", config.data_fraction_fe)
        self.au = self._train_split("au_train", config.data_fraction_au)

    def _train_split(self, name: str, fraction: float) -> ClipDataset:
        dataset = self.world[name]
        return dataset if fraction >= 1.0 else dataset.fraction(fraction)

    def init_state(self) -> RunState:
        models = build_models(self.config, self.seed)
        state = RunState(self.config, self.seed, models)
        for name, model in models.items():
            state.optimizers[name] = build_optimizer(model, self.rates, self.config)
        self._snapshot(state)
        return state

    def _snapshot(self, state: RunState) -> None:
        mapping = state.model_for(EXPRESSION).mapping
        if mapping is not None and mapping.has_matrices:
            W_ae, W_ea = mapping.raw_matrices()
            state.mapping_snapshots.append({"W_ae": W_ae.detach().clone(), "W_ea": W_ea.detach().clone()})

    def _set_rates(self, state: RunState, rates: Dict[str, float]) -> None:
        for optimizer in state.optimizers.values():
            if optimizer is None:
                continue
            for group in optimizer.param_groups:
                group["lr"] = rates[group["name"]]

    def _joint_step(self, state: RunState, fe_idx: torch.Tensor, au_idx: torch.Tensor) -> Dict[str, float]:
        model = state.models[JOINT]
        optimizer = state.optimizers[JOINT]
        if optimizer is not None:
            optimizer.zero_grad(set_to_none=True)
        fe_batch, au_batch = self.fe.batch(fe_idx), self.au.batch(au_idx)
        s_exp, s_au = model(fe_batch.frames, au_batch.frames)
        check_finite("expression_scores", s_exp)
        check_finite("au_scores", s_au)
        l_dfe = dfer_loss(s_exp, fe_batch.labels)
        l_au = au_loss(s_au, au_batch.labels)
        loss = check_finite("loss", total_loss(l_dfe, l_au, self.config.lam))
        if optimizer is not None and loss.requires_grad:
            loss.backward()
            _check_gradients(model)
            optimizer.step()
        return {"total": loss.item(), EXPRESSION: l_dfe.item(), AU: l_au.item()}

    def _single_step(self, state: RunState, task: str, idx: torch.Tensor) -> float:
        model = state.models[task]
        optimizer = state.optimizers[task]
        if optimizer is not None:
            optimizer.zero_grad(set_to_none=True)
        if task == EXPRESSION:
            batch = self.fe.batch(idx)
            scores = check_finite("expression_scores", model.expression_scores(batch.frames))
            loss = check_finite("loss", dfer_loss(scores, batch.labels))
        else:
            batch = self.au.batch(idx)
            scores = check_finite("au_scores", model.au_scores(batch.frames))
            loss = check_finite("loss", au_loss(scores, batch.labels))
        if optimizer is not None:
            loss.backward()
            _check_gradients(model)
            optimizer.step()
        return loss.item()

    def train(self, state: Optional[RunState] = None) -> RunState:
        start_time = time.time()
        state = state or self.init_state()
        cfg = self.config
        steps = steps_per_epoch(cfg, self.world)
        fe_cycler = BatchCycler(len(self.fe), cfg.batch_dfer, seeded_generator(self.seed, _CYCLER_STREAMS[EXPRESSION]))
        au_cycler = BatchCycler(len(self.au), cfg.batch_au, seeded_generator(self.seed, _CYCLER_STREAMS[AU]))
        w_dfe, w_au = task_weights(cfg.lam)
        logging.info(f"[{self.tag}] {'joint' if state.joint else 'single-task'} training: {cfg.epochs} epochs x "
                     f"{steps} steps, fe={len(self.fe)} au={len(self.au)}")

        for epoch in range(cfg.epochs):
            rates = lr_schedule(epoch, self.rates, cfg.decay_every, cfg.decay_factor)
            self._set_rates(state, rates)
            sums = {"total": 0.0, EXPRESSION: 0.0, AU: 0.0}
            for _ in range(steps):
                fe_idx, au_idx = fe_cycler.next(), au_cycler.next()
                if state.joint:
                    losses = self._joint_step(state, fe_idx, au_idx)
                else:
                    losses = {EXPRESSION: self._single_step(state, EXPRESSION, fe_idx),
                              AU: self._single_step(state, AU, au_idx)}
                    losses["total"] = w_dfe * losses[EXPRESSION] + w_au * losses[AU]
                for key in sums:
                    sums[key] += losses[key]
                state.steps += 1

            state.loss_curve.append(sums["total"] / steps)
            for task in (EXPRESSION, AU):
                state.task_loss_curves[task].append(sums[task] / steps)
            state.lr_history.append(rates)
            self._snapshot(state)
            logging.info(f"[{self.tag}] epoch {epoch} loss {state.loss_curve[-1]:.4f} "
                         + " ".join(f"{g}={r:.2e}" for g, r in rates.items()))

        state.fe_batches = fe_cycler.batches
        state.au_batches = au_cycler.batches
        state.metrics = evaluate(state, self.world)
        logging.info(f"[{self.tag}] Training completed in {time.time() - start_time:.2f} seconds")
        return state


def train(config: ExperimentConfig, world: SyntheticWorld, seed: Optional[int] = None,
    tag: Optional[str] = None) -> RunState:
    return Trainer(config, world, seed, tag).train()


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------
@torch.no_grad()
def score_dataset(model: SsmModel, dataset: ClipDataset, batch_size: int = 256) -> torch.Tensor:
    prototypes = model.prototypes() if model.head == "prototype" else None
    chunks = []
    for start in range(0, len(dataset), batch_size):
        frames = dataset.frames[start:start + batch_size]
        if dataset.task == EXPRESSION:
            chunks.append(model.expression_scores(frames, prototypes))
        else:
            chunks.append(model.au_scores(frames, prototypes))
    return torch.cat(chunks, dim=0)


def evaluate(state: RunState, world: SyntheticWorld, cross: bool = True) -> Dict[str, MetricsReport]:
    """Test-split reports for both tasks, plus the cross-domain sets."""
    cfg = state.config
    exp_model, au_model = state.model_for(EXPRESSION), state.model_for(AU)
    fe_test, au_test = world["fe_test"], world["au_test"]
    reports = {
        EXPRESSION: expression_report(score_dataset(exp_model, fe_test, cfg.eval_batch), fe_test.labels,
            cfg.expr_set),
        AU: au_report(score_dataset(au_model, au_test, cfg.eval_batch), au_test.labels, cfg.au_set),
    }
    if cross:
        cross_au, cross_fe = world["cross_au"], world["cross_fe"]
        reports["cross_au"] = subset_eval(score_dataset(au_model, cross_au, cfg.eval_batch), cfg.au_set,
            cross_au.labels, world.cross_au_set)
        reports["cross_expression"] = expression_report(score_dataset(exp_model, cross_fe, cfg.eval_batch),
            cross_fe.labels, cfg.expr_set)
    return reports


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------
def checkpoint_entries(state: RunState) -> "OrderedDict[str, torch.Tensor]":
    entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for prefix, model in state.models.items():
        for name, tensor in model.state_dict().items():
            entries[f"{prefix}/{name}"] = tensor
    for prefix, optimizer in state.optimizers.items():
        if optimizer is None:
            continue
        names = {id(p): n for n, p in state.models[prefix].named_parameters()}
        for param, moments in optimizer.state.items():
            base = f"optim/{prefix}/{names[id(param)]}"
            entries[f"{base}/exp_avg"] = moments["exp_avg"]
            entries[f"{base}/exp_avg_sq"] = moments["exp_avg_sq"]
            entries[f"{base}/step"] = torch.tensor(float(moments["step"]))
    entries["run/counters"] = torch.tensor([state.steps, state.fe_batches, state.au_batches], dtype=torch.float64)
    entries["run/loss_curve"] = torch.tensor(state.loss_curve, dtype=torch.float64)
    return entries


def save_checkpoint(state: RunState, path) -> None:
    write_container(path, CHECKPOINT_MAGIC, checkpoint_entries(state))


def load_checkpoint(path, config: ExperimentConfig, seed: int) -> RunState:
    """Rebuild the models of a run and restore their tensors; optimizer moments are not restored."""
    entries = read_container(path, CHECKPOINT_MAGIC)
    models = build_models(config, seed)
    for prefix, model in models.items():
        model.load_state_dict(entries_with_prefix(entries, f"{prefix}/"))
    state = RunState(config, seed, models)
    if "run/counters" in entries:
        state.steps, state.fe_batches, state.au_batches = (int(v) for v in entries["run/counters"].tolist())
    if "run/loss_curve" in entries:
        state.loss_curve = entries["run/loss_curve"].tolist()
    return state


# ----------------------------------------------------------------------
# Gradient verification
# ----------------------------------------------------------------------
def grad_check_run(config: ExperimentConfig, world: SyntheticWorld, seed: Optional[int] = None,
    h: float = 1e-6, tol: float = 1e-4, max_entries: Optional[int] = 16, batch: int = 4) -> GradCheckReport:
    """Central-difference check of the full training loss over every trainable parameter."""
    seed = config.seed if seed is None else seed
    models = build_models(config, seed)
    fe, au = world["fe_train"], world["au_train"]
    fe_batch = fe.batch(list(range(min(batch, len(fe)))))
    au_batch = au.batch(list(range(min(batch, len(au)))))
    params = []
    for prefix, model in models.items():
        params.extend((f"{prefix}/{p.name}", p.tensor) for p in model.trainable_parameters())

    def loss_fn() -> torch.Tensor:
        if JOINT in models:
            s_exp, s_au = models[JOINT](fe_batch.frames, au_batch.frames)
        else:
            s_exp = models[EXPRESSION].expression_scores(fe_batch.frames)
            s_au = models[AU].au_scores(au_batch.frames)
        return total_loss(dfer_loss(s_exp, fe_batch.labels), au_loss(s_au, au_batch.labels), config.lam)

    report = grad_check(loss_fn, params, h=h, tol=tol, max_entries=max_entries, seed=seed)
    worst = report.worst
    logging.info(f"[grad-check] {len(params)} parameters, max relative error {report.max_error:.3e}"
                 + (f" at {worst.name}" if worst else ""))
    return report
