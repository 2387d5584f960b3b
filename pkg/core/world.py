"""Synthetic heterogeneous world: expression clips and AU clips from
different domains that share one latent AU process.

Each clip draws an intended expression, activates latent AUs with
probabilities shaped by a generator matrix G (the FACS prior plus off-prior
mass), and renders frames through its domain's frozen feature map. The
expression label is the argmax of ``sum_m G[k, m] (2 a_m - 1)`` plus bounded
noise; AU labels are the latent activations at the center frame.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import torch

from core.backbone import AU, EXPRESSION, ClipBatch
from core.errors import SpecError
from core.facs import BASIC_EXPRESSIONS, BP4D_AUS, FacsTable, build_prior_matrix, builtin_facs_table, normalize_rows
from core.numerics import DTYPE, gaussian, seeded_generator
from core.storage import DATASET_MAGIC, read_container, write_container
from ontology.world import SyntheticWorldSpec

DOMAINS = {"fe": 0, "au": 1, "cross_au": 2, "cross_fe": 3}
SPLITS = ("fe_train", "fe_test", "au_train", "au_test", "cross_au", "cross_fe")
CONSISTENCY_TOL = 1e-9

_GENERATOR_STREAM = 401
_DOMAIN_STREAM = 402
_SAMPLE_STREAMS = {"fe": 403, "au": 404, "cross_au": 405, "cross_fe": 406}


@dataclass
class ClipDataset:
    task: str
    frames: torch.Tensor
    labels: torch.Tensor
    latent: torch.Tensor
    hidden: torch.Tensor
    domain_id: int
    classes: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    def subset(self, indices) -> "ClipDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return replace(self, frames=self.frames[idx], labels=self.labels[idx], latent=self.latent[idx],
            hidden=self.hidden[idx])

    def head(self, count: int) -> "ClipDataset":
        return self.subset(list(range(min(count, len(self)))))

    def fraction(self, fraction: float) -> "ClipDataset":
        return self.head(max(1, math.ceil(fraction * len(self))))

    def batch(self, indices) -> ClipBatch:
        part = self.subset(indices)
        return ClipBatch(part.frames, self.task, part.labels, self.domain_id)

    def mean_feature(self) -> torch.Tensor:
        return self.frames.mean(dim=(0, 1))


@dataclass
class SyntheticWorld:
    spec: SyntheticWorldSpec
    seed: int
    universe: List[int]
    expr_set: List[str]
    au_set: List[int]
    cross_au_set: List[int]
    generator: torch.Tensor
    splits: Dict[str, ClipDataset]

    def __getitem__(self, name: str) -> ClipDataset:
        return self.splits[name]

    @property
    def fe_dataset(self) -> ClipDataset:
        return self.splits["fe_train"]

    @property
    def au_dataset(self) -> ClipDataset:
        return self.splits["au_train"]


# ----------------------------------------------------------------------
# Generator matrix
# ----------------------------------------------------------------------
def build_generator_matrix(table: FacsTable, expr_set: Sequence[str], universe: Sequence[int],
    off_prior_mass: float, gen: torch.Generator) -> torch.Tensor:
    """Row-normalized prior over the latent AU universe with ``off_prior_mass``
    spread over AUs outside each row's support. All-zero rows stay zero."""
    W0 = normalize_rows(build_prior_matrix(table, expr_set, universe))
    G = W0.clone()
    for k in range(G.shape[0]):
        support = W0[k] > 0
        if not bool(support.any()) or bool(support.all()):
            continue
        noise = torch.rand(G.shape[1], generator=gen, dtype=DTYPE) * (~support).to(DTYPE)
        G[k] = (1 - off_prior_mass) * W0[k] + off_prior_mass * noise / noise.sum()

    for i in range(G.shape[0]):
        for j in range(i + 1, G.shape[0]):
            if torch.equal(G[i], G[j]):
                raise SpecError(f"Generator rows for {expr_set[i]} and {expr_set[j]} are identical")
    return G


def expression_evidence(G: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
    """N x K scores: sum over AUs of G[k, m] * (+1 if active else -1)."""
    return (2 * latent - 1) @ G.t()


def brute_force_scores(G: torch.Tensor, latent: torch.Tensor) -> List[List[float]]:
    weights = G.tolist()
    rows = []
    for a in latent.tolist():
        rows.append([sum(g * (2 * a_m - 1) for g, a_m in zip(row, a)) for row in weights])
    return rows


def check_label_consistency(G: torch.Tensor, latent: torch.Tensor, noise: torch.Tensor,
    labels: torch.Tensor) -> None:
    """Recount every clip's evidence in plain Python and confirm its label is a maximizer."""
    for i, scores in enumerate(brute_force_scores(G, latent)):
        noisy = [s + e for s, e in zip(scores, noise[i].tolist())]
        if noisy[int(labels[i])] < max(noisy) - CONSISTENCY_TOL:
            raise SpecError(f"Clip {i}: label {int(labels[i])} is not the evidence argmax")


# ----------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------
def _background(spec: SyntheticWorldSpec, universe: Sequence[int]) -> torch.Tensor:
    if spec.prevalence is not None:
        if len(spec.prevalence) != len(universe):
            raise SpecError(f"prevalence has {len(spec.prevalence)} entries for {len(universe)} latent AUs")
        return torch.tensor(spec.prevalence, dtype=DTYPE)
    return torch.full((len(universe),), spec.background_prevalence, dtype=DTYPE)


def sample_latents(G: torch.Tensor, count: int, background: torch.Tensor, p_on: float, gen: torch.Generator):
    K = G.shape[0]
    hidden = torch.randint(K, (count,), generator=gen)
    row_max = G.amax(dim=1, keepdim=True)
    shape = torch.where(row_max > 0, G / torch.where(row_max > 0, row_max, torch.ones_like(row_max)),
        torch.zeros_like(G))
    prob = (background + (p_on - background) * shape[hidden]).clamp(0.0, 1.0)
    latent = (torch.rand(count, G.shape[1], generator=gen, dtype=DTYPE) < prob).to(DTYPE)
    return hidden, latent


def render_frames(latent: torch.Tensor, A: torch.Tensor, b: torch.Tensor, frames: int, width: float,
    sigma: float, gen: torch.Generator) -> torch.Tensor:
    """Latent AUs peak at the center frame and fade with a Gaussian envelope."""
    t = torch.arange(frames, dtype=DTYPE)
    envelope = torch.exp(-((t - frames // 2) / (width * frames)) ** 2)
    u = envelope[None, :, None] * latent[:, None, :]
    noise = torch.randn(latent.shape[0], frames, A.shape[0], generator=gen, dtype=DTYPE)
    return u @ A.t() + b + sigma * noise


def domain_maps(U: int, d_raw: int, shift: float, gen: torch.Generator, offset: float = 0.1) -> Dict[str, tuple]:
    """Per domain: a feature map mixing a shared and a private part, and an additive offset."""
    base = gaussian((d_raw, U), U ** -0.5, gen)
    maps = {}
    for name in DOMAINS:
        private = gaussian((d_raw, U), U ** -0.5, gen)
        maps[name] = ((1 - shift) * base + shift * private, gaussian((d_raw,), offset, gen))
    return maps


def _make_dataset(name: str, task: str, count: int, G, universe, label_aus, classes, spec, maps, seed):
    gen = seeded_generator(seed, _SAMPLE_STREAMS[name])
    hidden, latent = sample_latents(G, count, _background(spec, universe), spec.p_on, gen)
    A, b = maps[name]
    frames = render_frames(latent, A, b, spec.frames, spec.envelope_width, spec.feature_noise, gen)
    if task == EXPRESSION:
        noise = (torch.rand(count, G.shape[0], generator=gen, dtype=DTYPE) * 2 - 1) * spec.label_noise
        labels = torch.argmax(expression_evidence(G, latent) + noise, dim=1)
        check_label_consistency(G, latent, noise, labels)
    else:
        columns = [list(universe).index(a) for a in label_aus]
        labels = latent[:, columns].clone()
    return ClipDataset(task, frames, labels, latent, hidden, DOMAINS[name], list(classes))


def _split(dataset: ClipDataset, test_ratio: float):
    n = len(dataset)
    n_test = min(n - 1, max(1, round(n * test_ratio)))
    return dataset.head(n - n_test), dataset.subset(list(range(n - n_test, n)))


def resolve_world_spec(spec: SyntheticWorldSpec, expr_set=None, au_set=None, frames=None,
    d_raw=None) -> SyntheticWorldSpec:
    """Fill unset label spaces and clip shape from the experiment."""
    return replace(spec,
        expr_set=list(spec.expr_set or expr_set or BASIC_EXPRESSIONS),
        au_set=[int(a) for a in (spec.au_set or au_set or BP4D_AUS)],
        frames=spec.frames or frames or 16,
        d_raw=spec.d_raw or d_raw or 32)


def generate_synthetic_world(spec: SyntheticWorldSpec, seed: int, table: Optional[FacsTable] = None) -> SyntheticWorld:
    spec = resolve_world_spec(spec)
    table = table or builtin_facs_table()
    universe = sorted(set(spec.au_set) | set(spec.cross_au_set))
    G = build_generator_matrix(table, spec.expr_set, universe, spec.off_prior_mass,
        seeded_generator(seed, _GENERATOR_STREAM))
    maps = domain_maps(len(universe), spec.d_raw, spec.domain_shift,
        seeded_generator(seed, _DOMAIN_STREAM), spec.domain_offset)

    common = dict(G=G, universe=universe, spec=spec, maps=maps, seed=seed)
    fe = _make_dataset("fe", EXPRESSION, spec.fe_samples, label_aus=None, classes=spec.expr_set, **common)
    au = _make_dataset("au", AU, spec.au_samples, label_aus=spec.au_set, classes=spec.au_set, **common)
    splits = {}
    splits["fe_train"], splits["fe_test"] = _split(fe, spec.test_ratio)
    splits["au_train"], splits["au_test"] = _split(au, spec.test_ratio)
    cross = max(1, spec.cross_samples)
    splits["cross_au"] = _make_dataset("cross_au", AU, cross, label_aus=spec.cross_au_set,
        classes=spec.cross_au_set, **common)
    splits["cross_fe"] = _make_dataset("cross_fe", EXPRESSION, cross, label_aus=None, classes=spec.expr_set,
        **common)

    logging.info(f"[world-{seed}] {len(universe)} latent AUs; " + ", ".join(
        f"{name}={len(ds)}" for name, ds in splits.items()))
    return SyntheticWorld(spec, seed, universe, list(spec.expr_set), list(spec.au_set),
        [int(a) for a in spec.cross_au_set], G, splits)


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------
def save_world(world: SyntheticWorld, path) -> None:
    entries = {"generator": world.generator, "universe": torch.tensor(world.universe, dtype=DTYPE)}
    for name, ds in world.splits.items():
        for key in ("frames", "labels", "latent", "hidden"):
            entries[f"{name}/{key}"] = getattr(ds, key)
    write_container(path, DATASET_MAGIC, entries)


def load_world(path, spec: SyntheticWorldSpec, seed: int) -> SyntheticWorld:
    """Rebuild a world from a dataset file plus the SyntheticWorldSpec it was generated from."""
    spec = resolve_world_spec(spec)
    dtypes = {f"{name}/hidden": torch.long for name in SPLITS}
    dtypes.update({"fe_train/labels": torch.long, "fe_test/labels": torch.long, "cross_fe/labels": torch.long})
    entries = read_container(path, DATASET_MAGIC, dtypes)
    universe = [int(a) for a in entries["universe"].tolist()]

    splits = {}
    for name in SPLITS:
        if f"{name}/frames" not in entries:
            raise SpecError(f"{path}: missing split '{name}'")
        task = EXPRESSION if name.startswith(("fe", "cross_fe")) else AU
        domain = name.split("_train")[0].split("_test")[0]
        classes = spec.expr_set if task == EXPRESSION else (spec.cross_au_set if name == "cross_au" else spec.au_set)
        splits[name] = ClipDataset(task, entries[f"{name}/frames"], entries[f"{name}/labels"],
            entries[f"{name}/latent"], entries[f"{name}/hidden"], DOMAINS[domain], list(classes))
    return SyntheticWorld(spec, seed, universe, list(spec.expr_set), list(spec.au_set),
        [int(a) for a in spec.cross_au_set], entries["generator"], splits)
