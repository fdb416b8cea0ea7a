"""Dual-branch adaptation with periodic merging, and supervised head training.

A *branch* is a full ``DenseTRF`` model plus its optimizer. Only the
mergeable sub-networks (adapter, slot attention, slot decoder) are optimized
during adaptation rounds; after every round the two branches are averaged and
the average is copied back into both.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formats
from .head import DEFAULT_LAMBDA, DenseTRF, classify, combine, joint_loss
from .metrics import evaluate_masks
from .slots import NonFiniteError, PositionGrid, permute_patch_order, reconstruction_loss

log = logging.getLogger(__name__)

BASE = "base"
TARGET = "target"
HEAD = "head"

HISTORY_COLUMNS = ("round", "step", "branch", "loss_recon", "loss_bce", "loss_total", "param_drift")


class IncompatibleParametersError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    """Non-finite loss; ``snapshot`` carries the state needed to diagnose it."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class EmptyPoolError(ValueError):
    pass


# -- parameter sets ----------------------------------------------------------

class ParameterSet:
    """Ordered name -> tensor mapping for the mergeable part of a model."""

    def __init__(self, entries):
        self.entries: OrderedDict[str, torch.Tensor] = OrderedDict(entries)

    @classmethod
    def from_model(cls, model: DenseTRF) -> "ParameterSet":
        entries = OrderedDict()
        for prefix in model.MERGEABLE:
            for name, p in getattr(model, prefix).named_parameters():
                entries[f"{prefix}.{name}"] = p.detach().clone()
        return cls(entries)

    def load_into(self, model: DenseTRF) -> None:
        current = ParameterSet.from_model(model)
        current.check_compatible(self)
        params = dict(model.named_parameters())
        with torch.no_grad():
            for name, value in self.entries.items():
                params[name].copy_(value)

    def names(self) -> list[str]:
        return list(self.entries)

    def check_compatible(self, other: "ParameterSet") -> None:
        a, b = list(self.entries.items()), list(other.entries.items())
        for (na, ta), (nb, tb) in zip(a, b):
            if na != nb:
                raise IncompatibleParametersError(f"name mismatch: {na!r} vs {nb!r}")
            if ta.shape != tb.shape:
                raise IncompatibleParametersError(
                    f"shape mismatch for {na!r}: {tuple(ta.shape)} vs {tuple(tb.shape)}"
                )
        if len(a) != len(b):
            longer = a if len(a) > len(b) else b
            raise IncompatibleParametersError(f"entry count differs; first unmatched {longer[min(len(a), len(b))][0]!r}")

    def clone(self) -> "ParameterSet":
        return ParameterSet((k, v.clone()) for k, v in self.entries.items())

    def map(self, fn) -> "ParameterSet":
        return ParameterSet((k, fn(v)) for k, v in self.entries.items())

    def equal(self, other: "ParameterSet") -> bool:
        return self.names() == other.names() and all(
            torch.equal(self.entries[k], other.entries[k]) for k in self.entries
        )

    def distance(self, other: "ParameterSet") -> float:
        """Euclidean norm of the flattened difference."""
        self.check_compatible(other)
        sq = sum(float(((self.entries[k].double() - other.entries[k].double()) ** 2).sum())
                 for k in self.entries)
        return math.sqrt(sq)

    def to_numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().cpu().numpy()) for k, v in self.entries.items())

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, name):
        return self.entries[name]


def merge_parameters(base: ParameterSet, target: ParameterSet, weight: float = 0.5) -> ParameterSet:
    """Elementwise average; ``weight`` is the share of the target branch."""
    base.check_compatible(target)
    if weight == 0.5:
        return ParameterSet((k, (base.entries[k] + target.entries[k]) / 2) for k in base.entries)
    return ParameterSet(
        (k, (1 - weight) * base.entries[k] + weight * target.entries[k]) for k in base.entries
    )


# -- branches and rounds -----------------------------------------------------

@dataclass
class RoundConfig:
    steps_per_round: int = 200
    total_rounds: int = 10
    base_lr: float = 4e-4
    target_lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 8
    merge_weight: float = 0.5

    def __post_init__(self):
        if self.steps_per_round < 0 or self.total_rounds < 0:
            raise ValueError("steps_per_round and total_rounds must be non-negative")
        if self.base_lr < 0 or self.target_lr < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass
class PhaseSchedule:
    phase1_iters: int = 1000
    phase2_iters: int = 3000
    phase3_iters: int = 1000
    lr: float = 1e-4
    lam: float = DEFAULT_LAMBDA
    batch_size: int = 8
    eval_every: int = 500

    @property
    def total(self) -> int:
        return self.phase1_iters + self.phase2_iters + self.phase3_iters

    def phase(self, it: int) -> int:
        if it < self.phase1_iters:
            return 1
        if it < self.phase1_iters + self.phase2_iters:
            return 2
        return 3


def mergeable_parameters(model: DenseTRF):
    for prefix in model.MERGEABLE:
        yield from getattr(model, prefix).parameters()


@dataclass
class BranchState:
    role: str
    model: DenseTRF
    lr: float
    weight_decay: float = 1e-5
    steps_done: int = 0
    optimizer: torch.optim.Optimizer = field(default=None, repr=False)

    def __post_init__(self):
        if self.role not in (BASE, TARGET):
            raise ValueError(f"unknown branch role {self.role!r}")
        if self.optimizer is None:
            self.reset_optimizer()

    def reset_optimizer(self) -> None:
        self.optimizer = torch.optim.AdamW(mergeable_parameters(self.model), lr=self.lr,
                                           weight_decay=self.weight_decay)

    @property
    def params(self) -> ParameterSet:
        return ParameterSet.from_model(self.model)

    @property
    def optimizer_state(self) -> dict:
        """Moment buffers keyed by parameter name (empty until the first step)."""
        names = {id(p): n for n, p in self.model.named_parameters()}
        return {names[id(p)]: s for p, s in self.optimizer.state.items()}


def make_branches(model: DenseTRF, cfg: RoundConfig) -> tuple[BranchState, BranchState]:
    """Two branches starting from identical copies of ``model``."""
    base = BranchState(BASE, copy.deepcopy(model), cfg.base_lr, cfg.weight_decay)
    target = BranchState(TARGET, copy.deepcopy(model), cfg.target_lr, cfg.weight_decay)
    return base, target


def broadcast(merged: ParameterSet, branches) -> tuple[BranchState, BranchState]:
    """Copy ``merged`` into every branch and reset its optimizer moments."""
    for branch in branches:
        merged.clone().load_into(branch.model)
        branch.reset_optimizer()
    return tuple(branches)


def _recon_step(branch: BranchState, feats: torch.Tensor, positions: PositionGrid,
                generator: torch.Generator) -> float:
    try:
        out = branch.model.encode(feats, positions, generator)
    except NonFiniteError:
        return math.nan
    loss = reconstruction_loss(feats, out.decode)
    value = loss.detach().item()
    if not math.isfinite(value):
        return value
    branch.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    branch.optimizer.step()
    branch.steps_done += 1
    return value


class RoundRobinSampler:
    """Per-domain batch queues visited in strict rotation."""

    def __init__(self, pools: dict[str, np.ndarray], batch_size: int, rng: np.random.Generator):
        if not pools or any(len(v) == 0 for v in pools.values()):
            raise EmptyPoolError("every domain in the pool needs at least one sample")
        self.pools = pools
        self.domains = sorted(pools)
        self.batch_size = batch_size
        self.rng = rng
        self.turn = 0

    def next(self) -> tuple[str, torch.Tensor]:
        domain = self.domains[self.turn % len(self.domains)]
        self.turn += 1
        data = self.pools[domain]
        idx = self.rng.choice(len(data), size=min(self.batch_size, len(data)), replace=False)
        return domain, torch.from_numpy(data[np.sort(idx)])


@dataclass
class RoundReport:
    round_index: int
    rows: list[dict]
    drift_before_merge: float
    drift_at_start: float


def run_adaptation_round(branches, base_pool: dict[str, np.ndarray], target_pool: np.ndarray,
                         cfg: RoundConfig, round_index: int = 0,
                         rng: np.random.Generator | None = None) -> tuple[tuple[BranchState, BranchState], RoundReport]:
    """One round: both branches train on reconstruction, then merge and broadcast.

    ``base_pool`` maps domain name -> feature stack (N, H, W, C); the base
    branch cycles through domains and uses patch-order permutation. The target
    branch sees only ``target_pool`` with the identity ordering.
    """
    base, target = branches
    if len(target_pool) == 0:
        raise EmptyPoolError("target pool is empty")
    rng = np.random.default_rng(round_index) if rng is None else rng
    base_sampler = RoundRobinSampler(base_pool, cfg.batch_size, rng)
    target_sampler = RoundRobinSampler({TARGET: target_pool}, cfg.batch_size, rng)
    h, w = target_pool.shape[1:3]
    identity = PositionGrid.identity(h, w, base.model.slot_config.pos_dim)

    drift0 = base.params.distance(target.params)
    rows = [dict(round=round_index, step=0, branch="both", loss_recon=None, loss_bce=None,
                 loss_total=None, param_drift=drift0)]
    for step in range(1, cfg.steps_per_round + 1):
        losses = {}
        for branch, sampler in ((base, base_sampler), (target, target_sampler)):
            _, feats = sampler.next()
            positions = identity
            if branch.role == BASE:
                positions = permute_patch_order(identity, int(rng.integers(2**31)))
            gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
            losses[branch.role] = _recon_step(branch, feats, positions, gen)
            if not math.isfinite(losses[branch.role]):
                raise NumericalFailure(
                    f"non-finite reconstruction loss in {branch.role} branch, round {round_index} step {step}",
                    {"round": round_index, "step": step, "branch": branch.role, "losses": losses,
                     "steps_done": branch.steps_done},
                )
        drift = base.params.distance(target.params)
        for role in (BASE, TARGET):
            rows.append(dict(round=round_index, step=step, branch=role, loss_recon=losses[role],
                             loss_bce=None, loss_total=losses[role], param_drift=drift))
    drift_end = base.params.distance(target.params)
    merged = merge_parameters(base.params, target.params, cfg.merge_weight)
    broadcast(merged, (base, target))
    return (base, target), RoundReport(round_index, rows, drift_end, drift0)


def pretrain_base(model: DenseTRF, base_pool: dict[str, np.ndarray], steps: int, cfg: RoundConfig,
                  rng: np.random.Generator) -> list[dict]:
    """Train only the base branch on the multi-domain pool with patch-order permutation."""
    branch = BranchState(BASE, model, cfg.base_lr, cfg.weight_decay)
    sampler = RoundRobinSampler(base_pool, cfg.batch_size, rng)
    some = next(iter(base_pool.values()))
    identity = PositionGrid.identity(some.shape[1], some.shape[2], model.slot_config.pos_dim)
    rows = []
    for step in range(1, steps + 1):
        _, feats = sampler.next()
        positions = permute_patch_order(identity, int(rng.integers(2**31)))
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        loss = _recon_step(branch, feats, positions, gen)
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite loss during base pretraining at step {step}",
                                   {"step": step, "loss": loss})
        rows.append(dict(round=-1, step=step, branch=BASE, loss_recon=loss, loss_bce=None,
                         loss_total=loss, param_drift=None))
    return rows


def adapt(model: DenseTRF, base_pool: dict[str, np.ndarray], target_pool: np.ndarray,
          cfg: RoundConfig, rng: np.random.Generator) -> tuple[ParameterSet, list[RoundReport]]:
    """Run ``cfg.total_rounds`` rounds starting from ``model``; returns the final merged set."""
    branches = make_branches(model, cfg)
    reports = []
    for r in range(cfg.total_rounds):
        branches, report = run_adaptation_round(branches, base_pool, target_pool, cfg, r, rng)
        reports.append(report)
    return branches[0].params, reports


# -- supervised head training ---------------------------------------------

@dataclass(frozen=True)
class AblationVariant:
    kind: str
    use_concat: bool = True
    use_recon: bool = True
    init_pretrained: bool = True
    adapt: bool = True


VARIANTS = ("full", "no_sa", "sa_no_adapt", "no_concat")


def ablation_variant(kind: str) -> AblationVariant:
    if kind == "full":
        return AblationVariant(kind)
    if kind == "no_sa":
        return AblationVariant(kind, use_recon=False, init_pretrained=False, adapt=False)
    if kind == "sa_no_adapt":
        return AblationVariant(kind, adapt=False)
    if kind == "no_concat":
        return AblationVariant(kind, use_concat=False)
    raise ValueError(f"unknown ablation variant {kind!r}; expected one of {VARIANTS}")


@dataclass
class HeadHistory:
    rows: list[dict] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)  # (iteration, mean DICE)
    early_stop_iteration: int | None = None  # first iteration where the monitor would have stopped


class EarlyStopping:
    """Patience-based monitor on a maximized score. ``halt`` decides whether it may stop training."""

    def __init__(self, patience: int = 4, halt: bool = False):
        self.patience = patience
        self.halt = halt
        self.best = -math.inf
        self.bad = 0
        self.triggered_at = None

    def update(self, iteration: int, score: float) -> bool:
        if score > self.best:
            self.best, self.bad = score, 0
        else:
            self.bad += 1
        if self.bad >= self.patience and self.triggered_at is None:
            self.triggered_at = iteration
        return self.halt and self.triggered_at is not None


def _set_trainable(model: DenseTRF, head_only: bool) -> None:
    for prefix in model.MERGEABLE:
        for p in getattr(model, prefix).parameters():
            p.requires_grad_(not head_only)
    for p in model.classifier.parameters():
        p.requires_grad_(True)


@torch.no_grad()
def predict_logits(model: DenseTRF, features: np.ndarray, out_shape: tuple[int, int],
                   seed: int = 0, batch_size: int = 32) -> np.ndarray:
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    chunks = []
    for i in range(0, len(features), batch_size):
        x = torch.from_numpy(features[i:i + batch_size])
        chunks.append(model(x, out_shape, generator=gen).logits.numpy())
    model.train()
    return np.concatenate(chunks)


def predict_masks(model: DenseTRF, features: np.ndarray, out_shape, seed: int = 0) -> np.ndarray:
    """Binary masks from ``sigmoid(logit) > 0.5``."""
    return predict_logits(model, features, out_shape, seed) > 0.0


def train_dense_head(model: DenseTRF, features: np.ndarray, labels: np.ndarray,
                     schedule: PhaseSchedule = PhaseSchedule(), variant: AblationVariant | None = None,
                     rng: np.random.Generator | None = None, validation=None,
                     early_stopping: EarlyStopping | None = None, snapshot_hook=None) -> HeadHistory:
    """Three-phase supervised training of ``model`` on labeled features.

    ``labels`` is (N, Hi, Wi, C) in {0, 1}. ``validation`` is an optional
    ``(features, labels)`` pair scored every ``schedule.eval_every``
    iterations and at the end. ``snapshot_hook(iteration, model)`` is called
    before every iteration and once after the last.
    """
    variant = variant or ablation_variant("full")
    if len(features) == 0:
        raise EmptyPoolError("labeled pool is empty")
    if labels.ndim != 4 or labels.shape[0] != features.shape[0]:
        raise ValueError(f"labels must be (N, Hi, Wi, C) matching {features.shape[0]} samples, got {labels.shape}")
    if labels.shape[-1] != model.num_classes:
        raise ValueError(f"labels have {labels.shape[-1]} classes, model expects {model.num_classes}")
    rng = np.random.default_rng(0) if rng is None else rng
    early_stopping = early_stopping or EarlyStopping()
    out_shape = labels.shape[1:3]
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.lr, weight_decay=0.0)
    history = HeadHistory()

    def validate(it):
        if validation is None:
            return
        vf, vl = validation
        report = evaluate_masks(predict_masks(model, vf, out_shape, seed=0), vl)
        history.validation.append((it, report.mean_dice))
        if early_stopping.update(it, report.mean_dice) and history.early_stop_iteration is None:
            history.early_stop_iteration = it

    phase = None
    for it in range(schedule.total):
        new_phase = schedule.phase(it)
        if new_phase != phase:
            phase = new_phase
            _set_trainable(model, head_only=phase == 1)
        if it % schedule.eval_every == 0:
            validate(it)
            if early_stopping.halt and early_stopping.triggered_at is not None:
                break
        if snapshot_hook is not None:
            snapshot_hook(it, model)
        idx = np.sort(rng.choice(len(features), size=min(schedule.batch_size, len(features)), replace=False))
        x = torch.from_numpy(features[idx])
        y = torch.from_numpy(labels[idx]).float()
        gen = torch.Generator().manual_seed(int(rng.integers(2**31)))
        lam = schedule.lam if phase == 2 else 0.0
        with_recon = variant.use_recon and phase != 1
        if phase == 1:
            with torch.no_grad():
                enc = model.encode(x, generator=gen)
            z = enc.adapted
            if model.use_concat:
                z = combine(enc.adapted, enc.decode)
            logits = classify(model.classifier, z, out_shape)
            breakdown = joint_loss(logits, y, lam=0.0)
        else:
            out = model(x, out_shape, generator=gen)
            if with_recon:
                breakdown = joint_loss(out.logits, y, x, out.decode, lam=lam)
            else:
                breakdown = joint_loss(out.logits, y, lam=0.0)
        total = breakdown.total
        if not torch.isfinite(total):
            raise NumericalFailure(f"non-finite head loss at iteration {it}",
                                   {"iteration": it, "phase": phase, **breakdown.as_floats()})
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        vals = breakdown.as_floats()
        history.rows.append(dict(round=phase, step=it, branch=HEAD, loss_recon=vals["loss_recon"],
                                 loss_bce=vals["loss_bce"], loss_total=vals["loss_total"],
                                 param_drift=None, lam=lam))
    if snapshot_hook is not None:
        snapshot_hook(schedule.total, model)
    validate(schedule.total)
    _set_trainable(model, head_only=False)
    return history


# -- persistence -----------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history(path, rows, append: bool = False) -> None:
    """CSV with ``HISTORY_COLUMNS``; blank cells mark absent values."""
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in HISTORY_COLUMNS])


def read_history(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("loss_recon", "loss_bce", "loss_total", "param_drift"):
            row[key] = float(row[key]) if row[key] != "" else None
        row["round"], row["step"] = int(row["round"]), int(row["step"])
    return rows


def save_checkpoint(path, params: ParameterSet | "OrderedDict[str, torch.Tensor]", metadata: dict) -> None:
    """Binary DTRF-C parameter file plus a ``.json`` sidecar with run metadata."""
    path = Path(path)
    entries = params.to_numpy() if isinstance(params, ParameterSet) else OrderedDict(
        (k, v.detach().cpu().numpy()) for k, v in params.items())
    formats.write_checkpoint(path, entries)
    path.with_suffix(".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    path = Path(path)
    entries = OrderedDict((k, torch.from_numpy(v)) for k, v in formats.read_checkpoint(path).items())
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return entries, meta


def model_state(model: DenseTRF) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().clone()) for k, v in model.named_parameters())


def load_model_state(model: DenseTRF, entries) -> None:
    params = dict(model.named_parameters())
    missing = set(params) - set(entries)
    if missing:
        raise IncompatibleParametersError(f"checkpoint lacks {sorted(missing)[0]!r}")
    with torch.no_grad():
        for k, v in entries.items():
            if k in params:
                if params[k].shape != v.shape:
                    raise IncompatibleParametersError(f"shape mismatch for {k!r}")
                params[k].copy_(v)

