"""Experiment configuration and the end-to-end training/evaluation pipeline."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import synthdata
from .adaptation import (
    VARIANTS,
    EarlyStopping,
    HeadHistory,
    NumericalFailure,
    ParameterSet,
    PhaseSchedule,
    RoundConfig,
    RoundReport,
    ablation_variant,
    adapt,
    predict_masks,
    pretrain_base,
    train_dense_head,
)
from .backbone import ExtractorSpec, extract_batch
from .head import DenseTRF
from .metrics import MetricReport, evaluate_masks
from .slots import SlotConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str | None = None  # dataset directory; generated in memory when None
    sizes: tuple = (64, 256, 64)  # (n_labeled, n_unlabeled, n_test)
    source_seed: int = 0
    target_seed: int = 1
    aux_seed: int = 2
    use_aux_domain: bool = True


@dataclass
class ExperimentConfig:
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    slots: SlotConfig = field(default_factory=SlotConfig)
    round: RoundConfig = field(default_factory=RoundConfig)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain_steps: int = 2000
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    variant: str = "full"
    variants: list = field(default_factory=lambda: list(VARIANTS))
    output_dir: str = "runs/default"
    deterministic: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for v in [self.variant, *self.variants]:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"]["sizes"] = list(d["data"]["sizes"])
        return d

    def hash(self) -> str:
        """Hash of the experiment definition.

        Output location, threading mode, seed list and variant selection are
        left out: artifacts are already stored per seed and per variant.
        """
        d = self.to_dict()
        for key in ("output_dir", "deterministic", "seeds", "variant", "variants"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "extractor": ExtractorSpec,
    "slots": SlotConfig,
    "round": RoundConfig,
    "schedule": PhaseSchedule,
    "data": DataConfig,
}


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    kwargs = {}
    try:
        for name, cls in _SECTIONS.items():
            section = raw.pop(name, None) or {}
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            if name == "data" and "sizes" in section:
                section["sizes"] = tuple(section["sizes"])
            kwargs[name] = cls(**section)
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs.update(raw)
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text()) if path else {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def set_deterministic(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# -- data ------------------------------------------------------------------

def default_aux_spec(seed: int = 2) -> synthdata.DomainSpec:
    return synthdata.DomainSpec(
        name="aux", textures=synthdata.DEFAULT_TEXTURES,
        shape=synthdata.ShapeParams(smoothness=7.0, elongation=2.0, deformation=0.4),
        photometric=synthdata.Photometric(brightness=(-0.12, -0.06), tint=(-0.04, 0.02, 0.08)),
        seed=seed,
    )


@dataclass
class PreparedData:
    """Feature stacks and label stacks for every pool of a benchmark."""

    features: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    image_shape: tuple[int, int]
    num_classes: int
    manifest: dict
    sample_ids: dict[str, list[str]] = field(default_factory=dict)

    @property
    def base_pool(self) -> dict[str, np.ndarray]:
        pools = {"source": self.features["source_unlabeled"]}
        if "aux_unlabeled" in self.features:
            pools["aux"] = self.features["aux_unlabeled"]
        return pools


def build_bundle(cfg: DataConfig) -> synthdata.BenchmarkBundle:
    if cfg.root is not None and (Path(cfg.root) / "manifest.json").exists():
        return synthdata.load_benchmark_folder(cfg.root)
    return synthdata.make_shift_benchmark(
        synthdata.default_source_spec(cfg.source_seed),
        synthdata.default_target_spec(cfg.target_seed),
        tuple(cfg.sizes),
    )


def prepare_data(cfg: ExperimentConfig, bundle: synthdata.BenchmarkBundle | None = None) -> PreparedData:
    bundle = bundle or build_bundle(cfg.data)
    feats, labels, ids = {}, {}, {}
    for name, samples in bundle.pools().items():
        feats[name] = extract_batch([s.image for s in samples], cfg.extractor)
        ids[name] = [s.sample_id for s in samples]
        if samples[0].label is not None:
            labels[name] = np.stack([s.label for s in samples])
    manifest = dict(bundle.manifest)
    if cfg.data.use_aux_domain:
        aux = default_aux_spec(cfg.data.aux_seed)
        samples = synthdata.generate_pool(aux, cfg.data.sizes[1], synthdata.TRAIN_UNLABELED)
        feats["aux_unlabeled"] = extract_batch([s.image for s in samples], cfg.extractor)
        manifest["aux"] = aux.to_dict()
    first = bundle.source_labeled[0]
    return PreparedData(feats, labels, first.image.shape[:2], first.label.shape[-1], manifest, ids)


# -- stages ------------------------------------------------------------------

def new_model(cfg: ExperimentConfig, num_classes: int, seed: int, use_concat: bool = True) -> DenseTRF:
    torch.manual_seed(seed)
    return DenseTRF(cfg.extractor.out_channels, num_classes, cfg.slots, use_concat=use_concat)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "little")
    return np.random.default_rng([seed, tag])


def run_pretrain(cfg: ExperimentConfig, data: PreparedData, seed: int) -> tuple[DenseTRF, list[dict]]:
    model = new_model(cfg, data.num_classes, seed)
    rows = pretrain_base(model, data.base_pool, cfg.pretrain_steps, cfg.round, stage_rng(seed, "pretrain"))
    return model, rows


def run_adapt(cfg: ExperimentConfig, data: PreparedData, model: DenseTRF,
              seed: int) -> tuple[ParameterSet, list[RoundReport]]:
    return adapt(model, data.base_pool, data.features["target_unlabeled"], cfg.round,
                 stage_rng(seed, "adapt"))


def run_head(cfg: ExperimentConfig, data: PreparedData, variant: str, seed: int,
             init: ParameterSet | None) -> tuple[DenseTRF, HeadHistory]:
    spec = ablation_variant(variant)
    model = new_model(cfg, data.num_classes, seed, use_concat=spec.use_concat)
    if spec.init_pretrained:
        if init is None:
            raise ValueError(f"variant {variant!r} needs a pretrained parameter set")
        init.load_into(model)
    history = train_dense_head(
        model, data.features["source_labeled"], data.labels["source_labeled"], cfg.schedule, spec,
        rng=stage_rng(seed, "head"),
        validation=(data.features["source_test"], data.labels["source_test"]),
        early_stopping=EarlyStopping(halt=False),
    )
    return model, history


def evaluate(model: DenseTRF, data: PreparedData, pool: str) -> MetricReport:
    masks = predict_masks(model, data.features[pool], data.image_shape)
    return evaluate_masks(masks, data.labels[pool])


@dataclass
class SeedResult:
    seed: int
    reports: dict  # variant -> {"target_test": MetricReport, "source_test": MetricReport}
    histories: dict  # variant -> HeadHistory
    adapt_reports: list
    pretrain_rows: list
    models: dict = field(default_factory=dict)  # variant -> trained DenseTRF
    pretrained: ParameterSet | None = None
    adapted: ParameterSet | None = None


def run_seed(cfg: ExperimentConfig, data: PreparedData, seed: int, variants=None) -> SeedResult:
    variants = list(variants or cfg.variants)
    pretrained, pre_rows = run_pretrain(cfg, data, seed)
    pre_params = ParameterSet.from_model(pretrained)
    adapted, reports = None, []
    if any(ablation_variant(v).adapt for v in variants):
        adapted, reports = run_adapt(cfg, data, copy.deepcopy(pretrained), seed)
    results, histories, models = {}, {}, {}
    for v in variants:
        spec = ablation_variant(v)
        init = adapted if spec.adapt else (pre_params if spec.init_pretrained else None)
        try:
            model, history = run_head(cfg, data, v, seed, init)
        except NumericalFailure as exc:
            raise NumericalFailure(f"variant {v}: {exc}", exc.snapshot) from exc
        results[v] = {pool: evaluate(model, data, pool) for pool in ("target_test", "source_test")}
        histories[v] = history
        models[v] = model
        log.info("seed %d %-12s target DICE %.4f source DICE %.4f", seed, v,
                 results[v]["target_test"].mean_dice, results[v]["source_test"].mean_dice)
    return SeedResult(seed, results, histories, reports, pre_rows, models, pre_params, adapted)
