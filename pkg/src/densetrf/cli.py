"""Command-line experiment runner.

Stages form a small DAG::

    generate -> pretrain-base -> adapt -> train-head -> evaluate
    generate -> ablate            (runs every variant end to end)

Everything lands under ``--output-dir``: the resolved config and its hash,
the dataset (unless ``data.root`` points elsewhere), one ``seed_<n>/``
folder per seed with checkpoints and history CSVs, result CSVs and plots.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats, pipeline, synthdata
from .adaptation import (
    VARIANTS,
    NumericalFailure,
    ParameterSet,
    ablation_variant,
    load_checkpoint,
    load_model_state,
    model_state,
    predict_logits,
    read_history,
    save_checkpoint,
    write_history,
)
from .metrics import MetricReport, aggregate_runs, evaluate_masks
from .pipeline import ConfigError, ExperimentConfig
from .slots import NonFiniteError

log = logging.getLogger("densetrf")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

EVAL_POOLS = ("target_test", "source_test")
RESULT_COLUMNS = ("dataset", "variant", "seed", "class", "dice", "iou", "hd")


class MissingPrerequisite(RuntimeError):
    pass


class OutputCollision(ConfigError):
    pass


# -- context ---------------------------------------------------------------

@dataclass
class Context:
    cfg: ExperimentConfig
    out: Path
    overwrite: bool = False
    _data: pipeline.PreparedData | None = None

    @property
    def config_hash(self) -> str:
        return self.cfg.hash()

    @property
    def data_root(self) -> Path:
        return Path(self.cfg.data.root) if self.cfg.data.root else self.out / "data"

    def seed_dir(self, seed: int) -> Path:
        d = self.out / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def plots_dir(self) -> Path:
        d = self.out / "plots"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def meta(self, stage: str, seed: int, **extra) -> dict:
        return {"stage": stage, "seed": seed, "config_hash": self.config_hash, **extra}

    def data(self) -> pipeline.PreparedData:
        if self._data is None:
            root = self.data_root
            if not (root / "manifest.json").exists():
                raise MissingPrerequisite(f"dataset manifest {root / 'manifest.json'} (run `generate` first)")
            cfg = pipeline.config_from_dict(self.cfg.to_dict())
            cfg.data.root = str(root)
            log.info("loading dataset from %s", root)
            self._data = pipeline.prepare_data(cfg)
        return self._data


def resolve_config(args) -> ExperimentConfig:
    cfg = pipeline.load_config(args.config)
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.deterministic:
        cfg.deterministic = True
    if args.variant is not None:
        if args.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {args.variant!r}; expected one of {VARIANTS}")
        cfg.variant = args.variant
    return cfg


def echo_config(ctx: Context) -> None:
    ctx.out.mkdir(parents=True, exist_ok=True)
    pipeline.dump_config(ctx.cfg, ctx.out / "config.yaml")
    (ctx.out / "config_hash.txt").write_text(ctx.config_hash + "\n")
    log.info("config hash %s, output %s", ctx.config_hash, ctx.out)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} ({hint})")
    return path


def _load_params(ctx: Context, path: Path):
    entries, meta = load_checkpoint(path)
    found = meta.get("config_hash")
    if found is not None and found != ctx.config_hash:
        log.warning("config hash mismatch: %s was written under %s, current config is %s",
                    path, found, ctx.config_hash)
    return entries, meta


# -- generate ----------------------------------------------------------------

def _expected_manifest(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    return synthdata.benchmark_manifest(synthdata.default_source_spec(d.source_seed),
                                        synthdata.default_target_spec(d.target_seed), tuple(d.sizes))


def _verify_dataset(root: Path, manifest: dict) -> None:
    names = {"source": manifest["source"]["name"], "target": manifest["target"]["name"]}
    for pool, count in manifest["counts"].items():
        domain, split = pool.split("_", 1)
        split = {"labeled": synthdata.TRAIN_LABELED, "unlabeled": synthdata.TRAIN_UNLABELED,
                 "test": synthdata.TEST}[split]
        folder = root / names[domain] / split / "images"
        found = len(list(folder.glob("*.png"))) if folder.exists() else 0
        if found != count:
            raise MissingPrerequisite(f"{folder}: expected {count} images, found {found}")


def cmd_generate(ctx: Context) -> int:
    root = ctx.data_root
    expected = _expected_manifest(ctx.cfg)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        existing = synthdata.read_manifest(root)
        if existing == json.loads(json.dumps(expected)) and not ctx.overwrite:
            _verify_dataset(root, existing)
            log.info("dataset at %s matches the config manifest; verified, not regenerated", root)
            return EXIT_OK
        if not ctx.overwrite:
            raise OutputCollision(f"{root} holds a different dataset; pass --overwrite to replace it")
    elif root.exists() and any(root.iterdir()) and not ctx.overwrite:
        raise OutputCollision(f"{root} exists and is not a generated dataset; pass --overwrite")
    if root.exists() and ctx.overwrite:
        shutil.rmtree(root)
    d = ctx.cfg.data
    bundle = synthdata.make_shift_benchmark(synthdata.default_source_spec(d.source_seed),
                                            synthdata.default_target_spec(d.target_seed), tuple(d.sizes))
    synthdata.write_benchmark(bundle, root)
    check = synthdata.check_shift(bundle.source_labeled + bundle.source_test, bundle.target_test,
                                  ctx.cfg.extractor.patch_size)
    (root / "shift_check.json").write_text(json.dumps({
        "texture_divergence": check.texture_divergence,
        "eccentricity": list(check.eccentricity),
        "eccentricity_gap": check.eccentricity_gap,
        "passed": check.passed,
        "config_hash": ctx.config_hash,
    }, indent=2))
    level = logging.INFO if check.passed else logging.WARNING
    log.log(level, "benchmark check %s: texture divergence max %.4f, eccentricity gap %.3f",
            "passed" if check.passed else "FAILED", max(check.texture_divergence), check.eccentricity_gap)
    log.info("wrote dataset to %s", root)
    return EXIT_OK


# -- training stages -------------------------------------------------------

def cmd_pretrain_base(ctx: Context) -> int:
    data = ctx.data()
    for seed in ctx.cfg.seeds:
        model, rows = pipeline.run_pretrain(ctx.cfg, data, seed)
        sd = ctx.seed_dir(seed)
        save_checkpoint(sd / "base.ckpt", ParameterSet.from_model(model), ctx.meta("pretrain-base", seed))
        write_history(sd / "history_pretrain.csv", rows)
        log.info("seed %d: base branch pretrained, final recon %.5f", seed, rows[-1]["loss_recon"] if rows else math.nan)
    return EXIT_OK


def cmd_adapt(ctx: Context) -> int:
    data = ctx.data()
    for seed in ctx.cfg.seeds:
        sd = ctx.seed_dir(seed)
        entries, _ = _load_params(ctx, _require(sd / "base.ckpt", "run `pretrain-base` first"))
        model = pipeline.new_model(ctx.cfg, data.num_classes, seed)
        ParameterSet(entries).load_into(model)
        merged, reports = pipeline.run_adapt(ctx.cfg, data, model, seed)
        save_checkpoint(sd / "adapted.ckpt", merged,
                        ctx.meta("adapt", seed, round=ctx.cfg.round.total_rounds))
        write_history(sd / "history_adapt.csv", [row for r in reports for row in r.rows])
        log.info("seed %d: %d adaptation rounds done", seed, len(reports))
    return EXIT_OK


def _head_init(ctx: Context, seed: int, variant: str):
    spec = ablation_variant(variant)
    sd = ctx.seed_dir(seed)
    if spec.adapt:
        path = _require(sd / "adapted.ckpt", "run `adapt` first")
    elif spec.init_pretrained:
        path = _require(sd / "base.ckpt", "run `pretrain-base` first")
    else:
        return None
    return ParameterSet(_load_params(ctx, path)[0])


def _write_validation(path: Path, history) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration", "mean_dice"))
        for it, score in history.validation:
            w.writerow((it, repr(score)))


def _save_head(ctx: Context, seed: int, variant: str, model, history) -> None:
    sd = ctx.seed_dir(seed)
    save_checkpoint(sd / f"head_{variant}.ckpt", model_state(model),
                    ctx.meta("train-head", seed, variant=variant, phase=3,
                             early_stop_iteration=history.early_stop_iteration))
    write_history(sd / f"history_head_{variant}.csv", history.rows)
    _write_validation(sd / f"validation_{variant}.csv", history)


def cmd_train_head(ctx: Context) -> int:
    data = ctx.data()
    variant = ctx.cfg.variant
    for seed in ctx.cfg.seeds:
        init = _head_init(ctx, seed, variant)
        model, history = pipeline.run_head(ctx.cfg, data, variant, seed, init)
        _save_head(ctx, seed, variant, model, history)
        last = history.validation[-1][1] if history.validation else math.nan
        log.info("seed %d: head (%s) trained, validation DICE %.4f", seed, variant, last)
    return EXIT_OK


# -- evaluation --------------------------------------------------------------

def default_predictor(model, data: pipeline.PreparedData, pool: str) -> np.ndarray:
    """Logits (N, Hi, Wi, C) for every sample of ``pool``."""
    return predict_logits(model, data.features[pool], data.image_shape)


def _export_predictions(out_dir: Path, ids: list[str], logits: np.ndarray, patch_size: int) -> None:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    for sid, lg in zip(ids, logits):
        formats.write_grid(out_dir / f"{sid}.dtrfp", lg, patch_size, formats.PREDICTION_MAGIC)
        for c in range(lg.shape[-1]):
            Image.fromarray(((lg[..., c] > 0) * 255).astype(np.uint8)).save(out_dir / f"{sid}_class{c + 1}.png")


def result_rows(dataset: str, variant: str, seed: int, report: MetricReport) -> list[dict]:
    return [dict(dataset=dataset, variant=variant, seed=seed, class_=c + 1, dice=d, iou=j, hd=h)
            for c, (d, j, h) in enumerate(zip(report.dice, report.iou, report.hd))]


def write_results(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow((r["dataset"], r["variant"], r["seed"], r["class_"],
                        repr(r["dice"]), repr(r["iou"]), repr(r["hd"])))


def write_summary(path: Path, per_seed: dict) -> None:
    """``per_seed`` maps (dataset, variant) -> {seed: MetricReport}.

    One row per seed (class means) followed by an ``all`` row with the
    mean and sample standard deviation over seeds.
    """
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("dataset", "variant", "seed", "dice", "dice_std", "iou", "iou_std", "hd", "hd_std", "n"))
        for (dataset, variant), reports in per_seed.items():
            for seed, rep in reports.items():
                w.writerow((dataset, variant, seed, repr(rep.mean_dice), "", repr(rep.mean_iou), "",
                            repr(rep.mean_hd), "", 1))
            agg = aggregate_runs(list(reports.values()))
            w.writerow((dataset, variant, "all", repr(agg.mean["dice"]), repr(agg.std["dice"]),
                        repr(agg.mean["iou"]), repr(agg.std["iou"]), repr(agg.mean["hd"]),
                        repr(agg.std["hd"]), agg.n))


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(path: Path, histories: dict[str, list[dict]]) -> None:
    plt = _plt()
    fig, axes = plt.subplots(1, len(histories), figsize=(4.5 * len(histories), 3.4), squeeze=False)
    for ax, (title, rows) in zip(axes[0], histories.items()):
        by_branch: dict[str, list[float]] = {}
        for r in rows:
            if r["loss_total"] is not None:
                by_branch.setdefault(r["branch"], []).append(r["loss_total"])
        for branch, vals in by_branch.items():
            ax.plot(np.arange(len(vals)), vals, label=branch, lw=0.8)
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    axes[0][0].set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_metric_bars(path: Path, per_seed: dict, metric: str = "dice") -> None:
    """Grouped bars: x = dataset, one bar per variant, error bars = std over seeds."""
    plt = _plt()
    datasets = sorted({k[0] for k in per_seed})
    variants = [v for v in VARIANTS if any(k[1] == v for k in per_seed)]
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(datasets) * max(len(variants), 1) * 0.5, 3.6))
    for i, v in enumerate(variants):
        means, stds = [], []
        for dset in datasets:
            reports = list(per_seed.get((dset, v), {}).values())
            if not reports:
                means.append(np.nan)
                stds.append(0.0)
                continue
            agg = aggregate_runs(reports)
            means.append(agg.mean[metric])
            stds.append(agg.std[metric])
        x = np.arange(len(datasets)) + (i - (len(variants) - 1) / 2) * width
        ax.bar(x, means, width, yerr=stds, capsize=3, label=v)
    ax.set_xticks(np.arange(len(datasets)))
    ax.set_xticklabels(datasets)
    ax.set_ylabel(metric.upper())
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _histories_for_plot(sd: Path, variant: str) -> dict[str, list[dict]]:
    out = {}
    for title, name in (("pretrain", "history_pretrain.csv"), ("adapt", "history_adapt.csv"),
                        (f"head ({variant})", f"history_head_{variant}.csv")):
        if (sd / name).exists():
            out[title] = read_history(sd / name)
    return out


def cmd_evaluate(ctx: Context, predictor=None) -> int:
    """Score the trained head of ``cfg.variant`` on both test pools.

    ``predictor(model, data, pool) -> logits`` replaces model inference; tests
    use it to inject known predictions.
    """
    predictor = predictor or default_predictor
    data = ctx.data()
    variant = ctx.cfg.variant
    spec = ablation_variant(variant)
    rows, per_seed = [], {}
    for seed in ctx.cfg.seeds:
        sd = ctx.seed_dir(seed)
        entries, _ = _load_params(ctx, _require(sd / f"head_{variant}.ckpt", "run `train-head` first"))
        model = pipeline.new_model(ctx.cfg, data.num_classes, seed, use_concat=spec.use_concat)
        load_model_state(model, entries)
        for pool in EVAL_POOLS:
            logits = predictor(model, data, pool)
            report = evaluate_masks(logits > 0, data.labels[pool])
            rows.extend(result_rows(pool, variant, seed, report))
            per_seed.setdefault((pool, variant), {})[seed] = report
            _export_predictions(sd / f"predictions_{variant}" / pool, data.sample_ids[pool], logits,
                                ctx.cfg.extractor.patch_size)
            log.info("seed %d %s %s: DICE %.4f IoU %.4f HD %.2f", seed, variant, pool,
                     report.mean_dice, report.mean_iou, report.mean_hd)
        histories = _histories_for_plot(sd, variant)
        if histories:
            plot_loss_curves(ctx.plots_dir() / f"loss_seed{seed}_{variant}.png", histories)
    write_results(ctx.out / f"results_{variant}.csv", rows)
    write_summary(ctx.out / f"results_{variant}_summary.csv", per_seed)
    plot_metric_bars(ctx.plots_dir() / f"metrics_{variant}.png", per_seed)
    return EXIT_OK


# -- ablation --------------------------------------------------------------

@dataclass
class OrderingCheck:
    criterion: str
    passed: bool
    detail: str


def ordering_checks(per_seed: dict) -> list[OrderingCheck]:
    """Directional checks over per-seed class-mean DICE.

    ``per_seed`` maps (dataset, variant) -> {seed: MetricReport}.
    """
    def dices(dataset, variant):
        reps = per_seed.get((dataset, variant), {})
        return {s: r.mean_dice for s, r in reps.items()}

    def fmt(vals):
        return ", ".join(f"{s}:{v:.4f}" for s, v in sorted(vals.items()))

    checks = []
    full = dices("target_test", "full")
    for label, other, strict in (("adaptation helps (full > sa_no_adapt)", "sa_no_adapt", True),
                                 ("concatenation helps (full >= no_concat)", "no_concat", False),
                                 ("slot attention helps (full >= no_sa)", "no_sa", False)):
        theirs = dices("target_test", other)
        if not full or not theirs:
            checks.append(OrderingCheck(label, False, "variant missing"))
            continue
        a, b = float(np.mean(list(full.values()))), float(np.mean(list(theirs.values())))
        ok = a > b if strict else a >= b
        checks.append(OrderingCheck(label, ok, f"target DICE full {a:.4f} [{fmt(full)}] vs {other} {b:.4f} [{fmt(theirs)}]"))
    src, tgt = dices("source_test", "no_sa"), dices("target_test", "no_sa")
    if src and tgt:
        a, b = float(np.mean(list(src.values()))), float(np.mean(list(tgt.values())))
        seeds_ok = sum(src[s] > tgt[s] for s in src if s in tgt)
        checks.append(OrderingCheck("domain gap (source-trained baseline: source > target)",
                                    a > b and seeds_ok == len(src),
                                    f"source {a:.4f} vs target {b:.4f}; {seeds_ok}/{len(src)} seeds positive"))
    else:
        checks.append(OrderingCheck("domain gap (source-trained baseline: source > target)", False,
                                    "no_sa variant missing"))
    return checks


def write_ablation_table(path: Path, per_seed: dict, dataset: str = "target_test") -> list[dict]:
    table = []
    for v in VARIANTS:
        reports = list(per_seed.get((dataset, v), {}).values())
        if not reports:
            continue
        agg = aggregate_runs(reports)
        table.append(dict(variant=v, reference=v == "full", dice_mean=agg.mean["dice"], dice_std=agg.std["dice"],
                          hd_mean=agg.mean["hd"], hd_std=agg.std["hd"], n=agg.n))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "reference", "dice_mean", "dice_std", "hd_mean", "hd_std", "n"))
        for r in table:
            w.writerow((r["variant"], int(r["reference"]), repr(r["dice_mean"]), repr(r["dice_std"]),
                        repr(r["hd_mean"]), repr(r["hd_std"]), r["n"]))
    return table


def write_ablation_report(path: Path, table: list[dict], checks: list[OrderingCheck], config_hash: str) -> None:
    lines = [f"# Ablation on target_test (config {config_hash})", "",
             "| variant | DICE | HD (px) |", "|---|---|---|"]
    for r in table:
        name = f"**{r['variant']}** (reference)" if r["reference"] else r["variant"]
        lines.append(f"| {name} | {r['dice_mean']:.4f} ± {r['dice_std']:.4f} | "
                     f"{r['hd_mean']:.2f} ± {r['hd_std']:.2f} |")
    lines += ["", "## Ordering checks", ""]
    for c in checks:
        lines.append(f"- [{'PASS' if c.passed else 'FAIL'}] {c.criterion}: {c.detail}")
    path.write_text("\n".join(lines) + "\n")


def cmd_ablate(ctx: Context) -> int:
    data = ctx.data()
    variants = list(VARIANTS)
    rows, per_seed = [], {}
    for seed in ctx.cfg.seeds:
        sd = ctx.seed_dir(seed)
        try:
            res = pipeline.run_seed(ctx.cfg, data, seed, variants)
        except NumericalFailure as exc:
            raise NumericalFailure(f"seed {seed}: {exc}", exc.snapshot) from exc
        save_checkpoint(sd / "base.ckpt", res.pretrained, ctx.meta("pretrain-base", seed))
        write_history(sd / "history_pretrain.csv", res.pretrain_rows)
        if res.adapted is not None:
            save_checkpoint(sd / "adapted.ckpt", res.adapted,
                            ctx.meta("adapt", seed, round=ctx.cfg.round.total_rounds))
            write_history(sd / "history_adapt.csv", [row for r in res.adapt_reports for row in r.rows])
        for v in variants:
            _save_head(ctx, seed, v, res.models[v], res.histories[v])
            for pool in EVAL_POOLS:
                report = res.reports[v][pool]
                rows.extend(result_rows(pool, v, seed, report))
                per_seed.setdefault((pool, v), {})[seed] = report
        plot_loss_curves(ctx.plots_dir() / f"loss_seed{seed}_full.png", _histories_for_plot(sd, "full"))
        log.info("seed %d: %s", seed, ", ".join(
            f"{v} {res.reports[v]['target_test'].mean_dice:.4f}" for v in variants))
    write_results(ctx.out / "ablation_results.csv", rows)
    write_summary(ctx.out / "ablation_summary.csv", per_seed)
    table = write_ablation_table(ctx.out / "ablation_table.csv", per_seed)
    checks = ordering_checks(per_seed)
    write_ablation_report(ctx.out / "ablation_report.md", table, checks, ctx.config_hash)
    plot_metric_bars(ctx.plots_dir() / "ablation_dice.png", per_seed, "dice")
    plot_metric_bars(ctx.plots_dir() / "ablation_hd.png", per_seed, "hd")
    for c in checks:
        log.info("[%s] %s: %s", "PASS" if c.passed else "FAIL", c.criterion, c.detail)
    return EXIT_OK


# -- entry point -------------------------------------------------------------

COMMANDS = {
    "generate": cmd_generate,
    "pretrain-base": cmd_pretrain_base,
    "adapt": cmd_adapt,
    "train-head": cmd_train_head,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML config; omitted fields take defaults")
    common.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
    common.add_argument("--seed", type=int, default=None, help="run this single seed instead of cfg.seeds")
    common.add_argument("--variant", default=None, help=f"ablation variant for train-head/evaluate {VARIANTS}")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    common.add_argument("--overwrite", action="store_true", help="replace an existing dataset")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="densetrf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _setup_logging(out: Path | None, verbose: bool) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    log.setLevel(level)
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(fmt)
    log.addHandler(stream)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "run.log")
        fh.setFormatter(fmt)
        log.addHandler(fh)
    log.propagate = False


def main(argv=None, predictor=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        _setup_logging(None, args.verbose)
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    ctx = Context(cfg, Path(cfg.output_dir), overwrite=args.overwrite)
    _setup_logging(ctx.out, args.verbose)
    if cfg.deterministic:
        pipeline.set_deterministic(True)
    try:
        echo_config(ctx)
        print(f"config_hash={ctx.config_hash}")
        command = COMMANDS[args.command]
        if command is cmd_evaluate:
            return command(ctx, predictor)
        return command(ctx)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        log.error("missing prerequisite: %s", exc)
        return EXIT_MISSING
    except (NumericalFailure, NonFiniteError, FloatingPointError) as exc:
        snap = getattr(exc, "snapshot", None)
        log.error("numerical failure: %s%s", exc, f" snapshot={snap}" if snap else "")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
