"""Command line front end for the full pipeline.

Stages write their artifacts into a run directory and later stages load
them back, so a whole study is a sequence of subcommands over one
``--out`` tree:

    gen-data -> pretrain -> golden -> train-predictor -> sweep -> report

Every stage derives its randomness from ``--seed`` through named child
generators, so rerunning a subcommand with the same config file and seed
reproduces its outputs byte for byte. Exit codes: 0 on success, 2 for a
bad or inconsistent configuration, 3 for a missing upstream artifact,
4 for a numeric failure (divergence, non-finite loss).

The config file is a JSON object whose sections mirror the library's
config dataclasses ("data", "vision", "text", "tune") plus small
stage-knob sections ("pretrain", "golden", "predictor", "bench"). Every
field is optional; defaults match the library.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from ..clipcore import TextConfig, VisionConfig, pretrain_contrastive
from ..clipcore.persist import load_weights, save_weights
from ..data import (
    DataConfig,
    DatasetSplit,
    few_shot_sample,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from ..errors import ConfigError, MissingArtifactError, NumericError, ParseError
from ..golden import GoldenCache, compute_split_scores
from ..nncore import SeededRng
from ..predictor import (
    PREDICTOR_KINDS,
    PredictorArch,
    PredictorTrainConfig,
    load_predictor,
    save_predictor,
    train_predictor,
)
from ..prompt import TuneConfig, load_prompts, save_prompts, tune_prompts
from ..pruning import STRATEGIES, make_schedule, schedule_tag
from .experiments import (
    DEFAULT_KEEP_RATES,
    DEFAULT_LOCATION_SETS,
    BenchInputs,
    ExperimentSpec,
    VariantInputs,
    run_arch_ablation,
    run_cross_dataset,
    run_keep_rate_sweep,
    run_location_ablation,
    run_tuning_grid,
)
from .report import emit_report, read_rows, write_rows

__all__ = ["main"]


# -- stage knobs ---------------------------------------------------------


@dataclass
class PretrainSettings:
    epochs: int = 30
    lr: float = 3e-4


@dataclass
class GoldenSettings:
    kind: str = "preservation"
    r: int = 3
    prune_layer: int = 2
    split: str = "predictor_train"


@dataclass
class PredictorSettings:
    kind: str = "mixmlp"
    hidden: int = 256
    heads: int = 4
    attach_layer: int = 2
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class BenchSettings:
    """Grid factors shared by the experiment subcommands."""

    keep_rates: tuple = DEFAULT_KEEP_RATES
    strategies: tuple = STRATEGIES
    seeds: tuple = (0, 1, 2)
    locations: tuple = (2, 3, 4, 5)
    location_sets: tuple = DEFAULT_LOCATION_SETS
    location_keep_rate: float = 0.6
    arch_kinds: tuple = PREDICTOR_KINDS
    arch_keep_rates: tuple = (0.9, 0.8, 0.7, 0.6, 0.5)
    arch_epochs: int = 15
    tuning_keep_rate: float = 0.6
    cross_keep_rate: float = 0.5
    variants: tuple = (0, 1)
    eval_images: int | None = None  # head slice of the test split; None = all


_SECTIONS = {
    "data": DataConfig,
    "vision": VisionConfig,
    "text": TextConfig,
    "pretrain": PretrainSettings,
    "golden": GoldenSettings,
    "predictor": PredictorSettings,
    "tune": TuneConfig,
    "bench": BenchSettings,
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build_section(cls, mapping: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"config section '{name}' has unknown fields {unknown}")
    kwargs = {k: _tuplify(v) for k, v in mapping.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"config section '{name}': {exc}") from exc


@dataclass
class RunConfig:
    data: DataConfig
    vision: VisionConfig
    text: TextConfig
    pretrain: PretrainSettings
    golden: GoldenSettings
    predictor: PredictorSettings
    tune: TuneConfig
    bench: BenchSettings


def load_config(path: str | None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(f"no config file at {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ParseError(f"config file {p} must hold a JSON object")
        unknown = sorted(set(raw) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"config file has unknown sections {unknown}")
        for name, section in raw.items():
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{name}' must be an object")
    built = {
        name: _build_section(cls, raw.get(name, {}), name)
        for name, cls in _SECTIONS.items()
    }
    config = RunConfig(**built)
    config.data.validate()

    # The vision tower's token geometry is fixed by the dataset; an explicit
    # conflicting value in the config is a mistake worth stopping on.
    n = config.data.grid_side**2
    pd = 3 * config.data.patch_pixels**2
    vs = raw.get("vision", {})
    if "num_patches" in vs and vs["num_patches"] != n:
        raise ConfigError(
            f"vision.num_patches={vs['num_patches']} but the data geometry "
            f"gives {config.data.grid_side}^2 = {n} patches"
        )
    if "patch_dim" in vs and vs["patch_dim"] != pd:
        raise ConfigError(
            f"vision.patch_dim={vs['patch_dim']} but the data geometry gives {pd}"
        )
    config.vision = replace(config.vision, num_patches=n, patch_dim=pd)
    return config


# -- shared artifact plumbing -------------------------------------------


def _dataset_id(variant: int, split: str) -> str:
    return f"variant{variant}-{split}"


def _named_split(splits: dict[str, DatasetSplit], name: str) -> DatasetSplit:
    if name not in splits:
        raise ConfigError(f"no split named '{name}', dataset has {sorted(splits)}")
    return splits[name]


def _head(split: DatasetSplit, limit: int | None) -> DatasetSplit:
    if limit is None or limit >= len(split.examples):
        return split
    if limit < 1:
        raise ConfigError(f"eval_images must be >= 1, got {limit}")
    return DatasetSplit(split.examples[:limit], split.role, split.class_names)


class Paths:
    """Locations of every artifact under one run directory."""

    def __init__(self, out: str, cache: str | None) -> None:
        self.out = Path(out)
        self.cache = Path(cache) if cache else self.out / "cache"
        self.data = self.out / "data"
        self.weights = self.out / "weights"
        self.predictor = self.out / "predictor"
        self.results = self.out / "results"
        self.reports = self.out / "reports"

    def prompts(self, mode: str) -> Path:
        return self.out / f"prompts_{mode}"

    def xfer(self, variant: int) -> Path:
        return self.out / "xfer" / f"variant{variant}"


@dataclass
class Stage:
    """Everything a subcommand needs, resolved once."""

    config: RunConfig
    paths: Paths
    seed: int
    jobs: int

    def rng(self, tag: str) -> SeededRng:
        return SeededRng(self.seed).child(tag)

    def load_splits(self) -> dict[str, DatasetSplit]:
        splits, _ = load_dataset(self.paths.data)
        return splits

    def golden_cache(self, split: str, variant: int | None = None) -> GoldenCache:
        g = self.config.golden
        v = self.config.data.variant if variant is None else variant
        return GoldenCache(
            self.paths.cache, _dataset_id(v, split), g.kind, g.r, g.prune_layer
        )

    def cached_scores(self, cache: GoldenCache, count: int):
        return [cache.load(i) for i in range(count)]

    def bench_inputs(self) -> BenchInputs:
        weights = load_weights(self.paths.weights)
        predictor, meta = load_predictor(self.paths.predictor)
        if meta["num_tokens"] != weights.vision.num_patches:
            raise ConfigError(
                f"predictor was built for {meta['num_tokens']} tokens, the "
                f"model has {weights.vision.num_patches}"
            )
        splits = self.load_splits()
        test = _head(_named_split(splits, "test"), self.config.bench.eval_images)
        golden = self.cached_scores(
            self.golden_cache("test"), len(test.examples)
        )
        return BenchInputs(
            weights=weights,
            predictor=predictor,
            split=test,
            golden=golden,
            patch_pixels=self.config.data.patch_pixels,
        )

    def write_table(self, name: str, rows) -> Path:
        path = write_rows(self.paths.results / f"{name}.csv", rows)
        print(f"wrote {len(rows)} rows to {path}")
        return path


# -- subcommands ---------------------------------------------------------


def cmd_gen_data(stage: Stage, args) -> int:
    cfg = stage.config.data
    if args.variant is not None:
        cfg = replace(cfg, variant=args.variant)
        cfg.validate()
    splits = generate_synthetic(cfg, stage.rng("data"))
    save_dataset(stage.paths.data, splits, cfg)
    counts = ", ".join(f"{role}={len(s)}" for role, s in sorted(splits.items()))
    print(f"wrote dataset to {stage.paths.data} ({counts})")
    return 0


def cmd_pretrain(stage: Stage, args) -> int:
    splits = stage.load_splits()
    p = stage.config.pretrain
    result = pretrain_contrastive(
        _named_split(splits, "pretrain"),
        stage.config.vision,
        stage.config.text,
        stage.rng("pretrain"),
        epochs=p.epochs,
        lr=p.lr,
    )
    save_weights(stage.paths.weights, result.weights)
    last = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(
        f"pretrained {p.epochs} epochs (final loss {last:.4f}), "
        f"weights at {stage.paths.weights}"
    )
    return 0


def cmd_golden(stage: Stage, args) -> int:
    weights = load_weights(stage.paths.weights)
    splits = stage.load_splits()
    name = args.split or stage.config.golden.split
    split = _named_split(splits, name)
    if name == "test":
        split = _head(split, stage.config.bench.eval_images)
    g = stage.config.golden
    cache = stage.golden_cache(name)
    compute_split_scores(
        weights,
        split,
        stage.config.data.patch_pixels,
        g.kind,
        r=g.r,
        prune_layer=g.prune_layer,
        cache=cache,
        jobs=stage.jobs,
    )
    print(f"scored {len(split.examples)} {name} images into {cache.dir}")
    return 0


def cmd_train_predictor(stage: Stage, args) -> int:
    weights = load_weights(stage.paths.weights)
    splits = stage.load_splits()
    p = stage.config.predictor
    split = _named_split(splits, "predictor_train")
    arch = PredictorArch(
        kind=p.kind,
        num_tokens=weights.vision.num_patches,
        dim=weights.vision.dim,
        hidden=p.hidden,
        heads=p.heads,
    )
    result = train_predictor(
        weights,
        split,
        stage.golden_cache("predictor_train"),
        arch,
        p.attach_layer,
        PredictorTrainConfig(epochs=p.epochs, lr=p.lr, batch_size=p.batch_size),
        stage.rng("predictor"),
    )
    save_predictor(
        stage.paths.predictor,
        result.predictor,
        stage.config.golden.kind,
        stage.config.data.grid_side,
    )
    last = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(
        f"trained {p.kind} ranking predictor (final loss {last:.4f}), "
        f"checkpoint at {stage.paths.predictor}"
    )
    return 0


def cmd_sweep(stage: Stage, args) -> int:
    inputs = stage.bench_inputs()
    b = stage.config.bench
    spec = ExperimentSpec(
        name="keep_rate_sweep",
        keep_rates=b.keep_rates,
        strategies=b.strategies,
        seeds=b.seeds,
        locations=b.locations,
    )
    rows = run_keep_rate_sweep(inputs, spec, jobs=stage.jobs)
    stage.write_table("keep_rate_sweep", rows)
    return 0


def cmd_ablate_locations(stage: Stage, args) -> int:
    inputs = stage.bench_inputs()
    b = stage.config.bench
    rows = run_location_ablation(
        inputs,
        b.location_sets,
        keep_rate=b.location_keep_rate,
        seeds=b.seeds,
        jobs=stage.jobs,
    )
    stage.write_table("location_ablation", rows)
    return 0


def cmd_ablate_arch(stage: Stage, args) -> int:
    inputs = stage.bench_inputs()
    splits = stage.load_splits()
    b = stage.config.bench
    p = stage.config.predictor
    rows = run_arch_ablation(
        inputs,
        stage.golden_cache("predictor_train"),
        _named_split(splits, "predictor_train"),
        kinds=b.arch_kinds,
        keep_rates=b.arch_keep_rates,
        seeds=b.seeds,
        train_config=PredictorTrainConfig(
            epochs=b.arch_epochs, lr=p.lr, batch_size=p.batch_size
        ),
        locations=b.locations,
        jobs=stage.jobs,
    )
    stage.write_table("arch_ablation", rows)
    return 0


def cmd_cross_dataset(stage: Stage, args) -> int:
    weights = load_weights(stage.paths.weights)
    cfg = stage.config
    b = cfg.bench
    if len(b.variants) < 2:
        raise ConfigError(f"bench.variants needs at least two entries, got {b.variants}")
    p = cfg.predictor
    arch = PredictorArch(
        kind=p.kind,
        num_tokens=weights.vision.num_patches,
        dim=weights.vision.dim,
        hidden=p.hidden,
        heads=p.heads,
    )
    variants = []
    for v in b.variants:
        root = stage.paths.xfer(v)
        try:
            splits, _ = load_dataset(root / "data")
        except MissingArtifactError:
            vcfg = replace(cfg.data, variant=v)
            vcfg.validate()
            splits = generate_synthetic(vcfg, stage.rng(f"data:variant{v}"))
            save_dataset(root / "data", splits, vcfg)
        train = _named_split(splits, "predictor_train")
        cache = stage.golden_cache("predictor_train", variant=v)
        compute_split_scores(
            weights,
            train,
            cfg.data.patch_pixels,
            cfg.golden.kind,
            r=cfg.golden.r,
            prune_layer=cfg.golden.prune_layer,
            cache=cache,
            jobs=stage.jobs,
        )
        try:
            predictor, _ = load_predictor(root / "predictor")
        except MissingArtifactError:
            result = train_predictor(
                weights,
                train,
                cache,
                arch,
                p.attach_layer,
                PredictorTrainConfig(epochs=p.epochs, lr=p.lr, batch_size=p.batch_size),
                stage.rng(f"xfer:{v}"),
            )
            predictor = result.predictor
            save_predictor(root / "predictor", predictor, cfg.golden.kind, cfg.data.grid_side)
        test = _head(_named_split(splits, "test"), b.eval_images)
        golden = compute_split_scores(
            weights,
            test,
            cfg.data.patch_pixels,
            cfg.golden.kind,
            r=cfg.golden.r,
            prune_layer=cfg.golden.prune_layer,
            cache=stage.golden_cache("test", variant=v),
            jobs=stage.jobs,
        )
        variants.append(
            VariantInputs(
                name=f"v{v}", predictor=predictor, split=test, golden=golden
            )
        )
    rows = run_cross_dataset(
        weights,
        variants,
        cfg.data.patch_pixels,
        keep_rate=b.cross_keep_rate,
        locations=b.locations,
        jobs=stage.jobs,
    )
    stage.write_table("cross_dataset", rows)
    return 0


def cmd_tune_prompts(stage: Stage, args) -> int:
    weights = load_weights(stage.paths.weights)
    predictor, _ = load_predictor(stage.paths.predictor)
    splits = stage.load_splits()
    cfg = stage.config
    modes = ("t_only", "t_and_v") if args.mode == "both" else (args.mode,)
    schedule = make_schedule(
        cfg.bench.tuning_keep_rate, weights.vision.num_patches, cfg.bench.locations
    )
    sample = few_shot_sample(
        _named_split(splits, "tune_train"), cfg.tune.shots, stage.rng("shots")
    )
    for mode in modes:
        tune_cfg = replace(cfg.tune, mode=mode)
        state, log = tune_prompts(
            weights,
            predictor,
            schedule,
            sample,
            tune_cfg,
            stage.rng(f"tune:{mode}"),
            patch_pixels=cfg.data.patch_pixels,
        )
        save_prompts(
            stage.paths.prompts(mode),
            state,
            mode=mode,
            shots=tune_cfg.shots,
            schedule=schedule,
        )
        last = log.epoch_losses[-1] if log.epoch_losses else float("nan")
        print(
            f"tuned {mode} prompts for {tune_cfg.epochs} epochs "
            f"(final loss {last:.4f}), saved to {stage.paths.prompts(mode)}"
        )
    return 0


def cmd_tuning_grid(stage: Stage, args) -> int:
    inputs = stage.bench_inputs()
    b = stage.config.bench
    schedule = make_schedule(
        b.tuning_keep_rate, inputs.weights.vision.num_patches, b.locations
    )
    states = {"none": None}
    for mode in ("t_only", "t_and_v"):
        state, meta = load_prompts(stage.paths.prompts(mode))
        if meta["mode"] != mode:
            raise ConfigError(
                f"prompt checkpoint at {stage.paths.prompts(mode)} was tuned "
                f"in mode '{meta['mode']}', expected '{mode}'"
            )
        if meta.get("schedule") != schedule_tag(schedule):
            raise ConfigError(
                f"prompt checkpoint at {stage.paths.prompts(mode)} was tuned "
                "against a different pruning schedule; re-run tune-prompts"
            )
        states[mode] = state
    rows = run_tuning_grid(
        inputs,
        states,
        keep_rate=b.tuning_keep_rate,
        seeds=b.seeds,
        locations=b.locations,
        jobs=stage.jobs,
    )
    stage.write_table("tuning_grid", rows)
    return 0


def cmd_report(stage: Stage, args) -> int:
    results = stage.paths.results
    files = sorted(results.glob("*.csv")) if results.is_dir() else []
    if not files:
        raise MissingArtifactError(
            f"no result tables under {results}; run an experiment subcommand first"
        )
    tables = {p.stem: read_rows(p) for p in files}
    written = emit_report(stage.paths.reports, tables, figures=not args.no_figures)
    for path in written:
        print(f"wrote {path}")
    return 0


# -- argument parsing ----------------------------------------------------


_COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset"),
    "pretrain": (cmd_pretrain, "train the dual encoder on the pretrain split"),
    "golden": (cmd_golden, "compute and cache reference token scores"),
    "train-predictor": (cmd_train_predictor, "fit the ranking predictor to the cache"),
    "sweep": (cmd_sweep, "accuracy and compute across keep rates and strategies"),
    "ablate-locations": (cmd_ablate_locations, "move the removal points, same budget"),
    "ablate-arch": (cmd_ablate_arch, "swap the predictor architecture"),
    "cross-dataset": (cmd_cross_dataset, "train and evaluate across dataset variants"),
    "tune-prompts": (cmd_tune_prompts, "fit recovery prompts against the pruned model"),
    "tuning-grid": (cmd_tuning_grid, "prompt modes crossed with pruned/unpruned"),
    "report": (cmd_report, "render tables, summary, plot data and figures"),
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", default=argparse.SUPPRESS, help="JSON config file (optional)"
    )
    common.add_argument(
        "--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)"
    )
    common.add_argument(
        "--out", default=argparse.SUPPRESS, help="run directory (default ./runs)"
    )
    common.add_argument(
        "--cache",
        default=argparse.SUPPRESS,
        help="golden score cache root (default <out>/cache)",
    )
    common.add_argument(
        "--jobs", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)"
    )

    parser = argparse.ArgumentParser(
        prog="patchprune",
        parents=[common],
        description="token pruning pipeline: data, training, pruning sweeps, reports",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (_, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "gen-data":
            p.add_argument(
                "--variant", type=int, default=None, help="palette variant override"
            )
        if name == "golden":
            p.add_argument(
                "--split", default=None, help="which split to score (default from config)"
            )
        if name == "tune-prompts":
            p.add_argument(
                "--mode",
                choices=("t_only", "t_and_v", "both"),
                default="both",
                help="which prompt banks to fit",
            )
        if name == "report":
            p.add_argument(
                "--no-figures", action="store_true", help="skip the rendered images"
            )
    return parser


def _dispatch(argv: Sequence[str] | None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_help()
        return 2
    config = load_config(getattr(ns, "config", None))
    stage = Stage(
        config=config,
        paths=Paths(getattr(ns, "out", "runs"), getattr(ns, "cache", None)),
        seed=getattr(ns, "seed", 0),
        jobs=max(1, getattr(ns, "jobs", 1)),
    )
    handler = _COMMANDS[ns.command][0]
    return handler(stage, ns)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return _dispatch(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
