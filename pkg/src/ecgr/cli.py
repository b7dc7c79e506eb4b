"""Command-line surface: config loading, per-stage sub-commands, run directories.

Sub-commands map onto the pipeline stages: ``train-classifier`` fits a
source classifier, ``offline`` prepares generators and QA-filtered synthetic
sets, ``continual`` adapts across the dataset sequence under the configured
strategies, and ``report`` renders tables and plot data.

Exit codes: 0 success, 1 validation error, 2 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 fallback
    import tomli as tomllib

import torch

from . import checkpoint as ckpt
from .data import DataError, EmotionClass, write_manifest
from .gan import GanConfig, GanDivergenceError, save_contact_sheet
from .metrics import (AggregateResult, MetricsError, TABLE_FORMATS,
                      aggregate_replications, emit_report)
from .pipeline import (ECGR_STRATEGIES, OfflineArtifacts, PipelineError, PipelinePlan,
                       Strategy, derive_seed, load_domains, replicate,
                       run_continual_stage, run_offline_stage, synthesize_collection)
from .qa import QaConfig, rejected_samples
from .training import TrainConfig, TrainingDivergedError, train_classifier
from .models import build_classifier, count_parameters

logger = logging.getLogger("ecgr.cli")

OUTPUT_ROOT_ENV = "ECGR_RUNS_DIR"
RUN_SUBDIRS = ("checkpoints", "synthetic", "qa_reports", "metrics", "logs")


class ConfigError(ValueError):
    """Raised for unreadable or inconsistent run configurations."""


@dataclass
class RunConfig:
    """A parsed plan plus paths and run-directory bookkeeping."""

    run_id: str
    output_root: Path
    dataset_roots: dict[str, Path]
    plan: PipelinePlan
    strategies: list[str] = field(default_factory=list)
    offline_datasets: list[str] = field(default_factory=list)
    device: str = "cpu"
    verbose: bool = False

    @property
    def run_dir(self) -> Path:
        return self.output_root / self.run_id


def _build_plan(doc: dict, seed_override: int | None) -> PipelinePlan:
    def section(name: str) -> dict:
        value = doc.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section [{name}] must be a table/mapping")
        return value

    base_seed = int(doc.get("base_seed", 0)) if seed_override is None else seed_override
    try:
        return PipelinePlan(
            sequence=tuple(doc["sequence"]),
            image_size=int(doc.get("image_size", 48)),
            test_fraction=float(doc.get("test_fraction", 0.2)),
            gan=GanConfig(**section("gan")),
            qa=QaConfig(**section("qa")),
            train=TrainConfig(**section("train")),
            classifier_width=int(doc.get("classifier_width", 64)),
            synthetic_per_class=int(doc.get("synthetic_per_class", 0)),
            replications=int(doc.get("replications", 1)),
            base_seed=base_seed,
        )
    except KeyError as exc:
        raise ConfigError(f"config is missing required key: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_run_config(path: str | Path, *, seed_override: int | None = None) -> RunConfig:
    """Parse a TOML or YAML plan file and validate dataset roots up front."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".toml":
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    elif path.suffix in (".yaml", ".yml"):
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    else:
        raise ConfigError(f"unsupported config format {path.suffix!r}; use .toml or .yaml")
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a table/mapping, got {type(doc).__name__}")

    plan = _build_plan(doc, seed_override)

    raw_roots = doc.get("datasets", {})
    roots: dict[str, Path] = {}
    for name in plan.sequence:
        if name not in raw_roots:
            raise ConfigError(f"config [datasets] has no root path for {name!r}")
        root = (path.parent / raw_roots[name]).resolve() \
            if not Path(raw_roots[name]).is_absolute() else Path(raw_roots[name])
        if not root.is_dir():
            raise ConfigError(f"dataset root for {name!r} does not exist: {root}")
        roots[name] = root

    strategies = [Strategy.from_string(s).value for s in doc.get("strategies", [])]
    offline_datasets = list(doc.get("offline_datasets", []))
    for name in offline_datasets:
        if name not in plan.sequence:
            raise ConfigError(f"offline_datasets names {name!r}, which is not in the sequence")

    output_root = Path(os.environ.get(OUTPUT_ROOT_ENV) or doc.get("output_root", "runs"))
    if not output_root.is_absolute():
        output_root = path.parent / output_root

    device = str(doc.get("device", "cpu"))
    if device != "cpu" and not torch.cuda.is_available():
        logger.warning("device %r requested but no accelerator is available; using cpu",
                       device)
        device = "cpu"

    return RunConfig(run_id=str(doc.get("run_id", "run")), output_root=output_root,
                     dataset_roots=roots, plan=plan, strategies=strategies,
                     offline_datasets=offline_datasets, device=device)


def _ensure_run_dirs(cfg: RunConfig) -> None:
    for sub in RUN_SUBDIRS:
        (cfg.run_dir / sub).mkdir(parents=True, exist_ok=True)


def _refuse_existing(paths: list[Path], force: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        listing = ", ".join(str(p) for p in existing[:4])
        raise ConfigError(f"refusing to overwrite existing artifacts ({listing}"
                          f"{', ...' if len(existing) > 4 else ''}); pass --force to redo")


def _atomic_write_text(path: Path, text: str) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def _update_manifest(cfg: RunConfig, paths: list[Path]) -> None:
    """Record a sha256 digest per artifact, relative to the run directory.

    Timing logs under logs/ are excluded; everything else is digest-tracked.
    """
    manifest_path = cfg.run_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    for p in paths:
        rel = p.relative_to(cfg.run_dir).as_posix()
        if rel.startswith("logs/"):
            continue
        manifest[rel] = ckpt.file_digest(p)
    _atomic_write_text(manifest_path,
                       json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_named_domains(cfg: RunConfig, names: list[str]):
    return load_domains([(n, cfg.dataset_roots[n]) for n in names], cfg.plan)


def cmd_train_classifier(cfg: RunConfig, dataset_name: str, force: bool = False) -> int:
    if dataset_name not in cfg.plan.sequence:
        raise ConfigError(f"dataset {dataset_name!r} is not in the configured sequence")
    _ensure_run_dirs(cfg)
    out_path = cfg.run_dir / "checkpoints" / f"classifier_{dataset_name}.ckpt"
    _refuse_existing([out_path], force)

    (domain,) = _load_named_domains(cfg, [dataset_name])
    seed = derive_seed(cfg.plan.base_seed, "classifier", dataset_name)
    model = build_classifier(len(EmotionClass), cfg.plan.image_size,
                             width=cfg.plan.classifier_width, seed=seed)
    train_cfg = replace(cfg.plan.train, seed=seed)
    model, log = train_classifier(model, domain.train, train_cfg)

    ckpt.save_checkpoint(model, out_path, config_hash=ckpt.config_hash(train_cfg),
                         seed=seed)
    log.to_csv(cfg.run_dir / "logs" / f"train_{dataset_name}.csv")
    _update_manifest(cfg, [out_path])
    print(f"trained classifier for {dataset_name}: {count_parameters(model):,} "
          f"parameters -> {out_path}")
    return 0


def _persist_offline(cfg: RunConfig, domains, artifacts: OfflineArtifacts) -> list[Path]:
    written: list[Path] = []
    by_name = {d.name: d for d in domains}
    for name, classifier in artifacts.classifiers.items():
        path = cfg.run_dir / "checkpoints" / f"classifier_{name}.ckpt"
        seed = derive_seed(cfg.plan.base_seed, "classifier", name)
        ckpt.save_checkpoint(classifier, path, seed=seed,
                             config_hash=ckpt.config_hash(replace(cfg.plan.train, seed=seed)))
        written.append(path)
        artifacts.train_logs[name].to_csv(cfg.run_dir / "logs" / f"train_{name}.csv")

        for cls, gen in artifacts.generators[name].items():
            label = EmotionClass(cls).label
            gpath = cfg.run_dir / "checkpoints" / f"wgangp_{name}_{label}.ckpt"
            gan_cfg = replace(cfg.plan.gan,
                              seed=derive_seed(cfg.plan.base_seed, "gan", name, cls))
            ckpt.save_checkpoint(gen, gpath, seed=gan_cfg.seed,
                                 config_hash=ckpt.config_hash(gan_cfg))
            written.append(gpath)
            artifacts.gan_logs[(name, cls)].to_csv(
                cfg.run_dir / "logs" / f"gan_{name}_{label}.csv")

        entry = artifacts.collection.entries[name]
        manifest_path = cfg.run_dir / "synthetic" / f"{name}_manifest.csv"
        rows = ["dataset,class_id,source_id,accepted,weight"]
        rows += [",".join(str(v) for v in row) for row in entry.manifest_rows()]
        _atomic_write_text(manifest_path, "\n".join(rows) + "\n")
        written.append(manifest_path)

        report_path = entry.report.to_json(cfg.run_dir / "qa_reports" / f"{name}.json")
        written.append(report_path)

        domain = by_name[name]
        for cls, class_set in entry.classes.items():
            label = EmotionClass(cls).label
            reference = domain.train.class_slice(cls).samples[0].image
            sheet = save_contact_sheet(
                cfg.run_dir / "synthetic" / "sheets" / f"{name}_{label}.png",
                class_set.raw[:8], reference=reference)
            written.append(sheet)
            if not class_set.accepted:
                print(f"warning: QA rejected every {label} candidate for {name}")

        rejected = rejected_samples(entry.raw_images(), entry.report)
        if rejected:
            sheet = save_contact_sheet(
                cfg.run_dir / "qa_reports" / f"{name}_rejected.png", rejected[:32])
            written.append(sheet)
    return written


def cmd_offline(cfg: RunConfig, jobs: int = 1, dry_run: bool = False,
                force: bool = False) -> int:
    names = cfg.offline_datasets or list(cfg.plan.sequence)
    if dry_run:
        print(f"offline plan for run {cfg.run_id!r}:")
        for name in names:
            print(f"  {name}: train classifier, train {len(EmotionClass)} per-class "
                  f"WGAN-GP generators, generate + QA-filter candidates")
        return 0

    _ensure_run_dirs(cfg)
    _refuse_existing([cfg.run_dir / "synthetic" / f"{n}_manifest.csv" for n in names],
                     force)
    domains = _load_named_domains(cfg, names)
    artifacts = run_offline_stage(domains, cfg.plan, jobs=jobs)

    written = _persist_offline(cfg, domains, artifacts)
    _update_manifest(cfg, written)
    print(f"offline stage wrote {len(written)} artifacts to {cfg.run_dir}")

    if artifacts.failures:
        for name, message in artifacts.failures.items():
            print(f"error: offline stage failed for {name}: {message}", file=sys.stderr)
        return 2 if any("Diverg" in m for m in artifacts.failures.values()) else 1
    return 0


def _load_offline_bank(cfg: RunConfig, domains, names: list[str]) -> OfflineArtifacts:
    """Reload classifiers and generators saved by the offline stage."""
    bank = OfflineArtifacts()
    by_name = {d.name: d for d in domains}
    for name in names:
        cpath = cfg.run_dir / "checkpoints" / f"classifier_{name}.ckpt"
        if not cpath.is_file():
            raise ConfigError(f"missing offline artifacts for dataset {name!r}: {cpath}")
        bank.classifiers[name] = ckpt.load_checkpoint(cpath)
        bank.generators[name] = {}
        for cls in EmotionClass:
            gpath = cfg.run_dir / "checkpoints" / f"wgangp_{name}_{cls.label}.ckpt"
            if not gpath.is_file():
                raise ConfigError(f"missing offline artifacts for dataset {name!r}: {gpath}")
            bank.generators[name][int(cls)] = ckpt.load_checkpoint(gpath)
        bank.synthetic_per_class[name] = cfg.plan.synthetic_per_class or \
            max(by_name[name].train.class_counts().values())
    return bank


def cmd_continual(cfg: RunConfig, strategy: str | None = None, jobs: int = 1,
                  force: bool = False) -> int:
    strategies = [Strategy.from_string(strategy)] if strategy else \
        [Strategy.from_string(s) for s in cfg.strategies]
    if not strategies:
        raise ConfigError("no strategies configured; set [strategies] or pass --strategy")
    _ensure_run_dirs(cfg)
    _refuse_existing([cfg.run_dir / "metrics" / f"{s.value}_aggregate.json"
                      for s in strategies], force)

    domains = _load_named_domains(cfg, list(cfg.plan.sequence))
    source_name = cfg.plan.sequence[0]
    source_path = cfg.run_dir / "checkpoints" / f"classifier_{source_name}.ckpt"
    if not source_path.is_file():
        raise ConfigError(f"missing source classifier for dataset {source_name!r}: "
                          f"{source_path}; run train-classifier or offline first")
    source_classifier = ckpt.load_checkpoint(source_path)

    needs_synthetic = any(s in ECGR_STRATEGIES for s in strategies)
    bank = None
    if needs_synthetic:
        bank = _load_offline_bank(cfg, domains, [d.name for d in domains[:-1]])

    written: list[Path] = []
    had_failure = False
    had_divergence = False
    for strat in strategies:
        def run_one(r: int, seed: int, _strat=strat):
            collection = None
            if _strat in ECGR_STRATEGIES:
                collection = synthesize_collection(bank, cfg.plan, replication=r)
                manifest_path = cfg.run_dir / "synthetic" / f"rep{r}_manifest.csv"
                _atomic_write_text(manifest_path, collection.manifest_csv())
                written.append(manifest_path)
            return run_continual_stage(source_classifier, domains, collection, _strat,
                                       cfg.plan, run_seed=seed, replication=r)

        outcome = replicate(run_one, cfg.plan.replications, cfg.plan.base_seed)
        for result in outcome.results:
            path = cfg.run_dir / "metrics" / f"{strat.value}_rep{result.replication}.json"
            _atomic_write_text(path, json.dumps(result.to_dict(), indent=2,
                                                sort_keys=True) + "\n")
            written.append(path)
        if outcome.results:
            agg = aggregate_replications(outcome.results)
            agg.failed_replications = len(outcome.failures)
            path = cfg.run_dir / "metrics" / f"{strat.value}_aggregate.json"
            _atomic_write_text(path, json.dumps(agg.to_dict(), indent=2,
                                                sort_keys=True) + "\n")
            written.append(path)
        for r, message in outcome.failures:
            had_failure = True
            had_divergence = had_divergence or "Diverg" in message
            print(f"error: {strat.value} replication {r} failed: {message}",
                  file=sys.stderr)
        print(f"{strat.value}: {len(outcome.results)}/{cfg.plan.replications} "
              f"replications complete")

    _update_manifest(cfg, written)
    if had_failure:
        return 2 if had_divergence else 1
    return 0


def cmd_report(cfg: RunConfig, formats: list[str] | None = None,
               force: bool = False) -> int:
    metrics_dir = cfg.run_dir / "metrics"
    agg_paths = sorted(metrics_dir.glob("*_aggregate.json")) if metrics_dir.is_dir() else []
    if not agg_paths:
        raise ConfigError(f"no aggregate results found under {metrics_dir}; "
                          f"run continual first")
    aggregates: dict[str, AggregateResult] = {}
    for path in agg_paths:
        agg = AggregateResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
        aggregates[agg.strategy] = agg

    written = emit_report(aggregates, metrics_dir, formats or list(TABLE_FORMATS))
    _update_manifest(cfg, written)
    for path in written:
        print(f"wrote {path}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, type=Path,
                        help="TOML or YAML plan file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the plan's base seed")
    parser.add_argument("--force", action="store_true",
                        help="allow overwriting existing run artifacts")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgr",
                                     description="emotion-centered generative replay")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", help="train one dataset's classifier")
    _add_common(p)
    p.add_argument("--dataset", required=True, help="dataset name from the sequence")

    p = sub.add_parser("offline", help="train per-class generators and QA-filter samples")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel per-class GAN trainings")
    p.add_argument("--dry-run", action="store_true",
                   help="print the planned steps without training")

    p = sub.add_parser("continual", help="adapt across the sequence under strategies")
    _add_common(p)
    p.add_argument("--strategy", default=None,
                   help="run a single strategy instead of the configured list")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="emit tables and plot data from stored results")
    _add_common(p)
    p.add_argument("--formats", default=",".join(TABLE_FORMATS),
                   help="comma-separated subset of: " + ", ".join(TABLE_FORMATS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, seed_override=args.seed)
        cfg.verbose = args.verbose
        if args.command == "train-classifier":
            return cmd_train_classifier(cfg, args.dataset, force=args.force)
        if args.command == "offline":
            return cmd_offline(cfg, jobs=args.jobs, dry_run=args.dry_run,
                               force=args.force)
        if args.command == "continual":
            return cmd_continual(cfg, strategy=args.strategy, jobs=args.jobs,
                                 force=args.force)
        if args.command == "report":
            formats = [f.strip() for f in args.formats.split(",") if f.strip()]
            return cmd_report(cfg, formats=formats, force=args.force)
        raise ConfigError(f"unknown command {args.command!r}")
    except (GanDivergenceError, TrainingDivergedError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, PipelineError, MetricsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
