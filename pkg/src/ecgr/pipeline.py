"""Orchestration of the offline preparation stage and the continual learning stage.

The offline stage trains one classifier and seven per-class generators for
each dataset, then synthesizes and QA-filters replay candidates. The
continual stage adapts a source classifier across the dataset sequence under
one of six training strategies, evaluating on every dataset seen so far
after each step. All randomness derives from one base seed.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .data import (Dataset, DomainSplits, EmotionClass, LabeledImage, WeightedSample,
                   concat_datasets, load_image_dataset, split_dataset, unify_datasets)
from .gan import GanConfig, GanTrainLog, generate_samples, train_wgangp_for_class
from .metrics import ContinualRunResult, StepMetrics, accuracy, per_class_f1
from .models import ClassifierModel, GeneratorModel, build_classifier, classifier_predict
from .qa import QaConfig, QaReport, qa_filter, strip_weights
from .training import TrainConfig, TrainLog, train_classifier

logger = logging.getLogger("ecgr.pipeline")


class PipelineError(ValueError):
    """Raised for plan violations and missing pipeline inputs."""


class Strategy(str, Enum):
    CURRENT_MODEL = "current_model"
    JOINT = "joint"
    FINE_TUNE = "fine_tune"
    ECGR = "ecgr"
    ECGR_QA = "ecgr_qa"
    ECGR_WQA = "ecgr_wqa"

    @classmethod
    def from_string(cls, value: "Strategy | str") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        try:
            return cls(value)
        except ValueError:
            raise PipelineError(f"unknown strategy {value!r}; expected one of "
                                f"{[s.value for s in cls]}") from None


ECGR_STRATEGIES = (Strategy.ECGR, Strategy.ECGR_QA, Strategy.ECGR_WQA)


def derive_seed(base_seed: int, *parts) -> int:
    """Stable 63-bit seed from the base seed and a component path."""
    blob = "|".join([str(int(base_seed))] + [str(p) for p in parts]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") & 0x7FFFFFFFFFFFFFFF


@dataclass(frozen=True)
class PipelinePlan:
    """Declarative description of one experiment: sequence, configs, seeds."""

    sequence: tuple[str, ...]
    image_size: int = 48
    test_fraction: float = 0.2
    gan: GanConfig = field(default_factory=GanConfig)
    qa: QaConfig = field(default_factory=QaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier_width: int = 64
    synthetic_per_class: int = 0  # 0 = match the largest per-class train count
    replications: int = 1
    base_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "sequence", tuple(self.sequence))
        if len(self.sequence) < 2:
            raise PipelineError(f"sequence must name at least 2 datasets, "
                                f"got {len(self.sequence)}")
        if len(set(self.sequence)) != len(self.sequence):
            raise PipelineError("sequence contains duplicate dataset names")
        if self.replications < 1:
            raise PipelineError(f"replications must be >= 1, got {self.replications}")
        if self.synthetic_per_class < 0:
            raise PipelineError("synthetic_per_class cannot be negative")


@dataclass
class SyntheticClassSet:
    """Raw and QA-accepted synthetic samples of one class from one generator."""

    class_tag: EmotionClass
    raw: tuple[LabeledImage, ...]
    accepted: tuple[WeightedSample, ...]
    provenance: dict


@dataclass
class SyntheticDatasetEntry:
    """All synthetic material produced for one source dataset."""

    dataset_name: str
    classes: dict[int, SyntheticClassSet]
    report: QaReport
    replication: int

    def raw_images(self) -> list[LabeledImage]:
        out: list[LabeledImage] = []
        for cls in sorted(self.classes):
            out.extend(self.classes[cls].raw)
        return out

    def accepted_samples(self) -> list[WeightedSample]:
        out: list[WeightedSample] = []
        for cls in sorted(self.classes):
            out.extend(self.classes[cls].accepted)
        return out

    def manifest_rows(self) -> list[tuple[str, int, str, int, str]]:
        accepted_ids = {s.image.source_id: s.weight for s in self.accepted_samples()}
        rows = []
        for img in self.raw_images():
            w = accepted_ids.get(img.source_id)
            rows.append((self.dataset_name, int(img.label), img.source_id,
                         1 if w is not None else 0, "" if w is None else repr(w)))
        return rows


@dataclass
class SyntheticCollection:
    """Per-dataset QA-filtered synthetic samples, keyed by source dataset name."""

    entries: dict[str, SyntheticDatasetEntry] = field(default_factory=dict)

    def manifest_csv(self) -> str:
        lines = ["dataset,class_id,source_id,accepted,weight"]
        for name in sorted(self.entries):
            for row in self.entries[name].manifest_rows():
                lines.append(",".join(str(v) for v in row))
        return "\n".join(lines) + "\n"

    def manifest_digest(self) -> str:
        return hashlib.sha256(self.manifest_csv().encode("utf-8")).hexdigest()


@dataclass
class OfflineArtifacts:
    """Everything the offline stage produces, per dataset."""

    classifiers: dict[str, ClassifierModel] = field(default_factory=dict)
    generators: dict[str, dict[int, GeneratorModel]] = field(default_factory=dict)
    collection: SyntheticCollection = field(default_factory=SyntheticCollection)
    train_logs: dict[str, TrainLog] = field(default_factory=dict)
    gan_logs: dict[tuple[str, int], GanTrainLog] = field(default_factory=dict)
    synthetic_per_class: dict[str, int] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


def load_domains(named_roots: Sequence[tuple[str, str | Path]],
                 plan: PipelinePlan) -> list[DomainSplits]:
    """Load and split every dataset root named by the plan's sequence."""
    domains = []
    for name, root in named_roots:
        full = load_image_dataset(root, plan.image_size, name)
        train, test = split_dataset(full, plan.test_fraction,
                                    derive_seed(plan.base_seed, "split", name))
        domains.append(DomainSplits(name, train, test))
    return domains


def _default_classifier_trainer(domain: DomainSplits,
                                plan: PipelinePlan) -> tuple[ClassifierModel, TrainLog]:
    seed = derive_seed(plan.base_seed, "classifier", domain.name)
    model = build_classifier(len(EmotionClass), plan.image_size,
                             width=plan.classifier_width, seed=seed)
    return train_classifier(model, domain.train, replace(plan.train, seed=seed))


def _gan_task(args):
    class_ds, cfg = args
    return train_wgangp_for_class(class_ds, cfg)


def _train_domain_gans(domain: DomainSplits, plan: PipelinePlan, gan_trainer, jobs: int):
    """Train one generator per class present in the domain's train split."""
    class_ids = sorted(domain.train.class_counts())
    tasks = []
    for cls in class_ids:
        cfg = replace(plan.gan, seed=derive_seed(plan.base_seed, "gan", domain.name, cls))
        tasks.append((domain.train.class_slice(cls), cfg))

    if gan_trainer is not None:
        outputs = [gan_trainer(class_ds, cfg) for class_ds, cfg in tasks]
    elif jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            outputs = list(pool.map(_gan_task, tasks))
    else:
        outputs = [_gan_task(t) for t in tasks]

    generators: dict[int, GeneratorModel] = {}
    logs: dict[int, GanTrainLog] = {}
    for cls, (gen, log) in zip(class_ids, outputs):
        gen.gen_id = f"wgangp_{domain.name}_{EmotionClass(cls).label}"
        generators[cls] = gen
        logs[cls] = log
    return generators, logs


def synthesize_entry(dataset_name: str, generators: Mapping[int, GeneratorModel],
                     classifier: ClassifierModel, plan: PipelinePlan,
                     n_per_class: int, replication: int) -> SyntheticDatasetEntry:
    """Generate candidates per class, pass them through the source classifier,
    and keep the accepted ones with their confidence weights."""
    candidates: list[LabeledImage] = []
    seeds: dict[int, int] = {}
    for cls in sorted(generators):
        seed = derive_seed(plan.base_seed, "synth", dataset_name, cls, replication)
        seeds[cls] = seed
        candidates.extend(generate_samples(generators[cls], n_per_class, seed))

    accepted, report = qa_filter(classifier, candidates, plan.qa)
    accepted_by_class: dict[int, list[WeightedSample]] = {}
    for s in accepted:
        accepted_by_class.setdefault(int(s.image.label), []).append(s)

    classes: dict[int, SyntheticClassSet] = {}
    for cls in sorted(generators):
        raw = tuple(c for c in candidates if int(c.label) == cls)
        classes[cls] = SyntheticClassSet(
            class_tag=EmotionClass(cls),
            raw=raw,
            accepted=tuple(accepted_by_class.get(cls, [])),
            provenance={"gen_id": generators[cls].gen_id, "seed": seeds[cls],
                        "replication": replication},
        )
        if not classes[cls].accepted:
            logger.warning("QA rejected every %s candidate for dataset %s",
                           EmotionClass(cls).label, dataset_name)
    return SyntheticDatasetEntry(dataset_name, classes, report, replication)


def synthesize_collection(artifacts: OfflineArtifacts, plan: PipelinePlan,
                          replication: int) -> SyntheticCollection:
    """Fresh synthetic collection for one replication, from the trained generators."""
    collection = SyntheticCollection()
    for name, gens in artifacts.generators.items():
        collection.entries[name] = synthesize_entry(
            name, gens, artifacts.classifiers[name], plan,
            artifacts.synthetic_per_class[name], replication)
    return collection


def run_offline_stage(domains: Sequence[DomainSplits], plan: PipelinePlan, *,
                      classifier_trainer: Callable | None = None,
                      gan_trainer: Callable | None = None,
                      jobs: int = 1) -> OfflineArtifacts:
    """Offline preparation over every given dataset.

    Per dataset: train its classifier, train one generator per class,
    generate candidates, and QA-filter them into the synthetic collection.
    A failure in one dataset is recorded and leaves the others unaffected.
    ``classifier_trainer(domain, plan)`` and ``gan_trainer(class_ds, cfg)``
    may be injected to substitute the training routines.
    """
    trainer = classifier_trainer or _default_classifier_trainer
    artifacts = OfflineArtifacts()
    for domain in domains:
        try:
            classifier, tlog = trainer(domain, plan)
            artifacts.classifiers[domain.name] = classifier
            artifacts.train_logs[domain.name] = tlog

            generators, logs = _train_domain_gans(domain, plan, gan_trainer, jobs)
            artifacts.generators[domain.name] = generators
            for cls, log in logs.items():
                artifacts.gan_logs[(domain.name, cls)] = log

            n = plan.synthetic_per_class or max(domain.train.class_counts().values())
            artifacts.synthetic_per_class[domain.name] = n
            artifacts.collection.entries[domain.name] = synthesize_entry(
                domain.name, generators, classifier, plan, n, replication=0)
        except Exception as exc:
            logger.error("offline stage failed for dataset %s: %s", domain.name, exc)
            artifacts.failures[domain.name] = f"{type(exc).__name__}: {exc}"
            artifacts.classifiers.pop(domain.name, None)
            artifacts.generators.pop(domain.name, None)
    return artifacts


def _evaluate(classifier: ClassifierModel, domain: DomainSplits) -> StepMetrics:
    truth = domain.test.labels_array()
    _, predicted, _ = classifier_predict(classifier, domain.test.images_array())
    return StepMetrics(domain.name, accuracy(predicted, truth),
                       per_class_f1(predicted, truth, classifier.num_classes), len(truth))


def _synthetic_dataset(collection: SyntheticCollection, names: Sequence[str],
                       strategy: Strategy) -> Dataset:
    missing = [n for n in names if n not in collection.entries]
    if missing:
        raise PipelineError(f"synthetic collection is missing entries for: "
                            f"{', '.join(missing)}")
    samples: list[WeightedSample] = []
    for name in names:
        entry = collection.entries[name]
        if strategy is Strategy.ECGR:
            samples.extend(WeightedSample(img, 1.0) for img in entry.raw_images())
        elif strategy is Strategy.ECGR_QA:
            samples.extend(strip_weights(entry.accepted_samples()))
        else:
            samples.extend(entry.accepted_samples())
    return Dataset(name="synthetic:" + "+".join(names), samples=tuple(samples),
                   split="train")


def run_continual_stage(source_classifier: ClassifierModel,
                        sequence: Sequence[DomainSplits],
                        collection: SyntheticCollection | None,
                        strategy: Strategy | str,
                        plan: PipelinePlan, *,
                        run_seed: int | None = None,
                        replication: int = 0) -> ContinualRunResult:
    """Adapt the source classifier across the sequence under one strategy.

    Step 0 is the source classifier's baseline evaluation; step k adapts to
    ``sequence[k]`` and then evaluates on the test split of every dataset
    seen so far. ECgr strategies replay synthetic samples of all previously
    seen datasets from the collection.
    """
    strategy = Strategy.from_string(strategy)
    if len(sequence) < 2:
        raise PipelineError("continual stage needs a sequence of at least 2 datasets")
    seed_root = plan.base_seed if run_seed is None else run_seed

    if strategy in ECGR_STRATEGIES:
        if collection is None:
            raise PipelineError(f"strategy {strategy.value} requires a synthetic collection")
        preceding = [d.name for d in sequence[:-1]]
        missing = [n for n in preceding if n not in collection.entries]
        if missing:
            raise PipelineError(f"synthetic collection is missing entries for: "
                                f"{', '.join(missing)}")

    model = source_classifier
    if strategy is not Strategy.CURRENT_MODEL:
        model = copy.deepcopy(source_classifier)

    steps: list[tuple[StepMetrics, ...]] = [(_evaluate(model, sequence[0]),)]
    train_sizes: list[int] = []

    for k in range(1, len(sequence)):
        target = sequence[k]
        if strategy is Strategy.CURRENT_MODEL:
            train_sizes.append(0)
        else:
            if strategy is Strategy.JOINT:
                train_ds = concat_datasets([d.train for d in sequence[:k + 1]])
            elif strategy is Strategy.FINE_TUNE:
                train_ds = target.train
            else:
                synth = _synthetic_dataset(collection, [d.name for d in sequence[:k]],
                                           strategy)
                train_ds = unify_datasets(target.train, synth)
            scope = "fc_only" if strategy is Strategy.FINE_TUNE else "all"
            cfg = replace(plan.train,
                          seed=derive_seed(seed_root, "continual", strategy.value, k),
                          trainable_scope=scope)
            model, _ = train_classifier(model, train_ds, cfg)
            train_sizes.append(len(train_ds))
        steps.append(tuple(_evaluate(model, d) for d in sequence[:k + 1]))

    return ContinualRunResult(
        strategy=strategy.value,
        seed=seed_root,
        replication=replication,
        step_labels=("baseline",) + tuple(d.name for d in sequence[1:]),
        steps=tuple(steps),
        train_sizes=tuple(train_sizes),
    )


@dataclass
class ReplicateOutcome:
    """Results of repeated runs plus any per-replication failures."""

    results: list[ContinualRunResult]
    failures: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def replicate(run: Callable[[int, int], ContinualRunResult], replications: int,
              base_seed: int) -> ReplicateOutcome:
    """Execute ``run(replication, seed)`` with seeds ``base_seed + r``.

    Individual failures are recorded and the remaining replications continue.
    """
    if replications < 1:
        raise PipelineError(f"replications must be >= 1, got {replications}")
    outcome = ReplicateOutcome(results=[])
    for r in range(replications):
        try:
            outcome.results.append(run(r, base_seed + r))
        except Exception as exc:
            logger.error("replication %d failed: %s", r, exc)
            outcome.failures.append((r, f"{type(exc).__name__}: {exc}"))
    return outcome
