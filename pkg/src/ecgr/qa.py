"""Quality assurance for synthetic images.

A candidate survives only if the source-trained classifier assigns it the
label its generator intended, at or above a confidence threshold. Accepted
samples carry the classifier's confidence as their training weight; rejected
samples are reported but never reach the replay dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EmotionClass, LabeledImage, WeightedSample


class QaError(ValueError):
    """Raised for classifier/candidate mismatches or invalid configs."""


@dataclass(frozen=True)
class QaConfig:
    confidence_threshold: float = 0.0
    require_correct_label: bool = True

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence_threshold < 1.0):
            raise QaError(f"confidence_threshold must be in [0, 1), "
                          f"got {self.confidence_threshold}")


@dataclass
class QaClassReport:
    accepted: int = 0
    rejected: int = 0
    mean_accepted_confidence: float = 0.0
    rejected_ids: list[str] = field(default_factory=list)


@dataclass
class QaReport:
    per_class: dict[int, QaClassReport] = field(default_factory=dict)

    @property
    def accepted_total(self) -> int:
        return sum(r.accepted for r in self.per_class.values())

    @property
    def rejected_total(self) -> int:
        return sum(r.rejected for r in self.per_class.values())

    def rejected_ids(self) -> list[str]:
        out: list[str] = []
        for cls in sorted(self.per_class):
            out.extend(self.per_class[cls].rejected_ids)
        return out

    def to_dict(self) -> dict:
        return {
            "accepted_total": self.accepted_total,
            "rejected_total": self.rejected_total,
            "per_class": {
                EmotionClass(cls).label: {
                    "accepted": rep.accepted,
                    "rejected": rep.rejected,
                    "mean_accepted_confidence": rep.mean_accepted_confidence,
                    "rejected_ids": rep.rejected_ids,
                }
                for cls, rep in sorted(self.per_class.items())
            },
        }

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path


def qa_filter(classifier, candidates: Sequence[LabeledImage],
              cfg: QaConfig) -> tuple[list[WeightedSample], QaReport]:
    """Gate synthetic candidates through the source-trained classifier.

    A candidate is accepted iff the classifier's argmax equals its intended
    label (when ``require_correct_label`` is on) and the probability of the
    intended label is at least ``cfg.confidence_threshold``. Accepted samples
    become weighted samples carrying that probability as their weight.

    The classifier only needs ``predict_proba``, ``num_classes``, and
    ``image_size`` attributes, so scripted stand-ins work for testing.
    """
    report = QaReport(per_class={int(c): QaClassReport()
                                 for c in {cand.label for cand in candidates}})
    if not candidates:
        return [], report

    max_label = max(int(c.label) for c in candidates)
    if max_label >= classifier.num_classes:
        raise QaError(f"candidate label id {max_label} is outside the classifier's "
                      f"{classifier.num_classes}-class mapping")
    shape = candidates[0].pixels.shape
    size = getattr(classifier, "image_size", None)
    if size is not None and shape != (size, size):
        raise QaError(f"candidate images of shape {shape} do not match classifier "
                      f"input size {size}x{size}")

    probs = classifier.predict_proba(np.stack([c.pixels for c in candidates]))
    accepted: list[WeightedSample] = []
    sums: dict[int, float] = {}
    for i, cand in enumerate(candidates):
        intended = int(cand.label)
        p_intended = float(probs[i, intended])
        predicted = int(np.argmax(probs[i]))
        ok = p_intended >= cfg.confidence_threshold and p_intended > 0.0
        if cfg.require_correct_label:
            ok = ok and predicted == intended
        cls_report = report.per_class[intended]
        if ok:
            accepted.append(WeightedSample(cand, p_intended))
            cls_report.accepted += 1
            sums[intended] = sums.get(intended, 0.0) + p_intended
        else:
            cls_report.rejected += 1
            cls_report.rejected_ids.append(cand.source_id)

    for cls, total in sums.items():
        report.per_class[cls].mean_accepted_confidence = total / report.per_class[cls].accepted
    return accepted, report


def strip_weights(samples: Sequence[WeightedSample]) -> list[WeightedSample]:
    """Same samples with every weight reset to 1.0; images are untouched."""
    return [WeightedSample(s.image, 1.0) for s in samples]


def rejected_samples(candidates: Sequence[LabeledImage],
                     report: QaReport) -> list[LabeledImage]:
    """Look up the rejected candidates named in a report, in report order."""
    by_id = {c.source_id: c for c in candidates}
    return [by_id[sid] for sid in report.rejected_ids() if sid in by_id]
