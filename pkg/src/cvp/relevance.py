"""Positive-object sets for each training dataset.

Every sample resolves to a :class:`TargetSet` that either lists positive
object ids or says the contrastive term is skipped for it.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable

from .scene import SceneBundle

DATASET_KINDS = ("scanrefer", "multi3drefer", "scan2cap", "scanqa", "sqa3d")
VARIANTS = ("gt_boxes", "all_related_boxes")

_WORD = re.compile(r"\w+")


class DanglingReferenceError(KeyError):
    pass


def tokenize(text: str | None) -> list[str]:
    """Lower-cased word tokens."""
    return _WORD.findall(text.lower()) if text else []


def normalize_name(name: str) -> str:
    return " ".join(name.lower().split())


@dataclass(frozen=True)
class TrainingSample:
    dataset_kind: str
    question: str
    answer: str | None = None
    referenced_object_ids: tuple[int, ...] = ()
    referenced_object_names: tuple[str, ...] = ()
    scene_id: str | None = None

    def __post_init__(self):
        if self.dataset_kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.dataset_kind!r}")
        object.__setattr__(self, "referenced_object_ids", tuple(int(i) for i in self.referenced_object_ids))
        object.__setattr__(self, "referenced_object_names", tuple(self.referenced_object_names))
        if len(self.referenced_object_ids) != len(self.referenced_object_names):
            raise ValueError("referenced id and name lists must have equal length")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainingSample":
        return cls(
            dataset_kind=doc["dataset_kind"],
            question=doc.get("question", ""),
            answer=doc.get("answer"),
            referenced_object_ids=doc.get("referenced_object_ids", []),
            referenced_object_names=doc.get("referenced_object_names", []),
            scene_id=doc.get("scene_id"),
        )

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "dataset_kind": self.dataset_kind,
            "question": self.question,
            "answer": self.answer,
            "referenced_object_ids": list(self.referenced_object_ids),
            "referenced_object_names": list(self.referenced_object_names),
        }


@dataclass(frozen=True)
class TargetSet:
    mode: str = "positives"
    ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.mode not in ("positives", "skip"):
            raise ValueError(f"unknown target mode {self.mode!r}")
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.mode == "skip" and self.ids:
            raise ValueError("a skipped target set carries no ids")

    @classmethod
    def skip(cls) -> "TargetSet":
        return cls("skip", ())

    @property
    def trainable(self) -> bool:
        """True when the sample contributes a contrastive term (some positives, not skipped)."""
        return self.mode == "positives" and bool(self.ids)

    def to_json(self) -> dict:
        return {"mode": self.mode, "ids": list(self.ids)}


def read_samples(path) -> list[TrainingSample]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingSample.from_json(json.loads(line)) for line in fh if line.strip()]


def write_samples(samples: Iterable[TrainingSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def parse_mentioned_categories(question: str | None, answer: str | None, vocabulary: Iterable[str]) -> set[str]:
    """Vocabulary entries that occur as whole-word sequences in the question or answer.

    Matching is case-insensitive; a multi-word name must appear as a contiguous
    run of words. Question and answer are scanned separately.
    """
    vocabulary = list(vocabulary)
    if not vocabulary:
        raise ValueError("vocabulary must be nonempty")
    texts = [" " + " ".join(tokenize(t)) + " " for t in (question, answer)]
    found = set()
    for name in vocabulary:
        words = tokenize(name)
        if not words:
            continue
        needle = " " + " ".join(words) + " "
        if any(needle in text for text in texts):
            found.add(name)
    return found


def scanqa_keep(sample: TrainingSample) -> bool:
    """Keep a ScanQA sample with one referenced object, or several that all share the answer's name."""
    names = sample.referenced_object_names
    if len(names) == 1:
        return True
    if not names or sample.answer is None:
        return False
    first = normalize_name(names[0])
    return all(normalize_name(n) == first for n in names) and normalize_name(sample.answer) == first


def build_target_set(sample: TrainingSample, scene: SceneBundle, variant: str = "gt_boxes") -> TargetSet:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    scene_ids = {o.id for o in scene.objects}
    for obj_id in sample.referenced_object_ids:
        if obj_id not in scene_ids:
            raise DanglingReferenceError(f"object {obj_id} is not in scene {scene.scene_id!r}")

    ids = sample.referenced_object_ids
    kind = sample.dataset_kind
    if kind == "sqa3d":
        return TargetSet.skip()
    if kind in ("scanrefer", "scan2cap"):
        if len(ids) != 1:
            raise ValueError(f"{kind} sample must reference exactly one object, got {len(ids)}")
        positives = list(ids)
    elif kind == "multi3drefer":
        positives = list(dict.fromkeys(ids))
    else:  # scanqa
        if not scanqa_keep(sample):
            return TargetSet.skip()
        positives = list(dict.fromkeys(ids))

    if variant == "all_related_boxes" and scene.objects:
        vocab = {normalize_name(o.category) for o in scene.objects}
        mentioned = parse_mentioned_categories(sample.question, sample.answer, vocab)
        for obj in scene.objects:
            if normalize_name(obj.category) in mentioned and obj.id not in positives:
                positives.append(obj.id)
    return TargetSet("positives", tuple(positives))
