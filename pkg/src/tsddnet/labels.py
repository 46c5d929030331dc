"""Registry of each image's current ROI label, its score, and the replacement history."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .data import BoundingBox


class Origin(str, enum.Enum):
    MANUAL = "MANUAL"
    PSEUDO = "PSEUDO"
    REFINED = "REFINED"


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    box: BoundingBox
    score: float
    origin: Origin


@dataclass
class LabelEntry:
    image_id: str
    current_roi: BoundingBox
    current_score: float
    origin: Origin
    history: list[HistoryEntry] = field(default_factory=list)

    @property
    def initial_roi(self) -> BoundingBox:
        return self.history[0].box


class LabelStore:
    """Mutable image_id -> LabelEntry mapping.

    Every mutation appends a history entry; iterations must strictly increase
    per image, and the last entry always mirrors the current label.
    """

    def __init__(self):
        self._entries: dict[str, LabelEntry] = {}

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._entries

    def __getitem__(self, image_id: str) -> LabelEntry:
        return self._entries[image_id]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entries(self) -> Iterable[LabelEntry]:
        return self._entries.values()

    def add(self, image_id: str, box: BoundingBox, score: float, origin: Origin, iteration: int = 0):
        if image_id in self._entries:
            raise KeyError(f"{image_id} already has a label")
        if origin is Origin.REFINED:
            raise ValueError("entries start as MANUAL or PSEUDO")
        self._entries[image_id] = LabelEntry(image_id, box, float(score), origin,
                                             [HistoryEntry(iteration, box, float(score), origin)])

    def commit(self, image_id: str, iteration: int, box: BoundingBox, score: float, replaced: bool):
        e = self._entries[image_id]
        if iteration <= e.history[-1].iteration:
            raise ValueError(f"{image_id}: iteration {iteration} does not follow {e.history[-1].iteration}")
        e.current_roi = box
        e.current_score = float(score)
        if replaced:
            e.origin = Origin.REFINED
        e.history.append(HistoryEntry(iteration, box, float(score), e.origin))

    def boxes(self) -> dict[str, BoundingBox]:
        return {k: e.current_roi for k, e in self._entries.items()}

    def copy(self) -> "LabelStore":
        new = LabelStore()
        for k, e in self._entries.items():
            new._entries[k] = LabelEntry(k, e.current_roi, e.current_score, e.origin, list(e.history))
        return new

    # persistence: JSON lines, one row per history entry

    def _rows(self, min_iteration: int | None = None) -> Iterator[str]:
        for e in self._entries.values():
            for h in e.history:
                if min_iteration is not None and h.iteration < min_iteration:
                    continue
                yield json.dumps({"image_id": e.image_id, "iteration": h.iteration, "box": h.box.to_list(),
                                  "score": h.score, "origin": h.origin.value}, sort_keys=True)

    def append_jsonl(self, path: str | Path, min_iteration: int | None = None):
        """Append history rows (optionally only those at or after ``min_iteration``)."""
        with open(path, "a", encoding="utf-8") as fh:
            for row in self._rows(min_iteration):
                fh.write(row + "\n")

    def write_jsonl(self, path: str | Path):
        Path(path).write_text("", encoding="utf-8")
        self.append_jsonl(path)

    @classmethod
    def read_jsonl(cls, path: str | Path) -> "LabelStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                box = BoundingBox(*d["box"])
                h = HistoryEntry(d["iteration"], box, d["score"], Origin(d["origin"]))
                e = store._entries.get(d["image_id"])
                if e is None:
                    store._entries[d["image_id"]] = LabelEntry(d["image_id"], box, h.score, h.origin, [h])
                elif h.iteration > e.history[-1].iteration:
                    e.history.append(h)
                    e.current_roi, e.current_score, e.origin = box, h.score, h.origin
        return store
