"""Multi-granularity label hierarchy and the label-distance similarity metric.

Level 0 is the finest granularity; level G-1 the coarsest.  Every class at
level g < G-1 has exactly one parent at level g+1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class HierarchySpec:
    """Validated label hierarchy.

    class_counts: classes per level, fine first (non-increasing).
    parent_maps:  for each level g < G-1, a dict mapping level-g class id
                  to its level-(g+1) parent id.
    """

    class_counts: tuple[int, ...]
    parent_maps: tuple[dict[int, int], ...] = field(default_factory=tuple)

    @property
    def levels(self) -> int:
        return len(self.class_counts)

    @property
    def num_fine(self) -> int:
        return self.class_counts[0]

    def label_vector(self, fine_class: int) -> tuple[int, ...]:
        """Ancestor chain of a fine class, one label per level."""
        if not 0 <= fine_class < self.num_fine:
            raise ValidationError(f"fine class {fine_class} out of range [0, {self.num_fine})")
        labels = [int(fine_class)]
        for g in range(self.levels - 1):
            labels.append(self.parent_maps[g][labels[-1]])
        return tuple(labels)

    def label_matrix(self) -> np.ndarray:
        """(num_fine, G) int array of label vectors, row i = fine class i."""
        return np.array([self.label_vector(i) for i in range(self.num_fine)], dtype=np.int64)

    def class_similarity(self, i: int, j: int) -> int:
        """G minus the Hamming distance between the two label vectors."""
        ci = self.label_vector(i)
        cj = self.label_vector(j)
        hamming = sum(a != b for a, b in zip(ci, cj))
        return self.levels - hamming

    def similarity_matrix(self) -> np.ndarray:
        """(K, K) matrix of pairwise fine-class similarities."""
        labels = self.label_matrix()
        # Hamming distance between label rows, vectorized over pairs
        diff = labels[:, None, :] != labels[None, :, :]
        return (self.levels - diff.sum(axis=2)).astype(np.int64)

    def children(self, level: int, parent: int) -> list[int]:
        """Level-`level` classes whose parent at level+1 is `parent`."""
        return [c for c, p in self.parent_maps[level].items() if p == parent]

    def to_dict(self) -> dict:
        return {
            "class_counts": list(self.class_counts),
            "parent_maps": [{str(k): v for k, v in m.items()} for m in self.parent_maps],
        }

    @staticmethod
    def from_dict(doc: dict) -> "HierarchySpec":
        try:
            counts = doc["class_counts"]
            maps = doc["parent_maps"]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"hierarchy document missing field: {exc}") from exc
        parent_maps = [{int(k): int(v) for k, v in m.items()} for m in maps]
        return build_hierarchy(counts, parent_maps)


def build_hierarchy(class_counts, parent_maps) -> HierarchySpec:
    """Validate counts and parent maps; reject orphans and bad parent ids."""
    counts = tuple(int(c) for c in class_counts)
    if not counts or any(c < 1 for c in counts):
        raise ValidationError(f"class counts must be positive, got {counts}")
    for g in range(len(counts) - 1):
        if counts[g + 1] > counts[g]:
            raise ValidationError(
                f"class counts must be non-increasing fine to coarse, got {counts[g + 1]} > {counts[g]} at level {g + 1}")
    maps = tuple(dict(sorted((int(k), int(v)) for k, v in m.items())) for m in parent_maps)
    if len(maps) != len(counts) - 1:
        raise ValidationError(
            f"need {len(counts) - 1} parent maps for {len(counts)} levels, got {len(maps)}")
    for g, m in enumerate(maps):
        orphans = [c for c in range(counts[g]) if c not in m]
        if orphans:
            raise ValidationError(f"level {g} classes without a parent: {orphans}")
        extra = [c for c in m if not 0 <= c < counts[g]]
        if extra:
            raise ValidationError(f"level {g} parent map lists unknown classes: {extra}")
        bad = [(c, p) for c, p in m.items() if not 0 <= p < counts[g + 1]]
        if bad:
            raise ValidationError(f"level {g} parents out of range [0, {counts[g + 1]}): {bad}")
    return HierarchySpec(counts, maps)


def load_hierarchy(path) -> HierarchySpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read hierarchy file {path}: {exc}") from exc
    return HierarchySpec.from_dict(doc)


def save_hierarchy(h: HierarchySpec, path) -> None:
    Path(path).write_text(json.dumps(h.to_dict(), indent=2) + "\n", encoding="utf-8")
