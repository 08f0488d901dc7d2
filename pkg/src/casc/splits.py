"""Slide-level train/val/test split by largest-remainder apportionment."""

from __future__ import annotations

from dataclasses import dataclass

from .noisegen.rng import shuffle

SPLITS = ("train", "val", "test")
DEFAULT_RATIO = (6, 1, 3)


def apportion(n: int, ratio=DEFAULT_RATIO) -> list[int]:
    """Integer counts summing to ``n`` in proportion to ``ratio``.

    Remaining units go to the largest fractional parts, earlier entries
    first on ties.
    """
    total = sum(ratio)
    # integer divmod keeps remainder ties exact
    parts = [divmod(n * r, total) for r in ratio]
    counts = [q for q, _ in parts]
    rest = n - sum(counts)
    order = sorted(range(len(ratio)), key=lambda i: (-parts[i][1], i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


@dataclass
class SplitPlan:
    assignment: dict[str, str]

    def slides(self, split: str) -> list[str]:
        return [s for s, v in self.assignment.items() if v == split]

    def split_of(self, slide_id: str) -> str:
        return self.assignment[slide_id]

    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self.slides(s)) for s in SPLITS)


def split_slides(slide_ids, ratio=DEFAULT_RATIO, seed: int = 0) -> SplitPlan:
    ids = sorted(set(slide_ids))
    if len(ids) < 3:
        raise ValueError(f"need at least 3 slides to split, got {len(ids)}")
    shuffled = shuffle(ids, seed)
    counts = apportion(len(ids), ratio)
    assignment = {}
    pos = 0
    for split, cnt in zip(SPLITS, counts):
        for sid in shuffled[pos:pos + cnt]:
            assignment[sid] = split
        pos += cnt
    return SplitPlan({sid: assignment[sid] for sid in ids})
