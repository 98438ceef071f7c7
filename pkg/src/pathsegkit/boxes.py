"""Oracle box prompts derived from ground-truth masks.

Two constructions are supported: the union box (one tight rectangle around
all foreground) and instance boxes (one tight rectangle per surviving
8-connected component).  Boxes use inclusive pixel coordinates.  A prompt
efficiency table summarizes score vs. number of prompts per mask across
prompting strategies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyMask, EmptyRecords, OutOfBounds
from .metrics import MIN_INSTANCE_SIZE, _STRUCTURE_8, as_binary


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, inclusive pixel coordinates."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate box bounds: {self}")

    def as_list(self) -> list[int]:
        return [self.row_min, self.col_min, self.row_max, self.col_max]

    def contains(self, other: "Box") -> bool:
        return (
            self.row_min <= other.row_min
            and self.col_min <= other.col_min
            and self.row_max >= other.row_max
            and self.col_max >= other.col_max
        )


def union_box(mask: np.ndarray) -> Box:
    """Minimal box containing every foreground pixel."""
    binary = as_binary(mask)
    rows, cols = np.nonzero(binary)
    if rows.size == 0:
        raise EmptyMask("union box of an empty mask is undefined")
    return Box(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def instance_boxes(mask: np.ndarray, min_size: int = MIN_INSTANCE_SIZE) -> list[Box]:
    """One minimal box per 8-connected component with >= min_size pixels."""
    binary = as_binary(mask)
    if not binary.any():
        raise EmptyMask("instance boxes of an empty mask are undefined")
    labeled, n = ndimage.label(binary, structure=_STRUCTURE_8)
    counts = np.bincount(labeled.ravel())[1:]
    boxes = []
    for k, sl in enumerate(ndimage.find_objects(labeled), start=1):
        if sl is None or counts[k - 1] < min_size:
            continue
        boxes.append(
            Box(sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1)
        )
    return boxes


def boxes_as_mask(boxes: Sequence[Box], dims: tuple[int, int]) -> np.ndarray:
    """Union of filled rectangles as a binary HxW mask."""
    h, w = dims
    out = np.zeros((h, w), dtype=np.uint8)
    for b in boxes:
        if b.row_min < 0 or b.col_min < 0 or b.row_max >= h or b.col_max >= w:
            raise OutOfBounds(f"box {b} exceeds image dims {dims}")
        out[b.row_min : b.row_max + 1, b.col_min : b.col_max + 1] = 1
    return out


class PromptEfficiencyRow(NamedTuple):
    group: str  # histological structure, or "overall"
    mean_prompts: float
    mean_dice: float
    n: int


def prompt_efficiency(records: Sequence[dict]) -> list[PromptEfficiencyRow]:
    """Mean number of prompts per mask and mean score, per structure and overall.

    Records carry keys "structure", "n_prompts", and "dice"; a text-prompt
    record always has n_prompts == 1.
    """
    if not records:
        raise EmptyRecords("prompt efficiency of an empty record list")
    groups: dict[str, list[dict]] = {}
    for rec in records:
        groups.setdefault(rec["structure"], []).append(rec)
    rows = []
    for structure in sorted(groups):
        recs = groups[structure]
        rows.append(
            PromptEfficiencyRow(
                structure,
                float(np.mean([r["n_prompts"] for r in recs])),
                float(np.mean([r["dice"] for r in recs])),
                len(recs),
            )
        )
    rows.append(
        PromptEfficiencyRow(
            "overall",
            float(np.mean([r["n_prompts"] for r in records])),
            float(np.mean([r["dice"] for r in records])),
            len(records),
        )
    )
    return rows


def write_boxes_jsonl(
    records: Sequence[dict], path: str | Path, header: dict | None = None
) -> None:
    """Export boxes as JSON-lines: {sample_id, label, kind, boxes: [[r0,c0,r1,c1], ...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"_provenance": header}) + "\n")
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "sample_id": rec["sample_id"],
                        "label": rec["label"],
                        "kind": rec["kind"],
                        "boxes": [b.as_list() for b in rec["boxes"]],
                    }
                )
                + "\n"
            )
