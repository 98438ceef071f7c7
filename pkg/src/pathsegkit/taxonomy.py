"""Three-level hierarchical semantic labels and text-prompt templating.

A label has the canonical form ``region-structure-object type`` where the
middle level is one of exactly three histological structures (tissue, cell,
nuclei).  Region and object type are stored verbatim in lowercase; names may
contain spaces ("bile duct", "red blood cells") but never the "-" separator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import EmptyLabelSet, MalformedLabel, UnknownStructure

STRUCTURES = ("tissue", "cell", "nuclei")

PROMPT_TEMPLATE = "{structure}-level {object_type} in {region} pathology."


@dataclass(frozen=True)
class HierLabel:
    """One hierarchical semantic label: region / structure / object type."""

    region: str
    structure: str
    object_type: str

    def __post_init__(self):
        if not self.region:
            raise MalformedLabel("anatomical region must be non-empty")
        if self.structure not in STRUCTURES:
            raise UnknownStructure(
                f"histological structure {self.structure!r} not in {STRUCTURES}"
            )
        if not self.object_type:
            raise MalformedLabel("object type must be non-empty")

    def render(self) -> str:
        """Canonical string form, lowercase levels joined by '-'."""
        return f"{self.region}-{self.structure}-{self.object_type}"

    def prompt(self) -> str:
        """Textual prompt for this label, from the fixed template."""
        return PROMPT_TEMPLATE.format(
            structure=self.structure,
            object_type=self.object_type,
            region=self.region,
        )


@dataclass(frozen=True)
class TaxonomyStats:
    n_regions: int
    n_structures: int
    n_object_types: int
    n_labels: int


def parse_label(raw: str) -> HierLabel:
    """Parse a raw label string into a HierLabel.

    Splitting is on the first two '-' separators (object type keeps any
    remainder verbatim); parsing is case-insensitive and whitespace around
    levels is stripped.  Raises MalformedLabel for wrong arity or empty
    levels, UnknownStructure for a bad middle level.
    """
    parts = [p.strip().lower() for p in raw.strip().split("-", 2)]
    if len(parts) != 3:
        raise MalformedLabel(
            f"label {raw!r} has {len(parts)} level(s), expected "
            "region-structure-object type"
        )
    region, structure, object_type = parts
    if structure not in STRUCTURES:
        raise UnknownStructure(
            f"label {raw!r}: structure {structure!r} not in {STRUCTURES}"
        )
    if not region or not object_type:
        raise MalformedLabel(f"label {raw!r} has an empty level")
    return HierLabel(region, structure, object_type)


def render_label(label: HierLabel) -> str:
    return label.render()


def render_prompt(label: HierLabel) -> str:
    return label.prompt()


def validate_taxonomy(labels: list[HierLabel]) -> TaxonomyStats:
    """Distinct counts per level and of whole labels.

    Deterministic and invariant under permutation/duplication of the input.
    """
    if not labels:
        raise EmptyLabelSet("cannot compute statistics of an empty label set")
    regions = {lb.region for lb in labels}
    structures = {lb.structure for lb in labels}
    object_types = {lb.object_type for lb in labels}
    distinct = {lb.render() for lb in labels}
    return TaxonomyStats(
        n_regions=len(regions),
        n_structures=len(structures),
        n_object_types=len(object_types),
        n_labels=len(distinct),
    )


def load_labels(path: str | Path) -> list[HierLabel]:
    """Read a taxonomy file: UTF-8 text, one canonical label per line."""
    labels = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                labels.append(parse_label(line))
    return labels


def save_labels(labels: list[HierLabel], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lb in labels:
            fh.write(lb.render() + "\n")


def bundled_labels() -> list[HierLabel]:
    """The 160-label pathology taxonomy shipped with the package."""
    text = (
        resources.files("pathsegkit").joinpath("data/taxonomy_labels.txt").read_text("utf-8")
    )
    return [parse_label(line) for line in text.splitlines() if line.strip()]


def stats_to_json(stats: TaxonomyStats, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "n_regions": stats.n_regions,
                "n_structures": stats.n_structures,
                "n_object_types": stats.n_object_types,
                "n_labels": stats.n_labels,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
