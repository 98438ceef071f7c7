"""Tests for hierarchical label parsing, prompt rendering, and stats."""

import re

import numpy as np
import pytest

from pathsegkit import taxonomy
from pathsegkit.errors import EmptyLabelSet, MalformedLabel, UnknownStructure
from pathsegkit.taxonomy import HierLabel, parse_label, render_prompt, validate_taxonomy


class TestParseLabel:
    def test_basic(self):
        lb = parse_label("Breast-Nuclei-Epithelial")
        assert lb == HierLabel("breast", "nuclei", "epithelial")

    def test_multiword_levels(self):
        lb = parse_label("Unspecified-Cell-Red blood cells")
        assert lb == HierLabel("unspecified", "cell", "red blood cells")

    def test_wrong_arity(self):
        with pytest.raises(MalformedLabel):
            parse_label("Breast-Epithelial")

    def test_unknown_structure(self):
        with pytest.raises(UnknownStructure):
            parse_label("Breast-Organ-Epithelial")

    def test_empty_level(self):
        with pytest.raises(MalformedLabel):
            parse_label("-cell-foo")
        with pytest.raises(MalformedLabel):
            parse_label("breast-cell-")

    def test_case_insensitive(self):
        assert parse_label("BREAST-NUCLEI-TUMOR") == parse_label("breast-nuclei-tumor")

    def test_roundtrip_canonical(self):
        raw = "Bile duct-Nuclei-Connective"
        assert parse_label(raw).render() == raw.lower()


class TestRenderPrompt:
    def test_template_tissue(self):
        assert (
            render_prompt(HierLabel("colon", "tissue", "gland"))
            == "tissue-level gland in colon pathology."
        )

    def test_template_nuclei(self):
        assert (
            render_prompt(HierLabel("breast", "nuclei", "neoplastic"))
            == "nuclei-level neoplastic in breast pathology."
        )

    def test_template_unspecified_region(self):
        assert (
            render_prompt(HierLabel("unspecified", "cell", "leukocytes"))
            == "cell-level leukocytes in unspecified pathology."
        )

    def test_prompt_shape_over_whole_taxonomy(self):
        pattern = re.compile(r"^(tissue|cell|nuclei)-level .+ in .+ pathology\.$")
        for lb in taxonomy.bundled_labels():
            assert pattern.match(lb.prompt()), lb


class TestValidateTaxonomy:
    def test_small(self):
        labels = [
            HierLabel("breast", "nuclei", "epithelial"),
            HierLabel("breast", "tissue", "tumor"),
        ]
        stats = validate_taxonomy(labels)
        assert (stats.n_regions, stats.n_structures, stats.n_object_types, stats.n_labels) == (1, 2, 2, 2)

    def test_duplicates_collapse(self):
        lb = HierLabel("colon", "tissue", "gland")
        assert validate_taxonomy([lb, lb]).n_labels == 1

    def test_empty(self):
        with pytest.raises(EmptyLabelSet):
            validate_taxonomy([])

    def test_bundled_taxonomy_counts(self):
        stats = validate_taxonomy(taxonomy.bundled_labels())
        assert stats.n_regions == 20
        assert stats.n_structures == 3
        assert stats.n_object_types == 61
        assert stats.n_labels == 160

    def test_permutation_invariance(self):
        labels = taxonomy.bundled_labels()
        rng = np.random.default_rng(4)
        shuffled = [labels[i] for i in rng.permutation(len(labels))]
        assert validate_taxonomy(shuffled) == validate_taxonomy(labels)
        assert validate_taxonomy(labels + labels[:40]) == validate_taxonomy(labels)


def test_parse_render_identity_on_generated_labels():
    """parse(render(x)) == x over randomly generated valid labels."""
    rng = np.random.default_rng(11)
    regions = ["breast", "bile duct", "head neck", "colon", "unspecified"]
    objects = ["tumor", "red blood cells", "necrosis or debris", "gland", "dcis"]
    for _ in range(200):
        lb = HierLabel(
            str(rng.choice(regions)),
            str(rng.choice(list(taxonomy.STRUCTURES))),
            str(rng.choice(objects)),
        )
        assert parse_label(lb.render()) == lb


def test_label_file_roundtrip(tmp_path):
    labels = taxonomy.bundled_labels()
    path = tmp_path / "labels.txt"
    taxonomy.save_labels(labels, path)
    assert taxonomy.load_labels(path) == labels


def test_stats_json_export(tmp_path):
    import json

    stats = validate_taxonomy(taxonomy.bundled_labels())
    path = tmp_path / "stats.json"
    taxonomy.stats_to_json(stats, path)
    data = json.loads(path.read_text())
    assert data == {"n_regions": 20, "n_structures": 3, "n_object_types": 61, "n_labels": 160}
