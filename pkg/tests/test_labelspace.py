"""Tests on tri-state datasets, manifests, the box rule and splitting"""
import itertools
import os
import tempfile
from unittest import TestCase

import numpy as np

from pyspml.exceptions import (
    LabelError,
    ManifestReferenceError,
    ManifestValidationError,
    SplitError,
)
from pyspml.labelspace import (
    BoxAnnotation,
    LabelState,
    TriStateLabelVector,
    clip_labels_from_boxes,
    load_manifest,
    manifest_document,
    save_manifest,
    split_dataset,
)
from pyspml.utils import to_json, write_json
from .utils import asset_dataset, flat_dataset, manifest_doc


class ManifestTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def write(self, doc, name="m.json"):
        path = self.path(name)
        write_json(path, doc)
        return path


class LoadManifestTestCase(ManifestTestCase):
    def test_minimal(self):
        dataset = load_manifest(self.write(manifest_doc()))
        self.assertEqual(len(dataset), 2)
        self.assertEqual([c.asset_id for c in dataset.clips], [0, 0])
        self.assertEqual(dataset.assets[0].clip_ids, (10, 11))
        self.assertEqual(dataset.meta.split, "train")
        self.assertEqual(dataset.label_matrix.shape, (2, 3))
        self.assertEqual(dataset.fully_labeled.tolist(), [False, True])

    def test_label_length(self):
        doc = manifest_doc()
        doc["clips"][1]["labels"] = [1, 0, 0, 0]
        with self.assertRaises(ManifestValidationError) as context:
            load_manifest(self.write(doc))
        self.assertIn("11", str(context.exception))

    def test_schema_violation_names_field_and_index(self):
        doc = manifest_doc()
        doc["clips"][0]["labels"] = [2, 0, 0]
        with self.assertRaises(ManifestValidationError) as context:
            load_manifest(self.write(doc))
        self.assertIn("clips[0].labels", str(context.exception))

    def test_dangling_asset(self):
        doc = manifest_doc()
        doc["clips"][0]["asset_id"] = 7
        with self.assertRaises(ManifestReferenceError):
            load_manifest(self.write(doc))

    def test_duplicate_order_index(self):
        doc = manifest_doc()
        doc["clips"][1]["order_index"] = 0
        with self.assertRaises(ManifestValidationError):
            load_manifest(self.write(doc))

    def test_target_marked_impossible(self):
        doc = manifest_doc()
        doc["assets"][0]["possible_mask"] = [True, False, True]
        with self.assertRaises(ManifestValidationError):
            load_manifest(self.write(doc))

    def test_unknown_field(self):
        doc = manifest_doc()
        doc["clips"][0]["color"] = "red"
        with self.assertRaises(ManifestValidationError):
            load_manifest(self.write(doc))

    def test_round_trip(self):
        dataset = load_manifest(self.write(manifest_doc()))
        save_manifest(self.path("copy.json"), dataset)
        again = load_manifest(self.path("copy.json"))
        self.assertEqual(again, dataset)
        self.assertEqual(to_json(manifest_document(again)), to_json(manifest_document(dataset)))
        save_manifest(self.path("copy2.json"), again)
        with open(self.path("copy.json"), "rb") as a, open(self.path("copy2.json"), "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_ordering_by_id(self):
        doc = manifest_doc()
        doc["clips"].reverse()
        dataset = load_manifest(self.write(doc))
        self.assertEqual([c.clip_id for c in dataset.clips], [10, 11])


class TriStateTestCase(TestCase):
    def test_counts(self):
        vector = TriStateLabelVector((1, 0, -1, -1))
        self.assertEqual(vector.counts(), (1, 1, 2))
        self.assertEqual(sum(vector.counts()), vector.M)
        self.assertEqual(vector[0], LabelState.POSITIVE)
        self.assertFalse(vector.fully_labeled)

    def test_invalid_state(self):
        with self.assertRaises(LabelError):
            TriStateLabelVector((1, 2))


def truncated(start, end, duration=3.0):
    """Independent statement of the 80ms / 200ms rule"""
    start, end = max(start, 0.0), min(end, duration)
    long_box = (end - start) > 0.080
    in_head = end <= 0.200
    in_tail = start >= duration - 0.200
    return long_box and (in_head or in_tail)


class BoxRuleTestCase(TestCase):
    def test_interior_box(self):
        labels = clip_labels_from_boxes([BoxAnnotation(2, 1.0, 1.5)], 3.0, 5)
        self.assertEqual(labels.states, (-1, -1, 1, -1, -1))

    def test_long_head_box_ignored(self):
        labels = clip_labels_from_boxes([BoxAnnotation(0, 0.0, 0.15)], 3.0, 2)
        self.assertEqual(labels[0], LabelState.UNKNOWN)

    def test_short_head_box_counts(self):
        labels = clip_labels_from_boxes([BoxAnnotation(0, 0.0, 0.05)], 3.0, 2)
        self.assertEqual(labels[0], LabelState.POSITIVE)

    def test_one_ignored_one_active(self):
        boxes = [BoxAnnotation(1, 2.85, 3.0), BoxAnnotation(1, 1.0, 1.2)]
        self.assertEqual(clip_labels_from_boxes(boxes, 3.0, 2)[1], LabelState.POSITIVE)

    def test_status_hints(self):
        boxes = [BoxAnnotation(0, 1.0, 2.0, "ignore"), BoxAnnotation(1, 0.0, 0.15, "active")]
        self.assertEqual(clip_labels_from_boxes(boxes, 3.0, 2).states, (-1, 1))

    def test_bad_box(self):
        with self.assertRaises(LabelError):
            BoxAnnotation(0, 1.0, 1.0)

    def test_grid_against_predicate(self):
        grid = np.round(np.arange(0.0, 3.0001, 0.01), 2)
        disagreements = 0
        for start, end in itertools.combinations(grid, 2):
            labels = clip_labels_from_boxes([BoxAnnotation(0, start, end)], 3.0, 2)
            expected = LabelState.UNKNOWN if truncated(start, end) else LabelState.POSITIVE
            disagreements += labels[0] != expected
        self.assertEqual(disagreements, 0)

    def test_interior_always_positive(self):
        for start, end in [(0.21, 0.22), (0.3, 2.7), (1.0, 1.0001)]:
            labels = clip_labels_from_boxes([BoxAnnotation(0, start, end)], 3.0, 2)
            self.assertEqual(labels[0], LabelState.POSITIVE)

    def test_permutation_invariant(self):
        boxes = [
            BoxAnnotation(0, 0.0, 0.15),
            BoxAnnotation(1, 1.0, 1.5),
            BoxAnnotation(2, 2.9, 3.0),
            BoxAnnotation(0, 2.0, 2.01),
        ]
        expected = clip_labels_from_boxes(boxes, 3.0, 4)
        for order in itertools.permutations(boxes):
            self.assertEqual(clip_labels_from_boxes(list(order), 3.0, 4), expected)


def split_fixture(per_class=10, M=3):
    assets = []
    for c in range(M):
        for _ in range(per_class):
            row = [-1] * M
            row[c] = 1
            assets.append((c, [True] * M, [True] * M, [row, row]))
    return asset_dataset(assets, M)


class SplitTestCase(TestCase):
    def test_ratio(self):
        train, val, test = split_dataset(split_fixture(), (0.8, 0.1, 0.1), seed=3)
        for part, expected in ((train, 8), (val, 1), (test, 1)):
            targets = [a.target_class for a in part.assets]
            for c in range(3):
                self.assertEqual(targets.count(c), expected)

    def test_deterministic(self):
        dataset = split_fixture()
        first = split_dataset(dataset, seed=5)
        second = split_dataset(dataset, seed=5)
        self.assertEqual(first, second)

    def test_partition(self):
        dataset = split_fixture()
        parts = split_dataset(dataset, seed=1)
        ids = [a.asset_id for part in parts for a in part.assets]
        self.assertEqual(sorted(ids), sorted(a.asset_id for a in dataset.assets))
        for part in parts:
            kept = {a.asset_id for a in part.assets}
            self.assertTrue(all(c.asset_id in kept for c in part.clips))
        self.assertEqual(sum(len(p) for p in parts), len(dataset))
        self.assertEqual([p.meta.split for p in parts], ["train", "val", "test"])

    def test_too_few_assets(self):
        with self.assertRaises(SplitError):
            split_dataset(split_fixture(per_class=2), (0.8, 0.1, 0.1))

    def test_bad_fractions(self):
        with self.assertRaises(SplitError):
            split_dataset(split_fixture(), (0.5, 0.1, 0.1))

    def test_flat(self):
        dataset = flat_dataset(np.eye(3, dtype=np.int8)[[0, 1, 2] * 10])
        train, val, test = split_dataset(dataset, seed=0)
        self.assertEqual((len(train), len(val), len(test)), (24, 3, 3))
