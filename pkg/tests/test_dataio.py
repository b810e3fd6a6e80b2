"""Dataset serialization, validation, and the synthetic generator."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from saldet.core import Box, iou
from saldet.dataio import (
    DatasetError,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
)

TINY = SynthConfig(images=5, seed=11)


def _dir_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestSynthConfig:
    def test_defaults_valid(self):
        SynthConfig()

    @pytest.mark.parametrize(
        "kw",
        [
            {"superpixels": 60},            # not a perfect square
            {"grid_side": 30},              # not divisible by sqrt(superpixels)
            {"objects_per_image": (0, 2)},  # zero objects
            {"objects_per_image": (2, 1)},  # inverted range
            {"objects_per_image": (1, 5)},  # more objects than classes
            {"feature_dim": 2},             # fewer dims than classes
            {"noise_amplitude": 1.0},
            {"feature_snr": 0.0},
            {"images": 0},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            replace(TINY, **kw)


class TestGenerator:
    def test_deterministic(self):
        a, _ = generate_synthetic(TINY)
        b, _ = generate_synthetic(TINY)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.features, rb.features)
            np.testing.assert_array_equal(ra.grid.labels, rb.grid.labels)
            assert ra.gt_boxes == rb.gt_boxes

    def test_structure(self):
        records, manifest = generate_synthetic(TINY)
        assert len(records) == 5
        assert manifest.num_classes == 4
        for rec in records:
            classes = [c for c, _ in rec.gt_boxes]
            assert classes == sorted(set(classes))  # distinct, ascending
            assert set(rec.saliency) == set(rec.labels.positives)
            assert set(classes) == set(rec.labels.positives)
            assert rec.features.shape == (rec.num_proposals, 16)

    def test_planted_proposals_match_gt(self):
        records, _ = generate_synthetic(TINY)
        for rec in records:
            for k, (cls, box) in enumerate(rec.gt_boxes):
                assert rec.proposals[k].bbox == box

    def test_parts_stay_under_half_iou(self):
        records, _ = generate_synthetic(replace(TINY, images=30))
        for rec in records:
            n = len(rec.gt_boxes)
            for k in range(n):
                part = rec.proposals[n + k]
                gt = rec.gt_boxes[k][1]
                assert iou(part.bbox, gt) < 0.5

    def test_objects_keep_their_gap(self):
        records, _ = generate_synthetic(replace(TINY, images=30))
        block = TINY.grid_side // 8
        for rec in records:
            boxes = [b for _, b in rec.gt_boxes]
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    a, b = boxes[i], boxes[j]
                    dx = max(a.x0 - b.x1, b.x0 - a.x1, 0)
                    dy = max(a.y0 - b.y1, b.y0 - a.y1, 0)
                    assert max(dx, dy) >= 2 * block

    def test_saliency_peaks_on_object(self):
        records, _ = generate_synthetic(TINY)
        for rec in records:
            for cls, box in rec.gt_boxes:
                values = rec.saliency[cls].values
                inside = values[box.y0:box.y1, box.x0:box.x1]
                assert inside.min() >= 1.0 - TINY.noise_amplitude

    def test_infeasible_config_raises(self):
        with pytest.raises(ValueError, match="infeasible"):
            generate_synthetic(
                SynthConfig(grid_side=8, superpixels=16, classes=4,
                            objects_per_image=(4, 4), images=1)
            )


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        records, manifest = generate_synthetic(TINY)
        save_dataset(records, manifest, tmp_path / "ds")
        loaded, loaded_manifest = load_dataset(tmp_path / "ds" / "manifest.json")
        assert loaded_manifest.num_classes == manifest.num_classes
        assert loaded_manifest.class_names == manifest.class_names
        assert len(loaded) == len(records)
        for ra, rb in zip(records, loaded):
            assert ra.id == rb.id
            np.testing.assert_array_equal(ra.grid.labels, rb.grid.labels)
            np.testing.assert_array_equal(ra.features, rb.features)
            assert [p.superpixel_ids for p in ra.proposals] == [
                p.superpixel_ids for p in rb.proposals
            ]
            assert ra.gt_boxes == rb.gt_boxes
            for c in ra.saliency:
                np.testing.assert_array_equal(
                    ra.saliency[c].values, rb.saliency[c].values
                )

    def test_saved_bytes_deterministic(self, tmp_path):
        records, manifest = generate_synthetic(TINY)
        save_dataset(records, manifest, tmp_path / "a")
        save_dataset(records, manifest, tmp_path / "b")
        a, b = _dir_bytes(tmp_path / "a"), _dir_bytes(tmp_path / "b")
        assert list(a) == list(b)
        assert all(a[k] == b[k] for k in a)


class TestLoadErrors:
    @pytest.fixture
    def saved(self, tmp_path):
        records, manifest = generate_synthetic(TINY)
        save_dataset(records, manifest, tmp_path / "ds")
        return tmp_path / "ds"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises((DatasetError, FileNotFoundError)):
            load_dataset(tmp_path / "nope" / "manifest.json")

    def test_corrupt_magic(self, saved):
        bin_path = next((saved / "records").glob("*.bin"))
        data = bytearray(bin_path.read_bytes())
        data[0] ^= 0xFF
        bin_path.write_bytes(bytes(data))
        with pytest.raises(DatasetError, match=bin_path.name):
            load_dataset(saved / "manifest.json")

    def test_truncated_binary(self, saved):
        bin_path = next((saved / "records").glob("*.bin"))
        bin_path.write_bytes(bin_path.read_bytes()[:-8])
        with pytest.raises(DatasetError, match="bytes, expected"):
            load_dataset(saved / "manifest.json")

    def test_bad_manifest_version(self, saved):
        path = saved / "manifest.json"
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="version"):
            load_dataset(path)

    def test_missing_record_file(self, saved):
        next((saved / "records").glob("*.json")).unlink()
        with pytest.raises((DatasetError, FileNotFoundError)):
            load_dataset(saved / "manifest.json")

    def test_label_mismatch_detected(self, saved):
        # corrupt a saliency value to be negative in the binary payload
        bin_path = sorted((saved / "records").glob("*.bin"))[0]
        data = bytearray(bin_path.read_bytes())
        # header 16 bytes + u4 label grid (32*32) then f4 saliency
        off = 16 + 4 * 32 * 32
        data[off:off + 4] = np.float32(-5.0).tobytes()
        bin_path.write_bytes(bytes(data))
        with pytest.raises(DatasetError):
            load_dataset(saved / "manifest.json")
