import json

import numpy as np
import pytest

from osgate_exporter.cli import main
from osgate_exporter.config import ExportConfig
from osgate_exporter.errors import DetectorError, MappingError
from osgate_exporter.export import run_export
from osgate_exporter.verify import run_verify

from conftest import CLASS_NAMES, MAPPING, toy_annotations


def load_config(path, **overrides):
    raw = json.loads(path.read_text())
    raw.update(overrides)
    path.write_text(json.dumps(raw))
    return ExportConfig.from_json(path)


class TestExportContract:
    def test_ten_image_export_loads_through_primary_validator(self, toy_setup):
        tmp, ann_path, _, config_path = toy_setup
        config = ExportConfig.from_json(config_path)
        stats = run_export(config, tmp / "out")

        # the acceptance contract: the primary reader validates the container
        # with zero errors and the record counts line up
        from osgate import read_dataset
        dataset = read_dataset(tmp / "out")
        annotations = toy_annotations()
        assert len(dataset.ground_truth) == len(annotations["annotations"])
        assert len(dataset.detections) == stats.detections
        # toy detector: one detection per annotation plus one extra per image
        assert stats.detections == len(annotations["annotations"]) + 10
        assert dataset.manifest.num_classes == len(CLASS_NAMES)
        assert dataset.manifest.embedding_dim == 32
        assert dataset.manifest.detector_name == "toy-oracle"
        drones = [g for g in dataset.ground_truth if g.class_id == -1]
        assert len(drones) == sum(
            1 for a in annotations["annotations"] if a["category_id"] == 3)
        print(f"PASS exporter-contract: {stats.detections} detections / "
              f"{len(dataset.ground_truth)} ground-truth boxes validated")

    def test_export_is_deterministic(self, toy_setup):
        tmp, _, _, config_path = toy_setup
        config = ExportConfig.from_json(config_path)
        run_export(config, tmp / "a")
        run_export(config, tmp / "b")
        for name in ("manifest.json", "detections.bin", "groundtruth.bin"):
            assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()

    def test_zero_image_input_yields_valid_empty_dataset(self, toy_setup):
        tmp, ann_path, _, config_path = toy_setup
        ann_path.write_text(json.dumps(
            {"images": [], "annotations": [], "categories": []}))
        config = ExportConfig.from_json(config_path)
        stats = run_export(config, tmp / "empty")
        assert stats.detections == 0 and stats.ground_truth == 0

        from osgate import read_dataset
        dataset = read_dataset(tmp / "empty")
        assert dataset.detections == [] and dataset.ground_truth == []

    def test_unmapped_annotation_class_is_explicit_error(self, toy_setup):
        tmp, _, _, config_path = toy_setup
        config = load_config(config_path,
                             class_mapping={"airplane": 0, "helicopter": 1})
        with pytest.raises(MappingError, match="drone"):
            run_export(config, tmp / "out")
        assert not (tmp / "out").exists()

    def test_wrong_embedding_dimension_aborts_before_writing(self, toy_setup):
        tmp, _, ckpt_path, config_path = toy_setup
        ckpt_path.write_text(json.dumps({"embedding_dim": 16, "seed": 7}))
        config = ExportConfig.from_json(config_path)  # config still expects 32
        with pytest.raises(DetectorError, match="dimension"):
            run_export(config, tmp / "out")
        assert not (tmp / "out").exists()

    def test_score_floor_drops_low_confidence_outputs(self, toy_setup):
        tmp, _, _, config_path = toy_setup
        config = load_config(config_path, score_floor=0.9)
        stats = run_export(config, tmp / "floored")
        assert stats.skipped_low_score > 0

    def test_unknown_detector_name(self, toy_setup):
        tmp, _, _, config_path = toy_setup
        config = load_config(config_path, detector="warp-drive")
        with pytest.raises(DetectorError):
            run_export(config, tmp / "out")


class TestVerify:
    def test_fresh_export_verifies_with_matching_counts(self, toy_setup, capsys):
        tmp, _, _, config_path = toy_setup
        assert main(["export", "--config", str(config_path),
                     "--out", str(tmp / "out")]) == 0
        assert main(["verify", str(tmp / "out")]) == 0
        text = capsys.readouterr().out
        annotations = toy_annotations()
        assert f"ground truth: {len(annotations['annotations'])}" in text
        assert "checksum:" in text

    def test_corrupted_float_fails_with_record_index(self, toy_setup, capsys):
        tmp, _, _, config_path = toy_setup
        config = ExportConfig.from_json(config_path)
        run_export(config, tmp / "out")
        blob = bytearray((tmp / "out" / "groundtruth.bin").read_bytes())
        offset = 16 + 6 * 4 + 4  # record 1, x_min column
        blob[offset:offset + 4] = np.float32(np.inf).tobytes()
        (tmp / "out" / "groundtruth.bin").write_bytes(bytes(blob))
        assert main(["verify", str(tmp / "out")]) == 1
        assert "record 1" in capsys.readouterr().out

    def test_empty_dataset_verifies_cleanly(self, toy_setup, capsys):
        tmp, ann_path, _, config_path = toy_setup
        ann_path.write_text(json.dumps(
            {"images": [], "annotations": [], "categories": []}))
        config = ExportConfig.from_json(config_path)
        run_export(config, tmp / "empty")
        assert run_verify(tmp / "empty") == 0
        assert "detections: 0" in capsys.readouterr().out


class TestConfig:
    def test_mapping_values_validated(self, toy_setup):
        _, _, _, config_path = toy_setup
        with pytest.raises(Exception, match="mapping"):
            load_config(config_path, class_mapping={"airplane": 5})

    def test_manifest_extension_keys_survive_primary_reader(self, toy_setup):
        tmp, _, _, config_path = toy_setup
        config = ExportConfig.from_json(config_path)
        run_export(config, tmp / "out")
        manifest = json.loads((tmp / "out" / "manifest.json").read_text())
        assert manifest["embedding_tap"] == "decoder.final"

        from osgate import read_dataset
        read_dataset(tmp / "out")  # unknown optional keys are ignored
