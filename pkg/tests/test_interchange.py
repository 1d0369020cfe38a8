import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from osgate._util import sha256_of_files
from osgate.errors import (
    CompletenessError,
    DataFormatError,
    SchemaError,
    ValidationError,
)
from osgate.interchange import (
    BoundingBox,
    CalibrationProfile,
    ClassDensityModel,
    JointThresholds,
    ModelBundle,
    ThresholdPolicy,
    load_models,
    read_dataset,
    save_models,
    write_dataset,
)

from conftest import make_detection, make_gt, make_manifest


def dataset_hash(path):
    return sha256_of_files(path / name for name in
                           ("manifest.json", "detections.bin", "groundtruth.bin"))


class TestBoundingBox:
    def test_quantizes_to_float32(self):
        box = BoundingBox(0.1, 0.2, 10.3, 10.4)
        assert box.x_min == float(np.float32(0.1))

    def test_rejects_inverted_corners(self):
        with pytest.raises(ValidationError):
            BoundingBox(5, 0, 1, 10)

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            BoundingBox(0, 0, np.inf, 1)


class TestDatasetRoundTrip:
    def test_single_record_bit_for_bit(self, tmp_path):
        manifest = make_manifest()
        det = make_detection(logits=(0.25, -1.5), embedding=(0.1, 0.2, 0.3, 0.4),
                             score=0.75)
        gt = make_gt()
        write_dataset(manifest, [det], [gt], tmp_path / "ds")
        loaded = read_dataset(tmp_path / "ds")
        assert loaded.manifest == manifest
        assert loaded.detections[0] == det
        assert loaded.ground_truth[0] == gt

    def test_empty_detections_valid(self, tmp_path):
        manifest = make_manifest()
        write_dataset(manifest, [], [make_gt()], tmp_path / "ds")
        loaded = read_dataset(tmp_path / "ds")
        assert loaded.detections == []
        assert len(loaded.ground_truth) == 1

    def test_manifest_only_container(self, tmp_path):
        write_dataset(make_manifest(), [], [], tmp_path / "ds")
        loaded = read_dataset(tmp_path / "ds")
        assert loaded.detections == [] and loaded.ground_truth == []

    def test_absent_detector_score_round_trips(self, tmp_path):
        det = make_detection(score=None)
        write_dataset(make_manifest(), [det], [], tmp_path / "ds")
        assert read_dataset(tmp_path / "ds").detections[0].detector_score is None

    def test_writes_are_byte_identical(self, tmp_path):
        manifest = make_manifest()
        records = [make_detection(f"img-{i}", logits=(i * 0.5, 1.0)) for i in range(5)]
        gts = [make_gt(f"img-{i}") for i in range(5)]
        write_dataset(manifest, records, gts, tmp_path / "a")
        write_dataset(manifest, records, gts, tmp_path / "b")
        assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")

    @given(emb=st.lists(st.floats(-1e6, 1e6, width=32), min_size=4, max_size=4),
           score=st.floats(0, 1, width=32))
    def test_random_records_round_trip(self, tmp_path_factory, emb, score):
        tmp = tmp_path_factory.mktemp("rt")
        det = make_detection(embedding=emb, score=score)
        write_dataset(make_manifest(), [det], [], tmp / "ds")
        assert read_dataset(tmp / "ds").detections[0] == det


class TestDatasetValidation:
    def test_embedding_dim_mismatch_names_index(self, tmp_path):
        manifest = make_manifest(dim=256)
        bad = make_detection(embedding=np.zeros(255))
        with pytest.raises(SchemaError, match="detection 0"):
            write_dataset(manifest, [bad], [], tmp_path / "ds")

    def test_logits_length_mismatch(self, tmp_path):
        bad = make_detection(logits=(1.0, 2.0, 3.0))
        with pytest.raises(SchemaError, match="logits length 3"):
            write_dataset(make_manifest(num_classes=2), [bad], [], tmp_path / "ds")

    def test_gt_class_out_of_range(self, tmp_path):
        with pytest.raises(SchemaError, match="ground truth 0"):
            write_dataset(make_manifest(num_classes=2), [], [make_gt(class_id=2)],
                          tmp_path / "ds")

    def test_sentinel_class_accepted(self, tmp_path):
        write_dataset(make_manifest(), [], [make_gt(class_id=-1)], tmp_path / "ds")
        assert read_dataset(tmp_path / "ds").ground_truth[0].class_id == -1

    def test_truncated_file_is_format_error(self, tmp_path):
        write_dataset(make_manifest(), [make_detection()], [], tmp_path / "ds")
        blob = (tmp_path / "ds" / "detections.bin").read_bytes()
        (tmp_path / "ds" / "detections.bin").write_bytes(blob[:-4])
        with pytest.raises(DataFormatError):
            read_dataset(tmp_path / "ds")

    def test_bad_magic_is_format_error(self, tmp_path):
        write_dataset(make_manifest(), [], [], tmp_path / "ds")
        blob = (tmp_path / "ds" / "detections.bin").read_bytes()
        (tmp_path / "ds" / "detections.bin").write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(DataFormatError, match="magic"):
            read_dataset(tmp_path / "ds")

    def test_non_finite_float_names_record_index(self, tmp_path):
        dets = [make_detection(f"img-{i}") for i in range(3)]
        write_dataset(make_manifest(), dets, [], tmp_path / "ds")
        path = tmp_path / "ds" / "detections.bin"
        blob = bytearray(path.read_bytes())
        stride = (6 + 2 + 4) * 4
        offset = 16 + stride + 6 * 4  # record 1, first logit
        blob[offset : offset + 4] = np.float32(np.nan).tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(ValidationError, match="record 1"):
            read_dataset(tmp_path / "ds")

    def test_unknown_optional_manifest_key_ignored(self, tmp_path):
        write_dataset(make_manifest(), [], [], tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        raw = json.loads(manifest_path.read_text())
        raw["exporter_build"] = "abc123"
        manifest_path.write_text(json.dumps(raw))
        read_dataset(tmp_path / "ds")

    def test_unknown_required_feature_fails(self, tmp_path):
        write_dataset(make_manifest(), [], [], tmp_path / "ds")
        manifest_path = tmp_path / "ds" / "manifest.json"
        raw = json.loads(manifest_path.read_text())
        raw["required_features"] = ["holographic-boxes"]
        manifest_path.write_text(json.dumps(raw))
        with pytest.raises(SchemaError, match="holographic-boxes"):
            read_dataset(tmp_path / "ds")


def simple_model(class_id, prior=0.5, dim=3):
    return ClassDensityModel(
        class_id=class_id,
        weights=np.array([1.0]),
        means=np.full((1, dim), float(class_id)),
        chol_covariances=np.eye(dim)[None, :, :] * (1.0 + class_id),
        class_prior=prior,
        metadata={"n_samples": 10},
    )


class TestModelBundle:
    def bundle(self):
        singles = (simple_model(0), simple_model(1))
        return ModelBundle(num_classes=2, embedding_dim=3, single=singles,
                           multi=singles, fit_summary={"total_matched": 20})

    def test_round_trip_exact(self, tmp_path):
        bundle = self.bundle()
        bundle.profile = CalibrationProfile(t_model=1.234567890123, t_gmm=17.25)
        bundle.thresholds = {
            "raw": JointThresholds(0.5, 0.25, ThresholdPolicy(0.05, 0.95))
        }
        save_models(bundle, tmp_path / "m.json")
        loaded = load_models(tmp_path / "m.json")
        for orig, new in zip(bundle.single, loaded.single):
            assert np.array_equal(orig.weights, new.weights)
            assert np.array_equal(orig.means, new.means)
            assert np.array_equal(orig.chol_covariances, new.chol_covariances)
            assert orig.class_prior == new.class_prior
        assert loaded.profile.t_model == bundle.profile.t_model
        assert loaded.thresholds["raw"].tau_gmm == 0.25
        assert loaded.fit_summary == bundle.fit_summary

    def test_missing_class_is_completeness_error(self, tmp_path):
        bundle = self.bundle()
        bundle.single = (simple_model(0, prior=1.0),)
        with pytest.raises(CompletenessError):
            save_models(bundle, tmp_path / "m.json")

    def test_newer_minor_version_with_unknown_fields_loads(self, tmp_path):
        save_models(self.bundle(), tmp_path / "m.json")
        raw = json.loads((tmp_path / "m.json").read_text())
        raw["format"]["minor"] = 9
        raw["future_optional_field"] = {"anything": 1}
        (tmp_path / "m.json").write_text(json.dumps(raw))
        loaded = load_models(tmp_path / "m.json")
        assert loaded.num_classes == 2

    def test_wrong_major_version_rejected(self, tmp_path):
        save_models(self.bundle(), tmp_path / "m.json")
        raw = json.loads((tmp_path / "m.json").read_text())
        raw["format"]["major"] = 2
        (tmp_path / "m.json").write_text(json.dumps(raw))
        with pytest.raises(DataFormatError):
            load_models(tmp_path / "m.json")

    def test_save_is_deterministic(self, tmp_path):
        save_models(self.bundle(), tmp_path / "a.json")
        save_models(self.bundle(), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestInvariants:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            ClassDensityModel(
                class_id=0,
                weights=np.array([0.6, 0.6]),
                means=np.zeros((2, 2)),
                chol_covariances=np.stack([np.eye(2)] * 2),
                class_prior=1.0,
            )

    def test_cholesky_diagonal_must_be_positive(self):
        bad = np.eye(2)
        bad[1, 1] = 0.0
        with pytest.raises(ValidationError):
            ClassDensityModel(
                class_id=0,
                weights=np.array([1.0]),
                means=np.zeros((1, 2)),
                chol_covariances=bad[None],
                class_prior=1.0,
            )

    def test_profile_requires_positive_temperature(self):
        with pytest.raises(ValidationError):
            CalibrationProfile(t_model=0.0)
