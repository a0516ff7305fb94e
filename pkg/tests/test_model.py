"""Tests for model construction and checkpoints."""

import numpy as np
import pytest

from mvad.errors import CompatibilityError
from mvad.model import (
    MANIFEST_NAME,
    MvadModel,
    count_parameters,
    load_checkpoint,
    load_teacher_weights,
    read_checkpoint_manifest,
    save_checkpoint,
)
from mvad.serialize import save_tensor


class TestMvadModel:
    def test_seeded_construction(self, tiny_config):
        a = dict(MvadModel.init(tiny_config).named_tensors())
        b = dict(MvadModel.init(tiny_config).named_tensors())
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_teacher_independent_of_student_layout(self, tiny_config):
        plain = MvadModel.init(tiny_config)
        wider = MvadModel.init(tiny_config.replace(blocks=[2, 2, 2], bottleneck_channels=32))
        for (name, t), (_, u) in zip(plain.teacher.named_tensors(), wider.teacher.named_tensors()):
            np.testing.assert_array_equal(t.data, u.data, err_msg=name)

    def test_teacher_not_trainable(self, tiny_model):
        names = [p.name for p in tiny_model.parameters()]
        assert names and not any(name.startswith("teacher.") for name in names)
        assert all(not t.requires_grad for _, t in tiny_model.teacher.named_tensors())

    def test_parameter_names(self, tiny_model):
        names = {p.name for p in tiny_model.parameters()}
        assert "mvas.stage1.block0.w_q" in names
        assert "neck.project.weight" in names
        assert "decoder.stage3.conv1.weight" in names

    def test_dtype_follows_config(self, tiny_config):
        assert MvadModel.init(tiny_config).dtype == np.float32
        assert MvadModel.init(tiny_config, dtype="float64").dtype == np.float64

    def test_count_parameters(self, tiny_model):
        counts = count_parameters(tiny_model)
        assert counts["teacher"] > 0
        assert counts["trainable"] == sum(p.tensor.data.size for p in tiny_model.parameters())


class TestCheckpoint:
    def test_roundtrip(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / "ckpt")
        assert path.name == MANIFEST_NAME
        loaded = load_checkpoint(tmp_path / "ckpt", expected=tiny_model.config)
        original = dict(tiny_model.named_tensors())
        for name, tensor in loaded.named_tensors():
            np.testing.assert_array_equal(tensor.data, original[name].data)
        assert loaded.config == tiny_model.config

    def test_manifest_records_run(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path)
        manifest = read_checkpoint_manifest(tmp_path)
        assert manifest["config_hash"] == tiny_model.config.config_hash()
        assert manifest["seed"] == "11"
        assert manifest["tensor.teacher.stem.weight"] == "4x3x3x3"

    def test_config_mismatch(self, tiny_model, tiny_config, tmp_path):
        save_checkpoint(tiny_model, tmp_path)
        with pytest.raises(CompatibilityError, match="does not match run config"):
            load_checkpoint(tmp_path, expected=tiny_config.replace(seed=12))

    def test_tampered_config(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path)
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text(manifest.read_text().replace('"seed": 11', '"seed": 13'))
        with pytest.raises(CompatibilityError, match="hash"):
            load_checkpoint(tmp_path)

    def test_wrong_tensor_shape(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path)
        save_tensor(np.zeros((2, 2), dtype=np.float32), tmp_path / "neck.project.bias.mvt")
        with pytest.raises(CompatibilityError, match="neck.project.bias"):
            load_checkpoint(tmp_path)

    def test_unknown_format_version(self, tiny_model, tmp_path):
        save_checkpoint(tiny_model, tmp_path)
        manifest = tmp_path / MANIFEST_NAME
        manifest.write_text(manifest.read_text().replace("format_version=1", "format_version=7"))
        with pytest.raises(CompatibilityError, match="format"):
            load_checkpoint(tmp_path)


class TestTeacherWeights:
    def test_load_external_weights(self, tiny_config, tmp_path):
        source = MvadModel.init(tiny_config.replace(seed=99))
        for name, tensor in source.teacher.named_tensors():
            save_tensor(tensor, tmp_path / f"{name}.mvt")
        model = MvadModel.init(tiny_config)
        load_teacher_weights(model, tmp_path)
        np.testing.assert_array_equal(
            model.teacher.stem.weight.data, source.teacher.stem.weight.data
        )

    def test_missing_file(self, tiny_model, tmp_path):
        with pytest.raises(CompatibilityError, match="missing teacher tensor"):
            load_teacher_weights(tiny_model, tmp_path)
