"""Tests for the mvad command line: generate, train, eval, heatmap, bench."""

import io
import json
import time

import pytest

from mvad import pipeline
from mvad.cli import main
from mvad.errors import NonFiniteError
from mvad.synthdata import DatasetSpec, generate


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def trained(tmp_path, config_file):
    """A two-step training run on the shared dataset; returns its run directory."""
    run_dir = tmp_path / "run"
    code, _, err = run("--config", str(config_file), "train", "--out", str(run_dir))
    assert code == 0, err
    return run_dir


class TestCli:
    def test_no_command(self):
        code, _, err = run()
        assert code == 2
        assert "usage" in err

    def test_unknown_flag(self):
        assert run("generate", "--bogus")[0] == 2

    def test_version(self, capsys):
        assert run("--version")[0] == 0

    def test_global_flags_after_subcommand(self, config_file, tmp_path):
        code, out, _ = run(
            "bench", "--flops-only", "--config", str(config_file), "-o", str(tmp_path / "b.csv")
        )
        assert code == 0
        assert "Wrote 8 rows" in out


class TestGenerateCommand:
    def _args(self, config_file, out):
        return (
            "--config",
            str(config_file),
            "generate",
            "--out",
            str(out),
            "--p-train",
            "2",
            "--p-test-normal",
            "1",
            "--p-test-anom",
            "1",
        )

    def test_summary(self, config_file, tmp_path):
        code, out, _ = run(*self._args(config_file, tmp_path / "data"))
        assert code == 0
        assert "  views: 3  resolution: 32" in out
        assert "  test samples: 2 (1 anomalous)" in out
        assert "  images: 12" in out

    def test_idempotent(self, config_file, tmp_path):
        args = self._args(config_file, tmp_path / "data")
        assert run(*args)[0] == 0
        manifest = (tmp_path / "data" / "manifest.json").read_bytes()
        assert run(*args)[0] == 0
        assert (tmp_path / "data" / "manifest.json").read_bytes() == manifest

    def test_different_spec_without_force(self, config_file, tmp_path):
        assert run(*self._args(config_file, tmp_path / "data"))[0] == 0
        code, _, err = run(*self._args(config_file, tmp_path / "data"), "--seed", "9")
        assert code == 5
        assert "force" in err

    def test_single_view_is_validation_error(self, config_file, tmp_path):
        code, _, err = run(*self._args(config_file, tmp_path / "data"), "--views", "1")
        assert code == 2
        assert "views >= 2" in err

    def test_output_path_is_a_file(self, config_file, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        assert run(*self._args(config_file, blocker))[0] == 3

    def test_spec_file(self, config_file, tmp_path):
        spec = tmp_path / "spec.txt"
        spec.write_text("p_train=1\np_test_normal=1\np_test_anom=0\ncategories=nut\n")
        code, out, _ = run(
            "--config", str(config_file), "generate", "--spec", str(spec), "--out",
            str(tmp_path / "data"),
        )
        assert code == 0
        assert "  train samples: 1" in out

    def test_seed_variable_overrides_flag(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("MVAS_SEED", "77")
        assert run(*self._args(config_file, tmp_path / "data"), "--seed", "5")[0] == 0
        manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
        assert manifest["seed"] == 77


class TestTrainCommand:
    def test_artifacts(self, trained):
        trace = (trained / "loss_trace.csv").read_text().splitlines()
        assert trace[0] == "step,epoch,loss"
        assert len(trace) - 1 == 2
        assert (trained / "checkpoint" / "manifest.txt").exists()
        assert json.loads((trained / "config.json").read_text())["seed"] == 11

    def test_deterministic_trace(self, config_file, tmp_path):
        traces = []
        for name in ("a", "b"):
            code, _, _ = run("--config", str(config_file), "train", "--out", str(tmp_path / name))
            assert code == 0
            traces.append((tmp_path / name / "loss_trace.csv").read_bytes())
        assert traces[0] == traces[1]

    def test_dump_graph(self, config_file, tmp_path):
        graph = tmp_path / "step0.dot"
        code, _, _ = run(
            "--config", str(config_file), "train", "--out", str(tmp_path / "r"),
            "--dump-graph", str(graph),
        )
        assert code == 0
        assert graph.read_text().startswith("digraph Tape {")

    def test_divergence_exit_code(self, config_file, tmp_path, monkeypatch):
        def explode(f_e, f_d):
            raise NonFiniteError("mse_loss produced non-finite values")

        monkeypatch.setattr(pipeline, "distillation_loss", explode)
        code, _, err = run("--config", str(config_file), "train", "--out", str(tmp_path / "r"))
        assert code == 4
        assert "diverged at step 0" in err

    def test_invalid_config_value(self, config_file, tmp_path):
        code, _, err = run("--config", str(config_file), "train", "--lr", "-1")
        assert code == 2
        assert "lr" in err


class TestEvalCommand:
    def test_report(self, trained):
        code, out, _ = run("eval", "--checkpoint", str(trained / "checkpoint"))
        assert code == 0
        report = json.loads((trained / "report.json").read_text())
        assert set(report["metrics"]) == {"sample", "image", "pixel"}
        assert sum(len(v) for v in report["metrics"].values()) == 10
        assert report["split"] == "test"
        assert report["checkpoint_config_hash"] == report["config_hash"]
        scores = (trained / "scores.csv").read_text().splitlines()
        assert scores[0].startswith("sample_id,category,sample_label,sample_score,view0_label")
        assert len(scores) == 1 + 6
        assert "Report:" in out

    def test_rerun_is_byte_identical(self, trained):
        run("eval", "--checkpoint", str(trained / "checkpoint"))
        first = (trained / "report.json").read_bytes()
        run("eval", "--checkpoint", str(trained / "checkpoint"))
        assert (trained / "report.json").read_bytes() == first

    def test_eval_settings_recorded(self, trained, tmp_path):
        out = tmp_path / "exact.json"
        code, _, _ = run(
            "eval", "--checkpoint", str(trained / "checkpoint"), "--pro-thresholds", "0",
            "--out", str(out),
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report["pro"]["thresholds"] is None
        assert report["checkpoint_config_hash"] != report["config_hash"]

    def test_normal_only_dataset_reports_nulls(self, trained, normal_only_dir):
        code, out, err = run(
            "eval", "--checkpoint", str(trained / "checkpoint"), "--dataset", str(normal_only_dir)
        )
        assert code == 0
        report = json.loads((trained / "report.json").read_text())
        assert report["metrics"]["sample"]["auroc"] is None
        assert "auroc=null" in out
        assert "sample.auroc undefined" in err

    def test_incompatible_dataset(self, trained, tmp_path):
        spec = DatasetSpec(
            seed=1, p_train=1, p_test_normal=1, p_test_anom=1, views=4, resolution=32
        )
        generate(spec, tmp_path / "four_views")
        code, _, err = run(
            "eval", "--checkpoint", str(trained / "checkpoint"), "--dataset",
            str(tmp_path / "four_views"),
        )
        assert code == 5
        assert "model expects v=3" in err

    def test_missing_checkpoint(self, tmp_path):
        assert run("eval", "--checkpoint", str(tmp_path / "nowhere"))[0] == 3


class TestHeatmapCommand:
    def test_one_png_per_view(self, trained, dataset_dir, tmp_path):
        code, out, _ = run(
            "heatmap", str(dataset_dir / "test" / "00001"), "--checkpoint",
            str(trained / "checkpoint"), "--out", str(tmp_path / "maps"),
        )
        assert code == 0
        assert sorted(p.name for p in (tmp_path / "maps").iterdir()) == [
            "view0.png",
            "view1.png",
            "view2.png",
        ]
        assert len(out.splitlines()) == 3


class TestBenchCommand:
    def test_flops_only_is_fast_and_deterministic(self, tmp_path):
        run("bench", "--dry-run", "--hw", "256", "1024", "4096", "-o", str(tmp_path / "b.csv"))
        start = time.perf_counter()
        code, out, _ = run(
            "bench", "--flops-only", "--hw", "256", "1024", "4096", "-o", str(tmp_path / "a.csv")
        )
        assert time.perf_counter() - start < 1.0
        assert code == 0
        assert len(out.splitlines()) == 6 + 1
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_meta_records_mode(self, tmp_path):
        run("bench", "--flops-only", "--hw", "256", "1024", "-o", str(tmp_path / "a.csv"))
        meta = json.loads((tmp_path / "a.meta.json").read_text())
        assert meta["mode"] == "flops-only"
        assert meta["multi_threaded"] is False

    def test_invalid_sweep(self, tmp_path):
        code, _, err = run("bench", "--flops-only", "--hw", "300", "-o", str(tmp_path / "a.csv"))
        assert code == 2
        assert "square" in err

    @pytest.mark.parametrize(
        "flag,value,message",
        [("--a-values", "a2", "window grids"), ("--k-values", "4,2", "3 stage entries")],
    )
    def test_invalid_ablation_axes(self, tmp_path, flag, value, message):
        code, _, err = run("bench", "--ablation", flag, value, "-o", str(tmp_path / "x.csv"))
        assert code == 2
        assert message in err

    def test_ablation_meta_records_axes(self, tmp_path, config_file):
        out = tmp_path / "ablation.csv"
        code, stdout, _ = run(
            "bench", "--ablation", "--config", str(config_file),
            "--a-values", "4", "--k-values", "a2", "--widths", "4", "6", "-o", str(out),
        )
        assert code == 0
        assert "0 cells run, 2 skipped" in stdout
        meta = json.loads(out.with_suffix(".meta.json").read_text())
        assert (meta["widths"], meta["a_values"]) == ([4, 6], [[4, 4, 4]])
        assert meta["k_values"] == ["a2"]

    @pytest.mark.slow
    def test_timed_sweep_notes_quiescence(self, tmp_path):
        code, _, err = run(
            "bench", "--hw", "16", "64", "256", "--c", "4", "--v", "2", "--k", "1",
            "-o", str(tmp_path / "t.csv"),
        )
        assert code == 0
        assert "idle machine" in err
        assert "note" in json.loads((tmp_path / "t.meta.json").read_text())
